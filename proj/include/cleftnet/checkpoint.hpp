#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cleftnet/model.hpp"
#include "cleftnet/tensor.hpp"

namespace cleftnet {

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;  // byte offset into the payload
};

/// CKPT1: magic, u64 little-endian header length, JSON header with the model
/// config and tensor manifest, then every tensor as little-endian f32 in
/// manifest order.
struct Checkpoint {
  CleftNetConfig config;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  // Opaque JSON object stored alongside the manifest (training progress); empty if absent.
  std::string extra;

  std::vector<CheckpointEntry> manifest() const;
  const Tensor<float>* find(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

template <typename T>
Checkpoint snapshot(const Model<T>& m);

/// Copies the checkpoint tensors into `m`. Throws FormatError naming the first
/// entry that is missing or has a different shape, or when the configs differ.
template <typename T>
void restore(Model<T>& m, const Checkpoint& c);

void save_model(const Model<float>& m, const std::string& path);
Model<float> load_model(const std::string& path);

}  // namespace cleftnet
