#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cleftnet/data.hpp"
#include "cleftnet/model.hpp"
#include "cleftnet/train.hpp"

namespace cleftnet {

struct DataConfig {
  // VOL1 volume prefixes (`<prefix>.raw.vol1`, `<prefix>.labels.vol1`).
  std::string train;
  std::string validation;
  // CREMI-style HDF5 file; split by slices when `train` is empty.
  std::string hdf5;
  CremiImportOptions cremi;
  std::size_t train_slices = 0;  // 0: default split
  SynthOptions synth;
  // Synthetic validation volume; its cleft count scales with its depth.
  Triple synth_validation_extents{16, 64, 64};
};

/// Training volume from `d.synth` with `seed`, and a separately generated
/// validation volume of `d.synth_validation_extents`.
std::pair<Volume, Volume> synthetic_pair(const DataConfig& d, std::uint64_t seed);

struct EvalConfig {
  double threshold = 0.5;
  std::vector<double> sweep;  // extra thresholds reported by `eval`
  std::optional<Spacing> spacing;
  Triple overlap{0, 0, 0};
};

/// Everything a command needs. Fields missing from a config file keep their
/// defaults; `variant`, when set, is applied to `model` as a preset.
struct RunConfig {
  std::uint64_t seed = 0;
  std::optional<std::string> variant;
  CleftNetConfig model = desk_config();
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;

  /// Model config with the preset applied.
  CleftNetConfig resolved_model() const;
  void validate() const;
};

/// Desk-scale defaults.
RunConfig default_run_config();

/// JSON object with optional sections "model", "train", "data", "eval" and
/// top-level "seed" and "variant". Unknown keys throw ConfigError naming them.
RunConfig parse_run_config(const std::string& text, RunConfig base = default_run_config());
RunConfig load_run_config(const std::string& path, RunConfig base = default_run_config());
std::string run_config_to_json(const RunConfig& cfg);

/// SHA-256 (hex) of the canonical serialization.
std::string config_hash(const RunConfig& cfg);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

/// "dz,dy,dx" with positive components.
Spacing parse_spacing(const std::string& s);

}  // namespace cleftnet
