#pragma once

#include <cstdint>
#include <deque>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cleftnet/attention.hpp"
#include "cleftnet/autodiff.hpp"
#include "cleftnet/tensor.hpp"

namespace cleftnet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Resizing block used in place of pooling, upsampling and the bottom block.
enum class BlockVariant {
  FaLearnableQuery,  // feature augmentor
  FaInputQuery,      // self-attention, query projected from the resampled input
  Gated,             // resample(M + SWA(M) + CWA(M))
  Plain,             // max pooling / trilinear upsampling / nothing
};

enum class LabelMode { Augmented, SegmentationOnly };

std::string to_string(BlockVariant v);
std::string to_string(LabelMode m);
BlockVariant parse_block_variant(const std::string& s);
LabelMode parse_label_mode(const std::string& s);

struct CleftNetConfig {
  std::vector<std::size_t> channels{32, 64, 96, 128};
  std::size_t bottom_channels = 160;
  std::size_t channel_divisor = 1;
  BlockVariant variant = BlockVariant::FaLearnableQuery;
  LabelMode label_mode = LabelMode::Augmented;
  Triple patch{8, 256, 256};
  // Encoder blocks that also halve depth; the rest only halve height and width.
  std::size_t depth_halvings = 1;
  std::size_t in_channels = 1;
  double query_init_std = 0.02;

  std::vector<std::size_t> level_channels() const;
  std::size_t bottom() const;
  std::size_t head_channels() const { return label_mode == LabelMode::Augmented ? 2 : 1; }
  std::size_t levels() const { return channels.size(); }
  /// Resampling factor of encoder block `level`.
  Triple factor(std::size_t level) const;
  /// Spatial grid entering encoder block `level` (level == levels() is the bottom).
  Triple grid(std::size_t level) const;
  void validate() const;

  friend bool operator==(const CleftNetConfig&, const CleftNetConfig&) = default;
};

/// Channels [4,8,12,16], bottom 20, patch 8x32x32.
CleftNetConfig desk_config();

/// Named presets: cleftnet, no-fa, no-la, selfattn, resunet, gated.
CleftNetConfig apply_variant(CleftNetConfig cfg, const std::string& name);
const std::vector<std::string>& variant_names();

std::string config_to_json(const CleftNetConfig& cfg);
/// Fields present in `text` override `base`; unknown keys throw ConfigError.
CleftNetConfig config_from_json(const std::string& text, CleftNetConfig base = {});

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
  bool trainable;
};

template <typename T>
struct ConstNamedTensor {
  std::string name;
  const Tensor<T>* tensor;
  bool trainable;
};

template <typename T>
class Model {
 public:
  struct Output {
    Var prob;      // (b,d,h,w)
    Var boundary;  // (b,d,h,w); invalid in segmentation-only mode
  };

  explicit Model(CleftNetConfig cfg, std::uint64_t seed = 0);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const CleftNetConfig& config() const { return cfg_; }

  /// `batch` is (b,d,h,w) or (b,d,h,w,c_in). With `track` false the
  /// parameters enter the tape as constants and no backward closures are kept.
  Output forward(Tape<T>& tape, const Tensor<T>& batch, BatchNormMode mode, bool track = true);

  struct Prediction {
    Tensor<T> prob;
    Tensor<T> boundary;  // empty in segmentation-only mode
  };
  Prediction predict(const Tensor<T>& batch, BatchNormMode mode = BatchNormMode::Inference);

  std::vector<Parameter<T>*> parameters();
  /// Every persisted tensor in a fixed order: parameters and batch-norm statistics.
  std::vector<NamedTensor<T>> state();
  std::vector<ConstNamedTensor<T>> state() const;
  std::size_t parameter_count() const;
  void zero_grad();

 private:
  struct ConvBN {
    Parameter<T>* weight;
    Parameter<T>* gamma;
    Parameter<T>* beta;
    BatchNormStats<T>* stats;
  };
  struct Residual {
    ConvBN first, second;
  };
  struct Resize {
    ResidualKind kind = ResidualKind::Identity;
    Triple factor{1, 1, 1};
    Parameter<T>* query = nullptr;
    Parameter<T>* query_kernel = nullptr;
    Parameter<T>* key_kernel = nullptr;
    Parameter<T>* value_kernel = nullptr;
    Parameter<T>* output_kernel = nullptr;
    Parameter<T>* gate_spatial = nullptr;
    Parameter<T>* gate_channel = nullptr;
  };
  struct Stage {
    ConvBN conv;
    Residual res;
    Resize resize;
  };

  Parameter<T>* add_param(const std::string& name, Tensor<T> value);
  Tensor<T> kaiming(const Shape& kernel_shape);
  ConvBN make_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k);
  Residual make_residual(const std::string& name, std::size_t c);
  Resize make_resize(const std::string& name, std::size_t c, ResidualKind kind, const Triple& in_grid,
                     const Triple& out_grid, const Triple& factor);

  Var use(Tape<T>& t, Parameter<T>* p) const;
  Var apply(Tape<T>& t, Var x, const ConvBN& c, BatchNormMode mode, bool act) const;
  Var apply(Tape<T>& t, Var x, const Residual& r, BatchNormMode mode) const;
  Var apply(Tape<T>& t, Var x, const Resize& r) const;

  CleftNetConfig cfg_;
  std::mt19937_64 rng_;
  bool track_ = true;
  std::deque<Parameter<T>> params_;
  std::deque<BatchNormStats<T>> bn_;
  std::vector<NamedTensor<T>> state_;
  std::vector<Stage> encoder_;
  Stage bottom_;
  std::vector<Stage> decoder_;  // decoder_[i] restores the grid of encoder level i
  Parameter<T>* head_weight_ = nullptr;
  Parameter<T>* head_bias_ = nullptr;
};

/// Same architecture in another precision, with every persisted tensor cast.
template <typename U, typename T>
Model<U> convert_model(const Model<T>& m);

}  // namespace cleftnet
