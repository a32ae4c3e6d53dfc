#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

#include "cleftnet/labels.hpp"
#include "cleftnet/tensor.hpp"

namespace cleftnet {

using Rng = std::mt19937_64;

class ImportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- VOL1 container -------------------------------------------------------

enum class Vol1Type : std::uint8_t { Raw = 0, Mask = 1, Field = 2 };

/// One (d,h,w) array. `bytes` holds Raw/Mask payloads, `field` holds Field.
struct Vol1 {
  Vol1Type type = Vol1Type::Raw;
  std::array<float, 3> spacing{1.f, 1.f, 1.f};
  Tensor<std::uint8_t> bytes;
  Tensor<float> field;

  Shape extents() const { return type == Vol1Type::Field ? field.shape() : bytes.shape(); }
};

Vol1 make_vol1(Tensor<std::uint8_t> data, Vol1Type type, const Spacing& spacing = kUnitSpacing);
Vol1 make_vol1(Tensor<float> field, const Spacing& spacing = kUnitSpacing);

void write_vol1(const std::string& path, const Vol1& v);
Vol1 read_vol1(const std::string& path);

std::string encode_vol1(const Vol1& v);
Vol1 decode_vol1(const std::string& bytes);

// ---- volumes ---------------------------------------------------------------

struct Volume {
  std::string name;
  Tensor<std::uint8_t> raw;     // (d,h,w)
  Tensor<std::uint8_t> labels;  // (d,h,w), 1 = cleft
  Spacing spacing = kCremiSpacing;

  void validate() const;
};

/// Writes `<prefix>.raw.vol1` and `<prefix>.labels.vol1`.
void save_volume(const Volume& v, const std::string& prefix);
Volume load_volume(const std::string& prefix);
Volume load_volume(const std::string& raw_path, const std::string& labels_path);

struct CremiImportOptions {
  std::string raw_dataset = "volumes/raw";
  std::string cleft_dataset = "volumes/labels/clefts";
  std::uint64_t background_sentinel = 0xffffffffffffffffULL;
};

/// Reads raw intensities and cleft ids from an HDF5 file. Spacing comes from a
/// "resolution" attribute on the raw or cleft dataset when present.
Volume import_cremi(const std::string& path, const CremiImportOptions& opts = {});

/// Every dataset path inside an HDF5 file, sorted.
std::vector<std::string> hdf5_dataset_paths(const std::string& path);

/// First `train_slices` slices for training, the rest for validation.
std::pair<Volume, Volume> split_by_slices(const Volume& v, std::size_t train_slices);

/// 100/25 on a 125-slice volume, otherwise the same 80% proportion.
std::size_t default_train_slices(std::size_t depth);

// ---- patches ---------------------------------------------------------------

/// Volume with its boundary label precomputed over the full extent.
struct LabeledVolume {
  Volume volume;
  Tensor<float> boundary;  // tanh distance map, (d,h,w)
};

LabeledVolume label_volume(Volume v);

struct RejectionPolicy {
  std::size_t min_cleft_voxels = 200;
  double reject_probability = 0.95;
};

struct AugmentProbabilities {
  double rotate = 0.5;
  double flip = 0.5;
  double grayscale = 0.2;
};

struct AugmentRecord {
  int quarter_turns = 0;  // in-plane, counter-clockwise
  int flip_axis = -1;     // 0 depth, 1 height, 2 width, -1 none
  bool grayscale = false;
  double gain = 1;
  double offset = 0;
};

struct PatchSample {
  Tensor<float> raw;  // (d,h,w) in [0,1]
  Tensor<float> y_s;
  Tensor<float> y_b;
  Triple origin{0, 0, 0};
  std::size_t draws = 1;
  AugmentRecord aug;
};

PatchSample crop_patch(const LabeledVolume& v, const Triple& origin, const Triple& size);

/// Uniform origin; patches with fewer than `min_cleft_voxels` cleft voxels are
/// redrawn with probability `reject_probability`.
PatchSample sample_patch(const LabeledVolume& v, const Triple& size, Rng& rng, const RejectionPolicy& policy = {});

PatchSample augment(PatchSample p, Rng& rng, const AugmentProbabilities& probs = {});

// Geometric pieces of augment, exposed for testing.
template <typename T>
Tensor<T> rotate_in_plane(const Tensor<T>& t, int quarter_turns);
template <typename T>
Tensor<T> flip_axis(const Tensor<T>& t, int axis);

// ---- synthetic data --------------------------------------------------------

struct SynthOptions {
  std::uint64_t seed = 0;
  Triple extents{40, 64, 64};
  std::size_t n_clefts = 6;
  double thickness = 2.0;
  double noise = 0.06;
};

/// Dark curved sheets on a smooth textured background, unit spacing.
Volume synthesize(const SynthOptions& opts);

}  // namespace cleftnet
