#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "cleftnet/autodiff.hpp"
#include "cleftnet/tensor.hpp"

namespace cleftnet {

/// Physical voxel size along (depth, height, width).
using Spacing = std::array<double, 3>;

inline constexpr Spacing kUnitSpacing{1.0, 1.0, 1.0};
inline constexpr Spacing kCremiSpacing{40.0, 4.0, 4.0};

class EmptyTargetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Exact squared Euclidean distance from every voxel of a (d,h,w) grid to the
/// nearest nonzero voxel of `mask`, computed with separable lower envelopes of
/// parabolas. Throws EmptyTargetError when the mask has no nonzero voxel.
Tensor<double> squared_distance_transform(const Tensor<std::uint8_t>& mask, const Spacing& spacing = kUnitSpacing);
Tensor<double> euclidean_distance_transform(const Tensor<std::uint8_t>& mask, const Spacing& spacing = kUnitSpacing);

/// Boundary label: tanh of the unit-spacing distance from each cleft voxel to
/// the nearest background voxel, zero outside clefts.
Tensor<double> tanh_distance_map(const Tensor<std::uint8_t>& clefts);

inline constexpr double kProbabilityClamp = 1e-7;

/// Index set used by the second coherence term.
enum class CoherenceForm {
  Consistent,  // -(1 - yb) log P(y_s = 0): penalizes a confident cleft where no boundary is predicted
  Literal,     // -(1 - yb) log P(y_s = 1), exactly as the formula is printed
};

struct LossWeights {
  double alpha_boundary = 0.5;
  double alpha_coherence = 0.2;
  CoherenceForm coherence_form = CoherenceForm::Consistent;
  // A voxel counts as a predicted boundary voxel when yb_hat exceeds this.
  double boundary_threshold = 0.5 * std::tanh(1.0);
};

struct LossTerms {
  double total = 0;
  double segmentation = 0;
  double boundary = 0;
  double coherence = 0;
};

// All losses are sums over voxels divided by `batch_size`; the class-balance
// weights are computed over every voxel passed in.

template <typename T>
double segmentation_loss(const Tensor<T>& prob, const Tensor<T>& y_s, std::size_t batch_size = 1);

template <typename T>
double boundary_loss(const Tensor<T>& yb_hat, const Tensor<T>& y_b, std::size_t batch_size = 1);

template <typename T>
double coherence_loss(const Tensor<T>& prob, const Tensor<T>& yb_hat, const LossWeights& weights = {},
                      std::size_t batch_size = 1);

template <typename T>
LossTerms total_loss(const Tensor<T>& prob, const Tensor<T>& yb_hat, const Tensor<T>& y_s, const Tensor<T>& y_b,
                     const LossWeights& weights = {}, std::size_t batch_size = 1);

namespace ad {

template <typename T>
Var segmentation_loss(Tape<T>& t, Var prob, const Tensor<T>& y_s, std::size_t batch_size = 1);

template <typename T>
Var boundary_loss(Tape<T>& t, Var yb_hat, const Tensor<T>& y_b, std::size_t batch_size = 1);

template <typename T>
Var coherence_loss(Tape<T>& t, Var prob, Var yb_hat, const LossWeights& weights = {}, std::size_t batch_size = 1);

struct LossVars {
  Var total, segmentation, boundary, coherence;
};

/// L_s + a1 L_b + a2 L_c. With an invalid `yb_hat` (segmentation-only
/// models) the total is L_s alone.
template <typename T>
LossVars total_loss(Tape<T>& t, Var prob, Var yb_hat, const Tensor<T>& y_s, const Tensor<T>& y_b,
                    const LossWeights& weights = {}, std::size_t batch_size = 1);

}  // namespace ad

}  // namespace cleftnet
