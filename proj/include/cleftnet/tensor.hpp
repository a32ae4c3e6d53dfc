#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cleftnet {

using Shape = std::vector<std::size_t>;

/// Per-axis (depth, height, width) triple used for strides, padding and
/// resampling factors.
using Triple = std::array<std::size_t, 3>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed or truncated file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array. Feature tensors are laid out as (d, h, w, c) with an
/// optional leading batch axis, i.e. channels are the fastest-moving index.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{});
  Tensor(Shape shape, std::vector<T> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  Shape strides() const;

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::initializer_list<std::size_t> index);
  const T& at(std::initializer_list<std::size_t> index) const;

  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(T value);
  bool all_finite() const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
Tensor<T> identity_matrix(std::size_t n);

// Mode-4 unfolding: (d,h,w,c) -> (c, d*h*w); column j is the channel vector of
// voxel j in row-major (d,h,w) order.
template <typename T>
Tensor<T> matricize_mode4(const Tensor<T>& t);
template <typename T>
Tensor<T> dematricize_mode4(const Tensor<T>& m, std::size_t d, std::size_t h, std::size_t w);

template <typename T>
Tensor<T> transpose(const Tensor<T>& m);
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> softmax_columns(const Tensor<T>& m);
template <typename T>
Tensor<T> softmax_vector(const Tensor<T>& v);

// Spatial operations accept (d,h,w,c) or (b,d,h,w,c).
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, Triple stride = {1, 1, 1},
                 Triple padding = {0, 0, 0});

template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& input, Triple factor);
template <typename T>
Tensor<T> maxpool3d_222(const Tensor<T>& input) {
  return maxpool3d(input, {2, 2, 2});
}

// align-corners=false: output index i samples the input at (i + 0.5) / scale - 0.5,
// clamped to [0, n-1].
template <typename T>
Tensor<T> trilinear_upsample(const Tensor<T>& input, Triple factor);
template <typename T>
Tensor<T> trilinear_upsample_2x(const Tensor<T>& input) {
  return trilinear_upsample(input, {2, 2, 2});
}

template <typename T>
Tensor<T> elu(const Tensor<T>& input, T alpha = T(1));
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input);

enum class BatchNormMode { Training, Inference };

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

/// Per-channel normalization over every axis except the last. In training mode
/// the running statistics are updated in place (the only mutating tensor op).
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormStats<T>& stats, BatchNormMode mode);

namespace kernels {

// Raw building blocks shared by the forward ops above and the autodiff rules.

struct Spatial5 {
  std::size_t b = 1, d = 1, h = 1, w = 1, c = 1;
  std::size_t voxels() const { return d * h * w; }
};

Spatial5 as_spatial5(const Shape& shape);

// C (m x n) = op(A) * op(B), overwriting C. Row-major, no aliasing.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c);

// Column-wise softmax of an (m x n) matrix in place.
template <typename T>
void softmax_columns_inplace(T* m, std::size_t rows, std::size_t cols);

// Given A = softmax_columns(S) and dL/dA in `grad`, overwrite `grad` with dL/dS.
template <typename T>
void softmax_columns_backward(const T* a, T* grad, std::size_t rows, std::size_t cols);

template <typename T>
void conv3d_backward(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& grad_out,
                     Triple stride, Triple padding, Tensor<T>* grad_input, Tensor<T>* grad_kernel);

// Max pooling that also records the flat input index of each selected maximum.
template <typename T>
Tensor<T> maxpool3d_indexed(const Tensor<T>& input, Triple factor,
                            std::vector<std::size_t>& argmax);

template <typename T>
void trilinear_upsample_backward(const Tensor<T>& grad_out, Triple factor, Tensor<T>& grad_input);

struct BatchNormCache {
  std::vector<double> mean;
  std::vector<double> inv_std;
};

template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                            BatchNormStats<T>& stats, BatchNormMode mode, BatchNormCache& cache);

template <typename T>
void batchnorm_backward(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& grad_out,
                        BatchNormMode mode, const BatchNormCache& cache, Tensor<T>* grad_input,
                        Tensor<T>* grad_gamma, Tensor<T>* grad_beta);

}  // namespace kernels

}  // namespace cleftnet
