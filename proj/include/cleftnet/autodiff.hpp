#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cleftnet/tensor.hpp"

namespace cleftnet {

/// Named model tensor. Non-trainable parameters (batch-norm running
/// statistics) are persisted with the model but never updated by the optimizer.
template <typename T>
struct Parameter {
  Parameter(std::string name_, Tensor<T> value_, bool trainable_ = true)
      : name(std::move(name_)), value(std::move(value_)), grad(value.shape()), trainable(trainable_) {}

  void zero_grad() { grad.fill(T(0)); }

  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const { return id != kNone; }
};

/// Define-by-run record of executed operations. Every op computes its forward
/// value eagerly and, when any input needs a gradient, stores a closure that
/// propagates the output gradient back to its inputs.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Var constant(Tensor<T> value);
  Var parameter(Parameter<T>& p);
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn);

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient accumulated into `v` by the last backward pass (zeros if none).
  Tensor<T> grad(Var v) const;

  /// Accumulation buffer for `v`, allocated as zeros on first use.
  Tensor<T>& grad_buffer(Var v);

  /// Reverse pass from a scalar. Parameter gradients are summed into
  /// Parameter::grad; callers zero them between optimizer steps.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  // Test hook: makes the ELU rule drop its negative-branch derivative.
  void set_fault_injection(bool on) { fault_injection_ = on; }
  bool fault_injection() const { return fault_injection_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool fault_injection_ = false;
};

namespace ad {

template <typename T>
Var add(Tape<T>& t, Var a, Var b);
template <typename T>
Var mul(Tape<T>& t, Var a, Var b);
template <typename T>
Var scale(Tape<T>& t, Var a, T factor);
template <typename T>
Var sum(Tape<T>& t, Var a);
template <typename T>
Var element(Tape<T>& t, Var a, std::size_t index);

template <typename T>
Var conv3d(Tape<T>& t, Var input, Var kernel, Triple stride = {1, 1, 1}, Triple padding = {0, 0, 0});
template <typename T>
Var bias_add(Tape<T>& t, Var input, Var bias);
template <typename T>
Var maxpool3d(Tape<T>& t, Var input, Triple factor);
template <typename T>
Var upsample(Tape<T>& t, Var input, Triple factor);
template <typename T>
Var batchnorm(Tape<T>& t, Var input, Var gamma, Var beta, BatchNormStats<T>& stats, BatchNormMode mode);
template <typename T>
Var elu(Tape<T>& t, Var input, T alpha = T(1));
template <typename T>
Var sigmoid(Tape<T>& t, Var input);
template <typename T>
Var concat_channels(Tape<T>& t, Var a, Var b);
/// Drops the trailing channel axis, keeping channel `index`.
template <typename T>
Var channel(Tape<T>& t, Var input, std::size_t index);
template <typename T>
Var softmax_vector(Tape<T>& t, Var v);

}  // namespace ad

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Tensors larger than this are checked on a random sample of this many elements.
  std::size_t max_elements_per_param = 128;
  std::uint64_t seed = 0;
  bool fault_injection = false;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0;
  bool deterministic = true;
  bool passed = false;
};

/// |a - n| / max(1e-8, |a| + |n|)
double gradcheck_relative_error(double analytic, double numeric);

/// Compares reverse-mode gradients of `loss_fn` against central differences.
/// `loss_fn` must build its graph on the given tape from `params`.
GradCheckReport grad_check(const std::function<Var(Tape<double>&)>& loss_fn,
                           std::span<Parameter<double>* const> params, const GradCheckOptions& options = {});

}  // namespace cleftnet
