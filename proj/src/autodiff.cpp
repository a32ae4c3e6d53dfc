#include "cleftnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace cleftnet {

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::parameter(Parameter<T>& p) {
  Node n;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = p.trainable;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (Var v : inputs) {
    if (v.valid() && nodes_.at(v.id).requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Tensor<T> Tape<T>::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.empty()) return Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var loss) {
  if (value(loss).size() != 1) throw ContractError("backward requires a scalar loss");
  for (auto& n : nodes_) n.grad = Tensor<T>();
  grad_buffer(loss).fill(T(1));
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    // Closures only touch buffers of earlier nodes, so `n` stays valid.
    if (n.backward) n.backward(*this, n.grad);
    if (n.param) {
      auto& pg = n.param->grad;
      for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
    }
  }
}

namespace ad {

namespace {

template <typename T>
void accumulate(Tape<T>& t, Var v, const Tensor<T>& g) {
  if (!t.requires_grad(v)) return;
  auto& buf = t.grad_buffer(v);
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

}  // namespace

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  if (va.shape() != vb.shape()) throw ShapeError("add: shapes differ " + shape_str(va.shape()) + " vs " + shape_str(vb.shape()));
  Tensor<T> out = va;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
    accumulate(tp, a, g);
    accumulate(tp, b, g);
  });
}

template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  if (va.shape() != vb.shape()) throw ShapeError("mul: shapes differ");
  Tensor<T> out = va;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
    const auto& xa = tp.value(a);
    const auto& xb = tp.value(b);
    if (tp.requires_grad(a)) {
      auto& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * xb[i];
    }
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xa[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& t, Var a, T factor) {
  Tensor<T> out = t.value(a);
  for (auto& v : out.values()) v *= factor;
  return t.record(std::move(out), {a}, [a, factor](Tape<T>& tp, const Tensor<T>& g) {
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

template <typename T>
Var sum(Tape<T>& t, Var a) {
  const auto& va = t.value(a);
  T s = std::accumulate(va.values().begin(), va.values().end(), T(0));
  return t.record(Tensor<T>({1}, std::vector<T>{s}), {a}, [a](Tape<T>& tp, const Tensor<T>& g) {
    auto& ga = tp.grad_buffer(a);
    for (auto& v : ga.values()) v += g[0];
  });
}

template <typename T>
Var element(Tape<T>& t, Var a, std::size_t index) {
  const auto& va = t.value(a);
  if (index >= va.size()) throw ShapeError("element index out of range");
  return t.record(Tensor<T>({1}, std::vector<T>{va[index]}), {a}, [a, index](Tape<T>& tp, const Tensor<T>& g) {
    tp.grad_buffer(a)[index] += g[0];
  });
}

template <typename T>
Var conv3d(Tape<T>& t, Var input, Var kernel, Triple stride, Triple padding) {
  Tensor<T> out = cleftnet::conv3d(t.value(input), t.value(kernel), stride, padding);
  return t.record(std::move(out), {input, kernel},
                  [input, kernel, stride, padding](Tape<T>& tp, const Tensor<T>& g) {
                    Tensor<T>* gi = tp.requires_grad(input) ? &tp.grad_buffer(input) : nullptr;
                    Tensor<T>* gk = tp.requires_grad(kernel) ? &tp.grad_buffer(kernel) : nullptr;
                    kernels::conv3d_backward(tp.value(input), tp.value(kernel), g, stride, padding, gi, gk);
                  });
}

template <typename T>
Var bias_add(Tape<T>& t, Var input, Var bias) {
  const auto& x = t.value(input);
  const auto& b = t.value(bias);
  const std::size_t c = x.shape().back();
  if (b.size() != c) throw ShapeError("bias length does not match channels");
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % c];
  return t.record(std::move(out), {input, bias}, [input, bias, c](Tape<T>& tp, const Tensor<T>& g) {
    accumulate(tp, input, g);
    if (tp.requires_grad(bias)) {
      auto& gb = tp.grad_buffer(bias);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
    }
  });
}

template <typename T>
Var maxpool3d(Tape<T>& t, Var input, Triple factor) {
  std::vector<std::size_t> argmax;
  Tensor<T> out = kernels::maxpool3d_indexed(t.value(input), factor, argmax);
  return t.record(std::move(out), {input}, [input, argmax = std::move(argmax)](Tape<T>& tp, const Tensor<T>& g) {
    auto& gi = tp.grad_buffer(input);
    for (std::size_t i = 0; i < g.size(); ++i) gi[argmax[i]] += g[i];
  });
}

template <typename T>
Var upsample(Tape<T>& t, Var input, Triple factor) {
  Tensor<T> out = cleftnet::trilinear_upsample(t.value(input), factor);
  return t.record(std::move(out), {input}, [input, factor](Tape<T>& tp, const Tensor<T>& g) {
    kernels::trilinear_upsample_backward(g, factor, tp.grad_buffer(input));
  });
}

template <typename T>
Var batchnorm(Tape<T>& t, Var input, Var gamma, Var beta, BatchNormStats<T>& stats, BatchNormMode mode) {
  kernels::BatchNormCache cache;
  Tensor<T> out = kernels::batchnorm_forward(t.value(input), t.value(gamma), t.value(beta), stats, mode, cache);
  return t.record(std::move(out), {input, gamma, beta},
                  [input, gamma, beta, mode, cache = std::move(cache)](Tape<T>& tp, const Tensor<T>& g) {
                    Tensor<T>* gi = tp.requires_grad(input) ? &tp.grad_buffer(input) : nullptr;
                    Tensor<T>* gg = tp.requires_grad(gamma) ? &tp.grad_buffer(gamma) : nullptr;
                    Tensor<T>* gb = tp.requires_grad(beta) ? &tp.grad_buffer(beta) : nullptr;
                    kernels::batchnorm_backward(tp.value(input), tp.value(gamma), g, mode, cache, gi, gg, gb);
                  });
}

template <typename T>
Var elu(Tape<T>& t, Var input, T alpha) {
  Tensor<T> out = cleftnet::elu(t.value(input), alpha);
  return t.record(std::move(out), {input}, [input, alpha](Tape<T>& tp, const Tensor<T>& g) {
    const auto& x = tp.value(input);
    auto& gi = tp.grad_buffer(input);
    const bool faulty = tp.fault_injection();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T d = (x[i] >= T(0) || faulty) ? T(1) : alpha * std::exp(x[i]);
      gi[i] += d * g[i];
    }
  });
}

template <typename T>
Var sigmoid(Tape<T>& t, Var input) {
  Tensor<T> out = cleftnet::sigmoid(t.value(input));
  Tensor<T> saved = out;
  return t.record(std::move(out), {input}, [input, y = std::move(saved)](Tape<T>& tp, const Tensor<T>& g) {
    auto& gi = tp.grad_buffer(input);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var concat_channels(Tape<T>& t, Var a, Var b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  if (va.rank() != vb.rank() || va.rank() < 2) throw ShapeError("concat_channels: rank mismatch");
  Shape sa = va.shape(), sb = vb.shape();
  const std::size_t ca = sa.back(), cb = sb.back();
  sa.pop_back();
  sb.pop_back();
  if (sa != sb) throw ShapeError("concat_channels: spatial extents differ " + shape_str(va.shape()) + " vs " + shape_str(vb.shape()));
  Shape so = sa;
  so.push_back(ca + cb);
  Tensor<T> out(so);
  const std::size_t n = va.size() / ca;
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(va.data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(vb.data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
  }
  return t.record(std::move(out), {a, b}, [a, b, ca, cb, n](Tape<T>& tp, const Tensor<T>& g) {
    if (tp.requires_grad(a)) {
      auto& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < ca; ++c) ga[i * ca + c] += g[i * (ca + cb) + c];
    }
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < cb; ++c) gb[i * cb + c] += g[i * (ca + cb) + ca + c];
    }
  });
}

template <typename T>
Var channel(Tape<T>& t, Var input, std::size_t index) {
  const auto& x = t.value(input);
  const std::size_t c = x.shape().back();
  if (index >= c) throw ShapeError("channel index out of range");
  Shape s = x.shape();
  s.pop_back();
  if (s.empty()) s.push_back(1);
  Tensor<T> out(s);
  const std::size_t n = x.size() / c;
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i * c + index];
  return t.record(std::move(out), {input}, [input, index, c, n](Tape<T>& tp, const Tensor<T>& g) {
    auto& gi = tp.grad_buffer(input);
    for (std::size_t i = 0; i < n; ++i) gi[i * c + index] += g[i];
  });
}

template <typename T>
Var softmax_vector(Tape<T>& t, Var v) {
  Tensor<T> out = cleftnet::softmax_vector(t.value(v));
  Tensor<T> saved = out;
  return t.record(std::move(out), {v}, [v, y = std::move(saved)](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> dg = g;
    kernels::softmax_columns_backward(y.data(), dg.data(), y.size(), 1);
    accumulate(tp, v, dg);
  });
}

}  // namespace ad

double gradcheck_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

GradCheckReport grad_check(const std::function<Var(Tape<double>&)>& loss_fn,
                           std::span<Parameter<double>* const> params, const GradCheckOptions& options) {
  GradCheckReport report;
  auto evaluate = [&]() {
    Tape<double> tape;
    Var loss = loss_fn(tape);
    return tape.value(loss)[0];
  };

  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    tape.set_fault_injection(options.fault_injection);
    Var loss = loss_fn(tape);
    tape.backward(loss);
  }

  const double f0 = evaluate();
  const double f1 = evaluate();
  if (f0 != f1) report.deterministic = false;

  std::mt19937_64 rng(options.seed);
  for (auto* p : params) {
    if (!p->trainable) continue;
    GradCheckEntry entry;
    entry.name = p->name;
    std::vector<std::size_t> idx(p->value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > options.max_elements_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(options.max_elements_per_param);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      const double orig = p->value[i];
      p->value[i] = orig + options.eps;
      const double plus = evaluate();
      p->value[i] = orig - options.eps;
      const double minus = evaluate();
      p->value[i] = orig;
      const double numeric = (plus - minus) / (2 * options.eps);
      entry.max_rel_error = std::max(entry.max_rel_error, gradcheck_relative_error(p->grad[i], numeric));
      ++entry.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.deterministic && report.max_rel_error <= options.tol;
  return report;
}

#define CLEFTNET_INSTANTIATE_AD(T)                                                                    \
  template class Tape<T>;                                                                             \
  template Var ad::add(Tape<T>&, Var, Var);                                                           \
  template Var ad::mul(Tape<T>&, Var, Var);                                                           \
  template Var ad::scale(Tape<T>&, Var, T);                                                           \
  template Var ad::sum(Tape<T>&, Var);                                                                \
  template Var ad::element(Tape<T>&, Var, std::size_t);                                               \
  template Var ad::conv3d(Tape<T>&, Var, Var, Triple, Triple);                                        \
  template Var ad::bias_add(Tape<T>&, Var, Var);                                                      \
  template Var ad::maxpool3d(Tape<T>&, Var, Triple);                                                  \
  template Var ad::upsample(Tape<T>&, Var, Triple);                                                   \
  template Var ad::batchnorm(Tape<T>&, Var, Var, Var, BatchNormStats<T>&, BatchNormMode);             \
  template Var ad::elu(Tape<T>&, Var, T);                                                             \
  template Var ad::sigmoid(Tape<T>&, Var);                                                            \
  template Var ad::concat_channels(Tape<T>&, Var, Var);                                               \
  template Var ad::channel(Tape<T>&, Var, std::size_t);                                               \
  template Var ad::softmax_vector(Tape<T>&, Var);

CLEFTNET_INSTANTIATE_AD(float)
CLEFTNET_INSTANTIATE_AD(double)

}  // namespace cleftnet
