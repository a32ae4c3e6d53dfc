#include "cleftnet/labels.hpp"

#include <algorithm>
#include <limits>
#include <vector>

namespace cleftnet {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// One-dimensional squared distance transform of sampled function f on sites
// placed `step` apart. Sites with f = inf are not parabola sources.
class EnvelopeScratch {
 public:
  void transform(const double* f, double* out, std::size_t n, double step) {
    v_.resize(n);
    z_.resize(n + 1);
    long k = -1;
    for (std::size_t q = 0; q < n; ++q) {
      if (f[q] == kInf) continue;
      if (k < 0) {
        k = 0;
        v_[0] = q;
        z_[0] = -kInf;
        z_[1] = kInf;
        continue;
      }
      const double xq = double(q) * step;
      double x = 0;
      while (k >= 0) {
        const double xv = double(v_[k]) * step;
        x = ((f[q] + xq * xq) - (f[v_[k]] + xv * xv)) / (2 * (xq - xv));
        if (x <= z_[k]) {
          --k;
        } else {
          break;
        }
      }
      if (k < 0) {
        k = 0;
        v_[0] = q;
        z_[0] = -kInf;
        z_[1] = kInf;
      } else {
        ++k;
        v_[k] = q;
        z_[k] = x;
        z_[k + 1] = kInf;
      }
    }
    if (k < 0) {
      std::fill(out, out + n, kInf);
      return;
    }
    long j = 0;
    for (std::size_t q = 0; q < n; ++q) {
      const double xq = double(q) * step;
      while (z_[j + 1] < xq) ++j;
      const double dx = xq - double(v_[j]) * step;
      out[q] = dx * dx + f[v_[j]];
    }
  }

 private:
  std::vector<std::size_t> v_;
  std::vector<double> z_;
};

void check_spacing(const Spacing& s) {
  for (double v : s)
    if (!(v > 0) || !std::isfinite(v)) throw ContractError("spacing must be positive and finite");
}

}  // namespace

Tensor<double> squared_distance_transform(const Tensor<std::uint8_t>& mask, const Spacing& spacing) {
  if (mask.rank() != 3) throw ShapeError("distance transform expects a (d,h,w) mask");
  check_spacing(spacing);
  const std::size_t d = mask.extent(0), h = mask.extent(1), w = mask.extent(2);
  Tensor<double> dist(mask.shape());
  bool any = false;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const bool target = mask[i] != 0;
    any |= target;
    dist[i] = target ? 0.0 : kInf;
  }
  if (!any) throw EmptyTargetError("distance transform target set is empty");

  EnvelopeScratch scratch;
  std::vector<double> line, out;
  auto pass = [&](std::size_t n, std::size_t stride, std::size_t count, auto base_of, double step) {
    line.resize(n);
    out.resize(n);
    for (std::size_t l = 0; l < count; ++l) {
      const std::size_t base = base_of(l);
      for (std::size_t i = 0; i < n; ++i) line[i] = dist[base + i * stride];
      scratch.transform(line.data(), out.data(), n, step);
      for (std::size_t i = 0; i < n; ++i) dist[base + i * stride] = out[i];
    }
  };
  // width lines
  pass(w, 1, d * h, [&](std::size_t l) { return l * w; }, spacing[2]);
  // height lines
  pass(h, w, d * w, [&](std::size_t l) { return (l / w) * h * w + (l % w); }, spacing[1]);
  // depth lines
  pass(d, h * w, h * w, [&](std::size_t l) { return l; }, spacing[0]);
  return dist;
}

Tensor<double> euclidean_distance_transform(const Tensor<std::uint8_t>& mask, const Spacing& spacing) {
  Tensor<double> dist = squared_distance_transform(mask, spacing);
  for (auto& v : dist.values()) v = std::sqrt(v);
  return dist;
}

Tensor<double> tanh_distance_map(const Tensor<std::uint8_t>& clefts) {
  if (clefts.rank() != 3) throw ShapeError("tanh distance map expects a (d,h,w) mask");
  Tensor<std::uint8_t> background(clefts.shape());
  bool any_cleft = false;
  for (std::size_t i = 0; i < clefts.size(); ++i) {
    background[i] = clefts[i] ? 0 : 1;
    any_cleft |= clefts[i] != 0;
  }
  Tensor<double> out(clefts.shape());
  if (!any_cleft) return out;
  Tensor<double> dist;
  try {
    dist = euclidean_distance_transform(background, kUnitSpacing);
  } catch (const EmptyTargetError&) {
    throw EmptyTargetError("tanh distance map is undefined for a mask without background voxels");
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = clefts[i] ? std::tanh(dist[i]) : 0.0;
  return out;
}

namespace {

constexpr double kLo = kProbabilityClamp;
constexpr double kHi = 1.0 - kProbabilityClamp;

double clamp_prob(double p) { return std::clamp(p, kLo, kHi); }
// d clamp(p) / dp
double clamp_slope(double p) { return (p < kLo || p > kHi) ? 0.0 : 1.0; }

void check_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shapes differ " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
double segmentation_eval(const Tensor<T>& prob, const Tensor<T>& y_s, std::size_t batch, T* grad) {
  check_same(prob.shape(), y_s.shape(), "segmentation_loss");
  const std::size_t n = prob.size();
  std::size_t clefts = 0;
  for (std::size_t i = 0; i < n; ++i) clefts += y_s[i] > T(0.5);
  const double beta = double(n - clefts) / double(n);
  const double inv_b = 1.0 / double(batch);
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = clamp_prob(double(prob[i]));
    if (y_s[i] > T(0.5)) {
      loss -= beta * std::log(p);
      if (grad) grad[i] = T(-beta / p * clamp_slope(double(prob[i])) * inv_b);
    } else {
      loss -= (1 - beta) * std::log(1 - p);
      if (grad) grad[i] = T((1 - beta) / (1 - p) * clamp_slope(double(prob[i])) * inv_b);
    }
  }
  return loss * inv_b;
}

template <typename T>
double boundary_eval(const Tensor<T>& yb_hat, const Tensor<T>& y_b, std::size_t batch, T* grad) {
  check_same(yb_hat.shape(), y_b.shape(), "boundary_loss");
  const std::size_t n = yb_hat.size();
  std::size_t positive = 0;
  for (std::size_t i = 0; i < n; ++i) positive += y_b[i] > T(0);
  const double beta = double(positive) / double(n);
  const double inv_b = 1.0 / double(batch);
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double wgt = y_b[i] > T(0) ? beta : 1 - beta;
    const double r = double(y_b[i]) - double(yb_hat[i]);
    loss += wgt * r * r;
    if (grad) grad[i] = T(-2 * wgt * r * inv_b);
  }
  return loss * inv_b;
}

template <typename T>
double coherence_eval(const Tensor<T>& prob, const Tensor<T>& yb_hat, const LossWeights& w, std::size_t batch,
                      T* grad_prob, T* grad_yb) {
  check_same(prob.shape(), yb_hat.shape(), "coherence_loss");
  const std::size_t n = prob.size();
  const double inv_b = 1.0 / double(batch);
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = clamp_prob(double(prob[i]));
    const double b = clamp_prob(double(yb_hat[i]));
    const double sp = clamp_slope(double(prob[i]));
    const double sb = clamp_slope(double(yb_hat[i]));
    double dp = 0, db = 0;
    if (double(yb_hat[i]) > w.boundary_threshold) {
      loss -= (1 - p) * std::log(b);
      dp = std::log(b);
      db = -(1 - p) / b;
    } else if (w.coherence_form == CoherenceForm::Literal) {
      loss -= (1 - b) * std::log(p);
      dp = -(1 - b) / p;
      db = std::log(p);
    } else {
      loss -= (1 - b) * std::log(1 - p);
      dp = (1 - b) / (1 - p);
      db = std::log(1 - p);
    }
    if (grad_prob) grad_prob[i] = T(dp * sp * inv_b);
    if (grad_yb) grad_yb[i] = T(db * sb * inv_b);
  }
  return loss * inv_b;
}

template <typename T>
Tensor<T> scalar(double v) {
  return Tensor<T>({1}, std::vector<T>{T(v)});
}

}  // namespace

template <typename T>
double segmentation_loss(const Tensor<T>& prob, const Tensor<T>& y_s, std::size_t batch_size) {
  return segmentation_eval<T>(prob, y_s, batch_size, nullptr);
}

template <typename T>
double boundary_loss(const Tensor<T>& yb_hat, const Tensor<T>& y_b, std::size_t batch_size) {
  return boundary_eval<T>(yb_hat, y_b, batch_size, nullptr);
}

template <typename T>
double coherence_loss(const Tensor<T>& prob, const Tensor<T>& yb_hat, const LossWeights& weights,
                      std::size_t batch_size) {
  return coherence_eval<T>(prob, yb_hat, weights, batch_size, nullptr, nullptr);
}

template <typename T>
LossTerms total_loss(const Tensor<T>& prob, const Tensor<T>& yb_hat, const Tensor<T>& y_s, const Tensor<T>& y_b,
                     const LossWeights& weights, std::size_t batch_size) {
  LossTerms terms;
  terms.segmentation = segmentation_loss(prob, y_s, batch_size);
  terms.boundary = boundary_loss(yb_hat, y_b, batch_size);
  terms.coherence = coherence_loss(prob, yb_hat, weights, batch_size);
  terms.total = terms.segmentation + weights.alpha_boundary * terms.boundary + weights.alpha_coherence * terms.coherence;
  return terms;
}

namespace ad {

template <typename T>
Var segmentation_loss(Tape<T>& t, Var prob, const Tensor<T>& y_s, std::size_t batch_size) {
  Tensor<T> grad(t.value(prob).shape());
  const double v = segmentation_eval<T>(t.value(prob), y_s, batch_size, grad.data());
  return t.record(scalar<T>(v), {prob}, [prob, grad = std::move(grad)](Tape<T>& tp, const Tensor<T>& g) {
    auto& gp = tp.grad_buffer(prob);
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[0] * grad[i];
  });
}

template <typename T>
Var boundary_loss(Tape<T>& t, Var yb_hat, const Tensor<T>& y_b, std::size_t batch_size) {
  Tensor<T> grad(t.value(yb_hat).shape());
  const double v = boundary_eval<T>(t.value(yb_hat), y_b, batch_size, grad.data());
  return t.record(scalar<T>(v), {yb_hat}, [yb_hat, grad = std::move(grad)](Tape<T>& tp, const Tensor<T>& g) {
    auto& gb = tp.grad_buffer(yb_hat);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * grad[i];
  });
}

template <typename T>
Var coherence_loss(Tape<T>& t, Var prob, Var yb_hat, const LossWeights& weights, std::size_t batch_size) {
  Tensor<T> gp(t.value(prob).shape()), gb(t.value(yb_hat).shape());
  const double v = coherence_eval<T>(t.value(prob), t.value(yb_hat), weights, batch_size, gp.data(), gb.data());
  return t.record(scalar<T>(v), {prob, yb_hat},
                  [prob, yb_hat, gp = std::move(gp), gb = std::move(gb)](Tape<T>& tp, const Tensor<T>& g) {
                    if (tp.requires_grad(prob)) {
                      auto& dst = tp.grad_buffer(prob);
                      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[0] * gp[i];
                    }
                    if (tp.requires_grad(yb_hat)) {
                      auto& dst = tp.grad_buffer(yb_hat);
                      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[0] * gb[i];
                    }
                  });
}

template <typename T>
LossVars total_loss(Tape<T>& t, Var prob, Var yb_hat, const Tensor<T>& y_s, const Tensor<T>& y_b,
                    const LossWeights& weights, std::size_t batch_size) {
  LossVars out;
  out.segmentation = segmentation_loss(t, prob, y_s, batch_size);
  if (!yb_hat.valid()) {
    out.total = out.segmentation;
    return out;
  }
  out.boundary = boundary_loss(t, yb_hat, y_b, batch_size);
  out.coherence = coherence_loss(t, prob, yb_hat, weights, batch_size);
  Var weighted_b = scale(t, out.boundary, T(weights.alpha_boundary));
  Var weighted_c = scale(t, out.coherence, T(weights.alpha_coherence));
  out.total = add(t, add(t, out.segmentation, weighted_b), weighted_c);
  return out;
}

}  // namespace ad

#define CLEFTNET_INSTANTIATE_LABELS(T)                                                                 \
  template double segmentation_loss(const Tensor<T>&, const Tensor<T>&, std::size_t);                  \
  template double boundary_loss(const Tensor<T>&, const Tensor<T>&, std::size_t);                      \
  template double coherence_loss(const Tensor<T>&, const Tensor<T>&, const LossWeights&, std::size_t); \
  template LossTerms total_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                const LossWeights&, std::size_t);                                      \
  template Var ad::segmentation_loss(Tape<T>&, Var, const Tensor<T>&, std::size_t);                    \
  template Var ad::boundary_loss(Tape<T>&, Var, const Tensor<T>&, std::size_t);                        \
  template Var ad::coherence_loss(Tape<T>&, Var, Var, const LossWeights&, std::size_t);                \
  template ad::LossVars ad::total_loss(Tape<T>&, Var, Var, const Tensor<T>&, const Tensor<T>&,         \
                                       const LossWeights&, std::size_t);

CLEFTNET_INSTANTIATE_LABELS(float)
CLEFTNET_INSTANTIATE_LABELS(double)

}  // namespace cleftnet
