#include "cleftnet/train.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"

namespace cleftnet {

// ---- Adam -----------------------------------------------------------------

template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state, const AdamConfig& cfg) {
  if (state.m.empty() && state.v.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ContractError("adam_step: optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].shape() != params[i]->value.shape() || state.v[i].shape() != params[i]->value.shape())
      throw ContractError("adam_step: state shape mismatch for '" + params[i]->name + "'");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    if (!p.trainable) continue;
    T* w = p.value.data();
    const T* g = p.grad.data();
    T* m = state.m[i].data();
    T* v = state.v[i].data();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double gj = g[j];
      const double mj = cfg.beta1 * double(m[j]) + (1 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * double(v[j]) + (1 - cfg.beta2) * gj * gj;
      m[j] = T(mj);
      v[j] = T(vj);
      w[j] = T(double(w[j]) - cfg.lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.eps));
    }
  }
}

template void adam_step(std::span<Parameter<float>* const>, AdamState<float>&, const AdamConfig&);
template void adam_step(std::span<Parameter<double>* const>, AdamState<double>&, const AdamConfig&);

// ---- batches ----------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate >= 0)) throw ConfigError("train.learning_rate must be non-negative");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (loss.alpha_boundary < 0 || loss.alpha_coherence < 0) throw ConfigError("train loss weights must be non-negative");
  const auto prob = [](double p, const char* what) {
    if (!(p >= 0 && p <= 1)) throw ConfigError(std::string(what) + " must be in [0,1]");
  };
  prob(rejection.reject_probability, "train.reject_probability");
  prob(augment.rotate, "train.augment.rotate");
  prob(augment.flip, "train.augment.flip");
  prob(augment.grayscale, "train.augment.grayscale");
  prob(eval_threshold, "train.eval_threshold");
}

Batch make_batch(const std::vector<PatchSample>& patches) {
  if (patches.empty()) throw ContractError("make_batch: no patches");
  const Shape s = patches[0].raw.shape();
  Shape bs{patches.size(), s[0], s[1], s[2]};
  Batch b{Tensor<float>(bs), Tensor<float>(bs), Tensor<float>(bs), {}};
  const std::size_t n = shape_size(s);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto& p = patches[i];
    if (p.raw.shape() != s) throw ShapeError("make_batch: patches differ in shape");
    std::copy(p.raw.values().begin(), p.raw.values().end(), b.raw.data() + i * n);
    std::copy(p.y_s.values().begin(), p.y_s.values().end(), b.y_s.data() + i * n);
    std::copy(p.y_b.values().begin(), p.y_b.values().end(), b.y_b.data() + i * n);
    b.origins.push_back(p.origin);
  }
  return b;
}

BatchSource volume_source(std::shared_ptr<const LabeledVolume> volume, Triple patch, RejectionPolicy rejection,
                          AugmentProbabilities augment) {
  return [volume = std::move(volume), patch, rejection, augment](Rng& rng, std::size_t n) {
    std::vector<PatchSample> ps;
    for (std::size_t i = 0; i < n; ++i) ps.push_back(cleftnet::augment(sample_patch(*volume, patch, rng, rejection), rng, augment));
    return make_batch(ps);
  };
}

BatchSource fixed_source(PatchSample patch) {
  return [patch = std::move(patch)](Rng&, std::size_t n) { return make_batch(std::vector<PatchSample>(n, patch)); };
}

// ---- history ----------------------------------------------------------------

namespace {

std::string g9(double x) {
  if (std::isnan(x)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

}  // namespace

std::string format_record(const IterationRecord& r) {
  return std::to_string(r.iteration) + '\t' + g9(r.loss) + '\t' + g9(r.segmentation) + '\t' + g9(r.boundary) + '\t' +
         g9(r.coherence);
}

std::string format_record(const EvalRecord& r) {
  return "eval\t" + std::to_string(r.iteration) + '\t' + g9(r.cremi) + '\t' + g9(r.f1) + '\t' + g9(r.auc);
}

void History::add(const IterationRecord& r) {
  iterations.push_back(r);
  lines.push_back(format_record(r));
}

void History::add(const EvalRecord& r) {
  evals.push_back(r);
  lines.push_back(format_record(r));
}

std::string History::text() const {
  std::string s;
  for (const auto& l : lines) s += l + '\n';
  return s;
}

// ---- inference --------------------------------------------------------------

std::vector<std::size_t> tile_origins(std::size_t extent, std::size_t patch, std::size_t overlap) {
  if (patch == 0 || extent < patch)
    throw ShapeError("volume extent " + std::to_string(extent) + " is smaller than the patch " + std::to_string(patch));
  if (overlap >= patch) throw ContractError("tile overlap must be smaller than the patch");
  const std::size_t step = patch - overlap;
  std::vector<std::size_t> out;
  for (std::size_t o = 0; o + patch <= extent; o += step) out.push_back(o);
  if (out.back() + patch < extent) out.push_back(extent - patch);
  return out;
}

VolumePrediction infer_volume(Model<float>& model, const Tensor<std::uint8_t>& raw, Triple overlap) {
  if (raw.rank() != 3) throw ShapeError("infer_volume expects a (d,h,w) volume");
  const Triple p = model.config().patch;
  const Shape vs = raw.shape();
  std::array<std::vector<std::size_t>, 3> origins;
  for (int a = 0; a < 3; ++a) origins[a] = tile_origins(vs[a], p[a], overlap[a]);
  const bool two = model.config().label_mode == LabelMode::Augmented;

  Tensor<float> sum_p(vs), sum_b(two ? vs : Shape{1}), count(vs);
  Tensor<float> tile({1, p[0], p[1], p[2]});
  for (std::size_t oz : origins[0])
    for (std::size_t oy : origins[1])
      for (std::size_t ox : origins[2]) {
        for (std::size_t z = 0; z < p[0]; ++z)
          for (std::size_t y = 0; y < p[1]; ++y)
            for (std::size_t x = 0; x < p[2]; ++x)
              tile[(z * p[1] + y) * p[2] + x] = float(raw[((oz + z) * vs[1] + oy + y) * vs[2] + ox + x]) / 255.0f;
        const auto pred = model.predict(tile, BatchNormMode::Inference);
        for (std::size_t z = 0; z < p[0]; ++z)
          for (std::size_t y = 0; y < p[1]; ++y)
            for (std::size_t x = 0; x < p[2]; ++x) {
              const std::size_t dst = ((oz + z) * vs[1] + oy + y) * vs[2] + ox + x;
              const std::size_t src = (z * p[1] + y) * p[2] + x;
              sum_p[dst] += pred.prob[src];
              if (two) sum_b[dst] += pred.boundary[src];
              count[dst] += 1.0f;
            }
      }
  VolumePrediction out;
  out.prob = Tensor<float>(vs);
  for (std::size_t i = 0; i < out.prob.size(); ++i) out.prob[i] = sum_p[i] / count[i];
  if (two) {
    out.boundary = Tensor<float>(vs);
    for (std::size_t i = 0; i < out.boundary.size(); ++i) out.boundary[i] = sum_b[i] / count[i];
  }
  return out;
}

MetricReport evaluate_model(Model<float>& model, const Volume& volume, double threshold, Triple overlap) {
  const auto pred = infer_volume(model, volume.raw, overlap);
  return evaluate(pred.prob, volume.labels, volume.spacing, threshold);
}

// ---- trainer ----------------------------------------------------------------

Trainer::Trainer(Model<float>& model, TrainConfig cfg, BatchSource source, std::shared_ptr<const Volume> validation)
    : model_(model), cfg_(std::move(cfg)), source_(std::move(source)), validation_(std::move(validation)),
      rng_(cfg_.seed) {
  cfg_.validate();
}

LossTerms Trainer::loss_on(const Batch& b, BatchNormMode mode) {
  Tape<float> t;
  const auto out = model_.forward(t, b.raw, mode, false);
  const auto l = ad::total_loss(t, out.prob, out.boundary, b.y_s, b.y_b, cfg_.loss, b.raw.extent(0));
  LossTerms r;
  r.total = t.value(l.total)[0];
  r.segmentation = t.value(l.segmentation)[0];
  if (l.boundary.valid()) r.boundary = t.value(l.boundary)[0];
  if (l.coherence.valid()) r.coherence = t.value(l.coherence)[0];
  return r;
}

IterationRecord Trainer::step() {
  const Batch b = source_(rng_, cfg_.batch_size);
  Tape<float> t;
  const auto out = model_.forward(t, b.raw, BatchNormMode::Training);
  const auto l = ad::total_loss(t, out.prob, out.boundary, b.y_s, b.y_b, cfg_.loss, cfg_.batch_size);
  IterationRecord r;
  r.iteration = iteration_ + 1;
  r.loss = t.value(l.total)[0];
  r.segmentation = t.value(l.segmentation)[0];
  if (l.boundary.valid()) r.boundary = t.value(l.boundary)[0];
  if (l.coherence.valid()) r.coherence = t.value(l.coherence)[0];
  if (!std::isfinite(r.loss)) {
    std::ostringstream os;
    os << "non-finite loss at iteration " << r.iteration << " (L_s=" << r.segmentation << ", L_b=" << r.boundary
       << ", L_c=" << r.coherence << "); patch origins:";
    for (const auto& o : b.origins) os << " (" << o[0] << ',' << o[1] << ',' << o[2] << ')';
    throw NumericalError(os.str());
  }
  model_.zero_grad();
  t.backward(l.total);
  const auto params = model_.parameters();
  adam_step<float>(params, adam_, AdamConfig{cfg_.learning_rate});
  ++iteration_;
  return r;
}

void Trainer::evaluate() {
  const auto rep = evaluate_model(model_, *validation_, cfg_.eval_threshold, cfg_.eval_overlap);
  history_.add(EvalRecord{iteration_, rep.cremi_score, rep.f1, rep.auc});
  if (rep.cremi_score < best_score_) {
    best_score_ = rep.cremi_score;
    best_iteration_ = iteration_;
    best_ = snapshot(model_);
    best_->extra = nlohmann::json{{"iteration", iteration_}, {"cremi_score", best_score_}}.dump();
  }
}

void Trainer::run(std::size_t until, const std::function<bool(const IterationRecord&)>& stop) {
  while (iteration_ < until) {
    const IterationRecord r = step();
    history_.add(r);
    if (validation_ && cfg_.eval_interval && iteration_ % cfg_.eval_interval == 0) evaluate();
    if (stop && stop(r)) break;
  }
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c = snapshot(model_);
  auto params = const_cast<Model<float>&>(model_).parameters();
  if (adam_.t > 0) {
    for (std::size_t i = 0; i < params.size(); ++i) c.tensors.emplace_back("adam.m." + params[i]->name, adam_.m[i]);
    for (std::size_t i = 0; i < params.size(); ++i) c.tensors.emplace_back("adam.v." + params[i]->name, adam_.v[i]);
  }
  std::ostringstream rng;
  rng << rng_;
  nlohmann::ordered_json j;
  j["iteration"] = iteration_;
  j["adam_t"] = adam_.t;
  j["rng"] = rng.str();
  j["best_score"] = std::isfinite(best_score_) ? nlohmann::ordered_json(best_score_) : nlohmann::ordered_json(nullptr);
  j["best_iteration"] = best_iteration_;
  c.extra = j.dump();
  return c;
}

void Trainer::resume(const Checkpoint& c) {
  restore(model_, c);
  if (c.extra.empty()) throw FormatError("checkpoint has no training state to resume from");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(c.extra);
    iteration_ = j.at("iteration").get<std::size_t>();
    adam_ = {};
    adam_.t = j.at("adam_t").get<std::uint64_t>();
    std::istringstream rng(j.at("rng").get<std::string>());
    rng >> rng_;
    if (!rng) throw FormatError("checkpoint generator state is unreadable");
    best_score_ = j.at("best_score").is_null() ? std::numeric_limits<double>::infinity() : j["best_score"].get<double>();
    best_iteration_ = j.at("best_iteration").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint training state: ") + e.what());
  }
  if (adam_.t > 0) {
    for (auto* p : model_.parameters()) {
      const Tensor<float>* m = c.find("adam.m." + p->name);
      const Tensor<float>* v = c.find("adam.v." + p->name);
      if (!m || !v || m->shape() != p->value.shape() || v->shape() != p->value.shape())
        throw FormatError("checkpoint optimizer state missing or mismatched for '" + p->name + "'");
      adam_.m.push_back(*m);
      adam_.v.push_back(*v);
    }
  }
  best_.reset();
}

// ---- gradient checks --------------------------------------------------------

CleftNetConfig gradcheck_config(BlockVariant variant) {
  CleftNetConfig c;
  c.channels = {2, 3};
  c.bottom_channels = 4;
  c.channel_divisor = 1;
  c.variant = variant;
  c.label_mode = LabelMode::Augmented;
  c.patch = {2, 8, 8};
  c.depth_halvings = 1;
  c.query_init_std = 0.5;
  return c;
}

namespace {

enum class Term { Combined, Segmentation, Boundary, Coherence };

GradCheckReport check_case(BlockVariant variant, Term term, const GradCheckOptions& opts) {
  const CleftNetConfig cfg = gradcheck_config(variant);
  Model<double> model(cfg, opts.seed + 1);
  const std::size_t batch = 2;
  const Triple p = cfg.patch;
  const std::size_t n = p[0] * p[1] * p[2];
  Rng rng(opts.seed + 2);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::bernoulli_distribution cleft(0.3);
  Tensor<double> x({batch, p[0], p[1], p[2]}), ys(x.shape()), yb(x.shape());
  for (auto& v : x.values()) v = nd(rng);
  for (std::size_t b = 0; b < batch; ++b) {
    Tensor<std::uint8_t> mask({p[0], p[1], p[2]});
    for (auto& v : mask.values()) v = cleft(rng) ? 1 : 0;
    mask[0] = 0;
    const auto tdm = tanh_distance_map(mask);
    for (std::size_t i = 0; i < n; ++i) {
      ys[b * n + i] = mask[i];
      yb[b * n + i] = tdm[i];
    }
  }
  const auto loss = [&](Tape<double>& t) {
    const auto out = model.forward(t, x, BatchNormMode::Training);
    const auto l = ad::total_loss(t, out.prob, out.boundary, ys, yb, LossWeights{}, batch);
    switch (term) {
      case Term::Segmentation:
        return l.segmentation;
      case Term::Boundary:
        return l.boundary;
      case Term::Coherence:
        return l.coherence;
      case Term::Combined:
        break;
    }
    return l.total;
  };
  const auto params = model.parameters();
  return grad_check(loss, params, opts);
}

}  // namespace

std::string GradCheckSuite::text() const {
  std::ostringstream os;
  os.precision(3);
  for (const auto& c : cases) {
    os << c.name << '\t' << (c.report.passed ? "PASS" : "FAIL") << "\tmax_rel_error=" << std::scientific
       << c.report.max_rel_error << std::defaultfloat << (c.report.deterministic ? "" : "\tnondeterministic") << '\n';
    for (const auto& e : c.report.entries)
      os << "  " << e.name << '\t' << e.checked << '\t' << std::scientific << e.max_rel_error << std::defaultfloat
         << '\n';
  }
  os << (passed ? "PASS" : "FAIL") << '\n';
  return os.str();
}

GradCheckSuite run_gradchecks(const GradCheckOptions& opts) {
  GradCheckSuite s;
  for (auto v : {BlockVariant::FaLearnableQuery, BlockVariant::FaInputQuery, BlockVariant::Gated, BlockVariant::Plain})
    s.cases.push_back({to_string(v), check_case(v, Term::Combined, opts)});
  s.cases.push_back({"loss:L_s", check_case(BlockVariant::FaLearnableQuery, Term::Segmentation, opts)});
  s.cases.push_back({"loss:L_b", check_case(BlockVariant::FaLearnableQuery, Term::Boundary, opts)});
  s.cases.push_back({"loss:L_c", check_case(BlockVariant::FaLearnableQuery, Term::Coherence, opts)});
  s.passed = true;
  for (const auto& c : s.cases) s.passed = s.passed && c.report.passed;
  return s;
}

}  // namespace cleftnet
