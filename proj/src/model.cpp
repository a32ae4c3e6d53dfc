#include "cleftnet/model.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace cleftnet {

namespace {

struct VariantName {
  BlockVariant v;
  const char* name;
};
constexpr VariantName kVariantNames[] = {
    {BlockVariant::FaLearnableQuery, "fa-learnable-query"},
    {BlockVariant::FaInputQuery, "fa-input-query"},
    {BlockVariant::Gated, "gated"},
    {BlockVariant::Plain, "plain"},
};

std::string triple_str(const Triple& t) { return shape_str({t[0], t[1], t[2]}); }

}  // namespace

std::string to_string(BlockVariant v) {
  for (const auto& e : kVariantNames)
    if (e.v == v) return e.name;
  return "unknown";
}

std::string to_string(LabelMode m) { return m == LabelMode::Augmented ? "augmented" : "segmentation-only"; }

BlockVariant parse_block_variant(const std::string& s) {
  for (const auto& e : kVariantNames)
    if (s == e.name) return e.v;
  throw ConfigError("unknown block variant '" + s + "'");
}

LabelMode parse_label_mode(const std::string& s) {
  if (s == "augmented") return LabelMode::Augmented;
  if (s == "segmentation-only") return LabelMode::SegmentationOnly;
  throw ConfigError("unknown label mode '" + s + "'");
}

std::vector<std::size_t> CleftNetConfig::level_channels() const {
  std::vector<std::size_t> out;
  for (std::size_t c : channels) out.push_back(std::max<std::size_t>(1, c / std::max<std::size_t>(1, channel_divisor)));
  return out;
}

std::size_t CleftNetConfig::bottom() const {
  return std::max<std::size_t>(1, bottom_channels / std::max<std::size_t>(1, channel_divisor));
}

Triple CleftNetConfig::factor(std::size_t level) const { return {level < depth_halvings ? 2u : 1u, 2, 2}; }

Triple CleftNetConfig::grid(std::size_t level) const {
  Triple g = patch;
  for (std::size_t l = 0; l < level; ++l) {
    const Triple f = factor(l);
    for (int a = 0; a < 3; ++a) g[a] /= f[a];
  }
  return g;
}

void CleftNetConfig::validate() const {
  if (channels.empty()) throw ConfigError("model.channels must not be empty");
  if (channel_divisor == 0) throw ConfigError("model.channel_divisor must be positive");
  if (in_channels == 0) throw ConfigError("model.in_channels must be positive");
  if (!(query_init_std >= 0)) throw ConfigError("model.query_init_std must be non-negative");
  if (depth_halvings > channels.size()) throw ConfigError("model.depth_halvings exceeds the number of levels");
  const auto c = level_channels();
  for (std::size_t i = 0; i + 1 < c.size(); ++i) {
    if (c[i] >= c[i + 1]) throw ConfigError("model.channels must be strictly increasing after scaling");
  }
  for (int a = 0; a < 3; ++a) {
    std::size_t need = 1;
    for (std::size_t l = 0; l < levels(); ++l) need *= factor(l)[a];
    if (patch[a] == 0 || patch[a] % need != 0) {
      throw ShapeError("patch " + triple_str(patch) + " cannot be halved by the encoder plan (axis " +
                       std::to_string(a) + " must be a multiple of " + std::to_string(need) + ")");
    }
  }
}

CleftNetConfig desk_config() {
  CleftNetConfig c;
  c.channel_divisor = 8;
  c.patch = {8, 32, 32};
  return c;
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"cleftnet", "no-fa", "no-la", "selfattn", "resunet", "gated"};
  return names;
}

CleftNetConfig apply_variant(CleftNetConfig cfg, const std::string& name) {
  if (name == "cleftnet") {
    cfg.variant = BlockVariant::FaLearnableQuery;
    cfg.label_mode = LabelMode::Augmented;
  } else if (name == "no-fa") {
    cfg.variant = BlockVariant::Plain;
    cfg.label_mode = LabelMode::Augmented;
  } else if (name == "no-la") {
    cfg.variant = BlockVariant::FaLearnableQuery;
    cfg.label_mode = LabelMode::SegmentationOnly;
  } else if (name == "selfattn") {
    cfg.variant = BlockVariant::FaInputQuery;
    cfg.label_mode = LabelMode::Augmented;
  } else if (name == "resunet") {
    cfg.variant = BlockVariant::Plain;
    cfg.label_mode = LabelMode::SegmentationOnly;
  } else if (name == "gated") {
    cfg.variant = BlockVariant::Gated;
    cfg.label_mode = LabelMode::Augmented;
  } else {
    throw ConfigError("unknown variant '" + name + "'");
  }
  return cfg;
}

std::string config_to_json(const CleftNetConfig& cfg) {
  nlohmann::ordered_json j;
  j["channels"] = cfg.channels;
  j["bottom_channels"] = cfg.bottom_channels;
  j["channel_divisor"] = cfg.channel_divisor;
  j["variant"] = to_string(cfg.variant);
  j["label_mode"] = to_string(cfg.label_mode);
  j["patch"] = cfg.patch;
  j["depth_halvings"] = cfg.depth_halvings;
  j["in_channels"] = cfg.in_channels;
  j["query_init_std"] = cfg.query_init_std;
  return j.dump();
}

CleftNetConfig config_from_json(const std::string& text, CleftNetConfig cfg) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("model config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "channels") {
        cfg.channels = v.get<std::vector<std::size_t>>();
      } else if (key == "bottom_channels") {
        cfg.bottom_channels = v.get<std::size_t>();
      } else if (key == "channel_divisor") {
        cfg.channel_divisor = v.get<std::size_t>();
      } else if (key == "variant") {
        cfg.variant = parse_block_variant(v.get<std::string>());
      } else if (key == "label_mode") {
        cfg.label_mode = parse_label_mode(v.get<std::string>());
      } else if (key == "patch") {
        cfg.patch = v.get<Triple>();
      } else if (key == "depth_halvings") {
        cfg.depth_halvings = v.get<std::size_t>();
      } else if (key == "in_channels") {
        cfg.in_channels = v.get<std::size_t>();
      } else if (key == "query_init_std") {
        cfg.query_init_std = v.get<double>();
      } else {
        throw ConfigError("unknown key 'model." + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return cfg;
}

// ---- model -----------------------------------------------------------------

template <typename T>
Model<T>::Model(CleftNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), rng_(seed) {
  cfg_.validate();
  const auto ch = cfg_.level_channels();
  const std::size_t L = cfg_.levels();

  std::size_t cin = cfg_.in_channels;
  for (std::size_t l = 0; l < L; ++l) {
    const std::string n = "enc" + std::to_string(l);
    Stage s;
    s.conv = make_conv(n + ".conv", cin, ch[l], 3);
    s.res = make_residual(n + ".res", ch[l]);
    s.resize = make_resize(n + ".down", ch[l], ResidualKind::MaxPool, cfg_.grid(l), cfg_.grid(l + 1), cfg_.factor(l));
    encoder_.push_back(s);
    cin = ch[l];
  }
  bottom_.conv = make_conv("bottom.conv", ch[L - 1], cfg_.bottom(), 3);
  bottom_.res = make_residual("bottom.res", cfg_.bottom());
  bottom_.resize = make_resize("bottom.fa", cfg_.bottom(), ResidualKind::Identity, cfg_.grid(L), cfg_.grid(L),
                               {1, 1, 1});

  decoder_.resize(L);
  for (std::size_t i = L; i-- > 0;) {
    const std::string n = "dec" + std::to_string(i);
    const std::size_t below = i + 1 == L ? cfg_.bottom() : ch[i + 1];
    Stage& s = decoder_[i];
    s.resize = make_resize(n + ".up", below, ResidualKind::Trilinear, cfg_.grid(i + 1), cfg_.grid(i), cfg_.factor(i));
    s.conv = make_conv(n + ".conv", below + ch[i], ch[i], 3);
    s.res = make_residual(n + ".res", ch[i]);
  }
  head_weight_ = add_param("head.weight", kaiming({1, 1, 1, ch[0], cfg_.head_channels()}));
  head_bias_ = add_param("head.bias", Tensor<T>({cfg_.head_channels()}));
}

template <typename T>
Parameter<T>* Model<T>::add_param(const std::string& name, Tensor<T> value) {
  params_.emplace_back(name, std::move(value), true);
  Parameter<T>* p = &params_.back();
  state_.push_back({name, &p->value, true});
  return p;
}

template <typename T>
Tensor<T> Model<T>::kaiming(const Shape& s) {
  const std::size_t fan_in = s[0] * s[1] * s[2] * s[3];
  const double bound = std::sqrt(6.0 / double(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<T> w(s);
  for (auto& x : w.values()) x = T(u(rng_));
  return w;
}

template <typename T>
typename Model<T>::ConvBN Model<T>::make_conv(const std::string& name, std::size_t cin, std::size_t cout,
                                               std::size_t k) {
  ConvBN c;
  c.weight = add_param(name + ".weight", kaiming({k, k, k, cin, cout}));
  c.gamma = add_param(name + ".bn.gamma", Tensor<T>({cout}, T(1)));
  c.beta = add_param(name + ".bn.beta", Tensor<T>({cout}));
  bn_.push_back({Tensor<T>({cout}), Tensor<T>({cout}, T(1))});
  c.stats = &bn_.back();
  state_.push_back({name + ".bn.running_mean", &c.stats->running_mean, false});
  state_.push_back({name + ".bn.running_var", &c.stats->running_var, false});
  return c;
}

template <typename T>
typename Model<T>::Residual Model<T>::make_residual(const std::string& name, std::size_t c) {
  return {make_conv(name + ".conv1", c, c, 3), make_conv(name + ".conv2", c, c, 3)};
}

template <typename T>
typename Model<T>::Resize Model<T>::make_resize(const std::string& name, std::size_t c, ResidualKind kind,
                                                 const Triple& in_grid, const Triple& out_grid,
                                                 const Triple& factor) {
  Resize r;
  r.kind = factor == Triple{1, 1, 1} ? ResidualKind::Identity : kind;
  r.factor = factor;
  const std::size_t ck = std::max<std::size_t>(1, c / 2);
  switch (cfg_.variant) {
    case BlockVariant::FaLearnableQuery: {
      Tensor<T> q({out_grid[0], out_grid[1], out_grid[2], ck});
      std::normal_distribution<double> nd(0.0, 1.0);
      for (auto& x : q.values()) x = T(cfg_.query_init_std * nd(rng_));
      r.query = add_param(name + ".query", std::move(q));
      r.key_kernel = add_param(name + ".key", kaiming({1, 1, 1, c, ck}));
      r.value_kernel = add_param(name + ".value", kaiming({1, 1, 1, c, ck}));
      r.output_kernel = add_param(name + ".output", kaiming({1, 1, 1, ck, c}));
      break;
    }
    case BlockVariant::FaInputQuery:
      r.query_kernel = add_param(name + ".query_proj", kaiming({1, 1, 1, c, ck}));
      r.key_kernel = add_param(name + ".key", kaiming({1, 1, 1, c, ck}));
      r.value_kernel = add_param(name + ".value", kaiming({1, 1, 1, c, ck}));
      r.output_kernel = add_param(name + ".output", kaiming({1, 1, 1, ck, c}));
      break;
    case BlockVariant::Gated: {
      std::normal_distribution<double> nd(0.0, 1.0);
      Tensor<T> qs({c});
      for (auto& x : qs.values()) x = T(cfg_.query_init_std * nd(rng_));
      Tensor<T> qc({in_grid[0] * in_grid[1] * in_grid[2]});
      for (auto& x : qc.values()) x = T(cfg_.query_init_std * nd(rng_));
      r.gate_spatial = add_param(name + ".gate_spatial", std::move(qs));
      r.gate_channel = add_param(name + ".gate_channel", std::move(qc));
      break;
    }
    case BlockVariant::Plain:
      break;
  }
  return r;
}

template <typename T>
Var Model<T>::use(Tape<T>& t, Parameter<T>* p) const {
  return track_ ? t.parameter(*p) : t.constant(p->value);
}

template <typename T>
Var Model<T>::apply(Tape<T>& t, Var x, const ConvBN& c, BatchNormMode mode, bool act) const {
  Var y = ad::conv3d(t, x, use(t, c.weight), {1, 1, 1}, {1, 1, 1});
  y = ad::batchnorm(t, y, use(t, c.gamma), use(t, c.beta), *c.stats, mode);
  return act ? ad::elu(t, y) : y;
}

template <typename T>
Var Model<T>::apply(Tape<T>& t, Var x, const Residual& r, BatchNormMode mode) const {
  Var y = apply(t, x, r.first, mode, true);
  y = apply(t, y, r.second, mode, false);
  return ad::elu(t, ad::add(t, y, x));
}

template <typename T>
Var Model<T>::apply(Tape<T>& t, Var x, const Resize& r) const {
  switch (cfg_.variant) {
    case BlockVariant::FaLearnableQuery:
      return ad::feature_augmentor(
          t, x, {use(t, r.query), use(t, r.key_kernel), use(t, r.value_kernel), use(t, r.output_kernel)}, r.kind);
    case BlockVariant::FaInputQuery:
      return ad::self_attention(
          t, x, {use(t, r.query_kernel), use(t, r.key_kernel), use(t, r.value_kernel), use(t, r.output_kernel)},
          r.kind, r.factor);
    case BlockVariant::Gated: {
      Var g = ad::add(t, ad::gated_swa(t, x, use(t, r.gate_spatial)), ad::gated_cwa(t, x, use(t, r.gate_channel)));
      return ad::resample(t, ad::add(t, x, g), r.kind, r.factor);
    }
    case BlockVariant::Plain:
      break;
  }
  return ad::resample(t, x, r.kind, r.factor);
}

template <typename T>
typename Model<T>::Output Model<T>::forward(Tape<T>& t, const Tensor<T>& batch, BatchNormMode mode, bool track) {
  Tensor<T> x = batch;
  if (x.rank() == 4 && cfg_.in_channels == 1) x = std::move(x).reshaped({x.extent(0), x.extent(1), x.extent(2), x.extent(3), 1});
  if (x.rank() != 5 || x.extent(4) != cfg_.in_channels) {
    throw ShapeError("model input must be (b,d,h,w," + std::to_string(cfg_.in_channels) + "), got " +
                     shape_str(batch.shape()));
  }
  const Triple grid{x.extent(1), x.extent(2), x.extent(3)};
  // Learnable queries and channel gates are sized for one grid, so every variant runs on the configured patch.
  if (grid != cfg_.patch) {
    throw ShapeError("model input grid " + triple_str(grid) + " does not match the configured patch " +
                     triple_str(cfg_.patch));
  }
  track_ = track;
  const std::size_t L = cfg_.levels();
  Var h = t.constant(std::move(x));
  std::vector<Var> skips(L);
  for (std::size_t l = 0; l < L; ++l) {
    h = apply(t, h, encoder_[l].conv, mode, true);
    h = apply(t, h, encoder_[l].res, mode);
    skips[l] = h;
    h = apply(t, h, encoder_[l].resize);
  }
  h = apply(t, h, bottom_.conv, mode, true);
  h = apply(t, h, bottom_.res, mode);
  h = apply(t, h, bottom_.resize);
  for (std::size_t i = L; i-- > 0;) {
    h = apply(t, h, decoder_[i].resize);
    h = ad::concat_channels(t, h, skips[i]);
    h = apply(t, h, decoder_[i].conv, mode, true);
    h = apply(t, h, decoder_[i].res, mode);
  }
  Var logits = ad::bias_add(t, ad::conv3d(t, h, use(t, head_weight_)), use(t, head_bias_));
  Var y = ad::sigmoid(t, logits);
  Output out;
  out.prob = ad::channel(t, y, 0);
  if (cfg_.label_mode == LabelMode::Augmented) out.boundary = ad::channel(t, y, 1);
  track_ = true;
  return out;
}

template <typename T>
typename Model<T>::Prediction Model<T>::predict(const Tensor<T>& batch, BatchNormMode mode) {
  Tape<T> t;
  const Output o = forward(t, batch, mode, false);
  Prediction p;
  p.prob = t.value(o.prob);
  if (o.boundary.valid()) p.boundary = t.value(o.boundary);
  return p;
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::state() {
  return state_;
}

template <typename T>
std::vector<ConstNamedTensor<T>> Model<T>::state() const {
  std::vector<ConstNamedTensor<T>> out;
  for (const auto& s : state_) out.push_back({s.name, s.tensor, s.trainable});
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename U, typename T>
Model<U> convert_model(const Model<T>& m) {
  Model<U> out(m.config());
  auto dst = out.state();
  const auto src = m.state();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = src[i].tensor->template cast<U>();
  return out;
}

template class Model<float>;
template class Model<double>;
template Model<double> convert_model(const Model<float>&);
template Model<float> convert_model(const Model<double>&);
template Model<float> convert_model(const Model<float>&);
template Model<double> convert_model(const Model<double>&);

}  // namespace cleftnet
