#include "cleftnet/config.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

namespace cleftnet {

using nlohmann::json;
using nlohmann::ordered_json;

CleftNetConfig RunConfig::resolved_model() const { return variant ? apply_variant(model, *variant) : model; }

void RunConfig::validate() const {
  resolved_model().validate();
  train.validate();
  if (!(eval.threshold >= 0 && eval.threshold <= 1)) throw ConfigError("eval.threshold must be in [0,1]");
  for (double t : eval.sweep)
    if (!(t >= 0 && t <= 1)) throw ConfigError("eval.sweep thresholds must be in [0,1]");
  if (eval.spacing)
    for (double s : *eval.spacing)
      if (!(s > 0)) throw ConfigError("eval.spacing must be positive");
  const Triple p = resolved_model().patch;
  for (int a = 0; a < 3; ++a)
    if (eval.overlap[a] >= p[a]) throw ConfigError("eval.overlap must be smaller than the patch");
}

RunConfig default_run_config() { return RunConfig{}; }

std::pair<Volume, Volume> synthetic_pair(const DataConfig& d, std::uint64_t seed) {
  SynthOptions train = d.synth;
  train.seed = seed;
  SynthOptions val = d.synth;
  val.seed = seed ^ 0x9e3779b97f4a7c15ULL;
  val.extents = d.synth_validation_extents;
  if (d.synth.n_clefts > 0) {
    const double ratio = double(val.extents[0]) / double(std::max<std::size_t>(1, d.synth.extents[0]));
    val.n_clefts = std::max<std::size_t>(1, std::size_t(std::lround(double(d.synth.n_clefts) * ratio)));
  }
  Volume t = synthesize(train), v = synthesize(val);
  t.name += "-train";
  v.name += "-validation";
  return {std::move(t), std::move(v)};
}

namespace {

std::string coherence_name(CoherenceForm f) { return f == CoherenceForm::Literal ? "literal" : "consistent"; }

CoherenceForm parse_coherence(const std::string& s) {
  if (s == "consistent") return CoherenceForm::Consistent;
  if (s == "literal") return CoherenceForm::Literal;
  throw ConfigError("unknown coherence form '" + s + "' (expected consistent or literal)");
}

[[noreturn]] void unknown(const std::string& path) { throw ConfigError("unknown key '" + path + "'"); }

const json& object(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError("'" + path + "' must be an object");
  return j;
}

void parse_train(const json& j, TrainConfig& t) {
  for (const auto& [k, v] : object(j, "train").items()) {
    if (k == "learning_rate") t.learning_rate = v.get<double>();
    else if (k == "batch_size") t.batch_size = v.get<std::size_t>();
    else if (k == "iterations") t.iterations = v.get<std::size_t>();
    else if (k == "eval_interval") t.eval_interval = v.get<std::size_t>();
    else if (k == "alpha_boundary") t.loss.alpha_boundary = v.get<double>();
    else if (k == "alpha_coherence") t.loss.alpha_coherence = v.get<double>();
    else if (k == "coherence_form") t.loss.coherence_form = parse_coherence(v.get<std::string>());
    else if (k == "boundary_threshold") t.loss.boundary_threshold = v.get<double>();
    else if (k == "min_cleft_voxels") t.rejection.min_cleft_voxels = v.get<std::size_t>();
    else if (k == "reject_probability") t.rejection.reject_probability = v.get<double>();
    else if (k == "augment") {
      for (const auto& [a, p] : object(v, "train.augment").items()) {
        if (a == "rotate") t.augment.rotate = p.get<double>();
        else if (a == "flip") t.augment.flip = p.get<double>();
        else if (a == "grayscale") t.augment.grayscale = p.get<double>();
        else unknown("train.augment." + a);
      }
    } else unknown("train." + k);
  }
}

void parse_data(const json& j, DataConfig& d) {
  for (const auto& [k, v] : object(j, "data").items()) {
    if (k == "train") d.train = v.get<std::string>();
    else if (k == "validation") d.validation = v.get<std::string>();
    else if (k == "hdf5") d.hdf5 = v.get<std::string>();
    else if (k == "raw_dataset") d.cremi.raw_dataset = v.get<std::string>();
    else if (k == "cleft_dataset") d.cremi.cleft_dataset = v.get<std::string>();
    else if (k == "background_sentinel") d.cremi.background_sentinel = v.get<std::uint64_t>();
    else if (k == "train_slices") d.train_slices = v.get<std::size_t>();
    else if (k == "synth") {
      for (const auto& [s, p] : object(v, "data.synth").items()) {
        if (s == "extents") d.synth.extents = p.get<Triple>();
        else if (s == "n_clefts") d.synth.n_clefts = p.get<std::size_t>();
        else if (s == "thickness") d.synth.thickness = p.get<double>();
        else if (s == "noise") d.synth.noise = p.get<double>();
        else if (s == "validation_extents") d.synth_validation_extents = p.get<Triple>();
        else unknown("data.synth." + s);
      }
    } else unknown("data." + k);
  }
}

void parse_eval(const json& j, EvalConfig& e) {
  for (const auto& [k, v] : object(j, "eval").items()) {
    if (k == "threshold") e.threshold = v.get<double>();
    else if (k == "sweep") e.sweep = v.get<std::vector<double>>();
    else if (k == "spacing") e.spacing = v.is_null() ? std::nullopt : std::optional<Spacing>(v.get<Spacing>());
    else if (k == "overlap") e.overlap = v.get<Triple>();
    else unknown("eval." + k);
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& text, RunConfig cfg) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  object(j, "<root>");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "seed") cfg.seed = v.get<std::uint64_t>();
      else if (k == "variant") cfg.variant = v.get<std::string>();
      else if (k == "model") cfg.model = config_from_json(object(v, "model").dump(), cfg.model);
      else if (k == "train") parse_train(v, cfg.train);
      else if (k == "data") parse_data(v, cfg.data);
      else if (k == "eval") parse_eval(v, cfg.eval);
      else unknown(k);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (cfg.variant) apply_variant(cfg.model, *cfg.variant);  // rejects unknown names early
  cfg.train.seed = cfg.seed;
  return cfg;
}

RunConfig load_run_config(const std::string& path, RunConfig base) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  return parse_run_config(std::string(std::istreambuf_iterator<char>(f), {}), std::move(base));
}

std::string run_config_to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["variant"] = c.variant ? ordered_json(*c.variant) : ordered_json(nullptr);
  j["model"] = ordered_json::parse(config_to_json(c.model));
  const auto& t = c.train;
  j["train"] = {{"learning_rate", t.learning_rate},
                {"batch_size", t.batch_size},
                {"iterations", t.iterations},
                {"eval_interval", t.eval_interval},
                {"alpha_boundary", t.loss.alpha_boundary},
                {"alpha_coherence", t.loss.alpha_coherence},
                {"coherence_form", coherence_name(t.loss.coherence_form)},
                {"boundary_threshold", t.loss.boundary_threshold},
                {"min_cleft_voxels", t.rejection.min_cleft_voxels},
                {"reject_probability", t.rejection.reject_probability},
                {"augment", {{"rotate", t.augment.rotate}, {"flip", t.augment.flip}, {"grayscale", t.augment.grayscale}}}};
  const auto& d = c.data;
  j["data"] = {{"train", d.train},
               {"validation", d.validation},
               {"hdf5", d.hdf5},
               {"raw_dataset", d.cremi.raw_dataset},
               {"cleft_dataset", d.cremi.cleft_dataset},
               {"background_sentinel", d.cremi.background_sentinel},
               {"train_slices", d.train_slices},
               {"synth",
                {{"extents", d.synth.extents},
                 {"n_clefts", d.synth.n_clefts},
                 {"thickness", d.synth.thickness},
                 {"noise", d.synth.noise},
                 {"validation_extents", d.synth_validation_extents}}}};
  j["eval"] = {{"threshold", c.eval.threshold},
               {"sweep", c.eval.sweep},
               {"spacing", c.eval.spacing ? ordered_json(*c.eval.spacing) : ordered_json(nullptr)},
               {"overlap", c.eval.overlap}};
  return j.dump(2);
}

std::string config_hash(const RunConfig& cfg) { return sha256_hex(run_config_to_json(cfg)); }

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

std::string sha256_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot read " + path);
  return sha256_hex(std::string(std::istreambuf_iterator<char>(f), {}));
}

Spacing parse_spacing(const std::string& s) {
  Spacing out{};
  std::istringstream in(s);
  std::string part;
  std::size_t i = 0;
  while (std::getline(in, part, ',')) {
    if (i == 3) throw ConfigError("spacing needs exactly three values: " + s);
    try {
      std::size_t used = 0;
      out[i] = std::stod(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::logic_error&) {
      throw ConfigError("bad spacing component '" + part + "'");
    }
    if (!(out[i] > 0)) throw ConfigError("spacing components must be positive: " + s);
    ++i;
  }
  if (i != 3) throw ConfigError("spacing needs exactly three values: " + s);
  return out;
}

}  // namespace cleftnet
