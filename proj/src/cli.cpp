#include "cleftnet/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "cleftnet/checkpoint.hpp"
#include "cleftnet/config.hpp"
#include "cleftnet/data.hpp"
#include "cleftnet/metrics.hpp"
#include "cleftnet/train.hpp"
#include "json.hpp"

namespace cleftnet {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<double> threshold;
  std::optional<std::string> spacing;
  std::string checkpoint;
  // data import
  std::string hdf5;
  std::optional<std::string> raw_path;
  std::optional<std::string> cleft_path;
  std::optional<std::uint64_t> sentinel;
  std::string train_data;
  std::string val_data;
  // train
  std::optional<std::size_t> iterations;
  std::optional<std::size_t> eval_interval;
  std::optional<std::size_t> batch_size;
  // infer / eval
  std::string volume;
  std::string raw;
  std::string pred;
  std::string gt;
  std::optional<std::string> overlap;
  std::vector<double> sweep;
  std::vector<std::size_t> slices;
  // gradcheck
  bool inject_fault = false;
};

Triple parse_triple(const std::string& s) {
  Triple t{};
  std::istringstream in(s);
  std::string part;
  std::size_t i = 0;
  while (std::getline(in, part, ',')) {
    if (i == 3 || part.empty() || part.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("expected three non-negative integers, got '" + s + "'");
    t[i++] = std::stoull(part);
  }
  if (i != 3) throw ConfigError("expected three non-negative integers, got '" + s + "'");
  return t;
}

RunConfig build_config(const Common& o) {
  RunConfig cfg = o.config_path.empty() ? default_run_config() : load_run_config(o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.variant) cfg.variant = *o.variant;
  if (o.threshold) cfg.eval.threshold = *o.threshold;
  if (o.spacing) cfg.eval.spacing = parse_spacing(*o.spacing);
  if (o.overlap) cfg.eval.overlap = parse_triple(*o.overlap);
  if (!o.sweep.empty()) cfg.eval.sweep = o.sweep;
  if (!o.hdf5.empty()) cfg.data.hdf5 = o.hdf5;
  if (o.raw_path) cfg.data.cremi.raw_dataset = *o.raw_path;
  if (o.cleft_path) cfg.data.cremi.cleft_dataset = *o.cleft_path;
  if (o.sentinel) cfg.data.cremi.background_sentinel = *o.sentinel;
  if (!o.train_data.empty()) cfg.data.train = o.train_data;
  if (!o.val_data.empty()) cfg.data.validation = o.val_data;
  if (o.iterations) cfg.train.iterations = *o.iterations;
  if (o.eval_interval) cfg.train.eval_interval = *o.eval_interval;
  if (o.batch_size) cfg.train.batch_size = *o.batch_size;
  cfg.train.seed = cfg.seed;
  cfg.train.eval_threshold = cfg.eval.threshold;
  cfg.train.eval_overlap = cfg.eval.overlap;
  if (cfg.variant && std::find(variant_names().begin(), variant_names().end(), *cfg.variant) == variant_names().end())
    throw ConfigError("unknown variant '" + *cfg.variant + "'");
  cfg.validate();
  return cfg;
}

/// Records what a command produced.
class Manifest {
 public:
  Manifest(std::string command, const RunConfig& cfg) : command_(std::move(command)), cfg_(cfg) {}

  void input(const std::string& path) { inputs_.push_back(path); }
  void artifact(const std::string& path) { artifacts_.push_back(path); }
  void note(const std::string& key, nlohmann::ordered_json v) { notes_[key] = std::move(v); }

  std::string write(const fs::path& dir) const {
    nlohmann::ordered_json j;
    j["command"] = command_;
    j["seed"] = cfg_.seed;
    j["config_hash"] = config_hash(cfg_);
    j["config"] = nlohmann::ordered_json::parse(run_config_to_json(cfg_));
    const auto files = [](const std::vector<std::string>& paths) {
      auto a = nlohmann::ordered_json::array();
      for (const auto& p : paths)
        a.push_back({{"path", p}, {"bytes", fs::file_size(p)}, {"sha256", sha256_file(p)}});
      return a;
    };
    j["inputs"] = files(inputs_);
    j["artifacts"] = files(artifacts_);
    if (!notes_.empty()) j["notes"] = notes_;
    const fs::path path = dir / "manifest.json";
    std::ofstream(path) << j.dump(2) << '\n';
    return path.string();
  }

 private:
  std::string command_;
  const RunConfig& cfg_;
  std::vector<std::string> inputs_;
  std::vector<std::string> artifacts_;
  nlohmann::ordered_json notes_ = nlohmann::ordered_json::object();
};

fs::path prepare_out(const std::string& out) {
  fs::path p(out);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f << text;
}

void add_volume_inputs(Manifest& m, const std::string& prefix) {
  m.input(prefix + ".raw.vol1");
  m.input(prefix + ".labels.vol1");
}

int cmd_synth(const Common& o, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = build_config(o);
  if (cfg.data.synth.n_clefts == 0) err << "warning: n_clefts is 0, the volumes contain no clefts\n";
  const auto [train, val] = synthetic_pair(cfg.data, cfg.seed);
  const fs::path dir = prepare_out(o.out);
  Manifest m("synth", cfg);
  for (const auto& [vol, name] : {std::pair{&train, "train"}, std::pair{&val, "val"}}) {
    const std::string prefix = (dir / name).string();
    save_volume(*vol, prefix);
    m.artifact(prefix + ".raw.vol1");
    m.artifact(prefix + ".labels.vol1");
    std::size_t cleft = 0;
    for (auto b : vol->labels.values()) cleft += b;
    m.note(std::string(name) + "_label_fraction", double(cleft) / double(vol->labels.size()));
  }
  m.write(dir);
  out << "wrote " << (dir / "train").string() << ".*.vol1 " << shape_str(train.raw.shape()) << " and "
      << (dir / "val").string() << ".*.vol1 " << shape_str(val.raw.shape()) << '\n';
  return exit_code::ok;
}

int cmd_import(const Common& o, std::ostream& out, std::ostream&) {
  const RunConfig cfg = build_config(o);
  if (cfg.data.hdf5.empty()) throw ConfigError("import needs --hdf5");
  const Volume v = import_cremi(cfg.data.hdf5, cfg.data.cremi);
  const std::size_t n = cfg.data.train_slices ? cfg.data.train_slices : default_train_slices(v.raw.extent(0));
  auto [train, val] = split_by_slices(v, n);
  const fs::path dir = prepare_out(o.out);
  Manifest m("import", cfg);
  m.input(cfg.data.hdf5);
  for (const auto& [vol, name] : {std::pair{&train, "train"}, std::pair{&val, "val"}}) {
    const std::string prefix = (dir / name).string();
    save_volume(*vol, prefix);
    m.artifact(prefix + ".raw.vol1");
    m.artifact(prefix + ".labels.vol1");
  }
  m.write(dir);
  out << "imported " << shape_str(v.raw.shape()) << " with spacing (" << v.spacing[0] << ',' << v.spacing[1] << ','
      << v.spacing[2] << "); train " << n << " slices, validation " << v.raw.extent(0) - n << '\n';
  return exit_code::ok;
}

/// Training and validation volumes from the config: VOL1 prefixes, an HDF5
/// file split by slices, or a synthetic pair.
std::pair<Volume, std::optional<Volume>> training_volumes(const RunConfig& cfg, Manifest& m) {
  const auto& d = cfg.data;
  if (!d.train.empty()) {
    add_volume_inputs(m, d.train);
    Volume train = load_volume(d.train);
    std::optional<Volume> val;
    if (!d.validation.empty()) {
      add_volume_inputs(m, d.validation);
      val = load_volume(d.validation);
    }
    return {std::move(train), std::move(val)};
  }
  if (d.hdf5.empty()) {
    auto [train, val] = synthetic_pair(d, cfg.seed);
    return {std::move(train), std::move(val)};
  }
  m.input(d.hdf5);
  const Volume full = import_cremi(d.hdf5, d.cremi);
  const std::size_t n = d.train_slices ? d.train_slices : default_train_slices(full.raw.extent(0));
  auto [train, val] = split_by_slices(full, n);
  return {std::move(train), std::move(val)};
}

int cmd_train(const Common& o, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = build_config(o);
  const fs::path dir = prepare_out(o.out);
  Manifest m("train", cfg);
  auto [train_vol, val_vol] = training_volumes(cfg, m);
  const CleftNetConfig mc = cfg.resolved_model();
  auto labeled = std::make_shared<const LabeledVolume>(label_volume(std::move(train_vol)));
  std::shared_ptr<const Volume> validation;
  if (val_vol) validation = std::make_shared<const Volume>(std::move(*val_vol));

  Model<float> model(mc, cfg.seed);
  Trainer trainer(model, cfg.train, volume_source(labeled, mc.patch, cfg.train.rejection, cfg.train.augment),
                  validation);
  if (!o.checkpoint.empty()) {
    m.input(o.checkpoint);
    trainer.resume(load_checkpoint(o.checkpoint));
    out << "resumed at iteration " << trainer.iteration() << '\n';
  }
  const std::string history_path = (dir / "history.tsv").string();
  const auto flush = [&] {
    std::ofstream f(history_path, trainer.iteration() > 0 && !o.checkpoint.empty() ? std::ios::app : std::ios::trunc);
    f << trainer.history().text();
  };
  try {
    trainer.run(cfg.train.iterations);
  } catch (const NumericalError& e) {
    flush();
    write_text(dir / "failure.txt", std::string(e.what()) + '\n');
    err << "error: " << e.what() << '\n';
    return exit_code::numerical;
  }
  flush();
  const std::string ckpt = (dir / "model.ckpt").string();
  save_checkpoint(ckpt, trainer.checkpoint());
  m.artifact(ckpt);
  m.artifact(history_path);
  if (trainer.best()) {
    const std::string best = (dir / "best.ckpt").string();
    save_checkpoint(best, *trainer.best());
    m.artifact(best);
    m.note("best_cremi_score", trainer.best_score());
  }
  m.note("iterations", trainer.iteration());
  m.note("parameter_count", model.parameter_count());
  m.write(dir);
  const auto& it = trainer.history().iterations;
  if (!it.empty()) out << "iteration " << it.back().iteration << " loss " << it.back().loss << '\n';
  if (trainer.best()) out << "best validation CREMI-score " << trainer.best_score() << '\n';
  return exit_code::ok;
}

Model<float> load_checkpoint_model(const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  const Checkpoint c = load_checkpoint(path);
  Model<float> model(c.config);
  restore(model, c);
  return model;
}

int cmd_infer(const Common& o, std::ostream& out, std::ostream&) {
  const RunConfig cfg = build_config(o);
  Model<float> model = load_checkpoint_model(o.checkpoint);
  Manifest m("infer", cfg);
  m.input(o.checkpoint);
  Tensor<std::uint8_t> raw;
  Spacing spacing = kUnitSpacing;
  if (!o.raw.empty()) {
    m.input(o.raw);
    const Vol1 v = read_vol1(o.raw);
    if (v.type == Vol1Type::Field) throw FormatError(o.raw + " holds a real-valued field, expected raw intensities");
    raw = v.bytes;
    spacing = {v.spacing[0], v.spacing[1], v.spacing[2]};
  } else if (!o.volume.empty()) {
    add_volume_inputs(m, o.volume);
    Volume v = load_volume(o.volume);
    raw = std::move(v.raw);
    spacing = v.spacing;
  } else {
    throw ConfigError("infer needs --raw or --volume");
  }
  const auto pred = infer_volume(model, raw, cfg.eval.overlap);
  const fs::path dir = prepare_out(o.out);
  const std::string prob_path = (dir / "prob.vol1").string();
  write_vol1(prob_path, make_vol1(pred.prob, spacing));
  m.artifact(prob_path);
  if (!pred.boundary.empty()) {
    const std::string b = (dir / "boundary.vol1").string();
    write_vol1(b, make_vol1(pred.boundary, spacing));
    m.artifact(b);
  }
  m.write(dir);
  out << "wrote " << prob_path << ' ' << shape_str(pred.prob.shape()) << '\n';
  return exit_code::ok;
}

void write_slice_pgm(const fs::path& path, const Tensor<std::uint8_t>& raw, const Tensor<std::uint8_t>& gt,
                     const Tensor<float>& prob, std::size_t z) {
  const std::size_t h = gt.extent(1), w = gt.extent(2);
  std::string img;
  img.reserve(3 * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) img.push_back(char(raw.empty() ? 0 : raw[(z * h + y) * w + x]));
    for (std::size_t x = 0; x < w; ++x) img.push_back(char(gt[(z * h + y) * w + x] ? 255 : 0));
    for (std::size_t x = 0; x < w; ++x)
      img.push_back(char(std::uint8_t(std::clamp(prob[(z * h + y) * w + x], 0.0f, 1.0f) * 255.0f + 0.5f)));
  }
  std::ofstream f(path, std::ios::binary);
  f << "P5\n" << 3 * w << ' ' << h << "\n255\n";
  f.write(img.data(), std::streamsize(img.size()));
}

int cmd_eval(const Common& o, std::ostream& out, std::ostream&) {
  const RunConfig cfg = build_config(o);
  if (o.pred.empty()) throw ConfigError("eval needs --pred");
  Manifest m("eval", cfg);
  m.input(o.pred);
  const Vol1 pv = read_vol1(o.pred);
  if (pv.type != Vol1Type::Field) throw FormatError(o.pred + " is not a probability field");
  Tensor<std::uint8_t> gt, raw;
  Spacing spacing = kUnitSpacing;
  if (!o.gt.empty()) {
    m.input(o.gt);
    const Vol1 g = read_vol1(o.gt);
    if (g.type == Vol1Type::Field) throw FormatError(o.gt + " is not a mask");
    gt = g.bytes;
    spacing = {g.spacing[0], g.spacing[1], g.spacing[2]};
  } else if (!o.volume.empty()) {
    add_volume_inputs(m, o.volume);
    Volume v = load_volume(o.volume);
    gt = std::move(v.labels);
    raw = std::move(v.raw);
    spacing = v.spacing;
  } else {
    throw ConfigError("eval needs --gt or --volume");
  }
  if (!o.raw.empty()) {
    m.input(o.raw);
    raw = read_vol1(o.raw).bytes;
  }
  if (cfg.eval.spacing) spacing = *cfg.eval.spacing;
  if (pv.field.shape() != gt.shape())
    throw ShapeError("prediction " + shape_str(pv.field.shape()) + " and ground truth " + shape_str(gt.shape()) +
                     " differ in shape");
  const fs::path dir = prepare_out(o.out);
  std::vector<double> thresholds{cfg.eval.threshold};
  for (double t : cfg.eval.sweep)
    if (std::find(thresholds.begin(), thresholds.end(), t) == thresholds.end()) thresholds.push_back(t);
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    const MetricReport r = evaluate(pv.field, gt, spacing, thresholds[i]);
    std::string stem = "report";
    if (i > 0) {
      std::ostringstream s;
      s << "report_t" << thresholds[i];
      stem = s.str();
    }
    write_text(dir / (stem + ".json"), report_to_json(r) + '\n');
    write_text(dir / (stem + ".txt"), report_to_text(r));
    m.artifact((dir / (stem + ".json")).string());
    m.artifact((dir / (stem + ".txt")).string());
    out << "threshold " << thresholds[i] << ": F1 " << r.f1 << " AUC " << r.auc << " ADGT " << r.adgt << " ADF "
        << r.adf << " CREMI-score " << r.cremi_score << '\n';
  }
  if (!raw.empty() && raw.shape() != gt.shape()) throw ShapeError("raw volume differs in shape from ground truth");
  for (std::size_t z : o.slices) {
    if (z >= gt.extent(0)) throw ConfigError("slice " + std::to_string(z) + " is outside the volume");
    const fs::path p = dir / ("slice_" + std::to_string(z) + ".pgm");
    write_slice_pgm(p, raw, gt, pv.field, z);
    m.artifact(p.string());
  }
  m.write(dir);
  return exit_code::ok;
}

int cmd_gradcheck(const Common& o, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = build_config(o);
  GradCheckOptions opts;
  opts.seed = cfg.seed;
  opts.fault_injection = o.inject_fault;
  const GradCheckSuite s = run_gradchecks(opts);
  const fs::path dir = prepare_out(o.out);
  const fs::path report = dir / "gradcheck.txt";
  write_text(report, s.text());
  Manifest m("gradcheck", cfg);
  m.artifact(report.string());
  m.note("passed", s.passed);
  m.write(dir);
  out << s.text();
  if (!s.passed) {
    err << "error: gradient check failed\n";
    return exit_code::numerical;
  }
  return exit_code::ok;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"CleftNet synaptic cleft detection toolkit", "cleftnet"};
  app.require_subcommand(1);
  Common o;

  const auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    c->add_option("--seed", o.seed, "random seed");
    c->add_option("--out", o.out, "output directory");
  };
  const auto import_flags = [&](CLI::App* c) {
    c->add_option("--hdf5", o.hdf5, "CREMI-style HDF5 file");
    c->add_option("--raw-path", o.raw_path, "raw dataset inside the HDF5 file");
    c->add_option("--cleft-path", o.cleft_path, "cleft id dataset inside the HDF5 file");
    c->add_option("--background-sentinel", o.sentinel, "cleft id marking background");
  };
  const auto spacing_flags = [&](CLI::App* c) {
    c->add_option("--threshold", o.threshold, "binarization threshold");
    c->add_option("--spacing", o.spacing, "voxel spacing dz,dy,dx");
  };

  auto* synth = app.add_subcommand("synth", "generate synthetic training and validation volumes");
  common(synth);

  auto* imp = app.add_subcommand("import", "convert a CREMI HDF5 file to VOL1 train/validation volumes");
  common(imp);
  import_flags(imp);

  auto* train = app.add_subcommand("train", "train a model");
  common(train);
  import_flags(train);
  spacing_flags(train);
  train->add_option("--variant", o.variant, "model preset")->check(CLI::IsMember(variant_names()));
  train->add_option("--checkpoint,--resume", o.checkpoint, "resume from this checkpoint");
  train->add_option("--train-data", o.train_data, "training volume prefix");
  train->add_option("--val-data", o.val_data, "validation volume prefix");
  train->add_option("--iterations", o.iterations, "total iterations");
  train->add_option("--eval-interval", o.eval_interval, "iterations between validations (0 disables)");
  train->add_option("--batch-size", o.batch_size, "patches per step");
  train->add_option("--overlap", o.overlap, "validation tile overlap dz,dy,dx");

  auto* infer = app.add_subcommand("infer", "predict a volume with a trained model");
  common(infer);
  infer->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  infer->add_option("--raw", o.raw, "raw VOL1 volume");
  infer->add_option("--volume", o.volume, "volume prefix");
  infer->add_option("--overlap", o.overlap, "tile overlap dz,dy,dx");

  auto* eval = app.add_subcommand("eval", "score a prediction against ground truth");
  common(eval);
  spacing_flags(eval);
  eval->add_option("--pred", o.pred, "predicted probability field (VOL1)")->required();
  eval->add_option("--gt", o.gt, "ground-truth mask (VOL1)");
  eval->add_option("--volume", o.volume, "volume prefix supplying raw and labels");
  eval->add_option("--raw", o.raw, "raw VOL1 volume for slice images");
  eval->add_option("--sweep", o.sweep, "additional thresholds")->delimiter(',');
  eval->add_option("--slices", o.slices, "export these slices as raw|gt|pred PGM images")->delimiter(',');

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every block variant and loss term");
  common(grad);
  grad->add_flag("--inject-fault", o.inject_fault, "corrupt one backward rule (self-test)");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_code::ok : exit_code::config;
  }

  try {
    if (synth->parsed()) return cmd_synth(o, out, err);
    if (imp->parsed()) return cmd_import(o, out, err);
    if (train->parsed()) return cmd_train(o, out, err);
    if (infer->parsed()) return cmd_infer(o, out, err);
    if (eval->parsed()) return cmd_eval(o, out, err);
    if (grad->parsed()) return cmd_gradcheck(o, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return exit_code::config;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return exit_code::numerical;
  } catch (const FormatError& e) {
    err << "data error: " << e.what() << '\n';
    return exit_code::data;
  } catch (const ImportError& e) {
    err << "data error: " << e.what() << '\n';
    return exit_code::data;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << '\n';
    return exit_code::data;
  } catch (const ContractError& e) {
    err << "data error: " << e.what() << '\n';
    return exit_code::data;
  } catch (const EmptyTargetError& e) {
    err << "data error: " << e.what() << '\n';
    return exit_code::data;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return exit_code::data;
  }
  return exit_code::usage;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace cleftnet
