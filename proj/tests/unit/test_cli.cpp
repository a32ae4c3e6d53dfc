#include <filesystem>
#include <fstream>
#include <sstream>

#include "cleftnet/cli.hpp"
#include "cleftnet/data.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace cleftnet;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cleftnet-cli-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

// small network and volumes so every command finishes in seconds
const char* kTinyConfig = R"({
  "model": {"channels": [3, 4], "bottom_channels": 5, "channel_divisor": 1, "patch": [4, 16, 16]},
  "train": {"iterations": 4, "eval_interval": 2, "batch_size": 1, "min_cleft_voxels": 20},
  "data": {"synth": {"extents": [8, 32, 32], "n_clefts": 4, "validation_extents": [4, 32, 32]}}
})";

std::string tiny_config(const fs::path& dir) {
  const auto p = dir / "config.json";
  std::ofstream(p) << kTinyConfig;
  return p.string();
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors") {
    CHECK(cli({}).code == exit_code::config);
    CHECK(cli({"bogus"}).code == exit_code::config);
    CHECK(cli({"--help"}).code == exit_code::ok);
    CHECK(cli({"train", "--variant", "unet"}).code == exit_code::config);
  }

  TEST_CASE("unknown config keys exit with the config code and name the key") {
    const auto dir = scratch("badkey");
    std::ofstream(dir / "bad.json") << R"({"train": {"learning_rat": 0.1}})";
    const auto r = cli({"synth", "--config", (dir / "bad.json").string(), "--out", dir.string()});
    CHECK(r.code == exit_code::config);
    CHECK(r.err.find("train.learning_rat") != std::string::npos);
  }

  TEST_CASE("synth, train, resume, infer and eval") {
    const auto dir = scratch("pipeline");
    const auto cfg = tiny_config(dir);
    const auto data = dir / "data";
    REQUIRE(cli({"synth", "--config", cfg, "--seed", "3", "--out", data.string()}).code == 0);
    for (const char* f : {"train.raw.vol1", "train.labels.vol1", "val.raw.vol1", "val.labels.vol1", "manifest.json"})
      CHECK(fs::exists(data / f));
    const auto synth_manifest = nlohmann::json::parse(slurp(data / "manifest.json"));
    CHECK(synth_manifest["seed"] == 3);
    CHECK(synth_manifest["config_hash"].get<std::string>().size() == 64);
    CHECK(synth_manifest["artifacts"].size() == 4);

    const std::string train_prefix = (data / "train").string(), val_prefix = (data / "val").string();
    const auto full = dir / "full";
    const auto r = cli({"train", "--config", cfg, "--seed", "5", "--train-data", train_prefix, "--val-data", val_prefix,
                        "--out", full.string()});
    REQUIRE(r.code == 0);
    for (const char* f : {"model.ckpt", "best.ckpt", "history.tsv", "manifest.json"}) CHECK(fs::exists(full / f));
    const std::string history = slurp(full / "history.tsv");
    CHECK(std::count(history.begin(), history.end(), '\n') == 6);
    CHECK(history.find("eval\t2\t") != std::string::npos);

    SUBCASE("resume reproduces the uninterrupted run") {
      const auto half = dir / "half";
      REQUIRE(cli({"train", "--config", cfg, "--seed", "5", "--train-data", train_prefix, "--val-data", val_prefix,
                   "--iterations", "2", "--out", half.string()})
                  .code == 0);
      REQUIRE(cli({"train", "--config", cfg, "--seed", "5", "--train-data", train_prefix, "--val-data", val_prefix,
                   "--checkpoint", (half / "model.ckpt").string(), "--out", half.string()})
                  .code == 0);
      CHECK(slurp(half / "model.ckpt") == slurp(full / "model.ckpt"));
      CHECK(slurp(half / "history.tsv") == history);
    }

    SUBCASE("infer and eval") {
      const auto pred = dir / "pred";
      REQUIRE(cli({"infer", "--checkpoint", (full / "model.ckpt").string(), "--volume", val_prefix, "--out",
                   pred.string()})
                  .code == 0);
      const Vol1 p = read_vol1((pred / "prob.vol1").string());
      CHECK(p.type == Vol1Type::Field);
      CHECK(p.field.shape() == Shape{4, 32, 32});
      CHECK(fs::exists(pred / "boundary.vol1"));

      const auto ev = dir / "eval";
      REQUIRE(cli({"eval", "--pred", (pred / "prob.vol1").string(), "--volume", val_prefix, "--sweep", "0.3,0.7",
                   "--slices", "1", "--out", ev.string()})
                  .code == 0);
      for (const char* f : {"report.json", "report.txt", "report_t0.3.json", "report_t0.7.txt", "slice_1.pgm"})
        CHECK(fs::exists(ev / f));
      const auto j = nlohmann::json::parse(slurp(ev / "report.json"));
      CHECK(j.contains("CREMI-score"));
      CHECK(slurp(ev / "slice_1.pgm").substr(0, 9) == "P5\n96 32\n");
    }

    SUBCASE("a perfect prediction scores F1 1 and CREMI-score 0") {
      const Volume v = load_volume(val_prefix);
      Tensor<float> field(v.labels.shape());
      for (std::size_t i = 0; i < field.size(); ++i) field[i] = v.labels[i];
      write_vol1((dir / "perfect.vol1").string(), make_vol1(field, v.spacing));
      const auto ev = dir / "perfect";
      REQUIRE(cli({"eval", "--pred", (dir / "perfect.vol1").string(), "--gt", val_prefix + ".labels.vol1", "--out",
                   ev.string()})
                  .code == 0);
      const auto j = nlohmann::json::parse(slurp(ev / "report.json"));
      CHECK(j["F1"] == 1.0);
      CHECK(j["CREMI-score"] == 0.0);
    }
  }

  TEST_CASE("data errors exit with the data code") {
    const auto dir = scratch("dataerr");
    std::ofstream(dir / "junk.vol1") << "not a volume";
    const auto r = cli({"eval", "--pred", (dir / "junk.vol1").string(), "--gt", (dir / "junk.vol1").string(), "--out",
                        dir.string()});
    CHECK(r.code == exit_code::data);
    CHECK(cli({"train", "--train-data", (dir / "missing").string(), "--out", dir.string()}).code == exit_code::data);
  }

  TEST_CASE("gradcheck fault injection exits with the numerical code") {
    const auto dir = scratch("gradcheck");
    const auto r = cli({"gradcheck", "--inject-fault", "--out", dir.string()});
    CHECK(r.code == exit_code::numerical);
    CHECK(slurp(dir / "gradcheck.txt").find("FAIL") != std::string::npos);
    CHECK(fs::exists(dir / "manifest.json"));
  }
}
