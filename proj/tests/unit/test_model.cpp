#include <filesystem>
#include <random>

#include "cleftnet/checkpoint.hpp"
#include "cleftnet/model.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cleftnet;

TEST_SUITE("model") {
  TEST_CASE("desk configuration") {
    const auto c = desk_config();
    CHECK(c.level_channels() == std::vector<std::size_t>{4, 8, 12, 16});
    CHECK(c.bottom() == 20);
    CHECK(c.patch == Triple{8, 32, 32});
    CHECK(c.grid(1) == Triple{4, 16, 16});
    CHECK(c.grid(4) == Triple{4, 2, 2});
    CHECK(c.factor(0) == Triple{2, 2, 2});
    CHECK(c.factor(1) == Triple{1, 2, 2});
    CHECK(c.head_channels() == 2);
    CHECK(apply_variant(c, "no-la").head_channels() == 1);
  }

  TEST_CASE("invalid configurations are rejected") {
    auto c = desk_config();
    c.patch = {8, 30, 32};
    CHECK_THROWS_AS(c.validate(), ShapeError);
    c = desk_config();
    c.channels.clear();
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = desk_config();
    c.depth_halvings = 5;
    CHECK_THROWS(c.validate());
    CHECK_THROWS_AS(apply_variant(desk_config(), "unet"), ConfigError);
  }

  TEST_CASE("config JSON round trip and unknown keys") {
    auto c = apply_variant(desk_config(), "selfattn");
    c.query_init_std = 0.125;
    CHECK(config_from_json(config_to_json(c)) == c);
    try {
      config_from_json(R"({"channels":[4],"depth":3})");
      FAIL("expected a config error");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("'model.depth'") != std::string::npos);
    }
  }

  TEST_CASE("every variant preserves the spatial shape") {
    std::mt19937_64 rng(51);
    const auto x = oracle::random_tensor<float>(rng, {2, 8, 32, 32});
    for (const auto& name : variant_names()) {
      CAPTURE(name);
      Model<float> m(apply_variant(desk_config(), name), 3);
      const auto p = m.predict(x, BatchNormMode::Training);
      CHECK(p.prob.shape() == Shape{2, 8, 32, 32});
      const bool augmented = m.config().label_mode == LabelMode::Augmented;
      CHECK(p.boundary.empty() == !augmented);
      if (augmented) CHECK(p.boundary.shape() == Shape{2, 8, 32, 32});
      for (float v : p.prob.values()) CHECK((v > 0.0f && v < 1.0f));
      CHECK_THROWS_AS(m.predict(Tensor<float>({1, 8, 16, 16})), ShapeError);
    }
  }

  TEST_CASE("parameter counts are a function of the config") {
    const std::pair<const char*, std::size_t> counts[] = {
        {"cleftnet", 169638}, {"no-fa", 121678}, {"selfattn", 125166}, {"gated", 132706}};
    for (const auto& [name, n] : counts) {
      CAPTURE(name);
      CHECK(Model<float>(apply_variant(desk_config(), name), 1).parameter_count() == n);
      CHECK(Model<float>(apply_variant(desk_config(), name), 2).parameter_count() == n);
    }
  }

  TEST_CASE("initialization is seeded") {
    Model<float> a(desk_config(), 7), b(desk_config(), 7), c(desk_config(), 8);
    CHECK(encode_checkpoint(snapshot(a)) == encode_checkpoint(snapshot(b)));
    CHECK_FALSE(encode_checkpoint(snapshot(a)) == encode_checkpoint(snapshot(c)));
  }

  TEST_CASE("untracked forward equals tracked forward") {
    std::mt19937_64 rng(52);
    const auto x = oracle::random_tensor<float>(rng, {1, 8, 32, 32});
    Model<float> m(desk_config(), 4);
    Tape<float> t1, t2;
    const auto o1 = m.forward(t1, x, BatchNormMode::Inference, true);
    const auto o2 = m.forward(t2, x, BatchNormMode::Inference, false);
    CHECK(t1.value(o1.prob) == t2.value(o2.prob));
    CHECK(t1.value(o1.boundary) == t2.value(o2.boundary));
  }

  TEST_CASE("precision conversion keeps the function") {
    std::mt19937_64 rng(53);
    const auto x = oracle::random_tensor<double>(rng, {1, 8, 32, 32});
    Model<float> m(desk_config(), 5);
    Model<double> d = convert_model<double>(m);
    const auto pf = m.predict(x.cast<float>());
    const auto pd = d.predict(x);
    double worst = 0;
    for (std::size_t i = 0; i < pf.prob.size(); ++i) worst = std::max(worst, std::abs(double(pf.prob[i]) - pd.prob[i]));
    CHECK(worst < 1e-3);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip is bit-exact") {
    Model<float> m(apply_variant(desk_config(), "gated"), 9);
    const Checkpoint c = snapshot(m);
    const std::string bytes = encode_checkpoint(c);
    CHECK(bytes.substr(0, 5) == "CKPT1");
    const Checkpoint d = decode_checkpoint(bytes);
    CHECK(encode_checkpoint(d) == bytes);
    Model<float> n(d.config, 123);
    restore(n, d);
    CHECK(encode_checkpoint(snapshot(n)) == bytes);
    const auto path = (std::filesystem::temp_directory_path() / "cleftnet-unit-model.ckpt").string();
    save_model(m, path);
    Model<float> loaded = load_model(path);
    CHECK(encode_checkpoint(snapshot(loaded)) == bytes);
  }

  TEST_CASE("manifest offsets are contiguous") {
    Model<float> m(desk_config(), 1);
    const auto man = snapshot(m).manifest();
    std::uint64_t off = 0;
    for (const auto& e : man) {
      CHECK(e.offset == off);
      off += 4 * shape_size(e.shape);
    }
    CHECK(man.front().name == "enc0.conv.weight");
  }

  TEST_CASE("malformed checkpoints are rejected") {
    Model<float> m(desk_config(), 1);
    const std::string bytes = encode_checkpoint(snapshot(m));
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 4)), FormatError);
    CHECK_THROWS_AS(decode_checkpoint(bytes + "abcd"), FormatError);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, 10)), FormatError);
    std::string bad = bytes;
    bad[1] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
    bad = bytes;
    bad[13] = '!';
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  }

  TEST_CASE("loading into a different architecture names the mismatch") {
    Model<float> a(desk_config(), 1);
    Model<float> b(apply_variant(desk_config(), "no-fa"), 1);
    try {
      restore(b, snapshot(a));
      FAIL("expected a mismatch");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("checkpoint manifest mismatch") != std::string::npos);
    }
    Checkpoint c = snapshot(a);
    c.tensors.erase(c.tensors.begin() + 3);
    try {
      restore(a, c);
      FAIL("expected a missing entry");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("missing") != std::string::npos);
    }
  }
}
