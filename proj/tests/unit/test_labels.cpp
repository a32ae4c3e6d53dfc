#include <cmath>
#include <deque>
#include <random>

#include "cleftnet/labels.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cleftnet;

namespace {

Tensor<std::uint8_t> single(const Shape& s, std::size_t index) {
  Tensor<std::uint8_t> m(s);
  m[index] = 1;
  return m;
}

}  // namespace

TEST_SUITE("labels") {
  TEST_CASE("distance transform worked examples") {
    const auto d = euclidean_distance_transform(single({3, 3, 3}, 0));
    CHECK(d.at({0, 0, 2}) == 2.0);
    CHECK(d.at({1, 1, 1}) == doctest::Approx(std::sqrt(3.0)).epsilon(1e-15));
    CHECK(d.at({0, 0, 0}) == 0.0);
    const auto a = euclidean_distance_transform(single({2, 2, 2}, 0), kCremiSpacing);
    CHECK(a.at({1, 0, 0}) == 40.0);
    CHECK(a.at({0, 1, 1}) == doctest::Approx(std::sqrt(32.0)));
    Tensor<std::uint8_t> ones({2, 3, 4}, 1);
    const auto zero = euclidean_distance_transform(ones);
    for (double v : zero.values()) CHECK(v == 0.0);
    CHECK_THROWS_AS(euclidean_distance_transform(Tensor<std::uint8_t>({2, 2, 2})), EmptyTargetError);
  }

  TEST_CASE("squared distances equal the brute-force search") {
    std::mt19937_64 rng(21);
    std::uniform_int_distribution<std::size_t> ext(1, 9);
    for (int trial = 0; trial < 40; ++trial) {
      const Shape s{ext(rng), ext(rng), ext(rng)};
      auto m = oracle::random_mask(rng, s, trial % 2 ? 0.05 : 0.3);
      m[0] = 1;
      const Spacing sp = trial % 3 == 0 ? Spacing{40, 4, 4} : kUnitSpacing;
      const auto got = squared_distance_transform(m, sp);
      const auto want = oracle::squared_distance(m, sp);
      CHECK(got == want);
    }
  }

  TEST_CASE("tanh distance map worked examples") {
    const auto y = tanh_distance_map(single({3, 3, 3}, 13));
    CHECK(y[13] == doctest::Approx(0.76159).epsilon(1e-5));
    CHECK(y[12] == 0.0);
    Tensor<std::uint8_t> line({1, 1, 7}, {0, 0, 1, 1, 1, 0, 0});
    const auto t = tanh_distance_map(line);
    const double want[] = {0, 0, std::tanh(1.0), std::tanh(2.0), std::tanh(1.0), 0, 0};
    for (int i = 0; i < 7; ++i) CHECK(t[i] == doctest::Approx(want[i]).epsilon(1e-15));
    CHECK(t[3] == doctest::Approx(0.96403).epsilon(1e-5));
    const auto none = tanh_distance_map(Tensor<std::uint8_t>({3, 3, 3}));
    for (double v : none.values()) CHECK(v == 0.0);
    CHECK_THROWS_AS(tanh_distance_map(Tensor<std::uint8_t>({2, 2, 2}, 1)), EmptyTargetError);
  }

  TEST_CASE("tanh distance map support and range") {
    std::mt19937_64 rng(22);
    for (int trial = 0; trial < 20; ++trial) {
      auto m = oracle::random_mask(rng, {5, 6, 7}, 0.4);
      m[0] = 0;
      const auto y = tanh_distance_map(m);
      const auto want = oracle::tanh_distance_map(m);
      for (std::size_t i = 0; i < y.size(); ++i) {
        CHECK((y[i] > 0) == (m[i] != 0));
        CHECK(y[i] < 1.0);
        CHECK(std::abs(y[i] - want[i]) <= 1e-12);
      }
    }
  }

  TEST_CASE("segmentation loss hand values") {
    Tensor<double> p({2}, {0.8, 0.6}), y({2}, {1, 0});
    CHECK(segmentation_loss(p, y) == doctest::Approx(-0.5 * std::log(0.8) - 0.5 * std::log(0.4)).epsilon(1e-12));
    CHECK(std::abs(segmentation_loss(p, y) - 0.56966) < 1e-4);
    CHECK(segmentation_loss(p, y, 2) == doctest::Approx(segmentation_loss(p, y) / 2).epsilon(1e-14));
    // all background: beta_s = 1, nothing is penalized
    Tensor<double> bg({3}, {0, 0, 0}), q({3}, {0.9, 0.1, 0.5});
    CHECK(segmentation_loss(q, bg) == 0.0);
    // confident and correct -> bounded by the clamp
    Tensor<double> good({2}, {1.0, 0.0});
    CHECK(segmentation_loss(good, y) <= 2 * std::abs(std::log(1 - 1e-7)) + 1e-15);
  }

  TEST_CASE("boundary loss hand values and homogeneity") {
    Tensor<double> yb({2}, {std::tanh(1.0), 0}), pred({2}, {0.5, 0.1});
    CHECK(boundary_loss(pred, yb) == doctest::Approx(0.5 * std::pow(std::tanh(1.0) - 0.5, 2) + 0.5 * 0.01).epsilon(1e-12));
    CHECK(std::abs(boundary_loss(pred, yb) - 0.03921) < 1e-4);
    CHECK(boundary_loss(yb, yb) == 0.0);
    Tensor<double> scaled({2});
    for (int i = 0; i < 2; ++i) scaled[i] = yb[i] + 3.0 * (pred[i] - yb[i]);
    CHECK(boundary_loss(scaled, yb) == doctest::Approx(9.0 * boundary_loss(pred, yb)).epsilon(1e-12));
  }

  TEST_CASE("coherence loss hand values") {
    // predicted boundary voxel: -(1 - P) log yb_hat
    Tensor<double> p1({1}, {0.2}), b1({1}, {0.9});
    CHECK(coherence_loss(p1, b1) == doctest::Approx(-0.8 * std::log(0.9)).epsilon(1e-12));
    CHECK(std::abs(coherence_loss(p1, b1) - 0.08430) < 1e-4);
    // non-boundary voxel, formula as printed: -(1 - yb_hat) log P
    LossWeights literal;
    literal.coherence_form = CoherenceForm::Literal;
    Tensor<double> p2({1}, {0.99}), b2({1}, {0.0});
    CHECK(coherence_loss(p2, b2, literal) == doctest::Approx(-(1 - 1e-7) * std::log(0.99)).epsilon(1e-12));
    CHECK(std::abs(coherence_loss(p2, b2, literal) - 0.01005) < 1e-4);
    // default: penalizes a confident cleft where no boundary is predicted
    CHECK(coherence_loss(p2, b2) == doctest::Approx(-(1 - 1e-7) * std::log(0.01)).epsilon(1e-12));
    Tensor<double> p3({1}, {0.01});
    CHECK(coherence_loss(p3, b2) == doctest::Approx(-(1 - 1e-7) * std::log(0.99)).epsilon(1e-12));
    // threshold sits at 0.5 tanh(1)
    const double tau = 0.5 * std::tanh(1.0);
    Tensor<double> above({1}, {tau + 1e-9}), below({1}, {tau - 1e-9});
    CHECK(coherence_loss(p1, above) == doctest::Approx(-0.8 * std::log(tau)).epsilon(1e-6));
    CHECK(coherence_loss(p1, below) == doctest::Approx(-(1 - tau) * std::log(0.8)).epsilon(1e-6));
  }

  TEST_CASE("total loss composition") {
    Tensor<double> p({2}, {0.8, 0.6}), ys({2}, {1, 0});
    Tensor<double> yb({2}, {std::tanh(1.0), 0}), bh({2}, {0.5, 0.1});
    const auto t = total_loss(p, bh, ys, yb);
    CHECK(t.total == doctest::Approx(t.segmentation + 0.5 * t.boundary + 0.2 * t.coherence).epsilon(1e-15));
    CHECK(std::abs(t.segmentation - 0.56966) < 1e-4);
    CHECK(std::abs(t.boundary - 0.03921) < 1e-4);
    // voxel 0: yb_hat 0.5 > tau -> -(0.2) ln 0.5; voxel 1: 0.1 < tau -> -(0.9) ln(1 - 0.6)
    CHECK(t.coherence == doctest::Approx(-0.2 * std::log(0.5) - 0.9 * std::log(0.4)).epsilon(1e-12));
    LossWeights zero{0, 0};
    CHECK(total_loss(p, bh, ys, yb, zero).total == t.segmentation);
  }

  TEST_CASE("losses are nonnegative") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor<double> p({50}), b({50}), ys({50}), yb({50});
      for (int i = 0; i < 50; ++i) {
        p[i] = u(rng);
        b[i] = u(rng);
        ys[i] = u(rng) < 0.3;
        yb[i] = ys[i] ? std::tanh(1 + 2 * u(rng)) : 0;
      }
      const auto t = total_loss(p, b, ys, yb);
      CHECK(t.segmentation >= 0);
      CHECK(t.boundary >= 0);
      CHECK(t.coherence >= 0);
    }
  }

  TEST_CASE("taped losses match the direct evaluation and its finite differences") {
    std::mt19937_64 rng(24);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    std::deque<Parameter<double>> ps;
    Tensor<double> p0({2, 3, 4}), b0({2, 3, 4}), ys({2, 3, 4}), yb({2, 3, 4});
    for (std::size_t i = 0; i < p0.size(); ++i) {
      p0[i] = u(rng);
      b0[i] = u(rng);
      // keep clear of the coherence threshold so central differences stay on one branch
      if (std::abs(b0[i] - 0.5 * std::tanh(1.0)) < 0.02) b0[i] += 0.05;
      ys[i] = i % 3 == 0;
      yb[i] = ys[i] ? std::tanh(1.0) : 0;
    }
    ps.emplace_back("p", p0);
    ps.emplace_back("b", b0);
    std::vector<Parameter<double>*> ptr{&ps[0], &ps[1]};
    for (auto form : {CoherenceForm::Consistent, CoherenceForm::Literal}) {
      LossWeights w;
      w.coherence_form = form;
      const auto r = grad_check(
          [&](Tape<double>& t) {
            const auto l = ad::total_loss(t, t.parameter(ps[0]), t.parameter(ps[1]), ys, yb, w, 2);
            CHECK(t.value(l.total)[0] == doctest::Approx(total_loss(ps[0].value, ps[1].value, ys, yb, w, 2).total));
            return l.total;
          },
          ptr);
      CHECK(r.passed);
    }
  }
}
