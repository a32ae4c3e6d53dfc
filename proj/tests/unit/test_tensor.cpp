#include <cmath>
#include <random>

#include "cleftnet/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cleftnet;

TEST_SUITE("tensor") {
  TEST_CASE("shape bookkeeping") {
    Tensor<float> t({2, 3, 4});
    CHECK(t.size() == 24);
    CHECK(t.strides() == Shape{12, 4, 1});
    t.at({1, 2, 3}) = 5.f;
    CHECK(t[23] == 5.f);
    CHECK_THROWS_AS(t.reshaped({5, 5}), ShapeError);
    CHECK(t.reshaped({24}).shape() == Shape{24});
    CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
    CHECK(shape_str({1, 2}) == "(1,2)");
  }

  TEST_CASE("mode-4 matricization round trip") {
    std::mt19937_64 rng(1);
    const auto t = oracle::random_tensor<double>(rng, {2, 3, 4, 5});
    const auto m = matricize_mode4(t);
    CHECK(m.shape() == Shape{5, 24});
    CHECK(m.at({3, 7}) == t.at({0, 1, 3, 3}));
    CHECK(dematricize_mode4(m, 2, 3, 4) == t);
  }

  TEST_CASE("matmul against explicit sums") {
    std::mt19937_64 rng(2);
    const auto a = oracle::random_tensor<double>(rng, {3, 5});
    const auto b = oracle::random_tensor<double>(rng, {5, 4});
    const auto c = matmul(a, b);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 5; ++k) s += a.at({i, k}) * b.at({k, j});
        CHECK(c.at({i, j}) == doctest::Approx(s).epsilon(1e-12));
      }
    CHECK(matmul(identity_matrix<double>(3), a) == a);
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
  }

  TEST_CASE("softmax columns are stochastic") {
    std::mt19937_64 rng(3);
    const auto s = softmax_columns(oracle::random_tensor<double>(rng, {6, 4}, 5.0));
    for (std::size_t j = 0; j < 4; ++j) {
      double sum = 0;
      for (std::size_t i = 0; i < 6; ++i) sum += s.at({i, j});
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  TEST_CASE("conv3d matches direct summation") {
    std::mt19937_64 rng(4);
    struct Case {
      Shape in, k;
      Triple stride, pad;
    };
    const Case cases[] = {
        {{2, 4, 5, 6, 3}, {3, 3, 3, 3, 4}, {1, 1, 1}, {1, 1, 1}},
        {{1, 3, 7, 5, 2}, {3, 3, 3, 2, 5}, {1, 1, 1}, {0, 0, 0}},
        {{1, 5, 6, 7, 2}, {1, 1, 1, 2, 3}, {1, 1, 1}, {0, 0, 0}},
        {{2, 6, 6, 6, 2}, {2, 2, 2, 2, 3}, {2, 2, 2}, {0, 0, 0}},
        {{1, 4, 9, 9, 3}, {3, 3, 3, 3, 2}, {1, 2, 2}, {1, 1, 1}},
        {{1, 1, 4, 4, 1}, {3, 3, 3, 1, 1}, {1, 1, 1}, {1, 1, 1}},
    };
    for (const auto& c : cases) {
      const auto x = oracle::random_tensor<double>(rng, c.in);
      const auto k = oracle::random_tensor<double>(rng, c.k);
      const auto got = conv3d(x, k, c.stride, c.pad);
      const auto want = oracle::conv3d(x, k, c.stride, c.pad);
      REQUIRE(got.shape() == want.shape());
      double err = 0;
      for (std::size_t i = 0; i < got.size(); ++i) err = std::max(err, std::abs(got[i] - want[i]));
      CHECK(err < 1e-12);
    }
  }

  TEST_CASE("conv3d in single precision agrees with the double oracle") {
    std::mt19937_64 rng(5);
    const auto x = oracle::random_tensor<double>(rng, {1, 4, 8, 8, 4});
    const auto k = oracle::random_tensor<double>(rng, {3, 3, 3, 4, 4}, 0.2);
    const auto got = conv3d(x.cast<float>(), k.cast<float>(), {1, 1, 1}, {1, 1, 1});
    const auto want = oracle::conv3d(x, k, {1, 1, 1}, {1, 1, 1});
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-4));
  }

  TEST_CASE("max pooling picks the block maximum") {
    Tensor<double> x({1, 2, 2, 2, 1}, {1, 8, 3, 4, 5, 6, 7, 2});
    const auto y = maxpool3d(x, {2, 2, 2});
    CHECK(y.shape() == Shape{1, 1, 1, 1, 1});
    CHECK(y[0] == 8);
    const auto z = maxpool3d(x, {1, 2, 2});
    CHECK(z.shape() == Shape{1, 2, 1, 1, 1});
    CHECK(z[0] == 8);
    CHECK(z[1] == 7);
    CHECK_THROWS_AS(maxpool3d(Tensor<double>({1, 3, 2, 2, 1}), {2, 2, 2}), ShapeError);
  }

  TEST_CASE("trilinear upsampling, half-pixel centres") {
    // 1-D line (0, 1) doubled samples at -0.25, 0.25, 0.75, 1.25 -> clamped.
    Tensor<double> x({1, 1, 1, 2, 1}, {0, 1});
    const auto y = trilinear_upsample(x, {1, 1, 2});
    REQUIRE(y.shape() == Shape{1, 1, 1, 4, 1});
    CHECK(y[0] == doctest::Approx(0.0));
    CHECK(y[1] == doctest::Approx(0.25));
    CHECK(y[2] == doctest::Approx(0.75));
    CHECK(y[3] == doctest::Approx(1.0));
    // constants stay constant
    Tensor<double> c({1, 2, 3, 2, 2}, 3.5);
    const auto up = trilinear_upsample(c, {2, 2, 2});
    for (double v : up.values()) CHECK(v == doctest::Approx(3.5));
  }

  TEST_CASE("elementwise activations") {
    Tensor<double> x({3}, {-1.0, 0.0, 2.0});
    const auto e = elu(x);
    CHECK(e[0] == doctest::Approx(std::exp(-1.0) - 1));
    CHECK(e[1] == 0.0);
    CHECK(e[2] == 2.0);
    const auto s = sigmoid(x);
    CHECK(s[0] == doctest::Approx(1 / (1 + std::exp(1.0))));
    CHECK(s[1] == 0.5);
  }

  TEST_CASE("batch norm normalizes per channel and tracks running statistics") {
    std::mt19937_64 rng(6);
    auto x = oracle::random_tensor<double>(rng, {2, 3, 4, 5, 2}, 3.0);
    for (std::size_t i = 0; i < x.size(); i += 2) x[i] += 10;
    Tensor<double> gamma({2}, 1.0), beta({2}, 0.0);
    BatchNormStats<double> st{Tensor<double>({2}, 0.0), Tensor<double>({2}, 1.0)};
    const auto y = batchnorm(x, gamma, beta, st, BatchNormMode::Training);
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0, v = 0, xm = 0;
      const std::size_t n = y.size() / 2;
      for (std::size_t i = c; i < y.size(); i += 2) {
        m += y[i];
        xm += x[i];
      }
      m /= double(n);
      xm /= double(n);
      for (std::size_t i = c; i < y.size(); i += 2) v += (y[i] - m) * (y[i] - m);
      v /= double(n);
      CHECK(std::abs(m) < 1e-12);
      CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
      CHECK(st.running_mean[c] == doctest::Approx(kBatchNormMomentum * xm));
    }
    // inference mode uses the running statistics and leaves them alone
    const auto before = st.running_mean;
    const auto z = batchnorm(x, gamma, beta, st, BatchNormMode::Inference);
    CHECK(st.running_mean == before);
    CHECK(z[0] == doctest::Approx((x[0] - st.running_mean[0]) / std::sqrt(st.running_var[0] + kBatchNormEpsilon)));
  }
}
