#include <cmath>
#include <deque>
#include <random>

#include "cleftnet/attention.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cleftnet;

namespace {

FAParams<double> make_fa(std::mt19937_64& rng, std::size_t c, const Triple& qgrid, ResidualKind kind) {
  const std::size_t ck = std::max<std::size_t>(1, c / 2);
  FAParams<double> p;
  p.query = oracle::random_tensor<double>(rng, {qgrid[0], qgrid[1], qgrid[2], ck});
  p.key_kernel = oracle::random_tensor<double>(rng, {1, 1, 1, c, ck}, 0.5);
  p.value_kernel = oracle::random_tensor<double>(rng, {1, 1, 1, c, ck}, 0.5);
  p.output_kernel = oracle::random_tensor<double>(rng, {1, 1, 1, ck, c}, 0.5);
  p.residual = kind;
  return p;
}

// Z = V softmax(K^T Q) from explicit matrices, returned (d_q,h_q,w_q,c_v).
Tensor<double> attention_reference(const Tensor<double>& keys, const Tensor<double>& values,
                                   const Tensor<double>& query) {
  const auto a = attention_map(keys, query);
  const auto z = matmul(matricize_mode4(values), a);
  return dematricize_mode4(z, query.extent(0), query.extent(1), query.extent(2));
}

}  // namespace

TEST_SUITE("attention") {
  TEST_CASE("attention map is column-stochastic with the documented shape") {
    std::mt19937_64 rng(1);
    const auto k = oracle::random_tensor<double>(rng, {2, 4, 4, 3});
    const auto q = oracle::random_tensor<double>(rng, {1, 2, 2, 3});
    const auto a = attention_map(k, q);
    CHECK(a.shape() == Shape{32, 4});
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < 32; ++i) s += a.at({i, j});
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    // entry-wise against exp(k_i . q_j) / sum
    double denom = 0;
    std::vector<double> num(32);
    for (std::size_t i = 0; i < 32; ++i) {
      double dot = 0;
      for (std::size_t c = 0; c < 3; ++c) dot += k[i * 3 + c] * q[1 * 3 + c];
      num[i] = std::exp(dot);
      denom += num[i];
    }
    for (std::size_t i = 0; i < 32; ++i) CHECK(a.at({i, 1}) == doctest::Approx(num[i] / denom).epsilon(1e-10));
  }

  TEST_CASE("streaming attend equals the materialized attention product") {
    std::mt19937_64 rng(2);
    for (auto prec : {0, 1}) {
      const auto k = oracle::random_tensor<double>(rng, {2, 2, 6, 6, 3}, 2.0);
      const auto v = oracle::random_tensor<double>(rng, {2, 2, 6, 6, 4});
      const auto q = oracle::random_tensor<double>(rng, {1, 3, 3, 3}, 2.0);
      for (std::size_t b = 0; b < 2; ++b) {
        const std::size_t nk = 2 * 6 * 6;
        Tensor<double> kb({2, 6, 6, 3}, std::vector<double>(k.data() + b * nk * 3, k.data() + (b + 1) * nk * 3));
        Tensor<double> vb({2, 6, 6, 4}, std::vector<double>(v.data() + b * nk * 4, v.data() + (b + 1) * nk * 4));
        const auto want = attention_reference(kb, vb, q);
        if (prec == 0) {
          Tape<double> t;
          const auto z = t.value(ad::attend(t, t.constant(k), t.constant(v), t.constant(q)));
          REQUIRE(z.shape() == Shape{2, 1, 3, 3, 4});
          for (std::size_t i = 0; i < want.size(); ++i) CHECK(z[b * want.size() + i] == doctest::Approx(want[i]).epsilon(1e-12));
        } else {
          Tape<float> t;
          const auto z = t.value(ad::attend(t, t.constant(k.cast<float>()), t.constant(v.cast<float>()),
                                            t.constant(q.cast<float>())));
          for (std::size_t i = 0; i < want.size(); ++i)
            CHECK(double(z[b * want.size() + i]) == doctest::Approx(want[i]).epsilon(1e-4).scale(1.0));
        }
      }
    }
  }

  TEST_CASE("attend gradients, shared and batched queries") {
    for (bool batched : {false, true}) {
      std::mt19937_64 rng(3);
      std::deque<Parameter<double>> ps;
      ps.emplace_back("k", oracle::random_tensor<double>(rng, {2, 2, 3, 3, 2}));
      ps.emplace_back("v", oracle::random_tensor<double>(rng, {2, 2, 3, 3, 3}));
      ps.emplace_back("q", oracle::random_tensor<double>(rng, batched ? Shape{2, 1, 2, 2, 2} : Shape{1, 2, 2, 2}));
      const auto w = oracle::random_tensor<double>(rng, {2, 1, 2, 2, 3});
      std::vector<Parameter<double>*> ptr{&ps[0], &ps[1], &ps[2]};
      const auto r = grad_check(
          [&](Tape<double>& t) {
            Var z = ad::attend(t, t.parameter(ps[0]), t.parameter(ps[1]), t.parameter(ps[2]));
            return ad::sum(t, ad::mul(t, z, t.constant(w)));
          },
          ptr);
      CHECK(r.passed);
    }
  }

  TEST_CASE("the query fixes the output grid: half, double, same") {
    std::mt19937_64 rng(4);
    const auto x = oracle::random_tensor<double>(rng, {4, 8, 8, 6});
    SUBCASE("half") {
      const auto y = fa_forward(x, make_fa(rng, 6, {2, 4, 4}, ResidualKind::MaxPool));
      CHECK(y.shape() == Shape{2, 4, 4, 6});
    }
    SUBCASE("double") {
      const auto y = fa_forward(x, make_fa(rng, 6, {8, 16, 16}, ResidualKind::Trilinear));
      CHECK(y.shape() == Shape{8, 16, 16, 6});
    }
    SUBCASE("same") {
      const auto y = fa_forward(x, make_fa(rng, 6, {4, 8, 8}, ResidualKind::Identity));
      CHECK(y.shape() == Shape{4, 8, 8, 6});
    }
    SUBCASE("anisotropic half") {
      const auto y = fa_forward(x, make_fa(rng, 6, {4, 4, 4}, ResidualKind::MaxPool));
      CHECK(y.shape() == Shape{4, 4, 4, 6});
    }
    SUBCASE("inconsistent grid is rejected") {
      CHECK_THROWS_AS(fa_forward(x, make_fa(rng, 6, {3, 4, 4}, ResidualKind::MaxPool)), ShapeError);
      CHECK_THROWS_AS(fa_forward(x, make_fa(rng, 6, {4, 12, 8}, ResidualKind::Trilinear)), ShapeError);
    }
  }

  TEST_CASE("feature augmentor equals its definition") {
    std::mt19937_64 rng(5);
    const auto x = oracle::random_tensor<double>(rng, {2, 4, 4, 4});
    const auto p = make_fa(rng, 4, {1, 2, 2}, ResidualKind::MaxPool);
    const Shape xs{1, 2, 4, 4, 4};
    const auto xb = x.reshaped(xs);
    const auto keys = conv3d(xb, p.key_kernel).reshaped({2, 4, 4, 2});
    const auto vals = conv3d(xb, p.value_kernel).reshaped({2, 4, 4, 2});
    const auto z = attention_reference(keys, vals, p.query);
    const auto o = conv3d(z.reshaped({1, 1, 2, 2, 2}), p.output_kernel);
    const auto res = maxpool3d(xb, {2, 2, 2});
    const auto y = fa_forward(x, p);
    REQUIRE(y.shape() == Shape{1, 2, 2, 4});
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(o[i] + res[i]).epsilon(1e-12));
  }

  TEST_CASE("feature augmentor gradients for every residual kind") {
    struct Case {
      ResidualKind kind;
      Triple qgrid;
    };
    for (const auto& c : {Case{ResidualKind::MaxPool, {1, 2, 2}}, Case{ResidualKind::Trilinear, {4, 8, 8}},
                          Case{ResidualKind::Identity, {2, 4, 4}}}) {
      std::mt19937_64 rng(6);
      const auto fa = make_fa(rng, 2, c.qgrid, c.kind);
      std::deque<Parameter<double>> ps;
      ps.emplace_back("x", oracle::random_tensor<double>(rng, {2, 2, 4, 4, 2}));
      ps.emplace_back("q", fa.query);
      ps.emplace_back("k", fa.key_kernel);
      ps.emplace_back("v", fa.value_kernel);
      ps.emplace_back("o", fa.output_kernel);
      std::vector<Parameter<double>*> ptr;
      for (auto& p : ps) ptr.push_back(&p);
      Tensor<double> w;
      const auto r = grad_check(
          [&](Tape<double>& t) {
            ad::FAVars v{t.parameter(ps[1]), t.parameter(ps[2]), t.parameter(ps[3]), t.parameter(ps[4])};
            Var y = ad::feature_augmentor(t, t.parameter(ps[0]), v, c.kind);
            if (w.empty()) w = oracle::random_tensor<double>(rng, t.value(y).shape());
            return ad::sum(t, ad::mul(t, y, t.constant(w)));
          },
          ptr);
      CHECK(r.passed);
    }
  }

  TEST_CASE("gated attention equals its definition") {
    std::mt19937_64 rng(7);
    const auto m = oracle::random_tensor<double>(rng, {1, 2, 3, 4});
    const auto qs = oracle::random_tensor<double>(rng, {4});
    const auto qc = oracle::random_tensor<double>(rng, {6});
    const auto swa = gated_attention_swa(m, qs);
    const auto cwa = gated_attention_cwa(m, qc);
    // spatial: softmax over the 6 voxels of <m_i, q_s>
    std::vector<double> s(6), e(4);
    double zs = 0;
    for (std::size_t i = 0; i < 6; ++i) {
      double dot = 0;
      for (std::size_t c = 0; c < 4; ++c) dot += m[i * 4 + c] * qs[c];
      s[i] = std::exp(dot);
      zs += s[i];
    }
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t c = 0; c < 4; ++c) CHECK(swa[i * 4 + c] == doctest::Approx(m[i * 4 + c] * s[i] / zs).epsilon(1e-12));
    // channel: softmax over channels of M q_c, M the (c x voxels) unfolding
    double ze = 0;
    for (std::size_t c = 0; c < 4; ++c) {
      double dot = 0;
      for (std::size_t i = 0; i < 6; ++i) dot += m[i * 4 + c] * qc[i];
      e[c] = std::exp(dot);
      ze += e[c];
    }
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t c = 0; c < 4; ++c) CHECK(cwa[i * 4 + c] == doctest::Approx(m[i * 4 + c] * e[c] / ze).epsilon(1e-12));
  }

  TEST_CASE("self attention keeps the input grid and has an identity residual") {
    std::mt19937_64 rng(8);
    const auto x = oracle::random_tensor<double>(rng, {2, 4, 4, 4});
    const auto wq = oracle::random_tensor<double>(rng, {1, 1, 1, 4, 2});
    const auto wk = oracle::random_tensor<double>(rng, {1, 1, 1, 4, 2});
    const auto wv = oracle::random_tensor<double>(rng, {1, 1, 1, 4, 2});
    const Tensor<double> zero({1, 1, 1, 2, 4});
    CHECK(self_attention(x, wq, wk, wv, zero).reshaped(x.shape()) == x);
    const auto wo = oracle::random_tensor<double>(rng, {1, 1, 1, 2, 4});
    const auto xb = x.reshaped({1, 2, 4, 4, 4});
    const auto q = conv3d(xb, wq).reshaped({2, 4, 4, 2});
    const auto z = attention_reference(conv3d(xb, wk).reshaped({2, 4, 4, 2}), conv3d(xb, wv).reshaped({2, 4, 4, 2}), q);
    const auto o = conv3d(z.reshaped({1, 2, 4, 4, 2}), wo);
    const auto y = self_attention(x, wq, wk, wv, wo);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(o[i] + x[i]).epsilon(1e-12));
  }

  TEST_CASE("gated and input-query gradients") {
    std::mt19937_64 rng(9);
    std::deque<Parameter<double>> ps;
    ps.emplace_back("x", oracle::random_tensor<double>(rng, {2, 2, 4, 4, 2}));
    ps.emplace_back("qs", oracle::random_tensor<double>(rng, {2}));
    ps.emplace_back("qc", oracle::random_tensor<double>(rng, {32}));
    ps.emplace_back("wq", oracle::random_tensor<double>(rng, {1, 1, 1, 2, 1}));
    ps.emplace_back("wk", oracle::random_tensor<double>(rng, {1, 1, 1, 2, 1}));
    ps.emplace_back("wv", oracle::random_tensor<double>(rng, {1, 1, 1, 2, 1}));
    ps.emplace_back("wo", oracle::random_tensor<double>(rng, {1, 1, 1, 1, 2}));
    std::vector<Parameter<double>*> ptr;
    for (auto& p : ps) ptr.push_back(&p);
    const auto w = oracle::random_tensor<double>(rng, {2, 1, 2, 2, 2});
    const auto r = grad_check(
        [&](Tape<double>& t) {
          Var x = t.parameter(ps[0]);
          Var g = ad::add(t, ad::gated_swa(t, x, t.parameter(ps[1])), ad::gated_cwa(t, x, t.parameter(ps[2])));
          ad::SelfAttentionVars sv{t.parameter(ps[3]), t.parameter(ps[4]), t.parameter(ps[5]), t.parameter(ps[6])};
          Var y = ad::self_attention(t, g, sv, ResidualKind::MaxPool, {2, 2, 2});
          return ad::sum(t, ad::mul(t, y, t.constant(w)));
        },
        ptr);
    CHECK(r.passed);
  }
}
