#pragma once

// Brute-force reference implementations used by the unit and acceptance tests.
// Deliberately naive: every quantity is recomputed from its definition.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "cleftnet/labels.hpp"
#include "cleftnet/tensor.hpp"

namespace oracle {

using cleftnet::Shape;
using cleftnet::Spacing;
using cleftnet::Tensor;
using cleftnet::Triple;

struct Index3 {
  long z, y, x;
};

inline Index3 unravel(std::size_t i, const Shape& s) {
  return {long(i / (s[1] * s[2])), long((i / s[2]) % s[1]), long(i % s[2])};
}

inline double sq_dist(Index3 a, Index3 b, const Spacing& sp) {
  const double dz = double(a.z - b.z) * sp[0], dy = double(a.y - b.y) * sp[1], dx = double(a.x - b.x) * sp[2];
  return dz * dz + dy * dy + dx * dx;
}

/// min over target voxels of the squared physical distance; +inf when empty.
inline Tensor<double> squared_distance(const Tensor<std::uint8_t>& mask, const Spacing& sp) {
  const Shape& s = mask.shape();
  std::vector<Index3> targets;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) targets.push_back(unravel(i, s));
  Tensor<double> out(s, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const Index3 p = unravel(i, s);
    for (const auto& t : targets) out[i] = std::min(out[i], sq_dist(p, t, sp));
  }
  return out;
}

inline Tensor<double> tanh_distance_map(const Tensor<std::uint8_t>& clefts) {
  Tensor<std::uint8_t> bg(clefts.shape());
  for (std::size_t i = 0; i < bg.size(); ++i) bg[i] = clefts[i] ? 0 : 1;
  const auto d2 = squared_distance(bg, {1, 1, 1});
  Tensor<double> out(clefts.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = clefts[i] ? std::tanh(std::sqrt(d2[i])) : 0.0;
  return out;
}

/// Mean over voxels of `from` of the distance to the nearest voxel of `to`.
inline double mean_distance(const Tensor<std::uint8_t>& from, const Tensor<std::uint8_t>& to, const Spacing& sp) {
  const Shape& s = from.shape();
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (!from[i]) continue;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < to.size(); ++j)
      if (to[j]) best = std::min(best, sq_dist(unravel(i, s), unravel(j, s), sp));
    sum += std::sqrt(best);
    ++n;
  }
  return sum / double(n);
}

/// P(score of a random positive > score of a random negative), ties count half.
template <typename T>
double pair_auc(const Tensor<T>& scores, const Tensor<std::uint8_t>& gt) {
  double wins = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!gt[i]) continue;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (gt[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / double(pairs);
}

/// Direct 3-D convolution, (b,d,h,w,ci) x (kd,kh,kw,ci,co), zero padding.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& in, const Tensor<T>& k, Triple stride, Triple pad) {
  const auto& s = in.shape();
  const auto& ks = k.shape();
  const std::size_t b = s[0], d = s[1], h = s[2], w = s[3], ci = s[4], co = ks[4];
  const std::size_t od = (d + 2 * pad[0] - ks[0]) / stride[0] + 1;
  const std::size_t oh = (h + 2 * pad[1] - ks[1]) / stride[1] + 1;
  const std::size_t ow = (w + 2 * pad[2] - ks[2]) / stride[2] + 1;
  Tensor<T> out({b, od, oh, ow, co});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x)
          for (std::size_t o = 0; o < co; ++o) {
            double acc = 0;
            for (std::size_t a = 0; a < ks[0]; ++a)
              for (std::size_t bb = 0; bb < ks[1]; ++bb)
                for (std::size_t c = 0; c < ks[2]; ++c) {
                  const long iz = long(z * stride[0] + a) - long(pad[0]);
                  const long iy = long(y * stride[1] + bb) - long(pad[1]);
                  const long ix = long(x * stride[2] + c) - long(pad[2]);
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= long(d) || iy >= long(h) || ix >= long(w)) continue;
                  for (std::size_t i = 0; i < ci; ++i)
                    acc += double(in[(((n * d + iz) * h + iy) * w + ix) * ci + i]) *
                           double(k[(((a * ks[1] + bb) * ks[2] + c) * ci + i) * co + o]);
                }
            out[(((n * od + z) * oh + y) * ow + x) * co + o] = T(acc);
          }
  return out;
}

inline Tensor<std::uint8_t> random_mask(std::mt19937_64& rng, const Shape& s, double density) {
  std::bernoulli_distribution on(density);
  Tensor<std::uint8_t> m(s);
  for (auto& v : m.values()) v = on(rng) ? 1 : 0;
  return m;
}

template <typename T>
Tensor<T> random_tensor(std::mt19937_64& rng, const Shape& s, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor<T> t(s);
  for (auto& v : t.values()) v = T(nd(rng));
  return t;
}

}  // namespace oracle
