#include "cleftnet/attention.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <type_traits>
#include <cmath>
#include <limits>

namespace cleftnet {

Triple residual_factor(ResidualKind kind, const Triple& input_grid, const Triple& query_grid) {
  Triple f{1, 1, 1};
  for (int a = 0; a < 3; ++a) {
    const std::size_t in = input_grid[a], q = query_grid[a];
    switch (kind) {
      case ResidualKind::Identity:
        if (in != q) throw ShapeError("identity residual requires the query grid to equal the input grid");
        break;
      case ResidualKind::MaxPool:
        if (q * 2 == in) {
          f[a] = 2;
        } else if (q != in) {
          throw ShapeError("max-pool residual requires each query extent to be the input extent or its half");
        }
        break;
      case ResidualKind::Trilinear:
        if (in * 2 == q) {
          f[a] = 2;
        } else if (q != in) {
          throw ShapeError("trilinear residual requires each query extent to be the input extent or its double");
        }
        break;
    }
  }
  return f;
}

namespace {

template <typename T>
void transpose_into(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

Triple grid_of(const Shape& s) {
  const auto g = kernels::as_spatial5(s);
  return {g.d, g.h, g.w};
}

}  // namespace

template <typename T>
Tensor<T> attention_map(const Tensor<T>& keys, const Tensor<T>& query) {
  if (keys.rank() != 4 || query.rank() != 4) throw ShapeError("attention_map expects rank-4 keys and query");
  if (keys.extent(3) != query.extent(3))
    throw ShapeError("query channels must equal key channels");
  const Tensor<T> k = matricize_mode4(keys);
  const Tensor<T> q = matricize_mode4(query);
  return softmax_columns(matmul(transpose(k), q));
}

template <typename T>
Tensor<T> fa_forward(const Tensor<T>& input, const FAParams<T>& params) {
  Tape<T> tape;
  Var x = tape.constant(input);
  ad::FAVars v{tape.constant(params.query), tape.constant(params.key_kernel), tape.constant(params.value_kernel),
               tape.constant(params.output_kernel)};
  return tape.value(ad::feature_augmentor(tape, x, v, params.residual));
}

template <typename T>
Tensor<T> gated_attention_swa(const Tensor<T>& input, const Tensor<T>& q_s) {
  Tape<T> tape;
  return tape.value(ad::gated_swa(tape, tape.constant(input), tape.constant(q_s)));
}

template <typename T>
Tensor<T> gated_attention_cwa(const Tensor<T>& input, const Tensor<T>& q_c) {
  Tape<T> tape;
  return tape.value(ad::gated_cwa(tape, tape.constant(input), tape.constant(q_c)));
}

template <typename T>
Tensor<T> self_attention(const Tensor<T>& input, const Tensor<T>& query_kernel, const Tensor<T>& key_kernel,
                         const Tensor<T>& value_kernel, const Tensor<T>& output_kernel) {
  Tape<T> tape;
  ad::SelfAttentionVars v{tape.constant(query_kernel), tape.constant(key_kernel), tape.constant(value_kernel),
                          tape.constant(output_kernel)};
  return tape.value(ad::self_attention(tape, tape.constant(input), v, ResidualKind::Identity, {1, 1, 1}));
}

namespace ad {

namespace {

// exp for the attention kernels. The float path is a Cephes-style polynomial
// the compiler can vectorize; arguments are always <= 0 here.
template <typename T>
inline T exp_nonpositive(T x) {
  if constexpr (std::is_same_v<T, float>) {
    x = std::max(x, -87.0f);
    // Adding 1.5 * 2^23 rounds to the nearest integer and leaves it in the low mantissa bits.
    const float shifted = x * 1.44269504088896341f + 12582912.0f;
    const float n = shifted - 12582912.0f;
    float r = x - n * 0.693359375f;
    r = r + n * 2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    const float e = p * r * r + r + 1.0f;
    const std::int32_t bits = (std::bit_cast<std::int32_t>(shifted) - 0x4B400000 + 127) << 23;
    return e * std::bit_cast<float>(bits);
  } else {
    return std::exp(x);
  }
}

// Scores of every key against query column `q` (length ck), written to `sc`.
template <typename T>
void column_scores(const T* km, std::size_t ck, std::size_t s, const T* q, T* sc) {
  std::fill(sc, sc + s, T(0));
  for (std::size_t c = 0; c < ck; ++c) {
    const T qc = q[c];
    const T* kr = km + c * s;
#pragma omp simd
    for (std::size_t i = 0; i < s; ++i) sc[i] += qc * kr[i];
  }
}

}  // namespace

// Streaming attention: one query column at a time, so the (s x tq) map is
// never materialized. Backward recomputes each column from its log-sum-exp.
template <typename T>
Var attend(Tape<T>& t, Var keys, Var values, Var queries) {
  const auto& kv = t.value(keys);
  const auto& vv = t.value(values);
  const auto& qv = t.value(queries);
  const auto ks = kernels::as_spatial5(kv.shape());
  const auto vs = kernels::as_spatial5(vv.shape());
  const auto qs = kernels::as_spatial5(qv.shape());
  const bool shared_query = qv.rank() == 4 && kv.rank() == 5;
  if (ks.b != vs.b || ks.d != vs.d || ks.h != vs.h || ks.w != vs.w)
    throw ShapeError("attend: keys and values must share batch and spatial extents");
  if (qs.c != ks.c) throw ShapeError("attend: query channels (" + std::to_string(qs.c) +
                                     ") must equal key channels (" + std::to_string(ks.c) + ")");
  if (!shared_query && qs.b != ks.b) throw ShapeError("attend: query batch differs from key batch");

  const std::size_t batch = ks.b, s = ks.voxels(), tq = qs.voxels(), ck = ks.c, cv = vs.c;
  Shape out_shape = kv.rank() == 5 ? Shape{batch, qs.d, qs.h, qs.w, cv} : Shape{qs.d, qs.h, qs.w, cv};
  Tensor<T> out(out_shape);
  std::vector<T> lse(batch * tq);

  std::vector<T> km(ck * s), vm(cv * s), sc(s);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* qb = qv.data() + (shared_query ? 0 : b * tq * ck);
    transpose_into(kv.data() + b * s * ck, s, ck, km.data());
    transpose_into(vv.data() + b * s * cv, s, cv, vm.data());
    T* zb = out.data() + b * tq * cv;
    for (std::size_t j = 0; j < tq; ++j) {
      column_scores(km.data(), ck, s, qb + j * ck, sc.data());
      T mx = -std::numeric_limits<T>::infinity();
#pragma omp simd reduction(max : mx)
      for (std::size_t i = 0; i < s; ++i) mx = std::max(mx, sc[i]);
      T sum = 0;
#pragma omp simd reduction(+ : sum)
      for (std::size_t i = 0; i < s; ++i) {
        sc[i] = exp_nonpositive(sc[i] - mx);
        sum += sc[i];
      }
      const T inv = T(1) / sum;
      for (std::size_t c = 0; c < cv; ++c) {
        const T* vr = vm.data() + c * s;
        T acc = 0;
#pragma omp simd reduction(+ : acc)
        for (std::size_t i = 0; i < s; ++i) acc += sc[i] * vr[i];
        zb[j * cv + c] = acc * inv;
      }
      lse[b * tq + j] = mx + std::log(sum);
    }
  }

  return t.record(std::move(out), {keys, values, queries},
                  [keys, values, queries, shared_query, batch, s, tq, ck, cv, lse = std::move(lse)](
                      Tape<T>& tp, const Tensor<T>& g) {
                    const auto& kv = tp.value(keys);
                    const auto& vv = tp.value(values);
                    const auto& qv = tp.value(queries);
                    Tensor<T>* gk = tp.requires_grad(keys) ? &tp.grad_buffer(keys) : nullptr;
                    Tensor<T>* gv = tp.requires_grad(values) ? &tp.grad_buffer(values) : nullptr;
                    Tensor<T>* gq = tp.requires_grad(queries) ? &tp.grad_buffer(queries) : nullptr;
                    std::vector<T> km(ck * s), vm(cv * s), a(s), ds(s), dkm(ck * s), dvm(cv * s);
                    for (std::size_t b = 0; b < batch; ++b) {
                      const T* qb = qv.data() + (shared_query ? 0 : b * tq * ck);
                      const T* gb = g.data() + b * tq * cv;
                      transpose_into(kv.data() + b * s * ck, s, ck, km.data());
                      transpose_into(vv.data() + b * s * cv, s, cv, vm.data());
                      std::fill(dkm.begin(), dkm.end(), T(0));
                      std::fill(dvm.begin(), dvm.end(), T(0));
                      T* dqb = gq ? gq->data() + (shared_query ? 0 : b * tq * ck) : nullptr;
                      for (std::size_t j = 0; j < tq; ++j) {
                        const T* q = qb + j * ck;
                        const T* dz = gb + j * cv;
                        column_scores(km.data(), ck, s, q, a.data());
                        const T l = lse[b * tq + j];
#pragma omp simd
                        for (std::size_t i = 0; i < s; ++i) a[i] = exp_nonpositive(std::min(a[i] - l, T(0)));
                        if (gv) {
                          for (std::size_t c = 0; c < cv; ++c) {
                            const T dzc = dz[c];
                            T* dv = dvm.data() + c * s;
#pragma omp simd
                            for (std::size_t i = 0; i < s; ++i) dv[i] += a[i] * dzc;
                          }
                        }
                        if (!gk && !gq) continue;
                        // ds = a * (V^T dz - <a, V^T dz>)
                        std::fill(ds.begin(), ds.end(), T(0));
                        for (std::size_t c = 0; c < cv; ++c) {
                          const T dzc = dz[c];
                          const T* vr = vm.data() + c * s;
#pragma omp simd
                          for (std::size_t i = 0; i < s; ++i) ds[i] += vr[i] * dzc;
                        }
                        T dot = 0;
#pragma omp simd reduction(+ : dot)
                        for (std::size_t i = 0; i < s; ++i) dot += a[i] * ds[i];
#pragma omp simd
                        for (std::size_t i = 0; i < s; ++i) ds[i] = a[i] * (ds[i] - dot);
                        for (std::size_t c = 0; c < ck; ++c) {
                          if (gk) {
                            const T qc = q[c];
                            T* dk = dkm.data() + c * s;
#pragma omp simd
                            for (std::size_t i = 0; i < s; ++i) dk[i] += ds[i] * qc;
                          }
                          if (dqb) {
                            const T* kr = km.data() + c * s;
                            T acc = 0;
#pragma omp simd reduction(+ : acc)
                            for (std::size_t i = 0; i < s; ++i) acc += ds[i] * kr[i];
                            dqb[j * ck + c] += acc;
                          }
                        }
                      }
                      if (gv) {
                        T* dst = gv->data() + b * s * cv;
                        for (std::size_t i = 0; i < s; ++i)
                          for (std::size_t c = 0; c < cv; ++c) dst[i * cv + c] += dvm[c * s + i];
                      }
                      if (gk) {
                        T* dst = gk->data() + b * s * ck;
                        for (std::size_t i = 0; i < s; ++i)
                          for (std::size_t c = 0; c < ck; ++c) dst[i * ck + c] += dkm[c * s + i];
                      }
                    }
                  });
}

template <typename T>
Var resample(Tape<T>& t, Var input, ResidualKind kind, Triple factor) {
  switch (kind) {
    case ResidualKind::MaxPool:
      return maxpool3d(t, input, factor);
    case ResidualKind::Trilinear:
      return upsample(t, input, factor);
    case ResidualKind::Identity:
      break;
  }
  return input;
}

template <typename T>
Var feature_augmentor(Tape<T>& t, Var input, const FAVars& p, ResidualKind kind) {
  const auto& x = t.value(input);
  const auto& q = t.value(p.query);
  if (q.rank() != 4) throw ShapeError("feature augmentor query must be (d_q,h_q,w_q,c_q)");
  const Triple factor = residual_factor(kind, grid_of(x.shape()), {q.extent(0), q.extent(1), q.extent(2)});
  const auto& kk = t.value(p.key_kernel);
  if (kk.rank() != 5 || kk.extent(4) != q.extent(3))
    throw ShapeError("query channels c_q must equal key channels c_k");
  Var keys = conv3d(t, input, p.key_kernel);
  Var values = conv3d(t, input, p.value_kernel);
  Var z = attend(t, keys, values, p.query);
  Var n = conv3d(t, z, p.output_kernel);
  return add(t, n, resample(t, input, kind, factor));
}

template <typename T>
Var self_attention(Tape<T>& t, Var input, const SelfAttentionVars& p, ResidualKind kind, Triple factor) {
  Var resized = resample(t, input, kind, factor);
  Var queries = conv3d(t, resized, p.query_kernel);
  Var keys = conv3d(t, input, p.key_kernel);
  Var values = conv3d(t, input, p.value_kernel);
  Var z = attend(t, keys, values, queries);
  Var n = conv3d(t, z, p.output_kernel);
  return add(t, n, resized);
}

template <typename T>
Var gated_swa(Tape<T>& t, Var input, Var q_s) {
  const auto& x = t.value(input);
  const auto& q = t.value(q_s);
  const auto sp = kernels::as_spatial5(x.shape());
  if (q.size() != sp.c) throw ShapeError("q_s length must equal the channel count");
  const std::size_t s = sp.voxels(), c = sp.c;
  Tensor<T> out(x.shape());
  Tensor<T> scores({sp.b, s});
  for (std::size_t b = 0; b < sp.b; ++b) {
    const T* xb = x.data() + b * s * c;
    T* sc = scores.data() + b * s;
    for (std::size_t i = 0; i < s; ++i) {
      T acc = 0;
      for (std::size_t ch = 0; ch < c; ++ch) acc += xb[i * c + ch] * q[ch];
      sc[i] = acc;
    }
    kernels::softmax_columns_inplace(sc, s, 1);
    T* ob = out.data() + b * s * c;
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) ob[i * c + ch] = sc[i] * xb[i * c + ch];
  }
  return t.record(std::move(out), {input, q_s},
                  [input, q_s, s, c, batch = sp.b, a = std::move(scores)](Tape<T>& tp, const Tensor<T>& g) {
                    const auto& x = tp.value(input);
                    const auto& q = tp.value(q_s);
                    Tensor<T>* gx = tp.requires_grad(input) ? &tp.grad_buffer(input) : nullptr;
                    Tensor<T>* gq = tp.requires_grad(q_s) ? &tp.grad_buffer(q_s) : nullptr;
                    std::vector<T> da(s);
                    for (std::size_t b = 0; b < batch; ++b) {
                      const T* xb = x.data() + b * s * c;
                      const T* gb = g.data() + b * s * c;
                      const T* ab = a.data() + b * s;
                      for (std::size_t i = 0; i < s; ++i) {
                        T acc = 0;
                        for (std::size_t ch = 0; ch < c; ++ch) acc += gb[i * c + ch] * xb[i * c + ch];
                        da[i] = acc;
                      }
                      kernels::softmax_columns_backward(ab, da.data(), s, 1);
                      for (std::size_t i = 0; i < s; ++i)
                        for (std::size_t ch = 0; ch < c; ++ch) {
                          if (gx) (*gx)[b * s * c + i * c + ch] += ab[i] * gb[i * c + ch] + da[i] * q[ch];
                          if (gq) (*gq)[ch] += da[i] * xb[i * c + ch];
                        }
                    }
                  });
}

template <typename T>
Var gated_cwa(Tape<T>& t, Var input, Var q_c) {
  const auto& x = t.value(input);
  const auto& q = t.value(q_c);
  const auto sp = kernels::as_spatial5(x.shape());
  const std::size_t s = sp.voxels(), c = sp.c;
  if (q.size() != s) throw ShapeError("q_c length must equal d*h*w");
  Tensor<T> out(x.shape());
  Tensor<T> scores({sp.b, c});
  for (std::size_t b = 0; b < sp.b; ++b) {
    const T* xb = x.data() + b * s * c;
    T* sc = scores.data() + b * c;
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) sc[ch] += xb[i * c + ch] * q[i];
    kernels::softmax_columns_inplace(sc, c, 1);
    T* ob = out.data() + b * s * c;
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) ob[i * c + ch] = sc[ch] * xb[i * c + ch];
  }
  return t.record(std::move(out), {input, q_c},
                  [input, q_c, s, c, batch = sp.b, a = std::move(scores)](Tape<T>& tp, const Tensor<T>& g) {
                    const auto& x = tp.value(input);
                    const auto& q = tp.value(q_c);
                    Tensor<T>* gx = tp.requires_grad(input) ? &tp.grad_buffer(input) : nullptr;
                    Tensor<T>* gq = tp.requires_grad(q_c) ? &tp.grad_buffer(q_c) : nullptr;
                    std::vector<T> da(c);
                    for (std::size_t b = 0; b < batch; ++b) {
                      const T* xb = x.data() + b * s * c;
                      const T* gb = g.data() + b * s * c;
                      const T* ab = a.data() + b * c;
                      std::fill(da.begin(), da.end(), T(0));
                      for (std::size_t i = 0; i < s; ++i)
                        for (std::size_t ch = 0; ch < c; ++ch) da[ch] += gb[i * c + ch] * xb[i * c + ch];
                      kernels::softmax_columns_backward(ab, da.data(), c, 1);
                      for (std::size_t i = 0; i < s; ++i)
                        for (std::size_t ch = 0; ch < c; ++ch) {
                          if (gx) (*gx)[b * s * c + i * c + ch] += ab[ch] * gb[i * c + ch] + da[ch] * q[i];
                          if (gq) (*gq)[i] += da[ch] * xb[i * c + ch];
                        }
                    }
                  });
}

}  // namespace ad

#define CLEFTNET_INSTANTIATE_ATTENTION(T)                                                              \
  template Tensor<T> attention_map(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> fa_forward(const Tensor<T>&, const FAParams<T>&);                                 \
  template Tensor<T> gated_attention_swa(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> gated_attention_cwa(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> self_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                    const Tensor<T>&, const Tensor<T>&);                               \
  template Var ad::attend(Tape<T>&, Var, Var, Var);                                                    \
  template Var ad::resample(Tape<T>&, Var, ResidualKind, Triple);                                      \
  template Var ad::feature_augmentor(Tape<T>&, Var, const FAVars&, ResidualKind);                      \
  template Var ad::self_attention(Tape<T>&, Var, const SelfAttentionVars&, ResidualKind, Triple);      \
  template Var ad::gated_swa(Tape<T>&, Var, Var);                                                      \
  template Var ad::gated_cwa(Tape<T>&, Var, Var);

CLEFTNET_INSTANTIATE_ATTENTION(float)
CLEFTNET_INSTANTIATE_ATTENTION(double)

}  // namespace cleftnet
