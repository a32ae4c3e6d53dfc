#include "cleftnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace cleftnet {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_size(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  check_extents(shape_);
  if (data_.size() != shape_size(shape_)) {
    throw ShapeError("element count " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

template <typename T>
std::size_t Tensor<T>::extent(std::size_t axis) const {
  if (axis >= shape_.size()) throw ShapeError("axis out of range");
  return shape_[axis];
}

template <typename T>
Shape Tensor<T>::strides() const {
  Shape s(shape_.size(), 1);
  for (std::size_t i = shape_.size(); i-- > 1;) s[i - 1] = s[i] * shape_[i];
  return s;
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) throw ShapeError("index rank mismatch");
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw ShapeError("index out of range");
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::size_t> index) {
  return data_[offset(index)];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(index)];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  return Tensor(std::move(shape), data_);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  return Tensor(std::move(shape), std::move(data_));
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  if constexpr (std::is_floating_point_v<T>) {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  } else {
    return true;
  }
}

template <typename T>
Tensor<T> identity_matrix(std::size_t n) {
  Tensor<T> m({n, n});
  for (std::size_t i = 0; i < n; ++i) m[i * n + i] = T(1);
  return m;
}

template <typename T>
Tensor<T> matricize_mode4(const Tensor<T>& t) {
  if (t.rank() != 4) throw ShapeError("matricize_mode4 expects a rank-4 tensor, got " + shape_str(t.shape()));
  const std::size_t c = t.extent(3);
  const std::size_t s = t.extent(0) * t.extent(1) * t.extent(2);
  Tensor<T> m({c, s});
  const T* src = t.data();
  T* dst = m.data();
  for (std::size_t j = 0; j < s; ++j)
    for (std::size_t ch = 0; ch < c; ++ch) dst[ch * s + j] = src[j * c + ch];
  return m;
}

template <typename T>
Tensor<T> dematricize_mode4(const Tensor<T>& m, std::size_t d, std::size_t h, std::size_t w) {
  if (m.rank() != 2 || m.extent(1) != d * h * w)
    throw ShapeError("dematricize_mode4: matrix " + shape_str(m.shape()) + " does not fit (" +
                     std::to_string(d) + "," + std::to_string(h) + "," + std::to_string(w) + ")");
  const std::size_t c = m.extent(0);
  const std::size_t s = d * h * w;
  Tensor<T> t({d, h, w, c});
  for (std::size_t j = 0; j < s; ++j)
    for (std::size_t ch = 0; ch < c; ++ch) t[j * c + ch] = m[ch * s + j];
  return t;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& m) {
  if (m.rank() != 2) throw ShapeError("transpose expects a matrix");
  const std::size_t r = m.extent(0), c = m.extent(1);
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = m[i * c + j];
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects matrices");
  if (a.extent(1) != b.extent(0))
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> c({a.extent(0), b.extent(1)});
  kernels::gemm(false, false, a.extent(0), b.extent(1), a.extent(1), a.data(), b.data(), c.data());
  return c;
}

template <typename T>
Tensor<T> softmax_columns(const Tensor<T>& m) {
  if (m.rank() != 2) throw ShapeError("softmax_columns expects a matrix");
  Tensor<T> out = m;
  kernels::softmax_columns_inplace(out.data(), m.extent(0), m.extent(1));
  return out;
}

template <typename T>
Tensor<T> softmax_vector(const Tensor<T>& v) {
  if (v.rank() != 1) throw ShapeError("softmax_vector expects a vector");
  Tensor<T> out = v;
  kernels::softmax_columns_inplace(out.data(), v.size(), 1);
  return out;
}

namespace kernels {

Spatial5 as_spatial5(const Shape& shape) {
  if (shape.size() == 5) return {shape[0], shape[1], shape[2], shape[3], shape[4]};
  if (shape.size() == 4) return {1, shape[0], shape[1], shape[2], shape[3]};
  throw ShapeError("expected a (d,h,w,c) or (b,d,h,w,c) tensor, got " + shape_str(shape));
}

namespace {

Shape spatial_shape_like(const Shape& like, std::size_t b, std::size_t d, std::size_t h,
                         std::size_t w, std::size_t c) {
  if (like.size() == 5) return {b, d, h, w, c};
  return {d, h, w, c};
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c) {
  std::fill(c, c + m * n, T(0));
  if (!trans_a && !trans_b) {
    // a: m x k, b: k x n
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * k + p];
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (trans_a && !trans_b) {
    // a: k x m, b: k x n
    for (std::size_t p = 0; p < k; ++p) {
      const T* arow = a + p * m;
      const T* brow = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const T av = arow[i];
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    // a: m x k, b: n x k
    for (std::size_t i = 0; i < m; ++i) {
      const T* arow = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T acc = 0;
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        c[i * n + j] = acc;
      }
    }
  } else {
    // a: k x m, b: n x k
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T acc = 0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] = acc;
      }
  }
}

template <typename T>
void softmax_columns_inplace(T* m, std::size_t rows, std::size_t cols) {
  // Row-major storage: a column is strided, so sweep row by row and keep
  // per-column running max and sum.
  std::vector<T> colmax(cols, -std::numeric_limits<T>::infinity());
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = m + i * cols;
    for (std::size_t j = 0; j < cols; ++j) colmax[j] = std::max(colmax[j], row[j]);
  }
  std::vector<T> colsum(cols, T(0));
  for (std::size_t i = 0; i < rows; ++i) {
    T* row = m + i * cols;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - colmax[j]);
      colsum[j] += row[j];
    }
  }
  for (auto& s : colsum) s = T(1) / s;
  for (std::size_t i = 0; i < rows; ++i) {
    T* row = m + i * cols;
    for (std::size_t j = 0; j < cols; ++j) row[j] *= colsum[j];
  }
}

template <typename T>
void softmax_columns_backward(const T* a, T* grad, std::size_t rows, std::size_t cols) {
  std::vector<T> dot(cols, T(0));
  for (std::size_t i = 0; i < rows; ++i) {
    const T* arow = a + i * cols;
    const T* grow = grad + i * cols;
    for (std::size_t j = 0; j < cols; ++j) dot[j] += arow[j] * grow[j];
  }
  for (std::size_t i = 0; i < rows; ++i) {
    const T* arow = a + i * cols;
    T* grow = grad + i * cols;
    for (std::size_t j = 0; j < cols; ++j) grow[j] = arow[j] * (grow[j] - dot[j]);
  }
}

namespace {

struct ConvGeometry {
  Spatial5 in;
  std::size_t kd, kh, kw, co;
  std::size_t od, oh, ow;
};

std::size_t conv_extent(std::size_t n, std::size_t k, std::size_t s, std::size_t p, const char* axis) {
  if (s == 0) throw ShapeError("conv3d stride must be positive");
  const std::size_t padded = n + 2 * p;
  if (padded < k || (padded - k) % s != 0)
    throw ShapeError(std::string("conv3d output extent along ") + axis + " is not a positive integer");
  return (padded - k) / s + 1;
}

ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, Triple stride, Triple padding) {
  ConvGeometry g{};
  g.in = as_spatial5(input);
  if (kernel.size() != 5)
    throw ShapeError("conv3d kernel must be (kd,kh,kw,c_in,c_out), got " + shape_str(kernel));
  if (kernel[3] != g.in.c)
    throw ShapeError("conv3d kernel input channels " + std::to_string(kernel[3]) +
                     " do not match input channels " + std::to_string(g.in.c));
  g.kd = kernel[0];
  g.kh = kernel[1];
  g.kw = kernel[2];
  g.co = kernel[4];
  g.od = conv_extent(g.in.d, g.kd, stride[0], padding[0], "depth");
  g.oh = conv_extent(g.in.h, g.kh, stride[1], padding[1], "height");
  g.ow = conv_extent(g.in.w, g.kw, stride[2], padding[2], "width");
  return g;
}

// Calls fn(out_offset, in_offset, kernel_offset) for every in-bounds tap.
template <typename Fn>
void for_each_tap(const ConvGeometry& g, Triple stride, Triple padding, Fn&& fn) {
  const std::size_t ci = g.in.c;
  for (std::size_t b = 0; b < g.in.b; ++b)
    for (std::size_t z = 0; z < g.od; ++z)
      for (std::size_t y = 0; y < g.oh; ++y)
        for (std::size_t x = 0; x < g.ow; ++x) {
          const std::size_t out_off = (((b * g.od + z) * g.oh + y) * g.ow + x) * g.co;
          for (std::size_t a = 0; a < g.kd; ++a) {
            const std::ptrdiff_t iz = std::ptrdiff_t(z * stride[0] + a) - std::ptrdiff_t(padding[0]);
            if (iz < 0 || iz >= std::ptrdiff_t(g.in.d)) continue;
            for (std::size_t e = 0; e < g.kh; ++e) {
              const std::ptrdiff_t iy = std::ptrdiff_t(y * stride[1] + e) - std::ptrdiff_t(padding[1]);
              if (iy < 0 || iy >= std::ptrdiff_t(g.in.h)) continue;
              for (std::size_t f = 0; f < g.kw; ++f) {
                const std::ptrdiff_t ix = std::ptrdiff_t(x * stride[2] + f) - std::ptrdiff_t(padding[2]);
                if (ix < 0 || ix >= std::ptrdiff_t(g.in.w)) continue;
                const std::size_t in_off =
                    (((b * g.in.d + std::size_t(iz)) * g.in.h + std::size_t(iy)) * g.in.w + std::size_t(ix)) * ci;
                const std::size_t k_off = ((a * g.kh + e) * g.kw + f) * ci * g.co;
                fn(out_off, in_off, k_off);
              }
            }
          }
        }
}

// Unit-stride convolutions work one output slice at a time: the in-bounds
// (tap, input channel) rows of that slice are gathered into a rows x plane
// matrix so every product runs along the contiguous plane axis.
template <typename T>
struct SliceLowering {
  std::vector<T> rows;               // rows x plane
  std::vector<std::size_t> kernel_row;  // (tap * ci + c) for each row
  std::vector<std::array<std::ptrdiff_t, 3>> shift;  // input offset (z, y, x) of each row's tap
  std::size_t count = 0;
};

inline bool unit_stride(const Triple& stride) { return stride == Triple{1, 1, 1}; }

template <typename T>
void lower_slice(const ConvGeometry& g, const Triple& pad, const T* in, std::size_t b, std::size_t z,
                 bool fill, SliceLowering<T>& L) {
  const std::size_t ci = g.in.c, plane = g.oh * g.ow;
  L.count = 0;
  L.kernel_row.clear();
  L.shift.clear();
  for (std::size_t a = 0; a < g.kd; ++a) {
    const std::ptrdiff_t iz = std::ptrdiff_t(z + a) - std::ptrdiff_t(pad[0]);
    if (iz < 0 || iz >= std::ptrdiff_t(g.in.d)) continue;
    for (std::size_t e = 0; e < g.kh; ++e)
      for (std::size_t f = 0; f < g.kw; ++f) {
        const std::size_t tap = (a * g.kh + e) * g.kw + f;
        for (std::size_t c = 0; c < ci; ++c) {
          L.kernel_row.push_back(tap * ci + c);
          L.shift.push_back({iz, std::ptrdiff_t(e) - std::ptrdiff_t(pad[1]), std::ptrdiff_t(f) - std::ptrdiff_t(pad[2])});
        }
        L.count += ci;
      }
  }
  if (!fill) return;
  L.rows.resize(L.count * plane);
  for (std::size_t r0 = 0; r0 < L.count; r0 += ci) {
    const auto [iz, dy, dx] = L.shift[r0];
    const T* src = in + (b * g.in.d + std::size_t(iz)) * g.in.h * g.in.w * ci;
    for (std::size_t y = 0; y < g.oh; ++y) {
      const std::ptrdiff_t iy = std::ptrdiff_t(y) + dy;
      const bool row_ok = iy >= 0 && iy < std::ptrdiff_t(g.in.h);
      for (std::size_t x = 0; x < g.ow; ++x) {
        const std::ptrdiff_t ix = std::ptrdiff_t(x) + dx;
        const std::size_t col = y * g.ow + x;
        if (row_ok && ix >= 0 && ix < std::ptrdiff_t(g.in.w)) {
          const T* v = src + (std::size_t(iy) * g.in.w + std::size_t(ix)) * ci;
          for (std::size_t c = 0; c < ci; ++c) L.rows[(r0 + c) * plane + col] = v[c];
        } else {
          for (std::size_t c = 0; c < ci; ++c) L.rows[(r0 + c) * plane + col] = T(0);
        }
      }
    }
  }
}

template <typename T>
void conv3d_unit_stride(const ConvGeometry& g, const Triple& pad, const T* in, const T* k, T* out) {
  const std::size_t co = g.co, plane = g.oh * g.ow;
  SliceLowering<T> L;
  std::vector<T> acc(co * plane);
  for (std::size_t b = 0; b < g.in.b; ++b)
    for (std::size_t z = 0; z < g.od; ++z) {
      lower_slice(g, pad, in, b, z, true, L);
      std::fill(acc.begin(), acc.end(), T(0));
      for (std::size_t o = 0; o < co; ++o) {
        T* dst = acc.data() + o * plane;
        for (std::size_t r = 0; r < L.count; ++r) {
          const T kv = k[L.kernel_row[r] * co + o];
          const T* src = L.rows.data() + r * plane;
#pragma omp simd
          for (std::size_t i = 0; i < plane; ++i) dst[i] += kv * src[i];
        }
      }
      T* o_slice = out + (b * g.od + z) * plane * co;
      for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t o = 0; o < co; ++o) o_slice[i * co + o] = acc[o * plane + i];
    }
}

template <typename T>
void conv3d_backward_unit_stride(const ConvGeometry& g, const Triple& pad, const T* in, const T* k, const T* go,
                                 T* gi, T* gk) {
  const std::size_t ci = g.in.c, co = g.co, plane = g.oh * g.ow;
  SliceLowering<T> L;
  std::vector<T> gt(co * plane), drows;
  for (std::size_t b = 0; b < g.in.b; ++b)
    for (std::size_t z = 0; z < g.od; ++z) {
      const T* g_slice = go + (b * g.od + z) * plane * co;
      for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t o = 0; o < co; ++o) gt[o * plane + i] = g_slice[i * co + o];
      lower_slice(g, pad, in, b, z, gk != nullptr, L);
      if (gk) {
        for (std::size_t r = 0; r < L.count; ++r) {
          const T* src = L.rows.data() + r * plane;
          for (std::size_t o = 0; o < co; ++o) {
            const T* gr = gt.data() + o * plane;
            T dot = 0;
#pragma omp simd reduction(+ : dot)
            for (std::size_t i = 0; i < plane; ++i) dot += src[i] * gr[i];
            gk[L.kernel_row[r] * co + o] += dot;
          }
        }
      }
      if (!gi) continue;
      drows.assign(L.count * plane, T(0));
      for (std::size_t r = 0; r < L.count; ++r) {
        T* dst = drows.data() + r * plane;
        for (std::size_t o = 0; o < co; ++o) {
          const T kv = k[L.kernel_row[r] * co + o];
          const T* gr = gt.data() + o * plane;
#pragma omp simd
          for (std::size_t i = 0; i < plane; ++i) dst[i] += kv * gr[i];
        }
      }
      for (std::size_t r0 = 0; r0 < L.count; r0 += ci) {
        const auto [iz, dy, dx] = L.shift[r0];
        T* dst = gi + (b * g.in.d + std::size_t(iz)) * g.in.h * g.in.w * ci;
        for (std::size_t y = 0; y < g.oh; ++y) {
          const std::ptrdiff_t iy = std::ptrdiff_t(y) + dy;
          if (iy < 0 || iy >= std::ptrdiff_t(g.in.h)) continue;
          for (std::size_t x = 0; x < g.ow; ++x) {
            const std::ptrdiff_t ix = std::ptrdiff_t(x) + dx;
            if (ix < 0 || ix >= std::ptrdiff_t(g.in.w)) continue;
            T* v = dst + (std::size_t(iy) * g.in.w + std::size_t(ix)) * ci;
            const std::size_t col = y * g.ow + x;
            for (std::size_t c = 0; c < ci; ++c) v[c] += drows[(r0 + c) * plane + col];
          }
        }
      }
    }
}

}  // namespace

template <typename T>
void conv3d_backward(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& grad_out,
                     Triple stride, Triple padding, Tensor<T>* grad_input, Tensor<T>* grad_kernel) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, padding);
  const std::size_t ci = g.in.c, co = g.co;
  const T* in = input.data();
  const T* k = kernel.data();
  const T* go = grad_out.data();
  T* gi = grad_input ? grad_input->data() : nullptr;
  T* gk = grad_kernel ? grad_kernel->data() : nullptr;
  if (unit_stride(stride)) {
    conv3d_backward_unit_stride(g, padding, in, k, go, gi, gk);
    return;
  }
  for_each_tap(g, stride, padding, [&](std::size_t out_off, std::size_t in_off, std::size_t k_off) {
    const T* gor = go + out_off;
    if (gi) {
      T* gir = gi + in_off;
      const T* kr = k + k_off;
      for (std::size_t c = 0; c < ci; ++c) {
        T acc = 0;
        for (std::size_t o = 0; o < co; ++o) acc += kr[c * co + o] * gor[o];
        gir[c] += acc;
      }
    }
    if (gk) {
      const T* inr = in + in_off;
      T* gkr = gk + k_off;
      for (std::size_t c = 0; c < ci; ++c) {
        const T v = inr[c];
        for (std::size_t o = 0; o < co; ++o) gkr[c * co + o] += v * gor[o];
      }
    }
  });
}

template <typename T>
Tensor<T> maxpool3d_indexed(const Tensor<T>& input, Triple factor, std::vector<std::size_t>& argmax) {
  const Spatial5 s = as_spatial5(input.shape());
  for (int a = 0; a < 3; ++a)
    if (factor[a] == 0) throw ShapeError("maxpool factor must be positive");
  if (s.d % factor[0] || s.h % factor[1] || s.w % factor[2])
    throw ShapeError("maxpool3d: extents " + shape_str(input.shape()) + " not divisible by pooling factor");
  const std::size_t od = s.d / factor[0], oh = s.h / factor[1], ow = s.w / factor[2];
  Tensor<T> out(spatial_shape_like(input.shape(), s.b, od, oh, ow, s.c));
  argmax.assign(out.size(), 0);
  const T* in = input.data();
  for (std::size_t b = 0; b < s.b; ++b)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          const std::size_t out_off = (((b * od + z) * oh + y) * ow + x) * s.c;
          for (std::size_t c = 0; c < s.c; ++c) {
            T best = -std::numeric_limits<T>::infinity();
            std::size_t best_idx = 0;
            for (std::size_t a = 0; a < factor[0]; ++a)
              for (std::size_t e = 0; e < factor[1]; ++e)
                for (std::size_t f = 0; f < factor[2]; ++f) {
                  const std::size_t idx =
                      (((b * s.d + z * factor[0] + a) * s.h + y * factor[1] + e) * s.w + x * factor[2] + f) * s.c + c;
                  if (in[idx] > best) {
                    best = in[idx];
                    best_idx = idx;
                  }
                }
            out[out_off + c] = best;
            argmax[out_off + c] = best_idx;
          }
        }
  return out;
}

namespace {

struct LerpTap {
  std::size_t i0, i1;
  double frac;
};

std::vector<LerpTap> lerp_taps(std::size_t n_in, std::size_t scale) {
  std::vector<LerpTap> taps(n_in * scale);
  for (std::size_t i = 0; i < taps.size(); ++i) {
    double src = (double(i) + 0.5) / double(scale) - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = std::min<std::size_t>(std::size_t(src), n_in - 1);
    std::size_t i1 = std::min<std::size_t>(i0 + 1, n_in - 1);
    taps[i] = {i0, i1, src - double(i0)};
  }
  return taps;
}

}  // namespace

template <typename T>
void trilinear_upsample_backward(const Tensor<T>& grad_out, Triple factor, Tensor<T>& grad_input) {
  const Spatial5 s = as_spatial5(grad_input.shape());
  const auto tz = lerp_taps(s.d, factor[0]);
  const auto ty = lerp_taps(s.h, factor[1]);
  const auto tx = lerp_taps(s.w, factor[2]);
  const std::size_t od = tz.size(), oh = ty.size(), ow = tx.size();
  const T* go = grad_out.data();
  T* gi = grad_input.data();
  for (std::size_t b = 0; b < s.b; ++b)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          const T* g = go + (((b * od + z) * oh + y) * ow + x) * s.c;
          const std::size_t zs[2] = {tz[z].i0, tz[z].i1};
          const std::size_t ys[2] = {ty[y].i0, ty[y].i1};
          const std::size_t xs[2] = {tx[x].i0, tx[x].i1};
          const T wz[2] = {T(1 - tz[z].frac), T(tz[z].frac)};
          const T wy[2] = {T(1 - ty[y].frac), T(ty[y].frac)};
          const T wx[2] = {T(1 - tx[x].frac), T(tx[x].frac)};
          for (int a = 0; a < 2; ++a)
            for (int e = 0; e < 2; ++e)
              for (int f = 0; f < 2; ++f) {
                const T wgt = wz[a] * wy[e] * wx[f];
                if (wgt == T(0)) continue;
                T* dst = gi + (((b * s.d + zs[a]) * s.h + ys[e]) * s.w + xs[f]) * s.c;
                for (std::size_t c = 0; c < s.c; ++c) dst[c] += wgt * g[c];
              }
        }
}

template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                            BatchNormStats<T>& stats, BatchNormMode mode, BatchNormCache& cache) {
  if (input.rank() < 2) throw ShapeError("batchnorm expects at least a channel axis plus one more");
  const std::size_t c = input.shape().back();
  const std::size_t n = input.size() / c;
  if (gamma.size() != c || beta.size() != c || stats.running_mean.size() != c || stats.running_var.size() != c)
    throw ShapeError("batchnorm parameter length does not match channel count " + std::to_string(c));
  cache.mean.assign(c, 0.0);
  cache.inv_std.assign(c, 0.0);
  const T* x = input.data();
  if (mode == BatchNormMode::Training) {
    std::vector<double> var(c, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) cache.mean[ch] += double(x[i * c + ch]);
    for (auto& m : cache.mean) m /= double(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double dlt = double(x[i * c + ch]) - cache.mean[ch];
        var[ch] += dlt * dlt;
      }
    for (std::size_t ch = 0; ch < c; ++ch) {
      var[ch] /= double(n);
      cache.inv_std[ch] = 1.0 / std::sqrt(var[ch] + kBatchNormEpsilon);
      const double unbiased = n > 1 ? var[ch] * double(n) / double(n - 1) : var[ch];
      stats.running_mean[ch] =
          T((1 - kBatchNormMomentum) * double(stats.running_mean[ch]) + kBatchNormMomentum * cache.mean[ch]);
      stats.running_var[ch] =
          T((1 - kBatchNormMomentum) * double(stats.running_var[ch]) + kBatchNormMomentum * unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      cache.mean[ch] = double(stats.running_mean[ch]);
      cache.inv_std[ch] = 1.0 / std::sqrt(double(stats.running_var[ch]) + kBatchNormEpsilon);
    }
  }
  Tensor<T> out(input.shape());
  T* y = out.data();
  std::vector<T> scale(c), shift(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    scale[ch] = T(double(gamma[ch]) * cache.inv_std[ch]);
    shift[ch] = T(double(beta[ch]) - double(gamma[ch]) * cache.inv_std[ch] * cache.mean[ch]);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) y[i * c + ch] = x[i * c + ch] * scale[ch] + shift[ch];
  return out;
}

template <typename T>
void batchnorm_backward(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& grad_out,
                        BatchNormMode mode, const BatchNormCache& cache, Tensor<T>* grad_input,
                        Tensor<T>* grad_gamma, Tensor<T>* grad_beta) {
  const std::size_t c = input.shape().back();
  const std::size_t n = input.size() / c;
  const T* x = input.data();
  const T* dy = grad_out.data();
  std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double xhat = (double(x[i * c + ch]) - cache.mean[ch]) * cache.inv_std[ch];
      sum_dy[ch] += double(dy[i * c + ch]);
      sum_dy_xhat[ch] += double(dy[i * c + ch]) * xhat;
    }
  if (grad_gamma)
    for (std::size_t ch = 0; ch < c; ++ch) (*grad_gamma)[ch] += T(sum_dy_xhat[ch]);
  if (grad_beta)
    for (std::size_t ch = 0; ch < c; ++ch) (*grad_beta)[ch] += T(sum_dy[ch]);
  if (!grad_input) return;
  T* dx = grad_input->data();
  if (mode == BatchNormMode::Training) {
    const double inv_n = 1.0 / double(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double xhat = (double(x[i * c + ch]) - cache.mean[ch]) * cache.inv_std[ch];
        const double g = double(gamma[ch]) * cache.inv_std[ch];
        dx[i * c + ch] += T(g * (double(dy[i * c + ch]) - inv_n * sum_dy[ch] - xhat * inv_n * sum_dy_xhat[ch]));
      }
  } else {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch)
        dx[i * c + ch] += T(double(gamma[ch]) * cache.inv_std[ch] * double(dy[i * c + ch]));
  }
}

}  // namespace kernels

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, Triple stride, Triple padding) {
  using namespace kernels;
  const auto g = conv_geometry(input.shape(), kernel.shape(), stride, padding);
  Tensor<T> out(spatial_shape_like(input.shape(), g.in.b, g.od, g.oh, g.ow, g.co));
  const std::size_t ci = g.in.c, co = g.co;
  const T* in = input.data();
  const T* k = kernel.data();
  T* o = out.data();
  if (unit_stride(stride)) {
    conv3d_unit_stride(g, padding, in, k, o);
    return out;
  }
  for_each_tap(g, stride, padding, [&](std::size_t out_off, std::size_t in_off, std::size_t k_off) {
    T* orow = o + out_off;
    const T* inr = in + in_off;
    const T* kr = k + k_off;
    for (std::size_t c = 0; c < ci; ++c) {
      const T v = inr[c];
      const T* kc = kr + c * co;
      for (std::size_t j = 0; j < co; ++j) orow[j] += v * kc[j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& input, Triple factor) {
  std::vector<std::size_t> argmax;
  return kernels::maxpool3d_indexed(input, factor, argmax);
}

template <typename T>
Tensor<T> trilinear_upsample(const Tensor<T>& input, Triple factor) {
  using namespace kernels;
  const Spatial5 s = as_spatial5(input.shape());
  for (int a = 0; a < 3; ++a)
    if (factor[a] == 0) throw ShapeError("upsample factor must be positive");
  const auto tz = lerp_taps(s.d, factor[0]);
  const auto ty = lerp_taps(s.h, factor[1]);
  const auto tx = lerp_taps(s.w, factor[2]);
  const std::size_t od = tz.size(), oh = ty.size(), ow = tx.size();
  Tensor<T> out(spatial_shape_like(input.shape(), s.b, od, oh, ow, s.c));
  const T* in = input.data();
  T* o = out.data();
  for (std::size_t b = 0; b < s.b; ++b)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          T* dst = o + (((b * od + z) * oh + y) * ow + x) * s.c;
          const std::size_t zs[2] = {tz[z].i0, tz[z].i1};
          const std::size_t ys[2] = {ty[y].i0, ty[y].i1};
          const std::size_t xs[2] = {tx[x].i0, tx[x].i1};
          const T wz[2] = {T(1 - tz[z].frac), T(tz[z].frac)};
          const T wy[2] = {T(1 - ty[y].frac), T(ty[y].frac)};
          const T wx[2] = {T(1 - tx[x].frac), T(tx[x].frac)};
          for (int a = 0; a < 2; ++a)
            for (int e = 0; e < 2; ++e)
              for (int f = 0; f < 2; ++f) {
                const T wgt = wz[a] * wy[e] * wx[f];
                if (wgt == T(0)) continue;
                const T* src = in + (((b * s.d + zs[a]) * s.h + ys[e]) * s.w + xs[f]) * s.c;
                for (std::size_t c = 0; c < s.c; ++c) dst[c] += wgt * src[c];
              }
        }
  return out;
}

template <typename T>
Tensor<T> elu(const Tensor<T>& input, T alpha) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const T v = input[i];
    out[i] = v >= T(0) ? v : alpha * std::expm1(v);
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const T v = input[i];
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormStats<T>& stats, BatchNormMode mode) {
  kernels::BatchNormCache cache;
  return kernels::batchnorm_forward(input, gamma, beta, stats, mode, cache);
}

#define CLEFTNET_INSTANTIATE_REAL(T)                                                                  \
  template class Tensor<T>;                                                                           \
  template Tensor<T> identity_matrix<T>(std::size_t);                                                 \
  template Tensor<T> matricize_mode4(const Tensor<T>&);                                               \
  template Tensor<T> dematricize_mode4(const Tensor<T>&, std::size_t, std::size_t, std::size_t);      \
  template Tensor<T> transpose(const Tensor<T>&);                                                     \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> softmax_columns(const Tensor<T>&);                                               \
  template Tensor<T> softmax_vector(const Tensor<T>&);                                                \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, Triple, Triple);                      \
  template Tensor<T> maxpool3d(const Tensor<T>&, Triple);                                             \
  template Tensor<T> trilinear_upsample(const Tensor<T>&, Triple);                                    \
  template Tensor<T> elu(const Tensor<T>&, T);                                                        \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                       \
  template Tensor<T> batchnorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                  \
                               BatchNormStats<T>&, BatchNormMode);                                    \
  template void kernels::gemm(bool, bool, std::size_t, std::size_t, std::size_t, const T*, const T*, \
                              T*);                                                                    \
  template void kernels::softmax_columns_inplace(T*, std::size_t, std::size_t);                      \
  template void kernels::softmax_columns_backward(const T*, T*, std::size_t, std::size_t);           \
  template void kernels::conv3d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                         Triple, Triple, Tensor<T>*, Tensor<T>*);                     \
  template Tensor<T> kernels::maxpool3d_indexed(const Tensor<T>&, Triple, std::vector<std::size_t>&); \
  template void kernels::trilinear_upsample_backward(const Tensor<T>&, Triple, Tensor<T>&);          \
  template Tensor<T> kernels::batchnorm_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                                BatchNormStats<T>&, BatchNormMode,                    \
                                                kernels::BatchNormCache&);                            \
  template void kernels::batchnorm_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                            BatchNormMode, const kernels::BatchNormCache&,            \
                                            Tensor<T>*, Tensor<T>*, Tensor<T>*);

CLEFTNET_INSTANTIATE_REAL(float)
CLEFTNET_INSTANTIATE_REAL(double)

template class Tensor<std::uint8_t>;
template class Tensor<std::int32_t>;

}  // namespace cleftnet
