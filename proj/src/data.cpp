#include "cleftnet/data.hpp"

#include <hdf5.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

namespace cleftnet {

namespace {

constexpr char kVol1Magic[4] = {'V', 'O', 'L', '1'};
constexpr std::size_t kVol1HeaderBytes = 4 + 3 * 4 + 1 + 3 * 4;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(in[pos + i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }
float get_f32(const std::string& in, std::size_t pos) { return std::bit_cast<float>(get_u32(in, pos)); }

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path);
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw FormatError("short write to " + path);
}

std::array<float, 3> to_f32(const Spacing& s) { return {float(s[0]), float(s[1]), float(s[2])}; }
Spacing to_spacing(const std::array<float, 3>& s) { return {s[0], s[1], s[2]}; }

void require_rank3(const Shape& s, const char* what) {
  if (s.size() != 3) throw ShapeError(std::string(what) + ": expected a (d,h,w) array, got " + shape_str(s));
}

}  // namespace

Vol1 make_vol1(Tensor<std::uint8_t> data, Vol1Type type, const Spacing& spacing) {
  if (type == Vol1Type::Field) throw ContractError("make_vol1: byte payload cannot be a field");
  require_rank3(data.shape(), "make_vol1");
  Vol1 v;
  v.type = type;
  v.spacing = to_f32(spacing);
  v.bytes = std::move(data);
  return v;
}

Vol1 make_vol1(Tensor<float> field, const Spacing& spacing) {
  require_rank3(field.shape(), "make_vol1");
  Vol1 v;
  v.type = Vol1Type::Field;
  v.spacing = to_f32(spacing);
  v.field = std::move(field);
  return v;
}

std::string encode_vol1(const Vol1& v) {
  const Shape s = v.extents();
  require_rank3(s, "write_vol1");
  std::string out(kVol1Magic, 4);
  for (std::size_t e : s) {
    if (e > 0xffffffffULL) throw ShapeError("write_vol1: extent exceeds 32 bits");
    put_u32(out, std::uint32_t(e));
  }
  out.push_back(char(v.type));
  for (float f : v.spacing) put_f32(out, f);
  if (v.type == Vol1Type::Field) {
    out.reserve(out.size() + 4 * v.field.size());
    for (float f : v.field.values()) put_f32(out, f);
  } else {
    out.append(reinterpret_cast<const char*>(v.bytes.data()), v.bytes.size());
  }
  return out;
}

Vol1 decode_vol1(const std::string& in) {
  if (in.size() < kVol1HeaderBytes) throw FormatError("VOL1: truncated header");
  if (!std::equal(kVol1Magic, kVol1Magic + 4, in.begin())) throw FormatError("VOL1: bad magic");
  const Shape s{get_u32(in, 4), get_u32(in, 8), get_u32(in, 12)};
  if (shape_size(s) == 0) throw FormatError("VOL1: zero extent");
  const auto code = std::uint8_t(in[16]);
  if (code > 2) throw FormatError("VOL1: unknown dtype code " + std::to_string(code));
  Vol1 v;
  v.type = Vol1Type(code);
  for (int i = 0; i < 3; ++i) v.spacing[i] = get_f32(in, 17 + 4 * i);
  const std::size_t n = shape_size(s);
  const std::size_t want = kVol1HeaderBytes + n * (v.type == Vol1Type::Field ? 4 : 1);
  if (in.size() != want) {
    throw FormatError("VOL1: payload length " + std::to_string(in.size() - kVol1HeaderBytes) + " does not match " +
                      shape_str(s));
  }
  if (v.type == Vol1Type::Field) {
    std::vector<float> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = get_f32(in, kVol1HeaderBytes + 4 * i);
    v.field = Tensor<float>(s, std::move(vals));
  } else {
    v.bytes = Tensor<std::uint8_t>(s, std::vector<std::uint8_t>(in.begin() + kVol1HeaderBytes, in.end()));
  }
  return v;
}

void write_vol1(const std::string& path, const Vol1& v) { write_file(path, encode_vol1(v)); }
Vol1 read_vol1(const std::string& path) { return decode_vol1(read_file(path)); }

void Volume::validate() const {
  require_rank3(raw.shape(), "Volume");
  if (raw.shape() != labels.shape()) {
    throw ShapeError("Volume: raw " + shape_str(raw.shape()) + " and labels " + shape_str(labels.shape()) + " differ");
  }
  for (double s : spacing) {
    if (!(s > 0)) throw ContractError("Volume: spacing must be positive");
  }
}

void save_volume(const Volume& v, const std::string& prefix) {
  v.validate();
  write_vol1(prefix + ".raw.vol1", make_vol1(v.raw, Vol1Type::Raw, v.spacing));
  write_vol1(prefix + ".labels.vol1", make_vol1(v.labels, Vol1Type::Mask, v.spacing));
}

Volume load_volume(const std::string& prefix) { return load_volume(prefix + ".raw.vol1", prefix + ".labels.vol1"); }

Volume load_volume(const std::string& raw_path, const std::string& labels_path) {
  Vol1 raw = read_vol1(raw_path);
  Vol1 lab = read_vol1(labels_path);
  if (raw.type != Vol1Type::Raw) throw FormatError(raw_path + ": not a raw u8 volume");
  if (lab.type != Vol1Type::Mask) throw FormatError(labels_path + ": not a mask volume");
  Volume v;
  v.name = raw_path;
  v.raw = std::move(raw.bytes);
  v.labels = std::move(lab.bytes);
  for (auto& x : v.labels.values()) x = x ? 1 : 0;
  v.spacing = to_spacing(raw.spacing);
  v.validate();
  return v;
}

// ---- HDF5 ------------------------------------------------------------------

namespace {

struct H5Handle {
  hid_t id = H5I_INVALID_HID;
  herr_t (*close)(hid_t) = nullptr;
  H5Handle(hid_t i, herr_t (*c)(hid_t)) : id(i), close(c) {}
  H5Handle(const H5Handle&) = delete;
  H5Handle& operator=(const H5Handle&) = delete;
  ~H5Handle() {
    if (id >= 0) close(id);
  }
};

void silence_hdf5() { H5Eset_auto2(H5E_DEFAULT, nullptr, nullptr); }

herr_t collect_datasets(hid_t, const char* name, const H5O_info_t* info, void* out) {
  if (info->type == H5O_TYPE_DATASET) static_cast<std::vector<std::string>*>(out)->push_back(std::string("/") + name);
  return 0;
}

std::string normalize_h5_path(const std::string& p) { return p.empty() || p[0] != '/' ? "/" + p : p; }

std::string join(const std::vector<std::string>& xs) {
  std::string s;
  for (const auto& x : xs) s += (s.empty() ? "" : ", ") + x;
  return s;
}

Shape dataset_extents(hid_t ds, const std::string& name) {
  H5Handle space(H5Dget_space(ds), H5Sclose);
  const int rank = H5Sget_simple_extent_ndims(space.id);
  if (rank != 3) throw ImportError(name + ": expected a 3-d dataset, found rank " + std::to_string(rank));
  hsize_t dims[3];
  H5Sget_simple_extent_dims(space.id, dims, nullptr);
  return {std::size_t(dims[0]), std::size_t(dims[1]), std::size_t(dims[2])};
}

bool read_resolution(hid_t ds, Spacing& out) {
  if (H5Aexists(ds, "resolution") <= 0) return false;
  H5Handle attr(H5Aopen(ds, "resolution", H5P_DEFAULT), H5Aclose);
  H5Handle space(H5Aget_space(attr.id), H5Sclose);
  if (H5Sget_simple_extent_npoints(space.id) != 3) return false;
  double r[3];
  if (H5Aread(attr.id, H5T_NATIVE_DOUBLE, r) < 0) return false;
  out = {r[0], r[1], r[2]};
  return true;
}

}  // namespace

std::vector<std::string> hdf5_dataset_paths(const std::string& path) {
  silence_hdf5();
  H5Handle file(H5Fopen(path.c_str(), H5F_ACC_RDONLY, H5P_DEFAULT), H5Fclose);
  if (file.id < 0) throw ImportError("cannot open HDF5 file " + path);
  std::vector<std::string> out;
  H5Ovisit(file.id, H5_INDEX_NAME, H5_ITER_INC, collect_datasets, &out);
  std::sort(out.begin(), out.end());
  return out;
}

Volume import_cremi(const std::string& path, const CremiImportOptions& opts) {
  const auto available = hdf5_dataset_paths(path);
  for (const auto& want : {opts.raw_dataset, opts.cleft_dataset}) {
    if (std::find(available.begin(), available.end(), normalize_h5_path(want)) == available.end()) {
      throw ImportError("dataset '" + want + "' not found in " + path + "; available: " + join(available));
    }
  }
  H5Handle file(H5Fopen(path.c_str(), H5F_ACC_RDONLY, H5P_DEFAULT), H5Fclose);
  H5Handle raw_ds(H5Dopen2(file.id, opts.raw_dataset.c_str(), H5P_DEFAULT), H5Dclose);
  H5Handle cleft_ds(H5Dopen2(file.id, opts.cleft_dataset.c_str(), H5P_DEFAULT), H5Dclose);
  if (raw_ds.id < 0 || cleft_ds.id < 0) throw ImportError("cannot open datasets in " + path);

  const Shape shape = dataset_extents(raw_ds.id, opts.raw_dataset);
  if (dataset_extents(cleft_ds.id, opts.cleft_dataset) != shape) {
    throw ImportError("raw and cleft datasets have different extents");
  }
  Volume v;
  v.name = path;
  v.raw = Tensor<std::uint8_t>(shape);
  if (H5Dread(raw_ds.id, H5T_NATIVE_UINT8, H5S_ALL, H5S_ALL, H5P_DEFAULT, v.raw.data()) < 0) {
    throw ImportError("failed to read " + opts.raw_dataset);
  }
  std::vector<std::uint64_t> ids(shape_size(shape));
  if (H5Dread(cleft_ds.id, H5T_NATIVE_UINT64, H5S_ALL, H5S_ALL, H5P_DEFAULT, ids.data()) < 0) {
    throw ImportError("failed to read " + opts.cleft_dataset);
  }
  v.labels = Tensor<std::uint8_t>(shape);
  for (std::size_t i = 0; i < ids.size(); ++i) v.labels[i] = ids[i] != opts.background_sentinel ? 1 : 0;

  v.spacing = kCremiSpacing;
  if (!read_resolution(raw_ds.id, v.spacing)) read_resolution(cleft_ds.id, v.spacing);
  v.validate();
  return v;
}

// ---- splits ----------------------------------------------------------------

namespace {

Tensor<std::uint8_t> slab(const Tensor<std::uint8_t>& t, std::size_t z0, std::size_t z1) {
  const std::size_t plane = t.extent(1) * t.extent(2);
  std::vector<std::uint8_t> vals(t.data() + z0 * plane, t.data() + z1 * plane);
  return Tensor<std::uint8_t>({z1 - z0, t.extent(1), t.extent(2)}, std::move(vals));
}

}  // namespace

std::pair<Volume, Volume> split_by_slices(const Volume& v, std::size_t train_slices) {
  v.validate();
  const std::size_t d = v.raw.extent(0);
  if (train_slices == 0 || train_slices >= d) {
    throw ContractError("split_by_slices: need 0 < train_slices < " + std::to_string(d));
  }
  Volume train{v.name + ":train", slab(v.raw, 0, train_slices), slab(v.labels, 0, train_slices), v.spacing};
  Volume val{v.name + ":val", slab(v.raw, train_slices, d), slab(v.labels, train_slices, d), v.spacing};
  return {std::move(train), std::move(val)};
}

std::size_t default_train_slices(std::size_t depth) {
  if (depth < 2) throw ContractError("default_train_slices: volume too thin to split");
  const auto n = std::size_t(std::llround(double(depth) * 100.0 / 125.0));
  return std::clamp<std::size_t>(n, 1, depth - 1);
}

// ---- patches ---------------------------------------------------------------

LabeledVolume label_volume(Volume v) {
  v.validate();
  LabeledVolume out;
  out.boundary = tanh_distance_map(v.labels).cast<float>();
  out.volume = std::move(v);
  return out;
}

namespace {

template <typename Src, typename Dst, typename F>
void crop_into(const Tensor<Src>& src, Tensor<Dst>& dst, const Triple& o, F f) {
  const std::size_t H = src.extent(1), W = src.extent(2);
  const std::size_t d = dst.extent(0), h = dst.extent(1), w = dst.extent(2);
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < h; ++y) {
      const Src* s = src.data() + ((o[0] + z) * H + o[1] + y) * W + o[2];
      Dst* t = dst.data() + (z * h + y) * w;
      for (std::size_t x = 0; x < w; ++x) t[x] = f(s[x]);
    }
}

void check_fits(const LabeledVolume& v, const Triple& origin, const Triple& size) {
  const auto& s = v.volume.raw.shape();
  for (int a = 0; a < 3; ++a) {
    if (size[a] == 0 || origin[a] + size[a] > s[a]) {
      throw ContractError("patch of size " + shape_str({size[0], size[1], size[2]}) + " does not fit volume " +
                          shape_str(s));
    }
  }
}

std::size_t count_clefts(const Tensor<std::uint8_t>& labels, const Triple& o, const Triple& size) {
  const std::size_t H = labels.extent(1), W = labels.extent(2);
  std::size_t n = 0;
  for (std::size_t z = 0; z < size[0]; ++z)
    for (std::size_t y = 0; y < size[1]; ++y) {
      const std::uint8_t* s = labels.data() + ((o[0] + z) * H + o[1] + y) * W + o[2];
      for (std::size_t x = 0; x < size[2]; ++x) n += s[x] != 0;
    }
  return n;
}

}  // namespace

PatchSample crop_patch(const LabeledVolume& v, const Triple& origin, const Triple& size) {
  check_fits(v, origin, size);
  const Shape s{size[0], size[1], size[2]};
  PatchSample p;
  p.origin = origin;
  p.raw = Tensor<float>(s);
  p.y_s = Tensor<float>(s);
  p.y_b = Tensor<float>(s);
  crop_into(v.volume.raw, p.raw, origin, [](std::uint8_t x) { return float(x) / 255.0f; });
  crop_into(v.volume.labels, p.y_s, origin, [](std::uint8_t x) { return x ? 1.0f : 0.0f; });
  crop_into(v.boundary, p.y_b, origin, [](float x) { return x; });
  return p;
}

PatchSample sample_patch(const LabeledVolume& v, const Triple& size, Rng& rng, const RejectionPolicy& policy) {
  check_fits(v, {0, 0, 0}, size);
  const auto& s = v.volume.raw.shape();
  std::bernoulli_distribution reject(policy.reject_probability);
  for (std::size_t draws = 1;; ++draws) {
    Triple o;
    for (int a = 0; a < 3; ++a) o[a] = std::uniform_int_distribution<std::size_t>(0, s[a] - size[a])(rng);
    if (count_clefts(v.volume.labels, o, size) < policy.min_cleft_voxels && reject(rng)) continue;
    PatchSample p = crop_patch(v, o, size);
    p.draws = draws;
    return p;
  }
}

template <typename T>
Tensor<T> rotate_in_plane(const Tensor<T>& t, int quarter_turns) {
  require_rank3(t.shape(), "rotate_in_plane");
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return t;
  const std::size_t d = t.extent(0), h = t.extent(1), w = t.extent(2);
  if (k == 2) {
    Tensor<T> out(t.shape());
    for (std::size_t z = 0; z < d; ++z)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out[(z * h + y) * w + x] = t[(z * h + (h - 1 - y)) * w + (w - 1 - x)];
    return out;
  }
  // One counter-clockwise turn maps (y, x) of the output to (x, w-1-y) of the input.
  Tensor<T> once({d, w, h});
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < w; ++y)
      for (std::size_t x = 0; x < h; ++x) once[(z * w + y) * h + x] = t[(z * h + x) * w + (w - 1 - y)];
  return k == 1 ? once : rotate_in_plane(once, 2);
}

template <typename T>
Tensor<T> flip_axis(const Tensor<T>& t, int axis) {
  require_rank3(t.shape(), "flip_axis");
  if (axis < 0 || axis > 2) throw ContractError("flip_axis: axis must be 0, 1 or 2");
  const std::size_t d = t.extent(0), h = t.extent(1), w = t.extent(2);
  Tensor<T> out(t.shape());
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t sz = axis == 0 ? d - 1 - z : z;
        const std::size_t sy = axis == 1 ? h - 1 - y : y;
        const std::size_t sx = axis == 2 ? w - 1 - x : x;
        out[(z * h + y) * w + x] = t[(sz * h + sy) * w + sx];
      }
  return out;
}

PatchSample augment(PatchSample p, Rng& rng, const AugmentProbabilities& probs) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  if (u01(rng) < probs.rotate) {
    int k = std::uniform_int_distribution<int>(1, 3)(rng);
    // Odd turns would change the patch extents of a non-square plane.
    if (p.raw.extent(1) != p.raw.extent(2)) k = 2;
    p.aug.quarter_turns = k;
    p.raw = rotate_in_plane(p.raw, k);
    p.y_s = rotate_in_plane(p.y_s, k);
    p.y_b = rotate_in_plane(p.y_b, k);
  }
  if (u01(rng) < probs.flip) {
    const int axis = std::uniform_int_distribution<int>(0, 2)(rng);
    p.aug.flip_axis = axis;
    p.raw = flip_axis(p.raw, axis);
    p.y_s = flip_axis(p.y_s, axis);
    p.y_b = flip_axis(p.y_b, axis);
  }
  if (u01(rng) < probs.grayscale) {
    p.aug.grayscale = true;
    p.aug.gain = std::uniform_real_distribution<double>(0.9, 1.1)(rng);
    p.aug.offset = std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
    for (auto& x : p.raw.values()) x = float(std::clamp(p.aug.gain * x + p.aug.offset, 0.0, 1.0));
  }
  return p;
}

// ---- synthetic volumes -----------------------------------------------------

namespace {

struct Wave {
  double kz, ky, kx, phase, amp;
};

struct Sheet {
  double cz, cy, cx;
  double cos_t, sin_t;
  double half_length;
  double curvature;  // quadratic bend along the sheet
  double tilt;       // drift of the sheet across slices
  double half_depth;
  double half_thickness;
};

Sheet random_sheet(Rng& rng, const Triple& e, double thickness, double len_lo, double len_hi, double depth_hi) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double margin = 4.0;
  Sheet s;
  s.cz = u(rng) * double(e[0] - 1);
  s.cy = margin + u(rng) * (double(e[1]) - 2 * margin);
  s.cx = margin + u(rng) * (double(e[2]) - 2 * margin);
  const double theta = u(rng) * std::numbers::pi;
  s.cos_t = std::cos(theta);
  s.sin_t = std::sin(theta);
  s.half_length = len_lo + u(rng) * (len_hi - len_lo);
  s.curvature = (u(rng) - 0.5) * 0.12;
  s.tilt = (u(rng) - 0.5) * 1.0;
  s.half_depth = 1.0 + u(rng) * (depth_hi - 1.0);
  s.half_thickness = 0.5 * thickness;
  return s;
}

template <typename F>
void rasterize(const Sheet& s, const Triple& e, F mark) {
  const double reach = s.half_length + std::abs(s.curvature) * s.half_length * s.half_length +
                       std::abs(s.tilt) * s.half_depth + s.half_thickness + 1;
  const auto lo = [](double c, double r) { return std::size_t(std::max(0.0, std::floor(c - r))); };
  const auto hi = [](double c, double r, std::size_t n) { return std::size_t(std::min(double(n), std::ceil(c + r + 1))); };
  for (std::size_t z = lo(s.cz, s.half_depth); z < hi(s.cz, s.half_depth, e[0]); ++z) {
    const double dz = double(z) - s.cz;
    if (std::abs(dz) > s.half_depth) continue;
    // The sheet narrows towards its top and bottom slices, like a disc seen edge-on.
    const double r = dz / (s.half_depth + 1);
    const double len = s.half_length * std::sqrt(1 - r * r);
    for (std::size_t y = lo(s.cy, reach); y < hi(s.cy, reach, e[1]); ++y)
      for (std::size_t x = lo(s.cx, reach); x < hi(s.cx, reach, e[2]); ++x) {
        const double dy = double(y) - s.cy, dx = double(x) - s.cx;
        const double t = dx * s.cos_t + dy * s.sin_t;
        if (std::abs(t) > len) continue;
        const double o = -dx * s.sin_t + dy * s.cos_t - s.curvature * t * t - s.tilt * dz;
        if (std::abs(o) < s.half_thickness) mark((z * e[1] + y) * e[2] + x);
      }
  }
}

}  // namespace

Volume synthesize(const SynthOptions& opts) {
  const Triple& e = opts.extents;
  if (e[0] < 1 || e[1] < 16 || e[2] < 16) throw ContractError("synthesize: need depth >= 1 and in-plane extents >= 16");
  if (!(opts.thickness > 0) || opts.noise < 0) throw ContractError("synthesize: thickness must be positive");
  Rng rng(opts.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  std::vector<Wave> waves(6);
  for (auto& w : waves) {
    const double period = 10 + 30 * u(rng);
    const double angle = 2 * std::numbers::pi * u(rng);
    const double k = 2 * std::numbers::pi / period;
    w = {k * (u(rng) - 0.5) * 0.5, k * std::sin(angle), k * std::cos(angle), 2 * std::numbers::pi * u(rng),
         0.03 + 0.04 * u(rng)};
  }
  const std::size_t n = e[0] * e[1] * e[2];
  std::vector<double> img(n);
  for (std::size_t z = 0; z < e[0]; ++z)
    for (std::size_t y = 0; y < e[1]; ++y)
      for (std::size_t x = 0; x < e[2]; ++x) {
        double v = 0.6;
        for (const auto& w : waves) v += w.amp * std::sin(w.kz * double(z) + w.ky * double(y) + w.kx * double(x) + w.phase);
        img[(z * e[1] + y) * e[2] + x] = v;
      }

  // Faint thin membranes are not labelled; they make intensity alone insufficient.
  for (std::size_t i = 0; i < opts.n_clefts; ++i) {
    Sheet m = random_sheet(rng, e, 1.0, 10.0, 24.0, 5.0);
    rasterize(m, e, [&](std::size_t idx) { img[idx] -= 0.15; });
  }

  Volume v;
  v.name = "synthetic-" + std::to_string(opts.seed);
  v.spacing = kUnitSpacing;
  v.labels = Tensor<std::uint8_t>({e[0], e[1], e[2]});
  for (std::size_t i = 0; i < opts.n_clefts; ++i) {
    Sheet c = random_sheet(rng, e, opts.thickness, 5.0, 12.0, 3.0);
    rasterize(c, e, [&](std::size_t idx) { v.labels[idx] = 1; });
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (v.labels[i]) img[i] -= 0.3;
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  v.raw = Tensor<std::uint8_t>({e[0], e[1], e[2]});
  for (std::size_t i = 0; i < n; ++i) {
    const double x = std::clamp(img[i] + opts.noise * noise(rng), 0.0, 1.0);
    v.raw[i] = std::uint8_t(std::lround(255.0 * x));
  }
  return v;
}

template Tensor<float> rotate_in_plane(const Tensor<float>&, int);
template Tensor<double> rotate_in_plane(const Tensor<double>&, int);
template Tensor<std::uint8_t> rotate_in_plane(const Tensor<std::uint8_t>&, int);
template Tensor<float> flip_axis(const Tensor<float>&, int);
template Tensor<double> flip_axis(const Tensor<double>&, int);
template Tensor<std::uint8_t> flip_axis(const Tensor<std::uint8_t>&, int);

}  // namespace cleftnet
