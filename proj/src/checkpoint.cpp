#include "cleftnet/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace cleftnet {

namespace {

constexpr char kMagic[5] = {'C', 'K', 'P', 'T', '1'};
constexpr std::size_t kPrefix = 5 + 8;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(in[pos + i])) << (8 * i);
  return v;
}

}  // namespace

std::vector<CheckpointEntry> Checkpoint::manifest() const {
  std::vector<CheckpointEntry> out;
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    out.push_back({name, t.shape(), offset});
    offset += 4 * t.size();
  }
  return out;
}

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& c) {
  nlohmann::ordered_json header;
  header["config"] = nlohmann::ordered_json::parse(config_to_json(c.config));
  auto& man = header["manifest"] = nlohmann::ordered_json::array();
  for (const auto& e : c.manifest()) man.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}});
  if (!c.extra.empty()) header["extra"] = nlohmann::ordered_json::parse(c.extra);
  const std::string h = header.dump();

  std::string out(kMagic, 5);
  put_u64(out, h.size());
  out += h;
  std::size_t total = 0;
  for (const auto& [name, t] : c.tensors) total += t.size();
  out.reserve(out.size() + 4 * total);
  for (const auto& [name, t] : c.tensors) {
    for (float f : t.values()) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      for (int i = 0; i < 4; ++i) out.push_back(char((bits >> (8 * i)) & 0xff));
    }
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& in) {
  if (in.size() < kPrefix) throw FormatError("CKPT1: truncated file");
  if (in.compare(0, 5, kMagic, 5) != 0) throw FormatError("CKPT1: bad magic");
  const std::uint64_t hlen = get_u64(in, 5);
  if (hlen > in.size() - kPrefix) throw FormatError("CKPT1: header length exceeds file size");
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(in.substr(kPrefix, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("CKPT1: unreadable header: ") + e.what());
  }
  Checkpoint c;
  const std::size_t base = kPrefix + hlen;
  const std::size_t payload = in.size() - base;
  try {
    c.config = config_from_json(header.at("config").dump());
    if (header.contains("extra")) c.extra = header["extra"].dump();
    std::uint64_t expect = 0;
    for (const auto& e : header.at("manifest")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      if (offset != expect) throw FormatError("CKPT1: manifest offset of '" + name + "' is not contiguous");
      const std::size_t n = shape_size(shape);
      if (n == 0) throw FormatError("CKPT1: empty tensor '" + name + "'");
      if (offset + 4 * n > payload) throw FormatError("CKPT1: payload truncated at '" + name + "'");
      std::vector<float> vals(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = 0;
        const std::size_t p = base + offset + 4 * i;
        for (int b = 0; b < 4; ++b) bits |= std::uint32_t(std::uint8_t(in[p + b])) << (8 * b);
        vals[i] = std::bit_cast<float>(bits);
      }
      c.tensors.emplace_back(name, Tensor<float>(shape, std::move(vals)));
      expect = offset + 4 * n;
    }
    if (expect != payload) throw FormatError("CKPT1: payload has " + std::to_string(payload - expect) + " trailing bytes");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("CKPT1: malformed manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("CKPT1: bad config: ") + e.what());
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const std::string bytes = encode_checkpoint(c);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot write " + tmp);
    f.write(bytes.data(), std::streamsize(bytes.size()));
    if (!f) throw FormatError("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("cannot move " + tmp + " to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  return decode_checkpoint(std::string(std::istreambuf_iterator<char>(f), {}));
}

template <typename T>
Checkpoint snapshot(const Model<T>& m) {
  Checkpoint c;
  c.config = m.config();
  for (const auto& s : m.state()) c.tensors.emplace_back(s.name, s.tensor->template cast<float>());
  return c;
}

template <typename T>
void restore(Model<T>& m, const Checkpoint& c) {
  if (!(c.config == m.config())) throw FormatError("checkpoint manifest mismatch: model config differs");
  for (auto& s : m.state()) {
    const Tensor<float>* t = c.find(s.name);
    if (!t) throw FormatError("checkpoint manifest mismatch: missing '" + s.name + "'");
    if (t->shape() != s.tensor->shape()) {
      throw FormatError("checkpoint manifest mismatch: '" + s.name + "' has shape " + shape_str(t->shape()) +
                        ", model expects " + shape_str(s.tensor->shape()));
    }
  }
  for (auto& s : m.state()) *s.tensor = c.find(s.name)->template cast<T>();
}

void save_model(const Model<float>& m, const std::string& path) { save_checkpoint(path, snapshot(m)); }

Model<float> load_model(const std::string& path) {
  const Checkpoint c = load_checkpoint(path);
  Model<float> m(c.config);
  restore(m, c);
  return m;
}

template Checkpoint snapshot(const Model<float>&);
template Checkpoint snapshot(const Model<double>&);
template void restore(Model<float>&, const Checkpoint&);
template void restore(Model<double>&, const Checkpoint&);

}  // namespace cleftnet
