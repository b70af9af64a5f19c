#pragma once

// Model bundles: a small self-describing binary container.
//
//   "MKT1"  u32 version
//   u32 text length, UTF-8 "key=value\n" lines (sorted by key): architecture and metadata
//   u32 tensor count, then per tensor:
//     u16 name length, name, u8 rank, u32 dims[rank], f32 values (row-major)
//
// All integers and floats are little-endian.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "matchkit/train.hpp"

namespace matchkit::bundle {

using colorspace::TransformKind;

constexpr std::string_view kMagic = "MKT1";
constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
  std::string name;
  ad::Shape shape;
  std::vector<float> values;
  bool operator==(const NamedTensor&) const = default;
};

struct Bundle {
  nets::KeyValues kv;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
  std::string get(const std::string& key, const std::string& fallback = "") const {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
  }
  bool operator==(const Bundle&) const = default;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "bundle I/O assumes a little-endian host");

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, data_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) throw IoError(std::string("model bundle truncated while reading ") + what);
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode(const Bundle& b) {
  std::string out(kMagic);
  detail::put<std::uint32_t>(out, kVersion);
  std::string text;
  for (const auto& [k, v] : b.kv) {
    if (k.empty() || k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ConfigError("model bundle: key/value not representable: " + k);
    }
    text += k + "=" + v + "\n";
  }
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(b.tensors.size()));
  for (const auto& t : b.tensors) {
    if (t.name.size() > 0xffff) throw ConfigError("model bundle: tensor name too long");
    if (t.shape.size() > 0xff) throw ConfigError("model bundle: tensor rank too large");
    if (ad::element_count(t.shape) != t.values.size()) throw ShapeError("model bundle: tensor " + t.name + " size mismatch");
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(float));
  }
  return out;
}

inline Bundle decode(std::string_view data) {
  detail::Reader r(data);
  if (r.bytes(4, "magic") != kMagic) throw IoError("not a model bundle (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw IoError("unsupported model bundle version " + std::to_string(version) + " (expected " +
                  std::to_string(kVersion) + ")");
  }
  Bundle b;
  const auto text_len = r.get<std::uint32_t>("metadata length");
  std::string_view text = r.bytes(text_len, "metadata");
  while (!text.empty()) {
    const auto nl = text.find('\n');
    if (nl == std::string_view::npos) throw IoError("model bundle: unterminated metadata line");
    const auto line = text.substr(0, nl);
    const auto eq = line.find('=');
    if (eq == std::string_view::npos || eq == 0) throw IoError("model bundle: malformed metadata line");
    b.kv[std::string(line.substr(0, eq))] = std::string(line.substr(eq + 1));
    text.remove_prefix(nl + 1);
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto name_len = r.get<std::uint16_t>("tensor name length");
    t.name = std::string(r.bytes(name_len, "tensor name"));
    const auto rank = r.get<std::uint8_t>("tensor rank");
    for (std::uint8_t d = 0; d < rank; ++d) t.shape.push_back(r.get<std::uint32_t>("tensor dims"));
    t.values.resize(ad::element_count(t.shape));
    auto payload = r.bytes(t.values.size() * sizeof(float), "tensor values");
    std::memcpy(t.values.data(), payload.data(), payload.size());
    b.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw IoError("model bundle: trailing bytes");
  return b;
}

inline void save(const std::filesystem::path& path, const Bundle& b) {
  const auto bytes = encode(b);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write model bundle " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing model bundle " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Bundle load(const std::filesystem::path& path) {
  try {
    return decode(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Models <-> bundles

namespace detail {

inline void add_tensors(Bundle& b, const std::vector<nets::ParamRef<float>>& refs) {
  for (const auto& r : refs) b.tensors.push_back({r.name, r.tensor->shape(), r.tensor->vector()});
}

inline void fill(const Bundle& b, const std::vector<nets::ParamRef<float>>& refs) {
  for (const auto& r : refs) {
    const auto* t = b.find(r.name);
    if (!t) throw IoError("model bundle: missing tensor " + r.name);
    if (t->shape != r.tensor->shape()) {
      throw IoError("model bundle: tensor " + r.name + " has shape " + ad::to_string(t->shape) + ", expected " +
                    ad::to_string(r.tensor->shape()));
    }
    std::copy(t->values.begin(), t->values.end(), r.tensor->values().begin());
  }
}

}  // namespace detail

// Proxy-only bundle from the pre-training stage.
inline Bundle from_proxy(nets::ProxyModel<float>& proxy, const nets::KeyValues& meta = {}) {
  train::TrainedModels m;
  m.proxy = proxy;
  Bundle b;
  b.kv = meta;
  b.kv["bundle.stage"] = "proxy";
  b.kv["bundle.kind"] = "gray";
  nets::write_config(b.kv, "proxy", proxy.config());
  detail::add_tensors(b, m.all_refs());
  return b;
}

inline Bundle from_models(train::TrainedModels& m, const nets::KeyValues& meta = {}) {
  Bundle b;
  b.kv = meta;
  b.kv["bundle.stage"] = "transform";
  b.kv["bundle.kind"] = colorspace::to_string(m.kind);
  nets::write_config(b.kv, "proxy", m.proxy.config());
  if (m.encoder) nets::write_config(b.kv, "encoder", m.encoder->config());
  if (m.mlp) nets::write_config(b.kv, "mlp", m.mlp->config());
  detail::add_tensors(b, m.all_refs());
  return b;
}

struct Loaded {
  std::string stage;  // proxy | transform
  train::TrainedModels models;
};

inline Loaded to_models(const Bundle& b) {
  Loaded out;
  out.stage = b.get("bundle.stage");
  if (out.stage != "proxy" && out.stage != "transform") throw IoError("model bundle: unknown stage '" + out.stage + "'");
  try {
    out.models.kind = colorspace::parse_kind(b.get("bundle.kind"));
  } catch (const ConfigError& e) {
    throw IoError(std::string("model bundle: ") + e.what());
  }
  auto& m = out.models;
  m.proxy = nets::ProxyModel<float>(nets::read_siamese_config(b.kv, "proxy"), 0);
  if (b.kv.count("encoder.in_channels")) m.encoder.emplace(nets::read_siamese_config(b.kv, "encoder"), 0);
  if (b.kv.count("mlp.hidden_width")) m.mlp.emplace(nets::read_mlp_config(b.kv, "mlp"), 0);
  if (b.find("theta")) m.theta = ad::Tensor<float>::zeros({1, 3}, true);
  const auto refs = m.all_refs();
  if (refs.size() != b.tensors.size()) {
    throw IoError("model bundle: holds " + std::to_string(b.tensors.size()) + " tensors, architecture needs " +
                  std::to_string(refs.size()));
  }
  detail::fill(b, refs);
  if (out.stage == "transform") {
    const bool ok = (m.kind == TransformKind::sumlog && m.theta.defined()) ||
                    (m.kind == TransformKind::sumlog_e && m.encoder && !m.mlp) ||
                    (m.kind == TransformKind::mlp && m.mlp && !m.encoder) ||
                    (m.kind == TransformKind::mlp_e && m.mlp && m.encoder);
    if (!ok) throw IoError("model bundle: contents do not match kind " + colorspace::to_string(m.kind));
  }
  return out;
}

}  // namespace matchkit::bundle
