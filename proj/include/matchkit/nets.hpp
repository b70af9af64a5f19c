#pragma once

// Proxy matcher, pairwise encoder, and per-pixel transform networks.
//
// Proxy and encoder share one siamese layout: a branch applied to each image
// with the same parameter tensors, channel concatenation, a trunk, global
// average pooling, and a fully-connected head. Every non-residual block is a
// stride-2 3x3 convolution followed by batch normalization and PReLU.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "matchkit/ops.hpp"

namespace matchkit::nets {

using ad::NormMode;
using ad::Tensor;

struct SiameseConfig {
  std::size_t in_channels = 1;
  std::size_t outputs = 1;
  std::size_t branch_width1 = 16;
  std::size_t branch_width2 = 32;
  std::size_t trunk_width = 64;
  std::size_t residual_blocks = 1;  // per residual stage (one in branch, one in trunk)
  std::size_t kernel = 3;
  std::size_t padding = 1;
  std::size_t height = 192;  // nominal input extent used to validate the config
  std::size_t width = 256;
};

struct MlpConfig {
  std::size_t hidden_width = 16;
  std::size_t hidden_layers = 3;
  bool with_context = false;
  // RGB enters as log(rgb + eps); 0 feeds linear RGB. Log inputs let the
  // network express intensity-invariant (shift-only) responses directly.
  double log_eps = 1.0 / 255.0;
};

inline SiameseConfig default_proxy_config() { return {}; }

inline SiameseConfig default_encoder_config() {
  SiameseConfig c;
  c.in_channels = 3;
  c.outputs = 3;
  return c;
}

// Spatial extents after each of the four stride-2 stages.
inline std::vector<std::pair<std::size_t, std::size_t>> stage_extents(const SiameseConfig& c) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t h = c.height, w = c.width;
  for (int s = 0; s < 4; ++s) {
    h = ad::conv_output_extent(h, c.kernel, 2, c.padding);
    w = ad::conv_output_extent(w, c.kernel, 2, c.padding);
    out.emplace_back(h, w);
    if (h < 1 || w < 1) break;
  }
  return out;
}

inline void validate(const SiameseConfig& c) {
  if (c.in_channels == 0 || c.outputs == 0 || c.branch_width1 == 0 || c.branch_width2 == 0 || c.trunk_width == 0) {
    throw ConfigError("network config: channel widths must be positive");
  }
  if (c.kernel == 0 || c.kernel % 2 == 0) throw ConfigError("network config: kernel must be odd and positive");
  const auto ext = stage_extents(c);
  if (ext.size() < 4 || ext.back().first < 1 || ext.back().second < 1) {
    throw ConfigError("network config: spatial extent < 1 before the head for input " + std::to_string(c.height) +
                      "x" + std::to_string(c.width));
  }
}

using KeyValues = std::map<std::string, std::string>;

inline void write_config(KeyValues& kv, const std::string& prefix, const SiameseConfig& c) {
  kv[prefix + ".in_channels"] = std::to_string(c.in_channels);
  kv[prefix + ".outputs"] = std::to_string(c.outputs);
  kv[prefix + ".branch_width1"] = std::to_string(c.branch_width1);
  kv[prefix + ".branch_width2"] = std::to_string(c.branch_width2);
  kv[prefix + ".trunk_width"] = std::to_string(c.trunk_width);
  kv[prefix + ".residual_blocks"] = std::to_string(c.residual_blocks);
  kv[prefix + ".kernel"] = std::to_string(c.kernel);
  kv[prefix + ".padding"] = std::to_string(c.padding);
  kv[prefix + ".height"] = std::to_string(c.height);
  kv[prefix + ".width"] = std::to_string(c.width);
}

inline void write_config(KeyValues& kv, const std::string& prefix, const MlpConfig& c) {
  kv[prefix + ".hidden_width"] = std::to_string(c.hidden_width);
  kv[prefix + ".hidden_layers"] = std::to_string(c.hidden_layers);
  kv[prefix + ".with_context"] = c.with_context ? "1" : "0";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", c.log_eps);
  kv[prefix + ".log_eps"] = buf;
}

namespace detail {
inline std::size_t get_size(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ConfigError("model bundle: missing architecture key " + key);
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw ConfigError("model bundle: bad value for " + key);
  }
}
}  // namespace detail

inline SiameseConfig read_siamese_config(const KeyValues& kv, const std::string& p) {
  SiameseConfig c;
  c.in_channels = detail::get_size(kv, p + ".in_channels");
  c.outputs = detail::get_size(kv, p + ".outputs");
  c.branch_width1 = detail::get_size(kv, p + ".branch_width1");
  c.branch_width2 = detail::get_size(kv, p + ".branch_width2");
  c.trunk_width = detail::get_size(kv, p + ".trunk_width");
  c.residual_blocks = detail::get_size(kv, p + ".residual_blocks");
  c.kernel = detail::get_size(kv, p + ".kernel");
  c.padding = detail::get_size(kv, p + ".padding");
  c.height = detail::get_size(kv, p + ".height");
  c.width = detail::get_size(kv, p + ".width");
  return c;
}

inline MlpConfig read_mlp_config(const KeyValues& kv, const std::string& p) {
  MlpConfig c;
  c.hidden_width = detail::get_size(kv, p + ".hidden_width");
  c.hidden_layers = detail::get_size(kv, p + ".hidden_layers");
  c.with_context = detail::get_size(kv, p + ".with_context") != 0;
  auto it = kv.find(p + ".log_eps");
  if (it == kv.end()) throw ConfigError("model bundle: missing architecture key " + p + ".log_eps");
  try {
    c.log_eps = std::stod(it->second);
  } catch (const std::exception&) {
    throw ConfigError("model bundle: bad value for " + p + ".log_eps");
  }
  if (!(c.log_eps >= 0)) throw ConfigError("model bundle: bad value for " + p + ".log_eps");
  return c;
}

// Named parameter and buffer references, in a fixed order.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor;
  bool trainable;
};

// ---------------------------------------------------------------------------
// Layers

template <typename T>
struct Conv {
  Tensor<T> weight, bias;
  std::size_t stride = 1, padding = 0;

  static Conv create(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride, std::size_t padding,
                     Rng& rng) {
    // Fan-in scaled uniform, zero bias.
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
    std::vector<T> w(cout * cin * k * k);
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
    return {Tensor<T>::from_values({cout, cin, k, k}, std::move(w), true), Tensor<T>::zeros({cout}, true), stride,
            padding};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return ad::conv2d(x, weight, bias, stride, padding); }

  void collect(std::vector<ParamRef<T>>& out, const std::string& p) {
    out.push_back({p + ".weight", &weight, true});
    out.push_back({p + ".bias", &bias, true});
  }
};

template <typename T>
struct BatchNorm {
  Tensor<T> gain, shift;
  ad::RunningStats<T> stats;

  static BatchNorm create(std::size_t channels) {
    return {Tensor<T>::full({channels}, T(1), true), Tensor<T>::zeros({channels}, true),
            ad::RunningStats<T>::create(channels)};
  }

  Tensor<T> operator()(const Tensor<T>& x, NormMode mode) { return ad::batch_norm(x, gain, shift, stats, mode); }

  void collect(std::vector<ParamRef<T>>& out, const std::string& p) {
    out.push_back({p + ".gain", &gain, true});
    out.push_back({p + ".shift", &shift, true});
    out.push_back({p + ".running_mean", &stats.mean, false});
    out.push_back({p + ".running_var", &stats.var, false});
  }
};

template <typename T>
struct PRelu {
  Tensor<T> slope;

  static PRelu create(std::size_t channels) { return {Tensor<T>::full({channels}, T(0.25), true)}; }
  Tensor<T> operator()(const Tensor<T>& x) const { return ad::prelu(x, slope); }
  void collect(std::vector<ParamRef<T>>& out, const std::string& p) { out.push_back({p + ".slope", &slope, true}); }
};

// Stride-2 convolution, batch norm, PReLU.
template <typename T>
struct DownBlock {
  Conv<T> conv;
  BatchNorm<T> norm;
  PRelu<T> act;

  static DownBlock create(std::size_t cin, std::size_t cout, const SiameseConfig& c, Rng& rng) {
    return {Conv<T>::create(cin, cout, c.kernel, 2, c.padding, rng), BatchNorm<T>::create(cout),
            PRelu<T>::create(cout)};
  }

  Tensor<T> operator()(const Tensor<T>& x, NormMode mode) { return act(norm(conv(x), mode)); }

  void collect(std::vector<ParamRef<T>>& out, const std::string& p) {
    conv.collect(out, p + ".conv");
    norm.collect(out, p + ".bn");
    act.collect(out, p + ".act");
  }
};

// x + BN(conv(PReLU(BN(conv(x))))) followed by PReLU; extent preserved.
template <typename T>
struct ResidualBlock {
  Conv<T> conv1, conv2;
  BatchNorm<T> norm1, norm2;
  PRelu<T> act1, act2;

  static ResidualBlock create(std::size_t width, const SiameseConfig& c, Rng& rng) {
    const std::size_t pad = c.kernel / 2;
    ResidualBlock r;
    r.conv1 = Conv<T>::create(width, width, c.kernel, 1, pad, rng);
    r.norm1 = BatchNorm<T>::create(width);
    r.act1 = PRelu<T>::create(width);
    r.conv2 = Conv<T>::create(width, width, c.kernel, 1, pad, rng);
    r.norm2 = BatchNorm<T>::create(width);
    r.act2 = PRelu<T>::create(width);
    return r;
  }

  Tensor<T> operator()(const Tensor<T>& x, NormMode mode) {
    auto y = act1(norm1(conv1(x), mode));
    y = norm2(conv2(y), mode);
    return act2(ad::add(x, y));
  }

  void collect(std::vector<ParamRef<T>>& out, const std::string& p) {
    conv1.collect(out, p + ".conv1");
    norm1.collect(out, p + ".bn1");
    act1.collect(out, p + ".act1");
    conv2.collect(out, p + ".conv2");
    norm2.collect(out, p + ".bn2");
    act2.collect(out, p + ".act2");
  }
};

// ---------------------------------------------------------------------------
// Siamese network (proxy and encoder)

template <typename T>
class SiameseNet {
 public:
  SiameseNet() = default;

  SiameseNet(const SiameseConfig& config, std::uint64_t seed) : config_(config) {
    validate(config);
    Rng rng(seed);
    stem_ = DownBlock<T>::create(config.in_channels, config.branch_width1, config, rng);
    for (std::size_t i = 0; i < config.residual_blocks; ++i) {
      branch_res_.push_back(ResidualBlock<T>::create(config.branch_width1, config, rng));
    }
    branch_down_ = DownBlock<T>::create(config.branch_width1, config.branch_width2, config, rng);
    trunk_down1_ = DownBlock<T>::create(2 * config.branch_width2, config.trunk_width, config, rng);
    for (std::size_t i = 0; i < config.residual_blocks; ++i) {
      trunk_res_.push_back(ResidualBlock<T>::create(config.trunk_width, config, rng));
    }
    trunk_down2_ = DownBlock<T>::create(config.trunk_width, config.trunk_width, config, rng);
    head_ = Conv<T>::create(config.trunk_width, config.outputs, 1, 1, 0, rng);
  }

  const SiameseConfig& config() const { return config_; }

  // Shared branch applied to one batch of images.
  Tensor<T> branch(const Tensor<T>& x, NormMode mode) {
    auto y = stem_(x, mode);
    for (auto& r : branch_res_) y = r(y, mode);
    return branch_down_(y, mode);
  }

  // Returns [N, outputs]. Both images go through the branch as one stacked
  // batch, so they see identical parameters and normalization statistics.
  Tensor<T> forward(const Tensor<T>& a, const Tensor<T>& b, NormMode mode) {
    check_input(a);
    check_input(b);
    if (a.dim(0) != b.dim(0)) {
      throw ShapeError("siamese forward: batch sizes differ (" + std::to_string(a.dim(0)) + " vs " +
                       std::to_string(b.dim(0)) + ")");
    }
    if (a.shape() != b.shape()) throw ShapeError("siamese forward: image pair shapes differ");
    const std::size_t n = a.dim(0);
    auto features = branch(ad::concat_batch(a, b), mode);
    auto joined = ad::concat_channels(ad::slice_batch(features, 0, n), ad::slice_batch(features, n, n));
    auto y = trunk_down1_(joined, mode);
    for (auto& r : trunk_res_) y = r(y, mode);
    y = trunk_down2_(y, mode);
    y = ad::fully_connected(ad::global_avg_pool(y), head_.weight, head_.bias);
    return ad::reshape(y, {n, config_.outputs});
  }

  std::vector<ParamRef<T>> refs() {
    std::vector<ParamRef<T>> out;
    stem_.collect(out, "branch.stem");
    for (std::size_t i = 0; i < branch_res_.size(); ++i) branch_res_[i].collect(out, "branch.res" + std::to_string(i));
    branch_down_.collect(out, "branch.down");
    trunk_down1_.collect(out, "trunk.down1");
    for (std::size_t i = 0; i < trunk_res_.size(); ++i) trunk_res_[i].collect(out, "trunk.res" + std::to_string(i));
    trunk_down2_.collect(out, "trunk.down2");
    out.push_back({"head.weight", &head_.weight, true});
    out.push_back({"head.bias", &head_.bias, true});
    return out;
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for (auto& r : refs()) {
      if (r.trainable) out.push_back(*r.tensor);
    }
    return out;
  }

  void set_trainable(bool on) {
    for (auto& r : refs()) {
      if (r.trainable) r.tensor->set_requires_grad(on);
    }
  }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != config_.in_channels) {
      throw ShapeError("siamese forward: expected [N," + std::to_string(config_.in_channels) + ",H,W], got " +
                       ad::to_string(x.shape()));
    }
  }

  SiameseConfig config_;
  DownBlock<T> stem_;
  std::vector<ResidualBlock<T>> branch_res_;
  DownBlock<T> branch_down_;
  DownBlock<T> trunk_down1_;
  std::vector<ResidualBlock<T>> trunk_res_;
  DownBlock<T> trunk_down2_;
  Conv<T> head_;
};

// Predicts the (scaled) inlier count of a grayscale pair.
template <typename T>
class ProxyModel {
 public:
  ProxyModel() = default;
  ProxyModel(const SiameseConfig& config, std::uint64_t seed) : net_(config, seed) {
    if (config.outputs != 1) throw ConfigError("proxy: head must have a single output");
  }

  // [N,1,H,W] x 2 -> [N]
  Tensor<T> forward(const Tensor<T>& g1, const Tensor<T>& g2, NormMode mode) {
    auto y = net_.forward(g1, g2, mode);
    return ad::reshape(y, {y.dim(0)});
  }

  SiameseNet<T>& net() { return net_; }
  const SiameseConfig& config() const { return net_.config(); }
  std::vector<Tensor<T>> parameters() { return net_.parameters(); }
  std::vector<ParamRef<T>> refs() { return net_.refs(); }
  void set_trainable(bool on) { net_.set_trainable(on); }

 private:
  SiameseNet<T> net_;
};

// Maps an RGB pair to L1-normalized log-channel mixing weights [N, 3].
template <typename T>
class EncoderModel {
 public:
  EncoderModel() = default;
  EncoderModel(const SiameseConfig& config, std::uint64_t seed) : net_(config, seed) {
    if (config.in_channels != 3 || config.outputs != 3) throw ConfigError("encoder: expects 3 input and 3 output channels");
  }

  Tensor<T> forward(const Tensor<T>& rgb1, const Tensor<T>& rgb2, NormMode mode, T eps_norm = T(1e-8)) {
    return ad::l1_normalize(net_.forward(rgb1, rgb2, mode), eps_norm);
  }

  SiameseNet<T>& net() { return net_; }
  const SiameseConfig& config() const { return net_.config(); }
  std::vector<Tensor<T>> parameters() { return net_.parameters(); }
  std::vector<ParamRef<T>> refs() { return net_.refs(); }
  void set_trainable(bool on) { net_.set_trainable(on); }

 private:
  SiameseNet<T> net_;
};

// Per-pixel MLP: 1x1 convolutions with PReLU between them, one output channel.
template <typename T>
class MlpTransform {
 public:
  MlpTransform() = default;
  MlpTransform(const MlpConfig& config, std::uint64_t seed) : config_(config) {
    if (config.hidden_width == 0 || config.hidden_layers == 0) throw ConfigError("mlp: empty hidden layers");
    if (!(config.log_eps >= 0)) throw ConfigError("mlp: log_eps must be non-negative");
    Rng rng(seed);
    std::size_t cin = input_channels();
    for (std::size_t i = 0; i < config.hidden_layers; ++i) {
      layers_.push_back(Conv<T>::create(cin, config.hidden_width, 1, 1, 0, rng));
      acts_.push_back(PRelu<T>::create(config.hidden_width));
      cin = config.hidden_width;
    }
    layers_.push_back(Conv<T>::create(cin, 1, 1, 1, 0, rng));
  }

  const MlpConfig& config() const { return config_; }
  std::size_t input_channels() const { return config_.with_context ? 6 : 3; }

  // rgb [N,3,H,W], context [N,3] iff built with context -> [N,1,H,W] raw.
  Tensor<T> forward(const Tensor<T>& rgb, const std::optional<Tensor<T>>& context) const {
    if (context.has_value() != config_.with_context) {
      throw ShapeError(config_.with_context ? "mlp: context vector required" : "mlp: model takes no context vector");
    }
    if (rgb.rank() != 4 || rgb.dim(1) != 3) throw ShapeError("mlp: expected [N,3,H,W] input");
    Tensor<T> x = config_.log_eps > 0 ? ad::log_offset(rgb, static_cast<T>(config_.log_eps)) : rgb;
    if (context) {
      if (context->rank() != 2 || context->dim(0) != rgb.dim(0) || context->dim(1) != 3) {
        throw ShapeError("mlp: context must be [N,3]");
      }
      x = ad::concat_channels(x, ad::broadcast_spatial(*context, rgb.dim(2), rgb.dim(3)));
    }
    for (std::size_t i = 0; i < acts_.size(); ++i) x = acts_[i](layers_[i](x));
    return layers_.back()(x);
  }

  std::vector<ParamRef<T>> refs() {
    std::vector<ParamRef<T>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      layers_[i].collect(out, "layer" + std::to_string(i));
      if (i < acts_.size()) acts_[i].collect(out, "act" + std::to_string(i));
    }
    return out;
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for (auto& r : refs()) out.push_back(*r.tensor);
    return out;
  }

 private:
  MlpConfig config_;
  std::vector<Conv<T>> layers_;
  std::vector<PRelu<T>> acts_;
};

template <typename T>
std::size_t parameter_count(const std::vector<ParamRef<T>>& refs) {
  std::size_t n = 0;
  for (const auto& r : refs) {
    if (r.trainable) n += r.tensor->numel();
  }
  return n;
}

// Copies values (parameters and buffers) between architecturally identical
// models. Model objects share tensor handles on copy, so this is the way to
// take an independent snapshot.
template <typename T>
void copy_state(const std::vector<ParamRef<T>>& dst, const std::vector<ParamRef<T>>& src) {
  if (dst.size() != src.size()) throw ShapeError("copy_state: models differ in parameter count");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].name != src[i].name || dst[i].tensor->shape() != src[i].tensor->shape()) {
      throw ShapeError("copy_state: parameter mismatch at " + src[i].name);
    }
    auto d = dst[i].tensor->values();
    auto s = src[i].tensor->values();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

// Hash of all parameter and buffer values. With `quantum` > 0 values are
// first rounded to that step, so nearly stationary models hash equal.
template <typename T>
std::uint64_t state_hash(const std::vector<ParamRef<T>>& refs, double quantum = 0.0) {
  std::uint64_t h = fnv1a("state");
  for (const auto& r : refs) {
    h = fnv1a(r.name, h);
    for (T v : r.tensor->values()) {
      if (quantum > 0) {
        const auto q = static_cast<std::int64_t>(std::llround(static_cast<double>(v) / quantum));
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(&q), sizeof q), h);
      } else {
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(&v), sizeof v), h);
      }
    }
  }
  return h;
}

}  // namespace matchkit::nets
