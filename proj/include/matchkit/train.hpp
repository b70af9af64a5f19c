#pragma once

// Two-stage training: the proxy first learns to predict inlier counts of Gray
// pairs; then the transform is trained to maximize the proxy's prediction
// while the proxy is refreshed on the transform's own outputs.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <ostream>

#include "matchkit/adam.hpp"
#include "matchkit/colorspace.hpp"
#include "matchkit/matcher.hpp"
#include "matchkit/synth.hpp"

namespace matchkit::train {

using ad::NormMode;
using ad::Tensor;
using colorspace::TransformKind;

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double learning_rate = 1e-4;            // proxy
  double transform_learning_rate = 1e-4;  // encoder and MLP
  double theta_learning_rate = 1e-2;      // SumLog-fit's three global weights
  std::size_t height = 192;
  std::size_t proxy_steps = 1;  // proxy refresh steps per transform step
  double target_scale = 0.01;
  std::size_t validation_pairs = 64;
  double label_quantum = 1e-4;  // transform-parameter rounding for the label cache
  std::uint64_t seed = 0;
  TransformKind kind = TransformKind::sumlog_e;
  nets::SiameseConfig proxy = nets::default_proxy_config();
  nets::SiameseConfig encoder = nets::default_encoder_config();
  nets::MlpConfig mlp;
  matcher::MatcherConfig matcher;
  colorspace::ColorspaceConfig color;
};

inline void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw ConfigError("train.epochs must be at least 1");
  if (c.batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (c.height < matcher::min_image_extent()) {
    throw ConfigError("train.height must be at least " + std::to_string(matcher::min_image_extent()) + " px");
  }
  if (!(c.learning_rate > 0) || !(c.transform_learning_rate > 0) || !(c.theta_learning_rate > 0)) throw ConfigError("train: learning rates must be positive");
  if (!(c.target_scale > 0)) throw ConfigError("train.target_scale must be positive");
}

// ---------------------------------------------------------------------------
// Data

// Deterministic shuffle of [0, count) for (seed, epoch), cut into batches; the
// last batch may be short.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t count, std::size_t batch_size, std::uint64_t seed,
                                                           std::size_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(mix_seed(mix_seed(seed, 0xba7c), epoch));
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < count; i += batch_size) {
    out.emplace_back(order.begin() + i, order.begin() + std::min(count, i + batch_size));
  }
  return out;
}

inline std::vector<std::vector<synth::PairEntry>> make_batches(const synth::DatasetManifest& m, std::size_t batch_size,
                                                               std::uint64_t seed, std::size_t epoch) {
  std::vector<std::vector<synth::PairEntry>> out;
  for (const auto& b : batch_indices(m.pairs.size(), batch_size, seed, epoch)) {
    auto& dst = out.emplace_back();
    for (std::size_t i : b) dst.push_back(m.pairs[i]);
  }
  return out;
}

// Stable identity of a pair, independent of manifest order.
inline std::uint64_t pair_key(const synth::PairEntry& p) { return fnv1a(p.image1 + "\n" + p.image2); }

struct PairImages {
  std::shared_ptr<const RgbImage> rgb1, rgb2;
  std::shared_ptr<const GrayImage> gray1, gray2;
  std::uint64_t key = 0;
};

// Loads every image referenced by a manifest once, resized to `height`.
class PairStore {
 public:
  PairStore(const synth::DatasetManifest& m, std::size_t height) {
    for (const auto& p : m.pairs) {
      PairImages pi;
      std::tie(pi.rgb1, pi.gray1) = load(m.path1(p), height);
      std::tie(pi.rgb2, pi.gray2) = load(m.path2(p), height);
      if (pi.rgb1->width != pi.rgb2->width) throw ShapeError("pair " + p.image1 + " / " + p.image2 + ": sizes differ");
      pi.key = pair_key(p);
      pairs_.push_back(std::move(pi));
    }
  }

  std::size_t size() const { return pairs_.size(); }
  const PairImages& operator[](std::size_t i) const { return pairs_[i]; }
  bool empty() const { return pairs_.empty(); }
  std::size_t width() const { return pairs_.empty() ? 0 : pairs_[0].rgb1->width; }
  std::size_t height() const { return pairs_.empty() ? 0 : pairs_[0].rgb1->height; }

 private:
  std::pair<std::shared_ptr<const RgbImage>, std::shared_ptr<const GrayImage>> load(const std::filesystem::path& path,
                                                                                     std::size_t height) {
    auto it = cache_.find(path.string());
    if (it != cache_.end()) return it->second;
    auto rgb = std::make_shared<const RgbImage>(resize_to_height(io::read_png_rgb(path), height));
    auto g = std::make_shared<const GrayImage>(colorspace::gray(*rgb));
    return cache_[path.string()] = {rgb, g};
  }

  std::vector<PairImages> pairs_;
  std::map<std::string, std::pair<std::shared_ptr<const RgbImage>, std::shared_ptr<const GrayImage>>> cache_;
};

template <std::size_t C>
Tensor<float> stack(const std::vector<const PlanarImage<C>*>& images) {
  return stack_images<float, C>(images);
}

// ---------------------------------------------------------------------------
// Labels

// Inlier counts keyed by (pair, transform hash).
class LabelCache {
 public:
  std::optional<std::size_t> find(std::uint64_t pair, std::uint64_t transform) const {
    auto it = map_.find({pair, transform});
    if (it == map_.end()) return std::nullopt;
    ++hits_;
    return it->second;
  }
  void insert(std::uint64_t pair, std::uint64_t transform, std::size_t count) {
    ++misses_;
    map_[{pair, transform}] = count;
  }
  std::size_t size() const { return map_.size(); }
  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }

 private:
  std::map<std::pair<std::uint64_t, std::uint64_t>, std::size_t> map_;
  mutable std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

constexpr std::uint64_t kGrayTransformHash = 0x67726179ull;  // "gray"

inline std::uint64_t matcher_seed(std::uint64_t seed, std::uint64_t pair) { return mix_seed(mix_seed(seed, 0x1abe1), pair); }

// Actual inlier counts for a list of gray pairs; misses are computed in parallel.
inline std::vector<std::size_t> inlier_labels(const std::vector<const GrayImage*>& g1,
                                              const std::vector<const GrayImage*>& g2,
                                              const std::vector<std::uint64_t>& keys, std::uint64_t transform_hash,
                                              LabelCache& cache, const TrainConfig& cfg) {
  std::vector<std::size_t> out(keys.size(), 0);
  std::vector<std::size_t> missing;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (auto c = cache.find(keys[i], transform_hash)) {
      out[i] = *c;
    } else {
      missing.push_back(i);
    }
  }
  parallel_for(missing.size(), [&](std::size_t j) {
    const std::size_t i = missing[j];
    out[i] = matcher::count_inliers(*g1[i], *g2[i], cfg.matcher, matcher_seed(cfg.seed, keys[i])).inlier_count;
  });
  for (std::size_t i : missing) cache.insert(keys[i], transform_hash, out[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Logs

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double proxy_loss = 0;  // mean squared error of scaled counts
  double transform_loss = std::numeric_limits<double>::quiet_NaN();  // mean negated prediction
  double val_actual = std::numeric_limits<double>::quiet_NaN();
  double val_predicted = std::numeric_limits<double>::quiet_NaN();  // unscaled
  double seconds = 0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;

  // Wall-clock time is left out so the file is reproducible.
  void write_csv(std::ostream& out) const {
    out << "epoch,steps,proxy_loss,transform_loss,val_inliers_actual,val_inliers_predicted\n";
    char buf[256];
    for (const auto& e : epochs) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.steps, e.proxy_loss, e.transform_loss,
                    e.val_actual, e.val_predicted);
      out << buf;
    }
  }
};

using ProgressFn = std::function<void(const EpochLog&)>;

// ---------------------------------------------------------------------------
// Models

struct TrainedModels {
  TransformKind kind = TransformKind::gray;
  nets::ProxyModel<float> proxy;
  std::optional<nets::EncoderModel<float>> encoder;
  std::optional<nets::MlpTransform<float>> mlp;
  Tensor<float> theta;  // SumLog-fit weights [1,3]
  std::optional<colorspace::TransformParams> fixed_params;

  colorspace::TransformModels<float> view() {
    colorspace::TransformModels<float> v;
    v.fixed_params = fixed_params;
    v.theta = theta;
    v.encoder = encoder ? &*encoder : nullptr;
    v.mlp = mlp ? &*mlp : nullptr;
    return v;
  }

  // Transform-side parameters and buffers (everything except the proxy).
  std::vector<nets::ParamRef<float>> transform_refs() {
    std::vector<nets::ParamRef<float>> out;
    if (theta.defined()) out.push_back({"theta", &theta, true});
    if (encoder) {
      for (auto r : encoder->refs()) out.push_back({"encoder." + r.name, r.tensor, r.trainable});
    }
    if (mlp) {
      for (auto r : mlp->refs()) out.push_back({"mlp." + r.name, r.tensor, r.trainable});
    }
    return out;
  }

  std::vector<nets::ParamRef<float>> all_refs() {
    std::vector<nets::ParamRef<float>> out;
    for (auto r : proxy.refs()) out.push_back({"proxy." + r.name, r.tensor, r.trainable});
    for (auto& r : transform_refs()) out.push_back(r);
    return out;
  }
};

inline nets::SiameseConfig sized(nets::SiameseConfig c, std::size_t width, std::size_t height) {
  c.width = width;
  c.height = height;
  nets::validate(c);
  return c;
}

inline nets::ProxyModel<float> clone(nets::ProxyModel<float>& m) {
  nets::ProxyModel<float> out(m.config(), 0);
  nets::copy_state(out.refs(), m.refs());
  return out;
}

// Fresh transform-side models for `kind`; the proxy slot is left default.
inline TrainedModels init_transform(TransformKind kind, const TrainConfig& cfg, std::size_t width, std::size_t height) {
  TrainedModels m;
  m.kind = kind;
  switch (kind) {
    case TransformKind::gray:
      throw ConfigError("train_transform: gray has no trainable transform");
    case TransformKind::sumlog:
      m.theta = Tensor<float>::from_values({1, 3}, {1.0f / 3, 1.0f / 3, 1.0f / 3}, true);
      break;
    case TransformKind::sumlog_e:
      m.encoder.emplace(sized(cfg.encoder, width, height), mix_seed(cfg.seed, 2));
      break;
    case TransformKind::mlp: {
      auto mc = cfg.mlp;
      mc.with_context = false;
      m.mlp.emplace(mc, mix_seed(cfg.seed, 3));
      break;
    }
    case TransformKind::mlp_e: {
      m.encoder.emplace(sized(cfg.encoder, width, height), mix_seed(cfg.seed, 2));
      auto mc = cfg.mlp;
      mc.with_context = true;
      m.mlp.emplace(mc, mix_seed(cfg.seed, 3));
      break;
    }
  }
  return m;
}

namespace detail {

inline std::vector<std::size_t> evenly_spaced(std::size_t n, std::size_t k) {
  std::vector<std::size_t> out;
  k = std::min(n, k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(i * n / k);
  return out;
}

template <typename F>
double timed(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::vector<float> scaled(const std::vector<std::size_t>& counts, double scale) {
  std::vector<float> out;
  for (auto c : counts) out.push_back(static_cast<float>(c * scale));
  return out;
}

struct BatchTensors {
  Tensor<float> a, b;
  std::vector<const GrayImage*> g1, g2;
  std::vector<std::uint64_t> keys;
};

inline BatchTensors gray_batch(const PairStore& store, const std::vector<std::size_t>& idx) {
  BatchTensors bt;
  for (std::size_t i : idx) {
    bt.g1.push_back(store[i].gray1.get());
    bt.g2.push_back(store[i].gray2.get());
    bt.keys.push_back(store[i].key);
  }
  bt.a = stack<1>(bt.g1);
  bt.b = stack<1>(bt.g2);
  return bt;
}

inline std::pair<Tensor<float>, Tensor<float>> rgb_batch(const PairStore& store, const std::vector<std::size_t>& idx) {
  std::vector<const RgbImage*> a, b;
  for (std::size_t i : idx) {
    a.push_back(store[i].rgb1.get());
    b.push_back(store[i].rgb2.get());
  }
  return {stack<3>(a), stack<3>(b)};
}

inline double proxy_step(nets::ProxyModel<float>& proxy, ad::Adam<float>& opt, const Tensor<float>& a,
                         const Tensor<float>& b, const std::vector<float>& targets) {
  auto params = proxy.parameters();
  auto pred = proxy.forward(a, b, NormMode::train);
  auto loss = ad::mse_loss(pred, Tensor<float>::from_values({targets.size()}, targets));
  ad::zero_grads(params);
  loss.backward();
  opt.step(params);
  return loss.item();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1: proxy pre-training on Gray pairs

struct PretrainResult {
  nets::ProxyModel<float> proxy;
  TrainLog log;
};

inline PretrainResult pretrain_proxy(const synth::DatasetManifest& manifest, const TrainConfig& cfg,
                                     const synth::DatasetManifest* validation = nullptr, LabelCache* cache = nullptr,
                                     const ProgressFn& progress = {}) {
  validate(cfg);
  if (manifest.pairs.empty()) throw ConfigError("pretrain_proxy: empty manifest");
  LabelCache local_cache;
  LabelCache& labels = cache ? *cache : local_cache;
  const PairStore store(manifest, cfg.height);
  std::optional<PairStore> val_store;
  if (validation && !validation->pairs.empty()) val_store.emplace(*validation, cfg.height);

  PretrainResult r{nets::ProxyModel<float>(sized(cfg.proxy, store.width(), store.height()), mix_seed(cfg.seed, 1)), {}};
  ad::Adam<float> opt({cfg.learning_rate});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    log.seconds = detail::timed([&] {
      double loss_sum = 0;
      for (const auto& idx : batch_indices(store.size(), cfg.batch_size, cfg.seed, epoch)) {
        auto bt = detail::gray_batch(store, idx);
        const auto counts = inlier_labels(bt.g1, bt.g2, bt.keys, kGrayTransformHash, labels, cfg);
        loss_sum += detail::proxy_step(r.proxy, opt, bt.a, bt.b, detail::scaled(counts, cfg.target_scale));
        ++log.steps;
      }
      log.proxy_loss = loss_sum / log.steps;
      if (val_store) {
        double actual = 0, predicted = 0;
        const auto sel = detail::evenly_spaced(val_store->size(), cfg.validation_pairs);
        for (std::size_t i = 0; i < sel.size(); i += cfg.batch_size) {
          std::vector<std::size_t> idx(sel.begin() + i, sel.begin() + std::min(sel.size(), i + cfg.batch_size));
          auto bt = detail::gray_batch(*val_store, idx);
          for (auto c : inlier_labels(bt.g1, bt.g2, bt.keys, kGrayTransformHash, labels, cfg)) actual += c;
          auto pred = r.proxy.forward(bt.a, bt.b, NormMode::eval);
          for (float p : pred.values()) predicted += p / cfg.target_scale;
        }
        log.val_actual = actual / sel.size();
        log.val_predicted = predicted / sel.size();
      }
    });
    r.log.epochs.push_back(log);
    if (progress) progress(log);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Stage 2: transform training with proxy refresh

struct TransformResult {
  TrainedModels models;
  TrainLog log;
};

// Gray images of each sample in a transformed [N,1,H,W] batch.
inline std::vector<GrayImage> unstack(const Tensor<float>& t) {
  std::vector<GrayImage> out;
  for (std::size_t n = 0; n < t.dim(0); ++n) out.push_back(plane_from_tensor(t, n));
  return out;
}

inline TransformResult train_transform(const synth::DatasetManifest& manifest, nets::ProxyModel<float>& pretrained,
                                       const TrainConfig& cfg, const synth::DatasetManifest* validation = nullptr,
                                       LabelCache* cache = nullptr, const ProgressFn& progress = {}) {
  validate(cfg);
  if (manifest.pairs.empty()) throw ConfigError("train_transform: empty manifest");
  LabelCache local_cache;
  LabelCache& labels = cache ? *cache : local_cache;
  const PairStore store(manifest, cfg.height);
  if (pretrained.config().height != store.height() || pretrained.config().width != store.width()) {
    throw ShapeError("train_transform: proxy was trained on " + std::to_string(pretrained.config().width) + "x" +
                     std::to_string(pretrained.config().height) + " images, data is " + std::to_string(store.width()) +
                     "x" + std::to_string(store.height()));
  }
  std::optional<PairStore> val_store;
  if (validation && !validation->pairs.empty()) val_store.emplace(*validation, cfg.height);

  TransformResult r{init_transform(cfg.kind, cfg, store.width(), store.height()), {}};
  auto& m = r.models;
  m.proxy = clone(pretrained);
  auto models = m.view();

  std::vector<Tensor<float>> net_params, theta_params;
  for (auto& ref : m.transform_refs()) {
    if (!ref.trainable) continue;
    (ref.name == "theta" ? theta_params : net_params).push_back(*ref.tensor);
  }
  ad::Adam<float> net_opt({cfg.transform_learning_rate}), theta_opt({cfg.theta_learning_rate}), proxy_opt({cfg.learning_rate});

  auto transform_hash = [&] { return nets::state_hash(m.transform_refs(), cfg.label_quantum); };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    log.seconds = detail::timed([&] {
      double proxy_sum = 0, transform_sum = 0;
      for (const auto& idx : batch_indices(store.size(), cfg.batch_size, cfg.seed, epoch)) {
        auto [rgb1, rgb2] = detail::rgb_batch(store, idx);
        const std::uint64_t thash = transform_hash();

        // (a) transform step against a frozen proxy
        auto out = colorspace::transform_batch<float>(cfg.kind, rgb1, rgb2, models, NormMode::train, cfg.color);
        m.proxy.set_trainable(false);
        auto predicted = m.proxy.forward(out.out1, out.out2, NormMode::eval);
        auto loss = ad::affine(ad::mean(predicted), -1.0f);
        ad::zero_grads(net_params);
        ad::zero_grads(theta_params);
        loss.backward();
        if (!net_params.empty()) net_opt.step(net_params);
        if (!theta_params.empty()) theta_opt.step(theta_params);
        m.proxy.set_trainable(true);
        transform_sum += loss.item();

        // (b) proxy refresh on the detached outputs
        const auto d1 = out.out1.detach(), d2 = out.out2.detach();
        const auto i1 = unstack(d1), i2 = unstack(d2);
        std::vector<const GrayImage*> g1, g2;
        std::vector<std::uint64_t> keys;
        for (std::size_t k = 0; k < idx.size(); ++k) {
          g1.push_back(&i1[k]);
          g2.push_back(&i2[k]);
          keys.push_back(store[idx[k]].key);
        }
        const auto targets = detail::scaled(inlier_labels(g1, g2, keys, thash, labels, cfg), cfg.target_scale);
        for (std::size_t s = 0; s < cfg.proxy_steps; ++s) proxy_sum += detail::proxy_step(m.proxy, proxy_opt, d1, d2, targets);
        ++log.steps;
      }
      log.transform_loss = transform_sum / log.steps;
      log.proxy_loss = cfg.proxy_steps ? proxy_sum / (log.steps * cfg.proxy_steps) : 0.0;

      if (val_store) {
        double actual = 0, predicted = 0;
        const auto sel = detail::evenly_spaced(val_store->size(), cfg.validation_pairs);
        const std::uint64_t thash = transform_hash();
        for (std::size_t i = 0; i < sel.size(); i += cfg.batch_size) {
          std::vector<std::size_t> idx(sel.begin() + i, sel.begin() + std::min(sel.size(), i + cfg.batch_size));
          auto [rgb1, rgb2] = detail::rgb_batch(*val_store, idx);
          auto out = colorspace::transform_batch<float>(cfg.kind, rgb1, rgb2, models, NormMode::eval, cfg.color);
          const auto i1 = unstack(out.out1), i2 = unstack(out.out2);
          std::vector<const GrayImage*> g1, g2;
          std::vector<std::uint64_t> keys;
          for (std::size_t k = 0; k < idx.size(); ++k) {
            g1.push_back(&i1[k]);
            g2.push_back(&i2[k]);
            keys.push_back((*val_store)[idx[k]].key);
          }
          for (auto c : inlier_labels(g1, g2, keys, thash, labels, cfg)) actual += c;
          auto pred = m.proxy.forward(out.out1.detach(), out.out2.detach(), NormMode::eval);
          for (float p : pred.values()) predicted += p / cfg.target_scale;
        }
        log.val_actual = actual / sel.size();
        log.val_predicted = predicted / sel.size();
      }
    });
    r.log.epochs.push_back(log);
    if (progress) progress(log);
  }
  return r;
}

}  // namespace matchkit::train
