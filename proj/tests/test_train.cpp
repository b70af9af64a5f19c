#include <gtest/gtest.h>
#include <unistd.h>

#include <set>
#include <sstream>

#include "matchkit/train.hpp"

using namespace matchkit;
using namespace matchkit::train;

namespace {

// One small dataset shared by every test in this file.
const synth::GeneratedDataset& dataset() {
  static const synth::GeneratedDataset ds = [] {
    synth::DatasetConfig cfg;
    cfg.scenes = 4;
    cfg.frames = 2;
    cfg.width = 96;
    cfg.height = 64;
    cfg.frame_step = 6;
    const auto dir = std::filesystem::temp_directory_path() / ("matchkit_train_" + std::to_string(getpid()));
    std::filesystem::remove_all(dir);
    return synth::generate_dataset(cfg, dir, 11);
  }();
  return ds;
}

TrainConfig small_train(std::size_t epochs = 2) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 4;
  cfg.height = 64;
  cfg.validation_pairs = 8;
  cfg.seed = 5;
  return cfg;
}

synth::DatasetManifest subset(const synth::DatasetManifest& m, std::size_t n, bool cross_only = false) {
  synth::DatasetManifest out;
  out.root = m.root;
  for (const auto& p : m.pairs) {
    if (out.pairs.size() == n) break;
    if (cross_only && p.is_self()) continue;
    out.pairs.push_back(p);
  }
  return out;
}

std::string csv(const TrainLog& log) {
  std::ostringstream s;
  log.write_csv(s);
  return s.str();
}

}  // namespace

TEST(Batches, PartitionWithShortTail) {
  const auto b = batch_indices(19, 8, 3, 0);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 8u);
  EXPECT_EQ(b[2].size(), 3u);
  std::multiset<std::size_t> seen;
  for (const auto& batch : b) seen.insert(batch.begin(), batch.end());
  EXPECT_EQ(seen.size(), 19u);
  for (std::size_t i = 0; i < 19; ++i) EXPECT_EQ(seen.count(i), 1u);
}

TEST(Batches, DeterministicPerSeedAndEpoch) {
  EXPECT_EQ(batch_indices(50, 8, 3, 1), batch_indices(50, 8, 3, 1));
  EXPECT_NE(batch_indices(50, 8, 3, 1), batch_indices(50, 8, 3, 2));
  EXPECT_NE(batch_indices(50, 8, 3, 1), batch_indices(50, 8, 4, 1));
  EXPECT_THROW(batch_indices(5, 0, 0, 0), ConfigError);
  EXPECT_TRUE(batch_indices(0, 8, 0, 0).empty());
}

TEST(Batches, ManifestBatchesFollowIndices) {
  const auto& m = dataset().train;
  const auto idx = batch_indices(m.pairs.size(), 4, 9, 0);
  const auto batches = make_batches(m, 4, 9, 0);
  ASSERT_EQ(batches.size(), idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = 0; j < idx[i].size(); ++j) EXPECT_EQ(batches[i][j], m.pairs[idx[i][j]]);
  }
}

TEST(Store, ResizesToHeightKeepingAspect) {
  const PairStore store(subset(dataset().train, 3), 32);
  EXPECT_EQ(store.height(), 32u);
  EXPECT_EQ(store.width(), 48u);  // 96 x 64 -> 48 x 32
  EXPECT_EQ(*store[0].gray1, colorspace::gray(*store[0].rgb1));
}

TEST(Store, ResizeToHeightRounds) {
  RgbImage img(640, 480);
  const auto r = resize_to_height(img, 192);
  EXPECT_EQ(r.height, 192u);
  EXPECT_EQ(r.width, 256u);
  EXPECT_EQ(resize_to_height(RgbImage(100, 30), 192).width, 640u);
}

TEST(Labels, CacheKeyedByPairAndTransform) {
  const PairStore store(subset(dataset().train, 4), 64);
  LabelCache cache;
  TrainConfig cfg = small_train();
  std::vector<const GrayImage*> g1, g2;
  std::vector<std::uint64_t> keys;
  for (std::size_t i = 0; i < store.size(); ++i) {
    g1.push_back(store[i].gray1.get());
    g2.push_back(store[i].gray2.get());
    keys.push_back(store[i].key);
  }
  const auto a = inlier_labels(g1, g2, keys, 1, cache, cfg);
  EXPECT_EQ(cache.misses(), 4u);
  const auto b = inlier_labels(g1, g2, keys, 1, cache, cfg);
  EXPECT_EQ(a, b);
  EXPECT_EQ(cache.hits(), 4u);
  inlier_labels(g1, g2, keys, 2, cache, cfg);
  EXPECT_EQ(cache.misses(), 8u);
  EXPECT_EQ(cache.size(), 8u);
  // Labels equal direct matcher calls and leave the images untouched.
  const auto before = *g1[0];
  EXPECT_EQ(a[0], matcher::count_inliers(*g1[0], *g2[0], cfg.matcher, matcher_seed(cfg.seed, keys[0])).inlier_count);
  EXPECT_EQ(*g1[0], before);
}

TEST(Labels, TransformHashQuantizes) {
  auto t = ad::Tensor<float>::from_values({1, 3}, {0.3f, 0.3f, 0.4f});
  std::vector<nets::ParamRef<float>> refs{{"theta", &t, true}};
  const auto h = nets::state_hash(refs, 1e-4);
  t.values()[0] += 1e-6f;
  EXPECT_EQ(nets::state_hash(refs, 1e-4), h);
  t.values()[0] += 1e-3f;
  EXPECT_NE(nets::state_hash(refs, 1e-4), h);
}

TEST(Pretrain, OverfitsASinglePair) {
  auto one = subset(dataset().train, 1, true);
  auto cfg = small_train(500);
  cfg.batch_size = 1;
  const auto r = pretrain_proxy(one, cfg);
  ASSERT_EQ(r.log.epochs.size(), 500u);
  EXPECT_LT(r.log.epochs.back().proxy_loss, 1e-3);
}

TEST(Pretrain, DeterministicAndBounded) {
  const auto cfg = small_train(2);
  const auto& ds = dataset();
  auto a = pretrain_proxy(ds.train, cfg, &ds.test);
  auto b = pretrain_proxy(ds.train, cfg, &ds.test);
  EXPECT_EQ(nets::state_hash(a.proxy.refs()), nets::state_hash(b.proxy.refs()));
  EXPECT_EQ(csv(a.log), csv(b.log));
  for (const auto& e : a.log.epochs) {
    EXPECT_GE(e.proxy_loss, 0);
    EXPECT_LT(e.proxy_loss, 100);
    EXPECT_TRUE(std::isfinite(e.val_actual) && std::isfinite(e.val_predicted));
  }
  auto other = cfg;
  other.seed = 6;
  auto c = pretrain_proxy(ds.train, other);
  EXPECT_NE(nets::state_hash(a.proxy.refs()), nets::state_hash(c.proxy.refs()));
}

TEST(Pretrain, EmptyManifestRejected) {
  synth::DatasetManifest empty;
  EXPECT_THROW(pretrain_proxy(empty, small_train()), ConfigError);
}

TEST(Transform, FrozenProxyDuringTransformStep) {
  // With no refresh steps the proxy only ever sees transform steps, which must
  // leave it untouched while the transform itself moves.
  const auto& ds = dataset();
  auto cfg = small_train(1);
  auto pre = pretrain_proxy(subset(ds.train, 8), cfg).proxy;
  const auto before = nets::state_hash(pre.refs());
  cfg.proxy_steps = 0;
  for (auto kind : {TransformKind::sumlog, TransformKind::sumlog_e, TransformKind::mlp, TransformKind::mlp_e}) {
    cfg.kind = kind;
    auto r = train_transform(subset(ds.train, 8, true), pre, cfg);
    EXPECT_EQ(nets::state_hash(r.models.proxy.refs()), before) << colorspace::to_string(kind);
    auto fresh = init_transform(kind, cfg, 96, 64);
    EXPECT_NE(nets::state_hash(r.models.transform_refs()), nets::state_hash(fresh.transform_refs()))
        << colorspace::to_string(kind);
  }
  EXPECT_EQ(nets::state_hash(pre.refs()), before);
}

TEST(Transform, ProxyRefreshLeavesTransformParameters) {
  const auto& ds = dataset();
  auto cfg = small_train(1);
  cfg.kind = TransformKind::mlp_e;
  auto m = init_transform(cfg.kind, cfg, 96, 64);
  m.proxy = nets::ProxyModel<float>(sized(cfg.proxy, 96, 64), 3);
  auto models = m.view();
  const PairStore store(subset(ds.train, 4, true), 64);
  auto [a, b] = detail::rgb_batch(store, {0, 1, 2, 3});
  auto out = colorspace::transform_batch<float>(cfg.kind, a, b, models, NormMode::train, cfg.color);
  const auto before = nets::state_hash(m.transform_refs());
  const auto proxy_before = nets::state_hash(m.proxy.refs());
  ad::Adam<float> opt({1e-3});
  detail::proxy_step(m.proxy, opt, out.out1.detach(), out.out2.detach(), {0.5f, 0.4f, 0.3f, 0.2f});
  EXPECT_EQ(nets::state_hash(m.transform_refs()), before);
  EXPECT_NE(nets::state_hash(m.proxy.refs()), proxy_before);
}

TEST(Transform, DeterministicLogAndParameters) {
  const auto& ds = dataset();
  auto cfg = small_train(1);
  auto pre = pretrain_proxy(subset(ds.train, 8), cfg).proxy;
  cfg.kind = TransformKind::sumlog_e;
  cfg.epochs = 2;
  const auto train = subset(ds.train, 12, true);
  auto a = train_transform(train, pre, cfg, &ds.test);
  auto b = train_transform(train, pre, cfg, &ds.test);
  EXPECT_EQ(csv(a.log), csv(b.log));
  EXPECT_EQ(nets::state_hash(a.models.all_refs()), nets::state_hash(b.models.all_refs()));
  for (const auto& e : a.log.epochs) {
    EXPECT_GE(e.proxy_loss, 0);
    EXPECT_LT(e.proxy_loss, 100);
    EXPECT_TRUE(std::isfinite(e.transform_loss));
  }
}

TEST(Transform, SumLogFitKeepsUnitNormParams) {
  const auto& ds = dataset();
  auto cfg = small_train(1);
  auto pre = pretrain_proxy(subset(ds.train, 4), cfg).proxy;
  cfg.kind = TransformKind::sumlog;
  auto r = train_transform(subset(ds.train, 8, true), pre, cfg);
  ASSERT_TRUE(r.models.theta.defined());
  auto models = r.models.view();
  const PairStore store(subset(ds.train, 1, true), 64);
  auto [a, b] = detail::rgb_batch(store, {0});
  const auto out = colorspace::transform_batch<float>(cfg.kind, a, b, models, NormMode::eval, cfg.color);
  double l1 = 0;
  for (float v : out.params.values()) l1 += std::abs(v);
  EXPECT_NEAR(l1, 1.0, 1e-6);
}

TEST(Transform, MismatchesRejected) {
  const auto& ds = dataset();
  auto cfg = small_train(1);
  auto pre = pretrain_proxy(subset(ds.train, 4), cfg).proxy;
  cfg.kind = TransformKind::gray;
  EXPECT_THROW(train_transform(ds.train, pre, cfg), ConfigError);
  cfg.kind = TransformKind::mlp;
  cfg.height = 32;  // proxy was trained at 64 px
  EXPECT_THROW(train_transform(ds.train, pre, cfg), ShapeError);
  synth::DatasetManifest empty;
  EXPECT_THROW(train_transform(empty, pre, small_train()), ConfigError);
}

TEST(Config, InvalidValuesRejected) {
  auto cfg = small_train();
  cfg.epochs = 0;
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = small_train();
  cfg.learning_rate = 0;
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = small_train();
  cfg.height = 4;
  EXPECT_THROW(validate(cfg), ConfigError);
}

TEST(Log, CsvHasNoTimingColumn) {
  TrainLog log;
  EpochLog e;
  e.epoch = 0;
  e.steps = 3;
  e.proxy_loss = 0.25;
  e.seconds = 12.5;
  log.epochs.push_back(e);
  EXPECT_EQ(csv(log),
            "epoch,steps,proxy_loss,transform_loss,val_inliers_actual,val_inliers_predicted\n0,3,0.25,nan,nan,nan\n");
}
