#include <gtest/gtest.h>

#include <set>

#include "matchkit/synth.hpp"

using namespace matchkit;
using namespace matchkit::synth;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("matchkit_synth_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

DatasetConfig small_config() {
  DatasetConfig cfg;
  cfg.scenes = 10;
  cfg.frames = 3;
  cfg.width = 48;
  cfg.height = 32;
  cfg.frame_step = 4;
  return cfg;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Planck, PositiveAndFinite) {
  for (double l = 300; l <= 1000; l += 25) {
    for (double t = 2000; t <= 10000; t += 500) {
      const double p = planck_radiance(l, t);
      EXPECT_TRUE(std::isfinite(p) && p > 0) << l << " " << t;
    }
  }
}

TEST(Planck, WienDisplacement) {
  double best_l = 0, best = 0;
  for (double l = 100; l <= 3000; l += 0.1) {
    const double p = planck_radiance(l, 5000);
    if (p > best) best = p, best_l = l;
  }
  EXPECT_NEAR(best_l * 5000 / 2.898e6, 1.0, 0.01);
}

TEST(Planck, WarmerLightIsRedder) {
  EXPECT_LT(planck_radiance(460, 2800) / planck_radiance(620, 2800),
            planck_radiance(460, 6500) / planck_radiance(620, 6500));
}

TEST(Illuminant, NormalizedToItsBrightestChannel) {
  for (double t : {2000.0, 2800.0, 6500.0, 10000.0}) {
    const auto p = illuminant_rgb(SensorSpec{}, t);
    EXPECT_EQ(*std::max_element(p.begin(), p.end()), 1.0);
    for (double v : p) EXPECT_GT(v, 0);
  }
}

TEST(Scene, ReflectancesInRange) {
  const auto s = make_scene(3, 64, 48);
  for (float v : s.reflectance.data) {
    EXPECT_GE(v, 0.02f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_EQ(make_scene(3, 64, 48).reflectance, s.reflectance);
  EXPECT_NE(make_scene(4, 64, 48).reflectance, s.reflectance);
}

TEST(Render, Deterministic) {
  const auto scene = make_scene(5, 80, 60);
  CaptureSpec c;
  c.noise_sigma = 0.01;
  c.shadow_min = 0.3;
  c.shadow_seed = 8;
  c.seed = 9;
  EXPECT_EQ(render(scene, SensorSpec{}, c, 64, 48), render(scene, SensorSpec{}, c, 64, 48));
  auto other = c;
  other.seed = 10;
  EXPECT_NE(render(scene, SensorSpec{}, c, 64, 48), render(scene, SensorSpec{}, other, 64, 48));
}

TEST(Render, LinearInIntensity) {
  const auto scene = make_scene(6, 64, 48);
  CaptureSpec a, b;
  a.intensity = 0.4;
  b.intensity = 0.8;
  a.shadow_min = b.shadow_min = 0.3;
  a.shadow_seed = b.shadow_seed = 2;
  const auto x = render(scene, SensorSpec{}, a, 64, 48, false), y = render(scene, SensorSpec{}, b, 64, 48, false);
  for (std::size_t i = 0; i < x.data.size(); ++i) EXPECT_NEAR(y.data[i], 2 * x.data[i], 1e-6);
}

TEST(Render, TemperatureChangeIsAGlobalPerChannelGain) {
  const auto scene = make_scene(7, 64, 48);
  CaptureSpec a, b;
  a.temperature = 2800;
  b.temperature = 6500;
  const auto x = render(scene, SensorSpec{}, a, 64, 48, false), y = render(scene, SensorSpec{}, b, 64, 48, false);
  for (std::size_t c = 0; c < 3; ++c) {
    const double ref = std::log(x.plane(c)[0] / y.plane(c)[0]);
    for (std::size_t i = 0; i < x.plane_size(); ++i) {
      EXPECT_NEAR(std::log(x.plane(c)[i] / y.plane(c)[i]), ref, 1e-5);
    }
  }
}

TEST(Render, ShadowGainWithinRange) {
  CaptureSpec c;
  c.shadow_min = 0.3;
  c.shadow_seed = 4;
  double lo = 1, hi = 0;
  for (int y = 0; y < 200; y += 3) {
    for (int x = 0; x < 300; x += 3) {
      const double g = shadow_gain(c, x, y);
      lo = std::min(lo, g);
      hi = std::max(hi, g);
    }
  }
  EXPECT_GE(lo, 0.3);
  EXPECT_LE(hi, 1.0);
  EXPECT_LT(lo, hi);
}

TEST(Viewpoint, PerturbationsKeepOverlap) {
  Rng rng(1);
  ViewpointJitter strong{30, 0.3, 0.2, 1e-3};
  for (int i = 0; i < 200; ++i) {
    const auto h = sample_perturbation(rng, 256, 192, strong);
    EXPECT_GE(overlap_fraction(h, 256, 192), 0.6);
  }
}

TEST(Viewpoint, OverlapOfKnownWarps) {
  EXPECT_NEAR(overlap_fraction(Eigen::Matrix3d::Identity(), 100, 50), 1.0, 1e-12);
  Eigen::Matrix3d shift = Eigen::Matrix3d::Identity();
  shift(0, 2) = 25;
  EXPECT_NEAR(overlap_fraction(shift, 100, 50), 0.75, 1e-12);
}

TEST(Manifest, RoundTrip) {
  const auto dir = scratch_dir("manifest");
  std::filesystem::create_directories(dir);
  std::vector<PairEntry> pairs{{"scene000/c0_f000.png", "scene000/c1_f001.png", 0, 6400, 2900, 1},
                               {"scene002/c1_f000.png", "scene002/c1_f000.png", 2, 2750, 2750, 0}};
  write_manifest(dir / "m.txt", pairs);
  const auto m = read_manifest(dir / "m.txt");
  EXPECT_EQ(m.pairs, pairs);
  EXPECT_EQ(m.root, dir);
  EXPECT_TRUE(slurp(dir / "m.txt").starts_with("matchkit-manifest v1\npair scene000/c0_f000.png"));
}

TEST(Manifest, MalformedInputsNameTheProblem) {
  const auto dir = scratch_dir("bad_manifest");
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "noheader.txt") << "pair a b 0 1 2 0\n";
  std::ofstream(dir / "badline.txt") << "matchkit-manifest v1\npair a b 0 1\n";
  EXPECT_THROW(read_manifest(dir / "noheader.txt"), IoError);
  try {
    read_manifest(dir / "badline.txt");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
  EXPECT_THROW(read_manifest(dir / "absent.txt"), IoError);
}

TEST(Dataset, PairCountMatchesEnumeration) {
  const auto cfg = small_config();
  const auto ds = generate_dataset(cfg, scratch_dir("count"), 1);
  // Independent count: every (frame, other frame) with |f - g| <= w, plus one
  // self-pair per capture.
  std::size_t cross = 0;
  for (long f = 0; f < 3; ++f) {
    for (long g = 0; g < 3; ++g) cross += std::abs(f - g) <= 1;
  }
  EXPECT_EQ(cross, 7u);
  EXPECT_EQ(ds.all.pairs.size(), cfg.scenes * (cross + 2 * cfg.frames));
  EXPECT_EQ(ds.train.pairs.size() + ds.test.pairs.size(), ds.all.pairs.size());
}

TEST(Dataset, SplitIsByScene) {
  const auto ds = generate_dataset(small_config(), scratch_dir("split"), 2);
  std::set<std::size_t> train, test;
  for (const auto& p : ds.train.pairs) train.insert(p.scene);
  for (const auto& p : ds.test.pairs) test.insert(p.scene);
  EXPECT_EQ(test.size(), 3u);  // round(0.25 * 10)
  for (auto s : test) EXPECT_FALSE(train.count(s));
}

TEST(Dataset, FilesExistAndSelfPairsIncluded) {
  const auto dir = scratch_dir("files");
  const auto ds = generate_dataset(small_config(), dir, 3);
  std::size_t selfs = 0;
  for (const auto& p : ds.all.pairs) {
    EXPECT_TRUE(std::filesystem::exists(ds.all.path1(p)));
    EXPECT_TRUE(std::filesystem::exists(ds.all.path2(p)));
    selfs += p.is_self();
    if (!p.is_self()) {
      EXPECT_NE(p.temperature1, p.temperature2);
      EXPECT_LE(std::abs(p.frame_offset), 1);
    }
  }
  EXPECT_EQ(selfs, 10u * 6u);
  const auto reread = read_manifest(dir / "manifest.txt");
  EXPECT_EQ(reread.pairs, ds.all.pairs);
  const auto img = io::read_png_rgb(ds.all.path1(ds.all.pairs[0]));
  EXPECT_EQ(img.width, 48u);
  EXPECT_EQ(img.height, 32u);
}

TEST(Dataset, DeterministicBytes) {
  const auto a = scratch_dir("det_a"), b = scratch_dir("det_b");
  auto cfg = small_config();
  cfg.scenes = 3;
  generate_dataset(cfg, a, 7);
  generate_dataset(cfg, b, 7);
  for (const auto& entry : std::filesystem::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), a);
    EXPECT_EQ(slurp(entry.path()), slurp(b / rel)) << rel;
  }
  const auto c = scratch_dir("det_c");
  generate_dataset(cfg, c, 8);
  EXPECT_NE(slurp(a / "scene000/c0_f000.png"), slurp(c / "scene000/c0_f000.png"));
}

TEST(Dataset, ConditionTemperaturesAreJitteredAndBounded) {
  const auto plans = plan_captures(small_config(), 0, 9);
  ASSERT_EQ(plans.size(), 6u);
  for (const auto& p : plans) {
    const double nominal = p.condition == 0 ? 6500 : 2800;
    EXPECT_LE(std::abs(p.spec.temperature - nominal), 300);
    EXPECT_GE(p.spec.temperature, 2000);
    EXPECT_LE(p.spec.temperature, 10000);
  }
}

TEST(Dataset, InvalidConfigsRejected) {
  auto cfg = small_config();
  cfg.conditions.resize(1);
  EXPECT_THROW(generate_dataset(cfg, scratch_dir("bad"), 1), ConfigError);
  cfg = small_config();
  cfg.test_fraction = 1.0;
  EXPECT_THROW(generate_dataset(cfg, scratch_dir("bad"), 1), ConfigError);
}

TEST(Dataset, UnwritableDirectory) {
  const auto dir = scratch_dir("blocker");
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "file") << "x";
  EXPECT_THROW(generate_dataset(small_config(), dir / "file" / "sub", 1), IoError);
}
