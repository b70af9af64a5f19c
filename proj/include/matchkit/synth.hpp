#pragma once

// Synthetic scenes under black-body illumination with narrow-band sensors.
//
// A scene is a planar canvas of per-channel reflectances. A capture views it
// through a homography under one illuminant: for channel k
//   value = gain_k * shadow(x) * intensity * reflectance_k(x) * P(lambda_k, T) / P_ref(T)
// where P is Planck's law and P_ref(T) = max_k P(lambda_k, T) plays the role
// of the camera's exposure normalization. The log response then separates into
// material, shading and illuminant terms, which is what the log-chromaticity
// transforms rely on.

#include <Eigen/Dense>
#include <array>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "matchkit/png_io.hpp"

namespace matchkit::synth {

// Spectral radiance of a black body (relative units), lambda in nm, T in K.
inline double planck_radiance(double lambda_nm, double temperature) {
  constexpr double c1 = 3.741771852e8;  // W um^4 / m^2
  constexpr double c2 = 1.438776877e4;  // um K
  const double l = lambda_nm * 1e-3;
  return c1 / (std::pow(l, 5) * std::expm1(c2 / (l * temperature)));
}

struct SensorSpec {
  std::array<double, 3> wavelengths{620.0, 540.0, 460.0};  // R, G, B
  std::array<double, 3> gains{1.0, 1.0, 1.0};
};

// Per-channel illuminant scale after exposure normalization.
inline std::array<double, 3> illuminant_rgb(const SensorSpec& sensor, double temperature) {
  std::array<double, 3> p{};
  double peak = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    p[k] = planck_radiance(sensor.wavelengths[k], temperature);
    peak = std::max(peak, p[k]);
  }
  for (auto& v : p) v /= peak;
  return p;
}

// ---------------------------------------------------------------------------
// Procedural noise

namespace detail {

inline double lattice(std::uint64_t seed, long ix, long iy) {
  std::uint64_t h = mix_seed(seed, static_cast<std::uint64_t>(ix) * 0x9E3779B1ull ^ static_cast<std::uint64_t>(iy) * 0x85EBCA77ull);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline double smooth(double t) { return t * t * (3 - 2 * t); }

inline double value_noise(std::uint64_t seed, double x, double y, double scale) {
  const double fx = x / scale, fy = y / scale;
  const long ix = static_cast<long>(std::floor(fx)), iy = static_cast<long>(std::floor(fy));
  const double tx = smooth(fx - ix), ty = smooth(fy - iy);
  const double a = lattice(seed, ix, iy), b = lattice(seed, ix + 1, iy);
  const double c = lattice(seed, ix, iy + 1), d = lattice(seed, ix + 1, iy + 1);
  return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
}

// Fractal sum of octaves, normalized to [0, 1].
inline double fbm(std::uint64_t seed, double x, double y, double base_scale, int octaves) {
  double s = 0, norm = 0, amp = 1, scale = base_scale;
  for (int o = 0; o < octaves; ++o) {
    s += amp * value_noise(mix_seed(seed, o), x, y, scale);
    norm += amp;
    amp *= 0.5;
    scale *= 0.5;
  }
  return s / norm;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scenes

struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t width = 0, height = 0;
  RgbImage reflectance;  // canvas, values in [0.02, 1]
};

inline SceneSpec make_scene(std::uint64_t seed, std::size_t width, std::size_t height) {
  SceneSpec scene{seed, width, height, RgbImage(width, height)};
  Rng rng(seed);
  std::array<double, 3> base{};
  for (auto& b : base) b = rng.uniform(0.3, 0.75);

  struct Shape {
    int type;  // 0 disc, 1 rotated rectangle
    double cx, cy, a, b, angle;
    std::array<double, 3> material;
    std::uint64_t texture_seed;
  };
  const std::size_t count = width * height / 250;
  std::vector<Shape> shapes;
  for (std::size_t i = 0; i < count; ++i) {
    Shape s;
    s.type = static_cast<int>(rng.below(2));
    s.cx = rng.uniform(0, static_cast<double>(width));
    s.cy = rng.uniform(0, static_cast<double>(height));
    s.a = rng.uniform(2.5, 10.0);
    s.b = s.type == 0 ? s.a : rng.uniform(2.5, 10.0);
    s.angle = rng.uniform(0, M_PI);
    // Saturated materials: each channel drawn independently so hue varies widely.
    for (auto& m : s.material) m = rng.uniform(0.04, 0.95);
    s.texture_seed = rng.next();
    shapes.push_back(s);
  }

  const std::uint64_t bg_seed = rng.next();
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      std::array<double, 3> r{};
      for (std::size_t k = 0; k < 3; ++k) {
        r[k] = base[k] * (0.45 + 1.1 * detail::fbm(mix_seed(bg_seed, k), x, y, 20.0, 4));
      }
      // 2x2 supersampled coverage keeps shape boundaries consistent under warps.
      for (const auto& s : shapes) {
        const double dx0 = x - s.cx, dy0 = y - s.cy;
        if (std::abs(dx0) > 24 || std::abs(dy0) > 24) continue;
        int covered = 0;
        for (int sy = 0; sy < 2; ++sy) {
          for (int sx = 0; sx < 2; ++sx) {
            const double dx = dx0 + (sx - 0.5) * 0.5, dy = dy0 + (sy - 0.5) * 0.5;
            const double c = std::cos(s.angle), sn = std::sin(s.angle);
            const double u = c * dx + sn * dy, v = -sn * dx + c * dy;
            const bool in = s.type == 0 ? (u * u + v * v <= s.a * s.a) : (std::abs(u) <= s.a && std::abs(v) <= s.b);
            covered += in;
          }
        }
        if (covered == 0) continue;
        const double t = 0.75 + 0.25 * detail::fbm(s.texture_seed, x, y, 4.0, 2);
        const double w = covered / 4.0;
        for (std::size_t k = 0; k < 3; ++k) r[k] = (1 - w) * r[k] + w * s.material[k] * t;
      }
      for (std::size_t k = 0; k < 3; ++k) scene.reflectance.at(k, y, x) = static_cast<float>(std::clamp(r[k], 0.02, 1.0));
    }
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Captures

struct CaptureSpec {
  double temperature = 6500.0;    // K
  double intensity = 1.0;
  double shadow_min = 1.0;        // shadow gain range [shadow_min, 1]; 1 disables shadows
  std::uint64_t shadow_seed = 0;
  Eigen::Matrix3d homography = Eigen::Matrix3d::Identity();  // image px -> canvas px
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
};

// Smooth, channel-uniform shading gain in [shadow_min, 1], defined on the canvas.
inline double shadow_gain(const CaptureSpec& c, double x, double y) {
  if (c.shadow_min >= 1.0) return 1.0;
  const double n = detail::fbm(c.shadow_seed, x, y, 56.0, 2);
  const double t = std::clamp((n - 0.45) / 0.12, 0.0, 1.0);
  return 1.0 - (1.0 - c.shadow_min) * detail::smooth(t);
}

inline RgbImage render(const SceneSpec& scene, const SensorSpec& sensor, const CaptureSpec& capture,
                       std::size_t width, std::size_t height, bool clamp_output = true) {
  const auto illum = illuminant_rgb(sensor, capture.temperature);
  RgbImage out(width, height);
  Rng rng(capture.seed);
  const auto& refl = scene.reflectance;
  for (std::size_t v = 0; v < height; ++v) {
    for (std::size_t u = 0; u < width; ++u) {
      const Eigen::Vector3d p = capture.homography * Eigen::Vector3d(u, v, 1.0);
      const double x = std::clamp(p.x() / p.z(), 0.0, static_cast<double>(scene.width - 1));
      const double y = std::clamp(p.y() / p.z(), 0.0, static_cast<double>(scene.height - 1));
      const auto x0 = static_cast<std::size_t>(x), y0 = static_cast<std::size_t>(y);
      const std::size_t x1 = std::min(x0 + 1, scene.width - 1), y1 = std::min(y0 + 1, scene.height - 1);
      const double tx = x - x0, ty = y - y0;
      const double shade = shadow_gain(capture, x, y) * capture.intensity;
      for (std::size_t k = 0; k < 3; ++k) {
        const double r = (refl.at(k, y0, x0) * (1 - tx) + refl.at(k, y0, x1) * tx) * (1 - ty) +
                         (refl.at(k, y1, x0) * (1 - tx) + refl.at(k, y1, x1) * tx) * ty;
        double value = sensor.gains[k] * shade * r * illum[k];
        if (capture.noise_sigma > 0) value += capture.noise_sigma * rng.normal();
        out.at(k, v, u) = static_cast<float>(clamp_output ? std::clamp(value, 0.0, 1.0) : value);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Viewpoints

// Area of the convex polygon `poly` clipped to [0,w] x [0,h] (Sutherland-Hodgman).
inline double clipped_area(std::vector<Eigen::Vector2d> poly, double w, double h) {
  auto clip = [](const std::vector<Eigen::Vector2d>& in, auto inside, auto intersect) {
    std::vector<Eigen::Vector2d> out;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const auto& a = in[i];
      const auto& b = in[(i + 1) % in.size()];
      if (inside(b)) {
        if (!inside(a)) out.push_back(intersect(a, b));
        out.push_back(b);
      } else if (inside(a)) {
        out.push_back(intersect(a, b));
      }
    }
    return out;
  };
  auto edge = [&](int axis, double bound, bool upper) {
    poly = clip(
        poly, [&](const Eigen::Vector2d& p) { return upper ? p[axis] <= bound : p[axis] >= bound; },
        [&](const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
          const double t = (bound - a[axis]) / (b[axis] - a[axis]);
          return Eigen::Vector2d(a + t * (b - a));
        });
  };
  edge(0, 0.0, false);
  edge(0, w, true);
  edge(1, 0.0, false);
  edge(1, h, true);
  double area = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& a = poly[i];
    const auto& b = poly[(i + 1) % poly.size()];
    area += a.x() * b.y() - b.x() * a.y();
  }
  return std::abs(area) / 2;
}

// Fraction of the image rectangle covered by its image under `h`.
inline double overlap_fraction(const Eigen::Matrix3d& h, double width, double height) {
  std::vector<Eigen::Vector2d> corners;
  for (const auto& c : {Eigen::Vector2d(0, 0), Eigen::Vector2d(width, 0), Eigen::Vector2d(width, height),
                        Eigen::Vector2d(0, height)}) {
    const Eigen::Vector3d p = h * c.homogeneous();
    corners.emplace_back(p.x() / p.z(), p.y() / p.z());
  }
  return clipped_area(corners, width, height) / (width * height);
}

struct ViewpointJitter {
  double translation = 4.0;  // px
  double rotation = 0.03;    // rad
  double scale = 0.03;
  double perspective = 5e-5;
};

// Random perturbation about the image center with at least `min_overlap`
// of the image area still in view.
inline Eigen::Matrix3d sample_perturbation(Rng& rng, double width, double height, const ViewpointJitter& j,
                                           double min_overlap = 0.6) {
  for (int attempt = 0;; ++attempt) {
    const double shrink = attempt < 32 ? 1.0 : 0.5;
    const double a = rng.uniform(-j.rotation, j.rotation) * shrink;
    const double s = 1.0 + rng.uniform(-j.scale, j.scale) * shrink;
    const double tx = rng.uniform(-j.translation, j.translation) * shrink;
    const double ty = rng.uniform(-j.translation, j.translation) * shrink;
    const double px = rng.uniform(-j.perspective, j.perspective) * shrink;
    const double py = rng.uniform(-j.perspective, j.perspective) * shrink;
    Eigen::Matrix3d center, uncenter, p;
    center << 1, 0, -width / 2, 0, 1, -height / 2, 0, 0, 1;
    uncenter << 1, 0, width / 2, 0, 1, height / 2, 0, 0, 1;
    p << s * std::cos(a), -s * std::sin(a), tx, s * std::sin(a), s * std::cos(a), ty, px, py, 1;
    const Eigen::Matrix3d h = uncenter * p * center;
    if (overlap_fraction(h, width, height) >= min_overlap) return h;
  }
}

// ---------------------------------------------------------------------------
// Datasets

struct Condition {
  std::string name;
  double temperature = 6500.0;
  double intensity = 1.0;
  double shadow_min = 0.3;
};

struct DatasetConfig {
  std::size_t scenes = 10;
  std::size_t frames = 3;   // viewpoints per scene along its route
  std::size_t window = 1;   // cross-condition pairs within +-window frames
  double test_fraction = 0.25;
  std::size_t width = 256, height = 192;
  double frame_step = 16.0;   // px of route travel between frames
  double temperature_jitter = 300.0;
  double intensity_jitter = 0.15;
  double noise_sigma = 0.5 / 255.0;
  ViewpointJitter viewpoint;
  std::vector<Condition> conditions{{"day", 6500.0, 1.0, 0.3}, {"night", 2800.0, 0.25, 0.3}};
  SensorSpec sensor;
};

struct PairEntry {
  std::string image1, image2;  // relative to the manifest directory
  std::size_t scene = 0;
  long temperature1 = 0, temperature2 = 0;
  long frame_offset = 0;

  bool is_self() const { return image1 == image2; }
  bool operator==(const PairEntry&) const = default;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory holding the manifest and images
  std::vector<PairEntry> pairs;

  std::filesystem::path path1(const PairEntry& p) const { return root / p.image1; }
  std::filesystem::path path2(const PairEntry& p) const { return root / p.image2; }
};

constexpr std::string_view kManifestHeader = "matchkit-manifest v1";

inline void write_manifest(const std::filesystem::path& path, const std::vector<PairEntry>& pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << kManifestHeader << '\n';
  for (const auto& p : pairs) {
    out << "pair " << p.image1 << ' ' << p.image2 << ' ' << p.scene << ' ' << p.temperature1 << ' ' << p.temperature2
        << ' ' << p.frame_offset << '\n';
  }
  if (!out) throw IoError("failed writing manifest " + path.string());
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) {
    throw IoError("manifest " + path.string() + ": missing '" + std::string(kManifestHeader) + "' header");
  }
  DatasetManifest m;
  m.root = path.parent_path();
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    PairEntry p;
    if (!(ls >> tag >> p.image1 >> p.image2 >> p.scene >> p.temperature1 >> p.temperature2 >> p.frame_offset) ||
        tag != "pair") {
      throw IoError("manifest " + path.string() + ":" + std::to_string(lineno) + ": malformed pair line");
    }
    m.pairs.push_back(std::move(p));
  }
  return m;
}

// Capture of `condition` at route frame `frame`, as stored in a dataset.
struct CaptureRecord {
  std::size_t scene, condition, frame;
  long temperature;
  std::string file;
};

inline std::string capture_file(std::size_t scene, std::size_t condition, std::size_t frame) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "scene%03zu/c%zu_f%03zu.png", scene, condition, frame);
  return buf;
}

// Pairs of one scene: cross-condition pairs within the frame window (ordered by
// condition pair, frame, offset), then self-pairs of every capture.
inline std::vector<PairEntry> scene_pairs(std::size_t scene, const std::vector<CaptureRecord>& captures,
                                          const DatasetConfig& cfg) {
  std::vector<PairEntry> out;
  auto find = [&](std::size_t c, std::size_t f) -> const CaptureRecord& {
    return captures[c * cfg.frames + f];
  };
  const long frames = static_cast<long>(cfg.frames), w = static_cast<long>(cfg.window);
  for (std::size_t a = 0; a < cfg.conditions.size(); ++a) {
    for (std::size_t b = a + 1; b < cfg.conditions.size(); ++b) {
      for (long f = 0; f < frames; ++f) {
        for (long o = -w; o <= w; ++o) {
          if (f + o < 0 || f + o >= frames) continue;
          const auto& c1 = find(a, f);
          const auto& c2 = find(b, f + o);
          out.push_back({c1.file, c2.file, scene, c1.temperature, c2.temperature, o});
        }
      }
    }
  }
  for (const auto& c : captures) out.push_back({c.file, c.file, scene, c.temperature, c.temperature, 0});
  return out;
}

struct GeneratedDataset {
  DatasetManifest all, train, test;
  std::vector<std::size_t> train_scenes, test_scenes;
};

// Scene and capture specs for a dataset, independent of any I/O.
struct CapturePlan {
  std::size_t scene, condition, frame;
  CaptureSpec spec;
};

inline std::size_t canvas_width(const DatasetConfig& cfg) {
  return cfg.width + static_cast<std::size_t>(cfg.frame_step * (cfg.frames > 0 ? cfg.frames - 1 : 0)) + 64;
}
inline std::size_t canvas_height(const DatasetConfig& cfg) { return cfg.height + 64; }

inline std::vector<CapturePlan> plan_captures(const DatasetConfig& cfg, std::size_t scene, std::uint64_t seed) {
  std::vector<CapturePlan> plans;
  Rng rng(mix_seed(seed, 1000 + scene));
  for (std::size_t c = 0; c < cfg.conditions.size(); ++c) {
    const auto& cond = cfg.conditions[c];
    for (std::size_t f = 0; f < cfg.frames; ++f) {
      CaptureSpec spec;
      spec.temperature = std::clamp(
          std::round(cond.temperature + rng.uniform(-cfg.temperature_jitter, cfg.temperature_jitter)), 2000.0,
          10000.0);
      spec.intensity = cond.intensity * (1.0 + rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter));
      spec.shadow_min = cond.shadow_min;
      spec.shadow_seed = rng.next();
      spec.noise_sigma = cfg.noise_sigma;
      spec.seed = rng.next();
      Eigen::Matrix3d route;
      route << 1, 0, 32.0 + cfg.frame_step * f, 0, 1, 32.0, 0, 0, 1;
      spec.homography = route * sample_perturbation(rng, cfg.width, cfg.height, cfg.viewpoint);
      plans.push_back({scene, c, f, spec});
    }
  }
  return plans;
}

inline void validate(const DatasetConfig& cfg) {
  if (cfg.scenes == 0 || cfg.frames == 0) throw ConfigError("synth: scenes and frames must be positive");
  if (cfg.conditions.size() < 2) throw ConfigError("synth: at least two illumination conditions are required");
  if (!(cfg.test_fraction >= 0.0 && cfg.test_fraction < 1.0)) throw ConfigError("synth: test_fraction must be in [0,1)");
  if (cfg.width < 16 || cfg.height < 16) throw ConfigError("synth: image too small");
}

// Renders every capture to `out_dir` and writes manifest.txt, train.txt and test.txt.
inline GeneratedDataset generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir,
                                         std::uint64_t seed) {
  validate(cfg);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw IoError("cannot create output directory " + out_dir.string());
  }

  // Scene split: a seeded shuffle of scene ids, the tail is held out.
  std::vector<std::size_t> order(cfg.scenes);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(mix_seed(seed, 7));
  split_rng.shuffle(order.begin(), order.end());
  std::size_t n_test = static_cast<std::size_t>(std::lround(cfg.test_fraction * cfg.scenes));
  if (cfg.test_fraction > 0 && n_test == 0 && cfg.scenes > 1) n_test = 1;
  std::vector<bool> is_test(cfg.scenes, false);
  for (std::size_t i = cfg.scenes - n_test; i < cfg.scenes; ++i) is_test[order[i]] = true;

  GeneratedDataset result;
  result.all.root = result.train.root = result.test.root = out_dir;
  std::vector<std::vector<PairEntry>> per_scene(cfg.scenes);
  std::vector<std::string> failures(cfg.scenes);
  parallel_for(cfg.scenes, [&](std::size_t s) {
    try {
      const auto scene = make_scene(mix_seed(seed, s), canvas_width(cfg), canvas_height(cfg));
      std::vector<CaptureRecord> records;
      for (const auto& plan : plan_captures(cfg, s, seed)) {
        const auto img = render(scene, cfg.sensor, plan.spec, cfg.width, cfg.height);
        CaptureRecord rec{s, plan.condition, plan.frame, std::lround(plan.spec.temperature),
                          capture_file(s, plan.condition, plan.frame)};
        std::filesystem::create_directories((out_dir / rec.file).parent_path());
        io::write_png(out_dir / rec.file, img);
        records.push_back(rec);
      }
      per_scene[s] = scene_pairs(s, records, cfg);
    } catch (const std::exception& e) {
      failures[s] = e.what();
    }
  });
  for (const auto& f : failures) {
    if (!f.empty()) throw IoError("generate_dataset: " + f);
  }
  for (std::size_t s = 0; s < cfg.scenes; ++s) {
    (is_test[s] ? result.test_scenes : result.train_scenes).push_back(s);
    for (const auto& p : per_scene[s]) {
      result.all.pairs.push_back(p);
      (is_test[s] ? result.test : result.train).pairs.push_back(p);
    }
  }
  write_manifest(out_dir / "manifest.txt", result.all.pairs);
  write_manifest(out_dir / "train.txt", result.train.pairs);
  write_manifest(out_dir / "test.txt", result.test.pairs);
  return result;
}

}  // namespace matchkit::synth
