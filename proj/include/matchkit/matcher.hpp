#pragma once

// Sparse feature matcher used as the (non-differentiable) match-count target.
//
// Detection: 5x5 blob and checkerboard filter responses on the 8-bit scaled
// image, thresholded and non-maximum (non-minimum) suppressed per class, with
// parabolic subpixel refinement. Description: Sobel derivative responses at a
// fixed 4x4 grid around each feature. Matching: nearest SAD descriptor of the
// same class inside a search radius, kept only if mutually consistent.
// Geometry: normalized eight-point RANSAC with Sampson distance.

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <span>
#include <vector>

#include "matchkit/image.hpp"

namespace matchkit::matcher {

struct MatcherConfig {
  double tau_det = 25.0;     // filter response threshold, 8-bit units
  std::size_t r_nms = 5;     // suppression radius, px
  double rho = 100.0;        // match search radius, px
  std::size_t ransac_iters = 2000;
  double tau_epi = 1.0;      // Sampson distance threshold, px
};

enum class FeatureClass : std::uint8_t { blob_max = 0, blob_min = 1, corner_max = 2, corner_min = 3 };

constexpr std::size_t kDescriptorLength = 32;
constexpr std::array<int, 4> kDescriptorGrid{-5, -2, 2, 5};
// Distance from the border a feature must keep for its full footprint.
constexpr std::size_t kMargin = 6;

struct Feature {
  double u = 0, v = 0;  // subpixel column, row
  std::size_t px = 0, py = 0;
  FeatureClass cls = FeatureClass::blob_max;
  std::array<float, kDescriptorLength> descriptor{};
};

struct Correspondence {
  Eigen::Vector2d p1, p2;
  double distance = 0;  // descriptor SAD
  std::size_t i1 = 0, i2 = 0;
};

struct RansacResult {
  std::optional<Eigen::Matrix3d> fundamental;
  std::vector<bool> inlier_mask;
  std::size_t inlier_count = 0;
  std::size_t best_sample_inliers = 0;  // consensus of the best minimal sample, before refit
};

struct MatchReport {
  std::vector<Correspondence> correspondences;
  std::optional<Eigen::Matrix3d> fundamental;
  std::vector<bool> inlier_mask;
  std::size_t inlier_count = 0;
  std::uint64_t seed = 0;
  std::size_t features1 = 0, features2 = 0;
};

class TooFewCorrespondences : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Detection

namespace detail {

constexpr int kBlob[5][5] = {{-1, -1, -1, -1, -1},
                             {-1, 1, 1, 1, -1},
                             {-1, 1, 8, 1, -1},
                             {-1, 1, 1, 1, -1},
                             {-1, -1, -1, -1, -1}};
constexpr int kChecker[5][5] = {{-1, -1, 0, 1, 1},
                                {-1, -1, 0, 1, 1},
                                {0, 0, 0, 0, 0},
                                {1, 1, 0, -1, -1},
                                {1, 1, 0, -1, -1}};

struct Planes {
  std::size_t w = 0, h = 0;
  std::vector<float> blob, corner, du, dv;
};

inline Planes filter_responses(const GrayImage& g) {
  Planes p;
  p.w = g.width;
  p.h = g.height;
  const std::size_t w = p.w, h = p.h;
  p.blob.assign(w * h, 0.0f);
  p.corner.assign(w * h, 0.0f);
  p.du.assign(w * h, 0.0f);
  p.dv.assign(w * h, 0.0f);
  auto px = [&](std::size_t y, std::size_t x) { return 255.0f * g.data[y * w + x]; };
  for (std::size_t y = 2; y + 2 < h; ++y) {
    for (std::size_t x = 2; x + 2 < w; ++x) {
      float b = 0, c = 0;
      for (int dy = 0; dy < 5; ++dy) {
        for (int dx = 0; dx < 5; ++dx) {
          const float v = px(y + dy - 2, x + dx - 2);
          b += kBlob[dy][dx] * v;
          c += kChecker[dy][dx] * v;
        }
      }
      p.blob[y * w + x] = b;
      p.corner[y * w + x] = c;
    }
  }
  for (std::size_t y = 1; y + 1 < h; ++y) {
    for (std::size_t x = 1; x + 1 < w; ++x) {
      const float a = px(y - 1, x - 1), b = px(y - 1, x), c = px(y - 1, x + 1);
      const float d = px(y, x - 1), f = px(y, x + 1);
      const float gg = px(y + 1, x - 1), hh = px(y + 1, x), i = px(y + 1, x + 1);
      p.du[y * w + x] = (c + 2 * f + i - a - 2 * d - gg) / 4.0f;
      p.dv[y * w + x] = (gg + 2 * hh + i - a - 2 * b - c) / 4.0f;
    }
  }
  return p;
}

inline double parabolic_offset(float left, float center, float right) {
  const double denom = 2.0 * center - left - right;
  if (std::abs(denom) < 1e-12) return 0.0;
  return std::clamp(0.5 * (right - left) / denom, -0.5, 0.5);
}

}  // namespace detail

inline std::size_t min_image_extent() { return 2 * kMargin + 1; }

inline std::vector<Feature> detect_features(const GrayImage& g, const MatcherConfig& cfg = {}) {
  if (g.width < min_image_extent() || g.height < min_image_extent()) {
    throw ShapeError("detect_features: image smaller than the " + std::to_string(min_image_extent()) +
                     " px filter and descriptor footprint");
  }
  const auto planes = detail::filter_responses(g);
  const std::size_t w = planes.w, h = planes.h;
  const long r = static_cast<long>(cfg.r_nms);
  std::vector<Feature> out;

  struct Channel {
    const std::vector<float>* response;
    float sign;
    FeatureClass cls;
  };
  const std::array<Channel, 4> channels{{{&planes.blob, 1.0f, FeatureClass::blob_max},
                                         {&planes.blob, -1.0f, FeatureClass::blob_min},
                                         {&planes.corner, 1.0f, FeatureClass::corner_max},
                                         {&planes.corner, -1.0f, FeatureClass::corner_min}}};

  for (std::size_t y = kMargin; y + kMargin < h; ++y) {
    for (std::size_t x = kMargin; x + kMargin < w; ++x) {
      const std::size_t idx = y * w + x;
      for (const auto& ch : channels) {
        const auto& resp = *ch.response;
        const float v = ch.sign * resp[idx];
        if (v < cfg.tau_det) continue;
        // Strict extremum in the (2r+1)^2 window; ties go to the earlier pixel.
        bool extremum = true;
        const long y0 = std::max<long>(2, static_cast<long>(y) - r), y1 = std::min<long>(h - 3, y + r);
        const long x0 = std::max<long>(2, static_cast<long>(x) - r), x1 = std::min<long>(w - 3, x + r);
        for (long yy = y0; yy <= y1 && extremum; ++yy) {
          for (long xx = x0; xx <= x1; ++xx) {
            const std::size_t j = static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx);
            if (j == idx) continue;
            const float o = ch.sign * resp[j];
            if (o > v || (o == v && j < idx)) {
              extremum = false;
              break;
            }
          }
        }
        if (!extremum) continue;
        Feature f;
        f.px = x;
        f.py = y;
        f.cls = ch.cls;
        f.u = x + detail::parabolic_offset(ch.sign * resp[idx - 1], v, ch.sign * resp[idx + 1]);
        f.v = y + detail::parabolic_offset(ch.sign * resp[idx - w], v, ch.sign * resp[idx + w]);
        std::size_t k = 0;
        for (int dy : kDescriptorGrid) {
          for (int dx : kDescriptorGrid) {
            const std::size_t j = (y + dy) * w + (x + dx);
            f.descriptor[k] = planes.du[j];
            f.descriptor[k + 16] = planes.dv[j];
            ++k;
          }
        }
        out.push_back(f);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matching

inline float descriptor_sad(const Feature& a, const Feature& b) {
  float s = 0;
  for (std::size_t k = 0; k < kDescriptorLength; ++k) s += std::abs(a.descriptor[k] - b.descriptor[k]);
  return s;
}

namespace detail {

// Best candidate of the same class within radius rho: lowest SAD, then
// smallest displacement, then lowest index.
inline std::optional<std::size_t> best_match(const Feature& f, std::span<const Feature> pool, double rho) {
  std::optional<std::size_t> best;
  float best_sad = 0;
  double best_d2 = 0;
  const double rho2 = rho * rho;
  for (std::size_t j = 0; j < pool.size(); ++j) {
    const Feature& c = pool[j];
    if (c.cls != f.cls) continue;
    const double du = c.u - f.u, dv = c.v - f.v, d2 = du * du + dv * dv;
    if (d2 > rho2) continue;
    const float sad = descriptor_sad(f, c);
    if (!best || sad < best_sad || (sad == best_sad && d2 < best_d2)) {
      best = j;
      best_sad = sad;
      best_d2 = d2;
    }
  }
  return best;
}

}  // namespace detail

inline std::vector<Correspondence> match_features(std::span<const Feature> f1, std::span<const Feature> f2,
                                                  const MatcherConfig& cfg = {}) {
  std::vector<Correspondence> out;
  for (std::size_t i = 0; i < f1.size(); ++i) {
    const auto j = detail::best_match(f1[i], f2, cfg.rho);
    if (!j) continue;
    const auto back = detail::best_match(f2[*j], f1, cfg.rho);
    if (!back || *back != i) continue;
    out.push_back({{f1[i].u, f1[i].v}, {f2[*j].u, f2[*j].v}, descriptor_sad(f1[i], f2[*j]), i, *j});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Epipolar geometry

// Similarity taking points to zero centroid and mean distance sqrt(2).
inline std::optional<Eigen::Matrix3d> hartley_normalization(std::span<const Eigen::Vector2d> pts) {
  Eigen::Vector2d c = Eigen::Vector2d::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  double mean_dist = 0;
  for (const auto& p : pts) mean_dist += (p - c).norm();
  mean_dist /= static_cast<double>(pts.size());
  if (!(mean_dist > 1e-9)) return std::nullopt;
  const double s = std::sqrt(2.0) / mean_dist;
  Eigen::Matrix3d t;
  t << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
  return t;
}

// Least-squares fundamental matrix (x2^T F x1 = 0) from >= 8 point pairs,
// rank 2, unit Frobenius norm. nullopt for degenerate configurations.
inline std::optional<Eigen::Matrix3d> eight_point(std::span<const Eigen::Vector2d> x1,
                                                  std::span<const Eigen::Vector2d> x2) {
  if (x1.size() < 8 || x1.size() != x2.size()) return std::nullopt;
  const auto t1 = hartley_normalization(x1), t2 = hartley_normalization(x2);
  if (!t1 || !t2) return std::nullopt;
  Eigen::Matrix<double, 9, 9> ata = Eigen::Matrix<double, 9, 9>::Zero();
  for (std::size_t i = 0; i < x1.size(); ++i) {
    const Eigen::Vector3d a = *t1 * x1[i].homogeneous();
    const Eigen::Vector3d b = *t2 * x2[i].homogeneous();
    Eigen::Matrix<double, 9, 1> row;
    row << b.x() * a.x(), b.x() * a.y(), b.x(), b.y() * a.x(), b.y() * a.y(), b.y(), a.x(), a.y(), 1.0;
    ata.noalias() += row * row.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 9, 9>> eig(ata);
  if (eig.info() != Eigen::Success) return std::nullopt;
  const Eigen::Matrix<double, 9, 1> f = eig.eigenvectors().col(0);
  Eigen::Matrix3d fn;
  fn << f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7), f(8);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(fn, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d s = svd.singularValues();
  s(2) = 0.0;
  fn = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  Eigen::Matrix3d out = t2->transpose() * fn * *t1;
  const double norm = out.norm();
  if (!(norm > 0) || !out.allFinite()) return std::nullopt;
  return out / norm;
}

// First-order geometric distance (px) of a correspondence to the epipolar constraint.
inline double sampson_distance(const Eigen::Matrix3d& f, const Eigen::Vector2d& p1, const Eigen::Vector2d& p2) {
  const Eigen::Vector3d x1 = p1.homogeneous(), x2 = p2.homogeneous();
  const Eigen::Vector3d fx1 = f * x1, ftx2 = f.transpose() * x2;
  const double e = x2.dot(fx1);
  const double denom = fx1.x() * fx1.x() + fx1.y() * fx1.y() + ftx2.x() * ftx2.x() + ftx2.y() * ftx2.y();
  if (!(denom > 0)) return e == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  return std::abs(e) / std::sqrt(denom);
}

namespace detail {

inline std::size_t score(const Eigen::Matrix3d& f, std::span<const Correspondence> corr, double tau,
                         std::vector<bool>* mask) {
  std::size_t n = 0;
  if (mask) mask->assign(corr.size(), false);
  for (std::size_t i = 0; i < corr.size(); ++i) {
    if (sampson_distance(f, corr[i].p1, corr[i].p2) < tau) {
      ++n;
      if (mask) (*mask)[i] = true;
    }
  }
  return n;
}

}  // namespace detail

// RANSAC over minimal eight-point samples. The sample sequence depends only on
// the seed and |corr|, never on the threshold.
inline RansacResult ransac_fundamental(std::span<const Correspondence> corr, std::size_t iters, double tau_epi,
                                       std::uint64_t seed) {
  if (corr.size() < 8) {
    throw TooFewCorrespondences("ransac: need at least 8 correspondences, got " + std::to_string(corr.size()));
  }
  Rng rng(seed);
  std::vector<std::size_t> idx(corr.size());
  std::vector<Eigen::Vector2d> s1(8), s2(8);
  std::optional<Eigen::Matrix3d> best;
  std::size_t best_count = 0;
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t k = 0; k < 8; ++k) {
      const std::size_t j = k + rng.below(idx.size() - k);
      std::swap(idx[k], idx[j]);
      s1[k] = corr[idx[k]].p1;
      s2[k] = corr[idx[k]].p2;
    }
    const auto f = eight_point(s1, s2);
    if (!f) continue;
    const std::size_t count = detail::score(*f, corr, tau_epi, nullptr);
    if (!best || count > best_count) {
      best = f;
      best_count = count;
    }
  }
  if (!best) throw DegenerateError("ransac: every minimal sample was degenerate (no model)");

  RansacResult result;
  result.best_sample_inliers = best_count;
  result.fundamental = best;
  result.inlier_count = detail::score(*best, corr, tau_epi, &result.inlier_mask);

  // Refit on the consensus set; keep it only if it does not lose support.
  if (result.inlier_count >= 8) {
    std::vector<Eigen::Vector2d> c1, c2;
    for (std::size_t i = 0; i < corr.size(); ++i) {
      if (result.inlier_mask[i]) {
        c1.push_back(corr[i].p1);
        c2.push_back(corr[i].p2);
      }
    }
    if (const auto refit = eight_point(c1, c2)) {
      std::vector<bool> mask;
      const std::size_t count = detail::score(*refit, corr, tau_epi, &mask);
      if (count >= result.inlier_count) {
        result.fundamental = refit;
        result.inlier_count = count;
        result.inlier_mask = std::move(mask);
      }
    }
  }
  return result;
}

// detect -> match -> RANSAC. Fewer than 8 correspondences gives zero inliers
// and no fundamental matrix.
inline MatchReport count_inliers(const GrayImage& g1, const GrayImage& g2, const MatcherConfig& cfg,
                                 std::uint64_t seed) {
  const auto f1 = detect_features(g1, cfg);
  const auto f2 = detect_features(g2, cfg);
  MatchReport report;
  report.seed = seed;
  report.features1 = f1.size();
  report.features2 = f2.size();
  report.correspondences = match_features(f1, f2, cfg);
  report.inlier_mask.assign(report.correspondences.size(), false);
  if (report.correspondences.size() < 8) return report;
  try {
    auto r = ransac_fundamental(report.correspondences, cfg.ransac_iters, cfg.tau_epi, seed);
    report.fundamental = r.fundamental;
    report.inlier_mask = std::move(r.inlier_mask);
    report.inlier_count = r.inlier_count;
  } catch (const DegenerateError&) {
    // no model: zero inliers
  }
  return report;
}

}  // namespace matchkit::matcher
