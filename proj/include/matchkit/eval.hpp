#pragma once

// Evaluation: inlier-count statistics per transform, proxy fidelity, and the
// longest stretch of a route travelled without a successful localization.

#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <span>

#include "matchkit/train.hpp"

namespace matchkit::eval {

using colorspace::TransformKind;

struct MatchStats {
  double mean = 0;
  double sigma = 0;  // population standard deviation
};

inline MatchStats match_stats(std::span<const double> counts) {
  if (counts.empty()) throw Error("match_stats: empty input");
  double s = 0;
  for (double c : counts) s += c;
  const double mean = s / counts.size();
  double v = 0;
  for (double c : counts) v += (c - mean) * (c - mean);
  return {mean, std::sqrt(v / counts.size())};
}

inline double pearson(std::span<const double> pred, std::span<const double> actual) {
  if (pred.size() != actual.size()) throw Error("pearson: length mismatch");
  if (pred.size() < 2) throw Error("pearson: need at least two samples");
  const double mp = match_stats(pred).mean, ma = match_stats(actual).mean;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dx = pred[i] - mp, dy = actual[i] - ma;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0 || syy == 0) throw DegenerateError("pearson: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct RouteTrace {
  std::vector<double> distance;     // cumulative, meters
  std::vector<std::size_t> counts;  // inliers against the map at each vertex

  void check() const {
    if (distance.size() != counts.size()) throw ShapeError("route trace: distance/count length mismatch");
    for (std::size_t i = 1; i < distance.size(); ++i) {
      if (distance[i] < distance[i - 1]) throw Error("route trace: distances must be non-decreasing");
    }
  }
};

// Longest distance between a localized vertex and the next one, where a
// vertex is localized when its count reaches `threshold`. The route start
// counts as localized and a trailing failure run extends to the route end.
inline double dead_reckoning_max(const RouteTrace& trace, std::size_t threshold) {
  trace.check();
  if (trace.distance.empty()) throw Error("dead_reckoning_max: empty route");
  double worst = 0, last_fix = trace.distance.front();
  bool in_gap = false;
  for (std::size_t i = 1; i < trace.counts.size(); ++i) {
    if (trace.counts[i] >= threshold) {
      if (in_gap) worst = std::max(worst, trace.distance[i] - last_fix);
      last_fix = trace.distance[i];
      in_gap = false;
    } else {
      in_gap = true;
    }
  }
  if (in_gap) worst = std::max(worst, trace.distance.back() - last_fix);
  return worst;
}

// ---------------------------------------------------------------------------
// Full evaluation

struct PairResult {
  std::string kind;
  std::size_t pair_id = 0;
  std::size_t actual = 0;
  double predicted = std::numeric_limits<double>::quiet_NaN();  // unscaled; NaN without a proxy
};

struct KindSummary {
  std::string kind;
  MatchStats stats;
  double r = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> dead_reckoning;  // one per threshold
};

struct EvalReport {
  std::vector<std::size_t> thresholds;
  std::vector<PairResult> pairs;
  std::vector<KindSummary> summary;

  void write_pairs_csv(std::ostream& out) const {
    out << "kind,pair_id,inliers_actual,inliers_predicted\n";
    char buf[128];
    for (const auto& p : pairs) {
      std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.9g\n", p.kind.c_str(), p.pair_id, p.actual, p.predicted);
      out << buf;
    }
  }

  void write_summary_csv(std::ostream& out) const {
    out << "kind,mu,sigma,r";
    for (auto t : thresholds) out << ",dr_max_" << t;
    out << '\n';
    char buf[64];
    for (const auto& s : summary) {
      out << s.kind;
      for (double v : {s.stats.mean, s.stats.sigma, s.r}) {
        std::snprintf(buf, sizeof buf, ",%.9g", v);
        out << buf;
      }
      for (double d : s.dead_reckoning) {
        std::snprintf(buf, sizeof buf, ",%.9g", d);
        out << buf;
      }
      out << '\n';
    }
  }

  const KindSummary& find(const std::string& kind) const {
    for (const auto& s : summary) {
      if (s.kind == kind) return s;
    }
    throw Error("eval report: no summary for kind " + kind);
  }
};

// One evaluated transform. `models` may be null for gray and for sumlog with
// fixed parameters; `proxy` may be null (predictions are then NaN).
struct EvalEntry {
  TransformKind kind = TransformKind::gray;
  train::TrainedModels* models = nullptr;
  nets::ProxyModel<float>* proxy = nullptr;
  std::optional<colorspace::TransformParams> fixed_params;  // sumlog without a trained model
};

struct EvalOptions {
  std::vector<std::size_t> thresholds{10, 20, 30};
  std::size_t height = 192;
  double route_spacing = 1.0;  // meters between route vertices
  double target_scale = 0.01;  // proxy outputs are counts times this
  std::uint64_t seed = 0;
  matcher::MatcherConfig matcher;
  colorspace::ColorspaceConfig color;
};

// Route vertices: same-frame pairs (frame offset 0) in manifest order.
inline std::vector<std::size_t> route_pairs(const synth::DatasetManifest& m) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.pairs.size(); ++i) {
    if (m.pairs[i].frame_offset == 0) out.push_back(i);
  }
  return out;
}

inline std::uint64_t eval_seed(std::uint64_t seed, std::uint64_t pair) { return mix_seed(mix_seed(seed, 0xe7a1), pair); }

// Transformed pair for one kind, in evaluation mode.
inline std::pair<GrayImage, GrayImage> transform_pair(const EvalEntry& e, const RgbImage& a, const RgbImage& b,
                                                      const colorspace::ColorspaceConfig& cfg) {
  colorspace::TransformModels<float> view;
  if (e.models) view = e.models->view();
  if (e.fixed_params && !view.theta.defined()) view.fixed_params = e.fixed_params;
  return colorspace::apply_transform(e.kind, a, b, view, cfg);
}

inline EvalReport evaluate(const synth::DatasetManifest& manifest, std::vector<EvalEntry> entries,
                           const EvalOptions& opt) {
  if (manifest.pairs.empty()) throw Error("evaluate: empty manifest");
  const train::PairStore store(manifest, opt.height);
  EvalReport report;
  report.thresholds = opt.thresholds;
  const auto route = route_pairs(manifest);

  for (const auto& e : entries) {
    const std::string kind = colorspace::to_string(e.kind);
    std::vector<GrayImage> t1(store.size()), t2(store.size());
    std::vector<double> predicted(store.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < store.size(); ++i) {
      std::tie(t1[i], t2[i]) = transform_pair(e, *store[i].rgb1, *store[i].rgb2, opt.color);
      if (e.proxy) {
        auto p = e.proxy->forward(image_tensor<float>(t1[i]), image_tensor<float>(t2[i]), ad::NormMode::eval);
        predicted[i] = static_cast<double>(p[0]) / opt.target_scale;
      }
    }
    std::vector<std::size_t> actual(store.size());
    parallel_for(store.size(), [&](std::size_t i) {
      actual[i] = matcher::count_inliers(t1[i], t2[i], opt.matcher, eval_seed(opt.seed, store[i].key)).inlier_count;
    });

    KindSummary s;
    s.kind = kind;
    std::vector<double> a(actual.begin(), actual.end());
    s.stats = match_stats(a);
    if (e.proxy) {
      try {
        s.r = pearson(predicted, a);
      } catch (const DegenerateError&) {
        // constant predictions or counts: correlation undefined, reported as NaN
      }
    }
    if (!route.empty()) {
      RouteTrace trace;
      for (std::size_t v = 0; v < route.size(); ++v) {
        trace.distance.push_back(v * opt.route_spacing);
        trace.counts.push_back(actual[route[v]]);
      }
      for (auto t : opt.thresholds) s.dead_reckoning.push_back(dead_reckoning_max(trace, t));
    } else {
      s.dead_reckoning.assign(opt.thresholds.size(), std::numeric_limits<double>::quiet_NaN());
    }
    for (std::size_t i = 0; i < store.size(); ++i) report.pairs.push_back({kind, i, actual[i], predicted[i]});
    report.summary.push_back(std::move(s));
  }
  return report;
}

}  // namespace matchkit::eval
