#pragma once

// RGB-to-grayscale transformations and pairwise rescaling.
//
// Log-channel transforms use the generalized form
//   out = a * log(R + eps) + b * log(G + eps) + c * log(B + eps),
// so the classic constrained invariant (coefficients (-alpha, 1, -beta)) and
// free or encoder-predicted weights share one code path.

#include <array>
#include <optional>
#include <string>
#include <utility>

#include "matchkit/image.hpp"
#include "matchkit/nets.hpp"

namespace matchkit::colorspace {

using ad::Tensor;

struct ColorspaceConfig {
  double eps_log = 1.0 / 255.0;
  double eps_sigma = 1e-5;
  // Wavelengths (nm) associated with the R, G, B channels.
  std::array<double, 3> wavelengths{620.0, 540.0, 460.0};
};

// Mixing weights for (R, G, B) log responses.
struct TransformParams {
  double alpha = 0.0, beta = 0.0, gamma = 0.0;

  std::array<double, 3> array() const { return {alpha, beta, gamma}; }
  double l1() const { return std::abs(alpha) + std::abs(beta) + std::abs(gamma); }
  bool operator==(const TransformParams&) const = default;
};

inline TransformParams l1_normalized(const TransformParams& p) {
  const double n = p.l1();
  if (!(n >= 1e-8)) throw DegenerateError("transform params: L1 norm is zero");
  return {p.alpha / n, p.beta / n, p.gamma / n};
}

enum class TransformKind { gray, sumlog, sumlog_e, mlp, mlp_e };

inline std::string to_string(TransformKind k) {
  switch (k) {
    case TransformKind::gray: return "gray";
    case TransformKind::sumlog: return "sumlog";
    case TransformKind::sumlog_e: return "sumlog-e";
    case TransformKind::mlp: return "mlp";
    case TransformKind::mlp_e: return "mlp-e";
  }
  return "?";
}

inline TransformKind parse_kind(const std::string& s) {
  if (s == "gray") return TransformKind::gray;
  if (s == "sumlog") return TransformKind::sumlog;
  if (s == "sumlog-e") return TransformKind::sumlog_e;
  if (s == "mlp") return TransformKind::mlp;
  if (s == "mlp-e") return TransformKind::mlp_e;
  throw ConfigError("unknown transform kind '" + s + "' (expected gray, sumlog, sumlog-e, mlp, mlp-e)");
}

inline bool uses_encoder(TransformKind k) { return k == TransformKind::sumlog_e || k == TransformKind::mlp_e; }
inline bool uses_mlp(TransformKind k) { return k == TransformKind::mlp || k == TransformKind::mlp_e; }

// ---------------------------------------------------------------------------
// Gray

// ITU-R 601-2 luma. Not rescaled.
inline GrayImage gray(const RgbImage& rgb) {
  GrayImage out(rgb.width, rgb.height);
  const auto r = rgb.plane(0), g = rgb.plane(1), b = rgb.plane(2);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = 0.299f * r[i] + 0.587f * g[i] + 0.114f * b[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Physically motivated weights

struct ConstrainedWeights {
  double alpha, beta;
};

// Solves 1/l2 = alpha/l1 + beta/l3 with beta = 1 - alpha.
inline ConstrainedWeights solve_constrained_weights(double l1, double l2, double l3) {
  if (!(l1 > 0 && l2 > 0 && l3 > 0)) throw ConfigError("constrained weights: wavelengths must be positive");
  if (l1 == l3) throw DegenerateError("constrained weights: lambda1 == lambda3 has no unique solution");
  const bool between = (l1 < l2 && l2 < l3) || (l3 < l2 && l2 < l1);
  if (!between && l2 != l1) throw ConfigError("constrained weights: lambda2 must lie between lambda1 and lambda3");
  const double alpha = (1.0 / l2 - 1.0 / l3) / (1.0 / l1 - 1.0 / l3);
  return {alpha, 1.0 - alpha};
}

// Invariant projection log G - alpha log R - beta log B, L1-normalized.
inline TransformParams constrained_params(const std::array<double, 3>& wavelengths) {
  const auto w = solve_constrained_weights(wavelengths[0], wavelengths[1], wavelengths[2]);
  return l1_normalized({-w.alpha, 1.0, -w.beta});
}

// ---------------------------------------------------------------------------
// Differentiable pieces (batched tensors)

// rgb [N,3,H,W], weights [N,3] or [1,3] -> [N,1,H,W]
template <typename T>
Tensor<T> sumlog_raw(const Tensor<T>& rgb, const Tensor<T>& weights, T eps_log) {
  return ad::weighted_channel_sum(ad::log_offset(rgb, eps_log), weights);
}

// Maps a raw output pair onto [0, 1] with their joint mean and standard
// deviation: 0.5 * clamp((x - mu) / (3 * max(sigma, eps)), -1, 1) + 0.5.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> rescale_pair(const Tensor<T>& raw1, const Tensor<T>& raw2, T eps_sigma) {
  if (raw1.shape() != raw2.shape() || raw1.rank() != 4 || raw1.dim(1) != 1) {
    throw ShapeError("rescale_pair: expected two [N,1,H,W] tensors of equal shape");
  }
  auto z = ad::standardize_per_sample(ad::concat_channels(raw1, raw2), eps_sigma);
  auto y = ad::affine(ad::clamp(ad::affine(z, T(1) / T(3)), T(-1), T(1)), T(0.5), T(0.5));
  return {ad::slice_channels(y, 0, 1), ad::slice_channels(y, 1, 1)};
}

// Models consulted by the learned transforms. Pointers are non-owning.
template <typename T>
struct TransformModels {
  std::optional<TransformParams> fixed_params;  // SumLog
  Tensor<T> theta;                              // trainable SumLog weights [1,3] (overrides fixed_params)
  nets::EncoderModel<T>* encoder = nullptr;     // SumLog-E, MLP-E
  nets::MlpTransform<T>* mlp = nullptr;         // MLP, MLP-E
};

template <typename T>
struct TransformedPair {
  Tensor<T> out1, out2;  // [N,1,H,W] in [0,1]
  Tensor<T> params;      // mixing weights or context used for both images, if any
};

// Applies a learned or log-domain transform to a batch of RGB pairs. Both
// images of pair i use the same parameters. Gray is handled by gray().
template <typename T>
TransformedPair<T> transform_batch(TransformKind kind, const Tensor<T>& rgb1, const Tensor<T>& rgb2,
                                   TransformModels<T>& models, ad::NormMode mode, const ColorspaceConfig& cfg) {
  const T eps_log = static_cast<T>(cfg.eps_log), eps_sigma = static_cast<T>(cfg.eps_sigma);
  Tensor<T> raw1, raw2, params;
  switch (kind) {
    case TransformKind::gray:
      throw ConfigError("transform_batch: gray is not a tensor transform");
    case TransformKind::sumlog: {
      if (models.theta.defined()) {
        params = ad::l1_normalize(models.theta);
      } else if (models.fixed_params) {
        const auto p = models.fixed_params->array();
        params = Tensor<T>::from_values({1, 3}, {static_cast<T>(p[0]), static_cast<T>(p[1]), static_cast<T>(p[2])});
      } else {
        throw ConfigError("sumlog transform requires fixed parameters");
      }
      raw1 = sumlog_raw(rgb1, params, eps_log);
      raw2 = sumlog_raw(rgb2, params, eps_log);
      break;
    }
    case TransformKind::sumlog_e:
      if (!models.encoder) throw ConfigError("sumlog-e transform requires an encoder model");
      params = models.encoder->forward(rgb1, rgb2, mode);
      raw1 = sumlog_raw(rgb1, params, eps_log);
      raw2 = sumlog_raw(rgb2, params, eps_log);
      break;
    case TransformKind::mlp:
      if (!models.mlp) throw ConfigError("mlp transform requires an MLP model");
      raw1 = models.mlp->forward(rgb1, std::nullopt);
      raw2 = models.mlp->forward(rgb2, std::nullopt);
      break;
    case TransformKind::mlp_e:
      if (!models.mlp || !models.encoder) throw ConfigError("mlp-e transform requires encoder and MLP models");
      params = models.encoder->forward(rgb1, rgb2, mode);
      raw1 = models.mlp->forward(rgb1, params);
      raw2 = models.mlp->forward(rgb2, params);
      break;
  }
  auto [o1, o2] = rescale_pair(raw1, raw2, eps_sigma);
  return {o1, o2, params};
}

// ---------------------------------------------------------------------------
// Image-level entry points

inline RawImage sumlog_raw(const RgbImage& rgb, const TransformParams& p, double eps_log) {
  RawImage out(rgb.width, rgb.height);
  const auto r = rgb.plane(0), g = rgb.plane(1), b = rgb.plane(2);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = static_cast<float>(p.alpha * std::log(r[i] + eps_log) + p.beta * std::log(g[i] + eps_log) +
                                     p.gamma * std::log(b[i] + eps_log));
  }
  return out;
}

inline std::pair<GrayImage, GrayImage> rescale_pair(const RawImage& raw1, const RawImage& raw2, double eps_sigma) {
  if (raw1.width != raw2.width || raw1.height != raw2.height) throw ShapeError("rescale_pair: image sizes differ");
  auto t1 = image_tensor<double>(raw1), t2 = image_tensor<double>(raw2);
  auto [o1, o2] = rescale_pair(t1, t2, eps_sigma);
  return {plane_from_tensor(o1, 0), plane_from_tensor(o2, 0)};
}

// Transforms one RGB pair in float with models in evaluation mode.
inline std::pair<GrayImage, GrayImage> apply_transform(TransformKind kind, const RgbImage& a, const RgbImage& b,
                                                       TransformModels<float>& models, const ColorspaceConfig& cfg,
                                                       TransformParams* params_out = nullptr) {
  if (kind == TransformKind::gray) return {gray(a), gray(b)};
  if (a.width != b.width || a.height != b.height) throw ShapeError("apply_transform: pair sizes differ");
  auto r = transform_batch<float>(kind, image_tensor<float>(a), image_tensor<float>(b), models, ad::NormMode::eval, cfg);
  if (params_out && r.params.defined()) {
    *params_out = {r.params[0], r.params[1], r.params[2]};
  }
  return {plane_from_tensor(r.out1, 0), plane_from_tensor(r.out2, 0)};
}

}  // namespace matchkit::colorspace
