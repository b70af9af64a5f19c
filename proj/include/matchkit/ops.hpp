#pragma once

// Differentiable operations. Image tensors are laid out [N, C, H, W].

#include <Eigen/Core>

#include "matchkit/tensor.hpp"

namespace matchkit::ad {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
  require(s.size() == r, std::string(op) + ": expected rank " + std::to_string(r) + ", got " + to_string(s));
}

template <typename T>
bool wants_grad(const Node<T>& n, std::size_t parent) {
  return n.parents[parent]->requires_grad;
}

template <typename T>
std::vector<T>& parent_grad(Node<T>& n, std::size_t parent) {
  return n.parents[parent]->grad_buffer();
}

template <typename T>
const std::vector<T>& parent_value(Node<T>& n, std::size_t parent) {
  return n.parents[parent]->value;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!detail::wants_grad(n, p)) continue;
      auto& g = detail::parent_grad(n, p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    if (detail::wants_grad(n, 0)) {
      auto& g = detail::parent_grad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (detail::wants_grad(n, 1)) {
      auto& g = detail::parent_grad(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    const auto& av = detail::parent_value(n, 0);
    const auto& bv = detail::parent_value(n, 1);
    if (detail::wants_grad(n, 0)) {
      auto& g = detail::parent_grad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (detail::wants_grad(n, 1)) {
      auto& g = detail::parent_grad(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

// scale * x + offset with constant coefficients.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T offset = T(0)) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * x[i] + offset;
  return make_result<T>(x.shape(), std::move(out), {x}, [scale](Node<T>& n) {
    auto& g = detail::parent_grad(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * n.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.values()) s += v;
  return make_result<T>({1}, {s}, {x}, [](Node<T>& n) {
    auto& g = detail::parent_grad(n, 0);
    for (auto& v : g) v += n.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  detail::require(x.numel() > 0, "mean: empty tensor");
  const T inv = T(1) / static_cast<T>(x.numel());
  T s = 0;
  for (T v : x.values()) s += v;
  return make_result<T>({1}, {s * inv}, {x}, [inv](Node<T>& n) {
    auto& g = detail::parent_grad(n, 0);
    for (auto& v : g) v += n.grad[0] * inv;
  });
}

// Mean of squared differences.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require(pred.numel() == target.numel() && pred.numel() > 0,
                  "mse_loss: size mismatch " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
  const T inv = T(1) / static_cast<T>(pred.numel());
  T s = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const T d = pred[i] - target[i];
    s += d * d;
  }
  return make_result<T>({1}, {s * inv}, {pred, target}, [inv](Node<T>& n) {
    const auto& p = detail::parent_value(n, 0);
    const auto& t = detail::parent_value(n, 1);
    const T g0 = n.grad[0] * T(2) * inv;
    if (detail::wants_grad(n, 0)) {
      auto& g = detail::parent_grad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * (p[i] - t[i]);
    }
    if (detail::wants_grad(n, 1)) {
      auto& g = detail::parent_grad(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= g0 * (p[i] - t[i]);
    }
  });
}

// Clamp to [lo, hi]. Gradient passes through inside the closed interval and is
// exactly zero outside it.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(x[i], lo), hi);
  return make_result<T>(x.shape(), std::move(out), {x}, [lo, hi](Node<T>& n) {
    const auto& xv = detail::parent_value(n, 0);
    auto& g = detail::parent_grad(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] >= lo && xv[i] <= hi) g[i] += n.grad[i];
    }
  });
}

// log(x + eps)
template <typename T>
Tensor<T> log_offset(const Tensor<T>& x, T eps) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(x[i] + eps);
  return make_result<T>(x.shape(), std::move(out), {x}, [eps](Node<T>& n) {
    const auto& xv = detail::parent_value(n, 0);
    auto& g = detail::parent_grad(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / (xv[i] + eps);
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(element_count(shape) == x.numel(), "reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  return make_result<T>(std::move(shape), x.vector(), {x}, [](Node<T>& n) {
    auto& g = detail::parent_grad(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Layout operations on [N, C, ...] tensors

namespace detail {

// Concatenate along `axis` (0 = batch, 1 = channel) for same-rank tensors.
template <typename T>
Tensor<T> concat_axis(const std::vector<Tensor<T>>& parts, std::size_t axis, const char* op) {
  require(!parts.empty(), std::string(op) + ": no inputs");
  const Shape& s0 = parts[0].shape();
  require(s0.size() > axis, std::string(op) + ": rank too small");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require(p.rank() == s0.size(), std::string(op) + ": rank mismatch");
    for (std::size_t d = 0; d < s0.size(); ++d) {
      if (d != axis) require(p.dim(d) == s0[d], std::string(op) + ": incompatible shapes " + to_string(s0) + " vs " + to_string(p.shape()));
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

  std::vector<T> out(element_count(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t row = out_shape[axis] * inner;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.values().begin() + o * len, len, out.begin() + o * row + off);
    }
    off += len;
  }
  return make_result<T>(out_shape, std::move(out), parts, [outer, row, offsets](Node<T>& n) {
    for (std::size_t p = 0; p < n.parents.size(); ++p) {
      if (!wants_grad(n, p)) continue;
      auto& g = parent_grad(n, p);
      const std::size_t len = g.size() / outer;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < len; ++i) g[o * len + i] += n.grad[o * row + offsets[p] + i];
      }
    }
  });
}

template <typename T>
Tensor<T> slice_axis(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t count, const char* op) {
  require(x.rank() > axis && begin + count <= x.dim(axis) && count > 0,
          std::string(op) + ": range out of bounds for " + to_string(x.shape()));
  Shape out_shape = x.shape();
  out_shape[axis] = count;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t src_row = x.dim(axis) * inner;
  const std::size_t len = count * inner;
  const std::size_t off = begin * inner;
  std::vector<T> out(outer * len);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.values().begin() + o * src_row + off, len, out.begin() + o * len);
  }
  return make_result<T>(out_shape, std::move(out), {x}, [outer, src_row, len, off](Node<T>& n) {
    auto& g = parent_grad(n, 0);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < len; ++i) g[o * src_row + off + i] += n.grad[o * len + i];
    }
  });
}

}  // namespace detail

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::concat_axis<T>({a, b}, 1, "concat_channels");
}

template <typename T>
Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::concat_axis<T>({a, b}, 0, "concat_batch");
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  return detail::slice_axis(x, 0, begin, count, "slice_batch");
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  return detail::slice_axis(x, 1, begin, count, "slice_channels");
}

// [N, D] -> [N, D, H, W] by repeating each value over the spatial grid.
template <typename T>
Tensor<T> broadcast_spatial(const Tensor<T>& v, std::size_t height, std::size_t width) {
  detail::require_rank(v.shape(), 2, "broadcast_spatial");
  const std::size_t rows = v.dim(0) * v.dim(1), plane = height * width;
  std::vector<T> out(rows * plane);
  for (std::size_t r = 0; r < rows; ++r) std::fill_n(out.begin() + r * plane, plane, v[r]);
  return make_result<T>({v.dim(0), v.dim(1), height, width}, std::move(out), {v}, [rows, plane](Node<T>& n) {
    auto& g = detail::parent_grad(n, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      T s = 0;
      for (std::size_t i = 0; i < plane; ++i) s += n.grad[r * plane + i];
      g[r] += s;
    }
  });
}

// [N, C, H, W] -> [N, C, 1, 1]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t rows = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  const T inv = T(1) / static_cast<T>(plane);
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t i = 0; i < plane; ++i) s += x[r * plane + i];
    out[r] = s * inv;
  }
  return make_result<T>({x.dim(0), x.dim(1), 1, 1}, std::move(out), {x}, [rows, plane, inv](Node<T>& n) {
    auto& g = detail::parent_grad(n, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T gr = n.grad[r] * inv;
      for (std::size_t i = 0; i < plane; ++i) g[r * plane + i] += gr;
    }
  });
}

// out[n, 0, p] = sum_c weights[n, c] * x[n, c, p]. weights may be [1, C] to
// share one mixing vector across the batch.
template <typename T>
Tensor<T> weighted_channel_sum(const Tensor<T>& x, const Tensor<T>& weights) {
  detail::require_rank(x.shape(), 4, "weighted_channel_sum");
  detail::require_rank(weights.shape(), 2, "weighted_channel_sum weights");
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  detail::require(weights.dim(1) == channels && (weights.dim(0) == batch || weights.dim(0) == 1),
                  "weighted_channel_sum: weights " + to_string(weights.shape()) + " for input " + to_string(x.shape()));
  const bool shared = weights.dim(0) == 1 && batch != 1;
  std::vector<T> out(batch * plane, T(0));
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T w = weights[(shared ? 0 : n) * channels + c];
      const T* src = x.values().data() + (n * channels + c) * plane;
      T* dst = out.data() + n * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += w * src[i];
    }
  }
  return make_result<T>({batch, 1, x.dim(2), x.dim(3)}, std::move(out), {x, weights},
                        [batch, channels, plane, shared](Node<T>& n) {
                          const auto& xv = detail::parent_value(n, 0);
                          const auto& wv = detail::parent_value(n, 1);
                          for (std::size_t b = 0; b < batch; ++b) {
                            const T* gout = n.grad.data() + b * plane;
                            for (std::size_t c = 0; c < channels; ++c) {
                              const std::size_t wi = (shared ? 0 : b) * channels + c;
                              if (detail::wants_grad(n, 0)) {
                                T* gx = detail::parent_grad(n, 0).data() + (b * channels + c) * plane;
                                for (std::size_t i = 0; i < plane; ++i) gx[i] += wv[wi] * gout[i];
                              }
                              if (detail::wants_grad(n, 1)) {
                                const T* src = xv.data() + (b * channels + c) * plane;
                                T s = 0;
                                for (std::size_t i = 0; i < plane; ++i) s += src[i] * gout[i];
                                detail::parent_grad(n, 1)[wi] += s;
                              }
                            }
                          }
                        });
}

// Each row of a [N, D] tensor divided by its L1 norm.
template <typename T>
Tensor<T> l1_normalize(const Tensor<T>& x, T eps_norm = T(1e-8)) {
  detail::require_rank(x.shape(), 2, "l1_normalize");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> norms(rows), out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += std::abs(x[r * cols + c]);
    if (!(s >= eps_norm)) throw DegenerateError("l1_normalize: L1 norm below threshold (degenerate encoder output)");
    norms[r] = s;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] / s;
  }
  auto y = out;
  return make_result<T>(x.shape(), std::move(out), {x}, [rows, cols, norms, y](Node<T>& n) {
    const auto& xv = detail::parent_value(n, 0);
    auto& g = detail::parent_grad(n, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      // d(x_c / s)/dx_j = delta_cj / s - x_c sign(x_j) / s^2
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += n.grad[r * cols + c] * y[r * cols + c];
      for (std::size_t j = 0; j < cols; ++j) {
        const T xj = xv[r * cols + j];
        const T sign = xj > 0 ? T(1) : (xj < 0 ? T(-1) : T(0));
        g[r * cols + j] += (n.grad[r * cols + j] - sign * dot) / norms[r];
      }
    }
  });
}

// Standardizes each sample jointly over all of its non-batch elements:
// (x - mean) / max(std, eps_sigma), population std.
template <typename T>
Tensor<T> standardize_per_sample(const Tensor<T>& x, T eps_sigma) {
  detail::require(x.rank() >= 2, "standardize_per_sample: rank < 2");
  const std::size_t batch = x.dim(0), m = x.numel() / batch;
  std::vector<T> out(x.numel()), scale(batch);
  std::vector<char> floored(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = x.values().data() + b * m;
    T mu = 0;
    for (std::size_t i = 0; i < m; ++i) mu += src[i];
    mu /= static_cast<T>(m);
    T var = 0;
    for (std::size_t i = 0; i < m; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<T>(m);
    const T sigma = std::sqrt(var);
    floored[b] = !(sigma > eps_sigma);
    scale[b] = floored[b] ? eps_sigma : sigma;
    for (std::size_t i = 0; i < m; ++i) out[b * m + i] = (src[i] - mu) / scale[b];
  }
  auto z = out;
  return make_result<T>(x.shape(), std::move(out), {x}, [batch, m, scale, floored, z](Node<T>& n) {
    auto& g = detail::parent_grad(n, 0);
    const T inv_m = T(1) / static_cast<T>(m);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* go = n.grad.data() + b * m;
      const T* zb = z.data() + b * m;
      T gsum = 0, gz = 0;
      for (std::size_t i = 0; i < m; ++i) {
        gsum += go[i];
        gz += go[i] * zb[i];
      }
      // With a floored scale the denominator is constant.
      if (floored[b]) gz = 0;
      for (std::size_t i = 0; i < m; ++i) {
        g[b * m + i] += (go[i] - gsum * inv_m - zb[i] * gz * inv_m) / scale[b];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Network layers

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  const long span = static_cast<long>(in) + 2 * static_cast<long>(padding) - static_cast<long>(kernel);
  if (span < 0) return 0;
  return static_cast<std::size_t>(span) / stride + 1;
}

// Cross-correlation of x[N,Cin,H,W] with weight[Cout,Cin,k,k] plus bias[Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  using namespace detail;
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  require(weight.dim(2) == weight.dim(3) && weight.dim(2) >= 1, "conv2d: kernel must be square and non-empty");
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(x.dim(1) == weight.dim(1), "conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                                         std::to_string(weight.dim(1)));
  require(bias.numel() == weight.dim(0), "conv2d: bias size mismatch");
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  const std::size_t ho = conv_output_extent(h, k, stride, padding), wo = conv_output_extent(w, k, stride, padding);
  require(ho >= 1 && wo >= 1, "conv2d: output extent < 1 for input " + to_string(x.shape()));
  const std::size_t kdim = cin * k * k, plane = ho * wo;
  const bool pointwise = k == 1 && stride == 1 && padding == 0;

  // Output columns [lo, hi) of kernel tap kx read inside the input row.
  auto valid_range = [=](std::size_t kx) {
    const long pad = static_cast<long>(padding), st = static_cast<long>(stride);
    const long first = static_cast<long>(kx) >= pad ? 0 : (pad - static_cast<long>(kx) + st - 1) / st;
    const long last_in = static_cast<long>(w) - 1 + pad - static_cast<long>(kx);  // ox * stride <= last_in
    const long end = last_in < 0 ? 0 : last_in / st + 1;
    const long lo = std::min<long>(first, static_cast<long>(wo)), hi = std::clamp<long>(end, lo, static_cast<long>(wo));
    return std::pair<std::size_t, std::size_t>(static_cast<std::size_t>(lo), static_cast<std::size_t>(hi));
  };
  auto im2col = [=](const T* src, T* cols) {
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          T* row = cols + ((c * k + ky) * k + kx) * plane;
          const auto [lo, hi] = valid_range(kx);
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
            T* dst = row + oy * wo;
            if (iy < 0 || iy >= static_cast<long>(h)) {
              std::fill_n(dst, wo, T(0));
              continue;
            }
            const T* line = src + (c * h + static_cast<std::size_t>(iy)) * w + kx - padding;
            std::fill_n(dst, lo, T(0));
            if (stride == 1) {
              std::copy(line + lo, line + hi, dst + lo);
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = line[ox * stride];
            }
            std::fill(dst + hi, dst + wo, T(0));
          }
        }
      }
    }
  };
  auto col2im_add = [=](const T* cols, T* dx) {
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T* row = cols + ((c * k + ky) * k + kx) * plane;
          const auto [lo, hi] = valid_range(kx);
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            T* line = dx + (c * h + static_cast<std::size_t>(iy)) * w + kx - padding;
            const T* srow = row + oy * wo;
            for (std::size_t ox = lo; ox < hi; ++ox) line[ox * stride] += srow[ox];
          }
        }
      }
    }
  };
  // Column scratch is reused per thread; it is fully overwritten before use.
  auto scratch_buffer = [](std::size_t size) -> T* {
    thread_local std::vector<T> buf;
    if (buf.size() < size) buf.resize(size);
    return buf.data();
  };

  std::vector<T> out(batch * cout * plane);
  const T* xv = x.values().data();
  const T* bv = bias.values().data();
  ConstMapMat<T> wmat(weight.values().data(), cout, kdim);
  parallel_for(batch, [&](std::size_t n) {
    const T* src = xv + n * cin * h * w;
    if (pointwise) {
      // Every pixel sees the same fused multiply-add sequence, so equal
      // inputs give bitwise-equal outputs wherever they sit in the image.
      const T* wv = weight.values().data();
      for (std::size_t co = 0; co < cout; ++co) {
        T* dst = out.data() + (n * cout + co) * plane;
        std::fill_n(dst, plane, bv[co]);
        for (std::size_t c = 0; c < cin; ++c) {
          const T wc = wv[co * cin + c];
          const T* s = src + c * plane;
          for (std::size_t i = 0; i < plane; ++i) dst[i] = std::fma(wc, s[i], dst[i]);
        }
      }
      return;
    }
    T* cols = scratch_buffer(kdim * plane);
    im2col(src, cols);
    MapMat<T> y(out.data() + n * cout * plane, cout, plane);
    y.noalias() = wmat * ConstMapMat<T>(cols, kdim, plane);
    for (std::size_t co = 0; co < cout; ++co) y.row(co).array() += bv[co];
  });

  return make_result<T>(
      {batch, cout, ho, wo}, std::move(out), {x, weight, bias},
      [=](Node<T>& node) {
        const bool gx = wants_grad(node, 0), gw = wants_grad(node, 1), gb = wants_grad(node, 2);
        const T* src_all = parent_value(node, 0).data();
        ConstMapMat<T> wm(parent_value(node, 1).data(), cout, kdim);
        std::vector<std::vector<T>> dw_parts(gw ? batch : 0);
        T* dx_all = gx ? parent_grad(node, 0).data() : nullptr;
        parallel_for(batch, [&](std::size_t n) {
          ConstMapMat<T> dy(node.grad.data() + n * cout * plane, cout, plane);
          const T* src = src_all + n * cin * h * w;
          const T* cols = src;
          if (gw) {
            if (!pointwise) {
              T* scratch = scratch_buffer(kdim * plane);
              im2col(src, scratch);
              cols = scratch;
            }
            dw_parts[n].resize(cout * kdim);
            MapMat<T>(dw_parts[n].data(), cout, kdim).noalias() = dy * ConstMapMat<T>(cols, kdim, plane).transpose();
          }
          if (gx) {
            T* dx = dx_all + n * cin * h * w;
            if (pointwise) {
              MapMat<T>(dx, kdim, plane).noalias() += wm.transpose() * dy;
              return;
            }
            T* dcols = scratch_buffer(kdim * plane);
            MapMat<T>(dcols, kdim, plane).noalias() = wm.transpose() * dy;
            col2im_add(dcols, dx);
          }
        });
        if (gw) {
          auto& dw = parent_grad(node, 1);
          for (std::size_t n = 0; n < batch; ++n) {
            for (std::size_t i = 0; i < dw.size(); ++i) dw[i] += dw_parts[n][i];
          }
        }
        if (gb) {
          auto& db = parent_grad(node, 2);
          for (std::size_t n = 0; n < batch; ++n) {
            for (std::size_t co = 0; co < cout; ++co) {
              const T* g = node.grad.data() + (n * cout + co) * plane;
              T s = 0;
              for (std::size_t i = 0; i < plane; ++i) s += g[i];
              db[co] += s;
            }
          }
        }
      });
}

// Affine projection of [N, C, 1, 1] (or [N, C]) features, computed as a 1x1
// convolution. Returns [N, Cout, 1, 1].
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() == 2) return conv2d(reshape(x, {x.dim(0), x.dim(1), 1, 1}), weight, bias, 1, 0);
  detail::require(x.rank() == 4 && x.dim(2) == 1 && x.dim(3) == 1,
                  "fully_connected: expected [N,C,1,1] input, got " + to_string(x.shape()));
  return conv2d(x, weight, bias, 1, 0);
}

// Per-channel parametric ReLU: x if x > 0 else slope[c] * x.
template <typename T>
Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& slope) {
  detail::require(x.rank() >= 2, "prelu: rank < 2");
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.numel() / (batch * channels);
  detail::require(slope.numel() == channels,
                  "prelu: " + std::to_string(slope.numel()) + " slopes for " + std::to_string(channels) + " channels");
  std::vector<T> out(x.numel());
  const T* xp = x.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * plane;
      const T a = slope[c];
      const T* src = xp + base;
      T* dst = out.data() + base;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] > 0 ? src[i] : a * src[i];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x, slope}, [batch, channels, plane](Node<T>& n) {
    const auto& xv = detail::parent_value(n, 0);
    const auto& av = detail::parent_value(n, 1);
    const bool gx = detail::wants_grad(n, 0), ga = detail::wants_grad(n, 1);
    T* dx = gx ? detail::parent_grad(n, 0).data() : nullptr;
    const T* gy = n.grad.data();
    for (std::size_t c = 0; c < channels; ++c) {
      T sa = 0;
      const T a = av[c];
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = (b * channels + c) * plane;
        const T* v = xv.data() + base;
        const T* g = gy + base;
        if (gx) {
          T* d = dx + base;
          for (std::size_t i = 0; i < plane; ++i) d[i] += v[i] > 0 ? g[i] : g[i] * a;
        }
        if (ga) {
          for (std::size_t i = 0; i < plane; ++i) sa += v[i] > 0 ? T(0) : g[i] * v[i];
        }
      }
      if (ga) detail::parent_grad(n, 1)[c] += sa;
    }
  });
}

enum class NormMode {
  train,         // batch statistics, running statistics updated
  train_frozen,  // batch statistics, running statistics untouched
  eval,          // running statistics
};

// Running statistics for batch normalization. Not trained by gradient.
template <typename T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;
  T momentum = T(0.1);

  static RunningStats create(std::size_t channels) {
    return {Tensor<T>::zeros({channels}), Tensor<T>::full({channels}, T(1)), T(0.1)};
  }
};

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, RunningStats<T>& stats,
                     NormMode mode, T eps = T(1e-5)) {
  detail::require_rank(x.shape(), 4, "batch_norm");
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  detail::require(gain.numel() == channels && shift.numel() == channels && stats.mean.numel() == channels,
                  "batch_norm: parameter size mismatch");
  const std::size_t m = batch * plane;
  const bool batch_stats = mode != NormMode::eval;
  if (batch_stats && m < 2) {
    throw ShapeError("batch_norm: train mode needs at least 2 values per channel (variance undefined)");
  }

  std::vector<T> mu(channels), inv_std(channels), out(x.numel());
  for (std::size_t c = 0; c < channels; ++c) {
    if (batch_stats) {
      T s = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* src = x.values().data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += src[i];
      }
      const T mean_c = s / static_cast<T>(m);
      T v = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* src = x.values().data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) v += (src[i] - mean_c) * (src[i] - mean_c);
      }
      const T var_c = v / static_cast<T>(m);
      mu[c] = mean_c;
      inv_std[c] = T(1) / std::sqrt(var_c + eps);
      if (mode == NormMode::train) {
        auto rm = stats.mean.values();
        auto rv = stats.var.values();
        const T unbiased = v / static_cast<T>(m - 1);
        rm[c] = (T(1) - stats.momentum) * rm[c] + stats.momentum * mean_c;
        rv[c] = (T(1) - stats.momentum) * rv[c] + stats.momentum * unbiased;
      }
    } else {
      mu[c] = stats.mean[c];
      inv_std[c] = T(1) / std::sqrt(stats.var[c] + eps);
    }
    const T scale = gain[c] * inv_std[c], offset = shift[c] - scale * mu[c];
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels + c) * plane;
      const T* src = x.values().data() + base;
      T* dst = out.data() + base;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = scale * src[i] + offset;
    }
  }

  return make_result<T>(x.shape(), std::move(out), {x, gain, shift},
                        [batch, channels, plane, m, mu, inv_std, batch_stats](Node<T>& n) {
                          const auto& xv = detail::parent_value(n, 0);
                          const auto& gv = detail::parent_value(n, 1);
                          const bool gx = detail::wants_grad(n, 0), gg = detail::wants_grad(n, 1),
                                     gs = detail::wants_grad(n, 2);
                          const T* gy = n.grad.data();
                          for (std::size_t c = 0; c < channels; ++c) {
                            const T mc = mu[c], sc = inv_std[c];
                            T sum_g = 0, sum_gxhat = 0;
                            for (std::size_t b = 0; b < batch; ++b) {
                              const std::size_t base = (b * channels + c) * plane;
                              const T* v = xv.data() + base;
                              const T* g = gy + base;
                              for (std::size_t i = 0; i < plane; ++i) {
                                sum_g += g[i];
                                sum_gxhat += g[i] * ((v[i] - mc) * sc);
                              }
                            }
                            if (gg) detail::parent_grad(n, 1)[c] += sum_gxhat;
                            if (gs) detail::parent_grad(n, 2)[c] += sum_g;
                            if (!gx) continue;
                            T* dx = detail::parent_grad(n, 0).data();
                            const T k = gv[c] * sc;
                            const T inv_m = T(1) / static_cast<T>(m);
                            const T mean_g = sum_g * inv_m, mean_gx = sum_gxhat * inv_m;
                            for (std::size_t b = 0; b < batch; ++b) {
                              const std::size_t base = (b * channels + c) * plane;
                              const T* v = xv.data() + base;
                              const T* g = gy + base;
                              T* d = dx + base;
                              if (batch_stats) {
                                for (std::size_t i = 0; i < plane; ++i) d[i] += k * (g[i] - mean_g - (v[i] - mc) * sc * mean_gx);
                              } else {
                                for (std::size_t i = 0; i < plane; ++i) d[i] += k * g[i];
                              }
                            }
                          }
                        });
}

}  // namespace matchkit::ad
