#pragma once

// Central finite-difference oracle for the autodiff engine. Runs entirely on
// forward values; it never reads an analytic gradient except to compare.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "matchkit/ops.hpp"

namespace matchkit::testing {

using ad::Tensor;
using TensorD = Tensor<double>;

inline TensorD random_tensor(ad::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool rg = true) {
  std::vector<double> v(ad::element_count(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TensorD::from_values(std::move(shape), std::move(v), rg);
}

struct GradCheckResult {
  // ||analytic - numeric|| / max(||analytic||, ||numeric||) over every checked
  // coordinate of every input.
  double max_rel_error = 0.0;
  std::vector<double> per_input;  // the same ratio per input tensor (diagnostic)
  std::size_t checked = 0;
};

// Compares the analytic vector-Jacobian product of f against central finite
// differences with an adaptively refined step. The output is projected onto fixed random weights so the whole
// Jacobian participates. At most `max_entries` coordinates per input are
// perturbed (chosen at random) to bound the cost for large tensors.
inline GradCheckResult gradcheck(const std::function<TensorD()>& f, std::vector<TensorD> inputs, std::uint64_t seed,
                                 double h = 1e-5, std::size_t max_entries = 64) {
  Rng rng(seed);
  TensorD probe_out = f();
  std::vector<double> proj(probe_out.numel());
  for (auto& p : proj) p = rng.uniform(-1.0, 1.0);

  auto loss_value = [&] {
    TensorD out = f();
    double s = 0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += proj[i] * out[i];
    return s;
  };

  for (auto& in : inputs) in.zero_grad();
  TensorD out = f();
  auto loss = ad::sum(ad::mul(out, TensorD::from_values(out.shape(), proj)));
  loss.backward();

  GradCheckResult result;
  double diff_all = 0, a_all = 0, n_all = 0;
  for (auto& in : inputs) {
    std::vector<double> analytic(in.grad().begin(), in.grad().end());
    std::vector<std::size_t> idx(in.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > max_entries) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(max_entries);
    }
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i : idx) {
      auto vals = in.values();
      const double saved = vals[i];
      auto central = [&](double step) {
        vals[i] = saved + step;
        const double up = loss_value();
        vals[i] = saved - step;
        const double down = loss_value();
        vals[i] = saved;
        return (up - down) / (2 * step);
      };
      // Piecewise-linear activations make the loss non-differentiable on a
      // measure-zero set; a step that straddles a kink gives a meaningless
      // difference. Shrink the step until two successive estimates agree,
      // which moves it inside the smooth neighbourhood of the point.
      double step = h, numeric = central(step);
      for (int refine = 0; refine < 6; ++refine) {
        const double finer = central(step / 4);
        const bool agree = std::abs(finer - numeric) <= 1e-7 + 1e-5 * std::abs(finer);
        numeric = finer;
        step /= 4;
        if (agree) break;
      }
      diff2 += (numeric - analytic[i]) * (numeric - analytic[i]);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
      ++result.checked;
    }
    result.per_input.push_back(std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-300}));
    diff_all += diff2;
    a_all += a2;
    n_all += n2;
  }
  // A global ratio: inputs whose true gradient vanishes (a bias feeding
  // batch-statistics normalization) would otherwise compare pure round-off.
  result.max_rel_error = std::sqrt(diff_all) / std::max({std::sqrt(a_all), std::sqrt(n_all), 1e-300});
  return result;
}

}  // namespace matchkit::testing
