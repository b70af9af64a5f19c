#pragma once

#include <cmath>
#include <vector>

#include "matchkit/tensor.hpp"

namespace matchkit::ad {

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam. Moment buffers are bound to the parameter list on the
// first step; later steps must see the same shapes in the same order.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  const AdamOptions& options() const { return options_; }
  std::size_t step_count() const { return steps_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

  // Updates parameters in place; gradients are left untouched.
  void step(std::vector<Tensor<T>>& params) {
    if (m_.empty() && steps_ == 0) {
      for (const auto& p : params) {
        m_.emplace_back(p.numel(), T(0));
        v_.emplace_back(p.numel(), T(0));
      }
    }
    if (m_.size() != params.size()) throw ShapeError("adam: parameter count changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (m_[i].size() != params[i].numel()) throw ShapeError("adam: parameter shape changed between steps");
    }

    ++steps_;
    const double t = static_cast<double>(steps_);
    const T b1 = static_cast<T>(options_.beta1), b2 = static_cast<T>(options_.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(options_.beta1, t));
    const T c2 = static_cast<T>(1.0 - std::pow(options_.beta2, t));
    const T lr = static_cast<T>(options_.learning_rate), eps = static_cast<T>(options_.epsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto values = params[i].values();
      auto grad = params[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < values.size(); ++j) {
        const T g = grad[j];
        m[j] = b1 * m[j] + (T(1) - b1) * g;
        v[j] = b2 * v[j] + (T(1) - b2) * g * g;
        values[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
      }
    }
  }

 private:
  AdamOptions options_;
  std::size_t steps_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

template <typename T>
void zero_grads(std::vector<Tensor<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace matchkit::ad
