#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mmode/errors.hpp"
#include "mmode/nn.hpp"

namespace mmode::nn {

/// Linear warm-up: factor (e + 1) / warmup for epochs e < warmup, 1 afterwards.
inline double warmup_factor(std::size_t epoch, std::size_t warmup_epochs) {
  if (warmup_epochs == 0 || epoch >= warmup_epochs) return 1.0;
  return static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs);
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Owns first/second moment buffers shaped like the
/// parameters it was constructed with.
template <class T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), T(0));
      v_.emplace_back(p.tensor.numel(), T(0));
    }
  }

  const ParamList<T>& params() const { return params_; }
  std::size_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// One update from the gradients stored on the parameters. A parameter no
  /// backward pass reached is treated as having zero gradient.
  void step(double lr_factor = 1.0) {
    ++step_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& t = params_[i].tensor;
      update(i, t.has_grad() ? t.grad() : std::span<const T>{}, lr_factor);
    }
  }

  /// One update from externally supplied gradients, one buffer per parameter.
  void step(const std::vector<std::vector<T>>& grads, double lr_factor = 1.0) {
    if (grads.size() != params_.size()) throw ShapeError("adam: gradient count mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (grads[i].size() != params_[i].tensor.numel())
        throw ShapeError("adam: gradient shape mismatch for " + params_[i].name);
    ++step_;
    for (std::size_t i = 0; i < params_.size(); ++i) update(i, grads[i], lr_factor);
  }

 private:
  void update(std::size_t i, std::span<const T> g, double lr_factor) {
    auto w = params_[i].tensor.data();
    auto& m = m_[i];
    auto& v = v_[i];
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const double lr = cfg_.lr * lr_factor;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    for (std::size_t k = 0; k < w.size(); ++k) {
      const T gk = g.empty() ? T(0) : g[k];
      m[k] = b1 * m[k] + (T(1) - b1) * gk;
      v[k] = b2 * v[k] + (T(1) - b2) * gk * gk;
      const double mhat = m[k] / bc1, vhat = v[k] / bc2;
      w[k] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }

  ParamList<T> params_;
  AdamConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace mmode::nn
