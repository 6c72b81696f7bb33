#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>

#include "actxfer/param_store.hpp"

namespace actxfer {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias-corrected moments. Frozen entries are skipped entirely,
/// so their values stay bit-identical.
template <typename S>
class BasicAdam {
 public:
  explicit BasicAdam(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const noexcept { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  std::int64_t step_count() const noexcept { return step_; }

  void step(BasicParamStore<S>& store) {
    store.zero_frozen_grads();
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    const S b1 = static_cast<S>(config_.beta1), b2 = static_cast<S>(config_.beta2);
    const S lr = static_cast<S>(config_.learning_rate);
    const S eps = static_cast<S>(config_.epsilon);
    const S inv_bc1 = static_cast<S>(1.0 / bc1), inv_bc2 = static_cast<S>(1.0 / bc2);
    store.for_each([&](const std::string& name, Parameter<S>& p) {
      if (p.frozen) return;
      if (p.grad.shape() != p.value.shape()) {
        throw ConfigError("adam: parameter '" + name + "' has no gradient of shape " + shape_str(p.value.shape()));
      }
      auto& mom = moments_[name];
      if (mom.first.shape() != p.value.shape()) {
        mom.first = BasicTensor<S>(p.value.shape());
        mom.second = BasicTensor<S>(p.value.shape());
      }
      auto v = p.value.data();
      auto g = p.grad.data();
      auto m1 = mom.first.data();
      auto m2 = mom.second.data();
      for (std::size_t i = 0; i < v.size(); ++i) {
        m1[i] = b1 * m1[i] + (S(1) - b1) * g[i];
        m2[i] = b2 * m2[i] + (S(1) - b2) * g[i] * g[i];
        const S mhat = m1[i] * inv_bc1;
        const S vhat = m2[i] * inv_bc2;
        v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    });
  }

  /// Drops moment history (used when a network is re-targeted).
  void reset() {
    moments_.clear();
    step_ = 0;
  }

 private:
  struct Moments {
    BasicTensor<S> first;
    BasicTensor<S> second;
  };

  AdamConfig config_;
  std::int64_t step_ = 0;
  std::unordered_map<std::string, Moments> moments_;
};

using Adam = BasicAdam<float>;

/// Rescales non-frozen gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename S>
double clip_grad_norm(BasicParamStore<S>& store, double max_norm) {
  double sq = 0.0;
  store.for_each([&](const std::string&, const Parameter<S>& p) {
    if (p.frozen) return;
    for (S g : p.grad.data()) sq += static_cast<double>(g) * g;
  });
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const S f = static_cast<S>(max_norm / norm);
    store.for_each([&](const std::string&, Parameter<S>& p) {
      if (p.frozen) return;
      for (S& g : p.grad.data()) g *= f;
    });
  }
  return norm;
}

}  // namespace actxfer
