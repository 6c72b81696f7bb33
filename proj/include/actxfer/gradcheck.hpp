#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "actxfer/autodiff.hpp"

namespace actxfer {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::string worst_param;

  bool passed(double tolerance) const { return max_relative_error < tolerance; }
};

/// Compares tape gradients against central finite differences.
///
/// `loss_fn(tape, store)` must build a scalar loss from parameters in `store`.
/// Up to `max_samples` coordinates of non-frozen parameters are checked (all of
/// them when the store is small enough). The error per coordinate is
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
template <typename S, typename LossFn>
GradCheckResult gradient_check(BasicParamStore<S>& store, LossFn&& loss_fn, double h = 1e-4,
                               std::size_t max_samples = 400, std::uint64_t seed = 7) {
  store.zero_grad();
  {
    BasicTape<S> tape;
    auto loss = loss_fn(tape, store);
    tape.backward(loss);
  }

  std::vector<std::pair<std::string, std::size_t>> coords;
  store.for_each([&](const std::string& name, const Parameter<S>& p) {
    if (p.frozen) return;
    for (std::size_t i = 0; i < p.value.size(); ++i) coords.emplace_back(name, i);
  });
  if (coords.size() > max_samples) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_samples);
  }

  auto eval = [&]() {
    BasicTape<S> tape(false);
    return static_cast<double>(loss_fn(tape, store).value().item());
  };

  GradCheckResult result;
  for (const auto& [name, i] : coords) {
    auto& p = store.at(name);
    const S orig = p.value[i];
    p.value[i] = orig + static_cast<S>(h);
    const double up = eval();
    p.value[i] = orig - static_cast<S>(h);
    const double down = eval();
    p.value[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = static_cast<double>(p.grad[i]);
    const double err = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
    if (err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_param = name + "[" + std::to_string(i) + "]";
    }
    ++result.checked;
  }
  return result;
}

}  // namespace actxfer
