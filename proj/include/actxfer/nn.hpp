#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>

#include "actxfer/action_space.hpp"
#include "actxfer/autodiff.hpp"

namespace actxfer {

enum class HeadKind { dueling_q, actor_critic };

std::string to_string(HeadKind kind);
HeadKind parse_head_kind(const std::string& s);

struct ObsDims {
  int height = 60;
  int width = 80;

  friend bool operator==(const ObsDims&, const ObsDims&) = default;
};

/// First convolution geometry. The later trunk layers are fixed.
struct TrunkLayout {
  int conv1_kernel = 8;
  int conv1_stride = 4;
  int flat_features = 0;
};

/// 8x8/4 for the full 60x80 frame; 4x4/2 when the frame is too small for the
/// 8x8/4 -> 4x4/2 -> 3x3/1 chain (e.g. 30x40, which then yields the same
/// 14x19 first feature map as the full frame).
TrunkLayout trunk_layout(ObsDims obs);

struct NetworkSpec {
  HeadKind head = HeadKind::dueling_q;
  ActionSpace actions = ActionSpace::discrete4();
  ObsDims obs{};
  /// When set, the heads are sized for this space and a trainable linear
  /// adapter maps their outputs to `actions`.
  std::optional<ActionSpace> adapter_from;

  /// Action space the heads themselves produce.
  const ActionSpace& head_actions() const { return adapter_from ? *adapter_from : actions; }
};

enum class ParamGroup { trunk, value_hidden, value_out, adv_hidden, adv_out, policy_out, adapter };

std::string to_string(ParamGroup g);
/// Group of a parameter name under the fixed naming scheme.
ParamGroup param_group(const std::string& name);

inline constexpr int kTrunkFeatures = 512;
inline constexpr int kDuelingHidden = 256;
inline constexpr float kLogStdMin = -5.0f;
inline constexpr float kLogStdMax = 2.0f;

template <typename S>
struct QOutput {
  BasicVar<S> q;      ///< [N, |A|]
  BasicVar<S> value;  ///< [N, 1] state value of the dueling head
  BasicVar<S> adv;    ///< [N, |A_head|]
};

template <typename S>
struct AcOutput {
  BasicVar<S> value;                   ///< [N]
  BasicVar<S> policy;                  ///< logits [N, K] or Gaussian mean [N, D]
  std::optional<BasicVar<S>> log_std;  ///< [D], clamped, continuous only
};

// ---------------------------------------------------------------------------
// Graph builders, shared by float training and double gradient checks.

namespace detail {

template <typename S>
void xavier(BasicParamStore<S>& store, const std::string& name, Shape shape, int fan_in, int fan_out,
            std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  BasicTensor<S> w(std::move(shape));
  for (auto& v : w.data()) v = static_cast<S>(dist(rng));
  store.add(name, std::move(w));
}

template <typename S>
void linear_params(BasicParamStore<S>& store, const std::string& prefix, int in, int out, std::mt19937_64& rng) {
  xavier(store, prefix + ".w", Shape{in, out}, in, out, rng);
  store.add(prefix + ".b", BasicTensor<S>(Shape{out}));
}

template <typename S>
BasicVar<S> linear(BasicTape<S>& tape, BasicParamStore<S>& store, const std::string& prefix, BasicVar<S> x) {
  return add_bias(matmul(x, tape.param(store, prefix + ".w")), tape.param(store, prefix + ".b"));
}

template <typename S>
BasicVar<S> conv(BasicTape<S>& tape, BasicParamStore<S>& store, const std::string& prefix, BasicVar<S> x,
                 int stride) {
  return add_bias(conv2d(x, tape.param(store, prefix + ".w"), stride), tape.param(store, prefix + ".b"));
}

}  // namespace detail

/// Output head of the policy/advantage branch, sized for `actions`.
template <typename S>
void init_policy_out(BasicParamStore<S>& store, const NetworkSpec& spec, std::mt19937_64& rng) {
  const ActionSpace& a = spec.head_actions();
  if (spec.head == HeadKind::dueling_q) {
    detail::linear_params(store, "head.adv.out", kDuelingHidden, a.size(), rng);
  } else {
    detail::linear_params(store, "head.policy.out", kTrunkFeatures, a.size(), rng);
    if (!a.is_discrete()) store.add("head.policy.log_std", BasicTensor<S>(Shape{a.size()}));
  }
}

template <typename S>
void init_value_out(BasicParamStore<S>& store, const NetworkSpec& spec, std::mt19937_64& rng) {
  const int in = spec.head == HeadKind::dueling_q ? kDuelingHidden : kTrunkFeatures;
  detail::linear_params(store, "head.value.out", in, 1, rng);
}

/// Zero-plus-noise adapter from the head action space to the target space.
template <typename S>
void init_adapter(BasicParamStore<S>& store, const NetworkSpec& spec, std::mt19937_64& rng) {
  const int from = spec.head_actions().size();
  const int to = spec.actions.size();
  std::normal_distribution<double> noise(0.0, 0.01);
  BasicTensor<S> w(Shape{from, to});
  for (auto& v : w.data()) v = static_cast<S>(noise(rng));
  store.add("adapter.w", std::move(w));
  store.add("adapter.b", BasicTensor<S>(Shape{to}));
  if (!spec.actions.is_discrete()) store.add("adapter.log_std", BasicTensor<S>(Shape{to}));
}

/// Xavier-uniform weights, zero biases, zero log-std.
template <typename S>
void init_params(BasicParamStore<S>& store, const NetworkSpec& spec, std::mt19937_64& rng) {
  const TrunkLayout layout = trunk_layout(spec.obs);
  const int k1 = layout.conv1_kernel;
  detail::xavier(store, "trunk.conv1.w", Shape{32, 1, k1, k1}, 1 * k1 * k1, 32 * k1 * k1, rng);
  store.add("trunk.conv1.b", BasicTensor<S>(Shape{32}));
  detail::xavier(store, "trunk.conv2.w", Shape{64, 32, 4, 4}, 32 * 16, 64 * 16, rng);
  store.add("trunk.conv2.b", BasicTensor<S>(Shape{64}));
  detail::xavier(store, "trunk.conv3.w", Shape{64, 64, 3, 3}, 64 * 9, 64 * 9, rng);
  store.add("trunk.conv3.b", BasicTensor<S>(Shape{64}));
  detail::linear_params(store, "trunk.fc", layout.flat_features, kTrunkFeatures, rng);
  if (spec.head == HeadKind::dueling_q) {
    detail::linear_params(store, "head.value.hidden", kTrunkFeatures, kDuelingHidden, rng);
    init_value_out(store, spec, rng);
    detail::linear_params(store, "head.adv.hidden", kTrunkFeatures, kDuelingHidden, rng);
    init_policy_out(store, spec, rng);
  } else {
    init_value_out(store, spec, rng);
    init_policy_out(store, spec, rng);
  }
  if (spec.adapter_from) init_adapter(store, spec, rng);
}

/// Checks that `obs` is [N, 1, H, W] with the spec's frame size.
template <typename S>
void check_obs_shape(const NetworkSpec& spec, const BasicTensor<S>& obs) {
  const auto& sh = obs.shape();
  if (sh.size() != 4 || sh[1] != 1 || sh[2] != spec.obs.height || sh[3] != spec.obs.width) {
    throw ConfigError("observation batch has shape " + shape_str(sh) + ", expected [N, 1, " +
                      std::to_string(spec.obs.height) + ", " + std::to_string(spec.obs.width) + "]");
  }
}

template <typename S>
BasicVar<S> build_trunk(BasicTape<S>& tape, BasicParamStore<S>& store, const NetworkSpec& spec, BasicVar<S> obs) {
  check_obs_shape(spec, obs.value());
  const TrunkLayout layout = trunk_layout(spec.obs);
  auto h = relu(detail::conv(tape, store, "trunk.conv1", obs, layout.conv1_stride));
  h = relu(detail::conv(tape, store, "trunk.conv2", h, 2));
  h = relu(detail::conv(tape, store, "trunk.conv3", h, 1));
  return relu(detail::linear(tape, store, "trunk.fc", flatten(h)));
}

/// Dueling head on trunk features: Q = V + A - mean(A), then the optional adapter.
template <typename S>
QOutput<S> build_q_head(BasicTape<S>& tape, BasicParamStore<S>& store, const NetworkSpec& spec,
                        BasicVar<S> features) {
  if (spec.head != HeadKind::dueling_q) throw ConfigError("build_q_head on an actor-critic network");
  auto v = detail::linear(tape, store, "head.value.out",
                          relu(detail::linear(tape, store, "head.value.hidden", features)));
  auto a = detail::linear(tape, store, "head.adv.out", relu(detail::linear(tape, store, "head.adv.hidden", features)));
  auto q = dueling_combine(v, a);
  if (spec.adapter_from) q = detail::linear(tape, store, "adapter", q);
  return {q, v, a};
}

template <typename S>
AcOutput<S> build_ac_head(BasicTape<S>& tape, BasicParamStore<S>& store, const NetworkSpec& spec,
                          BasicVar<S> features) {
  if (spec.head != HeadKind::actor_critic) throw ConfigError("build_ac_head on a dueling network");
  const int n = features.value().dim(0);
  AcOutput<S> out;
  out.value = reshape(detail::linear(tape, store, "head.value.out", features), Shape{n});
  out.policy = detail::linear(tape, store, "head.policy.out", features);
  if (spec.adapter_from) {
    out.policy = detail::linear(tape, store, "adapter", out.policy);
    if (!spec.actions.is_discrete())
      out.log_std = clamp(tape.param(store, "adapter.log_std"), S(kLogStdMin), S(kLogStdMax));
  } else if (!spec.actions.is_discrete()) {
    out.log_std = clamp(tape.param(store, "head.policy.log_std"), S(kLogStdMin), S(kLogStdMax));
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Float network: parameters plus the spec they were built for.
class Network {
 public:
  Network(NetworkSpec spec, std::uint64_t seed);
  /// Adopts existing parameters; throws if names or shapes differ from a fresh build.
  Network(NetworkSpec spec, ParamStore params);

  const NetworkSpec& spec() const noexcept { return spec_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  /// obs: [N, 1, H, W] with values in [0, 1].
  QOutput<float> forward_q(Tape& tape, const Tensor& obs);
  AcOutput<float> forward_ac(Tape& tape, const Tensor& obs);

  /// Gradient-free Q values [N, |A|].
  Tensor q_values(const Tensor& obs);

  std::map<ParamGroup, std::size_t> group_sizes() const;

 private:
  NetworkSpec spec_;
  ParamStore params_;
};

/// Expected parameter layout (names and shapes, in order) for a spec.
std::vector<std::pair<std::string, Shape>> param_layout(const NetworkSpec& spec);

}  // namespace actxfer
