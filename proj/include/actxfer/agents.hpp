#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <variant>
#include <vector>

#include "actxfer/env.hpp"
#include "actxfer/nn.hpp"
#include "actxfer/optim.hpp"

namespace actxfer {

// ---------------------------------------------------------------------------
// Exploration

struct EpsilonSchedule {
  double start = 1.0;
  double end = 0.02;
  long anneal_steps = 7500;

  static EpsilonSchedule transfer() { return {1.0, 0.02, 7500}; }
  static EpsilonSchedule source() { return {1.0, 0.05, 20000}; }
};

/// Linear anneal: max(end, start - (start - end) * t / anneal_steps).
double epsilon_at(long t, const EpsilonSchedule& s);

/// Index of the largest value; ties go to the lowest index.
int argmax(std::span<const float> values);

int epsilon_greedy(std::span<const float> q, double epsilon, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Replay

struct Transition {
  Observation obs;
  int action = 0;
  float reward = 0.0f;
  Observation next_obs;
  bool done = false;
};

struct ReplayBatch {
  Tensor obs;       ///< [N, 1, H, W]
  Tensor next_obs;  ///< [N, 1, H, W]
  std::vector<int> actions;
  std::vector<float> rewards;
  std::vector<std::uint8_t> dones;

  int size() const { return static_cast<int>(actions.size()); }
};

/// FIFO ring of 8-bit frames; storage grows on demand up to `capacity`.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, ObsDims dims);

  void push(const Observation& obs, int action, float reward, const Observation& next_obs, bool done);
  void push(const Transition& t) { push(t.obs, t.action, t.reward, t.next_obs, t.done); }

  std::size_t size() const noexcept { return size_; }
  std::size_t capacity() const noexcept { return capacity_; }
  /// i = 0 is the oldest stored transition.
  Transition at(std::size_t i) const;
  /// Uniform sampling with replacement.
  ReplayBatch sample(int n, std::mt19937_64& rng) const;

 private:
  std::size_t slot(std::size_t i) const { return (head_ + capacity_ - size_ + i) % capacity_; }
  void copy_frame(std::vector<std::uint8_t>& dst, std::size_t s, const Observation& o);
  Observation frame(const std::vector<std::uint8_t>& src, std::size_t s) const;

  std::size_t capacity_;
  ObsDims dims_;
  std::size_t frame_size_;
  std::size_t head_ = 0;  ///< next write slot
  std::size_t size_ = 0;
  std::vector<std::uint8_t> obs_, next_obs_;
  std::vector<int> actions_;
  std::vector<float> rewards_;
  std::vector<std::uint8_t> dones_;
};

// ---------------------------------------------------------------------------
// DQN

struct DqnConfig {
  double gamma = 0.95;
  int batch_size = 32;
  long target_sync_interval = 1000;  ///< agent steps
  int train_every = 4;               ///< agent steps
  std::size_t replay_capacity = 50000;
  std::size_t warmup = 1000;
  double max_grad_norm = 10.0;  ///< <= 0 disables clipping
  double target_bound = 1.0;    ///< TD targets clamped to [-bound, bound]; <= 0 disables
  AdamConfig adam{5e-4, 0.9, 0.999, 3e-4};  ///< large epsilon damps Q drift
  EpsilonSchedule epsilon = EpsilonSchedule::transfer();

  void validate() const;
};

/// Double-Q target: y = r if done, else r + gamma * Q_target(s', argmax_a Q_online(s', a)).
std::vector<float> dqn_td_target(const Tensor& q_online_next, const Tensor& q_target_next, std::span<const float> rewards,
                                 std::span<const std::uint8_t> dones, double gamma);

/// Online and target networks plus the optimizer.
class DqnLearner {
 public:
  DqnLearner(Network online, DqnConfig cfg);

  Network& online() noexcept { return online_; }
  const Network& online() const noexcept { return online_; }
  const Network& target() const noexcept { return target_; }
  const DqnConfig& config() const noexcept { return cfg_; }

  /// One Huber-loss gradient step on the batch; frozen parameters stay put.
  float update(const ReplayBatch& batch);
  /// Hard copy online -> target.
  void sync_target();
  long sync_count() const noexcept { return syncs_; }
  long update_count() const noexcept { return updates_; }

  int act(const Observation& obs, double epsilon, std::mt19937_64& rng);

 private:
  Network online_;
  Network target_;
  DqnConfig cfg_;
  Adam adam_;
  long syncs_ = 0;
  long updates_ = 0;
};

struct EpisodeEvent {
  long episode = 0;          ///< 0-based within the run
  int agent_steps = 0;
  int env_steps = 0;
  float reward = 0.0f;
  bool success = false;
  double exploration = 0.0;  ///< epsilon (DQN) or mean policy entropy (PPO)
  long total_agent_steps = 0;
};

using EpisodeCallback = std::function<void(const EpisodeEvent&)>;

class DqnTrainer {
 public:
  DqnTrainer(DqnLearner learner, RayGymEnv env, std::uint64_t seed);

  /// Continues training for `agent_steps` more agent steps. Episodes still
  /// running at the end are carried over to the next call.
  void train(long agent_steps, const EpisodeCallback& on_episode = {});

  DqnLearner& learner() noexcept { return learner_; }
  const ReplayBuffer& replay() const noexcept { return replay_; }
  long agent_steps() const noexcept { return steps_; }
  /// Updates skipped because the buffer was still below warmup.
  long skipped_updates() const noexcept { return skipped_; }

 private:
  DqnLearner learner_;
  RayGymEnv env_;
  ReplayBuffer replay_;
  std::mt19937_64 rng_;
  long steps_ = 0;
  long episodes_ = 0;
  long skipped_ = 0;
  Observation obs_;
  bool in_episode_ = false;
  float episode_reward_ = 0.0f;
};

// ---------------------------------------------------------------------------
// PPO

struct PpoConfig {
  int horizon = 2048;
  int epochs = 4;
  int minibatch = 64;
  double clip = 0.2;
  double lambda = 0.95;
  double gamma = 0.99;
  double entropy_coef = 1e-3;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  AdamConfig adam{2.5e-4};

  void validate() const;
};

struct GaeResult {
  std::vector<float> advantages;
  std::vector<float> returns;
};

/// delta_t = r_t + gamma V(s_{t+1})(1 - done_t) - V(s_t),
/// A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}, returns = A + V.
/// `last_value` bootstraps the state after the final step.
GaeResult gae(std::span<const float> rewards, std::span<const float> values, std::span<const std::uint8_t> dones,
              float last_value, double gamma, double lambda);

/// In place to mean 0, std 1 (population std).
void normalize_advantages(std::span<float> adv);

/// Actions of a minibatch: discrete indices, or raw (unclamped) samples [N, D].
template <typename S>
using PolicyActions = std::variant<std::vector<int>, BasicTensor<S>>;

template <typename S>
struct PpoMinibatch {
  PolicyActions<S> actions;
  std::vector<S> old_log_prob;
  std::vector<S> advantages;
  std::vector<S> returns;
};

template <typename S>
struct PpoLoss {
  BasicVar<S> total;
  S policy = 0;
  S value = 0;
  S entropy = 0;
};

/// Log-probability of the taken actions under the policy head -> [N].
template <typename S>
BasicVar<S> policy_log_prob(const AcOutput<S>& out, const PolicyActions<S>& actions) {
  if (const auto* idx = std::get_if<std::vector<int>>(&actions)) {
    if (out.log_std) throw ConfigError("discrete actions given to a continuous policy");
    return gather(log_softmax(out.policy), *idx);
  }
  if (!out.log_std) throw ConfigError("continuous actions given to a discrete policy");
  return gaussian_log_prob(out.policy, *out.log_std, std::get<BasicTensor<S>>(actions));
}

/// Per-state entropy averaged over the batch (scalar).
template <typename S>
BasicVar<S> policy_entropy(const AcOutput<S>& out) {
  if (!out.log_std) return mean(categorical_entropy(out.policy));
  const S d = static_cast<S>(out.log_std->value().size());
  const S gauss = S(0.5) * d * (S(1) + std::log(S(2) * std::numbers::pi_v<S>));
  return add_scalar(sum(*out.log_std), gauss);
}

/// L = clipped surrogate + value_coef * mse(V, returns) - entropy_coef * entropy.
template <typename S>
PpoLoss<S> ppo_loss(const AcOutput<S>& out, const PpoMinibatch<S>& mb, const PpoConfig& cfg) {
  auto& tape = *out.value.tape;
  auto logp = policy_log_prob(out, mb.actions);
  auto pg = clipped_surrogate(logp, mb.old_log_prob, mb.advantages, static_cast<S>(cfg.clip));
  BasicTensor<S> ret(Shape{static_cast<int>(mb.returns.size())}, mb.returns);
  auto vf = mse(out.value, tape.constant(std::move(ret)));
  auto ent = policy_entropy(out);
  auto total = sub(add(pg, scale(vf, static_cast<S>(cfg.value_coef))), scale(ent, static_cast<S>(cfg.entropy_coef)));
  return {total, pg.value().item(), vf.value().item(), ent.value().item()};
}

/// Action chosen by a policy: an index for discrete spaces, a vector otherwise.
struct PolicyAction {
  int index = -1;
  std::vector<float> raw;      ///< continuous sample before clamping
  std::vector<float> command;  ///< continuous action sent to the env, clamped to [-1, 1]
  float log_prob = 0.0f;
  float value = 0.0f;
};

class PpoLearner {
 public:
  PpoLearner(Network net, PpoConfig cfg);

  Network& net() noexcept { return net_; }
  const Network& net() const noexcept { return net_; }
  const PpoConfig& config() const noexcept { return cfg_; }

  /// stochastic: sample from the policy; otherwise argmax / clamped mean.
  PolicyAction act(const Observation& obs, bool stochastic, std::mt19937_64& rng);
  float value(const Observation& obs);

  /// One gradient step; returns the loss parts.
  PpoLoss<float> update(const Tensor& obs, const PpoMinibatch<float>& mb);

 private:
  Network net_;
  PpoConfig cfg_;
  Adam adam_;
};

class PpoTrainer {
 public:
  PpoTrainer(PpoLearner learner, RayGymEnv env, std::uint64_t seed);

  /// Collects and learns from whole rollouts until at least `agent_steps`
  /// more agent steps were taken.
  void train(long agent_steps, const EpisodeCallback& on_episode = {});

  PpoLearner& learner() noexcept { return learner_; }
  long agent_steps() const noexcept { return steps_; }
  long env_steps() const noexcept { return env_steps_; }

 private:
  void learn(const std::vector<std::uint8_t>& frames, const PolicyActions<float>& actions,
             const std::vector<float>& old_logp, std::vector<float> adv, const std::vector<float>& returns);

  PpoLearner learner_;
  RayGymEnv env_;
  std::mt19937_64 rng_;
  long steps_ = 0;
  long env_steps_ = 0;
  long episodes_ = 0;
  Observation obs_;
  bool in_episode_ = false;
  float episode_reward_ = 0.0f;
  double entropy_ = 0.0;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  int episodes = 0;
  int successes = 0;
  double mean_length = 0.0;  ///< agent steps

  double success_pct() const { return episodes ? 100.0 * successes / episodes : 0.0; }
};

/// Runs `episodes` episodes with `policy` choosing each step's outcome.
EvalResult evaluate(RayGymEnv& env, int episodes, const std::function<StepResult(RayGymEnv&, const Observation&)>& policy);

/// Test-time DQN policy: greedy, or epsilon-greedy with its own rng stream.
EvalResult evaluate_learner(DqnLearner& learner, RayGymEnv& env, int episodes, double epsilon = 0.0,
                            std::uint64_t seed = 0);
/// PPO test policy: argmax / clamped mean.
EvalResult evaluate_learner(PpoLearner& learner, RayGymEnv& env, int episodes);

}  // namespace actxfer
