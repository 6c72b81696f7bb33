#include "actxfer/agents.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "actxfer/seeding.hpp"

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace actxfer {

namespace {

// Tiny gradients late in training turn into subnormals, which are two orders of
// magnitude slower on x86. The mode is per thread, so every entry point sets it.
void flush_denormals() {
#if defined(__SSE__)
  _mm_setcsr(_mm_getcsr() | 0x8040);  // FTZ | DAZ
#endif
}

}  // namespace

double epsilon_at(long t, const EpsilonSchedule& s) {
  if (t < 0) throw ConfigError("epsilon_at: negative step");
  if (t >= s.anneal_steps) return s.end;
  const double e = s.start - (s.start - s.end) * static_cast<double>(t) / static_cast<double>(s.anneal_steps);
  return std::max(s.end, e);
}

int argmax(std::span<const float> values) {
  if (values.empty()) throw ConfigError("argmax of an empty vector");
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

int epsilon_greedy(std::span<const float> q, double epsilon, std::mt19937_64& rng) {
  if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < epsilon) {
    return std::uniform_int_distribution<int>(0, static_cast<int>(q.size()) - 1)(rng);
  }
  return argmax(q);
}

// ---------------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(std::size_t capacity, ObsDims dims)
    : capacity_(capacity), dims_(dims), frame_size_(static_cast<std::size_t>(dims.height) * dims.width) {
  if (capacity == 0) throw ConfigError("replay capacity must be positive");
}

void ReplayBuffer::copy_frame(std::vector<std::uint8_t>& dst, std::size_t s, const Observation& o) {
  if (o.height != dims_.height || o.width != dims_.width) {
    throw ConfigError("replay: observation " + std::to_string(o.height) + "x" + std::to_string(o.width) +
                      " does not match buffer " + std::to_string(dims_.height) + "x" + std::to_string(dims_.width));
  }
  if (dst.size() < (s + 1) * frame_size_) dst.resize((s + 1) * frame_size_);
  std::copy(o.pixels.begin(), o.pixels.end(), dst.begin() + static_cast<std::ptrdiff_t>(s * frame_size_));
}

Observation ReplayBuffer::frame(const std::vector<std::uint8_t>& src, std::size_t s) const {
  Observation o{dims_.height, dims_.width, {}};
  auto first = src.begin() + static_cast<std::ptrdiff_t>(s * frame_size_);
  o.pixels.assign(first, first + static_cast<std::ptrdiff_t>(frame_size_));
  return o;
}

void ReplayBuffer::push(const Observation& obs, int action, float reward, const Observation& next_obs, bool done) {
  if (reward != 0.0f && reward != 1.0f && reward != -1.0f) {
    throw ConfigError("replay: reward " + std::to_string(reward) + " outside {-1, 0, 1}");
  }
  const std::size_t s = head_;
  copy_frame(obs_, s, obs);
  copy_frame(next_obs_, s, next_obs);
  if (actions_.size() <= s) {
    actions_.resize(s + 1);
    rewards_.resize(s + 1);
    dones_.resize(s + 1);
  }
  actions_[s] = action;
  rewards_[s] = reward;
  dones_[s] = done ? 1 : 0;
  head_ = (head_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
}

Transition ReplayBuffer::at(std::size_t i) const {
  if (i >= size_) throw ConfigError("replay index " + std::to_string(i) + " out of range " + std::to_string(size_));
  const std::size_t s = slot(i);
  return {frame(obs_, s), actions_[s], rewards_[s], frame(next_obs_, s), dones_[s] != 0};
}

ReplayBatch ReplayBuffer::sample(int n, std::mt19937_64& rng) const {
  if (size_ == 0 || n <= 0) throw ConfigError("replay: cannot sample " + std::to_string(n) + " from " + std::to_string(size_));
  ReplayBatch b;
  b.obs = Tensor(Shape{n, 1, dims_.height, dims_.width});
  b.next_obs = Tensor(Shape{n, 1, dims_.height, dims_.width});
  std::uniform_int_distribution<std::size_t> pick(0, size_ - 1);
  auto o = b.obs.data();
  auto no = b.next_obs.data();
  for (int i = 0; i < n; ++i) {
    const std::size_t s = slot(pick(rng));
    const std::size_t off = static_cast<std::size_t>(i) * frame_size_;
    for (std::size_t p = 0; p < frame_size_; ++p) {
      o[off + p] = obs_[s * frame_size_ + p] / 255.0f;
      no[off + p] = next_obs_[s * frame_size_ + p] / 255.0f;
    }
    b.actions.push_back(actions_[s]);
    b.rewards.push_back(rewards_[s]);
    b.dones.push_back(dones_[s]);
  }
  return b;
}

// ---------------------------------------------------------------------------

void DqnConfig::validate() const {
  if (gamma < 0.0 || gamma > 1.0) throw ConfigError("dqn gamma must lie in [0, 1]");
  if (batch_size < 1) throw ConfigError("dqn batch_size must be >= 1");
  if (target_sync_interval < 1) throw ConfigError("dqn target_sync_interval must be >= 1");
  if (train_every < 1) throw ConfigError("dqn train_every must be >= 1");
  if (replay_capacity < 1) throw ConfigError("dqn replay_capacity must be >= 1");
  if (epsilon.end > epsilon.start) throw ConfigError("epsilon end must not exceed start");
  if (!(adam.learning_rate >= 0.0) || !(adam.epsilon > 0.0)) throw ConfigError("dqn adam lr must be >= 0 and epsilon > 0");
}

std::vector<float> dqn_td_target(const Tensor& q_online_next, const Tensor& q_target_next, std::span<const float> rewards,
                                 std::span<const std::uint8_t> dones, double gamma) {
  if (q_online_next.shape() != q_target_next.shape() || q_online_next.rank() != 2) {
    throw ConfigError("dqn_td_target: online " + shape_str(q_online_next.shape()) + " vs target " +
                      shape_str(q_target_next.shape()));
  }
  const int n = q_online_next.dim(0), k = q_online_next.dim(1);
  if (n == 0) throw ConfigError("dqn_td_target: empty batch");
  if (static_cast<int>(rewards.size()) != n || static_cast<int>(dones.size()) != n) {
    throw ConfigError("dqn_td_target: batch of " + std::to_string(n) + " with " + std::to_string(rewards.size()) +
                      " rewards");
  }
  std::vector<float> y(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::size_t row = static_cast<std::size_t>(i) * k;
    if (dones[static_cast<std::size_t>(i)]) {
      y[static_cast<std::size_t>(i)] = rewards[static_cast<std::size_t>(i)];
      continue;
    }
    const int a = argmax(q_online_next.data().subspan(row, static_cast<std::size_t>(k)));
    y[static_cast<std::size_t>(i)] =
        static_cast<float>(rewards[static_cast<std::size_t>(i)] + gamma * q_target_next[row + static_cast<std::size_t>(a)]);
  }
  return y;
}

DqnLearner::DqnLearner(Network online, DqnConfig cfg)
    : online_(std::move(online)), target_(online_), cfg_(cfg), adam_(cfg.adam) {
  cfg_.validate();
  if (online_.spec().head != HeadKind::dueling_q) throw ConfigError("DQN needs a dueling_q network");
  if (!online_.spec().actions.is_discrete()) throw ConfigError("DQN needs a discrete action space");
}

float DqnLearner::update(const ReplayBatch& batch) {
  flush_denormals();
  auto y = dqn_td_target(online_.q_values(batch.next_obs), target_.q_values(batch.next_obs), batch.rewards,
                         batch.dones, cfg_.gamma);
  if (cfg_.target_bound > 0.0) {
    const auto b = static_cast<float>(cfg_.target_bound);
    for (float& v : y) v = std::clamp(v, -b, b);
  }
  Tape tape;
  auto q = online_.forward_q(tape, batch.obs).q;
  auto loss = huber(gather(q, batch.actions), tape.constant(Tensor(Shape{batch.size()}, y)));
  const float value = loss.value().item();
  if (!std::isfinite(value)) throw NumericError("dqn loss is not finite at update " + std::to_string(updates_));
  online_.params().zero_grad();
  tape.backward(loss);
  if (cfg_.max_grad_norm > 0.0) clip_grad_norm(online_.params(), cfg_.max_grad_norm);
  adam_.step(online_.params());
  ++updates_;
  return value;
}

void DqnLearner::sync_target() {
  target_.params().copy_values_from(online_.params());
  ++syncs_;
}

int DqnLearner::act(const Observation& obs, double epsilon, std::mt19937_64& rng) {
  if (epsilon > 0.0 && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < epsilon) {
    return std::uniform_int_distribution<int>(0, online_.spec().actions.size() - 1)(rng);
  }
  return argmax(online_.q_values(obs.tensor()).data());
}

DqnTrainer::DqnTrainer(DqnLearner learner, RayGymEnv env, std::uint64_t seed)
    : learner_(std::move(learner)),
      env_(std::move(env)),
      replay_(learner_.config().replay_capacity, learner_.online().spec().obs),
      rng_(derive_seed(seed, 0xD0)) {
  if (!(env_.actions() == learner_.online().spec().actions)) {
    throw ConfigError("env action space " + env_.actions().name() + " does not match network " +
                      learner_.online().spec().actions.name());
  }
  const ObsDims d = learner_.online().spec().obs;
  if (env_.config().obs_height != d.height || env_.config().obs_width != d.width) {
    throw ConfigError("env observation size does not match network input");
  }
}

void DqnTrainer::train(long agent_steps, const EpisodeCallback& on_episode) {
  flush_denormals();
  const DqnConfig& cfg = learner_.config();
  for (long i = 0; i < agent_steps; ++i) {
    if (!in_episode_) {
      obs_ = env_.reset();
      in_episode_ = true;
      episode_reward_ = 0.0f;
    }
    const double eps = epsilon_at(steps_, cfg.epsilon);
    const int a = learner_.act(obs_, eps, rng_);
    StepResult r = env_.step(a);
    replay_.push(obs_, a, r.reward, r.obs, r.done);
    episode_reward_ += r.reward;
    obs_ = std::move(r.obs);
    ++steps_;

    if (steps_ % cfg.train_every == 0) {
      if (replay_.size() >= cfg.warmup) {
        learner_.update(replay_.sample(cfg.batch_size, rng_));
      } else {
        ++skipped_;
      }
    }
    if (steps_ % cfg.target_sync_interval == 0) learner_.sync_target();

    if (r.done) {
      in_episode_ = false;
      if (on_episode) {
        on_episode({episodes_, r.info.agent_steps, r.info.env_steps, episode_reward_, r.info.success, eps, steps_});
      }
      ++episodes_;
    }
  }
}

// ---------------------------------------------------------------------------

void PpoConfig::validate() const {
  if (horizon < 1 || minibatch < 1 || epochs < 1) throw ConfigError("ppo horizon, minibatch and epochs must be >= 1");
  if (horizon % minibatch != 0) {
    throw ConfigError("ppo horizon " + std::to_string(horizon) + " is not divisible by minibatch " +
                      std::to_string(minibatch));
  }
  if (clip <= 0.0) throw ConfigError("ppo clip must be positive");
  if (gamma < 0.0 || gamma > 1.0 || lambda < 0.0 || lambda > 1.0) throw ConfigError("ppo gamma and lambda in [0, 1]");
}

GaeResult gae(std::span<const float> rewards, std::span<const float> values, std::span<const std::uint8_t> dones,
              float last_value, double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) throw ConfigError("gae: rewards, values and dones differ in length");
  GaeResult out{std::vector<float>(n), std::vector<float>(n)};
  double next_adv = 0.0;
  double next_value = last_value;
  for (std::size_t i = n; i-- > 0;) {
    const double live = dones[i] ? 0.0 : 1.0;
    const double delta = rewards[i] + gamma * next_value * live - values[i];
    next_adv = delta + gamma * lambda * live * next_adv;
    out.advantages[i] = static_cast<float>(next_adv);
    out.returns[i] = static_cast<float>(next_adv + values[i]);
    next_value = values[i];
  }
  return out;
}

void normalize_advantages(std::span<float> adv) {
  if (adv.empty()) return;
  double m = 0.0;
  for (float a : adv) m += a;
  m /= static_cast<double>(adv.size());
  double var = 0.0;
  for (float a : adv) var += (a - m) * (a - m);
  const double sd = std::sqrt(var / static_cast<double>(adv.size()));
  for (float& a : adv) a = static_cast<float>((a - m) / (sd + 1e-8));
}

PpoLearner::PpoLearner(Network net, PpoConfig cfg) : net_(std::move(net)), cfg_(cfg), adam_(cfg.adam) {
  cfg_.validate();
  if (net_.spec().head != HeadKind::actor_critic) throw ConfigError("PPO needs an actor_critic network");
}

PolicyAction PpoLearner::act(const Observation& obs, bool stochastic, std::mt19937_64& rng) {
  Tape tape(false);
  auto out = net_.forward_ac(tape, obs.tensor());
  PolicyAction a;
  a.value = out.value.value()[0];
  const auto& pol = out.policy.value();
  if (!out.log_std) {
    auto logp = log_softmax(out.policy).value();
    if (stochastic) {
      std::vector<double> w(pol.size());
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(static_cast<double>(logp[i]));
      a.index = std::discrete_distribution<int>(w.begin(), w.end())(rng);
    } else {
      a.index = argmax(pol.data());
    }
    a.log_prob = logp[static_cast<std::size_t>(a.index)];
    return a;
  }
  const auto& ls = out.log_std->value();
  std::normal_distribution<double> gauss(0.0, 1.0);
  double lp = 0.0;
  for (std::size_t d = 0; d < pol.size(); ++d) {
    const double sd = std::exp(static_cast<double>(ls[d]));
    const double x = stochastic ? pol[d] + sd * gauss(rng) : pol[d];
    const double z = (x - pol[d]) / sd;
    lp += -0.5 * z * z - ls[d] - 0.5 * std::log(2.0 * std::numbers::pi);
    a.raw.push_back(static_cast<float>(x));
    a.command.push_back(static_cast<float>(std::clamp(x, -1.0, 1.0)));
  }
  a.log_prob = static_cast<float>(lp);
  return a;
}

float PpoLearner::value(const Observation& obs) {
  Tape tape(false);
  return net_.forward_ac(tape, obs.tensor()).value.value()[0];
}

PpoLoss<float> PpoLearner::update(const Tensor& obs, const PpoMinibatch<float>& mb) {
  flush_denormals();
  Tape tape;
  auto out = net_.forward_ac(tape, obs);
  auto loss = ppo_loss(out, mb, cfg_);
  if (!std::isfinite(loss.total.value().item())) throw NumericError("ppo loss is not finite");
  net_.params().zero_grad();
  tape.backward(loss.total);
  if (cfg_.max_grad_norm > 0.0) clip_grad_norm(net_.params(), cfg_.max_grad_norm);
  adam_.step(net_.params());
  return loss;
}

PpoTrainer::PpoTrainer(PpoLearner learner, RayGymEnv env, std::uint64_t seed)
    : learner_(std::move(learner)), env_(std::move(env)), rng_(derive_seed(seed, 0xA0)) {
  if (!(env_.actions() == learner_.net().spec().actions)) {
    throw ConfigError("env action space " + env_.actions().name() + " does not match network " +
                      learner_.net().spec().actions.name());
  }
}

void PpoTrainer::train(long agent_steps, const EpisodeCallback& on_episode) {
  flush_denormals();
  const PpoConfig& cfg = learner_.config();
  const ObsDims dims = learner_.net().spec().obs;
  const std::size_t frame = static_cast<std::size_t>(dims.height) * dims.width;
  const bool discrete = learner_.net().spec().actions.is_discrete();
  const int adim = discrete ? 1 : learner_.net().spec().actions.size();
  const long target = steps_ + agent_steps;

  while (steps_ < target) {
    const int h = cfg.horizon;
    std::vector<std::uint8_t> frames(static_cast<std::size_t>(h) * frame);
    std::vector<int> idx;
    Tensor raw(Shape{discrete ? 0 : h, adim});
    std::vector<float> rewards(static_cast<std::size_t>(h)), values(static_cast<std::size_t>(h)),
        logp(static_cast<std::size_t>(h));
    std::vector<std::uint8_t> dones(static_cast<std::size_t>(h));

    for (int t = 0; t < h; ++t) {
      if (!in_episode_) {
        obs_ = env_.reset();
        in_episode_ = true;
        episode_reward_ = 0.0f;
      }
      std::copy(obs_.pixels.begin(), obs_.pixels.end(), frames.begin() + static_cast<std::ptrdiff_t>(t * frame));
      PolicyAction a = learner_.act(obs_, true, rng_);
      StepResult r = discrete ? env_.step(a.index) : env_.step(std::span<const float>(a.command));
      if (discrete) {
        idx.push_back(a.index);
      } else {
        for (int d = 0; d < adim; ++d) raw[static_cast<std::size_t>(t) * adim + d] = a.raw[static_cast<std::size_t>(d)];
      }
      rewards[static_cast<std::size_t>(t)] = r.reward;
      values[static_cast<std::size_t>(t)] = a.value;
      logp[static_cast<std::size_t>(t)] = a.log_prob;
      dones[static_cast<std::size_t>(t)] = r.done ? 1 : 0;
      episode_reward_ += r.reward;
      obs_ = std::move(r.obs);
      ++steps_;
      env_steps_ += env_.config().frameskip;
      if (r.done) {
        in_episode_ = false;
        if (on_episode) {
          on_episode({episodes_, r.info.agent_steps, r.info.env_steps, episode_reward_, r.info.success, entropy_, steps_});
        }
        ++episodes_;
      }
    }
    const float last_value = in_episode_ ? learner_.value(obs_) : 0.0f;
    GaeResult g = gae(rewards, values, dones, last_value, cfg.gamma, cfg.lambda);
    PolicyActions<float> actions;
    if (discrete) {
      actions = std::move(idx);
    } else {
      actions = std::move(raw);
    }
    learn(frames, actions, logp, std::move(g.advantages), g.returns);
  }
}

void PpoTrainer::learn(const std::vector<std::uint8_t>& frames, const PolicyActions<float>& actions,
                       const std::vector<float>& old_logp, std::vector<float> adv, const std::vector<float>& returns) {
  const PpoConfig& cfg = learner_.config();
  const ObsDims dims = learner_.net().spec().obs;
  const std::size_t frame = static_cast<std::size_t>(dims.height) * dims.width;
  const int h = static_cast<int>(old_logp.size());
  const int m = cfg.minibatch;
  normalize_advantages(adv);

  std::vector<int> order(static_cast<std::size_t>(h));
  std::iota(order.begin(), order.end(), 0);
  double ent = 0.0;
  int count = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng_);
    for (int start = 0; start < h; start += m) {
      Tensor obs(Shape{m, 1, dims.height, dims.width});
      PpoMinibatch<float> mb;
      std::vector<int> idx;
      Tensor raw;
      if (const auto* all = std::get_if<Tensor>(&actions)) raw = Tensor(Shape{m, all->dim(1)});
      for (int j = 0; j < m; ++j) {
        const int s = order[static_cast<std::size_t>(start + j)];
        for (std::size_t p = 0; p < frame; ++p) obs[static_cast<std::size_t>(j) * frame + p] = frames[s * frame + p] / 255.0f;
        if (const auto* all = std::get_if<std::vector<int>>(&actions)) {
          idx.push_back((*all)[static_cast<std::size_t>(s)]);
        } else {
          const auto& src = std::get<Tensor>(actions);
          const int d = src.dim(1);
          for (int k = 0; k < d; ++k) raw[static_cast<std::size_t>(j) * d + k] = src[static_cast<std::size_t>(s) * d + k];
        }
        mb.old_log_prob.push_back(old_logp[static_cast<std::size_t>(s)]);
        mb.advantages.push_back(adv[static_cast<std::size_t>(s)]);
        mb.returns.push_back(returns[static_cast<std::size_t>(s)]);
      }
      if (std::holds_alternative<std::vector<int>>(actions)) {
        mb.actions = std::move(idx);
      } else {
        mb.actions = std::move(raw);
      }
      ent += learner_.update(obs, mb).entropy;
      ++count;
    }
  }
  entropy_ = count ? ent / count : 0.0;
}

// ---------------------------------------------------------------------------

EvalResult evaluate(RayGymEnv& env, int episodes,
                    const std::function<StepResult(RayGymEnv&, const Observation&)>& policy) {
  EvalResult res;
  long steps = 0;
  for (int e = 0; e < episodes; ++e) {
    Observation obs = env.reset();
    for (;;) {
      StepResult r = policy(env, obs);
      if (r.done) {
        res.successes += r.info.success ? 1 : 0;
        steps += r.info.agent_steps;
        break;
      }
      obs = std::move(r.obs);
    }
    ++res.episodes;
  }
  res.mean_length = episodes ? static_cast<double>(steps) / episodes : 0.0;
  return res;
}

EvalResult evaluate_learner(DqnLearner& learner, RayGymEnv& env, int episodes, double epsilon, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return evaluate(env, episodes,
                  [&](RayGymEnv& e, const Observation& o) { return e.step(learner.act(o, epsilon, rng)); });
}

EvalResult evaluate_learner(PpoLearner& learner, RayGymEnv& env, int episodes) {
  std::mt19937_64 unused(0);
  return evaluate(env, episodes, [&](RayGymEnv& e, const Observation& o) {
    PolicyAction a = learner.act(o, false, unused);
    return a.index >= 0 ? e.step(a.index) : e.step(std::span<const float>(a.command));
  });
}

}  // namespace actxfer
