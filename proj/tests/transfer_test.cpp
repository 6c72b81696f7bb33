#include <gtest/gtest.h>

#include "actxfer/agents.hpp"
#include "actxfer/transfer.hpp"
#include "test_util.hpp"

using namespace actxfer;
using actxfer::testing::differing;
using actxfer::testing::kTinyObs;
using actxfer::testing::random_frames;

namespace {

Network dqn_source(std::uint64_t seed = 1) {
  return Network({HeadKind::dueling_q, ActionSpace::discrete4(), kTinyObs}, seed);
}

Network ppo_source(std::uint64_t seed = 2) {
  return Network({HeadKind::actor_critic, ActionSpace::discrete4(), kTinyObs}, seed);
}

ReplayBatch random_batch(int n, int actions, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> a(0, actions - 1), r(-1, 1);
  ReplayBatch b;
  b.obs = random_frames(n, kTinyObs, seed);
  b.next_obs = random_frames(n, kTinyObs, seed + 1);
  for (int i = 0; i < n; ++i) {
    b.actions.push_back(a(rng));
    b.rewards.push_back(static_cast<float>(r(rng)));
    b.dones.push_back(i % 3 == 0);
  }
  return b;
}

/// Trains `net` on random batches; returns the trained online network.
Network train_dqn(Network net, int updates, double lr = 1e-3) {
  DqnConfig cfg;
  cfg.adam.learning_rate = lr;
  cfg.batch_size = 8;
  DqnLearner learner(std::move(net), cfg);
  const int k = learner.online().spec().actions.size();
  for (int i = 0; i < updates; ++i) {
    learner.update(random_batch(8, k, static_cast<std::uint64_t>(i)));
    if (i % 50 == 49) learner.sync_target();
  }
  return learner.online();
}

void expect_frozen_match_source(const Network& trained, const Network& src) {
  trained.params().for_each([&](const std::string& name, const Parameter<float>& p) {
    if (!p.frozen) return;
    ASSERT_TRUE(src.params().contains(name)) << name;
    EXPECT_TRUE(p.value.bit_equal(src.params().at(name).value)) << name;
  });
}

}  // namespace

TEST(FineTuneTest, ExpandsOutputAndLoadsTheRest) {
  const Network src = dqn_source();
  auto [net, plan] = apply_fine_tune(src, ActionSpace::discrete24(), 5);
  EXPECT_EQ(net.params().at("head.adv.out.w").value.shape(), (Shape{256, 24}));
  EXPECT_EQ(net.params().at("head.adv.out.b").value.shape(), (Shape{24}));
  EXPECT_EQ(differing(net.params(), src.params()), (std::vector<std::string>{"head.adv.out.w", "head.adv.out.b"}));
  EXPECT_EQ(trainable_count(net.params()), net.params().numel());
  EXPECT_FALSE(plan.groups.at(ParamGroup::adv_out).loaded);
  EXPECT_TRUE(plan.groups.at(ParamGroup::trunk).loaded);
  EXPECT_TRUE(plan.groups.at(ParamGroup::trunk).trainable);
}

TEST(FineTuneTest, SameSpaceReinitializesOnlyTheOutputLayer) {
  const Network src = dqn_source();
  auto [net, plan] = apply_fine_tune(src, ActionSpace::discrete4(), 6);
  const auto diff = differing(net.params(), src.params());
  EXPECT_EQ(diff, (std::vector<std::string>{"head.adv.out.w"}));  // biases start at zero in both
}

TEST(ReplaceTest, DqnTrainableCountMatchesShapeArithmetic) {
  auto [net, plan] = apply_replace(dqn_source(), ActionSpace::discrete24(), false, 7);
  EXPECT_EQ(trainable_count(net.params()), 256u * 24 + 24 + 256 + 1);
  EXPECT_EQ(trainable_count(net.params()), 6425u);
  EXPECT_FALSE(plan.groups.at(ParamGroup::value_out).loaded);
  EXPECT_TRUE(plan.groups.at(ParamGroup::value_out).trainable);
  EXPECT_FALSE(plan.groups.at(ParamGroup::value_hidden).trainable);
}

TEST(ReplaceTest, PpoToContinuousKeepsTrunkAndValueHidden) {
  const Network src = ppo_source();
  auto [net, plan] = apply_replace(src, ActionSpace::continuous2(), false, 8);
  EXPECT_EQ(net.params().at("head.policy.out.w").value.shape(), (Shape{512, 2}));
  EXPECT_TRUE(net.params().contains("head.policy.log_std"));
  EXPECT_EQ(trainable_count(net.params()), 512u * 2 + 2 + 2 + 512 + 1);
  EXPECT_TRUE(net.params().at("trunk.fc.w").frozen);
}

TEST(ReplaceTest, FrozenParametersByteIdenticalAfterTraining) {
  const Network src = dqn_source(9);
  auto [net, plan] = apply_replace(src, ActionSpace::discrete24(), false, 9);
  const Network trained = train_dqn(net, 500);
  expect_frozen_match_source(trained, src);
  EXPECT_FALSE(trained.params().at("head.adv.out.w").value.bit_equal(net.params().at("head.adv.out.w").value));
}

TEST(ReplaceTest, WithValueLoadsValueOutputWhichThenAdapts) {
  const Network src = dqn_source(10);
  auto [net, plan] = apply_replace(src, ActionSpace::discrete24(), true, 10);
  EXPECT_TRUE(net.params().at("head.value.out.w").value.bit_equal(src.params().at("head.value.out.w").value));
  EXPECT_FALSE(net.params().at("head.value.out.w").frozen);
  EXPECT_EQ(plan.method, TransferMethod::replace_with_value);
  const Network trained = train_dqn(net, 200);
  EXPECT_FALSE(trained.params().at("head.value.out.w").value.bit_equal(src.params().at("head.value.out.w").value));
  expect_frozen_match_source(trained, src);
}

TEST(AdapterTest, TrainableCountsAndFreezing) {
  auto dqn = apply_adapter(dqn_source(), ActionSpace::discrete24(), 11);
  EXPECT_EQ(trainable_count(dqn.net.params()), 4u * 24 + 24);
  EXPECT_EQ(trainable_count(dqn.net.params()), 120u);
  auto ppo = apply_adapter(ppo_source(), ActionSpace::continuous2(), 12);
  EXPECT_EQ(trainable_count(ppo.net.params()), 4u * 2 + 2 + 2);
  for (const auto& [g, gp] : dqn.plan.groups) EXPECT_EQ(gp.trainable, g == ParamGroup::adapter) << to_string(g);

  const Network src = dqn_source(13);
  auto [net, plan] = apply_adapter(src, ActionSpace::discrete24(), 13);
  const Network trained = train_dqn(net, 200);
  expect_frozen_match_source(trained, src);
}

TEST(AdapterTest, InitialQIsLinearMapOfSourceQ) {
  Network src = dqn_source(14);
  auto [net, plan] = apply_adapter(src, ActionSpace::discrete24(), 14);
  const Tensor obs = random_frames(3, kTinyObs, 14);
  const Tensor qs = src.q_values(obs);
  const Tensor qt = net.q_values(obs);
  const Tensor& w = net.params().at("adapter.w").value;
  const Tensor& b = net.params().at("adapter.b").value;
  ASSERT_EQ(qt.shape(), (Shape{3, 24}));
  for (int n = 0; n < 3; ++n) {
    for (int j = 0; j < 24; ++j) {
      double want = b[static_cast<std::size_t>(j)];
      for (int i = 0; i < 4; ++i) want += static_cast<double>(qs[static_cast<std::size_t>(n * 4 + i)]) * w[static_cast<std::size_t>(i * 24 + j)];
      EXPECT_NEAR(qt[static_cast<std::size_t>(n * 24 + j)], want, 1e-5);
    }
  }
  for (float v : w.data()) EXPECT_LT(std::abs(v), 0.06f);  // 6 sigma of N(0, 0.01)
}

TEST(RestrictTest, SubsetsResizeOutput) {
  const Network src = dqn_source();
  auto wad = restrict_actions(src, "WAD", 15);
  EXPECT_EQ(wad.net.params().at("head.adv.out.w").value.shape(), (Shape{256, 3}));
  EXPECT_EQ(wad.net.spec().actions.size(), 3);
  EXPECT_EQ(wad.net.spec().actions.keys(), "WAD");
  auto wd = restrict_actions(src, "WD", 15);
  EXPECT_EQ(wd.net.spec().actions.size(), 2);
  EXPECT_THROW(restrict_actions(src, "", 15), ConfigError);
  EXPECT_THROW(restrict_actions(src, "WX", 15), ConfigError);
}

TEST(SurgeryTest, ZeroLearningRateLeavesNetworkUnchanged) {
  auto [net, plan] = apply_fine_tune(dqn_source(16), ActionSpace::discrete24(), 16);
  const Network trained = train_dqn(net, 50, 0.0);
  EXPECT_TRUE(differing(trained.params(), net.params()).empty());
}

TEST(SurgeryTest, IdempotentForFixedSeed) {
  const Network src = dqn_source(17);
  for (auto m : {TransferMethod::fine_tune, TransferMethod::replace, TransferMethod::replace_with_value,
                 TransferMethod::adapter, TransferMethod::scratch}) {
    auto a = apply_transfer(m, src, ActionSpace::discrete24(), 3);
    auto b = apply_transfer(m, src, ActionSpace::discrete24(), 3);
    EXPECT_TRUE(differing(a.net.params(), b.net.params()).empty()) << to_string(m);
    EXPECT_EQ(a.plan, b.plan);
    a.net.params().for_each([&](const std::string& n, const Parameter<float>& p) {
      EXPECT_EQ(p.frozen, b.net.params().at(n).frozen) << n;
    });
  }
}

TEST(SurgeryTest, RejectsIncompatibleInputs) {
  EXPECT_THROW(apply_replace(dqn_source(), ActionSpace::continuous2(), false, 1), ConfigError);
  EXPECT_THROW(apply_fine_tune(dqn_source(), ActionSpace::continuous2(), 1), ConfigError);
  auto adapted = apply_adapter(dqn_source(), ActionSpace::discrete24(), 1);
  EXPECT_THROW(apply_replace(adapted.net, ActionSpace::discrete4(), false, 1), ConfigError);

  // A source whose layers do not match the target's input size.
  Network big({HeadKind::dueling_q, ActionSpace::discrete4(), ObsDims{30, 40}}, 1);
  NetworkSpec tiny = big.spec();
  tiny.obs = kTinyObs;
  EXPECT_THROW(Network(tiny, big.params()), ConfigError);
}

TEST(SurgeryTest, MethodNamesRoundTrip) {
  for (auto m : {TransferMethod::fine_tune, TransferMethod::replace, TransferMethod::replace_with_value,
                 TransferMethod::adapter, TransferMethod::scratch}) {
    EXPECT_EQ(parse_transfer_method(to_string(m)), m);
  }
  EXPECT_THROW(parse_transfer_method("progressive"), ConfigError);
}
