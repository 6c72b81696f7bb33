#include <gtest/gtest.h>

#include <random>

#include "actxfer/gradcheck.hpp"
#include "actxfer/nn.hpp"

using namespace actxfer;

namespace {

Tensor random_obs(int n, ObsDims dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor obs(Shape{n, 1, dims.height, dims.width});
  for (auto& v : obs.data()) v = u(rng);
  return obs;
}

Tensor combine(std::vector<float> v, std::vector<float> a) {
  Tape tape(false);
  const int k = static_cast<int>(a.size());
  return dueling_combine(tape.constant(Tensor(Shape{1, 1}, std::move(v))), tape.constant(Tensor(Shape{1, k}, std::move(a))))
      .value();
}

}  // namespace

TEST(DuelingCombineTest, HandExamples) {
  EXPECT_EQ(combine({2.0f}, {1.0f, -1.0f, 0.0f}).storage(), (std::vector<float>{3.0f, 1.0f, 2.0f}));
  EXPECT_EQ(combine({0.0f}, {1.0f, 1.0f, 1.0f}).storage(), (std::vector<float>{0.0f, 0.0f, 0.0f}));
  EXPECT_EQ(combine({1.0f}, {0.5f, -0.5f}).storage(), (std::vector<float>{1.5f, 0.5f}));
}

TEST(TrunkLayoutTest, FullFrameUses8x8Stride4) {
  auto l = trunk_layout({60, 80});
  EXPECT_EQ(l.conv1_kernel, 8);
  EXPECT_EQ(l.conv1_stride, 4);
  EXPECT_EQ(l.flat_features, 1536);
}

TEST(TrunkLayoutTest, HalfFrameFallsBackTo4x4Stride2) {
  auto l = trunk_layout({30, 40});
  EXPECT_EQ(l.conv1_kernel, 4);
  EXPECT_EQ(l.conv1_stride, 2);
  EXPECT_EQ(l.flat_features, 1536);
  EXPECT_THROW(trunk_layout({8, 8}), ConfigError);
}

TEST(ParamGroupsTest, DuelingAdvOutShape) {
  Network net({HeadKind::dueling_q, ActionSpace::discrete4()}, 1);
  EXPECT_EQ(net.params().at("head.adv.out.w").value.shape(), (Shape{256, 4}));
  EXPECT_EQ(net.params().at("head.value.out.w").value.shape(), (Shape{256, 1}));
  EXPECT_EQ(net.params().at("trunk.fc.w").value.shape(), (Shape{1536, 512}));
}

TEST(ParamGroupsTest, GroupsPartitionAllParameters) {
  for (HeadKind head : {HeadKind::dueling_q, HeadKind::actor_critic}) {
    for (auto space : {ActionSpace::discrete4(), ActionSpace::discrete24(), ActionSpace::continuous2()}) {
      if (head == HeadKind::dueling_q && !space.is_discrete()) continue;
      Network net({head, space}, 2);
      std::size_t total = 0;
      for (auto [g, n] : net.group_sizes()) total += n;
      EXPECT_EQ(total, net.params().numel()) << space.name();
    }
  }
}

TEST(ParamGroupsTest, ContinuousActorCriticHead) {
  Network net({HeadKind::actor_critic, ActionSpace::continuous2()}, 3);
  EXPECT_EQ(net.params().at("head.policy.out.w").value.shape(), (Shape{512, 2}));
  EXPECT_EQ(net.params().at("head.policy.log_std").value.shape(), (Shape{2}));
  EXPECT_EQ(net.group_sizes().at(ParamGroup::policy_out), 512u * 2 + 2 + 2);
  EXPECT_EQ(param_group("head.policy.log_std"), ParamGroup::policy_out);
  EXPECT_THROW(param_group("mystery.w"), ConfigError);
}

TEST(ParamGroupsTest, TrunkIdenticalAcrossHeadKinds) {
  Network q({HeadKind::dueling_q, ActionSpace::discrete4()}, 4);
  Network ac({HeadKind::actor_critic, ActionSpace::continuous2()}, 4);
  std::vector<std::pair<std::string, Shape>> tq, tac;
  q.params().for_each([&](const std::string& n, const Parameter<float>& p) {
    if (param_group(n) == ParamGroup::trunk) tq.emplace_back(n, p.value.shape());
  });
  ac.params().for_each([&](const std::string& n, const Parameter<float>& p) {
    if (param_group(n) == ParamGroup::trunk) tac.emplace_back(n, p.value.shape());
  });
  EXPECT_EQ(tq, tac);
  EXPECT_EQ(tq.size(), 8u);
}

TEST(ForwardQTest, DuelingIdentifiabilityOnRandomStates) {
  Network net({HeadKind::dueling_q, ActionSpace::discrete24()}, 5);
  for (int batch = 0; batch < 10; ++batch) {
    Tape tape(false);
    auto out = net.forward_q(tape, random_obs(100, {}, 50 + batch));
    const auto& q = out.q.value();
    const auto& v = out.value.value();
    for (int i = 0; i < 100; ++i) {
      double m = 0;
      for (int a = 0; a < 24; ++a) m += q[static_cast<std::size_t>(i) * 24 + a] - v[static_cast<std::size_t>(i)];
      EXPECT_NEAR(m / 24.0, 0.0, 1e-5);
    }
  }
}

TEST(ForwardQTest, WrongObservationShapeThrows) {
  Network net({HeadKind::dueling_q, ActionSpace::discrete4()}, 6);
  EXPECT_THROW(net.q_values(Tensor(Shape{1, 1, 80, 60})), ConfigError);
  EXPECT_THROW(net.q_values(Tensor(Shape{1, 60, 80})), ConfigError);
}

TEST(ForwardQTest, DeterministicGivenParameters) {
  Network net({HeadKind::dueling_q, ActionSpace::discrete4()}, 7);
  auto obs = random_obs(3, {}, 9);
  EXPECT_TRUE(net.q_values(obs).bit_equal(net.q_values(obs)));
  Network twin({HeadKind::dueling_q, ActionSpace::discrete4()}, 7);
  EXPECT_TRUE(twin.q_values(obs).bit_equal(net.q_values(obs)));
}

TEST(ForwardAcTest, ZeroOutputLayersGiveUniformPolicyAndZeroValue) {
  Network net({HeadKind::actor_critic, ActionSpace::discrete4()}, 8);
  for (auto name : {"head.policy.out.w", "head.policy.out.b", "head.value.out.w", "head.value.out.b"})
    net.params().at(name).value.fill(0.0f);
  Tape tape(false);
  auto out = net.forward_ac(tape, random_obs(4, {}, 10));
  for (float l : out.policy.value().data()) EXPECT_EQ(l, 0.0f);
  for (float v : out.value.value().data()) EXPECT_EQ(v, 0.0f);
  auto p = softmax(out.policy).value();
  for (float x : p.data()) EXPECT_FLOAT_EQ(x, 0.25f);
  EXPECT_FALSE(out.log_std.has_value());
}

TEST(ForwardAcTest, LogStdIsClamped) {
  Network net({HeadKind::actor_critic, ActionSpace::continuous2()}, 9);
  net.params().at("head.policy.log_std").value = Tensor(Shape{2}, {-9.0f, 4.0f});
  Tape tape(false);
  auto out = net.forward_ac(tape, random_obs(1, {}, 11));
  ASSERT_TRUE(out.log_std.has_value());
  EXPECT_EQ(out.log_std->value().storage(), (std::vector<float>{-5.0f, 2.0f}));
  EXPECT_EQ(out.policy.shape(), (Shape{1, 2}));
  EXPECT_EQ(out.value.shape(), (Shape{1}));
}

TEST(NetworkTest, AdoptingMismatchedStoreThrows) {
  Network net({HeadKind::dueling_q, ActionSpace::discrete4()}, 1);
  EXPECT_THROW(Network({HeadKind::dueling_q, ActionSpace::discrete24()}, net.params()), ConfigError);
  EXPECT_NO_THROW(Network({HeadKind::dueling_q, ActionSpace::discrete4()}, net.params()));
}

TEST(NetworkGradCheckTest, FullDuelingGraphInDouble) {
  // Same builders as the float network, instantiated at double precision.
  NetworkSpec spec{HeadKind::dueling_q, ActionSpace::discrete4(), {30, 40}};
  BasicParamStore<double> store;
  std::mt19937_64 rng(12);
  init_params(store, spec, rng);
  BasicTensor<double> obs(Shape{2, 1, 30, 40});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : obs.data()) v = u(rng);
  std::vector<int> actions = {1, 3};
  BasicTensor<double> target(Shape{2}, {0.5, -0.3});
  auto r = gradient_check(
      store,
      [&](BasicTape<double>& t, BasicParamStore<double>& s) {
        auto f = build_trunk(t, s, spec, t.constant(obs));
        return huber(gather(build_q_head(t, s, spec, f).q, actions), t.constant(target));
      },
      1e-4, 150, 3);
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_param;
}
