#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "actxfer/autodiff.hpp"
#include "actxfer/gradcheck.hpp"
#include "actxfer/optim.hpp"

using namespace actxfer;

namespace {

using DStore = BasicParamStore<double>;
using DTape = BasicTape<double>;
using DTensor = BasicTensor<double>;

DTensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  DTensor t(std::move(shape));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Fixed random input shared across finite-difference evaluations.
struct Fixture {
  explicit Fixture(std::uint64_t seed) : rng(seed) {}
  std::mt19937_64 rng;
  DStore store;
};

}  // namespace

TEST(TensorTest, RejectsDataLengthMismatch) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<float>(5)), ConfigError);
  Tensor t(Shape{2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW(t.reshape({4, 2}), ConfigError);
}

TEST(TensorTest, BitEqualDistinguishesSignedZero) {
  Tensor a(Shape{1}, std::vector<float>{0.0f});
  Tensor b(Shape{1}, std::vector<float>{-0.0f});
  EXPECT_FALSE(a.bit_equal(b));
  EXPECT_TRUE(a.bit_equal(a));
}

TEST(ForwardOpsTest, Conv2dOutputShapeMatchesValidArithmetic) {
  Tape tape(false);
  auto x = tape.constant(Tensor(Shape{1, 1, 80, 60}));
  auto w = tape.constant(Tensor(Shape{32, 1, 8, 8}));
  EXPECT_EQ(conv2d(x, w, 4).shape(), (Shape{1, 32, 19, 14}));
}

TEST(ForwardOpsTest, ConvStackFlattensTo1536) {
  Tape tape(false);
  auto h = tape.constant(Tensor(Shape{1, 1, 80, 60}));
  h = conv2d(h, tape.constant(Tensor(Shape{32, 1, 8, 8})), 4);
  h = conv2d(h, tape.constant(Tensor(Shape{64, 32, 4, 4})), 2);
  EXPECT_EQ(h.shape(), (Shape{1, 64, 8, 6}));
  h = conv2d(h, tape.constant(Tensor(Shape{64, 64, 3, 3})), 1);
  EXPECT_EQ(h.shape(), (Shape{1, 64, 6, 4}));
  EXPECT_EQ(flatten(h).shape(), (Shape{1, 1536}));
}

TEST(ForwardOpsTest, Conv2dMatchesDirectSum) {
  std::mt19937_64 rng(3);
  BasicTape<double> tape(false);
  auto xv = random_tensor({2, 3, 9, 7}, rng);
  auto wv = random_tensor({4, 3, 3, 2}, rng);
  auto y = conv2d(tape.constant(xv), tape.constant(wv), 2).value();
  ASSERT_EQ(y.shape(), (Shape{2, 4, 4, 3}));
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) {
          double acc = 0;
          for (int c = 0; c < 3; ++c)
            for (int a = 0; a < 3; ++a)
              for (int b = 0; b < 2; ++b)
                acc += xv[((n * 3 + c) * 9 + i * 2 + a) * 7 + j * 2 + b] * wv[((o * 3 + c) * 3 + a) * 2 + b];
          EXPECT_NEAR(y[((n * 4 + o) * 4 + i) * 3 + j], acc, 1e-12);
        }
}

TEST(ForwardOpsTest, Relu) {
  Tape tape(false);
  auto y = relu(tape.constant(Tensor(Shape{3}, {-1.0f, 0.0f, 2.0f})));
  EXPECT_EQ(y.value().storage(), (std::vector<float>{0.0f, 0.0f, 2.0f}));
}

TEST(ForwardOpsTest, SoftmaxRowsSumToOne) {
  Tape tape(false);
  auto y = softmax(tape.constant(Tensor(Shape{2, 3}, {1, 2, 3, -5, 0, 5}))).value();
  EXPECT_NEAR(y[0] + y[1] + y[2], 1.0f, 1e-6f);
  EXPECT_NEAR(y[3] + y[4] + y[5], 1.0f, 1e-6f);
  EXPECT_GT(y[2], y[1]);
}

TEST(ForwardOpsTest, HuberIsQuadraticThenLinear) {
  Tape tape(false);
  auto a = tape.constant(Tensor(Shape{2}, {0.5f, 3.0f}));
  auto b = tape.constant(Tensor(Shape{2}, {0.0f, 0.0f}));
  // 0.5*0.25 = 0.125 ; 3 - 0.5 = 2.5 ; mean = 1.3125
  EXPECT_FLOAT_EQ(huber(a, b).value().item(), 1.3125f);
}

TEST(ForwardOpsTest, ShapeMismatchNamesBothShapes) {
  Tape tape(false);
  auto a = tape.constant(Tensor(Shape{2, 3}));
  auto b = tape.constant(Tensor(Shape{4, 5}));
  try {
    matmul(a, b);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(a, b), ConfigError);
  EXPECT_THROW(conv2d(tape.constant(Tensor(Shape{1, 1, 4, 4})), tape.constant(Tensor(Shape{2, 1, 5, 5})), 1),
               ConfigError);
}

TEST(BackwardTest, SumOfProductGivesInput) {
  ParamStore store;
  store.add("w", Tensor(Shape{2}, {1.0f, 2.0f}));
  Tape tape;
  auto loss = sum(mul(tape.param(store, "w"), tape.constant(Tensor(Shape{2}, {3.0f, 4.0f}))));
  tape.backward(loss);
  EXPECT_EQ(store.at("w").grad.storage(), (std::vector<float>{3.0f, 4.0f}));
}

TEST(BackwardTest, MseChainRule) {
  ParamStore store;
  store.add("w", Tensor(Shape{1, 1}, {1.0f}));
  Tape tape;
  auto pred = matmul(tape.param(store, "w"), tape.constant(Tensor(Shape{1, 1}, {2.0f})));
  auto loss = mse(pred, tape.constant(Tensor(Shape{1, 1}, {0.0f})));
  tape.backward(loss);
  EXPECT_FLOAT_EQ(store.at("w").grad[0], 8.0f);
}

TEST(BackwardTest, FrozenParameterGetsZeroGrad) {
  ParamStore store;
  store.add("w", Tensor(Shape{2}, {1.0f, 2.0f}), /*frozen=*/true);
  store.add("v", Tensor(Shape{2}, {1.0f, 1.0f}));
  Tape tape;
  auto loss = sum(mul(tape.param(store, "w"), tape.param(store, "v")));
  tape.backward(loss);
  EXPECT_EQ(store.at("w").grad.storage(), (std::vector<float>{0.0f, 0.0f}));
  EXPECT_EQ(store.at("v").grad.storage(), (std::vector<float>{1.0f, 2.0f}));
}

TEST(BackwardTest, SecondBackwardThrows) {
  ParamStore store;
  store.add("w", Tensor(Shape{1}, {1.0f}));
  Tape tape;
  auto loss = sum(tape.param(store, "w"));
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), ConfigError);
}

TEST(BackwardTest, NonScalarLossThrows) {
  ParamStore store;
  store.add("w", Tensor(Shape{2}));
  Tape tape;
  EXPECT_THROW(tape.backward(tape.param(store, "w")), ConfigError);
}

TEST(BackwardTest, FullyFrozenGraphRecordsNoBackward) {
  ParamStore store;
  store.add("w", Tensor(Shape{2}, {1.0f, 2.0f}), true);
  Tape tape;
  auto loss = sum(relu(tape.param(store, "w")));
  EXPECT_FALSE(tape.requires_grad(loss));
  tape.backward(loss);
  EXPECT_EQ(store.at("w").grad.storage(), (std::vector<float>{0.0f, 0.0f}));
}

// ---------------------------------------------------------------------------
// Finite-difference checks, 5 random nets per layer type.

class GradCheckTest : public ::testing::TestWithParam<int> {};

TEST_P(GradCheckTest, TwoLayerMlp) {
  Fixture f(100 + GetParam());
  f.store.add("w1", random_tensor({5, 7}, f.rng, 0.5));
  f.store.add("b1", random_tensor({7}, f.rng, 0.1));
  f.store.add("w2", random_tensor({7, 3}, f.rng, 0.5));
  f.store.add("b2", random_tensor({3}, f.rng, 0.1));
  auto x = random_tensor({4, 5}, f.rng);
  auto y = random_tensor({4, 3}, f.rng);
  auto r = gradient_check(f.store, [&](DTape& t, DStore& s) {
    auto h = relu(add_bias(matmul(t.constant(x), t.param(s, "w1")), t.param(s, "b1")));
    return mse(add_bias(matmul(h, t.param(s, "w2")), t.param(s, "b2")), t.constant(y));
  });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_param;
  EXPECT_EQ(r.checked, 5u * 7 + 7 + 7 * 3 + 3);
}

TEST_P(GradCheckTest, Conv2dWithBias) {
  Fixture f(200 + GetParam());
  f.store.add("k1", random_tensor({3, 2, 3, 3}, f.rng, 0.4));
  f.store.add("c1", random_tensor({3}, f.rng, 0.1));
  f.store.add("k2", random_tensor({2, 3, 2, 2}, f.rng, 0.4));
  auto x = random_tensor({2, 2, 9, 8}, f.rng);
  auto y = random_tensor({2, 2, 3, 2}, f.rng);
  auto r = gradient_check(f.store, [&](DTape& t, DStore& s) {
    auto h = relu(add_bias(conv2d(t.constant(x), t.param(s, "k1"), 2), t.param(s, "c1")));
    return huber(conv2d(h, t.param(s, "k2"), 1), t.constant(y));
  });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_param;
}

TEST_P(GradCheckTest, ConvInputGradient) {
  // Checks the col2im path by making the input itself a parameter.
  Fixture f(250 + GetParam());
  f.store.add("x", random_tensor({1, 2, 7, 7}, f.rng));
  f.store.add("k", random_tensor({3, 2, 3, 3}, f.rng, 0.4));
  auto y = random_tensor({1, 3, 3, 3}, f.rng);
  auto r = gradient_check(f.store, [&](DTape& t, DStore& s) {
    return mse(conv2d(t.param(s, "x"), t.param(s, "k"), 2), t.constant(y));
  });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_param;
}

TEST_P(GradCheckTest, SoftmaxAndLogSoftmax) {
  Fixture f(300 + GetParam());
  f.store.add("w", random_tensor({4, 5}, f.rng));
  auto x = random_tensor({3, 4}, f.rng);
  auto y = random_tensor({3, 5}, f.rng);
  auto r = gradient_check(f.store, [&](DTape& t, DStore& s) {
    auto z = matmul(t.constant(x), t.param(s, "w"));
    return add(mse(softmax(z), t.constant(y)), mean(mul(log_softmax(z), t.constant(y))));
  });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_param;
}

TEST_P(GradCheckTest, DuelingCombineAndGather) {
  Fixture f(400 + GetParam());
  f.store.add("wv", random_tensor({6, 1}, f.rng));
  f.store.add("wa", random_tensor({6, 4}, f.rng));
  auto x = random_tensor({5, 6}, f.rng);
  std::vector<int> actions = {0, 3, 1, 2, 3};
  auto target = random_tensor({5}, f.rng);
  auto r = gradient_check(f.store, [&](DTape& t, DStore& s) {
    auto xin = t.constant(x);
    auto q = dueling_combine(matmul(xin, t.param(s, "wv")), matmul(xin, t.param(s, "wa")));
    return huber(gather(q, actions), t.constant(target));
  });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_param;
}

TEST_P(GradCheckTest, CategoricalEntropy) {
  Fixture f(500 + GetParam());
  f.store.add("w", random_tensor({3, 6}, f.rng));
  auto x = random_tensor({4, 3}, f.rng);
  auto r = gradient_check(f.store, [&](DTape& t, DStore& s) {
    return mean(categorical_entropy(matmul(t.constant(x), t.param(s, "w"))));
  });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_param;
}

TEST_P(GradCheckTest, GaussianLogProbWithClampedLogStd) {
  Fixture f(600 + GetParam());
  f.store.add("w", random_tensor({3, 2}, f.rng));
  f.store.add("log_std", random_tensor({2}, f.rng, 0.3));
  auto x = random_tensor({5, 3}, f.rng);
  auto act = random_tensor({5, 2}, f.rng);
  auto r = gradient_check(f.store, [&](DTape& t, DStore& s) {
    auto mu = matmul(t.constant(x), t.param(s, "w"));
    return mean(gaussian_log_prob(mu, clamp(t.param(s, "log_std"), -5.0, 2.0), act));
  });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_param;
}

TEST_P(GradCheckTest, ClippedSurrogate) {
  Fixture f(700 + GetParam());
  f.store.add("w", random_tensor({3, 4}, f.rng, 0.3));
  auto x = random_tensor({6, 3}, f.rng);
  std::vector<int> actions = {0, 1, 2, 3, 1, 0};
  std::vector<double> old_logp(6), adv(6);
  std::normal_distribution<double> d(0.0, 1.0);
  for (int i = 0; i < 6; ++i) {
    old_logp[i] = std::log(0.25) + 0.3 * d(f.rng);
    adv[i] = d(f.rng);
  }
  auto r = gradient_check(f.store, [&](DTape& t, DStore& s) {
    auto logp = gather(log_softmax(matmul(t.constant(x), t.param(s, "w"))), actions);
    return clipped_surrogate(logp, old_logp, adv, 0.2);
  });
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_param;
}

INSTANTIATE_TEST_SUITE_P(RandomNets, GradCheckTest, ::testing::Range(0, 5));

TEST(GradCheckIdentityTest, IdentityNetworkHasZeroError) {
  DStore store;
  store.add("x", DTensor(Shape{3}, {0.5, -1.0, 2.0}));
  auto r = gradient_check(store, [](DTape& t, DStore& s) { return sum(t.param(s, "x")); });
  EXPECT_LT(r.max_relative_error, 1e-9);
}

// ---------------------------------------------------------------------------

TEST(AdamTest, ZeroGradientLeavesParamsUnchanged) {
  ParamStore store;
  store.add("w", Tensor(Shape{3}, {1.0f, -2.0f, 3.0f}));
  Tensor before = store.at("w").value;
  Adam adam({0.1});
  adam.step(store);
  EXPECT_TRUE(store.at("w").value.bit_equal(before));
}

TEST(AdamTest, FrozenEntryIsBitIdentical) {
  ParamStore store;
  store.add("w", Tensor(Shape{2}, {0.3f, 0.7f}), true);
  Tensor before = store.at("w").value;
  store.at("w").grad.fill(5.0f);
  Adam adam({0.1});
  adam.step(store);
  EXPECT_TRUE(store.at("w").value.bit_equal(before));
}

TEST(AdamTest, FirstStepMovesByLearningRate) {
  ParamStore store;
  store.add("w", Tensor(Shape{1}, {0.0f}));
  store.at("w").grad[0] = 1.0f;
  Adam adam({0.1, 0.9, 0.999, 1e-8});
  adam.step(store);
  EXPECT_NEAR(store.at("w").value[0], -0.1f, 1e-6f);
  EXPECT_EQ(adam.step_count(), 1);
}

TEST(AdamTest, MissingGradientThrows) {
  ParamStore store;
  store.add("w", Tensor(Shape{2}));
  store.at("w").grad = Tensor();
  Adam adam;
  EXPECT_THROW(adam.step(store), ConfigError);
}

TEST(AdamTest, ClipGradNormRescales) {
  ParamStore store;
  store.add("w", Tensor(Shape{2}));
  store.at("w").grad = Tensor(Shape{2}, {3.0f, 4.0f});
  EXPECT_NEAR(clip_grad_norm(store, 1.0), 5.0, 1e-9);
  EXPECT_NEAR(store.at("w").grad[0], 0.6f, 1e-6f);
  EXPECT_NEAR(store.at("w").grad[1], 0.8f, 1e-6f);
}

TEST(DeterminismTest, SameSeedSameOpsBitIdenticalParams) {
  auto run = [] {
    std::mt19937_64 rng(11);
    std::normal_distribution<float> d(0.0f, 1.0f);
    ParamStore store;
    Tensor w(Shape{1, 4, 3, 3});
    for (auto& v : w.data()) v = d(rng);
    store.add("k", w);
    Tensor x(Shape{2, 4, 8, 8});
    for (auto& v : x.data()) v = d(rng);
    Adam adam({1e-2});
    for (int i = 0; i < 20; ++i) {
      store.zero_grad();
      Tape tape;
      auto loss = mean(relu(conv2d(tape.constant(x), tape.param(store, "k"), 1)));
      tape.backward(loss);
      adam.step(store);
    }
    return store.at("k").value;
  };
  EXPECT_TRUE(run().bit_equal(run()));
}
