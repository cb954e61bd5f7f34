#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "sqz/ops.hpp"
#include "sqz/optim.hpp"
#include "sqz/rng.hpp"

namespace sqz {
namespace {

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

TEST(Tensor, SizeIsProductOfShape) {
  Tensor t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_THROW(Tensor(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<float>(3)), ShapeError);
  EXPECT_THROW((void)t.reshaped({5, 5}), ShapeError);
}

TEST(Conv2d, IdentityPointwise) {
  const auto x = oracle::random_tensor({2, 4, 5, 5}, 1);
  Tensor64 w(Shape{4, 4, 1, 1});
  for (std::size_t f = 0; f < 4; ++f) w.at(f, f, 0, 0) = 1.0;
  Tape<double> tape;
  auto y = conv2d(tape.constant(x), tape.constant(w), tape.constant(Tensor64(Shape{4})), {});
  EXPECT_EQ(y.value(), x);
}

TEST(Conv2d, StrideOnePadOneKeepsSize) {
  Tape<float> tape;
  auto y = conv2d(tape.constant(Tensor(Shape{1, 3, 113, 113})), tape.constant(Tensor(Shape{2, 3, 3, 3})),
                  tape.constant(Tensor(Shape{2})), {1, 1, "conv1"});
  EXPECT_EQ(y.shape(), (Shape{1, 2, 113, 113}));
}

TEST(Conv2d, MatchesSlidingWindowOracle) {
  const auto x = oracle::random_tensor({1, 3, 4, 4}, 2);
  const auto w = oracle::random_tensor({2, 3, 3, 3}, 3);
  const auto b = oracle::random_tensor({2}, 4);
  Tape<float> tape;
  auto y = conv2d(tape.constant(x.cast<float>()), tape.constant(w.cast<float>()), tape.constant(b.cast<float>()), {});
  EXPECT_EQ(y.shape(), (Shape{1, 2, 2, 2}));
  EXPECT_LE(max_abs_diff(y.value().cast<double>(), oracle::conv2d(x, w, b, 1, 0)), 1e-6);
}

TEST(Conv2d, RandomConfigsMatchOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    const int k = pick(1, 3), stride = pick(1, 2), pad = pick(0, 1);
    const std::size_t n = pick(1, 2), c = pick(1, 5), f = pick(1, 5), h = pick(k, 9), wd = pick(k, 9);
    const auto x = oracle::random_tensor({n, c, h, wd}, rng());
    const auto w = oracle::random_tensor({f, c, std::size_t(k), std::size_t(k)}, rng());
    const auto b = oracle::random_tensor({f}, rng());
    Tape<float> tape;
    auto y = conv2d(tape.constant(x.cast<float>()), tape.constant(w.cast<float>()), tape.constant(b.cast<float>()),
                    {stride, pad, "t"});
    EXPECT_LE(max_abs_diff(y.value().cast<double>(), oracle::conv2d(x, w, b, stride, pad)), 1e-5) << trial;
  }
}

TEST(Conv2d, Linearity) {
  const auto x = oracle::random_tensor({2, 3, 6, 6}, 6).cast<float>();
  const auto z = oracle::random_tensor({2, 3, 6, 6}, 7).cast<float>();
  const auto w = oracle::random_tensor({4, 3, 3, 3}, 8).cast<float>();
  const float a = 0.7f, b = -1.3f;
  Tensor mix(x.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * z[i];
  Tape<float> tape;
  const Tensor bias(Shape{4});
  auto run = [&](const Tensor& in) {
    return conv2d(tape.constant(in), tape.constant(w), tape.constant(bias), {1, 1, "t"}).value();
  };
  const Tensor yx = run(x), yz = run(z), ym = run(mix);
  double m = 0;
  for (std::size_t i = 0; i < ym.size(); ++i) m = std::max(m, std::abs(double(ym[i]) - (a * yx[i] + b * yz[i])));
  EXPECT_LE(m, 1e-5);
}

TEST(Conv2d, ChannelMismatchNamesLayer) {
  Tape<float> tape;
  try {
    conv2d(tape.constant(Tensor(Shape{1, 3, 4, 4})), tape.constant(Tensor(Shape{2, 5, 1, 1})),
           tape.constant(Tensor(Shape{2})), {1, 0, "fire7/expand3x3"});
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("fire7/expand3x3"), std::string::npos);
    EXPECT_NE(msg.find('3'), std::string::npos);
    EXPECT_NE(msg.find('5'), std::string::npos);
  }
}

TEST(BatchNorm, EvalIdentity) {
  const auto x = oracle::random_tensor({2, 3, 2, 2}, 9);
  Tensor64 rm(Shape{3}), rv(Shape{3}, 1.0);
  Tape<double> tape;
  auto y = batch_norm(tape.constant(x), tape.constant(Tensor64(Shape{3}, 1.0)), tape.constant(Tensor64(Shape{3})), rm,
                      rv, {});
  EXPECT_LE(max_abs_diff(y.value(), x), 1e-5);
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  Tensor64 x(Shape{4, 2, 2, 2}, 3.5);
  Tensor64 rm(Shape{2}), rv(Shape{2}, 1.0);
  Tensor64 beta(Shape{2}, std::vector<double>{0.25, -1.0});
  Tape<double> tape;
  BatchNormOptions o;
  o.mode = NormMode::kTrain;
  auto y = batch_norm(tape.constant(x), tape.constant(Tensor64(Shape{2}, 2.0)), tape.constant(beta), rm, rv, o);
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        EXPECT_DOUBLE_EQ(y.value().at(n, 0, i, j), 0.25);
        EXPECT_DOUBLE_EQ(y.value().at(n, 1, i, j), -1.0);
      }
}

TEST(BatchNorm, TrainMatchesStatisticsOracle) {
  const auto x = oracle::random_tensor({4, 3, 2, 2}, 10);
  const auto g = oracle::random_tensor({3}, 11, 0.5, 1.5);
  const auto b = oracle::random_tensor({3}, 12);
  Tensor64 rm(Shape{3}), rv(Shape{3}, 1.0);
  Tape<double> tape;
  BatchNormOptions o;
  o.mode = NormMode::kTrain;
  auto y = batch_norm(tape.constant(x), tape.constant(g), tape.constant(b), rm, rv, o);
  EXPECT_LE(max_abs_diff(y.value(), oracle::batch_norm_train(x, g, b, 1e-5)), 1e-6);
  // Running statistics moved by momentum 0.1 towards the batch statistics.
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 4; ++i) mean += x[(n * 3 + c) * 4 + i];
    mean /= 16;
    EXPECT_NEAR(rm[c], 0.1 * mean, 1e-12);
  }
}

TEST(BatchNorm, ChannelMismatchThrows) {
  Tensor64 rm(Shape{2}), rv(Shape{2}, 1.0);
  Tape<double> tape;
  EXPECT_THROW(batch_norm(tape.constant(Tensor64(Shape{1, 3, 2, 2})), tape.constant(Tensor64(Shape{2}, 1.0)),
                          tape.constant(Tensor64(Shape{2})), rm, rv, {}),
               ShapeError);
}

TEST(Ops, GlobalAvgPoolOfConstant) {
  Tape<float> tape;
  auto y = global_avg_pool(tape.constant(Tensor(Shape{1, 5, 3, 4}, 2.5f)));
  EXPECT_EQ(y.shape(), (Shape{1, 5}));
  for (float v : y.value().values()) EXPECT_FLOAT_EQ(v, 2.5f);
}

TEST(Ops, UniformLogitsGiveLogK) {
  Tape<double> tape;
  const std::vector<int> labels{0, 3, 6};
  auto loss = softmax_cross_entropy(tape.constant(Tensor64(Shape{3, 7}, 0.4)), std::span<const int>(labels));
  EXPECT_NEAR(loss.value().item(), std::log(7.0), 1e-12);
}

TEST(Ops, LabelOutOfRangeThrows) {
  Tape<float> tape;
  const std::vector<int> labels{0, 4};
  EXPECT_THROW(softmax_cross_entropy(tape.constant(Tensor(Shape{2, 4})), std::span<const int>(labels)), DataError);
}

TEST(Ops, ConcatOrderAndSliceRecovery) {
  const auto a = oracle::random_tensor({1, 64, 3, 3}, 13);
  const auto b = oracle::random_tensor({1, 64, 3, 3}, 14);
  Tape<double> tape;
  auto cat = concat_channels<double>({tape.constant(a), tape.constant(b)});
  EXPECT_EQ(cat.shape(), (Shape{1, 128, 3, 3}));
  for (std::size_t c = 0; c < 128; ++c)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        const double expect = c < 64 ? a.at(0, c, i, j) : b.at(0, c - 64, i, j);
        ASSERT_EQ(cat.value().at(0, c, i, j), expect);
      }
  EXPECT_EQ(slice_channels(cat, 0, 64).value(), a);
  EXPECT_EQ(slice_channels(cat, 64, 128).value(), b);
}

TEST(Ops, ConcatNeedsMatchingSpatialDims) {
  Tape<float> tape;
  EXPECT_THROW(concat_channels<float>({tape.constant(Tensor(Shape{1, 2, 3, 3})), tape.constant(Tensor(Shape{1, 2, 3, 4}))}),
               ShapeError);
}

TEST(Ops, MaxPoolFloorMode) {
  Tape<float> tape;
  auto y = max_pool(tape.constant(Tensor(Shape{1, 1, 113, 113})), 3, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 56, 56}));
}

TEST(Backward, SumOfParameterGivesOnes) {
  Parameter<double> p(oracle::random_tensor({3, 4}, 15));
  Tape<double> tape;
  tape.backward(sum(tape.parameter(p)));
  for (double g : p.grad.values()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, EmptyTapeThrows) {
  Tape<double> tape;
  Parameter<double> p(Tensor64(Shape{1}));
  EXPECT_THROW(tape.backward(tape.parameter(p)), Error);
}

TEST(Backward, UnusedParameterHasZeroGradient) {
  Parameter<double> used(oracle::random_tensor({2}, 16));
  Parameter<double> unused(oracle::random_tensor({2}, 17));
  unused.zero_grad();
  Tape<double> tape;
  tape.parameter(unused);
  tape.backward(sum(tape.parameter(used)));
  for (double g : unused.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, FanOutAccumulates) {
  // y = sum(concat(v, v)) -> dy/dv = 2
  Parameter<double> q(Tensor64(Shape{1, 2}, 1.0));
  Tape<double> tape;
  auto w = tape.parameter(q);
  tape.backward(sum(concat_channels<double>({w, w})));
  for (double g : q.grad.values()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, SingleConvCrossEntropyMatchesFiniteDifferences) {
  // 1x1 conv over 2 channels, GAP, 2-class softmax.
  Parameter<double> w(oracle::random_tensor({2, 2, 1, 1}, 18));
  Parameter<double> b(oracle::random_tensor({2}, 19));
  const auto x = oracle::random_tensor({3, 2, 2, 2}, 20);
  const std::vector<int> labels{0, 1, 1};
  auto loss_of = [&](bool grad) {
    Tape<double> tape;
    tape.set_grad_enabled(grad);
    auto y = global_avg_pool(conv2d(tape.constant(x), tape.parameter(w), tape.parameter(b), {}));
    auto l = softmax_cross_entropy(y, std::span<const int>(labels));
    if (grad) tape.backward(l);
    return l.value().item();
  };
  w.zero_grad();
  b.zero_grad();
  loss_of(true);
  for (auto* p : {&w, &b}) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double o = p->value[i];
      p->value[i] = o + 1e-6;
      const double up = loss_of(false);
      p->value[i] = o - 1e-6;
      const double dn = loss_of(false);
      p->value[i] = o;
      const double fd = (up - dn) / 2e-6;
      EXPECT_LE(std::abs(p->grad[i] - fd) / std::max(1.0, std::abs(fd)), 1e-4);
    }
  }
}

class GradientSuite : public ::testing::TestWithParam<std::string> {};

TEST_P(GradientSuite, TwentyRandomInstances) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto gc = oracle::gradient_check(GetParam(), 1000 + s);
    EXPECT_GT(gc.checked, 0u);
    EXPECT_LE(gc.max_rel_error, 1e-4) << GetParam() << " instance " << s;
  }
}

INSTANTIATE_TEST_SUITE_P(AllLayers, GradientSuite, ::testing::ValuesIn(oracle::gradient_layers()),
                         [](const auto& info) { return info.param; });

TEST(Determinism, ForwardBackwardBitwise) {
  auto run = [] {
    Parameter<float> w(oracle::random_tensor({4, 3, 3, 3}, 21).cast<float>());
    Parameter<float> b(oracle::random_tensor({4}, 22).cast<float>());
    const auto x = oracle::random_tensor({2, 3, 7, 7}, 23).cast<float>();
    Tape<float> tape;
    auto y = conv2d(tape.constant(x), tape.parameter(w), tape.parameter(b), {1, 1, "c"});
    tape.backward(sum(relu(y)));
    return std::pair{y.value(), w.grad};
  };
  EXPECT_EQ(run(), run());
}

TEST(Sgdm, PlainStep) {
  Tensor64 p(Shape{1}, 1.0), g(Shape{1}, 1.0), v(Shape{1});
  sgdm_step(p, g, v, {0.1, 0.0, 0.0});
  EXPECT_DOUBLE_EQ(p[0], 0.9);
}

TEST(Sgdm, MomentumRecurrence) {
  Tensor64 p(Shape{1}), g(Shape{1}, 1.0), v(Shape{1});
  sgdm_step(p, g, v, {1.0, 0.9, 0.0});
  sgdm_step(p, g, v, {1.0, 0.9, 0.0});
  EXPECT_DOUBLE_EQ(p[0], -2.9);
}

TEST(Sgdm, ZeroGradientKeepsParameters) {
  Tensor64 p(Shape{2}, 3.0), g(Shape{2}), v(Shape{2});
  sgdm_step(p, g, v, {0.1, 0.9, 0.0});
  EXPECT_EQ(p, Tensor64(Shape{2}, 3.0));
  EXPECT_EQ(v, Tensor64(Shape{2}));

  Tensor64 v2(Shape{2}, 2.0);
  sgdm_step(p, g, v2, {0.1, 0.9, 0.0});
  EXPECT_DOUBLE_EQ(v2[0], 0.9 * 2.0);

  Tensor64 bad(Shape{3});
  EXPECT_THROW(sgdm_step(p, bad, v, {0.1, 0.9, 0.0}), ShapeError);
}

}  // namespace
}  // namespace sqz
