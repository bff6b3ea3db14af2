#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "spiketim/errors.hpp"
#include "spiketim/lif.hpp"
#include "spiketim/ops.hpp"
#include "test_support.hpp"

using namespace spiketim;
using spiketim::testing::central_differences;
using spiketim::testing::random_tensor;
using spiketim::testing::relative_error;

namespace {

using T = Tensor<double>;

void expect_data(const T& t, const std::vector<double>& want) {
  ASSERT_EQ(t.numel(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_DOUBLE_EQ(t.data()[i], want[i]) << i;
}

// Autodiff vs central differences for loss(inputs) over every input.
void check_gradients(std::vector<T*> inputs, const std::function<T()>& loss, double tol = 1e-4,
                     double h = 1e-3) {
  for (auto* x : inputs) x->zero_grad();
  loss().backward();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> autodiff(inputs[i]->grad().begin(), inputs[i]->grad().end());
    auto fd = central_differences(*inputs[i], [&] { return loss().item(); }, h);
    EXPECT_LE(relative_error(autodiff, fd), tol) << "input " << i;
  }
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(T({2, 3}, std::vector<double>(5)), DimensionError);
  T ok({2, 3}, std::vector<double>(6));
  EXPECT_EQ(ok.numel(), shape_numel(ok.shape()));
}

TEST(Tensor, GradHasTensorShape) {
  std::mt19937_64 rng(1);
  T x = random_tensor({3, 4}, rng);
  sum(mul(x, x)).backward();
  EXPECT_EQ(x.grad().size(), x.numel());
}

TEST(Matmul, Identity) {
  T eye({2, 2}, {1, 0, 0, 1});
  T b({2, 2}, {5, 6, 7, 8});
  expect_data(matmul(eye, b), {5, 6, 7, 8});
}

TEST(Matmul, HandArithmetic) {
  T a({2, 2}, {1, 2, 3, 4});
  T b({2, 2}, {5, 6, 7, 8});
  expect_data(matmul(a, b), {19, 22, 43, 50});
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  T a = random_tensor({3, 3}, rng);
  T b = random_tensor({3, 3}, rng);
  check_gradients({&a, &b}, [&] { return sum(matmul(a, b)); });
}

TEST(Matmul, BatchedGradient) {
  std::mt19937_64 rng(4);
  T a = random_tensor({2, 3, 4}, rng);
  T b = random_tensor({4, 2}, rng);
  T w = random_tensor({2, 3, 2}, rng, -1, 1, false);
  check_gradients({&a, &b}, [&] { return sum(mul(matmul(a, b), w)); });
}

TEST(Matmul, MismatchNamesBothShapes) {
  T a({2, 3}, std::vector<double>(6));
  T b({2, 3}, std::vector<double>(6));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3] x [2, 3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, BinaryOperandsGiveNonNegativeIntegers) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = spiketim::testing::binary_tensor({4, 6}, rng);
    auto b = spiketim::testing::binary_tensor({6, 5}, rng);
    const auto c = matmul(a, b);
    for (double v : c.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_EQ(v, std::floor(v));
    }
  }
}

TEST(Conv1d, DeltaKernelIsIdentity) {
  std::mt19937_64 rng(6);
  T kernel({3, 3}, {0, 1, 0, 0, 1, 0, 0, 1, 0});
  for (int trial = 0; trial < 20; ++trial) {
    T x = random_tensor({3, 9}, rng, -5, 5);
    T y = conv1d_depthwise(x, kernel);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
  }
}

TEST(Conv1d, OnesKernel) {
  T x({1, 3}, {1, 2, 3});
  T kernel({1, 3}, {1, 1, 1});
  expect_data(conv1d_depthwise(x, kernel), {3, 6, 5});
}

TEST(Conv1d, NoCrossChannelMixing) {
  T x({2, 3}, {1, 2, 3, 0, 0, 0});
  T kernel({2, 3}, {1, 1, 1, 1, 1, 1});
  expect_data(conv1d_depthwise(x, kernel), {3, 6, 5, 0, 0, 0});
}

TEST(Conv1d, EvenKernelRejected) {
  T x({1, 4}, std::vector<double>(4));
  T kernel({1, 2}, {1, 1});
  EXPECT_THROW(conv1d_depthwise(x, kernel), ConfigError);
}

TEST(Conv1d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  T x = random_tensor({2, 7}, rng);
  T kernel = random_tensor({2, 3}, rng);
  T w = random_tensor({2, 7}, rng, -1, 1, false);
  check_gradients({&x, &kernel}, [&] { return sum(mul(conv1d_depthwise(x, kernel), w)); });
}

TEST(Conv2d, UnitKernelCopiesChannel) {
  std::mt19937_64 rng(8);
  T x = random_tensor({1, 4, 5}, rng);
  T kernel({1, 1, 1, 1}, {1});
  T y = conv2d(x, kernel, 1, 0);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, OnesKernelCentre) {
  T x = T::full({1, 3, 3}, 1.0);
  T kernel = T::full({1, 1, 3, 3}, 1.0);
  T y = conv2d(x, kernel, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3}));
  EXPECT_EQ(y.data()[4], 9.0);
  EXPECT_EQ(y.data()[0], 4.0);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  T x = random_tensor({2, 5, 5}, rng);
  T kernel = random_tensor({3, 2, 3, 3}, rng);
  T w = random_tensor({3, 5, 5}, rng, -1, 1, false);
  check_gradients({&x, &kernel}, [&] { return sum(mul(conv2d(x, kernel, 1, 1), w)); });
}

TEST(Conv2d, StridedGradient) {
  std::mt19937_64 rng(10);
  T x = random_tensor({2, 2, 5, 5}, rng);
  T kernel = random_tensor({3, 2, 3, 3}, rng);
  T w = random_tensor({2, 3, 3, 3}, rng, -1, 1, false);
  check_gradients({&x, &kernel}, [&] { return sum(mul(conv2d(x, kernel, 2, 1), w)); });
}

TEST(Conv2d, NonIntegralExtentRejected) {
  T x({1, 4, 4}, std::vector<double>(16));
  T kernel({1, 1, 3, 3}, std::vector<double>(9));
  EXPECT_THROW(conv2d(x, kernel, 2, 0), ConfigError);
}

TEST(BatchNorm, StandardisedBatchPassesThrough) {
  // Exactly zero mean and unit (biased) variance per channel.
  T x({4, 1}, {1, -1, 1, -1});
  T gamma({1}, {1}), beta({1}, {0});
  T rm({1}, {0}), rv({1}, {1});
  T y = batchnorm(x, gamma, beta, rm, rv, {});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-5);
}

TEST(BatchNorm, ConstantBatchGivesBeta) {
  T x = T::full({6, 2}, 3.5);
  T gamma({2}, {2, 3}), beta({2}, {0.25, -1});
  T rm({2}, {0, 0}), rv({2}, {1, 1});
  T y = batchnorm(x, gamma, beta, rm, rv, {});
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(y.data()[2 * i], 0.25, 1e-12);
    EXPECT_NEAR(y.data()[2 * i + 1], -1.0, 1e-12);
  }
}

TEST(BatchNorm, EvalBeforeTrainingUsesInitialStats) {
  T x({2, 1}, {3, -2});
  T gamma({1}, {1}), beta({1}, {0});
  T rm({1}, {0}), rv({1}, {1});
  BatchNormOptions opt;
  opt.training = false;
  T y = batchnorm(x, gamma, beta, rm, rv, opt);
  EXPECT_NEAR(y.data()[0], 3 / std::sqrt(1 + 1e-5), 1e-12);
  EXPECT_NEAR(y.data()[1], -2 / std::sqrt(1 + 1e-5), 1e-12);
}

TEST(BatchNorm, RunningStatsConvergeToTrainNormalisation) {
  // 100 training batches from N(3, 2^2), then a fresh batch normalised both
  // ways. The running statistics average the last ~10 batches.
  std::mt19937_64 rng(11);
  std::normal_distribution<double> dist(3.0, 2.0);
  auto draw = [&] {
    std::vector<double> v(4096 * 2 * 4);
    for (auto& e : v) e = dist(rng);
    return T({4096, 2, 4}, std::move(v));
  };
  T gamma({2}, {1, 1}), beta({2}, {0, 0});
  T rm({2}, {0, 0}), rv({2}, {1, 1});
  for (int i = 0; i < 100; ++i) batchnorm(draw(), gamma, beta, rm, rv, {});
  T x = draw();
  T train_out = batchnorm(x, gamma, beta, rm, rv, {});
  BatchNormOptions eval;
  eval.training = false;
  T eval_out = batchnorm(x, gamma, beta, rm, rv, eval);
  double diff = 0, norm = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    diff += std::pow(eval_out.data()[i] - train_out.data()[i], 2);
    norm += std::pow(train_out.data()[i], 2);
  }
  EXPECT_LE(std::sqrt(diff / norm), 0.02);
  EXPECT_NEAR(rm.data()[0], 3.0, 0.1);
  EXPECT_NEAR(rv.data()[1], 4.0, 0.2);
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  T x = random_tensor({4, 3, 2}, rng);
  T gamma = random_tensor({3}, rng, 0.5, 1.5);
  T beta = random_tensor({3}, rng);
  T w = random_tensor({4, 3, 2}, rng, -1, 1, false);
  T rm = T::zeros({3}), rv = T::full({3}, 1.0);
  check_gradients({&x, &gamma, &beta},
                  [&] { return sum(mul(batchnorm(x, gamma, beta, rm, rv, {}), w)); });
}

TEST(OpGradients, ElementwiseAndShapeOps) {
  std::mt19937_64 rng(13);
  T a = random_tensor({2, 3, 4}, rng);
  T b = random_tensor({2, 3, 4}, rng);
  T w = random_tensor({3, 2, 4}, rng, -1, 1, false);
  check_gradients({&a, &b}, [&] {
    T y = add(mul(a, b), sub(scale(a, 1.5), add_scalar(b, 0.3)));
    return sum(mul(permute(y, {1, 0, 2}), w));
  });
  check_gradients({&a, &b}, [&] { return sum(mul(mean_axis(a, 1), select(permute(b, {1, 0, 2}), 2))); });
  check_gradients({&a, &b}, [&] {
    return sum(mul(reshape(stack(std::vector<T>{a, b}), {2, 24}), reshape(stack(std::vector<T>{w, w}), {2, 24})));
  });
}

TEST(OpGradients, LinearPoolAndCrossEntropy) {
  std::mt19937_64 rng(14);
  T x = random_tensor({3, 5}, rng);
  T weight = random_tensor({4, 5}, rng);
  T bias = random_tensor({4}, rng);
  check_gradients({&x, &weight, &bias},
                  [&] { return cross_entropy(linear(x, weight, bias), {0, 3, 1}); });
  T img = random_tensor({2, 4, 4}, rng);
  T w = random_tensor({2, 2, 2}, rng, -1, 1, false);
  check_gradients({&img}, [&] { return sum(mul(max_pool2d(img), w)); });
}

TEST(Backward, ScaleGivesConstant) {
  T x = T::scalar(0.7, true);
  scale(x, 2.0).backward();
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Backward, SquareGivesTwiceX) {
  std::mt19937_64 rng(15);
  T x = random_tensor({5}, rng);
  sum(mul(x, x)).backward();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(x.grad()[i], 2 * x.data()[i]);
}

TEST(Backward, FanOutAccumulates) {
  std::mt19937_64 rng(16);
  T x = random_tensor({4}, rng);
  sum(add(x, x)).backward();
  std::vector<double> twice(x.grad().begin(), x.grad().end());
  x.zero_grad();
  sum(scale(x, 2.0)).backward();
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(twice[i], 2.0);
    EXPECT_EQ(x.grad()[i], twice[i]);
  }
}

TEST(Backward, RepeatedCallsAccumulate) {
  T x = T::scalar(1.0, true);
  T y = scale(x, 3.0);
  y.backward();
  y.backward();
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, NonScalarLossRejected) {
  T x = T::full({2}, 1.0, true);
  EXPECT_THROW(scale(x, 2.0).backward(), ContractError);
}

TEST(Backward, DeterministicOnSameTape) {
  std::mt19937_64 rng(17);
  T a = random_tensor({6, 5}, rng);
  T b = random_tensor({5, 4}, rng);
  T loss = cross_entropy(matmul(a, b), {0, 1, 2, 3, 0, 1});
  loss.backward();
  std::vector<double> first(a.grad().begin(), a.grad().end());
  a.zero_grad();
  b.zero_grad();
  loss.backward();
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(first[i], a.grad()[i]);
}

TEST(CustomGrad, SpikeForwardBelowThreshold) {
  T v = T::scalar(0.5, true);
  EXPECT_EQ(spike_function(v, LIFConfig{}).item(), 0.0);
}

TEST(CustomGrad, SurrogateSlopeAtThreshold) {
  T v = T::scalar(1.0, true);
  spike_function(v, LIFConfig{}).backward();
  EXPECT_EQ(v.grad()[0], 2.0);
}

TEST(CustomGrad, SurrogateOutsideSupport) {
  for (double at : {1.6, 0.4}) {
    T v = T::scalar(at, true);
    spike_function(v, LIFConfig{}).backward();
    EXPECT_EQ(v.grad()[0], 0.0);
  }
}

TEST(CustomGrad, BackwardUsedVerbatim) {
  CustomGradFns<double> fns;
  fns.forward = [](const std::vector<T>& in) { return scale(in[0].detach(), 5.0); };
  fns.backward = [](const std::vector<T>& in, const T&, std::span<const double> up) {
    return std::vector<std::vector<double>>{std::vector<double>(in[0].numel(), 7.0 * up[0])};
  };
  T x = T::scalar(1.0, true);
  T y = custom_grad(fns)({x});
  EXPECT_EQ(y.item(), 5.0);
  y.backward();
  EXPECT_EQ(x.grad()[0], 7.0);
}

TEST(CustomGrad, WrongGradientShapeRejected) {
  CustomGradFns<double> fns;
  fns.forward = [](const std::vector<T>& in) { return in[0].detach(); };
  fns.backward = [](const std::vector<T>&, const T&, std::span<const double>) {
    return std::vector<std::vector<double>>{std::vector<double>(3, 1.0)};
  };
  T x = T::full({2}, 1.0, true);
  EXPECT_THROW(sum(custom_grad(fns)({x})).backward(), ContractError);
}
