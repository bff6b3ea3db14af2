#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "spiketim/errors.hpp"
#include "spiketim/lif.hpp"
#include "spiketim/ops.hpp"
#include "test_support.hpp"

using namespace spiketim;
using spiketim::testing::random_tensor;

namespace {

using T = Tensor<double>;

LIFStepResult<double> step_from(double v, double x, LIFConfig cfg = {}) {
  LIFState<double> s{T({1}, {v})};
  return lif_step(s, T({1}, {x}), cfg);
}

}  // namespace

TEST(LIF, ChargeBelowThreshold) {
  auto r = step_from(0.0, 1.0);
  EXPECT_EQ(r.spikes.item(), 0.0);
  EXPECT_EQ(r.state.v.item(), 0.5);
}

TEST(LIF, ThresholdEqualityFiresAndResets) {
  auto r = step_from(1.0, 1.0);
  EXPECT_EQ(r.spikes.item(), 1.0);
  EXPECT_EQ(r.state.v.item(), 0.0);
}

TEST(LIF, ThreeStepsClosedForm) {
  std::vector<T> xs(3, T({1}, {0.5}));
  LIFState<double> s;
  for (const auto& x : xs) s = lif_step(s, x, LIFConfig{}).state;
  EXPECT_DOUBLE_EQ(s.v.item(), 0.4375);
}

TEST(LIF, ClosedFormOverFiftySteps) {
  LIFConfig cfg;
  for (double tau : {2.0, 3.0, 10.0}) {
    cfg.tau = tau;
    const double x = 0.9;
    LIFState<double> s;
    for (int t = 1; t <= 50; ++t) {
      auto r = lif_step(s, T({1}, {x}), cfg);
      s = r.state;
      const double want = x * (1 - std::pow(1 - 1 / tau, t));
      EXPECT_LE(std::abs(s.v.item() - want) / want, 1e-6) << "tau " << tau << " t " << t;
      EXPECT_EQ(r.spikes.item(), 0.0);
    }
  }
}

TEST(LIF, SingleStepSequenceEqualsStep) {
  std::mt19937_64 rng(1);
  T x = random_tensor({4, 3}, rng, -3, 3);
  auto seq = lif_forward(std::vector<T>{x}, LIFConfig{});
  auto one = lif_step(LIFState<double>{}, x, LIFConfig{});
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(seq[0].data()[i], one.spikes.data()[i]);
}

TEST(LIF, SubthresholdConvergesMonotonically) {
  for (double x : {0.3, 0.8, 0.99}) {
    LIFState<double> s;
    double prev = 0.0;
    for (int t = 0; t < 200; ++t) {
      auto r = lif_step(s, T({1}, {x}), LIFConfig{});
      EXPECT_EQ(r.spikes.item(), 0.0);
      const double v = r.state.v.item();
      EXPECT_GE(v, prev);
      EXPECT_LE(v, x);
      prev = v;
      s = r.state;
    }
    EXPECT_NEAR(prev, x, 1e-12);
  }
}

TEST(LIF, BinaryForAnyInput) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> mag(-30, 30);
  LIFNode<double> node;
  for (int t = 0; t < 40; ++t) {
    std::vector<double> x(64);
    for (auto& e : x) e = std::copysign(std::pow(10.0, std::abs(mag(rng)) / 3), mag(rng));
    x[0] = 1e300;
    x[1] = -1e300;
    x[2] = 0.0;
    T s = node.step(T({64}, x));
    for (double v : s.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  }
}

TEST(LIF, ResetIsExact) {
  std::mt19937_64 rng(3);
  LIFState<double> s;
  for (int t = 0; t < 30; ++t) {
    T x = random_tensor({50}, rng, -1, 4, false);
    const T v_before = s.v;
    auto r = lif_step(s, x, LIFConfig{});
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double prev = v_before.defined() ? v_before.data()[i] : 0.0;
      const double charged = prev + (x.data()[i] - prev) / 2.0;
      if (r.spikes.data()[i] == 1.0) {
        EXPECT_EQ(r.state.v.data()[i], 0.0);
      } else {
        EXPECT_EQ(r.state.v.data()[i], charged);
      }
    }
    s = r.state;
  }
}

TEST(LIF, SurrogateConformanceIsExact) {
  LIFConfig cfg;
  for (double a : {1.0, 2.0, 4.0}) {
    cfg.surrogate_a = a;
    std::vector<double> v;
    for (int i = -400; i <= 400; ++i) v.push_back(1.0 + i / 200.0);
    v.push_back(1.0 + 1 / a);
    v.push_back(1.0 - 1 / a);
    T vt({v.size()}, v, true);
    sum(spike_function(vt, cfg)).backward();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double u = std::abs(v[i] - 1.0);
      const double want = u > 1 / a ? 0.0 : -a * a * u + a;
      EXPECT_EQ(vt.grad()[i], want) << v[i];
    }
  }
}

TEST(LIF, ShapeMismatchRejected) {
  LIFState<double> s{T::zeros({3})};
  EXPECT_THROW(lif_step(s, T::zeros({4}), LIFConfig{}), DimensionError);
}

TEST(LIF, EmptySequenceRejected) {
  EXPECT_THROW(lif_forward(std::vector<T>{}, LIFConfig{}), ContractError);
}

TEST(LIF, ConfigValidation) {
  LIFConfig cfg;
  cfg.tau = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.v_threshold = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.surrogate_a = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

namespace {

// Antiderivative of the triangular surrogate, centred on the threshold.
double twin(double u, double a) {
  if (u <= -1 / a) return 0;
  if (u >= 1 / a) return 1;
  return u <= 0 ? 0.5 * (a * u + 1) * (a * u + 1) : 1 - 0.5 * (1 - a * u) * (1 - a * u);
}

// x[T][n_in] -> W1 -> LIF (smooth twin, reset gates fixed) -> W2, summed over
// time and weighted. Fills `gates` when empty, reuses it otherwise.
double twin_mlp(const std::vector<std::vector<double>>& x, const std::vector<double>& w1,
                const std::vector<double>& w2, const std::vector<double>& weights, std::size_t hidden,
                std::vector<std::vector<double>>& gates) {
  const std::size_t n_in = x[0].size();
  const std::size_t n_out = weights.size();
  const bool record = gates.empty();
  std::vector<double> v(hidden, 0.0);
  double loss = 0;
  for (std::size_t t = 0; t < x.size(); ++t) {
    std::vector<double> s(hidden);
    if (record) gates.emplace_back(hidden);
    for (std::size_t h = 0; h < hidden; ++h) {
      double in = 0;
      for (std::size_t i = 0; i < n_in; ++i) in += w1[h * n_in + i] * x[t][i];
      const double charged = v[h] + (in - v[h]) / 2.0;
      s[h] = twin(charged - 1.0, 2.0);
      if (record) gates[t][h] = 1 - s[h];
      v[h] = charged * gates[t][h];
    }
    for (std::size_t o = 0; o < n_out; ++o) {
      double out = 0;
      for (std::size_t h = 0; h < hidden; ++h) out += w2[o * hidden + h] * s[h];
      loss += weights[o] * out;
    }
  }
  return loss;
}

}  // namespace

TEST(LIF, TinyMlpGradientMatchesSmoothTwin) {
  std::mt19937_64 rng(4);
  const std::size_t steps = 5, n_in = 3, hidden = 6, n_out = 2;
  // Inputs scaled so most pre-threshold membranes sit inside the support.
  T x = random_tensor({steps, n_in}, rng, 0.5, 2.0, false);
  T w1 = random_tensor({hidden, n_in}, rng, -0.2, 0.9);
  T w2 = random_tensor({n_out, hidden}, rng);
  T weights = random_tensor({n_out}, rng, -1, 1, false);

  LIFConfig cfg;
  cfg.spike_forward = SpikeForward::kSmoothTwin;
  std::vector<T> hidden_in;
  for (std::size_t t = 0; t < steps; ++t) hidden_in.push_back(linear(select(x, t), w1, T{}));
  auto spikes = lif_forward(hidden_in, cfg);
  T loss = T::scalar(0.0);
  for (const auto& s : spikes) loss = add(loss, sum(mul(linear(s, w2, T{}), weights)));
  loss.backward();

  std::vector<std::vector<double>> xs(steps, std::vector<double>(n_in));
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < n_in; ++i) xs[t][i] = x.data()[t * n_in + i];
  std::vector<double> p1(w1.data().begin(), w1.data().end());
  std::vector<double> p2(w2.data().begin(), w2.data().end());
  std::vector<double> wv(weights.data().begin(), weights.data().end());
  std::vector<std::vector<double>> gates;
  const double base = twin_mlp(xs, p1, p2, wv, hidden, gates);
  EXPECT_NEAR(base, loss.item(), 1e-12);

  // h below the distance of any membrane to a surrogate corner keeps the
  // central difference inside one smooth piece.
  const double h = 1e-6;
  auto fd = [&](std::vector<double>& p, std::size_t i) {
    const double saved = p[i];
    p[i] = saved + h;
    const double up = twin_mlp(xs, p1, p2, wv, hidden, gates);
    p[i] = saved - h;
    const double down = twin_mlp(xs, p1, p2, wv, hidden, gates);
    p[i] = saved;
    return (up - down) / (2 * h);
  };
  std::vector<double> g1, g2;
  for (std::size_t i = 0; i < p1.size(); ++i) g1.push_back(fd(p1, i));
  for (std::size_t i = 0; i < p2.size(); ++i) g2.push_back(fd(p2, i));
  EXPECT_LE(spiketim::testing::relative_error(w1.grad(), g1), 1e-3);
  EXPECT_LE(spiketim::testing::relative_error(w2.grad(), g2), 1e-3);
}

TEST(LIFNode, ForwardMatchesStepping) {
  std::mt19937_64 rng(5);
  T xs = random_tensor({6, 2, 4}, rng, -1, 3, false);
  LIFNode<double> a, b;
  T seq = a.forward(xs);
  for (std::size_t t = 0; t < 6; ++t) {
    T s = b.step(select(xs, t));
    for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_EQ(seq.data()[t * 8 + i], s.data()[i]);
  }
  a.reset();
  EXPECT_FALSE(a.has_state());
}
