#include "spiketim/lif.hpp"

#include <cmath>
#include <string>

#include "spiketim/errors.hpp"
#include "spiketim/ops.hpp"

namespace spiketim {

void LIFConfig::validate() const {
  if (!(tau > 1.0)) throw ConfigError("lif.tau must be > 1, got " + std::to_string(tau));
  if (!(v_threshold > v_reset)) {
    throw ConfigError("lif.v_threshold must exceed v_reset, got " + std::to_string(v_threshold));
  }
  if (v_reset != 0.0) throw ConfigError("lif.v_reset is fixed at 0");
  if (!(surrogate_a > 0.0)) {
    throw ConfigError("lif.surrogate_a must be > 0, got " + std::to_string(surrogate_a));
  }
}

double surrogate_derivative(double u, double a) {
  const double d = std::abs(u);
  if (d > 1.0 / a) return 0.0;
  return -a * a * d + a;
}

double smooth_spike(double u, double a) {
  if (u <= -1.0 / a) return 0.0;
  if (u >= 1.0 / a) return 1.0;
  if (u <= 0.0) {
    const double s = a * u + 1.0;
    return 0.5 * s * s;
  }
  const double s = 1.0 - a * u;
  return 1.0 - 0.5 * s * s;
}

template <typename Real>
Tensor<Real> spike_function(const Tensor<Real>& v, const LIFConfig& config) {
  const double threshold = config.v_threshold;
  const double a = config.surrogate_a;
  const bool smooth = config.spike_forward == SpikeForward::kSmoothTwin;
  CustomGradFns<Real> fns;
  fns.forward = [threshold, a, smooth](const std::vector<Tensor<Real>>& in) {
    const auto vd = in[0].data();
    std::vector<Real> out(vd.size());
    for (std::size_t i = 0; i < vd.size(); ++i) {
      if (smooth) {
        out[i] = static_cast<Real>(smooth_spike(static_cast<double>(vd[i]) - threshold, a));
      } else {
        out[i] = static_cast<double>(vd[i]) >= threshold ? Real(1) : Real(0);
      }
    }
    return Tensor<Real>(in[0].shape(), std::move(out));
  };
  fns.backward = [threshold, a](const std::vector<Tensor<Real>>& in, const Tensor<Real>&,
                                std::span<const Real> upstream) {
    const auto vd = in[0].data();
    std::vector<Real> grad(vd.size());
    for (std::size_t i = 0; i < vd.size(); ++i) {
      grad[i] = upstream[i] * static_cast<Real>(
                                  surrogate_derivative(static_cast<double>(vd[i]) - threshold, a));
    }
    return std::vector<std::vector<Real>>{std::move(grad)};
  };
  return custom_grad<Real>(std::move(fns))({v});
}

namespace {
template <typename Real>
thread_local ResetGateTape<Real>* g_active_tape = nullptr;
}  // namespace

template <typename Real>
ResetGateTape<Real>::ResetGateTape() : previous_(g_active_tape<Real>) {
  g_active_tape<Real> = this;
}

template <typename Real>
ResetGateTape<Real>::~ResetGateTape() {
  g_active_tape<Real> = previous_;
}

template <typename Real>
ResetGateTape<Real>* ResetGateTape<Real>::active() {
  return g_active_tape<Real>;
}

template <typename Real>
std::vector<Real> ResetGateTape<Real>::apply(std::vector<Real> computed) {
  if (mode_ == Mode::kRecord) {
    gates_.push_back(computed);
    return computed;
  }
  if (cursor_ >= gates_.size() || gates_[cursor_].size() != computed.size()) {
    throw ContractError("reset gate replay diverged from the recorded run at step " +
                        std::to_string(cursor_));
  }
  return gates_[cursor_++];
}

template <typename Real>
LIFStepResult<Real> lif_step(const LIFState<Real>& state, const Tensor<Real>& x,
                             const LIFConfig& config) {
  const Real inv_tau = static_cast<Real>(1.0 / config.tau);
  Tensor<Real> charged;
  if (!state.v.defined()) {
    // v = 0 + (x - 0) / tau
    charged = scale(x, inv_tau);
  } else {
    if (state.v.shape() != x.shape()) {
      throw DimensionError("lif_step: input " + shape_to_string(x.shape()) +
                           " does not match membrane " + shape_to_string(state.v.shape()));
    }
    charged = add(state.v, scale(sub(x, state.v), inv_tau));
  }
  Tensor<Real> spikes = spike_function(charged, config);

  std::vector<Real> keep(spikes.numel());
  const auto sd = spikes.data();
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = Real(1) - sd[i];
  if (auto* tape = ResetGateTape<Real>::active()) keep = tape->apply(std::move(keep));
  Tensor<Real> reset_gate(spikes.shape(), std::move(keep));
  Tensor<Real> v_next = mul(charged, reset_gate);
  return {std::move(spikes), LIFState<Real>{std::move(v_next)}};
}

template <typename Real>
std::vector<Tensor<Real>> lif_forward(const std::vector<Tensor<Real>>& xs,
                                      const LIFConfig& config) {
  if (xs.empty()) throw ContractError("lif_forward: empty input sequence");
  std::vector<Tensor<Real>> spikes;
  spikes.reserve(xs.size());
  LIFState<Real> state;
  for (const auto& x : xs) {
    if (x.shape() != xs.front().shape()) {
      throw DimensionError("lif_forward: step shape " + shape_to_string(x.shape()) +
                           " differs from " + shape_to_string(xs.front().shape()));
    }
    auto result = lif_step(state, x, config);
    spikes.push_back(std::move(result.spikes));
    state = std::move(result.state);
  }
  return spikes;
}

template <typename Real>
LIFNode<Real>::LIFNode(LIFConfig config) : config_(config) {
  config_.validate();
}

template <typename Real>
void LIFNode<Real>::set_config(const LIFConfig& config) {
  config.validate();
  config_ = config;
}

template <typename Real>
Tensor<Real> LIFNode<Real>::step(const Tensor<Real>& x) {
  auto result = lif_step(state_, x, config_);
  state_ = std::move(result.state);
  return std::move(result.spikes);
}

template <typename Real>
Tensor<Real> LIFNode<Real>::forward(const Tensor<Real>& xs) {
  if (xs.rank() < 1 || xs.shape()[0] == 0) {
    throw ContractError("LIF sequence needs a leading time axis of length >= 1");
  }
  std::vector<Tensor<Real>> spikes;
  spikes.reserve(xs.shape()[0]);
  for (std::size_t t = 0; t < xs.shape()[0]; ++t) spikes.push_back(step(select(xs, t)));
  return stack(spikes);
}

template class ResetGateTape<float>;
template class ResetGateTape<double>;
template class LIFNode<float>;
template class LIFNode<double>;

#define SPIKETIM_INSTANTIATE_LIF(Real)                                                   \
  template Tensor<Real> spike_function(const Tensor<Real>&, const LIFConfig&);          \
  template LIFStepResult<Real> lif_step(const LIFState<Real>&, const Tensor<Real>&,     \
                                        const LIFConfig&);                              \
  template std::vector<Tensor<Real>> lif_forward(const std::vector<Tensor<Real>>&,      \
                                                 const LIFConfig&);

SPIKETIM_INSTANTIATE_LIF(float)
SPIKETIM_INSTANTIATE_LIF(double)

}  // namespace spiketim
