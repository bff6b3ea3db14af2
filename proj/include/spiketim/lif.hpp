#pragma once

#include <vector>

#include "spiketim/tensor.hpp"

namespace spiketim {

// How the spike nonlinearity is evaluated in the forward pass.
enum class SpikeForward {
  kHeaviside,   // binary spikes, surrogate backward
  kSmoothTwin,  // antiderivative of the surrogate; a smooth oracle network
};

struct LIFConfig {
  double tau = 2.0;
  double v_threshold = 1.0;
  double v_reset = 0.0;
  double surrogate_a = 2.0;
  SpikeForward spike_forward = SpikeForward::kHeaviside;

  // Throws ConfigError on tau <= 1, v_threshold <= v_reset, a <= 0 or a
  // non-zero v_reset (the reset is multiplicative, so it must be 0).
  void validate() const;
};

// Triangular surrogate derivative of the Heaviside at distance u = V - V_th:
// a - a^2 |u| inside |u| <= 1/a, zero outside.
double surrogate_derivative(double u, double a);

// Smooth step whose derivative is exactly surrogate_derivative.
double smooth_spike(double u, double a);

// Theta(v - V_th) with the surrogate backward. Values are exactly 0 or 1 in
// Heaviside mode.
template <typename Real>
Tensor<Real> spike_function(const Tensor<Real>& v, const LIFConfig& config);

template <typename Real>
struct LIFState {
  Tensor<Real> v;  // undefined until the first step
};

template <typename Real>
struct LIFStepResult {
  Tensor<Real> spikes;
  LIFState<Real> state;
};

// Finite-difference oracles need the detached reset gate held fixed while
// parameters are perturbed. While a tape is installed on the current thread,
// lif_step either appends each gate (1 - spikes) to it or, in replay mode,
// consumes the recorded gates in call order instead of computing them.
template <typename Real>
class ResetGateTape {
 public:
  enum class Mode { kRecord, kReplay };

  ResetGateTape();
  ~ResetGateTape();
  ResetGateTape(const ResetGateTape&) = delete;
  ResetGateTape& operator=(const ResetGateTape&) = delete;

  void set_mode(Mode mode) { mode_ = mode; }
  Mode mode() const { return mode_; }
  void rewind() { cursor_ = 0; }
  std::size_t size() const { return gates_.size(); }

  // Used by lif_step. `computed` is the gate the step would use untaped.
  std::vector<Real> apply(std::vector<Real> computed);

  static ResetGateTape* active();

 private:
  Mode mode_ = Mode::kRecord;
  std::vector<std::vector<Real>> gates_;
  std::size_t cursor_ = 0;
  ResetGateTape* previous_ = nullptr;
};

// One step of charge -> fire -> hard reset. The reset gate (1 - spikes) is
// detached from the graph.
template <typename Real>
LIFStepResult<Real> lif_step(const LIFState<Real>& state, const Tensor<Real>& x,
                             const LIFConfig& config);

// Folds lif_step over xs from a zero membrane.
template <typename Real>
std::vector<Tensor<Real>> lif_forward(const std::vector<Tensor<Real>>& xs, const LIFConfig& config);

// Stateful LIF layer: the membrane persists across calls until reset().
template <typename Real>
class LIFNode {
 public:
  LIFNode() = default;
  explicit LIFNode(LIFConfig config);

  Tensor<Real> step(const Tensor<Real>& x);
  // xs: [T, ...] -> spikes [T, ...], stepping along the leading axis.
  Tensor<Real> forward(const Tensor<Real>& xs);
  void reset() { state_ = {}; }
  bool has_state() const { return state_.v.defined(); }
  const LIFState<Real>& state() const { return state_; }
  const LIFConfig& config() const { return config_; }
  void set_config(const LIFConfig& config);

 private:
  LIFConfig config_;
  LIFState<Real> state_;
};

extern template class ResetGateTape<float>;
extern template class ResetGateTape<double>;
extern template class LIFNode<float>;
extern template class LIFNode<double>;

}  // namespace spiketim
