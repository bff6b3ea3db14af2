#pragma once

#include <cstddef>
#include <string>
#include <utility>

#include "spiketim/layers.hpp"
#include "spiketim/lif.hpp"
#include "spiketim/tensor.hpp"

namespace spiketim {

enum class AttentionMode { kBaseline, kTim, kLocalTim };

std::string to_string(AttentionMode mode);
// Accepts "baseline", "tim", "local_tim". Throws ConfigError otherwise.
AttentionMode parse_attention_mode(const std::string& name);

struct SSAConfig {
  std::size_t embed_dim = 16;
  std::size_t num_heads = 2;
  double scale = 0.125;

  void validate() const;
};

struct TIMConfig {
  double alpha = 0.5;
  std::size_t kernel_size = 3;
  AttentionMode mode = AttentionMode::kTim;

  void validate() const;
};

// Q^TIM of the previous step; undefined before the first step of a sample.
template <typename Real>
struct TIMState {
  Tensor<Real> q_tim_prev;
};

// Depthwise 1-D convolution along the token axis of x[..., tokens, dim] with
// kernel[dim, k]. Every (head, channel) pair has its own taps.
template <typename Real>
Tensor<Real> token_conv(const Tensor<Real>& x, const Tensor<Real>& kernel);

// Q^TIM[t] = alpha * f(Q^TIM[t-1]) + (1 - alpha) * Q[t], with Q^TIM[0] = Q[0].
template <typename Real>
std::pair<Tensor<Real>, TIMState<Real>> tim_update(const TIMState<Real>& state,
                                                   const Tensor<Real>& q_t,
                                                   const Tensor<Real>& kernel, double alpha);

// scale * Q K^T V per head over q, k, v of shape [..., tokens, dim]; heads
// are contiguous slices of dim. No softmax.
template <typename Real>
Tensor<Real> spiking_attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                               std::size_t num_heads, double scale);

// Delta kernel [dim, k] (centre tap 1) plus optional N(0, noise_std) taps.
template <typename Real>
Tensor<Real> delta_kernel(std::size_t dim, std::size_t kernel_size, double noise_std, Rng* rng);

// Spiking self attention with the query-path temporal interaction module.
//
// Over a sequence x[T, ..., tokens, dim]:
//   Q, K, V = LIF(BN(Linear(x)))                 baseline / tim
//   Q       = LIF(f(BN(Linear_q(x))))            local_tim
//   Q_used  = tim_update(Q) step by step         tim only
//   out     = LIF(BN(Linear_p(scale * Q_used K^T V)))
// BN statistics are shared by all T steps of a call.
//
// LIF membranes and the TIM history persist across calls; reset_state() must
// run between samples.
template <typename Real>
class SpikingSelfAttention {
 public:
  SpikingSelfAttention() = default;
  SpikingSelfAttention(const SSAConfig& ssa, const TIMConfig& tim, const LIFConfig& lif, Rng& rng);

  // xs: [T, tokens, dim] or [T, batch, tokens, dim].
  Tensor<Real> forward(const Tensor<Real>& xs);
  // A single step x[..., tokens, dim], i.e. forward() with T = 1.
  Tensor<Real> step(const Tensor<Real>& x);

  // Pre-projection attention [T, ..., tokens, dim] of the last call.
  const Tensor<Real>& last_attention() const { return last_attention_; }
  const Tensor<Real>& last_query() const { return last_query_; }

  void reset_state();
  void set_training(bool training);
  void set_alpha(double alpha);
  void set_mode(AttentionMode mode);

  const SSAConfig& ssa_config() const { return ssa_; }
  const TIMConfig& tim_config() const { return tim_; }
  const TIMState<Real>& tim_state() const { return tim_state_; }

  void collect_parameters(const std::string& prefix, NamedTensors<Real>& out);
  void collect_buffers(const std::string& prefix, NamedTensors<Real>& out);

  Linear<Real> q_proj, k_proj, v_proj, out_proj;
  BatchNorm<Real> q_bn, k_bn, v_bn, out_bn;
  // f of the temporal interaction module; undefined in baseline mode.
  Tensor<Real> tim_kernel;

 private:
  SSAConfig ssa_;
  TIMConfig tim_;
  LIFNode<Real> q_lif_, k_lif_, v_lif_, out_lif_;
  TIMState<Real> tim_state_;
  Tensor<Real> last_attention_;
  Tensor<Real> last_query_;
};

extern template class SpikingSelfAttention<float>;
extern template class SpikingSelfAttention<double>;

}  // namespace spiketim
