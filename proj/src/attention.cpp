#include "spiketim/attention.hpp"

#include <numeric>

#include "spiketim/errors.hpp"
#include "spiketim/ops.hpp"

namespace spiketim {

std::string to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::kBaseline: return "baseline";
    case AttentionMode::kTim: return "tim";
    case AttentionMode::kLocalTim: return "local_tim";
  }
  return "unknown";
}

AttentionMode parse_attention_mode(const std::string& name) {
  if (name == "baseline") return AttentionMode::kBaseline;
  if (name == "tim") return AttentionMode::kTim;
  if (name == "local_tim") return AttentionMode::kLocalTim;
  throw ConfigError("unknown attention mode '" + name + "' (expected baseline, tim, local_tim)");
}

void SSAConfig::validate() const {
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by " +
                      std::to_string(num_heads) + " heads");
  }
  if (!(scale > 0.0)) throw ConfigError("attention scale must be > 0");
}

void TIMConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("tim.alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  if (kernel_size % 2 == 0) {
    throw ConfigError("tim.kernel_size must be odd, got " + std::to_string(kernel_size));
  }
}

namespace {

// [..., N, D] -> [..., h, N, D/h]
template <typename Real>
Tensor<Real> split_heads(const Tensor<Real>& x, std::size_t heads) {
  const std::size_t r = x.rank();
  const std::size_t dim = x.shape()[r - 1];
  Shape split(x.shape().begin(), x.shape().end() - 1);
  split.push_back(heads);
  split.push_back(dim / heads);
  std::vector<std::size_t> axes(r + 1);
  std::iota(axes.begin(), axes.end(), 0);
  // [..., N, h, d] -> [..., h, N, d]
  std::swap(axes[r - 2], axes[r - 1]);
  return permute(reshape(x, split), axes);
}

// [..., h, N, d] -> [..., N, h*d]
template <typename Real>
Tensor<Real> merge_heads(const Tensor<Real>& x) {
  const std::size_t r = x.rank();
  std::vector<std::size_t> axes(r);
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[r - 3], axes[r - 2]);
  Tensor<Real> swapped = permute(x, axes);
  Shape merged(swapped.shape().begin(), swapped.shape().end() - 2);
  merged.push_back(x.shape()[r - 3] * x.shape()[r - 1]);
  return reshape(swapped, merged);
}

}  // namespace

template <typename Real>
Tensor<Real> token_conv(const Tensor<Real>& x, const Tensor<Real>& kernel) {
  if (x.rank() < 2) throw DimensionError("token_conv needs [..., tokens, dim]");
  const std::size_t r = x.rank();
  return transpose(conv1d_depthwise(transpose(x, r - 2, r - 1), kernel), r - 2, r - 1);
}

template <typename Real>
std::pair<Tensor<Real>, TIMState<Real>> tim_update(const TIMState<Real>& state,
                                                   const Tensor<Real>& q_t,
                                                   const Tensor<Real>& kernel, double alpha) {
  if (!state.q_tim_prev.defined()) return {q_t, TIMState<Real>{q_t}};
  if (state.q_tim_prev.shape() != q_t.shape()) {
    throw ContractError("tim_update: query shape " + shape_to_string(q_t.shape()) +
                        " drifted from " + shape_to_string(state.q_tim_prev.shape()) +
                        " (reset the state between samples)");
  }
  Tensor<Real> history = scale(token_conv(state.q_tim_prev, kernel), static_cast<Real>(alpha));
  Tensor<Real> current = scale(q_t, static_cast<Real>(1.0 - alpha));
  Tensor<Real> q_tim = add(history, current);
  return {q_tim, TIMState<Real>{q_tim}};
}

template <typename Real>
Tensor<Real> spiking_attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                               std::size_t num_heads, double scale_factor) {
  if (q.shape() != k.shape() || q.shape() != v.shape() || q.rank() < 2) {
    throw DimensionError("spiking_attention: q " + shape_to_string(q.shape()) + ", k " +
                         shape_to_string(k.shape()) + ", v " + shape_to_string(v.shape()));
  }
  if (num_heads == 0 || q.shape().back() % num_heads != 0) {
    throw DimensionError("spiking_attention: dim " + std::to_string(q.shape().back()) +
                         " not divisible by " + std::to_string(num_heads) + " heads");
  }
  const Tensor<Real> qh = split_heads(q, num_heads);
  const Tensor<Real> kh = split_heads(k, num_heads);
  const Tensor<Real> vh = split_heads(v, num_heads);
  const std::size_t r = kh.rank();
  const Tensor<Real> scores = matmul(qh, transpose(kh, r - 2, r - 1));
  return merge_heads(scale(matmul(scores, vh), static_cast<Real>(scale_factor)));
}

template <typename Real>
Tensor<Real> delta_kernel(std::size_t dim, std::size_t kernel_size, double noise_std, Rng* rng) {
  if (kernel_size % 2 == 0) throw ConfigError("kernel size must be odd");
  std::vector<Real> taps(dim * kernel_size, Real(0));
  std::normal_distribution<double> noise(0.0, noise_std > 0 ? noise_std : 1.0);
  for (std::size_t c = 0; c < dim; ++c) {
    for (std::size_t j = 0; j < kernel_size; ++j) {
      double value = j == kernel_size / 2 ? 1.0 : 0.0;
      if (rng && noise_std > 0) value += noise(*rng);
      taps[c * kernel_size + j] = static_cast<Real>(value);
    }
  }
  return Tensor<Real>({dim, kernel_size}, std::move(taps), true);
}

template <typename Real>
SpikingSelfAttention<Real>::SpikingSelfAttention(const SSAConfig& ssa, const TIMConfig& tim,
                                                 const LIFConfig& lif, Rng& rng)
    : ssa_(ssa), tim_(tim), q_lif_(lif), k_lif_(lif), v_lif_(lif), out_lif_(lif) {
  ssa_.validate();
  tim_.validate();
  const std::size_t d = ssa_.embed_dim;
  q_proj = Linear<Real>(d, d, false, rng);
  k_proj = Linear<Real>(d, d, false, rng);
  v_proj = Linear<Real>(d, d, false, rng);
  out_proj = Linear<Real>(d, d, false, rng);
  q_bn = BatchNorm<Real>(d, BatchNorm<Real>::kLastAxis);
  k_bn = BatchNorm<Real>(d, BatchNorm<Real>::kLastAxis);
  v_bn = BatchNorm<Real>(d, BatchNorm<Real>::kLastAxis);
  out_bn = BatchNorm<Real>(d, BatchNorm<Real>::kLastAxis);
  if (tim_.mode != AttentionMode::kBaseline) {
    tim_kernel = delta_kernel<Real>(d, tim_.kernel_size, 0.01, &rng);
  }
}

template <typename Real>
Tensor<Real> SpikingSelfAttention<Real>::forward(const Tensor<Real>& xs) {
  if (xs.rank() < 3 || xs.shape().back() != ssa_.embed_dim || xs.shape()[0] == 0) {
    throw DimensionError("attention input " + shape_to_string(xs.shape()) +
                         " is not [T, ..., tokens, " + std::to_string(ssa_.embed_dim) + "]");
  }
  // Projections and BN see all steps at once; only the LIF membranes and the
  // TIM history run step by step.
  Tensor<Real> q_current = q_bn(q_proj(xs));
  if (tim_.mode == AttentionMode::kLocalTim) q_current = token_conv(q_current, tim_kernel);
  Tensor<Real> q = q_lif_.forward(q_current);
  const Tensor<Real> k = k_lif_.forward(k_bn(k_proj(xs)));
  const Tensor<Real> v = v_lif_.forward(v_bn(v_proj(xs)));
  if (tim_.mode == AttentionMode::kTim) {
    std::vector<Tensor<Real>> mixed;
    mixed.reserve(xs.shape()[0]);
    for (std::size_t t = 0; t < xs.shape()[0]; ++t) {
      auto [q_tim, next] = tim_update(tim_state_, select(q, t), tim_kernel, tim_.alpha);
      mixed.push_back(std::move(q_tim));
      tim_state_ = std::move(next);
    }
    q = stack(mixed);
  }
  last_query_ = q;
  last_attention_ = spiking_attention(q, k, v, ssa_.num_heads, ssa_.scale);
  return out_lif_.forward(out_bn(out_proj(last_attention_)));
}

template <typename Real>
Tensor<Real> SpikingSelfAttention<Real>::step(const Tensor<Real>& x) {
  Shape seq{1};
  seq.insert(seq.end(), x.shape().begin(), x.shape().end());
  return select(forward(reshape(x, seq)), 0);
}

template <typename Real>
void SpikingSelfAttention<Real>::reset_state() {
  q_lif_.reset();
  k_lif_.reset();
  v_lif_.reset();
  out_lif_.reset();
  tim_state_ = {};
  last_attention_ = {};
  last_query_ = {};
}

template <typename Real>
void SpikingSelfAttention<Real>::set_training(bool training) {
  for (auto* bn : {&q_bn, &k_bn, &v_bn, &out_bn}) bn->set_training(training);
}

template <typename Real>
void SpikingSelfAttention<Real>::set_alpha(double alpha) {
  TIMConfig next = tim_;
  next.alpha = alpha;
  next.validate();
  tim_ = next;
}

template <typename Real>
void SpikingSelfAttention<Real>::set_mode(AttentionMode mode) {
  tim_.mode = mode;
  if (mode != AttentionMode::kBaseline && !tim_kernel.defined()) {
    tim_kernel = delta_kernel<Real>(ssa_.embed_dim, tim_.kernel_size, 0.0, nullptr);
  }
}

template <typename Real>
void SpikingSelfAttention<Real>::collect_parameters(const std::string& prefix,
                                                    NamedTensors<Real>& out) {
  q_proj.collect_parameters(prefix + ".q_proj", out);
  q_bn.collect_parameters(prefix + ".q_bn", out);
  k_proj.collect_parameters(prefix + ".k_proj", out);
  k_bn.collect_parameters(prefix + ".k_bn", out);
  v_proj.collect_parameters(prefix + ".v_proj", out);
  v_bn.collect_parameters(prefix + ".v_bn", out);
  out_proj.collect_parameters(prefix + ".out_proj", out);
  out_bn.collect_parameters(prefix + ".out_bn", out);
  if (tim_.mode != AttentionMode::kBaseline && tim_kernel.defined()) {
    out.push_back({prefix + ".tim_kernel", &tim_kernel});
  }
}

template <typename Real>
void SpikingSelfAttention<Real>::collect_buffers(const std::string& prefix,
                                                 NamedTensors<Real>& out) {
  q_bn.collect_buffers(prefix + ".q_bn", out);
  k_bn.collect_buffers(prefix + ".k_bn", out);
  v_bn.collect_buffers(prefix + ".v_bn", out);
  out_bn.collect_buffers(prefix + ".out_bn", out);
}

template class SpikingSelfAttention<float>;
template class SpikingSelfAttention<double>;

#define SPIKETIM_INSTANTIATE_ATTENTION(Real)                                                  \
  template Tensor<Real> token_conv(const Tensor<Real>&, const Tensor<Real>&);                \
  template std::pair<Tensor<Real>, TIMState<Real>> tim_update(                               \
      const TIMState<Real>&, const Tensor<Real>&, const Tensor<Real>&, double);              \
  template Tensor<Real> spiking_attention(const Tensor<Real>&, const Tensor<Real>&,          \
                                          const Tensor<Real>&, std::size_t, double);         \
  template Tensor<Real> delta_kernel(std::size_t, std::size_t, double, Rng*);

SPIKETIM_INSTANTIATE_ATTENTION(float)
SPIKETIM_INSTANTIATE_ATTENTION(double)

}  // namespace spiketim
