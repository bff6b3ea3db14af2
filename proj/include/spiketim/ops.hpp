#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "spiketim/tensor.hpp"

namespace spiketim {

// Elementwise arithmetic with numpy-style broadcasting.
template <typename Real> Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real> Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real> Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b);

template <typename Real> Tensor<Real> scale(const Tensor<Real>& a, Real factor);
template <typename Real> Tensor<Real> add_scalar(const Tensor<Real>& a, Real value);

// Batched product over the last two axes; leading axes broadcast.
template <typename Real> Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);

// y = x W^T + bias over the last axis of x. `bias` may be undefined.
template <typename Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& weight, const Tensor<Real>& bias);

template <typename Real> Tensor<Real> reshape(const Tensor<Real>& a, Shape shape);
template <typename Real>
Tensor<Real> permute(const Tensor<Real>& a, const std::vector<std::size_t>& axes);
template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& a, std::size_t axis0, std::size_t axis1);
// a[index, ...]
template <typename Real> Tensor<Real> select(const Tensor<Real>& a, std::size_t index);
// Joins equally shaped tensors along a new leading axis.
template <typename Real> Tensor<Real> stack(const std::vector<Tensor<Real>>& parts);

template <typename Real> Tensor<Real> sum(const Tensor<Real>& a);
template <typename Real> Tensor<Real> mean(const Tensor<Real>& a);
// Mean over one axis, which is removed from the result.
template <typename Real> Tensor<Real> mean_axis(const Tensor<Real>& a, std::size_t axis);

// Per-channel cross-correlation along the last axis of x[..., C, L] with
// kernel[C, k], k odd, zero 'same' padding.
template <typename Real>
Tensor<Real> conv1d_depthwise(const Tensor<Real>& x, const Tensor<Real>& kernel);

// Cross-correlation. x is [C_in, H, W] or [B, C_in, H, W]; kernel is
// [C_out, C_in, kh, kw].
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& kernel, std::size_t stride,
                    std::size_t padding);

// 2x2 window, stride 2, over the last two axes.
template <typename Real> Tensor<Real> max_pool2d(const Tensor<Real>& x);

struct BatchNormOptions {
  std::size_t channel_axis = 1;
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Normalizes over every axis except `channel_axis`. In training mode the batch
// statistics are used and folded into the running buffers.
template <typename Real>
Tensor<Real> batchnorm(const Tensor<Real>& x, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                       Tensor<Real>& running_mean, Tensor<Real>& running_var,
                       const BatchNormOptions& options);

// Mean negative log-likelihood of softmax(logits[B, C]) at `labels`.
template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, const std::vector<int>& labels);

// A differentiable op whose backward is supplied by the caller instead of
// derived from the forward computation.
template <typename Real>
struct CustomGradFns {
  // Computes the output from input values. Runs with recording off.
  std::function<Tensor<Real>(const std::vector<Tensor<Real>>& inputs)> forward;
  // (saved inputs, output, upstream grad) -> one gradient per input, each with
  // the input's element count.
  std::function<std::vector<std::vector<Real>>(const std::vector<Tensor<Real>>& inputs,
                                               const Tensor<Real>& output,
                                               std::span<const Real> upstream)>
      backward;
};

template <typename Real>
using DifferentiableOp = std::function<Tensor<Real>(const std::vector<Tensor<Real>>&)>;

template <typename Real>
DifferentiableOp<Real> custom_grad(CustomGradFns<Real> fns);

namespace fault_injection {
// Multiplies the conv2d kernel gradient. Test hook for the gradient checker;
// stays at 1 in normal operation.
void set_conv2d_kernel_grad_scale(double factor);
double conv2d_kernel_grad_scale();
}  // namespace fault_injection

}  // namespace spiketim
