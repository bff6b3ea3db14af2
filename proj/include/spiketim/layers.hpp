#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "spiketim/ops.hpp"
#include "spiketim/tensor.hpp"

namespace spiketim {

using Rng = std::mt19937_64;

// Non-owning view of a module tensor under a stable dotted path.
template <typename Real>
struct NamedTensor {
  std::string name;
  Tensor<Real>* tensor;
};

template <typename Real>
using NamedTensors = std::vector<NamedTensor<Real>>;

// Uniform(-bound, bound) leaf with requires_grad set.
template <typename Real>
Tensor<Real> uniform_parameter(Shape shape, double bound, Rng& rng);

template <typename Real>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features, bool with_bias, Rng& rng);

  Tensor<Real> operator()(const Tensor<Real>& x) const { return linear(x, weight, bias); }
  void collect_parameters(const std::string& prefix, NamedTensors<Real>& out);

  Tensor<Real> weight;  // [out, in]
  Tensor<Real> bias;    // [out] or undefined
};

template <typename Real>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_size, Rng& rng);

  // Stride 1, 'same' zero padding.
  Tensor<Real> operator()(const Tensor<Real>& x) const;
  void collect_parameters(const std::string& prefix, NamedTensors<Real>& out);

  Tensor<Real> weight;  // [out, in, k, k]
};

template <typename Real>
class BatchNorm {
 public:
  static constexpr std::size_t kLastAxis = static_cast<std::size_t>(-1);

  BatchNorm() = default;
  BatchNorm(std::size_t channels, std::size_t channel_axis);

  Tensor<Real> operator()(const Tensor<Real>& x);
  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }
  void collect_parameters(const std::string& prefix, NamedTensors<Real>& out);
  void collect_buffers(const std::string& prefix, NamedTensors<Real>& out);

  Tensor<Real> gamma;
  Tensor<Real> beta;
  Tensor<Real> running_mean;
  Tensor<Real> running_var;

 private:
  std::size_t channel_axis_ = 1;
  bool training_ = true;
};

extern template class Linear<float>;
extern template class Linear<double>;
extern template class Conv2d<float>;
extern template class Conv2d<double>;
extern template class BatchNorm<float>;
extern template class BatchNorm<double>;

}  // namespace spiketim
