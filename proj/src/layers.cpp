#include "spiketim/layers.hpp"

#include <cmath>

namespace spiketim {

template <typename Real>
Tensor<Real> uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Real> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<Real>(dist(rng));
  return Tensor<Real>(std::move(shape), std::move(data), true);
}

template <typename Real>
Linear<Real>::Linear(std::size_t in_features, std::size_t out_features, bool with_bias, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight = uniform_parameter<Real>({out_features, in_features}, bound, rng);
  if (with_bias) bias = uniform_parameter<Real>({out_features}, bound, rng);
}

template <typename Real>
void Linear<Real>::collect_parameters(const std::string& prefix, NamedTensors<Real>& out) {
  out.push_back({prefix + ".weight", &weight});
  if (bias.defined()) out.push_back({prefix + ".bias", &bias});
}

template <typename Real>
Conv2d<Real>::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_size,
                     Rng& rng) {
  const double fan_in = static_cast<double>(in_channels * kernel_size * kernel_size);
  weight = uniform_parameter<Real>({out_channels, in_channels, kernel_size, kernel_size},
                                   1.0 / std::sqrt(fan_in), rng);
}

template <typename Real>
Tensor<Real> Conv2d<Real>::operator()(const Tensor<Real>& x) const {
  return conv2d(x, weight, 1, weight.shape()[2] / 2);
}

template <typename Real>
void Conv2d<Real>::collect_parameters(const std::string& prefix, NamedTensors<Real>& out) {
  out.push_back({prefix + ".weight", &weight});
}

template <typename Real>
BatchNorm<Real>::BatchNorm(std::size_t channels, std::size_t channel_axis)
    : gamma(Tensor<Real>::full({channels}, Real(1), true)),
      beta(Tensor<Real>::zeros({channels}, true)),
      running_mean(Tensor<Real>::zeros({channels})),
      running_var(Tensor<Real>::full({channels}, Real(1))),
      channel_axis_(channel_axis) {}

template <typename Real>
Tensor<Real> BatchNorm<Real>::operator()(const Tensor<Real>& x) {
  BatchNormOptions options;
  options.channel_axis = channel_axis_ == kLastAxis ? x.rank() - 1 : channel_axis_;
  options.training = training_;
  return batchnorm(x, gamma, beta, running_mean, running_var, options);
}

template <typename Real>
void BatchNorm<Real>::collect_parameters(const std::string& prefix, NamedTensors<Real>& out) {
  out.push_back({prefix + ".gamma", &gamma});
  out.push_back({prefix + ".beta", &beta});
}

template <typename Real>
void BatchNorm<Real>::collect_buffers(const std::string& prefix, NamedTensors<Real>& out) {
  out.push_back({prefix + ".running_mean", &running_mean});
  out.push_back({prefix + ".running_var", &running_var});
}

template Tensor<float> uniform_parameter(Shape, double, Rng&);
template Tensor<double> uniform_parameter(Shape, double, Rng&);
template class Linear<float>;
template class Linear<double>;
template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm<float>;
template class BatchNorm<double>;

}  // namespace spiketim
