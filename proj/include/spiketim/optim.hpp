#pragma once

#include <cstdint>
#include <vector>

#include "spiketim/layers.hpp"
#include "spiketim/tensor.hpp"

namespace spiketim {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled-weight-decay Adam:
//   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
//   p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
template <typename Real>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig config) : config_(config) {}

  // Parameters without a gradient are treated as having a zero gradient.
  // Throws ConfigError when lr < 0.
  void step(const NamedTensors<Real>& params, double lr);

  const AdamWConfig& config() const { return config_; }
  std::uint64_t step_count() const { return step_count_; }
  // Moments, one per parameter in the order passed to step(). Empty before
  // the first step.
  std::vector<Tensor<Real>>& first_moments() { return first_; }
  std::vector<Tensor<Real>>& second_moments() { return second_; }
  void restore(std::uint64_t step_count, std::vector<Tensor<Real>> first,
               std::vector<Tensor<Real>> second);

 private:
  AdamWConfig config_;
  std::uint64_t step_count_ = 0;
  std::vector<Tensor<Real>> first_;
  std::vector<Tensor<Real>> second_;
};

// lr_min + (lr0 - lr_min) * (1 + cos(pi * epoch / total_epochs)) / 2 for
// 0 <= epoch < total_epochs; ContractError otherwise.
double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr0, double lr_min = 0.0);

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace spiketim
