#include "spiketim/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "spiketim/errors.hpp"

namespace spiketim {

template <typename Real>
void AdamW<Real>::step(const NamedTensors<Real>& params, double lr) {
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0, got " + std::to_string(lr));
  if (first_.empty()) {
    for (const auto& p : params) {
      first_.push_back(Tensor<Real>::zeros(p.tensor->shape()));
      second_.push_back(Tensor<Real>::zeros(p.tensor->shape()));
    }
  }
  if (first_.size() != params.size()) {
    throw ContractError("AdamW: parameter list changed size between steps");
  }
  ++step_count_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<Real>& p = *params[i].tensor;
    if (p.shape() != first_[i].shape()) {
      throw ContractError("AdamW: moment shape mismatch for " + params[i].name);
    }
    auto data = p.mutable_data();
    auto m = first_[i].mutable_data();
    auto v = second_[i].mutable_data();
    const auto grad = p.grad();
    const bool has_grad = p.has_grad();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has_grad ? static_cast<double>(grad[j]) : 0.0;
      const double mj = b1 * m[j] + (1.0 - b1) * g;
      const double vj = b2 * v[j] + (1.0 - b2) * g * g;
      m[j] = static_cast<Real>(mj);
      v[j] = static_cast<Real>(vj);
      const double m_hat = mj / correction1;
      const double v_hat = vj / correction2;
      const double old = data[j];
      data[j] = static_cast<Real>(old - lr * m_hat / (std::sqrt(v_hat) + config_.eps) -
                                  lr * config_.weight_decay * old);
    }
  }
}

template <typename Real>
void AdamW<Real>::restore(std::uint64_t step_count, std::vector<Tensor<Real>> first,
                          std::vector<Tensor<Real>> second) {
  if (first.size() != second.size()) throw ContractError("AdamW: moment lists differ in length");
  step_count_ = step_count;
  first_ = std::move(first);
  second_ = std::move(second);
}

double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr0, double lr_min) {
  if (total_epochs == 0 || epoch >= total_epochs) {
    throw ContractError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(total_epochs) + ")");
  }
  const double progress = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return lr_min + (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace spiketim
