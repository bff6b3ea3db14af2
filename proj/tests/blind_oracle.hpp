#pragma once

#include <cmath>
#include <vector>

#include "spiketim/events.hpp"

namespace spiketim::testing {

// Features of a sample with the time axis summed away: 2 x H x W counts.
inline std::vector<double> time_summed(const FrameTensor& f) {
  const std::size_t per_step = FrameTensor::kChannels * f.height * f.width;
  std::vector<double> out(per_step, 0.0);
  for (std::size_t t = 0; t < f.time_steps; ++t)
    for (std::size_t i = 0; i < per_step; ++i) out[i] += f.data[t * per_step + i];
  return out;
}

// L2-regularised logistic regression on the time-summed frame, fitted by
// full-batch gradient descent on standardised features. Returns held-out
// accuracy. It sees everything but the order of events.
inline double blind_oracle_accuracy(const Dataset& data, const std::vector<std::size_t>& train,
                                    const std::vector<std::size_t>& val, int iterations = 2000,
                                    double lr = 0.5, double l2 = 1e-3) {
  const std::size_t dim = time_summed(data[train[0]].frames).size();
  std::vector<double> mean(dim, 0.0), sd(dim, 0.0);
  std::vector<std::vector<double>> xs;
  for (auto i : train) xs.push_back(time_summed(data[i].frames));
  for (const auto& x : xs)
    for (std::size_t j = 0; j < dim; ++j) mean[j] += x[j] / xs.size();
  for (const auto& x : xs)
    for (std::size_t j = 0; j < dim; ++j) sd[j] += (x[j] - mean[j]) * (x[j] - mean[j]) / xs.size();
  for (auto& s : sd) s = std::sqrt(s) + 1e-9;
  auto standardise = [&](std::vector<double> x) {
    for (std::size_t j = 0; j < dim; ++j) x[j] = (x[j] - mean[j]) / sd[j];
    return x;
  };
  for (auto& x : xs) x = standardise(x);

  std::vector<double> w(dim, 0.0);
  double b = 0.0;
  for (int it = 0; it < iterations; ++it) {
    std::vector<double> gw(dim, 0.0);
    double gb = 0.0;
    for (std::size_t n = 0; n < xs.size(); ++n) {
      double z = b;
      for (std::size_t j = 0; j < dim; ++j) z += w[j] * xs[n][j];
      const double err = 1.0 / (1.0 + std::exp(-z)) - data[train[n]].label;
      for (std::size_t j = 0; j < dim; ++j) gw[j] += err * xs[n][j] / xs.size();
      gb += err / xs.size();
    }
    for (std::size_t j = 0; j < dim; ++j) w[j] -= lr * (gw[j] + l2 * w[j]);
    b -= lr * gb;
  }

  std::size_t correct = 0;
  for (auto i : val) {
    const auto x = standardise(time_summed(data[i].frames));
    double z = b;
    for (std::size_t j = 0; j < dim; ++j) z += w[j] * x[j];
    correct += (z > 0 ? 1 : 0) == data[i].label;
  }
  return static_cast<double>(correct) / val.size();
}

}  // namespace spiketim::testing
