#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "spiketim/attention.hpp"
#include "spiketim/lif.hpp"
#include "spiketim/tensor.hpp"

namespace spiketim {

struct GradCheckEntry {
  std::string group;
  std::string name;  // op or parameter path
  double error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return error <= tolerance; }
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  bool passed() const;
  std::vector<std::string> groups() const;  // in first-seen order
  // Largest error in `group` (0 when empty).
  const GradCheckEntry* worst(const std::string& group) const;
  std::vector<GradCheckEntry> failures() const;
};

inline constexpr const char* kGroupOps = "tensor ops";
inline constexpr const char* kGroupLif = "LIF surrogate";
inline constexpr const char* kGroupTim = "TIM recurrence";
inline constexpr const char* kGroupEndToEnd = "end-to-end";

struct GradCheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-3;  // central-difference h for single ops
  // h for networks. The smooth twin is only C1 (the triangular surrogate has
  // corners), so a stencil straddling a corner has O(h) error; thousands of
  // neurons make that likely at h = 1e-3.
  double net_step = 1e-5;
  double op_tolerance = 1e-4;   // single ops
  double net_tolerance = 1e-3;  // composite networks (LIF MLP, TIM block, model)
  std::size_t max_coords = 24;  // sampled coordinates per tensor in network checks
  LIFConfig lif;                // spike_forward is forced to the smooth twin
  TIMConfig tim;                // alpha and kernel size of the TIM checks
};

struct GradProbe {
  std::string name;
  Tensor<double>* tensor;
};

// Compares the autodiff gradient of `loss` against central differences for
// every probe. The error of a probe is ||g_auto - g_fd|| / max(||g_auto||,
// ||g_fd||, 1e-8) over the checked coordinates (all of them, or `max_coords`
// sampled ones when max_coords > 0). `loss` must rebuild the graph from the
// probes on each call; LIF reset gates are recorded on the first call and
// replayed afterwards.
std::vector<GradCheckEntry> finite_difference_check(const std::string& group,
                                                    const std::function<Tensor<double>()>& loss,
                                                    const std::vector<GradProbe>& probes,
                                                    double step, double tolerance,
                                                    std::size_t max_coords, std::mt19937_64& rng);

// Runs the full suite: tensor ops, LIF surrogate conformance and gradient
// flow, the TIM recurrence, and an end-to-end micro model.
GradCheckReport run_gradcheck(const GradCheckOptions& options);

}  // namespace spiketim
