#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "spiketim/events.hpp"
#include "spiketim/model.hpp"
#include "spiketim/optim.hpp"

namespace spiketim {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double lr0 = 0.005;
  double lr_min = 0.0;
  AdamWConfig adamw;
  std::size_t warmup_epochs = 0;  // linear ramp into the cosine schedule; 0 = off
  double grad_clip = 0.0;         // global L2 norm; 0 = off
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Learning rate for `epoch` including the optional warmup.
double scheduled_lr(const TrainConfig& config, std::size_t epoch);

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

using ConfusionMatrix = std::vector<std::vector<std::uint64_t>>;  // [true][predicted]

struct EvalResult {
  double accuracy = 0.0;
  ConfusionMatrix confusion;
  std::uint64_t total() const;
};

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  EvalResult final_eval;
};

// Accuracy and confusion matrix of row-major logits [n, classes]. The
// prediction is the argmax, ties broken toward the lower class index.
EvalResult score_logits(const std::vector<double>& logits, std::size_t num_classes,
                        const std::vector<int>& labels);

// One pass over `indices` in a seed-shuffled order with a fresh state per
// batch. Returns the mean batch loss. Throws NumericError on a non-finite
// loss, naming the learning rate and the largest gradient norms.
template <typename Real>
double train_epoch(SpikingTransformer<Real>& model, const Dataset& data,
                   const std::vector<std::size_t>& indices, AdamW<Real>& optimizer, double lr,
                   const TrainConfig& config, std::mt19937_64& rng);

// Eval-mode forward without gradient recording. ContractError when empty.
// With threads > 1 the indices are sharded over copies of the model; eval-mode
// logits do not depend on batch composition, so the result is unchanged.
template <typename Real>
EvalResult evaluate(SpikingTransformer<Real>& model, const Dataset& data,
                    const std::vector<std::size_t>& indices, std::size_t batch_size = 16,
                    std::size_t threads = 1);

struct TrainHooks {
  // Runs after each epoch; metrics.epoch is 0-based, so epoch + 1 epochs
  // are complete. Optimizer and rng already hold the post-epoch state.
  std::function<void(const EpochMetrics&)> on_epoch;
};

// Runs epochs [start_epoch, config.epochs). The optimizer and rng carry the
// state of any earlier epochs, so resuming from a checkpoint continues the
// unbroken run exactly.
template <typename Real>
TrainReport train(SpikingTransformer<Real>& model, const Dataset& data,
                  const std::vector<std::size_t>& train_indices,
                  const std::vector<std::size_t>& val_indices, const TrainConfig& config,
                  AdamW<Real>& optimizer, std::mt19937_64& rng, std::size_t start_epoch = 0,
                  const TrainHooks& hooks = {}, std::size_t eval_threads = 1);

// A model with the same config, weights and BN statistics.
template <typename Real>
SpikingTransformer<Real> clone_model(SpikingTransformer<Real>& model);

std::string rng_state(const std::mt19937_64& rng);
std::mt19937_64 rng_from_state(const std::string& state);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& rows);
std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& path);
nlohmann::json confusion_to_json(const ConfusionMatrix& confusion);

}  // namespace spiketim
