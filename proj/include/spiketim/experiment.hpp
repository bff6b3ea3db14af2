#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "spiketim/events.hpp"
#include "spiketim/model.hpp"
#include "spiketim/training.hpp"

namespace spiketim {

struct DataConfig {
  enum class Source { kSynthetic, kFiles };
  Source source = Source::kSynthetic;
  SyntheticTaskSpec synthetic;             // time_steps and frame_size come from the model
  std::vector<std::filesystem::path> files;  // EVS1/CSV files or directories of them
  Accumulate accumulate = Accumulate::kCount;
  double train_fraction = 1000.0 / 1200.0;
  std::uint64_t split_seed = 1;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig training;
  DataConfig data;
  std::filesystem::path output_dir;
  std::size_t save_every = 0;  // epochs between checkpoints; 0 = final only
};

// Canonical JSON of a resolved config (what checkpoints store).
nlohmann::json to_json(const RunConfig& config);

// Strict schema. `training.alpha` is accepted as an alias for
// `model.tim.alpha`. Relative paths resolve against `base_dir`. Every data
// path must exist. A seed must be present unless `seed_override` is given.
RunConfig run_config_from_json(nlohmann::json j, const std::filesystem::path& base_dir,
                               std::optional<std::uint64_t> seed_override = std::nullopt);

// Applies "dotted.path=value"; the value is parsed as JSON when possible and
// kept as a string otherwise. Intermediate objects are created as needed.
void apply_override(nlohmann::json& j, const std::string& assignment);

// Seed precedence: flag, then SPIKETIM_SEED, then the config file.
std::optional<std::uint64_t> resolve_seed_override(std::optional<std::uint64_t> flag);

// Reads the file, applies overrides and the seed precedence, validates.
// Throws ConfigError naming the path when it cannot be read.
RunConfig load_run_config(const std::filesystem::path& path,
                          const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed_flag);

struct PreparedData {
  Dataset samples;
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

PreparedData prepare_data(const RunConfig& config);

struct RunOptions {
  std::optional<std::filesystem::path> resume;  // checkpoint to continue from
  bool write_outputs = true;  // metrics.csv, confusion.json, checkpoints
  std::size_t threads = 1;    // evaluation workers
  std::ostream* log = nullptr;
};

struct RunResult {
  TrainReport report;
  std::uint64_t parameter_count = 0;
};

// Trains from scratch or from a checkpoint. Model weights use seed
// training.seed; the batch order uses an rng derived from the same seed.
RunResult run_experiment(const RunConfig& config, const PreparedData& data,
                         const RunOptions& options = {});

}  // namespace spiketim
