#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "spiketim/model.hpp"
#include "spiketim/optim.hpp"

namespace spiketim {

// File layout (little-endian):
//   "STIM" | u16 version | u64 length + canonical JSON run config
//   | u64 n, n x (u32 length + path, tensor)       parameters, sorted by path
//   | u64 n, n x (u32 length + path, tensor)       BN running statistics
//   | u8 has_optimizer [u64 step, per parameter: first moment, second moment]
//   | u32 epoch | u32 length + RNG engine state
inline constexpr char kCheckpointMagic[4] = {'S', 'T', 'I', 'M'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointInfo {
  nlohmann::json config;  // full run configuration; "model" holds the ModelConfig
  std::uint32_t epoch = 0;  // epochs completed
  std::string rng_state;
};

template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const CheckpointInfo& info,
                     SpikingTransformer<Real>& model, AdamW<Real>* optimizer);

// Reads only the header and config.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

// Restores weights (and optimizer moments when `optimizer` is non-null) into
// `model`, whose config must equal the stored "model" section. Throws
// LoadError naming the cause.
template <typename Real>
CheckpointInfo load_checkpoint(const std::filesystem::path& path, SpikingTransformer<Real>& model,
                               AdamW<Real>* optimizer);

}  // namespace spiketim
