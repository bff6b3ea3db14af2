#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "spiketim/tensor.hpp"

namespace spiketim {

struct Event {
  std::uint32_t t = 0;  // microseconds
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::uint8_t p = 0;  // polarity, 0 or 1

  bool operator==(const Event&) const = default;
};

struct EventStream {
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  std::int32_t label = -1;  // -1: unlabelled
  std::vector<Event> events;

  // Throws ParseError (offset 0) when timestamps decrease or a coordinate
  // or polarity is out of range.
  void validate() const;
  bool operator==(const EventStream&) const = default;
};

// EVS1: "EVS1" | u16 version | u16 width | u16 height | i32 label | u64 count
// then count x (u32 t, u16 x, u16 y, u8 p, u8 pad), little-endian.
inline constexpr std::uint16_t kEventFormatVersion = 1;
inline constexpr std::size_t kEventHeaderBytes = 4 + 2 + 2 + 2 + 4 + 8;
inline constexpr std::size_t kEventRecordBytes = 10;

std::vector<std::uint8_t> encode_events(const EventStream& stream);
// Throws ParseError carrying the byte offset of the first bad field.
EventStream decode_events(const std::vector<std::uint8_t>& bytes);

// CSV: optional "# width=W height=H label=L" line, then header "t,x,y,p".
// Missing geometry is inferred from the largest coordinates.
std::string encode_events_csv(const EventStream& stream);
EventStream decode_events_csv(const std::string& text);

// Picks the format from the extension (.csv, anything else is EVS1).
EventStream read_events(const std::filesystem::path& path);
void write_events(const std::filesystem::path& path, const EventStream& stream);

enum class Accumulate { kCount, kBinary };

// Event frames [T, 2, H, W] stored in single precision.
struct FrameTensor {
  std::size_t time_steps = 0, height = 0, width = 0;
  std::vector<float> data;

  static constexpr std::size_t kChannels = 2;
  std::size_t numel() const { return time_steps * kChannels * height * width; }
  float at(std::size_t t, std::size_t c, std::size_t y, std::size_t x) const {
    return data[((t * kChannels + c) * height + y) * width + x];
  }
  bool operator==(const FrameTensor&) const = default;
};

struct BinningResult {
  FrameTensor frames;
  std::string warning;  // empty unless the time window was degenerate
};

// Splits [t_min, t_max] into T equal bins (last one right-closed) and sum-pools
// the sensor down to H x W by an integer factor. Polarity picks the channel.
BinningResult bin_to_frames(const EventStream& stream, std::size_t time_steps, std::size_t height,
                            std::size_t width, Accumulate mode = Accumulate::kCount);

// Bin index of timestamp t for a window [t_min, t_max].
std::size_t time_bin(std::uint32_t t, std::uint32_t t_min, std::uint32_t t_max,
                     std::size_t time_steps);

struct Sample {
  FrameTensor frames;
  int label = 0;
};
using Dataset = std::vector<Sample>;

// Two-class temporal order task: a horizontal bar (A) and a vertical bar (B)
// of equal event budget appear one after the other. Class 0 shows A first,
// class 1 shows B first.
struct SyntheticTaskSpec {
  std::size_t num_samples = 1200;
  std::size_t time_steps = 10;
  std::size_t sensor_size = 16;
  std::size_t frame_size = 8;
  std::size_t bar_length = 4;           // in frame cells
  std::size_t pattern_events = 8;       // per step while a bar shows
  std::size_t noise_events = 20;        // per step, uniform over the sensor
  // 0: A fills the first half, B the second. Otherwise each bar is a burst of
  // this many steps at a random onset, with at least one noise step between;
  // steps without a bar get pattern_events extra noise events.
  std::size_t burst_steps = 2;
  std::uint32_t step_duration_us = 1000;
  std::uint64_t seed = 0;

  void validate() const;
};

// Labels alternate 0, 1, 0, ... so classes are balanced.
std::vector<EventStream> synth_temporal_order_streams(const SyntheticTaskSpec& spec);
Dataset synth_temporal_order(const SyntheticTaskSpec& spec);

// Deterministic disjoint split of indices [0, n) into (train, val).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double train_fraction, double val_fraction, std::uint64_t seed);

// Stacks samples[indices] into frames [T, B, 2, H, W] and their labels.
template <typename Real>
Tensor<Real> stack_frames(const Dataset& data, const std::vector<std::size_t>& indices);

}  // namespace spiketim
