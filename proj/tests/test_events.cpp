#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "blind_oracle.hpp"
#include "spiketim/errors.hpp"
#include "spiketim/events.hpp"
#include "test_support.hpp"

using namespace spiketim;

namespace {

EventStream random_stream(std::mt19937_64& rng, std::size_t n, std::uint16_t w = 16,
                          std::uint16_t h = 16) {
  EventStream s;
  s.width = w;
  s.height = h;
  s.label = static_cast<std::int32_t>(rng() % 3) - 1;
  std::uint32_t t = static_cast<std::uint32_t>(rng() % 50);
  for (std::size_t i = 0; i < n; ++i) {
    t += static_cast<std::uint32_t>(rng() % 40);
    s.events.push_back({t, static_cast<std::uint16_t>(rng() % w),
                        static_cast<std::uint16_t>(rng() % h), static_cast<std::uint8_t>(rng() % 2)});
  }
  return s;
}

double frame_sum(const FrameTensor& f) {
  double total = 0;
  for (float v : f.data) total += v;
  return total;
}

void put_u16(std::vector<std::uint8_t>& b, std::size_t at, std::uint16_t v) {
  b[at] = static_cast<std::uint8_t>(v & 0xff);
  b[at + 1] = static_cast<std::uint8_t>(v >> 8);
}

}  // namespace

TEST(EVS1, EmptyStreamRoundTrips) {
  EventStream s;
  s.width = 4;
  s.height = 3;
  auto bytes = encode_events(s);
  EXPECT_EQ(bytes.size(), kEventHeaderBytes);
  EventStream back = decode_events(bytes);
  EXPECT_EQ(back, s);
  EXPECT_TRUE(back.events.empty());
}

TEST(EVS1, HeaderLayout) {
  EventStream s;
  s.width = 0x0102;
  s.height = 7;
  s.label = -1;
  s.events.push_back({0x01020304, 5, 6, 1});
  auto b = encode_events(s);
  ASSERT_EQ(b.size(), kEventHeaderBytes + kEventRecordBytes);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "EVS1");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[6], 0x02);
  EXPECT_EQ(b[7], 0x01);
  EXPECT_EQ(b[10], 0xff);
  EXPECT_EQ(b[14], 1);
  EXPECT_EQ(b[22], 0x04);
  EXPECT_EQ(b[25], 0x01);
  EXPECT_EQ(b[26], 5);
  EXPECT_EQ(b[30], 1);
  EXPECT_EQ(b[31], 0);
}

TEST(EVS1, FileRoundTripIsByteExact) {
  auto dir = spiketim::testing::scratch_dir("evs_roundtrip");
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    EventStream s = random_stream(rng, rng() % 300);
    write_events(dir / "a.evs", s);
    EventStream back = read_events(dir / "a.evs");
    EXPECT_EQ(back, s);
    write_events(dir / "b.evs", back);
    std::ifstream a(dir / "a.evs", std::ios::binary), b(dir / "b.evs", std::ios::binary);
    std::string ba((std::istreambuf_iterator<char>(a)), {}), bb((std::istreambuf_iterator<char>(b)), {});
    EXPECT_EQ(ba, bb);
  }
}

TEST(EVS1, CoordinateAtWidthRejectedWithOffset) {
  EventStream s;
  s.width = 8;
  s.height = 8;
  s.events = {{1, 2, 3, 0}, {2, 4, 4, 1}};
  auto b = encode_events(s);
  const std::size_t second = kEventHeaderBytes + kEventRecordBytes;
  put_u16(b, second + 4, 8);
  try {
    decode_events(b);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), second);
  }
}

TEST(EVS1, BadMagicAndTruncationRejected) {
  std::mt19937_64 rng(2);
  auto b = encode_events(random_stream(rng, 5));
  auto bad = b;
  bad[0] = 'X';
  EXPECT_THROW(decode_events(bad), ParseError);
  for (std::size_t cut = 0; cut < b.size(); ++cut) {
    EXPECT_THROW(decode_events(std::vector<std::uint8_t>(b.begin(), b.begin() + cut)), ParseError);
  }
  auto extra = b;
  extra.push_back(0);
  EXPECT_THROW(decode_events(extra), ParseError);
}

TEST(EVS1, FuzzedBytesNeverCrash) {
  std::mt19937_64 rng(3);
  std::size_t rejected = 0;
  for (int trial = 0; trial < 3000; ++trial) {
    auto b = encode_events(random_stream(rng, rng() % 20));
    const int flips = 1 + static_cast<int>(rng() % 4);
    for (int k = 0; k < flips; ++k) b[rng() % b.size()] ^= static_cast<std::uint8_t>(1 + rng() % 255);
    if (rng() % 5 == 0) b.resize(rng() % (b.size() + 1));
    try {
      EventStream s = decode_events(b);
      // A corruption that still parses must describe exactly these bytes.
      EXPECT_EQ(encode_events(s), b);
    } catch (const ParseError&) {
      ++rejected;
    }
  }
  EXPECT_GT(rejected, 1000u);
}

TEST(CSV, RoundTripAndInference) {
  std::mt19937_64 rng(4);
  EventStream s = random_stream(rng, 50);
  EXPECT_EQ(decode_events_csv(encode_events_csv(s)), s);
  EventStream bare = decode_events_csv("t,x,y,p\n0,3,1,0\n5,0,6,1\n");
  EXPECT_EQ(bare.width, 4);
  EXPECT_EQ(bare.height, 7);
  EXPECT_EQ(bare.label, -1);
  EXPECT_THROW(decode_events_csv("t,x,y,p\n0,3,1,2\n"), ParseError);
  EXPECT_THROW(decode_events_csv("0,3,1,0\n"), ParseError);

  auto dir = spiketim::testing::scratch_dir("csv_file");
  write_events(dir / "s.csv", s);
  EXPECT_EQ(read_events(dir / "s.csv"), s);
}

TEST(Binning, HandBinIndex) {
  EXPECT_EQ(time_bin(37, 0, 100, 10), 3u);
  EventStream s;
  s.width = s.height = 2;
  s.events = {{0, 0, 0, 0}, {37, 1, 0, 1}, {100, 0, 1, 0}};
  auto f = bin_to_frames(s, 10, 2, 2).frames;
  EXPECT_EQ(f.at(3, 1, 0, 1), 1.0f);
  EXPECT_EQ(f.at(9, 0, 1, 0), 1.0f);  // right-closed last bin
  EXPECT_EQ(f.at(0, 0, 0, 0), 1.0f);
}

TEST(Binning, ConservesCountsForAnyStream) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    EventStream s = random_stream(rng, rng() % 500);
    const std::size_t steps = 1 + rng() % 12;
    const std::size_t size = (rng() % 2) ? 16 : (rng() % 2 ? 8 : 4);
    auto r = bin_to_frames(s, steps, size, size);
    EXPECT_EQ(frame_sum(r.frames), static_cast<double>(s.events.size()));
  }
}

TEST(Binning, MonotoneInTime) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::uint32_t lo = static_cast<std::uint32_t>(rng() % 1000);
    const std::uint32_t hi = lo + 1 + static_cast<std::uint32_t>(rng() % 100000);
    const std::size_t steps = 1 + rng() % 20;
    std::uint32_t a = lo + static_cast<std::uint32_t>(rng() % (hi - lo + 1));
    std::uint32_t b = lo + static_cast<std::uint32_t>(rng() % (hi - lo + 1));
    if (a > b) std::swap(a, b);
    EXPECT_LE(time_bin(a, lo, hi, steps), time_bin(b, lo, hi, steps));
    EXPECT_LT(time_bin(b, lo, hi, steps), steps);
  }
}

TEST(Binning, BinaryModeClipsCounts) {
  std::mt19937_64 rng(7);
  EventStream s = random_stream(rng, 400);
  auto count = bin_to_frames(s, 5, 8, 8, Accumulate::kCount).frames;
  auto binary = bin_to_frames(s, 5, 8, 8, Accumulate::kBinary).frames;
  for (std::size_t i = 0; i < count.data.size(); ++i) {
    EXPECT_TRUE(binary.data[i] == 0.0f || binary.data[i] == 1.0f);
    EXPECT_LE(binary.data[i], count.data[i]);
    EXPECT_EQ(binary.data[i] > 0, count.data[i] > 0);
  }
}

TEST(Binning, DegenerateWindowWarns) {
  EventStream s;
  s.width = s.height = 4;
  s.events = {{5, 0, 0, 0}, {5, 1, 1, 1}};
  auto r = bin_to_frames(s, 4, 4, 4);
  EXPECT_FALSE(r.warning.empty());
  EXPECT_EQ(r.frames.at(0, 0, 0, 0), 1.0f);
  EXPECT_EQ(r.frames.at(0, 1, 1, 1), 1.0f);
  EXPECT_EQ(frame_sum(r.frames), 2.0);
}

TEST(Binning, NonIntegerDownscaleRejected) {
  EventStream s;
  s.width = s.height = 16;
  EXPECT_THROW(bin_to_frames(s, 2, 6, 6), ConfigError);
  EXPECT_THROW(bin_to_frames(s, 2, 8, 4), ConfigError);
}

TEST(Synthetic, SameSeedIsBitIdentical) {
  SyntheticTaskSpec spec;
  spec.num_samples = 40;
  spec.seed = 9;
  auto a = synth_temporal_order_streams(spec);
  auto b = synth_temporal_order_streams(spec);
  EXPECT_EQ(a, b);
  spec.seed = 10;
  EXPECT_NE(a, synth_temporal_order_streams(spec));
}

TEST(Synthetic, LabelsBalanced) {
  SyntheticTaskSpec spec;
  spec.num_samples = 1000;
  auto data = synth_temporal_order(spec);
  std::size_t ones = 0;
  for (const auto& s : data) ones += s.label == 1;
  EXPECT_EQ(ones, 500u);
}

TEST(Synthetic, EveryStepHasTheSameBudget) {
  SyntheticTaskSpec spec;
  spec.num_samples = 50;
  for (const auto& s : synth_temporal_order(spec)) {
    const std::size_t per_step = FrameTensor::kChannels * spec.frame_size * spec.frame_size;
    for (std::size_t t = 0; t < spec.time_steps; ++t) {
      double total = 0;
      for (std::size_t i = 0; i < per_step; ++i) total += s.frames.data[t * per_step + i];
      EXPECT_EQ(total, double(spec.pattern_events + spec.noise_events));
    }
  }
}

namespace {

// Per step: 'A' for a horizontal bar, 'B' for a vertical one, '-' otherwise.
// Needs a single noise event per step, so a bar step is the only way to get
// 8 events into one row or column.
std::string bar_layout(const FrameTensor& f) {
  std::string layout;
  for (std::size_t t = 0; t < f.time_steps; ++t) {
    double best_row = 0, best_col = 0;
    for (std::size_t i = 0; i < f.height; ++i) {
      double row = 0, col = 0;
      for (std::size_t j = 0; j < f.width; ++j) {
        row += f.at(t, 0, i, j) + f.at(t, 1, i, j);
        col += f.at(t, 0, j, i) + f.at(t, 1, j, i);
      }
      best_row = std::max(best_row, row);
      best_col = std::max(best_col, col);
    }
    layout += best_row >= 8 && best_col < 8 ? 'A' : best_col >= 8 && best_row < 8 ? 'B' : '-';
  }
  return layout;
}

}  // namespace

TEST(Synthetic, BurstsComeInClassOrderWithAGap) {
  SyntheticTaskSpec spec;
  spec.num_samples = 200;
  spec.noise_events = 1;
  spec.seed = 21;
  std::set<std::size_t> onsets;
  for (const auto& s : synth_temporal_order(spec)) {
    const std::string layout = bar_layout(s.frames);
    const std::string first = s.label == 0 ? "AA" : "BB";
    const std::string second = s.label == 0 ? "BB" : "AA";
    const auto a = layout.find(first), b = layout.find(second);
    ASSERT_NE(a, std::string::npos) << layout;
    ASSERT_NE(b, std::string::npos) << layout;
    EXPECT_GE(b, a + 3) << layout;
    EXPECT_EQ(std::count(layout.begin(), layout.end(), '-'), 6) << layout;
    onsets.insert(a);
  }
  EXPECT_GT(onsets.size(), 3u);
}

TEST(Synthetic, HalfAndHalfLayout) {
  SyntheticTaskSpec spec;
  spec.num_samples = 4;
  spec.burst_steps = 0;
  spec.noise_events = 1;
  for (const auto& s : synth_temporal_order(spec)) {
    EXPECT_EQ(bar_layout(s.frames), s.label == 0 ? "AAAAABBBBB" : "BBBBBAAAAA");
  }
  spec.burst_steps = 5;
  EXPECT_THROW(synth_temporal_order(spec), ConfigError);
}

TEST(Synthetic, ClassConditionalFrameStatisticsAgree) {
  // Per-frame summaries averaged over time, one value per sample; the class
  // means must agree within 3 standard errors.
  SyntheticTaskSpec spec;
  spec.num_samples = 1000;
  spec.seed = 11;
  auto data = synth_temporal_order(spec);
  const std::size_t n = spec.frame_size;
  auto summaries = [&](const FrameTensor& f) {
    std::vector<double> out(4, 0.0);
    for (std::size_t t = 0; t < f.time_steps; ++t) {
      double total = 0, occupied = 0, best_row = 0, best_col = 0;
      for (std::size_t y = 0; y < n; ++y) {
        double row = 0;
        for (std::size_t x = 0; x < n; ++x) {
          const double v = f.at(t, 0, y, x) + f.at(t, 1, y, x);
          total += v;
          occupied += v > 0;
          row += v;
        }
        best_row = std::max(best_row, row);
      }
      for (std::size_t x = 0; x < n; ++x) {
        double col = 0;
        for (std::size_t y = 0; y < n; ++y) col += f.at(t, 0, y, x) + f.at(t, 1, y, x);
        best_col = std::max(best_col, col);
      }
      out[0] += total / f.time_steps;
      out[1] += occupied / f.time_steps;
      out[2] += best_row / f.time_steps;
      out[3] += best_col / f.time_steps;
    }
    return out;
  };
  std::vector<std::vector<double>> by_class[2];
  for (const auto& s : data) by_class[s.label].push_back(summaries(s.frames));
  for (std::size_t k = 0; k < 4; ++k) {
    double mean[2], var[2];
    for (int c = 0; c < 2; ++c) {
      const auto& rows = by_class[c];
      mean[c] = 0;
      for (const auto& r : rows) mean[c] += r[k] / rows.size();
      var[c] = 0;
      for (const auto& r : rows) var[c] += (r[k] - mean[c]) * (r[k] - mean[c]) / (rows.size() - 1);
    }
    const double se = std::sqrt(var[0] / by_class[0].size() + var[1] / by_class[1].size());
    EXPECT_LE(std::abs(mean[0] - mean[1]), 3 * se + 1e-12) << "statistic " << k;
  }
}

TEST(Synthetic, OrderBlindOracleIsAtChance) {
  SyntheticTaskSpec spec;
  spec.seed = 12;
  auto data = synth_temporal_order(spec);
  auto [train, val] = split_indices(data.size(), 1000.0 / 1200, 200.0 / 1200, 1);
  EXPECT_LE(spiketim::testing::blind_oracle_accuracy(data, train, val, 500), 0.55);
}

TEST(Split, NinetyTen) {
  auto [train, val] = split_indices(100, 0.9, 0.1, 3);
  EXPECT_EQ(train.size(), 90u);
  EXPECT_EQ(val.size(), 10u);
}

TEST(Split, DisjointExhaustiveDeterministic) {
  auto [train, val] = split_indices(257, 0.7, 0.3, 4);
  std::set<std::size_t> all(train.begin(), train.end());
  for (auto i : val) EXPECT_TRUE(all.insert(i).second);
  EXPECT_EQ(all.size(), 257u);
  EXPECT_EQ(*all.rbegin(), 256u);
  auto again = split_indices(257, 0.7, 0.3, 4);
  EXPECT_EQ(again.first, train);
  EXPECT_EQ(again.second, val);
}

TEST(Split, EmptySideRejected) {
  EXPECT_THROW(split_indices(5, 1.0, 0.0, 1), ConfigError);
  EXPECT_THROW(split_indices(5, 0.5, 0.2, 1), ConfigError);
}

TEST(StackFrames, Layout) {
  SyntheticTaskSpec spec;
  spec.num_samples = 4;
  auto data = synth_temporal_order(spec);
  auto t = stack_frames<float>(data, {2, 0});
  EXPECT_EQ(t.shape(), (Shape{10, 2, 2, 8, 8}));
  const std::size_t per_step = 2 * 8 * 8;
  for (std::size_t i = 0; i < per_step; ++i) {
    EXPECT_EQ(t.data()[(3 * 2 + 1) * per_step + i], data[0].frames.data[3 * per_step + i]);
  }
}
