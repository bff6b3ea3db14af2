#include "spiketim/events.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <sstream>

#include "spiketim/errors.hpp"

namespace spiketim {

namespace {

void put(std::vector<std::uint8_t>& out, std::uint64_t value, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint64_t take(int n, const char* what) {
    if (bytes_.size() - pos_ < static_cast<std::size_t>(n)) {
      throw ParseError(std::string("truncated while reading ") + what, pos_);
    }
    std::uint64_t value = 0;
    for (int i = 0; i < n; ++i) value |= std::uint64_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += n;
    return value;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void EventStream::validate() const {
  for (std::size_t i = 0; i < events.size(); ++i) {
    const Event& e = events[i];
    if (e.x >= width || e.y >= height) {
      throw ParseError("event " + std::to_string(i) + " at (" + std::to_string(e.x) + ", " +
                           std::to_string(e.y) + ") outside " + std::to_string(width) + "x" +
                           std::to_string(height),
                       0);
    }
    if (e.p > 1) throw ParseError("event " + std::to_string(i) + " has polarity > 1", 0);
    if (i > 0 && e.t < events[i - 1].t) {
      throw ParseError("event " + std::to_string(i) + " goes back in time", 0);
    }
  }
}

std::vector<std::uint8_t> encode_events(const EventStream& stream) {
  stream.validate();
  std::vector<std::uint8_t> out;
  out.reserve(kEventHeaderBytes + kEventRecordBytes * stream.events.size());
  for (char c : {'E', 'V', 'S', '1'}) out.push_back(static_cast<std::uint8_t>(c));
  put(out, kEventFormatVersion, 2);
  put(out, stream.width, 2);
  put(out, stream.height, 2);
  put(out, static_cast<std::uint32_t>(stream.label), 4);
  put(out, stream.events.size(), 8);
  for (const Event& e : stream.events) {
    put(out, e.t, 4);
    put(out, e.x, 2);
    put(out, e.y, 2);
    put(out, e.p, 1);
    put(out, 0, 1);
  }
  return out;
}

EventStream decode_events(const std::vector<std::uint8_t>& bytes) {
  ByteReader in(bytes);
  const std::uint64_t magic = in.take(4, "magic");
  if (magic != 0x31535645u) throw ParseError("bad magic (expected EVS1)", 0);
  const std::size_t version_at = in.pos();
  if (in.take(2, "version") != kEventFormatVersion) {
    throw ParseError("unsupported EVS version", version_at);
  }
  EventStream s;
  s.width = static_cast<std::uint16_t>(in.take(2, "width"));
  s.height = static_cast<std::uint16_t>(in.take(2, "height"));
  const std::size_t label_at = in.pos();
  s.label = static_cast<std::int32_t>(static_cast<std::uint32_t>(in.take(4, "label")));
  if (s.label < -1) throw ParseError("label below -1", label_at);
  const std::uint64_t count = in.take(8, "count");
  if (count > in.remaining() / kEventRecordBytes) {
    // Report the first record that cannot be complete.
    const std::size_t whole = in.remaining() / kEventRecordBytes;
    throw ParseError("count " + std::to_string(count) + " exceeds the " + std::to_string(whole) +
                         " complete records present",
                     in.pos() + whole * kEventRecordBytes);
  }
  if (count * kEventRecordBytes != in.remaining()) {
    throw ParseError("trailing bytes after " + std::to_string(count) + " records",
                     in.pos() + count * kEventRecordBytes);
  }
  s.events.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t at = in.pos();
    Event e;
    e.t = static_cast<std::uint32_t>(in.take(4, "t"));
    e.x = static_cast<std::uint16_t>(in.take(2, "x"));
    e.y = static_cast<std::uint16_t>(in.take(2, "y"));
    e.p = static_cast<std::uint8_t>(in.take(1, "p"));
    const auto pad = in.take(1, "pad");
    if (e.x >= s.width || e.y >= s.height) {
      throw ParseError("coordinate (" + std::to_string(e.x) + ", " + std::to_string(e.y) +
                           ") outside " + std::to_string(s.width) + "x" + std::to_string(s.height),
                       at);
    }
    if (e.p > 1) throw ParseError("polarity " + std::to_string(e.p) + " not 0 or 1", at + 8);
    if (pad != 0) throw ParseError("nonzero pad byte", at + 9);
    if (i > 0 && e.t < s.events[i - 1].t) throw ParseError("timestamp goes backwards", at);
    s.events[i] = e;
  }
  return s;
}

std::string encode_events_csv(const EventStream& stream) {
  stream.validate();
  std::ostringstream out;
  out << "# width=" << stream.width << " height=" << stream.height << " label=" << stream.label
      << "\nt,x,y,p\n";
  for (const Event& e : stream.events) {
    out << e.t << ',' << e.x << ',' << e.y << ',' << int(e.p) << '\n';
  }
  return out.str();
}

namespace {

template <typename T>
T parse_field(std::string_view text, std::size_t offset, const char* what) {
  T value{};
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || end != text.data() + text.size() || text.empty()) {
    throw ParseError(std::string("bad ") + what + " '" + std::string(text) + "'", offset);
  }
  return value;
}

}  // namespace

EventStream decode_events_csv(const std::string& text) {
  EventStream s;
  long width = -1, height = -1;
  bool header_seen = false;
  std::uint32_t max_x = 0, max_y = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const std::size_t at = pos;
    pos = end + 1;
    if (line.empty()) continue;
    if (line.front() == '#') {
      std::istringstream words{std::string(line.substr(1))};
      std::string word;
      while (words >> word) {
        const auto eq = word.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = word.substr(0, eq);
        const std::string_view value(word.data() + eq + 1, word.size() - eq - 1);
        if (key == "width") width = parse_field<long>(value, at, "width");
        if (key == "height") height = parse_field<long>(value, at, "height");
        if (key == "label") s.label = parse_field<std::int32_t>(value, at, "label");
      }
      continue;
    }
    if (!header_seen) {
      if (line != "t,x,y,p") throw ParseError("expected header 't,x,y,p'", at);
      header_seen = true;
      continue;
    }
    std::string_view fields[4];
    std::size_t start = 0, n = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        if (n == 4) throw ParseError("more than 4 fields", at);
        fields[n++] = line.substr(start, i - start);
        start = i + 1;
      }
    }
    if (n != 4) throw ParseError("expected 4 fields", at);
    Event e;
    e.t = parse_field<std::uint32_t>(fields[0], at, "t");
    e.x = parse_field<std::uint16_t>(fields[1], at, "x");
    e.y = parse_field<std::uint16_t>(fields[2], at, "y");
    const unsigned p = parse_field<unsigned>(fields[3], at, "p");
    if (p > 1) throw ParseError("polarity not 0 or 1", at);
    e.p = static_cast<std::uint8_t>(p);
    if (!s.events.empty() && e.t < s.events.back().t) {
      throw ParseError("timestamp goes backwards", at);
    }
    max_x = std::max<std::uint32_t>(max_x, e.x);
    max_y = std::max<std::uint32_t>(max_y, e.y);
    s.events.push_back(e);
  }
  if (!header_seen) throw ParseError("missing header 't,x,y,p'", text.size());
  if (s.label < -1) throw ParseError("label below -1", 0);
  const bool any = !s.events.empty();
  if (width < 0) width = any ? max_x + 1 : 0;
  if (height < 0) height = any ? max_y + 1 : 0;
  if (width > 65535 || height > 65535) throw ParseError("sensor geometry exceeds u16", 0);
  s.width = static_cast<std::uint16_t>(width);
  s.height = static_cast<std::uint16_t>(height);
  s.validate();
  return s;
}

namespace {

bool is_csv(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".csv";
}

}  // namespace

EventStream read_events(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open event file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (is_csv(path)) return decode_events_csv(std::string(bytes.begin(), bytes.end()));
  return decode_events(bytes);
}

void write_events(const std::filesystem::path& path, const EventStream& stream) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + path.string() + " for writing");
  if (is_csv(path)) {
    out << encode_events_csv(stream);
  } else {
    const auto bytes = encode_events(stream);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  if (!out) throw ConfigError("failed writing " + path.string());
}

std::size_t time_bin(std::uint32_t t, std::uint32_t t_min, std::uint32_t t_max,
                     std::size_t time_steps) {
  if (t_max <= t_min) return 0;
  const std::uint64_t num = std::uint64_t(time_steps) * (t - t_min);
  const std::size_t bin = static_cast<std::size_t>(num / (t_max - t_min));
  return std::min(bin, time_steps - 1);
}

BinningResult bin_to_frames(const EventStream& stream, std::size_t time_steps, std::size_t height,
                            std::size_t width, Accumulate mode) {
  if (time_steps == 0) throw ConfigError("time_steps must be >= 1");
  if (height == 0 || width == 0 || stream.height % height != 0 || stream.width % width != 0 ||
      stream.height / height != stream.width / width) {
    throw ConfigError("sensor " + std::to_string(stream.width) + "x" +
                      std::to_string(stream.height) + " does not downscale to " +
                      std::to_string(width) + "x" + std::to_string(height) +
                      " by one integer factor");
  }
  const std::size_t factor = stream.width / width;
  BinningResult result;
  FrameTensor& f = result.frames;
  f.time_steps = time_steps;
  f.height = height;
  f.width = width;
  f.data.assign(f.numel(), 0.0f);
  if (stream.events.empty()) return result;

  const std::uint32_t t_min = stream.events.front().t;
  const std::uint32_t t_max = stream.events.back().t;
  if (t_min == t_max && time_steps > 1) {
    result.warning = "fewer than two distinct timestamps; all events placed in bin 0";
  }
  for (const Event& e : stream.events) {
    const std::size_t bin = time_bin(e.t, t_min, t_max, time_steps);
    const std::size_t idx =
        ((bin * FrameTensor::kChannels + e.p) * height + e.y / factor) * width + e.x / factor;
    f.data[idx] += 1.0f;
  }
  if (mode == Accumulate::kBinary) {
    for (float& v : f.data) v = v > 0.0f ? 1.0f : 0.0f;
  }
  return result;
}

void SyntheticTaskSpec::validate() const {
  if (num_samples < 2) throw ConfigError("synthetic task needs at least 2 samples");
  if (time_steps < 2) throw ConfigError("synthetic task needs time_steps >= 2");
  if (frame_size == 0 || sensor_size % frame_size != 0) {
    throw ConfigError("sensor_size must be a multiple of frame_size");
  }
  if (sensor_size > 65535) throw ConfigError("sensor_size exceeds u16");
  if (bar_length == 0 || bar_length > frame_size) {
    throw ConfigError("bar_length must lie in [1, frame_size]");
  }
  if (pattern_events == 0 || pattern_events % bar_length != 0) {
    throw ConfigError("pattern_events must be a positive multiple of bar_length");
  }
  if (noise_events == 0) throw ConfigError("noise_events must be >= 1 (anchors the time window)");
  if (burst_steps > 0 && 2 * burst_steps + 1 > time_steps) {
    throw ConfigError("two bursts of " + std::to_string(burst_steps) + " steps and a gap need " +
                      std::to_string(2 * burst_steps + 1) + " time steps, have " +
                      std::to_string(time_steps));
  }
  if (step_duration_us == 0) throw ConfigError("step_duration_us must be >= 1");
  if (std::uint64_t(step_duration_us) * time_steps > 0xffffffffull) {
    throw ConfigError("synthetic stream exceeds the u32 timestamp range");
  }
}

std::vector<EventStream> synth_temporal_order_streams(const SyntheticTaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::size_t factor = spec.sensor_size / spec.frame_size;
  const std::uint32_t duration = spec.step_duration_us;
  const std::uint32_t window = static_cast<std::uint32_t>(duration * spec.time_steps);
  auto uniform = [&](std::uint64_t n) {
    return static_cast<std::size_t>(std::uniform_int_distribution<std::uint64_t>(0, n - 1)(rng));
  };

  std::vector<EventStream> out;
  out.reserve(spec.num_samples);
  for (std::size_t i = 0; i < spec.num_samples; ++i) {
    EventStream s;
    s.width = s.height = static_cast<std::uint16_t>(spec.sensor_size);
    s.label = static_cast<std::int32_t>(i % 2);
    // Bar origins in frame cells: A runs along x, B along y.
    const std::size_t span = spec.frame_size - spec.bar_length + 1;
    const std::size_t ax = uniform(span), ay = uniform(spec.frame_size);
    const std::size_t bx = uniform(spec.frame_size), by = uniform(span);
    // Onsets of the first and second bar.
    std::size_t first = 0, second = spec.time_steps / 2;
    std::size_t first_len = second, second_len = spec.time_steps - second;
    if (spec.burst_steps > 0) {
      const std::size_t b = spec.burst_steps;
      first_len = second_len = b;
      first = uniform(spec.time_steps - 2 * b);
      second = first + b + 1 + uniform(spec.time_steps - 2 * b - first);
    }
    for (std::size_t step = 0; step < spec.time_steps; ++step) {
      const bool in_first = step >= first && step < first + first_len;
      const bool in_second = step >= second && step < second + second_len;
      const bool show_a = (s.label == 0) ? in_first : in_second;
      const std::uint32_t t0 = static_cast<std::uint32_t>(step * duration);
      const std::size_t pattern = (in_first || in_second) ? spec.pattern_events : 0;
      const std::size_t noise = spec.noise_events + spec.pattern_events - pattern;
      for (std::size_t k = 0; k < pattern; ++k) {
        const std::size_t cell = k % spec.bar_length;
        const std::size_t cx = show_a ? ax + cell : bx;
        const std::size_t cy = show_a ? ay : by + cell;
        Event e;
        e.t = t0 + static_cast<std::uint32_t>(uniform(duration));
        e.x = static_cast<std::uint16_t>(cx * factor + uniform(factor));
        e.y = static_cast<std::uint16_t>(cy * factor + uniform(factor));
        e.p = static_cast<std::uint8_t>(uniform(2));
        s.events.push_back(e);
      }
      for (std::size_t k = 0; k < noise; ++k) {
        Event e;
        e.t = t0 + static_cast<std::uint32_t>(uniform(duration));
        // Pin the window to exactly [0, T * duration].
        if (k == 0 && step == 0) e.t = 0;
        if (k == 0 && step + 1 == spec.time_steps) e.t = window;
        e.x = static_cast<std::uint16_t>(uniform(spec.sensor_size));
        e.y = static_cast<std::uint16_t>(uniform(spec.sensor_size));
        e.p = static_cast<std::uint8_t>(uniform(2));
        s.events.push_back(e);
      }
    }
    std::stable_sort(s.events.begin(), s.events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
    out.push_back(std::move(s));
  }
  return out;
}

Dataset synth_temporal_order(const SyntheticTaskSpec& spec) {
  Dataset data;
  for (const EventStream& s : synth_temporal_order_streams(spec)) {
    auto binned = bin_to_frames(s, spec.time_steps, spec.frame_size, spec.frame_size);
    data.push_back({std::move(binned.frames), s.label});
  }
  return data;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double train_fraction, double val_fraction, std::uint64_t seed) {
  if (!(train_fraction >= 0 && val_fraction >= 0) ||
      std::abs(train_fraction + val_fraction - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * double(n)));
  if (n_train == 0 || n_train >= n) {
    throw ConfigError("split of " + std::to_string(n) + " samples leaves an empty side");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> train(order.begin(), order.begin() + n_train);
  std::vector<std::size_t> val(order.begin() + n_train, order.end());
  return {train, val};
}

template <typename Real>
Tensor<Real> stack_frames(const Dataset& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("stack_frames: no samples");
  const FrameTensor& first = data.at(indices.front()).frames;
  const std::size_t T = first.time_steps, H = first.height, W = first.width;
  const std::size_t per_step = FrameTensor::kChannels * H * W;
  const std::size_t B = indices.size();
  std::vector<Real> out(T * B * per_step);
  for (std::size_t b = 0; b < B; ++b) {
    const FrameTensor& f = data.at(indices[b]).frames;
    if (f.time_steps != T || f.height != H || f.width != W) {
      throw DimensionError("stack_frames: samples have different geometry");
    }
    for (std::size_t t = 0; t < T; ++t) {
      std::copy(f.data.begin() + t * per_step, f.data.begin() + (t + 1) * per_step,
                out.begin() + (t * B + b) * per_step);
    }
  }
  return Tensor<Real>({T, B, FrameTensor::kChannels, H, W}, std::move(out), false);
}

template Tensor<float> stack_frames(const Dataset&, const std::vector<std::size_t>&);
template Tensor<double> stack_frames(const Dataset&, const std::vector<std::size_t>&);

}  // namespace spiketim
