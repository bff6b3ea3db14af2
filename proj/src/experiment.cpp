#include "spiketim/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "spiketim/checkpoint.hpp"
#include "spiketim/errors.hpp"
#include "spiketim/json_util.hpp"

namespace spiketim {

namespace fs = std::filesystem;

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json data;
  if (c.data.source == DataConfig::Source::kSynthetic) {
    const auto& s = c.data.synthetic;
    data["source"] = "synthetic";
    data["synthetic"] = {{"num_samples", s.num_samples},
                         {"sensor_size", s.sensor_size},
                         {"bar_length", s.bar_length},
                         {"pattern_events", s.pattern_events},
                         {"noise_events", s.noise_events},
                         {"burst_steps", s.burst_steps},
                         {"step_duration_us", s.step_duration_us},
                         {"seed", s.seed}};
  } else {
    data["source"] = "files";
    std::vector<std::string> files;
    for (const auto& f : c.data.files) files.push_back(f.string());
    data["files"] = files;
  }
  data["accumulate"] = c.data.accumulate == Accumulate::kCount ? "count" : "binary";
  data["split"] = {{"train", c.data.train_fraction},
                   {"val", 1.0 - c.data.train_fraction},
                   {"seed", c.data.split_seed}};
  return {{"model", to_json(c.model)},
          {"training", to_json(c.training)},
          {"data", data},
          {"output_dir", c.output_dir.string()},
          {"save_every", c.save_every}};
}

namespace {

DataConfig data_config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  using json_util::read_optional;
  json_util::require_known_keys(j, {"source", "synthetic", "files", "accumulate", "split"}, "data");
  DataConfig d;
  std::string source = "synthetic";
  read_optional(j, "source", source, "data");
  if (source == "synthetic") {
    d.source = DataConfig::Source::kSynthetic;
  } else if (source == "files") {
    d.source = DataConfig::Source::kFiles;
  } else {
    throw ConfigError("data.source must be 'synthetic' or 'files', got '" + source + "'");
  }
  if (j.contains("synthetic")) {
    const auto& s = j.at("synthetic");
    const std::string ctx = "data.synthetic";
    json_util::require_known_keys(s,
                                  {"num_samples", "sensor_size", "bar_length", "pattern_events",
                                   "noise_events", "burst_steps", "step_duration_us", "seed"},
                                  ctx);
    read_optional(s, "num_samples", d.synthetic.num_samples, ctx);
    read_optional(s, "sensor_size", d.synthetic.sensor_size, ctx);
    read_optional(s, "bar_length", d.synthetic.bar_length, ctx);
    read_optional(s, "pattern_events", d.synthetic.pattern_events, ctx);
    read_optional(s, "noise_events", d.synthetic.noise_events, ctx);
    read_optional(s, "burst_steps", d.synthetic.burst_steps, ctx);
    read_optional(s, "step_duration_us", d.synthetic.step_duration_us, ctx);
    read_optional(s, "seed", d.synthetic.seed, ctx);
  }
  if (j.contains("files")) {
    std::vector<std::string> files;
    read_optional(j, "files", files, "data");
    for (const auto& f : files) {
      fs::path p = fs::path(f).is_absolute() ? fs::path(f) : base_dir / f;
      if (!fs::exists(p)) throw ConfigError("data file '" + p.string() + "' does not exist");
      d.files.push_back(p.lexically_normal());
    }
  }
  if (d.source == DataConfig::Source::kFiles && d.files.empty()) {
    throw ConfigError("data.source 'files' needs a non-empty data.files list");
  }
  std::string accumulate = "count";
  read_optional(j, "accumulate", accumulate, "data");
  if (accumulate == "count") {
    d.accumulate = Accumulate::kCount;
  } else if (accumulate == "binary") {
    d.accumulate = Accumulate::kBinary;
  } else {
    throw ConfigError("data.accumulate must be 'count' or 'binary'");
  }
  if (j.contains("split")) {
    const auto& s = j.at("split");
    json_util::require_known_keys(s, {"train", "val", "seed"}, "data.split");
    double val = -1.0;
    read_optional(s, "train", d.train_fraction, "data.split");
    read_optional(s, "val", val, "data.split");
    if (val < 0.0) val = 1.0 - d.train_fraction;
    if (std::abs(d.train_fraction + val - 1.0) > 1e-9 || d.train_fraction <= 0.0 || val <= 0.0) {
      throw ConfigError("data.split fractions must be positive and sum to 1");
    }
    read_optional(s, "seed", d.split_seed, "data.split");
  }
  return d;
}

}  // namespace

RunConfig run_config_from_json(nlohmann::json j, const fs::path& base_dir,
                               std::optional<std::uint64_t> seed_override) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  json_util::require_known_keys(j, {"model", "training", "data", "output_dir", "save_every"}, "config");
  // training.alpha is shorthand for model.tim.alpha.
  if (j.contains("training") && j["training"].is_object() && j["training"].contains("alpha")) {
    j["model"]["tim"]["alpha"] = j["training"]["alpha"];
    j["training"].erase("alpha");
  }
  RunConfig c;
  c.model = model_config_from_json(j.value("model", nlohmann::json::object()));
  const nlohmann::json training = j.value("training", nlohmann::json::object());
  c.training = train_config_from_json(training);
  if (seed_override) {
    c.training.seed = *seed_override;
  } else if (!training.contains("seed")) {
    throw ConfigError("training.seed is required (or pass --seed / SPIKETIM_SEED)");
  }
  c.data = data_config_from_json(j.value("data", nlohmann::json::object()), base_dir);
  if (!j.contains("output_dir")) throw ConfigError("output_dir is required");
  std::string out;
  json_util::read_optional(j, "output_dir", out, "config");
  if (out.empty()) throw ConfigError("output_dir must not be empty");
  c.output_dir = fs::path(out).is_absolute() ? fs::path(out) : base_dir / out;
  json_util::read_optional(j, "save_every", c.save_every, "config");
  if (c.data.source == DataConfig::Source::kSynthetic && c.model.num_classes != 2) {
    throw ConfigError("the synthetic task has 2 classes; model.num_classes is " +
                      std::to_string(c.model.num_classes));
  }
  return c;
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError("override path '" + path + "' has an empty segment");
    if (!node->is_object()) {
      throw ConfigError("override path '" + path + "' descends into a non-object");
    }
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

std::optional<std::uint64_t> resolve_seed_override(std::optional<std::uint64_t> flag) {
  if (flag) return flag;
  if (const char* env = std::getenv("SPIKETIM_SEED"); env && *env) {
    std::uint64_t seed = 0;
    std::istringstream in(env);
    if (!(in >> seed) || !in.eof()) {
      throw ConfigError(std::string("SPIKETIM_SEED='") + env + "' is not a non-negative integer");
    }
    return seed;
  }
  return std::nullopt;
}

RunConfig load_run_config(const fs::path& path, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed_flag) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  return run_config_from_json(std::move(j), path.parent_path(), resolve_seed_override(seed_flag));
}

namespace {

std::vector<fs::path> expand_files(const std::vector<fs::path>& entries) {
  std::vector<fs::path> out;
  for (const auto& e : entries) {
    if (!fs::is_directory(e)) {
      out.push_back(e);
      continue;
    }
    std::vector<fs::path> found;
    for (const auto& item : fs::directory_iterator(e)) {
      const auto ext = item.path().extension();
      if (item.is_regular_file() && (ext == ".evs" || ext == ".csv")) found.push_back(item.path());
    }
    std::sort(found.begin(), found.end());
    out.insert(out.end(), found.begin(), found.end());
  }
  return out;
}

}  // namespace

PreparedData prepare_data(const RunConfig& config) {
  const ModelConfig& m = config.model;
  if (m.height != m.width) throw ConfigError("event data needs a square model input");
  PreparedData out;
  if (config.data.source == DataConfig::Source::kSynthetic) {
    if (m.in_channels != FrameTensor::kChannels) {
      throw ConfigError("event frames have 2 polarity channels; model.in_channels is " +
                        std::to_string(m.in_channels));
    }
    SyntheticTaskSpec spec = config.data.synthetic;
    spec.time_steps = m.time_steps;
    spec.frame_size = m.height;
    for (const EventStream& s : synth_temporal_order_streams(spec)) {
      auto binned = bin_to_frames(s, m.time_steps, m.height, m.width, config.data.accumulate);
      out.samples.push_back({std::move(binned.frames), s.label});
    }
  } else {
    for (const auto& path : expand_files(config.data.files)) {
      const EventStream s = read_events(path);
      if (s.label < 0) throw ConfigError("event file '" + path.string() + "' has no label");
      if (static_cast<std::size_t>(s.label) >= m.num_classes) {
        throw ConfigError("event file '" + path.string() + "' has label " +
                          std::to_string(s.label) + " >= num_classes");
      }
      auto binned = bin_to_frames(s, m.time_steps, m.height, m.width, config.data.accumulate);
      out.samples.push_back({std::move(binned.frames), s.label});
    }
  }
  auto [train, val] = split_indices(out.samples.size(), config.data.train_fraction,
                                    1.0 - config.data.train_fraction, config.data.split_seed);
  out.train = std::move(train);
  out.val = std::move(val);
  return out;
}

namespace {

std::string checkpoint_name(std::size_t epochs_done) {
  std::ostringstream name;
  name << "epoch_" << std::setw(4) << std::setfill('0') << epochs_done << ".ckpt";
  return name.str();
}

}  // namespace

RunResult run_experiment(const RunConfig& config, const PreparedData& data,
                         const RunOptions& options) {
  SpikingTransformer<float> model(config.model, config.training.seed);
  AdamW<float> optimizer(config.training.adamw);
  std::mt19937_64 rng(config.training.seed ^ 0x9e3779b97f4a7c15ull);
  const nlohmann::json resolved = to_json(config);

  std::size_t start_epoch = 0;
  std::vector<EpochMetrics> rows;
  const fs::path metrics_path = config.output_dir / "metrics.csv";
  if (options.resume) {
    CheckpointInfo info = load_checkpoint(*options.resume, model, &optimizer);
    if (info.config.value("training", nlohmann::json()) != resolved.at("training")) {
      throw LoadError("checkpoint training section " + info.config.value("training", nlohmann::json()).dump() +
                      " differs from the config " + resolved.at("training").dump());
    }
    start_epoch = info.epoch;
    rng = rng_from_state(info.rng_state);
    if (options.write_outputs && fs::exists(metrics_path)) {
      for (const auto& row : read_metrics_csv(metrics_path)) {
        if (row.epoch < start_epoch) rows.push_back(row);
      }
    }
  }
  if (options.write_outputs) fs::create_directories(config.output_dir);

  auto save = [&](const fs::path& path, std::size_t epochs_done) {
    CheckpointInfo info;
    info.config = resolved;
    info.epoch = static_cast<std::uint32_t>(epochs_done);
    info.rng_state = rng_state(rng);
    save_checkpoint(path, info, model, &optimizer);
  };

  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochMetrics& m) {
    rows.push_back(m);
    if (options.log) {
      *options.log << "epoch " << m.epoch + 1 << "/" << config.training.epochs << "  loss "
                   << m.train_loss << "  val_acc " << m.val_acc << "  lr " << m.lr << "  ("
                   << m.seconds << " s)\n";
      options.log->flush();
    }
    if (!options.write_outputs) return;
    write_metrics_csv(metrics_path, rows);
    if (config.save_every > 0 && (m.epoch + 1) % config.save_every == 0) {
      save(config.output_dir / checkpoint_name(m.epoch + 1), m.epoch + 1);
    }
  };

  RunResult result;
  result.parameter_count = model.parameter_count();
  result.report = train(model, data.samples, data.train, data.val, config.training, optimizer, rng,
                        start_epoch, hooks, options.threads);
  result.report.epochs = rows;
  if (options.write_outputs) {
    write_metrics_csv(metrics_path, rows);
    save(config.output_dir / "final.ckpt", config.training.epochs);
    std::ofstream(config.output_dir / "confusion.json")
        << confusion_to_json(result.report.final_eval.confusion).dump() << '\n';
  }
  return result;
}

}  // namespace spiketim
