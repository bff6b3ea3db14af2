// spiketim: train / eval / gradcheck / ablate-alpha / synth-data / param-count
//
// Exit codes: 0 ok, 1 check failure, 2 configuration or input error,
// 3 numeric abort (non-finite loss).

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "spiketim/checkpoint.hpp"
#include "spiketim/errors.hpp"
#include "spiketim/events.hpp"
#include "spiketim/experiment.hpp"
#include "spiketim/gradcheck.hpp"
#include "spiketim/model.hpp"
#include "spiketim/ops.hpp"
#include "spiketim/training.hpp"

namespace fs = std::filesystem;
using namespace spiketim;

namespace {

constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct CommonFlags {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required) {
  auto* opt = cmd->add_option("-c,--config", f.config, "JSON run configuration");
  if (config_required) opt->required();
  cmd->add_option("--override", f.overrides,
                  "dotted.key=value applied to the config before validation (repeatable); "
                  "training.alpha is an alias for model.tim.alpha");
  cmd->add_option("--seed", f.seed, "training seed; beats SPIKETIM_SEED, which beats the config");
  cmd->add_option("--threads", f.threads, "evaluation worker threads")
      ->default_val(1)
      ->check(CLI::PositiveNumber);
}

RunConfig load(const CommonFlags& f) { return load_run_config(f.config, f.overrides, f.seed); }

void warn(const std::string& message) { std::cerr << "warning: " << message << '\n'; }

int cmd_train(const CommonFlags& f, const std::string& resume, bool quiet) {
  const RunConfig config = load(f);
  const PreparedData data = prepare_data(config);
  RunOptions options;
  options.threads = f.threads;
  options.log = quiet ? nullptr : &std::cout;
  if (!resume.empty()) options.resume = resume;
  const RunResult result = run_experiment(config, data, options);
  std::cout << "trainable parameters: " << result.parameter_count << '\n'
            << "final val accuracy: " << result.report.final_eval.accuracy << '\n'
            << "outputs: " << config.output_dir.string() << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& split, const std::string& out,
             std::size_t threads) {
  const CheckpointInfo info = read_checkpoint_info(checkpoint);
  RunConfig config = run_config_from_json(info.config, "/");
  SpikingTransformer<float> model(config.model, config.training.seed);
  load_checkpoint<float>(checkpoint, model, nullptr);
  const PreparedData data = prepare_data(config);
  std::vector<std::size_t> indices;
  if (split == "val") {
    indices = data.val;
  } else if (split == "train") {
    indices = data.train;
  } else {
    indices.resize(data.samples.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
  }
  const EvalResult r = evaluate(model, data.samples, indices, config.training.batch_size, threads);
  const fs::path dir = out.empty() ? config.output_dir : fs::path(out);
  fs::create_directories(dir);
  const fs::path report = dir / ("eval_" + split + ".json");
  std::ofstream(report) << nlohmann::json{{"split", split},
                                          {"samples", indices.size()},
                                          {"accuracy", r.accuracy},
                                          {"confusion", confusion_to_json(r.confusion)}}
                               .dump()
                        << '\n';
  std::cout << "accuracy (" << split << ", " << indices.size() << " samples): " << r.accuracy
            << "\nconfusion: " << confusion_to_json(r.confusion).dump() << "\nwritten to "
            << report.string() << '\n';
  return 0;
}

int cmd_gradcheck(const CommonFlags& f, bool inject_conv_fault) {
  GradCheckOptions options;
  if (!f.config.empty()) {
    const RunConfig config = load(f);
    options.lif = config.model.lif;
    options.tim = config.model.tim;
    options.seed = config.training.seed;
  } else if (auto seed = resolve_seed_override(f.seed)) {
    options.seed = *seed;
  }
  if (inject_conv_fault) fault_injection::set_conv2d_kernel_grad_scale(1.5);
  const GradCheckReport report = run_gradcheck(options);
  fault_injection::set_conv2d_kernel_grad_scale(1.0);

  for (const auto& group : report.groups()) {
    const GradCheckEntry* w = report.worst(group);
    std::cout << std::left << std::setw(16) << group << " worst error " << std::scientific
              << std::setprecision(3) << w->error << " (tolerance " << w->tolerance << ", "
              << w->name << ")  " << (w->passed() ? "ok" : "FAIL") << std::defaultfloat << '\n';
  }
  const auto failures = report.failures();
  for (const auto& e : failures) {
    std::cout << "FAILED " << e.group << ": " << e.name << " error " << e.error
              << " > " << e.tolerance << '\n';
  }
  std::cout << (failures.empty() ? "gradcheck passed" : "gradcheck failed") << '\n';
  return failures.empty() ? 0 : kExitCheckFailed;
}

int cmd_ablate(const CommonFlags& f, std::vector<double> alphas,
               const std::vector<std::string>& modes, bool quiet) {
  RunConfig base = load(f);
  std::vector<double> unique;
  for (double a : alphas) {
    if (std::find(unique.begin(), unique.end(), a) != unique.end()) {
      warn("duplicate alpha " + std::to_string(a) + " dropped");
      continue;
    }
    unique.push_back(a);
  }
  if (unique.size() < 2) throw ConfigError("ablate-alpha needs at least 2 distinct alphas");
  for (double a : unique) {
    TIMConfig t = base.model.tim;
    t.alpha = a;
    t.validate();
  }
  const PreparedData data = prepare_data(base);
  fs::create_directories(base.output_dir);
  RunOptions options;
  options.write_outputs = false;
  options.threads = f.threads;
  options.log = quiet ? nullptr : &std::cout;

  std::ofstream sweep(base.output_dir / "alpha_sweep.csv");
  sweep << "alpha,val_acc\n";
  for (double a : unique) {
    RunConfig c = base;
    c.model.tim.alpha = a;
    const RunResult r = run_experiment(c, data, options);
    sweep << a << ',' << r.report.final_eval.accuracy << '\n' << std::flush;
    std::cout << "alpha " << a << ": val accuracy " << r.report.final_eval.accuracy << '\n';
  }
  if (!modes.empty()) {
    std::ofstream out(base.output_dir / "mode_sweep.csv");
    out << "mode,alpha,param_count,val_acc\n";
    for (const auto& name : modes) {
      RunConfig c = base;
      c.model.tim.mode = parse_attention_mode(name);
      const RunResult r = run_experiment(c, data, options);
      out << name << ',' << c.model.tim.alpha << ',' << r.parameter_count << ','
          << r.report.final_eval.accuracy << '\n'
          << std::flush;
      std::cout << "mode " << name << ": " << r.parameter_count << " parameters, val accuracy "
                << r.report.final_eval.accuracy << '\n';
    }
  }
  std::cout << "written to " << base.output_dir.string() << '\n';
  return 0;
}

int cmd_synth(const std::string& out_dir, const CommonFlags& f, std::optional<std::size_t> samples,
              const std::string& format) {
  SyntheticTaskSpec spec;
  if (!f.config.empty()) {
    const RunConfig config = load(f);
    spec = config.data.synthetic;
    spec.time_steps = config.model.time_steps;
    spec.frame_size = config.model.height;
  }
  if (auto seed = resolve_seed_override(f.seed)) spec.seed = *seed;
  if (samples) spec.num_samples = *samples;
  const auto streams = synth_temporal_order_streams(spec);
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < streams.size(); ++i) {
    std::ostringstream name;
    name << "sample_" << std::setw(5) << std::setfill('0') << i << '.' << format;
    write_events(fs::path(out_dir) / name.str(), streams[i]);
  }
  std::cout << "wrote " << streams.size() << ' ' << format << " files to " << out_dir << '\n';
  return 0;
}

int cmd_param_count(const CommonFlags& f, bool full_scale) {
  ModelConfig model;
  if (full_scale) {
    model = ModelConfig::full_scale();
  } else if (!f.config.empty()) {
    model = load(f).model;
  } else {
    throw ConfigError("param-count needs --config or --full-scale");
  }
  std::cout << "trainable parameters: " << count_parameters(model) << '\n';
  for (auto mode : {AttentionMode::kBaseline, AttentionMode::kTim, AttentionMode::kLocalTim}) {
    ModelConfig m = model;
    m.tim.mode = mode;
    std::cout << "  " << std::left << std::setw(10) << to_string(mode) << count_parameters(m)
              << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spiking transformer with a temporal interaction module"};
  app.require_subcommand(1);

  CommonFlags train_flags, gradcheck_flags, ablate_flags, synth_flags, count_flags;
  std::string resume;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "train a model; writes metrics.csv, confusion.json, checkpoints");
  add_common(train, train_flags, true);
  train->add_option("--resume", resume, "continue from a checkpoint written by an earlier run");
  train->add_flag("-q,--quiet", quiet, "no per-epoch log lines");

  std::string checkpoint, split = "val", eval_out;
  std::size_t eval_threads = 1;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint; writes eval_<split>.json");
  eval->add_option("checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--split", split, "val, train or all")
      ->check(CLI::IsMember({"val", "train", "all"}));
  eval->add_option("--out", eval_out, "output directory (default: the run's output_dir)");
  eval->add_option("--threads", eval_threads, "evaluation worker threads")
      ->check(CLI::PositiveNumber);

  bool inject_conv_fault = false;
  auto* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference gradient suite in 64-bit on a micro model");
  add_common(gradcheck, gradcheck_flags, false);
  // Test hook: corrupts the conv2d kernel gradient. Hidden from --help.
  gradcheck->add_flag("--inject-conv-fault", inject_conv_fault)->group("");

  std::vector<double> alphas;
  std::vector<std::string> modes;
  auto* ablate = app.add_subcommand(
      "ablate-alpha", "train one model per alpha (and per mode); writes alpha_sweep.csv");
  add_common(ablate, ablate_flags, true);
  ablate->add_flag("-q,--quiet", quiet, "no per-epoch log lines");
  ablate->add_option("--alphas", alphas, "comma-separated alphas in [0, 1]")
      ->required()
      ->delimiter(',');
  ablate->add_option("--modes", modes, "also compare modes: baseline, tim, local_tim")
      ->delimiter(',')
      ->check(CLI::IsMember({"baseline", "tim", "local_tim"}));

  std::string synth_out, format = "evs";
  std::optional<std::size_t> samples;
  auto* synth = app.add_subcommand("synth-data", "write the synthetic temporal-order task as event files");
  synth->add_option("-o,--out", synth_out, "output directory")->required();
  add_common(synth, synth_flags, false);
  synth->add_option("--samples", samples, "number of streams");
  synth->add_option("--format", format, "evs or csv")->check(CLI::IsMember({"evs", "csv"}));

  bool full_scale = false;
  auto* count = app.add_subcommand("param-count", "print the exact trainable parameter count");
  add_common(count, count_flags, false);
  count->add_flag("--full-scale", full_scale, "use the 64x64, dim-256, depth-2 reconstruction");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) return cmd_train(train_flags, resume, quiet);
    if (*eval) return cmd_eval(checkpoint, split, eval_out, eval_threads);
    if (*gradcheck) return cmd_gradcheck(gradcheck_flags, inject_conv_fault);
    if (*ablate) return cmd_ablate(ablate_flags, alphas, modes, quiet);
    if (*synth) return cmd_synth(synth_out, synth_flags, samples, format);
    if (*count) return cmd_param_count(count_flags, full_scale);
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const LoadError& e) {
    std::cerr << "load error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return 0;
}
