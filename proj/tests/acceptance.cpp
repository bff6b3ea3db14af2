// Acceptance suite: one PASS/FAIL line per criterion on stdout, details on
// stderr. Arguments select criteria by number (default: all). Exit status is
// non-zero when any selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "spiketim/events.hpp"
#include "spiketim/experiment.hpp"
#include "spiketim/gradcheck.hpp"
#include "spiketim/lif.hpp"
#include "spiketim/model.hpp"
#include "spiketim/ops.hpp"
#include "blind_oracle.hpp"

#ifndef SPIKETIM_SOURCE_DIR
#error "SPIKETIM_SOURCE_DIR must point at the source tree"
#endif

namespace fs = std::filesystem;
using namespace spiketim;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

RunConfig synthetic_config() {
  return load_run_config(fs::path(SPIKETIM_SOURCE_DIR) / "configs" / "synthetic.json", {},
                         std::nullopt);
}

struct TrainedRun {
  std::vector<EpochMetrics> epochs;
  double cpu = 0.0;
  double final_acc() const { return epochs.back().val_acc; }
  double best_acc() const {
    double b = 0.0;
    for (const auto& e : epochs) b = std::max(b, e.val_acc);
    return b;
  }
};

// Runs are shared between criteria 5 and 6; key is (mode, alpha, seed).
std::map<std::tuple<AttentionMode, double, std::uint64_t>, TrainedRun> g_runs;

const TrainedRun& trained(AttentionMode mode, double alpha, std::uint64_t seed) {
  const auto key = std::make_tuple(mode, alpha, seed);
  if (auto it = g_runs.find(key); it != g_runs.end()) return it->second;
  RunConfig c = synthetic_config();
  c.model.tim.mode = mode;
  c.model.tim.alpha = alpha;
  c.training.seed = seed;
  static const PreparedData data = prepare_data(synthetic_config());
  RunOptions opt;
  opt.write_outputs = false;
  const double t0 = cpu_seconds();
  auto result = run_experiment(c, data, opt);
  TrainedRun run{result.report.epochs, cpu_seconds() - t0};
  std::fprintf(stderr, "  run %s alpha=%.1f seed=%llu: final %.3f best %.3f, %.0f s CPU\n",
               to_string(mode).c_str(), alpha, static_cast<unsigned long long>(seed),
               run.final_acc(), run.best_acc(), run.cpu);
  return g_runs.emplace(key, std::move(run)).first->second;
}

Verdict gradient_conformance() {
  const double t0 = cpu_seconds();
  const auto report = run_gradcheck(GradCheckOptions{});
  const double cpu = cpu_seconds() - t0;
  std::ostringstream d;
  for (const auto& g : report.groups()) {
    const auto* w = report.worst(g);
    d << g << " worst " << (w ? w->error : 0.0) << "; ";
    std::fprintf(stderr, "  %s: worst %.3g (%s)\n", g.c_str(), w ? w->error : 0.0,
                 w ? w->name.c_str() : "-");
  }
  for (const auto& f : report.failures())
    std::fprintf(stderr, "  failed: %s / %s %.3g > %.3g\n", f.group.c_str(), f.name.c_str(),
                 f.error, f.tolerance);
  d << cpu << " s CPU";
  return {report.passed() && report.groups().size() == 4 && cpu < 120.0, d.str()};
}

Verdict alpha_zero_equivalence() {
  ModelConfig c;
  c.time_steps = 3;
  c.height = c.width = 8;
  c.sps_stages = 1;
  c.embed_dim = 16;
  c.num_heads = 2;
  c.num_classes = 3;
  c.tim.alpha = 0.0;
  std::mt19937_64 rng(2024);
  std::poisson_distribution<int> events(0.7);
  std::uniform_int_distribution<int> label(0, 2);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    SpikingTransformer<double> model(c, 100 + trial);
    const std::size_t batch = 2;
    std::vector<double> data(c.time_steps * batch * c.in_channels * c.height * c.width);
    for (auto& v : data) v = events(rng);
    Tensor<double> frames({c.time_steps, batch, c.in_channels, c.height, c.width}, data);
    const std::vector<int> labels{label(rng), label(rng)};

    auto pass = [&](AttentionMode mode) {
      model.set_attention_mode(mode);
      model.reset_state();
      for (auto& p : model.parameters()) p.tensor->zero_grad();
      auto logits = model.forward(frames);
      cross_entropy(logits, labels).backward();
      std::map<std::string, std::vector<double>> grads;
      for (auto& p : model.parameters())
        grads[p.name] = p.tensor->has_grad()
                            ? std::vector<double>(p.tensor->grad().begin(), p.tensor->grad().end())
                            : std::vector<double>(p.tensor->numel(), 0.0);
      return std::make_pair(std::vector<double>(logits.data().begin(), logits.data().end()),
                            grads);
    };
    const auto tim = pass(AttentionMode::kTim);
    const auto base = pass(AttentionMode::kBaseline);
    for (std::size_t i = 0; i < tim.first.size(); ++i)
      worst = std::max(worst, std::abs(tim.first[i] - base.first[i]));
    for (const auto& [name, g] : tim.second) {
      auto it = base.second.find(name);
      for (std::size_t i = 0; i < g.size(); ++i) {
        // A parameter only the TIM path owns must receive no gradient.
        const double other = it == base.second.end() ? 0.0 : it->second[i];
        worst = std::max(worst, std::abs(g[i] - other));
      }
    }
  }
  std::ostringstream d;
  d << "100 inputs, max abs difference " << worst;
  return {worst <= 1e-12, d.str()};
}

Verdict lif_analytic() {
  LIFConfig cfg;
  double worst = 0.0;
  bool binary = true, reset_exact = true;
  for (double x : {0.3, 0.9, 1.5}) {
    LIFState<double> s;
    for (int t = 1; t <= 50; ++t) {
      const double before = s.v.defined() ? s.v.item() : 0.0;
      auto r = lif_step(s, Tensor<double>({1}, {x}), cfg);
      const double spike = r.spikes.item();
      binary = binary && (spike == 0.0 || spike == 1.0);
      const double charged = before + (x - before) / cfg.tau;
      if (spike == 1.0) {
        reset_exact = reset_exact && r.state.v.item() == cfg.v_reset && charged >= cfg.v_threshold;
      } else if (x < cfg.v_threshold) {
        const double want = x * (1 - std::pow(1 - 1 / cfg.tau, t));
        worst = std::max(worst, std::abs(r.state.v.item() - want) / want);
      }
      s = r.state;
    }
  }
  std::ostringstream d;
  d << "max rel error " << worst << ", binary " << binary << ", exact reset " << reset_exact;
  return {worst <= 1e-6 && binary && reset_exact, d.str()};
}

Verdict parameter_count() {
  ModelConfig c = ModelConfig::full_scale();
  const auto tim = count_parameters(c);
  c.tim.mode = AttentionMode::kLocalTim;
  const auto local = count_parameters(c);
  SpikingTransformer<float> built(ModelConfig::full_scale(), 0);
  const double rel = std::abs(static_cast<double>(tim) - 2.59e6) / 2.59e6;
  std::ostringstream d;
  d << tim << " parameters (" << rel * 100 << "% from 2.59M), local_tim " << local;
  return {rel <= 0.10 && tim == local && built.parameter_count() == tim, d.str()};
}

Verdict temporal_capability() {
  const PreparedData data = prepare_data(synthetic_config());
  const double oracle = testing::blind_oracle_accuracy(data.samples, data.train, data.val);
  std::fprintf(stderr, "  order-blind oracle: %.3f on %zu/%zu\n", oracle, data.train.size(),
               data.val.size());
  const bool a = oracle <= 0.55 && data.train.size() == 1000 && data.val.size() == 200;

  const auto& main = trained(AttentionMode::kTim, 0.5, 0);
  const bool b = main.best_acc() >= 0.90 && main.epochs.size() <= 50 && main.cpu < 15 * 60;

  double tim = 0.0, local = 0.0;
  for (std::uint64_t seed : {0, 1, 2}) {
    tim += trained(AttentionMode::kTim, 0.5, seed).final_acc() / 3;
    local += trained(AttentionMode::kLocalTim, 0.5, seed).final_acc() / 3;
  }
  const bool c = tim >= local;
  std::ostringstream d;
  d << "(a) oracle " << oracle << (a ? " ok" : " FAIL") << "; (b) TIM best " << main.best_acc()
    << " in " << main.epochs.size() << " epochs, " << main.cpu << " s CPU" << (b ? " ok" : " FAIL")
    << "; (c) mean TIM " << tim << " vs local " << local << (c ? " ok" : " FAIL");
  return {a && b && c, d.str()};
}

Verdict alpha_sweep() {
  const double base = trained(AttentionMode::kTim, 0.0, 0).final_acc();
  bool ok = true;
  std::ostringstream d;
  d << "alpha 0: " << base;
  for (double alpha : {0.2, 0.4, 0.6, 0.8}) {
    const double acc = trained(AttentionMode::kTim, alpha, 0).final_acc();
    ok = ok && acc >= base - 0.02;
    d << ", " << alpha << ": " << acc;
  }
  return {ok, d.str()};
}

Verdict determinism_and_persistence() {
  const fs::path dir = fs::temp_directory_path() / "spiketim_acceptance";
  fs::remove_all(dir);
  RunConfig c;
  c.model.time_steps = 4;
  c.model.height = c.model.width = 8;
  c.model.sps_stages = 1;
  c.model.embed_dim = 8;
  c.model.num_heads = 2;
  c.training.epochs = 4;
  c.training.batch_size = 8;
  c.training.seed = 9;
  c.data.synthetic.num_samples = 80;
  c.data.synthetic.seed = 4;
  c.data.synthetic.burst_steps = 1;
  c.data.train_fraction = 0.75;
  c.save_every = 1;
  const PreparedData data = prepare_data(c);

  c.output_dir = dir / "a";
  const auto a = run_experiment(c, data);
  c.output_dir = dir / "b";
  const auto b = run_experiment(c, data);
  bool same = a.report.final_eval.confusion == b.report.final_eval.confusion;
  for (std::size_t e = 0; e < a.report.epochs.size(); ++e)
    same = same && a.report.epochs[e].train_loss == b.report.epochs[e].train_loss &&
           a.report.epochs[e].val_acc == b.report.epochs[e].val_acc;

  c.output_dir = dir / "resumed";
  RunOptions opt;
  opt.resume = dir / "a" / "epoch_0002.ckpt";
  const auto r = run_experiment(c, data, opt);
  bool resumed = r.report.final_eval.confusion == a.report.final_eval.confusion &&
                 r.report.epochs.size() == 2;
  for (std::size_t k = 0; resumed && k < 2; ++k)
    resumed = r.report.epochs[k].train_loss == a.report.epochs[k + 2].train_loss;

  SyntheticTaskSpec spec;
  spec.num_samples = 50;
  spec.seed = 11;
  bool round_trip = true, conserved = true;
  for (const auto& stream : synth_temporal_order_streams(spec)) {
    const auto bytes = encode_events(stream);
    round_trip = round_trip && decode_events(bytes) == stream && encode_events(decode_events(bytes)) == bytes;
    const auto frames = bin_to_frames(stream, spec.time_steps, spec.frame_size, spec.frame_size);
    const double total = std::accumulate(frames.frames.data.begin(), frames.frames.data.end(), 0.0);
    conserved = conserved && total == static_cast<double>(stream.events.size());
  }
  fs::remove_all(dir);
  std::ostringstream d;
  d << "seeded rerun identical " << same << ", resume matches " << resumed << ", EVS1 round trip "
    << round_trip << ", counts conserved " << conserved;
  return {same && resumed && round_trip && conserved, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"gradient conformance", gradient_conformance},
      {"alpha=0 equivalence", alpha_zero_equivalence},
      {"LIF analytic check", lif_analytic},
      {"parameter count", parameter_count},
      {"temporal capability", temporal_capability},
      {"alpha sweep", alpha_sweep},
      {"determinism and persistence", determinism_and_persistence},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(n)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    all = all && v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << criteria[i].first
              << "): " << v.detail << std::endl;
  }
  return all ? 0 : 1;
}
