#include "spiketim/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include "spiketim/errors.hpp"
#include "spiketim/json_util.hpp"
#include "spiketim/ops.hpp"

namespace spiketim {

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("training.epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("training.batch_size must be >= 1");
  if (!(lr0 >= 0.0) || !(lr_min >= 0.0) || lr_min > lr0) {
    throw ConfigError("learning rates must satisfy 0 <= lr_min <= lr0");
  }
  if (!(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0) || !(adamw.beta2 >= 0.0 && adamw.beta2 < 1.0)) {
    throw ConfigError("AdamW betas must lie in [0, 1)");
  }
  if (!(adamw.eps > 0.0)) throw ConfigError("AdamW eps must be > 0");
  if (!(adamw.weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (warmup_epochs >= epochs && warmup_epochs > 0) {
    throw ConfigError("warmup_epochs must be smaller than epochs");
  }
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr0", c.lr0},
          {"lr_min", c.lr_min},
          {"beta1", c.adamw.beta1},
          {"beta2", c.adamw.beta2},
          {"eps", c.adamw.eps},
          {"weight_decay", c.adamw.weight_decay},
          {"warmup_epochs", c.warmup_epochs},
          {"grad_clip", c.grad_clip},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  using json_util::read_optional;
  json_util::require_known_keys(j,
                                {"epochs", "batch_size", "lr0", "lr_min", "beta1", "beta2", "eps",
                                 "weight_decay", "warmup_epochs", "grad_clip", "seed"},
                                "training");
  TrainConfig c;
  read_optional(j, "epochs", c.epochs, "training");
  read_optional(j, "batch_size", c.batch_size, "training");
  read_optional(j, "lr0", c.lr0, "training");
  read_optional(j, "lr_min", c.lr_min, "training");
  read_optional(j, "beta1", c.adamw.beta1, "training");
  read_optional(j, "beta2", c.adamw.beta2, "training");
  read_optional(j, "eps", c.adamw.eps, "training");
  read_optional(j, "weight_decay", c.adamw.weight_decay, "training");
  read_optional(j, "warmup_epochs", c.warmup_epochs, "training");
  read_optional(j, "grad_clip", c.grad_clip, "training");
  read_optional(j, "seed", c.seed, "training");
  c.validate();
  return c;
}

double scheduled_lr(const TrainConfig& config, std::size_t epoch) {
  const double lr = cosine_lr(epoch, config.epochs, config.lr0, config.lr_min);
  if (epoch < config.warmup_epochs) {
    return lr * double(epoch + 1) / double(config.warmup_epochs + 1);
  }
  return lr;
}

std::uint64_t EvalResult::total() const {
  std::uint64_t n = 0;
  for (const auto& row : confusion) {
    for (auto v : row) n += v;
  }
  return n;
}

EvalResult score_logits(const std::vector<double>& logits, std::size_t num_classes,
                        const std::vector<int>& labels) {
  if (labels.empty()) throw ContractError("evaluation on an empty dataset");
  if (num_classes == 0 || logits.size() != labels.size() * num_classes) {
    throw DimensionError("score_logits: " + std::to_string(logits.size()) + " logits for " +
                         std::to_string(labels.size()) + " labels x " +
                         std::to_string(num_classes) + " classes");
  }
  EvalResult r;
  r.confusion.assign(num_classes, std::vector<std::uint64_t>(num_classes, 0));
  std::uint64_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* row = logits.data() + i * num_classes;
    std::size_t best = 0;
    for (std::size_t c = 1; c < num_classes; ++c) {
      if (row[c] > row[best]) best = c;
    }
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
      throw ContractError("label " + std::to_string(label) + " outside [0, " +
                          std::to_string(num_classes) + ")");
    }
    ++r.confusion[label][best];
    correct += best == static_cast<std::size_t>(label);
  }
  r.accuracy = double(correct) / double(labels.size());
  return r;
}

namespace {

std::vector<int> labels_of(const Dataset& data, const std::vector<std::size_t>& indices) {
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (auto i : indices) labels.push_back(data.at(i).label);
  return labels;
}

template <typename Real>
double grad_norm(const Tensor<Real>& t) {
  if (!t.has_grad()) return 0.0;
  double s = 0.0;
  for (Real g : t.grad()) s += double(g) * double(g);
  return std::sqrt(s);
}

template <typename Real>
std::string gradient_report(const NamedTensors<Real>& params) {
  std::vector<std::pair<double, std::string>> norms;
  for (const auto& p : params) norms.emplace_back(grad_norm(*p.tensor), p.name);
  std::sort(norms.begin(), norms.end(), [](const auto& a, const auto& b) {
    // NaN norms sort first so they are always reported.
    if (std::isnan(a.first) != std::isnan(b.first)) return std::isnan(a.first);
    return a.first > b.first;
  });
  std::ostringstream out;
  for (std::size_t i = 0; i < norms.size() && i < 5; ++i) {
    out << (i ? ", " : "") << norms[i].second << '=' << norms[i].first;
  }
  return out.str();
}

}  // namespace

template <typename Real>
double train_epoch(SpikingTransformer<Real>& model, const Dataset& data,
                   const std::vector<std::size_t>& indices, AdamW<Real>& optimizer, double lr,
                   const TrainConfig& config, std::mt19937_64& rng) {
  if (indices.empty()) throw ContractError("train_epoch: empty training set");
  model.set_training(true);
  std::vector<std::size_t> order = indices;
  std::shuffle(order.begin(), order.end(), rng);
  const NamedTensors<Real> params = model.parameters();
  double loss_sum = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
    const std::size_t stop = std::min(order.size(), start + config.batch_size);
    const std::vector<std::size_t> batch(order.begin() + start, order.begin() + stop);
    model.reset_state();
    const Tensor<Real> logits = model.forward(stack_frames<Real>(data, batch));
    const Tensor<Real> loss = cross_entropy(logits, labels_of(data, batch));
    for (const auto& p : params) p.tensor->zero_grad();
    loss.backward();
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) {
      throw NumericError("non-finite loss " + std::to_string(value) + " at batch " +
                         std::to_string(batches) + " (lr " + std::to_string(lr) +
                         "; largest gradient norms: " + gradient_report(params) + ")");
    }
    if (config.grad_clip > 0.0) {
      double total = 0.0;
      for (const auto& p : params) total += std::pow(grad_norm(*p.tensor), 2);
      total = std::sqrt(total);
      if (total > config.grad_clip) {
        const Real factor = static_cast<Real>(config.grad_clip / total);
        for (const auto& p : params) {
          if (!p.tensor->has_grad()) continue;
          for (Real& g : p.tensor->mutable_grad()) g *= factor;
        }
      }
    }
    optimizer.step(params, lr);
    loss_sum += value;
    ++batches;
  }
  model.reset_state();
  return loss_sum / double(batches);
}

template <typename Real>
SpikingTransformer<Real> clone_model(SpikingTransformer<Real>& model) {
  SpikingTransformer<Real> copy(model.config(), 0);
  auto copy_all = [](const NamedTensors<Real>& from, const NamedTensors<Real>& to) {
    if (from.size() != to.size()) throw ContractError("clone_model: tensor lists differ");
    for (std::size_t i = 0; i < from.size(); ++i) {
      auto dst = to[i].tensor->mutable_data();
      std::copy(from[i].tensor->data().begin(), from[i].tensor->data().end(), dst.begin());
    }
  };
  copy_all(model.parameters(), copy.parameters());
  copy_all(model.buffers(), copy.buffers());
  copy.set_training(model.training());
  return copy;
}

namespace {

template <typename Real>
std::vector<double> eval_logits(SpikingTransformer<Real>& model, const Dataset& data,
                                const std::vector<std::size_t>& indices, std::size_t batch_size) {
  NoGradGuard no_grad;
  std::vector<double> logits;
  logits.reserve(indices.size() * model.config().num_classes);
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t stop = std::min(indices.size(), start + batch_size);
    const std::vector<std::size_t> batch(indices.begin() + start, indices.begin() + stop);
    model.reset_state();
    const Tensor<Real> out = model.forward(stack_frames<Real>(data, batch));
    for (Real v : out.data()) logits.push_back(static_cast<double>(v));
  }
  model.reset_state();
  return logits;
}

}  // namespace

template <typename Real>
EvalResult evaluate(SpikingTransformer<Real>& model, const Dataset& data,
                    const std::vector<std::size_t>& indices, std::size_t batch_size,
                    std::size_t threads) {
  if (indices.empty()) throw ContractError("evaluation on an empty dataset");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (threads == 0) throw ConfigError("threads must be >= 1");
  const bool was_training = model.training();
  model.set_training(false);
  threads = std::min(threads, indices.size());
  std::vector<double> logits;
  if (threads <= 1) {
    logits = eval_logits(model, data, indices, batch_size);
  } else {
    const std::size_t per = (indices.size() + threads - 1) / threads;
    std::vector<std::vector<double>> parts(threads);
    std::vector<SpikingTransformer<Real>> copies;
    copies.reserve(threads - 1);
    for (std::size_t i = 1; i < threads; ++i) copies.push_back(clone_model(model));
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t i = 0; i < threads; ++i) {
      const std::size_t lo = std::min(indices.size(), i * per);
      const std::size_t hi = std::min(indices.size(), lo + per);
      std::vector<std::size_t> shard(indices.begin() + lo, indices.begin() + hi);
      SpikingTransformer<Real>& m = i == 0 ? model : copies[i - 1];
      workers.emplace_back([&, i, shard = std::move(shard)] {
        try {
          if (!shard.empty()) parts[i] = eval_logits(m, data, shard, batch_size);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (auto& w : workers) w.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    for (const auto& p : parts) logits.insert(logits.end(), p.begin(), p.end());
  }
  model.set_training(was_training);
  return score_logits(logits, model.config().num_classes, labels_of(data, indices));
}

template <typename Real>
TrainReport train(SpikingTransformer<Real>& model, const Dataset& data,
                  const std::vector<std::size_t>& train_indices,
                  const std::vector<std::size_t>& val_indices, const TrainConfig& config,
                  AdamW<Real>& optimizer, std::mt19937_64& rng, std::size_t start_epoch,
                  const TrainHooks& hooks, std::size_t eval_threads) {
  config.validate();
  if (start_epoch > config.epochs) {
    throw ContractError("start epoch " + std::to_string(start_epoch) + " beyond " +
                        std::to_string(config.epochs) + " epochs");
  }
  TrainReport report;
  for (std::size_t epoch = start_epoch; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = scheduled_lr(config, epoch);
    m.train_loss = train_epoch(model, data, train_indices, optimizer, m.lr, config, rng);
    m.val_acc = evaluate(model, data, val_indices, config.batch_size, eval_threads).accuracy;
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(m);
  }
  report.final_eval = evaluate(model, data, val_indices, config.batch_size, eval_threads);
  return report;
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

std::mt19937_64 rng_from_state(const std::string& state) {
  std::istringstream in(state);
  std::mt19937_64 rng;
  in >> rng;
  if (in.fail()) throw LoadError("corrupt RNG state");
  return rng;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + path.string() + " for writing");
  out << "epoch,train_loss,val_acc,lr,seconds\n";
  out.precision(17);
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.train_loss << ',' << r.val_acc << ',' << r.lr << ',' << r.seconds
        << '\n';
  }
}

std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "epoch,train_loss,val_acc,lr,seconds") {
    throw ParseError("unexpected metrics header '" + line + "'", 0);
  }
  std::vector<EpochMetrics> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    EpochMetrics m;
    if (!(fields >> m.epoch >> m.train_loss >> m.val_acc >> m.lr >> m.seconds)) {
      throw ParseError("bad metrics row '" + line + "'", 0);
    }
    rows.push_back(m);
  }
  return rows;
}

nlohmann::json confusion_to_json(const ConfusionMatrix& confusion) {
  return nlohmann::json(confusion);
}

#define SPIKETIM_INSTANTIATE_TRAINING(Real)                                                     \
  template double train_epoch(SpikingTransformer<Real>&, const Dataset&,                       \
                              const std::vector<std::size_t>&, AdamW<Real>&, double,           \
                              const TrainConfig&, std::mt19937_64&);                           \
  template EvalResult evaluate(SpikingTransformer<Real>&, const Dataset&,                      \
                               const std::vector<std::size_t>&, std::size_t, std::size_t);     \
  template SpikingTransformer<Real> clone_model(SpikingTransformer<Real>&);                    \
  template TrainReport train(SpikingTransformer<Real>&, const Dataset&,                        \
                             const std::vector<std::size_t>&, const std::vector<std::size_t>&, \
                             const TrainConfig&, AdamW<Real>&, std::mt19937_64&, std::size_t,  \
                             const TrainHooks&, std::size_t);

SPIKETIM_INSTANTIATE_TRAINING(float)
SPIKETIM_INSTANTIATE_TRAINING(double)

}  // namespace spiketim
