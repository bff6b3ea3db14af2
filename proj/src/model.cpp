#include "spiketim/model.hpp"

#include "spiketim/errors.hpp"
#include "spiketim/json_util.hpp"
#include "spiketim/ops.hpp"

namespace spiketim {

void ModelConfig::validate() const {
  if (time_steps < 1) throw ConfigError("model.time_steps must be >= 1");
  if (in_channels < 1) throw ConfigError("model.in_channels must be >= 1");
  if (sps_stages < 1) throw ConfigError("model.sps_stages must be >= 1");
  const std::size_t factor = std::size_t{1} << sps_stages;
  if (height == 0 || width == 0 || height % factor != 0 || width % factor != 0) {
    throw ConfigError("input " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by 2^" + std::to_string(sps_stages));
  }
  if (embed_dim % (std::size_t{1} << (sps_stages - 1)) != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                      " cannot be halved across " + std::to_string(sps_stages) + " SPS stages");
  }
  if (depth < 1) throw ConfigError("model.depth must be >= 1");
  if (mlp_ratio < 1) throw ConfigError("model.mlp_ratio must be >= 1");
  if (num_classes < 2) throw ConfigError("model.num_classes must be >= 2");
  SSAConfig{embed_dim, num_heads, attention_scale}.validate();
  tim.validate();
  lif.validate();
}

std::size_t ModelConfig::tokens() const {
  return (height >> sps_stages) * (width >> sps_stages);
}

std::vector<std::size_t> ModelConfig::sps_channels() const {
  std::vector<std::size_t> channels(sps_stages);
  for (std::size_t i = 0; i < sps_stages; ++i) channels[i] = embed_dim >> (sps_stages - 1 - i);
  return channels;
}

ModelConfig ModelConfig::full_scale() {
  ModelConfig config;
  config.time_steps = 10;
  config.height = 64;
  config.width = 64;
  config.sps_stages = 4;
  config.sps_rpe = true;
  config.embed_dim = 256;
  config.num_heads = 16;
  config.depth = 2;
  config.mlp_ratio = 4;
  config.num_classes = 10;
  return config;
}

nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{
      {"time_steps", c.time_steps},
      {"in_channels", c.in_channels},
      {"height", c.height},
      {"width", c.width},
      {"sps_stages", c.sps_stages},
      {"sps_rpe", c.sps_rpe},
      {"embed_dim", c.embed_dim},
      {"num_heads", c.num_heads},
      {"depth", c.depth},
      {"mlp_ratio", c.mlp_ratio},
      {"num_classes", c.num_classes},
      {"attention_scale", c.attention_scale},
      {"attention_mode", to_string(c.tim.mode)},
      {"tim", {{"alpha", c.tim.alpha}, {"kernel_size", c.tim.kernel_size}}},
      {"lif",
       {{"tau", c.lif.tau}, {"v_threshold", c.lif.v_threshold}, {"surrogate_a", c.lif.surrogate_a}}},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  using json_util::read_optional;
  json_util::require_known_keys(
      j,
      {"time_steps", "in_channels", "height", "width", "sps_stages", "sps_rpe", "embed_dim",
       "num_heads", "depth", "mlp_ratio", "num_classes", "attention_scale", "attention_mode", "tim",
       "lif"},
      "model");
  ModelConfig c;
  read_optional(j, "time_steps", c.time_steps, "model");
  read_optional(j, "in_channels", c.in_channels, "model");
  read_optional(j, "height", c.height, "model");
  read_optional(j, "width", c.width, "model");
  read_optional(j, "sps_stages", c.sps_stages, "model");
  read_optional(j, "sps_rpe", c.sps_rpe, "model");
  read_optional(j, "embed_dim", c.embed_dim, "model");
  read_optional(j, "num_heads", c.num_heads, "model");
  read_optional(j, "depth", c.depth, "model");
  read_optional(j, "mlp_ratio", c.mlp_ratio, "model");
  read_optional(j, "num_classes", c.num_classes, "model");
  read_optional(j, "attention_scale", c.attention_scale, "model");
  if (j.contains("attention_mode")) {
    std::string mode;
    read_optional(j, "attention_mode", mode, "model");
    c.tim.mode = parse_attention_mode(mode);
  }
  if (j.contains("tim")) {
    const auto& t = j.at("tim");
    json_util::require_known_keys(t, {"alpha", "kernel_size"}, "model.tim");
    read_optional(t, "alpha", c.tim.alpha, "model.tim");
    read_optional(t, "kernel_size", c.tim.kernel_size, "model.tim");
  }
  if (j.contains("lif")) {
    const auto& l = j.at("lif");
    json_util::require_known_keys(l, {"tau", "v_threshold", "surrogate_a"}, "model.lif");
    read_optional(l, "tau", c.lif.tau, "model.lif");
    read_optional(l, "v_threshold", c.lif.v_threshold, "model.lif");
    read_optional(l, "surrogate_a", c.lif.surrogate_a, "model.lif");
  }
  c.validate();
  return c;
}

std::uint64_t count_parameters(const ModelConfig& c) {
  c.validate();
  const std::uint64_t d = c.embed_dim;
  std::uint64_t total = 0;
  std::uint64_t in = c.in_channels;
  for (std::uint64_t out : c.sps_channels()) {
    total += in * out * 9 + 2 * out;
    in = out;
  }
  if (c.sps_rpe) total += d * d * 9 + 2 * d;

  const std::uint64_t hidden = c.mlp_ratio * d;
  std::uint64_t block = 4 * (d * d + 2 * d);
  if (c.tim.mode != AttentionMode::kBaseline) block += d * c.tim.kernel_size;
  block += d * hidden + 2 * hidden + hidden * d + 2 * d;
  total += c.depth * block;

  total += d * c.num_classes + c.num_classes;
  return total;
}

// --- SpikingPatchSplit ------------------------------------------------------

template <typename Real>
SpikingPatchSplit<Real>::SpikingPatchSplit(const ModelConfig& config, Rng& rng) {
  std::size_t in = config.in_channels;
  for (std::size_t out : config.sps_channels()) {
    stages_.push_back(
        Stage{Conv2d<Real>(in, out, 3, rng), BatchNorm<Real>(out, 1), LIFNode<Real>(config.lif), true});
    in = out;
  }
  if (config.sps_rpe) {
    stages_.push_back(Stage{Conv2d<Real>(in, in, 3, rng), BatchNorm<Real>(in, 1),
                            LIFNode<Real>(config.lif), false});
  }
}

template <typename Real>
Tensor<Real> SpikingPatchSplit<Real>::forward(const Tensor<Real>& frames) {
  if (frames.rank() != 5) {
    throw DimensionError("SPS expects [T, B, C, H, W], got " + shape_to_string(frames.shape()));
  }
  const std::size_t steps = frames.shape()[0];
  const std::size_t batch = frames.shape()[1];
  last_spikes_.clear();
  // Convolution and BN run on [T*B, C, H, W]; the LIF needs the time axis back.
  Tensor<Real> x = reshape(frames, {steps * batch, frames.shape()[2], frames.shape()[3],
                                    frames.shape()[4]});
  for (auto& stage : stages_) {
    Tensor<Real> current = stage.bn(stage.conv(x));
    Shape seq{steps, batch};
    seq.insert(seq.end(), current.shape().begin() + 1, current.shape().end());
    Tensor<Real> spikes = stage.lif.forward(reshape(current, seq));
    last_spikes_.push_back(spikes);
    x = reshape(spikes, current.shape());
    if (stage.pool) x = max_pool2d(x);
  }
  const std::size_t dim = x.shape()[1];
  const std::size_t tokens = x.shape()[2] * x.shape()[3];
  return transpose(reshape(x, {steps, batch, dim, tokens}), 2, 3);
}

template <typename Real>
void SpikingPatchSplit<Real>::reset_state() {
  for (auto& stage : stages_) stage.lif.reset();
  last_spikes_.clear();
}

template <typename Real>
void SpikingPatchSplit<Real>::set_training(bool training) {
  for (auto& stage : stages_) stage.bn.set_training(training);
}

template <typename Real>
void SpikingPatchSplit<Real>::collect_parameters(const std::string& prefix,
                                                 NamedTensors<Real>& out) {
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string name = prefix + (stages_[i].pool ? ".stage" + std::to_string(i) : ".rpe");
    stages_[i].conv.collect_parameters(name + ".conv", out);
    stages_[i].bn.collect_parameters(name + ".bn", out);
  }
}

template <typename Real>
void SpikingPatchSplit<Real>::collect_buffers(const std::string& prefix, NamedTensors<Real>& out) {
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string name = prefix + (stages_[i].pool ? ".stage" + std::to_string(i) : ".rpe");
    stages_[i].bn.collect_buffers(name + ".bn", out);
  }
}

// --- EncoderBlock -----------------------------------------------------------

template <typename Real>
EncoderBlock<Real>::EncoderBlock(const ModelConfig& config, Rng& rng)
    : attention(SSAConfig{config.embed_dim, config.num_heads, config.attention_scale}, config.tim,
                config.lif, rng),
      lif1_(config.lif),
      lif2_(config.lif) {
  const std::size_t d = config.embed_dim;
  const std::size_t hidden = config.mlp_ratio * d;
  fc1 = Linear<Real>(d, hidden, false, rng);
  bn1 = BatchNorm<Real>(hidden, BatchNorm<Real>::kLastAxis);
  fc2 = Linear<Real>(hidden, d, false, rng);
  bn2 = BatchNorm<Real>(d, BatchNorm<Real>::kLastAxis);
}

template <typename Real>
Tensor<Real> EncoderBlock<Real>::forward(const Tensor<Real>& xs) {
  last_attention_spikes_ = attention.forward(xs);
  Tensor<Real> residual = add(xs, last_attention_spikes_);
  Tensor<Real> hidden = lif1_.forward(bn1(fc1(residual)));
  last_mlp_spikes_ = lif2_.forward(bn2(fc2(hidden)));
  return add(residual, last_mlp_spikes_);
}

template <typename Real>
void EncoderBlock<Real>::reset_state() {
  attention.reset_state();
  lif1_.reset();
  lif2_.reset();
  last_attention_spikes_ = {};
  last_mlp_spikes_ = {};
}

template <typename Real>
void EncoderBlock<Real>::set_training(bool training) {
  attention.set_training(training);
  bn1.set_training(training);
  bn2.set_training(training);
}

template <typename Real>
void EncoderBlock<Real>::collect_parameters(const std::string& prefix, NamedTensors<Real>& out) {
  attention.collect_parameters(prefix + ".attn", out);
  fc1.collect_parameters(prefix + ".mlp.fc1", out);
  bn1.collect_parameters(prefix + ".mlp.bn1", out);
  fc2.collect_parameters(prefix + ".mlp.fc2", out);
  bn2.collect_parameters(prefix + ".mlp.bn2", out);
}

template <typename Real>
void EncoderBlock<Real>::collect_buffers(const std::string& prefix, NamedTensors<Real>& out) {
  attention.collect_buffers(prefix + ".attn", out);
  bn1.collect_buffers(prefix + ".mlp.bn1", out);
  bn2.collect_buffers(prefix + ".mlp.bn2", out);
}

// --- SpikingTransformer -----------------------------------------------------

template <typename Real>
SpikingTransformer<Real>::SpikingTransformer(const ModelConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  Rng rng(seed);
  sps_ = SpikingPatchSplit<Real>(config_, rng);
  blocks_.reserve(config_.depth);
  for (std::size_t i = 0; i < config_.depth; ++i) blocks_.emplace_back(config_, rng);
  head_ = Linear<Real>(config_.embed_dim, config_.num_classes, true, rng);
}

template <typename Real>
Tensor<Real> SpikingTransformer<Real>::forward(const Tensor<Real>& frames) {
  if (!clean_) {
    throw ContractError("model state was not reset since the previous forward pass");
  }
  const bool batched = frames.rank() == 5;
  if (!batched && frames.rank() != 4) {
    throw DimensionError("model expects frames [T, B, C, H, W] or [T, C, H, W], got " +
                         shape_to_string(frames.shape()));
  }
  const Shape& s = frames.shape();
  const std::size_t off = batched ? 1 : 0;
  if (s[0] != config_.time_steps || s[1 + off] != config_.in_channels ||
      s[2 + off] != config_.height || s[3 + off] != config_.width) {
    throw DimensionError("frames " + shape_to_string(s) + " do not match the model geometry T=" +
                         std::to_string(config_.time_steps) + ", C=" +
                         std::to_string(config_.in_channels) + ", H=" +
                         std::to_string(config_.height) + ", W=" + std::to_string(config_.width));
  }
  clean_ = false;
  Tensor<Real> x = batched ? frames : reshape(frames, {s[0], 1, s[1], s[2], s[3]});
  Tensor<Real> tokens = sps_.forward(x);
  for (auto& block : blocks_) tokens = block.forward(tokens);
  // [T, B, N, D] -> mean over tokens, then over time.
  Tensor<Real> features = mean_axis(mean_axis(tokens, 2), 0);
  Tensor<Real> logits = head_(features);
  if (!batched) logits = reshape(logits, {config_.num_classes});
  return logits;
}

template <typename Real>
void SpikingTransformer<Real>::reset_state() {
  sps_.reset_state();
  for (auto& block : blocks_) block.reset_state();
  clean_ = true;
}

template <typename Real>
void SpikingTransformer<Real>::set_training(bool training) {
  training_ = training;
  sps_.set_training(training);
  for (auto& block : blocks_) block.set_training(training);
}

template <typename Real>
void SpikingTransformer<Real>::set_attention_mode(AttentionMode mode) {
  config_.tim.mode = mode;
  for (auto& block : blocks_) block.attention.set_mode(mode);
}

template <typename Real>
void SpikingTransformer<Real>::set_alpha(double alpha) {
  for (auto& block : blocks_) block.attention.set_alpha(alpha);
  config_.tim.alpha = alpha;
}

template <typename Real>
NamedTensors<Real> SpikingTransformer<Real>::parameters() {
  NamedTensors<Real> out;
  sps_.collect_parameters("sps", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect_parameters("blocks." + std::to_string(i), out);
  }
  head_.collect_parameters("head", out);
  return out;
}

template <typename Real>
NamedTensors<Real> SpikingTransformer<Real>::buffers() {
  NamedTensors<Real> out;
  sps_.collect_buffers("sps", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect_buffers("blocks." + std::to_string(i), out);
  }
  return out;
}

template <typename Real>
std::uint64_t SpikingTransformer<Real>::parameter_count() {
  std::uint64_t total = 0;
  for (const auto& p : parameters()) total += p.tensor->numel();
  return total;
}

template class SpikingPatchSplit<float>;
template class SpikingPatchSplit<double>;
template class EncoderBlock<float>;
template class EncoderBlock<double>;
template class SpikingTransformer<float>;
template class SpikingTransformer<double>;

}  // namespace spiketim
