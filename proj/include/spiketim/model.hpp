#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "spiketim/attention.hpp"
#include "spiketim/layers.hpp"
#include "spiketim/lif.hpp"

namespace spiketim {

struct ModelConfig {
  std::size_t time_steps = 10;
  std::size_t in_channels = 2;  // event polarities
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t sps_stages = 2;
  // Extra Conv3x3-BN-LIF stage after the pooling stages (relative position).
  bool sps_rpe = true;
  std::size_t embed_dim = 16;
  std::size_t num_heads = 2;
  std::size_t depth = 1;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 2;
  double attention_scale = 0.125;
  TIMConfig tim;
  LIFConfig lif;

  void validate() const;
  std::size_t tokens() const;
  // Output channels of each SPS pooling stage, doubling up to embed_dim.
  std::vector<std::size_t> sps_channels() const;

  // Spikformer-2-256 geometry used for the parameter-count reconstruction.
  static ModelConfig full_scale();
};

nlohmann::json to_json(const ModelConfig& config);
// Strict: unknown keys raise ConfigError. Missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

// Trainable scalars of a model built from `config`, computed in closed form.
std::uint64_t count_parameters(const ModelConfig& config);

// Spiking patch splitting: per stage Conv3x3 -> BN -> LIF -> MaxPool2, then
// an optional Conv3x3 -> BN -> LIF stage, flattened to [B, tokens, dim].
template <typename Real>
class SpikingPatchSplit {
 public:
  SpikingPatchSplit() = default;
  SpikingPatchSplit(const ModelConfig& config, Rng& rng);

  // frames: [T, B, C, H, W] -> binary spikes [T, B, tokens, dim].
  Tensor<Real> forward(const Tensor<Real>& frames);
  void reset_state();
  void set_training(bool training);
  void collect_parameters(const std::string& prefix, NamedTensors<Real>& out);
  void collect_buffers(const std::string& prefix, NamedTensors<Real>& out);

  // Spikes [T, B, C, H, W] of every stage from the last call.
  const std::vector<Tensor<Real>>& last_spikes() const { return last_spikes_; }

 private:
  struct Stage {
    Conv2d<Real> conv;
    BatchNorm<Real> bn;
    LIFNode<Real> lif;
    bool pool = true;
  };
  std::vector<Stage> stages_;
  std::vector<Tensor<Real>> last_spikes_;
};

// Spiking self attention followed by a Conv-BN-LIF MLP, each with a residual
// add after its final LIF.
template <typename Real>
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(const ModelConfig& config, Rng& rng);

  // xs: [T, B, tokens, dim] -> same shape.
  Tensor<Real> forward(const Tensor<Real>& xs);
  void reset_state();
  void set_training(bool training);
  void collect_parameters(const std::string& prefix, NamedTensors<Real>& out);
  void collect_buffers(const std::string& prefix, NamedTensors<Real>& out);

  SpikingSelfAttention<Real> attention;
  Linear<Real> fc1, fc2;
  BatchNorm<Real> bn1, bn2;

  const Tensor<Real>& last_attention_spikes() const { return last_attention_spikes_; }
  const Tensor<Real>& last_mlp_spikes() const { return last_mlp_spikes_; }

 private:
  LIFNode<Real> lif1_, lif2_;
  Tensor<Real> last_attention_spikes_;
  Tensor<Real> last_mlp_spikes_;
};

template <typename Real>
class SpikingTransformer {
 public:
  SpikingTransformer() = default;
  SpikingTransformer(const ModelConfig& config, std::uint64_t seed);

  // frames: [T, B, C, H, W] -> logits [B, classes], or [T, C, H, W] ->
  // logits [classes]. The state must be reset before every call.
  Tensor<Real> forward(const Tensor<Real>& frames);
  void reset_state();
  bool state_is_clean() const { return clean_; }
  void set_training(bool training);
  bool training() const { return training_; }

  // Switch attention mode / alpha in place, keeping every shared weight.
  void set_attention_mode(AttentionMode mode);
  void set_alpha(double alpha);

  // Stable dotted paths, in declaration order.
  NamedTensors<Real> parameters();
  NamedTensors<Real> buffers();
  std::uint64_t parameter_count();

  const ModelConfig& config() const { return config_; }
  SpikingPatchSplit<Real>& sps() { return sps_; }
  std::vector<EncoderBlock<Real>>& blocks() { return blocks_; }
  Linear<Real>& head() { return head_; }

 private:
  ModelConfig config_;
  SpikingPatchSplit<Real> sps_;
  std::vector<EncoderBlock<Real>> blocks_;
  Linear<Real> head_;
  bool clean_ = true;
  bool training_ = true;
};

extern template class SpikingPatchSplit<float>;
extern template class SpikingPatchSplit<double>;
extern template class EncoderBlock<float>;
extern template class EncoderBlock<double>;
extern template class SpikingTransformer<float>;
extern template class SpikingTransformer<double>;

}  // namespace spiketim
