#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cdpm/autograd.hpp"
#include "cdpm/slices.hpp"

namespace cdpm {

/// Architecture of the slice-conditional noise predictor.
///
/// A 2D U-Net shared across the slices of a bundle. Level l works at
/// resolution H / 2^l with base_channels * channel_mults[l] channels. At
/// every level listed in attn_levels (encoder, and decoder) the slices are
/// mixed by multi-head self-attention across the slice axis.
struct DenoiserConfig {
  std::size_t base_channels = 32;
  std::vector<std::size_t> channel_mults{1, 2, 4};
  std::vector<std::size_t> attn_levels{2};
  std::size_t num_heads = 4;
  std::size_t time_embed_dim = 64;
  std::size_t slice_embed_dim = 64;
  std::size_t max_depth = 128;   // slice indices must lie in [0, max_depth)
  std::size_t max_slices = 20;   // tau_max: largest bundle accepted
  std::size_t in_channels = 2;   // intensity + condition flag

  std::size_t levels() const { return channel_mults.size(); }
  std::size_t channels(std::size_t level) const { return base_channels * channel_mults.at(level); }
  bool has_attention(std::size_t level) const;
  /// Spatial sizes must be divisible by this.
  std::size_t spatial_multiple() const { return std::size_t{1} << (levels() - 1); }
  bool operator==(const DenoiserConfig&) const = default;
};

void validate_denoiser_config(const DenoiserConfig& config);

/// Number of normalization groups for a channel count: the largest
/// divisor of `channels` that is at most 8 and leaves at least 4
/// channels per group (1 when there is none).
std::size_t norm_groups(std::size_t channels);

struct ParamTensor {
  std::string name;
  nn::Shape shape;
  std::vector<double> data;
};

/// Learnable parameters, addressable by layer name, in a fixed order.
class DenoiserParams {
 public:
  DenoiserParams() = default;
  DenoiserParams(DenoiserConfig config, std::vector<ParamTensor> tensors);

  const DenoiserConfig& config() const { return config_; }
  const std::vector<ParamTensor>& tensors() const { return tensors_; }
  std::vector<ParamTensor>& tensors() { return tensors_; }
  const ParamTensor& get(const std::string& name) const;
  ParamTensor& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t count() const;
  /// Compute precision; storage in checkpoints is always 32-bit.
  const std::string& precision() const { return precision_; }
  bool all_finite() const;

  bool operator==(const DenoiserParams& other) const;

 private:
  DenoiserConfig config_;
  std::vector<ParamTensor> tensors_;
  std::map<std::string, std::size_t> index_;
  std::string precision_ = "f64";
};

/// Gradient buffers aligned with DenoiserParams::tensors().
using ParamGrads = std::vector<std::vector<double>>;
ParamGrads zero_grads(const DenoiserParams& params);

/// The (name, shape) list the architecture requires, in storage order.
std::vector<std::pair<std::string, nn::Shape>> parameter_layout(const DenoiserConfig& config);

/// Deterministic initialization: weights ~ N(0, 1/fan_in), biases and
/// norm shifts 0, norm scales 1, flag embeddings ~ N(0, 1), and the final
/// output convolution all zero (so the initial prediction is exactly 0).
DenoiserParams init_denoiser(const DenoiserConfig& config, std::uint64_t seed);

/// Base sinusoidal embedding: for k < dim/2, w_k = 10000^(-k/(dim/2)),
/// e[k] = sin(pos * w_k), e[dim/2 + k] = cos(pos * w_k).
std::vector<double> sinusoidal_embedding(double position, std::size_t dim);

/// Learned time embedding: fc2(silu(fc1(sinusoid(t)))).
std::vector<double> time_embedding(const DenoiserParams& params, std::size_t t);

/// sinusoid(index) plus the learned embedding of the slice role.
std::vector<double> slice_embedding(const DenoiserParams& params, std::size_t index, SliceRole role);

/// Builds the network on `g` and returns the node holding predictions for
/// the target slices only, shape [len(P), 1, H, W]. Gradients flow into
/// `grads` when non-null and the graph records.
nn::Graph::Id build_denoiser(nn::Graph& g, const DenoiserParams& params,
                             const ConditionedInput& input, ParamGrads* grads);

/// Noise prediction for each target slice of the bundle (len(P) slices).
SliceStack predict_eps(const DenoiserParams& params, const ConditionedInput& input);

/// Throws std::invalid_argument if the bundle cannot be fed to the network.
void validate_input(const DenoiserConfig& config, const ConditionedInput& input);

}  // namespace cdpm
