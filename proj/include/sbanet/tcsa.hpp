#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "sbanet/encoders.hpp"
#include "sbanet/nn.hpp"

namespace sbanet {

struct TcsaOptions {
  bool channel = true;
  bool spatial = true;
  bool text = true;  // false replaces the text guidance with zeros
};

struct TcsaStageParams {
  DepthwiseParams channel_query;  // c_i
  DepthwiseParams channel_key;    // c_c
  DepthwiseParams channel_value;  // c_c
  DepthwiseParams channel_out;    // c_i
  DepthwiseParams spatial_query;  // c_c − d_g (guidance channels are zero)
  DepthwiseParams spatial_key;    // c_c − d_g, scale only
  DepthwiseParams spatial_value;  // c_i
  DepthwiseParams spatial_out;    // c_i
};

struct TcsaParams {
  std::array<std::size_t, kStages> stage_channels{};
  std::size_t guidance_dim = 0;  // d_g
  std::size_t heads = 4;         // n_h, spatial path only
  std::size_t grid_h = 0, grid_w = 0;

  Mlp2Params recap;  // d → d_g → d_g
  std::array<LayerNormParams, kStages> channel_norm;
  std::array<LayerNormParams, kStages> spatial_norm;
  std::array<TcsaStageParams, kStages> stages;

  static TcsaParams init(const std::array<std::size_t, kStages>& stage_channels, std::size_t text_dim,
                         std::size_t guidance_dim, std::size_t heads, std::size_t grid_h, std::size_t grid_w,
                         Rng& rng);
  std::size_t concat_channels() const;  // c_c = Σ c_i + d_g
  void collect(ParamList& list, const std::string& prefix) const;
};

struct ConcatFeatures {
  Tensor features;  // [m, c_c]
  // [begin, end) channel ranges: one per stage, then the text guidance block.
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  std::size_t grid_h = 0, grid_w = 0;

  std::size_t positions() const { return features.dim(0); }
};

enum class ConcatPath { Channel, Spatial };

// Mean over valid tokens followed by mlp2; returns F_Lg [d_g].
Tensor recap_text(const TextFeatures& text, const TcsaParams& p);

// Average-pools larger maps and bilinear-upsamples smaller ones to h×w; equal
// sizes pass through unchanged.
Tensor resample(const Tensor& map, std::size_t h, std::size_t w);

// Resample to the common grid, per-stage LN, flatten, append the broadcast
// guidance, concatenate along channels.
ConcatFeatures build_concat(const std::array<StageFeatures, kStages>& stages, const Tensor& guidance,
                            const TcsaParams& p, ConcatPath path = ConcatPath::Channel);

struct AttentionParts {
  Tensor values;                // value matrix actually attended over
  Tensor attended;              // softmax-weighted values, before the output depthwise conv
  std::vector<Tensor> weights;  // softmax matrices
  Tensor update;                // depthwise(attended), what the residual adds
};

// Channel attention of stage `index` ([m, c_i] at the common grid) against F_C.
// Softmax rows span the c_c concatenated channels.
AttentionParts channel_attention_parts(const Tensor& stage, const ConcatFeatures& fc, const TcsaParams& p,
                                       std::size_t index);
Tensor channel_attention(const Tensor& stage, const ConcatFeatures& fc, const TcsaParams& p, std::size_t index);

// Multi-head spatial attention; softmax rows span the m positions.
AttentionParts spatial_attention_parts(const Tensor& stage, const ConcatFeatures& fc, const TcsaParams& p,
                                       std::size_t index);
Tensor spatial_attention(const Tensor& stage, const ConcatFeatures& fc, const TcsaParams& p, std::size_t index);

// Recap → concat → channel then spatial attention per stage at the common grid.
// The summed updates are resampled to each stage's native size and added to it.
std::array<StageFeatures, kStages> tcsa_forward(const std::array<StageFeatures, kStages>& stages,
                                                const TextFeatures& text, const TcsaParams& p,
                                                const TcsaOptions& options = {});

}  // namespace sbanet
