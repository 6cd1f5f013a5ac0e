#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sbanet/bam.hpp"
#include "sbanet/encoders.hpp"
#include "sbanet/mask.hpp"
#include "sbanet/nn.hpp"
#include "sbanet/tcsa.hpp"

namespace sbanet {

// Linguistic-update design used by the fusion stages (Table IV style variants).
enum class BamVariant { Pwam, SelfAttn, CrossAttn, LearnableNoPe, Bam };

std::string_view variant_name(BamVariant v);
BamVariant variant_from_name(std::string_view name);

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t patch = 4;
  std::size_t base_channels = 16;
  std::size_t text_width = 32;  // d
  std::size_t max_len = 16;     // l
  std::size_t vocab_size = 32;
  std::size_t query_tokens = 4;              // M
  std::vector<std::size_t> m_override;       // per-stage M; overrides query_tokens when non-empty
  std::vector<std::size_t> pyramid_group = {1, 2, 3, 6};
  std::size_t guidance_dim = 32;  // d_g
  std::size_t heads = 4;          // n_h
  std::size_t pwam_heads = 1;
  std::size_t grid_stage = 2;  // 1-based stage whose resolution is the common grid

  bool use_dfs = true;
  bool use_bam = true;
  bool use_tcsa = true;
  bool tcsa_channel = true;
  bool tcsa_spatial = true;
  bool tcsa_text = true;
  BamVariant bam_variant = BamVariant::Bam;

  std::uint64_t seed = 1;

  VisualGeometry visual_geometry() const { return {image_size, patch, base_channels}; }
  TextGeometry text_geometry() const { return {vocab_size, max_len, text_width}; }
  std::size_t tokens_for_stage(std::size_t stage) const;
  // Pyramid bins that fit the stage (g ≤ stage resolution).
  std::vector<std::size_t> bins_for_stage(std::size_t stage) const;
  // Whether the stages update the linguistic features.
  bool updates_text() const { return use_bam && bam_variant != BamVariant::Pwam; }
  std::optional<AlignmentKind> alignment() const;

  // Throws ConfigError describing the first violated constraint.
  void validate() const;

  // Flat JSON object; unknown keys are rejected by from_json.
  std::string to_json() const;
  static ModelConfig from_json(std::string_view text);
};

// Initial foreground probability encoded in the head bias.
inline constexpr double kForegroundPrior = 0.1;

struct DecoderParams {
  LinearParams top;                          // c4 → c3
  std::array<LinearParams, 3> fuse;          // for stages 3, 2, 1
  std::array<LayerNormParams, 3> fuse_norm;
  LinearParams refine;                       // (c1 + 3) → c1 at full resolution
  LinearParams head;                         // c1 → 2

  static DecoderParams init(const std::array<std::size_t, kStages>& channels, Rng& rng);
  // Input widths of the three fusion projections (stage 3, 2, 1).
  static std::array<std::size_t, 3> fusion_widths(const std::array<std::size_t, kStages>& channels);
  void collect(ParamList& list, const std::string& prefix) const;
};

struct ModelParams {
  ModelConfig config;
  VisualEncoderParams visual;
  TextEncoderParams text;
  std::array<QueryTokenState, kStages> queries;  // undefined tokens when unused
  std::array<BamParams, kStages> fusion;
  std::optional<TcsaParams> tcsa;
  DecoderParams decoder;

  static ModelParams init(const ModelConfig& config);
  // Every trainable tensor exactly once, in a fixed order.
  ParamList parameters() const;
};

struct ForwardTrace {
  std::array<StageFeatures, kStages> stage_outputs;  // fed to the aggregator/decoder
  std::array<StageFeatures, kStages> enhanced;       // decoder inputs
  TextFeatures text;                                 // final linguistic features
  Tensor logits;                                     // [H, W, 2]
};

ForwardTrace forward_trace(const Tensor& image, std::span<const int> tokens, std::size_t valid,
                           const ModelParams& params);
// Per-pixel 2-class logits at input resolution.
Tensor forward(const Tensor& image, std::span<const int> tokens, std::size_t valid, const ModelParams& params);

// Top-down decoder: project stage 4, then for stages 3..1 upsample ×2, concat,
// project + LN + ReLU. The stage-1 result is upsampled to the image size,
// joined with the RGB image, refined (project + ReLU) and mapped to 2 logits.
Tensor decode(const std::array<StageFeatures, kStages>& stages, const DecoderParams& p, const Tensor& image);

// Mean per-pixel cross-entropy against a binary mask.
Tensor ce_loss(const Tensor& logits, const BinaryMask& mask);

// Foreground iff logit[1] > logit[0]; ties go to background.
BinaryMask predict_mask(const Tensor& logits);

}  // namespace sbanet
