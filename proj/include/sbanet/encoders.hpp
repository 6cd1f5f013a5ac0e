#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "sbanet/nn.hpp"

namespace sbanet {

inline constexpr std::size_t kStages = 4;

struct VisualGeometry {
  std::size_t image_size = 64;  // square input, H = W
  std::size_t patch = 4;        // patch-embedding stride s
  std::size_t base_channels = 16;

  std::size_t channels(std::size_t stage) const { return base_channels << stage; }
  std::size_t resolution(std::size_t stage) const { return image_size / (patch << stage); }
  // Throws ConfigError unless the image size is a multiple of s·2³.
  void validate() const;
};

struct VisualStageParams {
  LinearParams merge;  // 2×2 patch merge, 4·c_{i−1} → c_i; unused at stage 0
  Mlp2Params mix;      // residual per-position mixing block
};

struct VisualEncoderParams {
  VisualGeometry geometry;
  LinearParams patch_embed;  // s·s·3 → C
  Tensor position;           // learned absolute position table [h1, w1, C]
  std::array<VisualStageParams, kStages> stages;

  static VisualEncoderParams init(const VisualGeometry& geometry, Rng& rng);
  void collect(ParamList& list, const std::string& prefix) const;
};

// Patch embedding plus position table: [H, W, 3] → [h1, w1, C].
Tensor embed_patches(const Tensor& image, const VisualEncoderParams& p);
// Stage `stage` applied to the previous stage's output (or the patch embedding
// for stage 0): optional 2×2 merge, then x + mlp2(x).
StageFeatures run_visual_stage(std::size_t stage, const Tensor& input, const VisualEncoderParams& p);
// Pure-vision pass through all four stages.
std::array<StageFeatures, kStages> encode_image(const Tensor& image, const VisualEncoderParams& p);

struct TextGeometry {
  std::size_t vocab = 32;
  std::size_t max_len = 16;  // l
  std::size_t width = 32;    // d
};

struct TextEncoderParams {
  TextGeometry geometry;
  Tensor embedding;  // [vocab, d]
  Tensor position;   // [l, d]
  LayerNormParams attn_norm;
  LinearParams query, key, value, out;
  Mlp2Params mlp;
  LayerNormParams final_norm;

  static TextEncoderParams init(const TextGeometry& geometry, Rng& rng);
  void collect(ParamList& list, const std::string& prefix) const;
};

// Masked single-head self-attention output of the block (before the output
// projection) for embedded input `x` [l, d].
Tensor text_self_attention(const Tensor& x, std::size_t valid, const TextEncoderParams& p);

// `ids` holds `valid` real tokens followed by optional padding; it is padded
// with id 0 up to l. Returns [l, d] features with the valid count attached.
TextFeatures encode_text(std::span<const int> ids, std::size_t valid, const TextEncoderParams& p);
TextFeatures encode_text(std::span<const int> ids, const TextEncoderParams& p);

}  // namespace sbanet
