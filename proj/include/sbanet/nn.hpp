#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sbanet/random.hpp"
#include "sbanet/tensor.hpp"

namespace sbanet {

// One hierarchy level of visual features, stored as [h, w, c].
struct StageFeatures {
  Tensor map;

  std::size_t height() const { return map.dim(0); }
  std::size_t width() const { return map.dim(1); }
  std::size_t channels() const { return map.dim(2); }
  // [h·w, c] view sharing the buffer.
  Tensor flat() const { return reshape(map, {height() * width(), channels()}); }
  static StageFeatures from_flat(const Tensor& flat, std::size_t h, std::size_t w) {
    return {reshape(flat, {h, w, flat.dim(1)})};
  }
};

// Token features [l, d]; only the first `valid` rows carry content.
struct TextFeatures {
  Tensor tokens;
  std::size_t valid = 0;

  std::size_t length() const { return tokens.dim(0); }
  std::size_t width() const { return tokens.dim(1); }
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

// Uniform(−1/√fan_in, 1/√fan_in) leaf.
Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng);

struct LinearParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]; undefined for key projections feeding a softmax over keys

  static LinearParams init(std::size_t in, std::size_t out, Rng& rng);
  static LinearParams init_unbiased(std::size_t in, std::size_t out, Rng& rng);
  std::size_t in() const { return weight.dim(1); }
  std::size_t out() const { return weight.dim(0); }
  void collect(ParamList& list, const std::string& prefix) const;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  static LayerNormParams init(std::size_t n);
  void collect(ParamList& list, const std::string& prefix) const;
};

// A 1×1 depth-wise convolution: per-channel scale and bias, no channel mixing.
struct DepthwiseParams {
  Tensor scale;
  Tensor bias;

  static DepthwiseParams init(std::size_t channels, Rng& rng, bool with_bias = true);
  void collect(ParamList& list, const std::string& prefix) const;
};

// LN → linear → GeLU → linear.
struct Mlp2Params {
  LayerNormParams norm;
  LinearParams fc1;
  LinearParams fc2;

  static Mlp2Params init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);
  void collect(ParamList& list, const std::string& prefix) const;
};

// Pixel-word attention: visual queries, text keys/values, projected to the
// visual width `c`.
struct PwamParams {
  LinearParams query;   // c → c
  LinearParams key;     // d → c, no bias
  LinearParams value;   // d → c
  LinearParams visual;  // c → c
  LinearParams output;  // c → c
  std::size_t heads = 1;

  static PwamParams init(std::size_t visual_dim, std::size_t text_dim, std::size_t heads, Rng& rng);
  void collect(ParamList& list, const std::string& prefix) const;
};

// Two per-position projections (hidden width = c); gate = tanh(fc2(relu(fc1(y)))).
struct GateParams {
  LinearParams fc1;
  LinearParams fc2;

  static GateParams init(std::size_t channels, Rng& rng);
  void collect(ParamList& list, const std::string& prefix) const;
};

inline constexpr double kLayerNormEps = 1e-5;
// Additive logit for padded keys.
inline constexpr double kMaskLogit = -1e9;

Tensor project(const Tensor& x, const LinearParams& p);
Tensor depthwise(const Tensor& x, const DepthwiseParams& p);
Tensor apply_layer_norm(const Tensor& x, const LayerNormParams& p);

struct AttentionOutput {
  Tensor output;                // [nq, dv]
  std::vector<Tensor> weights;  // one [nq, nk] softmax matrix per head
};

// Multi-head scaled dot-product attention. Head h uses columns
// [h·dk/heads, (h+1)·dk/heads) of q and k, and the matching slice of v; logits
// are divided by √scale_dim. Keys at index ≥ valid_keys are masked out.
AttentionOutput attend(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                       std::size_t scale_dim, std::size_t valid_keys);
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, std::size_t scale_dim);
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, std::size_t scale_dim,
                 std::size_t valid_keys);

// Adaptive average pooling into g×g bins for each g (see adaptive_avg_pool for the split).
std::vector<Tensor> pyramid_pool(const StageFeatures& x, std::span<const std::size_t> bins);
Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);

Tensor mlp2(const Tensor& x, const Mlp2Params& p);

// Visual features [..., c] fused with the valid text tokens; returns [..., c].
Tensor pwam(const Tensor& visual, const TextFeatures& text, const PwamParams& p);

// gate ⊙ y; the caller adds the result to the stage's pure-vision features.
Tensor language_gate(const Tensor& y, const GateParams& g);

}  // namespace sbanet
