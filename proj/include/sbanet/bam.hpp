#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "sbanet/nn.hpp"

namespace sbanet {

// M learnable query tokens of width c_q with their position embedding. The
// embedding is undefined for the no-position-embedding ablation.
struct QueryTokenState {
  Tensor tokens;   // [M, c_q]
  Tensor pos_emb;  // [M, c_q] or undefined

  static QueryTokenState init(std::size_t count, std::size_t width, bool with_position, Rng& rng);
  std::size_t count() const { return tokens.dim(0); }
  std::size_t width() const { return tokens.dim(1); }
  void collect(ParamList& list, const std::string& prefix) const;
};

// How R_i (the visual evidence per text token) is produced.
enum class AlignmentKind {
  QueryTokens,     // learnable query tokens, query-text alignment
  SelfAttention,   // text attends to itself
  CrossAttention,  // text attends to every visual position directly
};

// Parameters of one fusion stage. The full module has an alignment kind and a
// non-empty pyramid; ablations drop the linguistic update (no alignment) or the
// pyramid (plain pixel-word attention at full resolution).
struct BamParams {
  std::size_t visual_dim = 0;  // c_i (= c_q)
  std::size_t text_dim = 0;    // d
  std::optional<AlignmentKind> alignment;

  // Query-token update: cross-attention from tokens to pixels, then LN(x + FFN(x)).
  LinearParams token_query, token_key, token_value;
  LinearParams token_ffn1, token_ffn2;
  LayerNormParams token_norm;

  // Query-text alignment; each projection is followed by GeLU.
  LinearParams align_query;  // w_iq: d → d
  LinearParams align_key;    // w_ik: c_q → d
  LinearParams align_value;  // w_iv: c_q → d
  LinearParams align_out;    // w_iqt: d → d, followed by LN
  LayerNormParams align_norm;
  // Used only by the self-attention alignment ablation (d → d keys/values).
  LinearParams self_key, self_value;

  // Linguistic update; both followed by ReLU.
  LinearParams lang_in;   // w_il
  LinearParams lang_out;  // w_if

  // Dynamic feature selection.
  std::vector<std::size_t> bins;
  std::vector<LinearParams> bin_conv;
  std::vector<LayerNormParams> bin_norm;
  std::vector<PwamParams> bin_pwam;
  Mlp2Params fusion;  // (|bins|·c) → c → c

  // Full-resolution PWAM used instead of the pyramid when `bins` is empty.
  PwamParams pixel_word;

  GateParams gate;

  // `bins` must already be clipped to the stage's spatial extent; an empty
  // list selects the full-resolution PWAM path.
  static BamParams init(std::size_t visual_dim, std::size_t text_dim, std::vector<std::size_t> bins,
                        std::size_t pwam_heads, std::optional<AlignmentKind> alignment, Rng& rng);
  bool has_pyramid() const { return !bins.empty(); }
  void collect(ParamList& list, const std::string& prefix) const;
};

// Scaled dot-product attention from LQ + pos_emb to the flattened stage,
// followed by LN(x + FFN(x)). Returns LQ' [M, c_q].
Tensor update_query_tokens(const QueryTokenState& state, const StageFeatures& visual, const BamParams& p);

// R_i [l, d] from the previous text features and the updated query tokens.
Tensor query_text_align(const TextFeatures& text, const Tensor& tokens, const BamParams& p);
// R_i computed from text self-attention (ablation).
Tensor self_attention_align(const TextFeatures& text, const BamParams& p);
// R_i computed with the text tokens attending to every visual position (ablation).
Tensor cross_attention_align(const TextFeatures& text, const StageFeatures& visual, const BamParams& p);

// F'_L = relu(w_if(relu(w_il(F_L)) ⊙ R)); the valid count is carried through.
TextFeatures update_linguistic(const TextFeatures& text, const Tensor& evidence, const BamParams& p);

// Pyramid pool → per-bin conv+LN → per-bin PWAM → bilinear upsample → concat → mlp2.
StageFeatures dynamic_feature_select(const StageFeatures& visual, const TextFeatures& text, const BamParams& p);

struct BamOutput {
  StageFeatures visual;  // F'_V
  TextFeatures text;     // F'_L
  Tensor residual;       // language_gate(F'_V), [h, w, c]
};

// Query update → alignment → linguistic update → dynamic feature selection →
// language gate. Ablation layouts skip the missing pieces (see BamParams).
BamOutput bam_forward(const StageFeatures& visual, const TextFeatures& text, const QueryTokenState& state,
                      const BamParams& p);

}  // namespace sbanet
