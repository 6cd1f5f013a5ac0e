#include "sbanet/bam.hpp"

#include <cmath>

#include "sbanet/errors.hpp"

namespace sbanet {

QueryTokenState QueryTokenState::init(std::size_t count, std::size_t width, bool with_position, Rng& rng) {
  if (count == 0) throw ConfigError("query tokens: M must be at least 1");
  QueryTokenState s;
  s.tokens = init_uniform({count, width}, width, rng);
  if (with_position) s.pos_emb = init_uniform({count, width}, width, rng);
  return s;
}

void QueryTokenState::collect(ParamList& list, const std::string& prefix) const {
  list.push_back({prefix + ".tokens", tokens});
  if (pos_emb.defined()) list.push_back({prefix + ".pos_emb", pos_emb});
}

BamParams BamParams::init(std::size_t visual_dim, std::size_t text_dim, std::vector<std::size_t> bins,
                          std::size_t pwam_heads, std::optional<AlignmentKind> alignment, Rng& rng) {
  const std::size_t c = visual_dim, d = text_dim;
  BamParams p;
  p.visual_dim = c;
  p.text_dim = d;
  p.alignment = alignment;
  if (alignment == AlignmentKind::QueryTokens) {
    p.token_query = LinearParams::init(c, c, rng);
    p.token_key = LinearParams::init_unbiased(c, c, rng);
    p.token_value = LinearParams::init(c, c, rng);
    p.token_ffn1 = LinearParams::init(c, 2 * c, rng);
    p.token_ffn2 = LinearParams::init(2 * c, c, rng);
    p.token_norm = LayerNormParams::init(c);
  }
  if (alignment) {
    p.align_query = LinearParams::init(d, d, rng);
    if (*alignment == AlignmentKind::SelfAttention) {
      p.self_key = LinearParams::init(d, d, rng);
      p.self_value = LinearParams::init(d, d, rng);
    } else {
      p.align_key = LinearParams::init(c, d, rng);
      p.align_value = LinearParams::init(c, d, rng);
    }
    p.align_out = LinearParams::init(d, d, rng);
    p.align_norm = LayerNormParams::init(d);
    p.lang_in = LinearParams::init(d, d, rng);
    p.lang_out = LinearParams::init(d, d, rng);
  }
  p.bins = std::move(bins);
  if (p.has_pyramid()) {
    for (std::size_t k = 0; k < p.bins.size(); ++k) {
      p.bin_conv.push_back(LinearParams::init(c, c, rng));
      p.bin_norm.push_back(LayerNormParams::init(c));
      p.bin_pwam.push_back(PwamParams::init(c, d, pwam_heads, rng));
    }
    p.fusion = Mlp2Params::init(c * p.bins.size(), c, c, rng);
  } else {
    p.pixel_word = PwamParams::init(c, d, pwam_heads, rng);
  }
  p.gate = GateParams::init(c, rng);
  return p;
}

void BamParams::collect(ParamList& list, const std::string& prefix) const {
  auto maybe = [&](const LinearParams& lp, const std::string& name) {
    if (lp.weight.defined()) lp.collect(list, prefix + name);
  };
  maybe(token_query, ".token_query");
  maybe(token_key, ".token_key");
  maybe(token_value, ".token_value");
  maybe(token_ffn1, ".token_ffn1");
  maybe(token_ffn2, ".token_ffn2");
  if (token_norm.gamma.defined()) token_norm.collect(list, prefix + ".token_norm");
  maybe(align_query, ".align_query");
  maybe(align_key, ".align_key");
  maybe(align_value, ".align_value");
  maybe(self_key, ".self_key");
  maybe(self_value, ".self_value");
  maybe(align_out, ".align_out");
  if (align_norm.gamma.defined()) align_norm.collect(list, prefix + ".align_norm");
  maybe(lang_in, ".lang_in");
  maybe(lang_out, ".lang_out");
  for (std::size_t k = 0; k < bins.size(); ++k) {
    const std::string b = prefix + ".bin" + std::to_string(bins[k]);
    bin_conv[k].collect(list, b + ".conv");
    bin_norm[k].collect(list, b + ".norm");
    bin_pwam[k].collect(list, b + ".pwam");
  }
  if (has_pyramid()) fusion.collect(list, prefix + ".fusion");
  if (!has_pyramid()) pixel_word.collect(list, prefix + ".pixel_word");
  gate.collect(list, prefix + ".gate");
}

Tensor update_query_tokens(const QueryTokenState& state, const StageFeatures& visual, const BamParams& p) {
  if (state.width() != p.visual_dim || visual.channels() != p.visual_dim) {
    throw ConfigError("update_query_tokens: token width " + std::to_string(state.width()) + " / stage width " +
                      std::to_string(visual.channels()) + " do not match " + std::to_string(p.visual_dim));
  }
  const Tensor pixels = visual.flat();
  if (pixels.numel() == 0) throw ContractError("update_query_tokens: empty visual features");
  const Tensor queries = state.pos_emb.defined() ? add(state.tokens, state.pos_emb) : state.tokens;
  const Tensor attended = attention(project(queries, p.token_query), project(pixels, p.token_key),
                                    project(pixels, p.token_value), 1, p.visual_dim);
  const Tensor x = add(queries, attended);
  const Tensor ffn = project(gelu(project(x, p.token_ffn1)), p.token_ffn2);
  return apply_layer_norm(add(x, ffn), p.token_norm);
}

namespace {
Tensor finish_alignment(const Tensor& attended, const BamParams& p) {
  // "Reshape" is the identity on the token-major [l, d] layout.
  return apply_layer_norm(project(attended, p.align_out), p.align_norm);
}

void require_text(const TextFeatures& text, const BamParams& p, const char* op) {
  if (text.valid == 0) throw ContractError(std::string(op) + ": text has no valid tokens");
  if (text.width() != p.text_dim) {
    throw ConfigError(std::string(op) + ": text width " + std::to_string(text.width()) + " != " +
                      std::to_string(p.text_dim));
  }
}
}  // namespace

Tensor query_text_align(const TextFeatures& text, const Tensor& tokens, const BamParams& p) {
  require_text(text, p, "query_text_align");
  if (tokens.rank() != 2 || tokens.dim(1) != p.align_key.in()) {
    throw ConfigError("query_text_align: tokens " + shape_str(tokens.shape()) + " do not match key projection");
  }
  const Tensor q = gelu(project(text.tokens, p.align_query));
  const Tensor k = gelu(project(tokens, p.align_key));
  const Tensor v = gelu(project(tokens, p.align_value));
  return finish_alignment(attention(q, k, v, 1, tokens.dim(1)), p);
}

Tensor self_attention_align(const TextFeatures& text, const BamParams& p) {
  require_text(text, p, "self_attention_align");
  const Tensor q = gelu(project(text.tokens, p.align_query));
  const Tensor k = gelu(project(text.tokens, p.self_key));
  const Tensor v = gelu(project(text.tokens, p.self_value));
  return finish_alignment(attention(q, k, v, 1, p.text_dim, text.valid), p);
}

Tensor cross_attention_align(const TextFeatures& text, const StageFeatures& visual, const BamParams& p) {
  require_text(text, p, "cross_attention_align");
  const Tensor pixels = visual.flat();
  const Tensor q = gelu(project(text.tokens, p.align_query));
  const Tensor k = gelu(project(pixels, p.align_key));
  const Tensor v = gelu(project(pixels, p.align_value));
  return finish_alignment(attention(q, k, v, 1, p.text_dim), p);
}

TextFeatures update_linguistic(const TextFeatures& text, const Tensor& evidence, const BamParams& p) {
  if (evidence.shape() != text.tokens.shape()) {
    throw ShapeError("update_linguistic: evidence " + shape_str(evidence.shape()) + " vs text " +
                     shape_str(text.tokens.shape()));
  }
  const Tensor lang = relu(project(text.tokens, p.lang_in));
  return {relu(project(mul(lang, evidence), p.lang_out)), text.valid};
}

StageFeatures dynamic_feature_select(const StageFeatures& visual, const TextFeatures& text, const BamParams& p) {
  const std::size_t h = visual.height(), w = visual.width();
  const auto pooled = pyramid_pool(visual, p.bins);
  std::vector<Tensor> branches;
  branches.reserve(p.bins.size());
  for (std::size_t k = 0; k < p.bins.size(); ++k) {
    const Tensor sub_scale = apply_layer_norm(project(pooled[k], p.bin_conv[k]), p.bin_norm[k]);
    const Tensor cross = pwam(sub_scale, text, p.bin_pwam[k]);
    branches.push_back(upsample_bilinear(cross, h, w));
  }
  const Tensor stacked = branches.size() == 1 ? branches.front() : concat(branches);
  return {mlp2(stacked, p.fusion)};
}

BamOutput bam_forward(const StageFeatures& visual, const TextFeatures& text, const QueryTokenState& state,
                      const BamParams& p) {
  TextFeatures updated = text;
  if (p.alignment) {
    Tensor evidence;
    switch (*p.alignment) {
      case AlignmentKind::QueryTokens:
        evidence = query_text_align(text, update_query_tokens(state, visual, p), p);
        break;
      case AlignmentKind::SelfAttention:
        evidence = self_attention_align(text, p);
        break;
      case AlignmentKind::CrossAttention:
        evidence = cross_attention_align(text, visual, p);
        break;
    }
    updated = update_linguistic(text, evidence, p);
  }
  StageFeatures refined =
      p.has_pyramid() ? dynamic_feature_select(visual, updated, p) : StageFeatures{pwam(visual.map, updated, p.pixel_word)};
  Tensor residual = language_gate(refined.map, p.gate);
  return {std::move(refined), std::move(updated), std::move(residual)};
}

}  // namespace sbanet
