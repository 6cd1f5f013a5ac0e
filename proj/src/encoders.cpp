#include "sbanet/encoders.hpp"

#include "sbanet/errors.hpp"

namespace sbanet {

void VisualGeometry::validate() const {
  const std::size_t multiple = patch * 8;
  if (patch == 0 || base_channels == 0 || image_size == 0 || image_size % multiple != 0) {
    throw ConfigError("image size " + std::to_string(image_size) + " must be a positive multiple of patch·8 = " +
                      std::to_string(multiple));
  }
}

VisualEncoderParams VisualEncoderParams::init(const VisualGeometry& geometry, Rng& rng) {
  geometry.validate();
  VisualEncoderParams p;
  p.geometry = geometry;
  const std::size_t c0 = geometry.channels(0);
  const std::size_t patch_in = geometry.patch * geometry.patch * 3;
  p.patch_embed = LinearParams::init(patch_in, c0, rng);
  const std::size_t r0 = geometry.resolution(0);
  p.position = init_uniform({r0, r0, c0}, c0, rng);
  for (std::size_t i = 0; i < kStages; ++i) {
    const std::size_t c = geometry.channels(i);
    if (i > 0) p.stages[i].merge = LinearParams::init(4 * geometry.channels(i - 1), c, rng);
    p.stages[i].mix = Mlp2Params::init(c, 2 * c, c, rng);
  }
  return p;
}

void VisualEncoderParams::collect(ParamList& list, const std::string& prefix) const {
  patch_embed.collect(list, prefix + ".patch_embed");
  list.push_back({prefix + ".position", position});
  for (std::size_t i = 0; i < kStages; ++i) {
    const std::string s = prefix + ".stage" + std::to_string(i + 1);
    if (i > 0) stages[i].merge.collect(list, s + ".merge");
    stages[i].mix.collect(list, s + ".mix");
  }
}

Tensor embed_patches(const Tensor& image, const VisualEncoderParams& p) {
  const auto& g = p.geometry;
  if (image.rank() != 3 || image.dim(2) != 3 || image.dim(0) != g.image_size || image.dim(1) != g.image_size) {
    throw ShapeError("encode_image: expected a [" + std::to_string(g.image_size) + "," +
                     std::to_string(g.image_size) + ",3] image, got " + shape_str(image.shape()));
  }
  return add(project(space_to_depth(image, g.patch), p.patch_embed), p.position);
}

StageFeatures run_visual_stage(std::size_t stage, const Tensor& input, const VisualEncoderParams& p) {
  Tensor x = stage == 0 ? input : project(space_to_depth(input, 2), p.stages[stage].merge);
  return {add(x, mlp2(x, p.stages[stage].mix))};
}

std::array<StageFeatures, kStages> encode_image(const Tensor& image, const VisualEncoderParams& p) {
  p.geometry.validate();
  std::array<StageFeatures, kStages> out;
  Tensor x = embed_patches(image, p);
  for (std::size_t i = 0; i < kStages; ++i) {
    out[i] = run_visual_stage(i, x, p);
    x = out[i].map;
  }
  return out;
}

TextEncoderParams TextEncoderParams::init(const TextGeometry& geometry, Rng& rng) {
  TextEncoderParams p;
  p.geometry = geometry;
  const std::size_t d = geometry.width;
  p.embedding = init_uniform({geometry.vocab, d}, 1, rng);
  p.position = init_uniform({geometry.max_len, d}, d, rng);
  p.attn_norm = LayerNormParams::init(d);
  p.query = LinearParams::init(d, d, rng);
  p.key = LinearParams::init_unbiased(d, d, rng);
  p.value = LinearParams::init(d, d, rng);
  p.out = LinearParams::init(d, d, rng);
  p.mlp = Mlp2Params::init(d, 2 * d, d, rng);
  p.final_norm = LayerNormParams::init(d);
  return p;
}

void TextEncoderParams::collect(ParamList& list, const std::string& prefix) const {
  list.push_back({prefix + ".embedding", embedding});
  list.push_back({prefix + ".position", position});
  attn_norm.collect(list, prefix + ".attn_norm");
  query.collect(list, prefix + ".query");
  key.collect(list, prefix + ".key");
  value.collect(list, prefix + ".value");
  out.collect(list, prefix + ".out");
  mlp.collect(list, prefix + ".mlp");
  final_norm.collect(list, prefix + ".final_norm");
}

Tensor text_self_attention(const Tensor& x, std::size_t valid, const TextEncoderParams& p) {
  const Tensor h = apply_layer_norm(x, p.attn_norm);
  return attention(project(h, p.query), project(h, p.key), project(h, p.value), 1, p.geometry.width, valid);
}

TextFeatures encode_text(std::span<const int> ids, std::size_t valid, const TextEncoderParams& p) {
  const auto& g = p.geometry;
  if (valid == 0) throw ContractError("encode_text: empty expression");
  if (valid > ids.size() || ids.size() > g.max_len) {
    throw ContractError("encode_text: " + std::to_string(ids.size()) + " ids with " + std::to_string(valid) +
                        " valid do not fit max length " + std::to_string(g.max_len));
  }
  // Embedding lookup as a one-hot product so the table receives gradients.
  std::vector<double> one_hot(g.max_len * g.vocab, 0.0);
  for (std::size_t t = 0; t < g.max_len; ++t) {
    const int id = t < ids.size() ? ids[t] : 0;
    if (id < 0 || static_cast<std::size_t>(id) >= g.vocab) {
      throw DataError("encode_text: token id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(g.vocab));
    }
    one_hot[t * g.vocab + static_cast<std::size_t>(id)] = 1.0;
  }
  const Tensor selector = Tensor::from_values({g.max_len, g.vocab}, std::move(one_hot));
  Tensor x = add(matmul(selector, p.embedding), p.position);
  x = add(x, project(text_self_attention(x, valid, p), p.out));
  x = add(x, mlp2(x, p.mlp));
  return {apply_layer_norm(x, p.final_norm), valid};
}

TextFeatures encode_text(std::span<const int> ids, const TextEncoderParams& p) {
  return encode_text(ids, ids.size(), p);
}

}  // namespace sbanet
