#include "sbanet/tcsa.hpp"

#include <cmath>
#include <numeric>

#include "sbanet/errors.hpp"

namespace sbanet {

TcsaParams TcsaParams::init(const std::array<std::size_t, kStages>& stage_channels, std::size_t text_dim,
                            std::size_t guidance_dim, std::size_t heads, std::size_t grid_h, std::size_t grid_w,
                            Rng& rng) {
  TcsaParams p;
  p.stage_channels = stage_channels;
  p.guidance_dim = guidance_dim;
  p.heads = heads;
  p.grid_h = grid_h;
  p.grid_w = grid_w;
  const std::size_t cc = p.concat_channels();
  if (heads == 0 || cc % heads != 0) {
    throw ConfigError("tcsa: " + std::to_string(heads) + " heads do not divide c_c = " + std::to_string(cc));
  }
  for (auto c : stage_channels) {
    if (c % heads != 0) {
      throw ConfigError("tcsa: " + std::to_string(heads) + " heads do not divide stage width " + std::to_string(c));
    }
  }
  p.recap = Mlp2Params::init(text_dim, guidance_dim, guidance_dim, rng);
  for (std::size_t i = 0; i < kStages; ++i) {
    const std::size_t c = stage_channels[i];
    p.channel_norm[i] = LayerNormParams::init(c);
    p.spatial_norm[i] = LayerNormParams::init(c);
    auto& s = p.stages[i];
    s.channel_query = DepthwiseParams::init(c, rng);
    s.channel_key = DepthwiseParams::init(cc, rng);
    s.channel_value = DepthwiseParams::init(cc, rng);
    s.channel_out = DepthwiseParams::init(c, rng);
    s.spatial_query = DepthwiseParams::init(cc - guidance_dim, rng);
    s.spatial_key = DepthwiseParams::init(cc - guidance_dim, rng, false);
    s.spatial_value = DepthwiseParams::init(c, rng);
    s.spatial_out = DepthwiseParams::init(c, rng);
  }
  return p;
}

std::size_t TcsaParams::concat_channels() const {
  return std::accumulate(stage_channels.begin(), stage_channels.end(), guidance_dim);
}

void TcsaParams::collect(ParamList& list, const std::string& prefix) const {
  recap.collect(list, prefix + ".recap");
  for (std::size_t i = 0; i < kStages; ++i) {
    const std::string s = prefix + ".stage" + std::to_string(i + 1);
    channel_norm[i].collect(list, s + ".channel_norm");
    spatial_norm[i].collect(list, s + ".spatial_norm");
    stages[i].channel_query.collect(list, s + ".channel_query");
    stages[i].channel_key.collect(list, s + ".channel_key");
    stages[i].channel_value.collect(list, s + ".channel_value");
    stages[i].channel_out.collect(list, s + ".channel_out");
    stages[i].spatial_query.collect(list, s + ".spatial_query");
    stages[i].spatial_key.collect(list, s + ".spatial_key");
    stages[i].spatial_value.collect(list, s + ".spatial_value");
    stages[i].spatial_out.collect(list, s + ".spatial_out");
  }
}

Tensor recap_text(const TextFeatures& text, const TcsaParams& p) {
  if (text.valid == 0) throw ContractError("recap_text: text has no valid tokens");
  const Tensor pooled = mean_rows(slice_rows(text.tokens, 0, text.valid));
  return mlp2(pooled, p.recap);
}

Tensor resample(const Tensor& map, std::size_t h, std::size_t w) {
  const std::size_t mh = map.dim(0), mw = map.dim(1);
  if (mh == h && mw == w) return map;
  if (mh >= h && mw >= w) return adaptive_avg_pool(map, h, w);
  if (mh <= h && mw <= w) return bilinear_resize(map, h, w);
  throw ConfigError("resample: mixed up/down sampling from " + shape_str(map.shape()));
}

ConcatFeatures build_concat(const std::array<StageFeatures, kStages>& stages, const Tensor& guidance,
                            const TcsaParams& p, ConcatPath path) {
  const std::size_t gh = p.grid_h, gw = p.grid_w;
  std::size_t finest_h = 0, finest_w = 0;
  for (const auto& s : stages) {
    finest_h = std::max(finest_h, s.height());
    finest_w = std::max(finest_w, s.width());
  }
  if (gh == 0 || gw == 0 || gh > finest_h || gw > finest_w) {
    throw ConfigError("build_concat: common grid " + std::to_string(gh) + "x" + std::to_string(gw) +
                      " exceeds the finest stage " + std::to_string(finest_h) + "x" + std::to_string(finest_w));
  }
  if (guidance.numel() != p.guidance_dim) {
    throw ShapeError("build_concat: guidance has " + std::to_string(guidance.numel()) + " entries, expected " +
                     std::to_string(p.guidance_dim));
  }
  const auto& norms = path == ConcatPath::Channel ? p.channel_norm : p.spatial_norm;
  const std::size_t m = gh * gw;
  ConcatFeatures out;
  out.grid_h = gh;
  out.grid_w = gw;
  std::vector<Tensor> parts;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < kStages; ++i) {
    const std::size_t c = stages[i].channels();
    if (c != p.stage_channels[i]) {
      throw ShapeError("build_concat: stage " + std::to_string(i + 1) + " has " + std::to_string(c) +
                       " channels, expected " + std::to_string(p.stage_channels[i]));
    }
    const Tensor grid = resample(stages[i].map, gh, gw);
    parts.push_back(reshape(apply_layer_norm(grid, norms[i]), {m, c}));
    out.ranges.emplace_back(offset, offset + c);
    offset += c;
  }
  parts.push_back(add(Tensor::zeros({m, p.guidance_dim}), reshape(guidance, {p.guidance_dim})));
  out.ranges.emplace_back(offset, offset + p.guidance_dim);
  out.features = concat(parts);
  return out;
}

namespace {
void require_stage(const Tensor& stage, const ConcatFeatures& fc, const TcsaParams& p, std::size_t index) {
  if (index >= kStages) throw ContractError("tcsa: stage index out of range");
  if (stage.rank() != 2 || stage.dim(0) != fc.positions() || stage.dim(1) != p.stage_channels[index]) {
    throw ShapeError("tcsa: stage " + std::to_string(index + 1) + " features " + shape_str(stage.shape()) +
                     " do not match [" + std::to_string(fc.positions()) + "," +
                     std::to_string(p.stage_channels[index]) + "]");
  }
}
}  // namespace

AttentionParts channel_attention_parts(const Tensor& stage, const ConcatFeatures& fc, const TcsaParams& p,
                                       std::size_t index) {
  require_stage(stage, fc, p, index);
  const auto& s = p.stages[index];
  const Tensor q = depthwise(stage, s.channel_query);
  const Tensor k = depthwise(fc.features, s.channel_key);
  const Tensor v = depthwise(fc.features, s.channel_value);
  const double inv = 1.0 / std::sqrt(static_cast<double>(p.concat_channels()));
  const Tensor weights = softmax(scale(matmul(transpose(q), k), inv), 1);  // [c_i, c_c]
  const Tensor attended = matmul(v, transpose(weights));                   // (A·Vᵀ)ᵀ = V·Aᵀ, [m, c_i]
  return {v, attended, {weights}, depthwise(attended, s.channel_out)};
}

Tensor channel_attention(const Tensor& stage, const ConcatFeatures& fc, const TcsaParams& p, std::size_t index) {
  return add(stage, channel_attention_parts(stage, fc, p, index).update);
}

AttentionParts spatial_attention_parts(const Tensor& stage, const ConcatFeatures& fc, const TcsaParams& p,
                                       std::size_t index) {
  require_stage(stage, fc, p, index);
  const auto& s = p.stages[index];
  // The guidance block of F_C is the same at every position, so its query/key
  // channels only shift each logit row by a constant. Those channels stay zero.
  const std::size_t visual = p.concat_channels() - p.guidance_dim;
  const Tensor pad = Tensor::zeros({fc.positions(), p.guidance_dim});
  const Tensor visual_part = slice(fc.features, 0, visual);
  const Tensor q_parts[] = {depthwise(visual_part, s.spatial_query), pad};
  const Tensor k_parts[] = {depthwise(visual_part, s.spatial_key), pad};
  const Tensor q = concat(q_parts);
  const Tensor k = concat(k_parts);
  const Tensor v = depthwise(stage, s.spatial_value);
  AttentionOutput att = attend(q, k, v, p.heads, p.concat_channels() / p.heads, k.dim(0));
  return {v, att.output, std::move(att.weights), depthwise(att.output, s.spatial_out)};
}

Tensor spatial_attention(const Tensor& stage, const ConcatFeatures& fc, const TcsaParams& p, std::size_t index) {
  return add(stage, spatial_attention_parts(stage, fc, p, index).update);
}

std::array<StageFeatures, kStages> tcsa_forward(const std::array<StageFeatures, kStages>& stages,
                                                const TextFeatures& text, const TcsaParams& p,
                                                const TcsaOptions& options) {
  if (!options.channel && !options.spatial) return stages;
  const Tensor guidance =
      options.text ? recap_text(text, p) : Tensor::zeros({p.guidance_dim});
  const std::size_t gh = p.grid_h, gw = p.grid_w;

  std::array<StageFeatures, kStages> grid;
  std::array<Tensor, kStages> updates;
  const ConcatFeatures fc = build_concat(stages, guidance, p, ConcatPath::Channel);
  for (std::size_t i = 0; i < kStages; ++i) {
    grid[i] = {resample(stages[i].map, gh, gw)};
  }
  if (options.channel) {
    for (std::size_t i = 0; i < kStages; ++i) {
      updates[i] = channel_attention_parts(grid[i].flat(), fc, p, i).update;
      grid[i] = StageFeatures::from_flat(add(grid[i].flat(), updates[i]), gh, gw);
    }
  }
  if (options.spatial) {
    const ConcatFeatures fs = build_concat(grid, guidance, p, ConcatPath::Spatial);
    for (std::size_t i = 0; i < kStages; ++i) {
      const Tensor u = spatial_attention_parts(grid[i].flat(), fs, p, i).update;
      updates[i] = updates[i].defined() ? add(updates[i], u) : u;
    }
  }
  std::array<StageFeatures, kStages> out;
  for (std::size_t i = 0; i < kStages; ++i) {
    const Tensor delta = reshape(updates[i], {gh, gw, p.stage_channels[i]});
    out[i] = {add(stages[i].map, resample(delta, stages[i].height(), stages[i].width()))};
  }
  return out;
}

}  // namespace sbanet
