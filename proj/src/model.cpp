#include "sbanet/model.hpp"

#include <cmath>

#include <json.hpp>

#include "sbanet/errors.hpp"

namespace sbanet {

namespace {
constexpr std::pair<BamVariant, std::string_view> kVariants[] = {
    {BamVariant::Pwam, "pwam"},
    {BamVariant::SelfAttn, "self-attn"},
    {BamVariant::CrossAttn, "cross-attn"},
    {BamVariant::LearnableNoPe, "learnable-no-pe"},
    {BamVariant::Bam, "bam"},
};
}  // namespace

std::string_view variant_name(BamVariant v) {
  for (const auto& [k, name] : kVariants) {
    if (k == v) return name;
  }
  return "unknown";
}

BamVariant variant_from_name(std::string_view name) {
  for (const auto& [k, n] : kVariants) {
    if (n == name) return k;
  }
  throw ConfigError("bam_variant: unknown variant \"" + std::string(name) + "\"");
}

std::size_t ModelConfig::tokens_for_stage(std::size_t stage) const {
  return m_override.empty() ? query_tokens : m_override.at(stage);
}

std::vector<std::size_t> ModelConfig::bins_for_stage(std::size_t stage) const {
  const std::size_t r = visual_geometry().resolution(stage);
  std::vector<std::size_t> bins;
  for (auto g : pyramid_group) {
    if (g >= 1 && g <= r) bins.push_back(g);
  }
  return bins;
}

std::optional<AlignmentKind> ModelConfig::alignment() const {
  if (!updates_text()) return std::nullopt;
  switch (bam_variant) {
    case BamVariant::SelfAttn:
      return AlignmentKind::SelfAttention;
    case BamVariant::CrossAttn:
      return AlignmentKind::CrossAttention;
    default:
      return AlignmentKind::QueryTokens;
  }
}

void ModelConfig::validate() const {
  visual_geometry().validate();
  if (text_width == 0 || max_len == 0 || vocab_size == 0) {
    throw ConfigError("text_width, max_len and vocab_size must be positive");
  }
  if (query_tokens == 0) throw ConfigError("query_tokens must be at least 1");
  if (!m_override.empty()) {
    if (m_override.size() != kStages) throw ConfigError("m_override needs one entry per stage (4)");
    for (auto m : m_override) {
      if (m == 0) throw ConfigError("m_override entries must be at least 1");
    }
  }
  if (pyramid_group.empty()) throw ConfigError("pyramid_group must not be empty");
  for (auto g : pyramid_group) {
    if (g == 0) throw ConfigError("pyramid_group entries must be positive");
  }
  if (grid_stage < 1 || grid_stage > kStages) throw ConfigError("grid_stage must be in [1, 4]");
  for (std::size_t i = 0; i < kStages; ++i) {
    const std::size_t c = visual_geometry().channels(i);
    if (pwam_heads == 0 || c % pwam_heads != 0) {
      throw ConfigError("pwam_heads must divide every stage width (stage " + std::to_string(i + 1) + " has " +
                        std::to_string(c) + ")");
    }
    if (use_dfs && bins_for_stage(i).empty()) {
      throw ConfigError("pyramid_group has no bin that fits stage " + std::to_string(i + 1));
    }
    if (use_tcsa && (heads == 0 || c % heads != 0)) {
      throw ConfigError("heads must divide every stage width (stage " + std::to_string(i + 1) + " has " +
                        std::to_string(c) + ")");
    }
  }
  if (use_tcsa) {
    std::size_t cc = guidance_dim;
    for (std::size_t i = 0; i < kStages; ++i) cc += visual_geometry().channels(i);
    if (guidance_dim == 0 || cc % heads != 0) {
      throw ConfigError("heads must divide c_c = " + std::to_string(cc) + " and guidance_dim must be positive");
    }
  }
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["image_size"] = image_size;
  j["patch"] = patch;
  j["base_channels"] = base_channels;
  j["text_width"] = text_width;
  j["max_len"] = max_len;
  j["vocab_size"] = vocab_size;
  j["query_tokens"] = query_tokens;
  j["m_override"] = m_override;
  j["pyramid_group"] = pyramid_group;
  j["guidance_dim"] = guidance_dim;
  j["heads"] = heads;
  j["pwam_heads"] = pwam_heads;
  j["grid_stage"] = grid_stage;
  j["use_dfs"] = use_dfs;
  j["use_bam"] = use_bam;
  j["use_tcsa"] = use_tcsa;
  j["tcsa_channel"] = tcsa_channel;
  j["tcsa_spatial"] = tcsa_spatial;
  j["tcsa_text"] = tcsa_text;
  j["bam_variant"] = std::string(variant_name(bam_variant));
  j["seed"] = seed;
  return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "image_size") c.image_size = value.get<std::size_t>();
      else if (key == "patch") c.patch = value.get<std::size_t>();
      else if (key == "base_channels") c.base_channels = value.get<std::size_t>();
      else if (key == "text_width") c.text_width = value.get<std::size_t>();
      else if (key == "max_len") c.max_len = value.get<std::size_t>();
      else if (key == "vocab_size") c.vocab_size = value.get<std::size_t>();
      else if (key == "query_tokens") c.query_tokens = value.get<std::size_t>();
      else if (key == "m_override") c.m_override = value.get<std::vector<std::size_t>>();
      else if (key == "pyramid_group") c.pyramid_group = value.get<std::vector<std::size_t>>();
      else if (key == "guidance_dim") c.guidance_dim = value.get<std::size_t>();
      else if (key == "heads") c.heads = value.get<std::size_t>();
      else if (key == "pwam_heads") c.pwam_heads = value.get<std::size_t>();
      else if (key == "grid_stage") c.grid_stage = value.get<std::size_t>();
      else if (key == "use_dfs") c.use_dfs = value.get<bool>();
      else if (key == "use_bam") c.use_bam = value.get<bool>();
      else if (key == "use_tcsa") c.use_tcsa = value.get<bool>();
      else if (key == "tcsa_channel") c.tcsa_channel = value.get<bool>();
      else if (key == "tcsa_spatial") c.tcsa_spatial = value.get<bool>();
      else if (key == "tcsa_text") c.tcsa_text = value.get<bool>();
      else if (key == "bam_variant") c.bam_variant = variant_from_name(value.get<std::string>());
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("unknown config key \"" + key + "\"");
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key \"" + key + "\" has the wrong type");
    }
  }
  c.validate();
  return c;
}

DecoderParams DecoderParams::init(const std::array<std::size_t, kStages>& channels, Rng& rng) {
  DecoderParams p;
  p.top = LinearParams::init(channels[3], channels[2], rng);
  const auto widths = fusion_widths(channels);
  for (std::size_t k = 0; k < 3; ++k) {
    const std::size_t target = channels[2 - k];
    p.fuse[k] = LinearParams::init(widths[k], target, rng);
    p.fuse_norm[k] = LayerNormParams::init(target);
  }
  p.refine = LinearParams::init(channels[0] + 3, channels[0], rng);
  p.head = LinearParams::init(channels[0], 2, rng);
  // Start from a background-leaning prior: referents cover roughly a tenth of
  // the image, and a zero-margin head spends its first hundred steps learning that.
  auto b = p.head.bias.mutable_values();
  b[0] = 0.0;
  b[1] = std::log(kForegroundPrior / (1.0 - kForegroundPrior));
  return p;
}

std::array<std::size_t, 3> DecoderParams::fusion_widths(const std::array<std::size_t, kStages>& channels) {
  return {channels[2] + channels[2], channels[2] + channels[1], channels[1] + channels[0]};
}

void DecoderParams::collect(ParamList& list, const std::string& prefix) const {
  top.collect(list, prefix + ".top");
  for (std::size_t k = 0; k < 3; ++k) {
    const std::string s = prefix + ".fuse" + std::to_string(3 - k);
    fuse[k].collect(list, s);
    fuse_norm[k].collect(list, s + ".norm");
  }
  refine.collect(list, prefix + ".refine");
  head.collect(list, prefix + ".head");
}

ModelParams ModelParams::init(const ModelConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, 0x5ba7e7));
  ModelParams p;
  p.config = config;
  const auto geometry = config.visual_geometry();
  p.visual = VisualEncoderParams::init(geometry, rng);
  p.text = TextEncoderParams::init(config.text_geometry(), rng);
  std::array<std::size_t, kStages> channels{};
  for (std::size_t i = 0; i < kStages; ++i) channels[i] = geometry.channels(i);
  const auto alignment = config.alignment();
  for (std::size_t i = 0; i < kStages; ++i) {
    const std::size_t c = channels[i];
    if (alignment == AlignmentKind::QueryTokens) {
      const bool with_position = config.bam_variant != BamVariant::LearnableNoPe;
      p.queries[i] = QueryTokenState::init(config.tokens_for_stage(i), c, with_position, rng);
    }
    std::vector<std::size_t> bins = config.use_dfs ? config.bins_for_stage(i) : std::vector<std::size_t>{};
    p.fusion[i] = BamParams::init(c, config.text_width, std::move(bins), config.pwam_heads, alignment, rng);
  }
  if (config.use_tcsa) {
    const std::size_t grid = geometry.resolution(config.grid_stage - 1);
    p.tcsa = TcsaParams::init(channels, config.text_width, config.guidance_dim, config.heads, grid, grid, rng);
  }
  p.decoder = DecoderParams::init(channels, rng);
  return p;
}

ParamList ModelParams::parameters() const {
  ParamList list;
  visual.collect(list, "visual");
  text.collect(list, "text");
  for (std::size_t i = 0; i < kStages; ++i) {
    const std::string s = "bam" + std::to_string(i + 1);
    if (queries[i].tokens.defined()) queries[i].collect(list, s + ".queries");
    fusion[i].collect(list, s);
  }
  if (tcsa) tcsa->collect(list, "tcsa");
  decoder.collect(list, "decoder");
  return list;
}

ForwardTrace forward_trace(const Tensor& image, std::span<const int> tokens, std::size_t valid,
                           const ModelParams& params) {
  const auto& cfg = params.config;
  ForwardTrace trace;
  TextFeatures text = encode_text(tokens, valid, params.text);
  Tensor x = embed_patches(image, params.visual);
  for (std::size_t i = 0; i < kStages; ++i) {
    const StageFeatures pure = run_visual_stage(i, x, params.visual);
    BamOutput out = bam_forward(pure, text, params.queries[i], params.fusion[i]);
    text = std::move(out.text);
    trace.stage_outputs[i] = {add(pure.map, out.residual)};
    x = trace.stage_outputs[i].map;
  }
  if (params.tcsa) {
    const TcsaOptions options{cfg.tcsa_channel, cfg.tcsa_spatial, cfg.tcsa_text};
    trace.enhanced = tcsa_forward(trace.stage_outputs, text, *params.tcsa, options);
  } else {
    trace.enhanced = trace.stage_outputs;
  }
  trace.text = text;
  trace.logits = decode(trace.enhanced, params.decoder, image);
  return trace;
}

Tensor forward(const Tensor& image, std::span<const int> tokens, std::size_t valid, const ModelParams& params) {
  return forward_trace(image, tokens, valid, params).logits;
}

Tensor decode(const std::array<StageFeatures, kStages>& stages, const DecoderParams& p, const Tensor& image) {
  Tensor y = project(stages[3].map, p.top);
  for (std::size_t k = 0; k < 3; ++k) {
    const StageFeatures& skip = stages[2 - k];
    const Tensor up = bilinear_resize(y, skip.height(), skip.width());
    const Tensor parts[] = {up, skip.map};
    const Tensor joined = concat(parts);
    if (joined.dim(2) != p.fuse[k].in()) {
      throw ShapeError("decode: fusion input " + shape_str(joined.shape()) + " does not match width " +
                       std::to_string(p.fuse[k].in()));
    }
    y = relu(apply_layer_norm(project(joined, p.fuse[k]), p.fuse_norm[k]));
  }
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw ShapeError("decode: image " + shape_str(image.shape()) + " is not [H, W, 3]");
  }
  const Tensor parts[] = {bilinear_resize(y, image.dim(0), image.dim(1)), image};
  return project(relu(project(concat(parts), p.refine)), p.head);
}

Tensor ce_loss(const Tensor& logits, const BinaryMask& mask) {
  if (logits.rank() != 3 || logits.dim(2) != 2 || logits.dim(0) != mask.height || logits.dim(1) != mask.width) {
    throw ShapeError("ce_loss: logits " + shape_str(logits.shape()) + " do not match a " +
                     std::to_string(mask.height) + "x" + std::to_string(mask.width) + " mask");
  }
  std::vector<int> labels(mask.bits.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (mask.bits[i] > 1) throw DataError("ce_loss: mask value " + std::to_string(mask.bits[i]) + " is not binary");
    labels[i] = mask.bits[i];
  }
  return cross_entropy(logits, labels);
}

BinaryMask predict_mask(const Tensor& logits) {
  if (logits.rank() != 3 || logits.dim(2) != 2) {
    throw ShapeError("predict_mask: expected [H, W, 2] logits, got " + shape_str(logits.shape()));
  }
  BinaryMask mask(logits.dim(0), logits.dim(1));
  const auto v = logits.values();
  for (std::size_t i = 0; i < mask.bits.size(); ++i) mask.bits[i] = v[2 * i + 1] > v[2 * i] ? 1 : 0;
  return mask;
}

}  // namespace sbanet
