#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "sbanet/errors.hpp"
#include "sbanet/gradcheck_suite.hpp"
#include "sbanet/model.hpp"
#include "util.hpp"

using namespace sbanet;
using testutil::random_tensor;
using testutil::values;

namespace {

struct Inputs {
  Tensor image;
  std::vector<int> tokens;
  std::size_t valid = 0;
};

Inputs inputs_for(const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  Inputs in;
  in.image = random_tensor({c.image_size, c.image_size, 3}, rng, 0.0, 1.0);
  in.valid = 3 + rng.below(c.max_len - 3);
  in.tokens.assign(c.max_len, 0);
  for (std::size_t i = 0; i < in.valid; ++i) in.tokens[i] = 1 + static_cast<int>(rng.below(c.vocab_size - 1));
  return in;
}

Tensor run(const Inputs& in, const ModelParams& p) { return forward(in.image, in.tokens, in.valid, p); }

bool has_prefix(const ParamList& list, const std::string& prefix) {
  for (const auto& p : list)
    if (p.name.rfind(prefix, 0) == 0) return true;
  return false;
}

std::array<StageFeatures, kStages> random_stages(const ModelConfig& c, Rng& rng) {
  const auto g = c.visual_geometry();
  std::array<StageFeatures, kStages> s;
  for (std::size_t i = 0; i < kStages; ++i)
    s[i].map = random_tensor({g.resolution(i), g.resolution(i), g.channels(i)}, rng);
  return s;
}

}  // namespace

TEST(ModelConfig, JsonRoundTrip) {
  ModelConfig c;
  c.query_tokens = 3;
  c.m_override = {1, 2, 3, 4};
  c.bam_variant = BamVariant::CrossAttn;
  c.tcsa_spatial = false;
  c.seed = 77;
  const ModelConfig back = ModelConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.m_override, c.m_override);
  EXPECT_EQ(back.bam_variant, BamVariant::CrossAttn);
  EXPECT_FALSE(back.tcsa_spatial);
  EXPECT_EQ(back.seed, 77u);
}

TEST(ModelConfig, PartialJsonKeepsDefaults) {
  const ModelConfig c = ModelConfig::from_json(R"({"use_tcsa": false, "seed": 5})");
  EXPECT_FALSE(c.use_tcsa);
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.image_size, 64u);
  EXPECT_EQ(c.pyramid_group, (std::vector<std::size_t>{1, 2, 3, 6}));
}

TEST(ModelConfig, JsonErrors) {
  EXPECT_THROW(ModelConfig::from_json(R"({"colour": 1})"), ConfigError);
  EXPECT_THROW(ModelConfig::from_json(R"({"image_size": "big"})"), ConfigError);
  EXPECT_THROW(ModelConfig::from_json("[1, 2]"), ConfigError);
  EXPECT_THROW(ModelConfig::from_json("{"), ConfigError);
  EXPECT_THROW(ModelConfig::from_json(R"({"bam_variant": "mystery"})"), ConfigError);
}

TEST(ModelConfig, ValidationNamesTheProblem) {
  ModelConfig c;
  c.heads = 3;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("heads"), std::string::npos);
  }
  c = {};
  c.m_override = {1, 2};
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.grid_stage = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.pyramid_group = {9};
  EXPECT_THROW(c.validate(), ConfigError);
  c.use_dfs = false;
  EXPECT_NO_THROW(c.validate());
  c = {};
  c.query_tokens = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, TokensAndBinsPerStage) {
  ModelConfig c;
  for (std::size_t i = 0; i < kStages; ++i) EXPECT_EQ(c.tokens_for_stage(i), 4u);
  c.m_override = {2, 5, 9, 18};
  EXPECT_EQ(c.tokens_for_stage(3), 18u);
  // Stage resolutions 16, 8, 4, 2.
  EXPECT_EQ(c.bins_for_stage(0), (std::vector<std::size_t>{1, 2, 3, 6}));
  EXPECT_EQ(c.bins_for_stage(2), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(c.bins_for_stage(3), (std::vector<std::size_t>{1, 2}));
}

TEST(ModelConfig, VariantNames) {
  for (auto v : {BamVariant::Pwam, BamVariant::SelfAttn, BamVariant::CrossAttn, BamVariant::LearnableNoPe,
                 BamVariant::Bam}) {
    EXPECT_EQ(variant_from_name(variant_name(v)), v);
  }
  EXPECT_THROW(variant_from_name("BAM"), ConfigError);
}

TEST(ModelConfig, AlignmentFollowsVariant) {
  ModelConfig c;
  EXPECT_EQ(c.alignment(), AlignmentKind::QueryTokens);
  c.bam_variant = BamVariant::SelfAttn;
  EXPECT_EQ(c.alignment(), AlignmentKind::SelfAttention);
  c.bam_variant = BamVariant::CrossAttn;
  EXPECT_EQ(c.alignment(), AlignmentKind::CrossAttention);
  c.bam_variant = BamVariant::LearnableNoPe;
  EXPECT_EQ(c.alignment(), AlignmentKind::QueryTokens);
  c.bam_variant = BamVariant::Pwam;
  EXPECT_FALSE(c.alignment().has_value());
  c.bam_variant = BamVariant::Bam;
  c.use_bam = false;
  EXPECT_FALSE(c.updates_text());
}

TEST(Registry, NamesAreUniqueAndTensorsDistinct) {
  const ModelParams p = ModelParams::init(ModelConfig{});
  const ParamList list = p.parameters();
  std::set<std::string> names;
  std::set<const void*> buffers;
  for (const auto& e : list) {
    EXPECT_TRUE(names.insert(e.name).second) << e.name;
    EXPECT_TRUE(buffers.insert(e.tensor.values().data()).second) << e.name;
    EXPECT_TRUE(e.tensor.requires_grad()) << e.name;
  }
  EXPECT_TRUE(names.count("decoder.refine.weight"));
  EXPECT_TRUE(names.count("decoder.head.bias"));
  EXPECT_TRUE(has_prefix(list, "tcsa."));
  EXPECT_TRUE(has_prefix(list, "bam1.queries"));
}

TEST(Registry, OrderIsStable) {
  const ParamList a = ModelParams::init(ModelConfig{}).parameters();
  const ParamList b = ModelParams::init(ModelConfig{}).parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(values(a[i].tensor), values(b[i].tensor)) << a[i].name;
  }
}

TEST(Registry, FlagsDropModules) {
  ModelConfig c;
  c.use_tcsa = false;
  c.bam_variant = BamVariant::CrossAttn;
  const ParamList list = ModelParams::init(c).parameters();
  EXPECT_FALSE(has_prefix(list, "tcsa."));
  EXPECT_FALSE(has_prefix(list, "bam1.queries"));
  c.use_dfs = false;
  c.use_bam = false;
  EXPECT_LT(ModelParams::init(c).parameters().size(), list.size());
}

TEST(Registry, SeedChangesValues) {
  ModelConfig c;
  const auto a = ModelParams::init(c).parameters();
  c.seed = 2;
  const auto b = ModelParams::init(c).parameters();
  EXPECT_NE(values(a[0].tensor), values(b[0].tensor));
}

TEST(Decoder, FusionWidths) {
  const std::array<std::size_t, kStages> ch = {16, 32, 64, 128};
  // stage 4 is projected to c3 first, then each step concatenates the next skip.
  EXPECT_EQ(DecoderParams::fusion_widths(ch), (std::array<std::size_t, 3>{128, 96, 48}));
  Rng rng(1);
  const auto p = DecoderParams::init(ch, rng);
  EXPECT_EQ(p.top.in(), 128u);
  EXPECT_EQ(p.refine.in(), 16u + 3u);
  EXPECT_EQ(p.head.in(), 16u);
}

TEST(Decoder, HeadStartsAtForegroundPrior) {
  const ModelParams p = ModelParams::init(ModelConfig{});
  const auto b = values(p.decoder.head.bias);
  EXPECT_EQ(b[0], 0.0);
  // softmax of (0, b1) puts probability 0.1 on the foreground.
  EXPECT_NEAR(1.0 / (1.0 + std::exp(-b[1])), kForegroundPrior, 1e-15);
}

TEST(Decoder, OutputShapeAndImageContract) {
  const ModelConfig c = small_model_config();
  Rng rng(3);
  const ModelParams p = ModelParams::init(c);
  const auto stages = random_stages(c, rng);
  const Tensor image = random_tensor({32, 32, 3}, rng, 0, 1);
  EXPECT_EQ(decode(stages, p.decoder, image).shape(), (Shape{32, 32, 2}));
  EXPECT_THROW(decode(stages, p.decoder, random_tensor({32, 32, 1}, rng)), ShapeError);
  auto bad = stages;
  bad[1].map = random_tensor({8, 8, 3}, rng);
  EXPECT_THROW(decode(bad, p.decoder, image), ShapeError);
}

TEST(Decoder, ZeroHeadGivesPriorEverywhere) {
  const ModelConfig c = small_model_config();
  Rng rng(4);
  ModelParams p = ModelParams::init(c);
  for (auto& v : Tensor(p.decoder.head.weight).mutable_values()) v = 0.0;
  const Tensor logits = decode(random_stages(c, rng), p.decoder, random_tensor({32, 32, 3}, rng, 0, 1));
  const auto b = values(p.decoder.head.bias);
  const auto l = logits.values();
  for (std::size_t i = 0; i < l.size(); i += 2) {
    ASSERT_EQ(l[i], b[0]);
    ASSERT_EQ(l[i + 1], b[1]);
  }
  EXPECT_EQ(predict_mask(logits).count(), 0u);
  // Loss against an all-foreground mask is −log 0.1.
  BinaryMask all(32, 32);
  for (auto& bit : all.bits) bit = 1;
  EXPECT_NEAR(ce_loss(logits, all).item(), -std::log(kForegroundPrior), 1e-12);
}

TEST(Decoder, ImageReachesLogits) {
  const ModelConfig c = small_model_config();
  Rng rng(5);
  const ModelParams p = ModelParams::init(c);
  const auto stages = random_stages(c, rng);
  Tensor image = random_tensor({32, 32, 3}, rng, 0, 1);
  const auto before = values(decode(stages, p.decoder, image));
  image.mutable_values()[0] += 0.5;
  const auto after = values(decode(stages, p.decoder, image));
  // Only the first pixel's logits see the change.
  std::size_t changed = 0;
  for (std::size_t i = 0; i < before.size(); ++i) changed += before[i] != after[i];
  EXPECT_GT(changed, 0u);
  for (std::size_t i = 2; i < before.size(); ++i) EXPECT_EQ(before[i], after[i]);
}

TEST(Forward, DefaultShapesThroughTrace) {
  const ModelConfig c;
  const ModelParams p = ModelParams::init(c);
  const Inputs in = inputs_for(c, 1);
  const ForwardTrace t = forward_trace(in.image, in.tokens, in.valid, p);
  EXPECT_EQ(t.logits.shape(), (Shape{64, 64, 2}));
  const std::size_t side[] = {16, 8, 4, 2}, ch[] = {16, 32, 64, 128};
  for (std::size_t i = 0; i < kStages; ++i) {
    EXPECT_EQ(t.stage_outputs[i].map.shape(), (Shape{side[i], side[i], ch[i]}));
    EXPECT_EQ(t.enhanced[i].map.shape(), t.stage_outputs[i].map.shape());
  }
  EXPECT_EQ(t.text.tokens.shape(), (Shape{16, 32}));
  for (double v : t.logits.values()) ASSERT_TRUE(std::isfinite(v));
}

TEST(Forward, Deterministic) {
  const ModelConfig c = small_model_config();
  const Inputs in = inputs_for(c, 2);
  EXPECT_EQ(values(run(in, ModelParams::init(c))), values(run(in, ModelParams::init(c))));
}

TEST(Forward, TextChangesTheMask) {
  const ModelConfig c = small_model_config();
  const ModelParams p = ModelParams::init(c);
  Inputs in = inputs_for(c, 3);
  const auto a = values(run(in, p));
  in.tokens[0] = in.tokens[0] == 1 ? 2 : 1;
  EXPECT_NE(a, values(run(in, p)));
}

TEST(Forward, PaddingIsIgnored) {
  const ModelConfig c = small_model_config();
  const ModelParams p = ModelParams::init(c);
  Inputs in = inputs_for(c, 4);
  in.valid = 4;
  const auto a = values(run(in, p));
  for (std::size_t i = in.valid; i < in.tokens.size(); ++i) in.tokens[i] = 7;
  EXPECT_EQ(a, values(run(in, p)));
}

TEST(Forward, WrongImageSize) {
  const ModelConfig c = small_model_config();
  const ModelParams p = ModelParams::init(c);
  Inputs in = inputs_for(c, 5);
  Rng rng(5);
  in.image = random_tensor({16, 16, 3}, rng);
  EXPECT_THROW(run(in, p), ShapeError);
}

TEST(Forward, FlagMatrixRuns) {
  const ModelConfig base = small_model_config();
  const Inputs in = inputs_for(base, 6);
  std::size_t combos = 0;
  for (int dfs = 0; dfs < 2; ++dfs) {
    for (int bam = 0; bam < 2; ++bam) {
      for (int tcsa = 0; tcsa < 2; ++tcsa) {
        for (auto v : {BamVariant::Pwam, BamVariant::SelfAttn, BamVariant::CrossAttn, BamVariant::LearnableNoPe,
                       BamVariant::Bam}) {
          ModelConfig c = base;
          c.use_dfs = dfs;
          c.use_bam = bam;
          c.use_tcsa = tcsa;
          c.bam_variant = v;
          const ModelParams p = ModelParams::init(c);
          const Tensor logits = run(in, p);
          ASSERT_EQ(logits.shape(), (Shape{32, 32, 2})) << c.to_json();
          for (double x : logits.values()) ASSERT_TRUE(std::isfinite(x)) << c.to_json();
          EXPECT_EQ(p.tcsa.has_value(), tcsa == 1);
          ++combos;
        }
      }
    }
  }
  EXPECT_EQ(combos, 40u);
}

TEST(Forward, TcsaSwitchesRun) {
  const ModelConfig base = small_model_config();
  const Inputs in = inputs_for(base, 7);
  std::set<std::vector<double>> outputs;
  for (int mask = 0; mask < 8; ++mask) {
    ModelConfig c = base;
    c.tcsa_channel = mask & 1;
    c.tcsa_spatial = mask & 2;
    c.tcsa_text = mask & 4;
    outputs.insert(values(run(in, ModelParams::init(c))));
  }
  // Text only reaches the channel path (the spatial path drops the constant
  // guidance channels), so it changes nothing when channel attention is off.
  EXPECT_EQ(outputs.size(), 6u);
}

TEST(Forward, NoTcsaPassesStagesThrough) {
  ModelConfig c = small_model_config();
  c.use_tcsa = false;
  const Inputs in = inputs_for(c, 8);
  const ForwardTrace t = forward_trace(in.image, in.tokens, in.valid, ModelParams::init(c));
  for (std::size_t i = 0; i < kStages; ++i) {
    EXPECT_EQ(values(t.enhanced[i].map), values(t.stage_outputs[i].map));
  }
}
