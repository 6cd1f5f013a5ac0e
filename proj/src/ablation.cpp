#include "sbanet/ablation.hpp"

#include "sbanet/errors.hpp"

namespace sbanet {

namespace {

ModelConfig baseline(ModelConfig c) {
  c.use_dfs = false;
  c.use_bam = false;
  c.use_tcsa = false;
  c.tcsa_channel = true;
  c.tcsa_spatial = true;
  c.tcsa_text = true;
  c.bam_variant = BamVariant::Bam;
  c.m_override.clear();
  return c;
}

ModelConfig with_bam(ModelConfig c, BamVariant v) {
  c = baseline(c);
  c.use_dfs = true;
  c.use_bam = true;
  c.bam_variant = v;
  return c;
}

ModelConfig with_tcsa(ModelConfig c, bool channel, bool spatial, bool text) {
  c = baseline(c);
  c.use_tcsa = true;
  c.tcsa_channel = channel;
  c.tcsa_spatial = spatial;
  c.tcsa_text = text;
  return c;
}

AblationPlan table3(const ModelConfig& base) {
  AblationPlan p{"table3", {}, {}};
  ModelConfig dfs = baseline(base);
  dfs.use_dfs = true;
  ModelConfig full = with_bam(base, BamVariant::Bam);
  full.use_tcsa = true;
  p.variants = {
      {"LAVT (baseline)", baseline(base)},
      {"LAVT + DFS", dfs},
      {"LAVT + BAM", with_bam(base, BamVariant::Bam)},
      {"LAVT + TCSA", with_tcsa(base, true, true, true)},
      {"SBANet (ours)", full},
  };
  return p;
}

AblationPlan table4_variants(const ModelConfig& base) {
  AblationPlan p{"table4-variants", {}, {"group-attention row omitted"}};
  p.variants = {
      {"PWAM", baseline(base)},
      {"+ self-attention", with_bam(base, BamVariant::SelfAttn)},
      {"+ cross-attention", with_bam(base, BamVariant::CrossAttn)},
      {"+ learnable-token (w/o pe)", with_bam(base, BamVariant::LearnableNoPe)},
      {"BAM (ours)", with_bam(base, BamVariant::Bam)},
  };
  return p;
}

AblationPlan table4_tokens(const ModelConfig& base) {
  AblationPlan p{"table4-tokens", {}, {}};
  std::string mapping = "toy M = round(M*4/225):";
  for (std::size_t m : {128, 225, 256, 512, 1024}) {
    ModelConfig c = with_bam(base, BamVariant::Bam);
    c.query_tokens = toy_token_count(m);
    const std::string label = "BAM-" + std::to_string(m) + (m == 225 ? " (ours)" : "");
    p.variants.push_back({label, c});
    mapping += " " + std::to_string(m) + "->" + std::to_string(c.query_tokens);
  }
  ModelConfig pyramid = with_bam(base, BamVariant::Bam);
  pyramid.m_override = {toy_token_count(128), toy_token_count(256), toy_token_count(512), toy_token_count(1024)};
  p.variants.push_back({"BAM-pyramid", pyramid});
  mapping += "; pyramid per stage 2,5,9,18";
  p.notes.push_back(mapping);
  return p;
}

AblationPlan table5(const ModelConfig& base) {
  AblationPlan p{"table5", {}, {}};
  p.variants = {
      {"Default", baseline(base)},
      {"+ channel", with_tcsa(base, true, false, true)},
      {"+ spatial", with_tcsa(base, false, true, true)},
      {"TCSA (w/o text)", with_tcsa(base, true, true, false)},
      {"TCSA (ours)", with_tcsa(base, true, true, true)},
  };
  return p;
}

}  // namespace

const std::vector<std::string>& plan_names() {
  static const std::vector<std::string> names = {"table3", "table4-variants", "table4-tokens", "table5"};
  return names;
}

std::size_t toy_token_count(std::size_t full_scale_m) {
  const std::size_t m = (full_scale_m * 4 * 2 + 225) / (2 * 225);
  return m == 0 ? 1 : m;
}

AblationPlan make_plan(std::string_view name, const ModelConfig& base) {
  AblationPlan plan;
  if (name == "table3") plan = table3(base);
  else if (name == "table4-variants") plan = table4_variants(base);
  else if (name == "table4-tokens") plan = table4_tokens(base);
  else if (name == "table5") plan = table5(base);
  else {
    std::string known;
    for (const auto& n : plan_names()) known += (known.empty() ? "" : ", ") + n;
    throw UsageError("unknown plan \"" + std::string(name) + "\"; known plans: " + known);
  }
  for (const auto& v : plan.variants) v.config.validate();
  return plan;
}

}  // namespace sbanet
