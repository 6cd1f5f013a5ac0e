#include "sbanet/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "sbanet/errors.hpp"
#include "sbanet/random.hpp"

namespace sbanet {

namespace {

constexpr std::uint64_t kSuiteSeed = 20240917;

Tensor leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  const std::size_t n = shape_numel(shape);
  return Tensor::parameter(std::move(shape), rng.uniform_vector(n, lo, hi));
}

// Values bounded away from zero, for ops with a kink there.
Tensor leaf_off_zero(Shape shape, Rng& rng) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> v(n);
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return Tensor::parameter(std::move(shape), std::move(v));
}

// Scalar probe sum(y ⊙ r) with a fixed random r, so every output element matters.
Tensor probe(const Tensor& y, std::uint64_t salt) {
  Rng rng(derive_seed(kSuiteSeed, salt));
  const Tensor r = Tensor::from_values(y.shape(), rng.uniform_vector(y.numel(), -1.0, 1.0));
  return sum(mul(y, r));
}

// Primitives use a single central step.
CheckOptions primitive() {
  CheckOptions o;
  o.step = 1e-5;
  o.tolerance = kSuiteTolerance;
  o.seed = kSuiteSeed;
  return o;
}

// Composed blocks use the step ladder from 1e-2 down to 1e-5. Whole-model
// losses reach 1e-1: their deepest gradients are near 1e-9 while f carries
// ~15 ulps of roundoff, so only steps around 1e-2 and up resolve them.
CheckOptions options(std::size_t max_coords = 0, std::size_t levels = 6) {
  CheckOptions o;
  o.step = 1e-5;
  o.levels = levels;
  o.tolerance = kSuiteTolerance;
  o.max_coords_per_input = max_coords;
  o.seed = kSuiteSeed;
  return o;
}

std::vector<Tensor> tensors_of(const ParamList& list) {
  std::vector<Tensor> out;
  for (const auto& p : list) out.push_back(p.tensor);
  return out;
}

std::vector<std::string> names_of(const ParamList& list) {
  std::vector<std::string> out;
  for (const auto& p : list) out.push_back(p.name);
  return out;
}

// Redraws every parameter from U(-1, 1). The default init leaves attention
// close to uniform, which pushes many gradients below the finite-difference
// noise floor; the backward rules are checked just as well at this point.
void spread(const ParamList& list, std::uint64_t salt) {
  Rng rng(derive_seed(kSuiteSeed, salt, 7));
  for (const auto& p : list) {
    auto v = Tensor(p.tensor).mutable_values();
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  }
}

CheckOptions named(CheckOptions o, const ParamList& list) {
  o.input_names = names_of(list);
  return o;
}

using Unary = std::function<Tensor(const Tensor&)>;

SuiteCheck unary(OpKind kind, Shape shape, Unary op, bool off_zero = false) {
  const std::string name(op_name(kind));
  return {"tensor", name, [=] {
            Rng rng(derive_seed(kSuiteSeed, static_cast<std::uint64_t>(kind)));
            const Tensor x = off_zero ? leaf_off_zero(shape, rng) : leaf(shape, rng);
            return finite_diff_check(name, [&] { return probe(op(x), 1); }, {x}, primitive());
          }};
}

std::vector<SuiteCheck> tensor_checks() {
  std::vector<SuiteCheck> c;
  c.push_back({"tensor", "matmul", [] {
                 Rng rng(derive_seed(kSuiteSeed, 100));
                 const Tensor a = leaf({3, 4}, rng), b = leaf({4, 5}, rng);
                 return finite_diff_check("matmul", [&] { return probe(matmul(a, b), 2); }, {a, b}, primitive());
               }});
  c.push_back(unary(OpKind::Transpose, {3, 5}, [](const Tensor& x) { return transpose(x); }));
  c.push_back({"tensor", "linear", [] {
                 Rng rng(derive_seed(kSuiteSeed, 101));
                 const Tensor x = leaf({2, 3, 4}, rng), w = leaf({5, 4}, rng), b = leaf({5}, rng);
                 return finite_diff_check("linear", [&] { return probe(linear(x, w, b), 3); }, {x, w, b},
                                          primitive());
               }});
  c.push_back({"tensor", "add", [] {
                 Rng rng(derive_seed(kSuiteSeed, 102));
                 const Tensor a = leaf({3, 4}, rng), b = leaf({4}, rng), d = leaf({3, 4}, rng);
                 return finite_diff_check("add", [&] { return probe(sub(add(a, b), d), 4); }, {a, b, d},
                                          primitive());
               }});
  c.push_back({"tensor", "mul", [] {
                 Rng rng(derive_seed(kSuiteSeed, 103));
                 const Tensor a = leaf({2, 3, 4}, rng), b = leaf({3, 4}, rng);
                 return finite_diff_check("mul", [&] { return probe(mul(a, b), 5); }, {a, b}, primitive());
               }});
  c.push_back(unary(OpKind::Scale, {4, 3}, [](const Tensor& x) { return scale(x, -1.7); }));
  c.push_back(unary(OpKind::Relu, {4, 5}, [](const Tensor& x) { return relu(x); }, true));
  c.push_back(unary(OpKind::Gelu, {4, 5}, [](const Tensor& x) { return gelu(scale(x, 3.0)); }));
  c.push_back(unary(OpKind::Tanh, {4, 5}, [](const Tensor& x) { return tanh(scale(x, 2.0)); }));
  c.push_back(unary(OpKind::Softmax, {3, 6}, [](const Tensor& x) {
    return add(softmax(scale(x, 3.0), 1), scale(softmax(x, 0), 0.5));
  }));
  c.push_back({"tensor", "layer_norm", [] {
                 Rng rng(derive_seed(kSuiteSeed, 104));
                 const Tensor x = leaf({3, 6}, rng), g = leaf({6}, rng), b = leaf({6}, rng);
                 return finite_diff_check("layer_norm", [&] { return probe(layer_norm(x, g, b, 1), 6); }, {x, g, b},
                                          primitive());
               }});
  c.push_back(unary(OpKind::Sum, {3, 4}, [](const Tensor& x) { return scale(sum(mul(x, x)), 0.5); }));
  c.push_back(unary(OpKind::Mean, {3, 4}, [](const Tensor& x) { return mean(mul(x, x)); }));
  c.push_back(unary(OpKind::Reshape, {3, 4}, [](const Tensor& x) { return mul(reshape(x, {2, 6}), reshape(x, {2, 6})); }));
  c.push_back({"tensor", "concat", [] {
                 Rng rng(derive_seed(kSuiteSeed, 105));
                 const Tensor a = leaf({2, 3, 2}, rng), b = leaf({2, 3, 5}, rng);
                 return finite_diff_check(
                     "concat", [&] { const Tensor parts[] = {a, b, a}; return probe(concat(parts), 7); }, {a, b},
                     primitive());
               }});
  c.push_back(unary(OpKind::Slice, {3, 7}, [](const Tensor& x) { return slice(x, 2, 4); }));
  c.push_back(unary(OpKind::RowSlice, {6, 3}, [](const Tensor& x) { return slice_rows(x, 1, 3); }));
  c.push_back(unary(OpKind::RowMean, {5, 3}, [](const Tensor& x) { return mean_rows(x); }));
  c.push_back(unary(OpKind::AdaptivePool, {7, 5, 2}, [](const Tensor& x) { return adaptive_avg_pool(x, 3, 2); }));
  c.push_back(unary(OpKind::Bilinear, {3, 2, 2}, [](const Tensor& x) {
    return add(sum(bilinear_resize(x, 7, 5)), sum(mul(bilinear_resize(x, 6, 4), bilinear_resize(x, 6, 4))));
  }));
  c.push_back(unary(OpKind::SpaceToDepth, {4, 6, 2}, [](const Tensor& x) { return space_to_depth(x, 2); }));
  c.push_back({"tensor", "cross_entropy", [] {
                 Rng rng(derive_seed(kSuiteSeed, 106));
                 const Tensor x = leaf({3, 4, 2}, rng, -2.0, 2.0);
                 std::vector<int> labels(12);
                 for (auto& l : labels) l = static_cast<int>(rng.below(2));
                 return finite_diff_check("cross_entropy", [&] { return cross_entropy(x, labels); }, {x}, primitive());
               }});
  return c;
}

std::vector<SuiteCheck> nn_checks() {
  std::vector<SuiteCheck> c;
  c.push_back({"nn", "attention", [] {
                 Rng rng(derive_seed(kSuiteSeed, 200));
                 const Tensor q = leaf({3, 8}, rng), k = leaf({5, 8}, rng), v = leaf({5, 4}, rng);
                 return finite_diff_check(
                     "attention", [&] { return probe(attention(q, k, v, 2, 4, 4), 8); }, {q, k, v}, options());
               }});
  c.push_back({"nn", "mlp2", [] {
                 Rng rng(derive_seed(kSuiteSeed, 201));
                 const Tensor x = leaf({4, 6}, rng);
                 const Mlp2Params p = Mlp2Params::init(6, 8, 5, rng);
                 ParamList list;
                 p.collect(list, "mlp");
                 auto inputs = tensors_of(list);
                 inputs.push_back(x);
                 return finite_diff_check("mlp2", [&] { return probe(mlp2(x, p), 9); }, inputs, named(options(), list));
               }});
  c.push_back({"nn", "pwam", [] {
                 Rng rng(derive_seed(kSuiteSeed, 202));
                 const Tensor visual = leaf({3, 3, 4}, rng);
                 const TextFeatures text{leaf({5, 6}, rng), 3};
                 const PwamParams p = PwamParams::init(4, 6, 2, rng);
                 ParamList list;
                 p.collect(list, "pwam");
                 auto inputs = tensors_of(list);
                 inputs.push_back(visual);
                 inputs.push_back(text.tokens);
                 return finite_diff_check("pwam", [&] { return probe(pwam(visual, text, p), 10); }, inputs, named(options(), list));
               }});
  c.push_back({"nn", "language_gate", [] {
                 Rng rng(derive_seed(kSuiteSeed, 203));
                 const Tensor y = leaf({2, 3, 4}, rng);
                 const GateParams g = GateParams::init(4, rng);
                 ParamList list;
                 g.collect(list, "gate");
                 auto inputs = tensors_of(list);
                 inputs.push_back(y);
                 return finite_diff_check("language_gate", [&] { return probe(language_gate(y, g), 11); }, inputs,
                                          named(options(), list));
               }});
  return c;
}

CheckReport bam_check(const std::string& name, std::optional<AlignmentKind> alignment, std::vector<std::size_t> bins,
                      bool with_position, std::uint64_t salt) {
  Rng rng(derive_seed(kSuiteSeed, salt));
  const StageFeatures visual{leaf({6, 6, 4}, rng)};
  const TextFeatures text{leaf({5, 6}, rng), 3};
  QueryTokenState state;
  if (alignment == AlignmentKind::QueryTokens) state = QueryTokenState::init(2, 4, with_position, rng);
  const BamParams p = BamParams::init(4, 6, std::move(bins), 1, alignment, rng);
  ParamList list;
  if (state.tokens.defined()) state.collect(list, "queries");
  p.collect(list, "bam");
  spread(list, salt);
  auto inputs = tensors_of(list);
  inputs.push_back(visual.map);
  inputs.push_back(text.tokens);
  return finite_diff_check(
      name,
      [&] {
        const BamOutput out = bam_forward(visual, text, state, p);
        return add(probe(out.residual, salt), probe(out.text.tokens, salt + 1));
      },
      inputs, named(options(6), list));
}

std::vector<SuiteCheck> bam_checks() {
  std::vector<SuiteCheck> c;
  c.push_back({"bam", "update_query_tokens", [] {
                 Rng rng(derive_seed(kSuiteSeed, 300));
                 const StageFeatures visual{leaf({3, 3, 4}, rng)};
                 const QueryTokenState state = QueryTokenState::init(2, 4, true, rng);
                 const BamParams p = BamParams::init(4, 6, {}, 1, AlignmentKind::QueryTokens, rng);
                 ParamList list;
                 state.collect(list, "queries");
                 p.collect(list, "bam");
                 spread(list, 300);
                 auto inputs = tensors_of(list);
                 inputs.push_back(visual.map);
                 return finite_diff_check(
                     "update_query_tokens", [&] { return probe(update_query_tokens(state, visual, p), 12); }, inputs,
                     named(options(6), list));
               }});
  c.push_back({"bam", "query_text_align", [] {
                 Rng rng(derive_seed(kSuiteSeed, 301));
                 const TextFeatures text{leaf({5, 6}, rng), 4};
                 const Tensor tokens = leaf({3, 4}, rng);
                 const BamParams p = BamParams::init(4, 6, {}, 1, AlignmentKind::QueryTokens, rng);
                 ParamList list;
                 p.collect(list, "bam");
                 spread(list, 301);
                 auto inputs = tensors_of(list);
                 inputs.push_back(text.tokens);
                 inputs.push_back(tokens);
                 return finite_diff_check(
                     "query_text_align", [&] { return probe(query_text_align(text, tokens, p), 13); }, inputs,
                     named(options(6), list));
               }});
  c.push_back({"bam", "dynamic_feature_select", [] {
                 Rng rng(derive_seed(kSuiteSeed, 302));
                 const StageFeatures visual{leaf({6, 6, 4}, rng)};
                 const TextFeatures text{leaf({5, 6}, rng), 3};
                 const BamParams p = BamParams::init(4, 6, {1, 2, 3}, 1, std::nullopt, rng);
                 ParamList list;
                 p.collect(list, "bam");
                 spread(list, 302);
                 auto inputs = tensors_of(list);
                 inputs.push_back(visual.map);
                 inputs.push_back(text.tokens);
                 return finite_diff_check(
                     "dynamic_feature_select",
                     [&] { return probe(dynamic_feature_select(visual, text, p).map, 14); }, inputs, named(options(6), list));
               }});
  c.push_back({"bam", "bam_forward",
               [] { return bam_check("bam_forward", AlignmentKind::QueryTokens, {1, 2, 3, 6}, true, 303); }});
  c.push_back({"bam", "bam_forward.self_attention",
               [] { return bam_check("bam_forward.self_attention", AlignmentKind::SelfAttention, {1, 2}, true, 305); }});
  c.push_back({"bam", "bam_forward.cross_attention", [] {
                 return bam_check("bam_forward.cross_attention", AlignmentKind::CrossAttention, {1, 2}, true, 307);
               }});
  c.push_back({"bam", "bam_forward.pwam",
               [] { return bam_check("bam_forward.pwam", std::nullopt, {}, true, 309); }});
  return c;
}

struct TcsaFixture {
  std::array<StageFeatures, kStages> stages;
  TextFeatures text;
  TcsaParams params;
  std::vector<Tensor> inputs;
  ParamList list;

  explicit TcsaFixture(std::uint64_t salt) {
    Rng rng(derive_seed(kSuiteSeed, salt));
    const std::array<std::size_t, kStages> channels = {4, 8, 16, 32};
    for (std::size_t i = 0; i < kStages; ++i) {
      const std::size_t r = std::array<std::size_t, kStages>{8, 4, 3, 2}[i];
      stages[i] = {leaf({r, r, channels[i]}, rng)};
    }
    text = {leaf({5, 8}, rng), 3};
    params = TcsaParams::init(channels, 8, 8, 4, 4, 4, rng);
    params.collect(list, "tcsa");
    spread(list, salt);
    inputs = tensors_of(list);
    for (const auto& s : stages) inputs.push_back(s.map);
    inputs.push_back(text.tokens);
  }
};

Tensor tcsa_probe(const std::array<StageFeatures, kStages>& out, std::uint64_t salt) {
  Tensor total;
  for (std::size_t i = 0; i < kStages; ++i) {
    const Tensor t = probe(out[i].map, salt + i);
    total = total.defined() ? add(total, t) : t;
  }
  return total;
}

std::vector<SuiteCheck> tcsa_checks() {
  std::vector<SuiteCheck> c;
  c.push_back({"tcsa", "channel_attention", [] {
                 TcsaFixture f(400);
                 return finite_diff_check(
                     "channel_attention",
                     [&] {
                       const Tensor g = recap_text(f.text, f.params);
                       const ConcatFeatures fc = build_concat(f.stages, g, f.params, ConcatPath::Channel);
                       const Tensor stage = reshape(resample(f.stages[0].map, 4, 4), {16, 4});
                       return probe(channel_attention(stage, fc, f.params, 0), 15);
                     },
                     f.inputs, named(options(6), f.list));
               }});
  c.push_back({"tcsa", "spatial_attention", [] {
                 TcsaFixture f(401);
                 return finite_diff_check(
                     "spatial_attention",
                     [&] {
                       const Tensor g = recap_text(f.text, f.params);
                       const ConcatFeatures fc = build_concat(f.stages, g, f.params, ConcatPath::Spatial);
                       const Tensor stage = reshape(resample(f.stages[2].map, 4, 4), {16, 16});
                       return probe(spatial_attention(stage, fc, f.params, 2), 16);
                     },
                     f.inputs, named(options(6), f.list));
               }});
  c.push_back({"tcsa", "tcsa_forward", [] {
                 TcsaFixture f(402);
                 return finite_diff_check(
                     "tcsa_forward", [&] { return tcsa_probe(tcsa_forward(f.stages, f.text, f.params), 20); },
                     f.inputs, named(options(6), f.list));
               }});
  c.push_back({"tcsa", "tcsa_forward.no_text", [] {
                 TcsaFixture f(403);
                 return finite_diff_check(
                     "tcsa_forward.no_text",
                     [&] { return tcsa_probe(tcsa_forward(f.stages, f.text, f.params, {true, true, false}), 30); },
                     f.inputs, named(options(6), f.list));
               }});
  return c;
}

struct ModelFixture {
  ModelParams params;
  Tensor image;
  std::vector<int> tokens;
  std::size_t valid = 0;
  BinaryMask mask;

  // Checked at the model's own init; redrawn weights saturate GeLU and LN paths in a stack this deep.
  ModelFixture(const ModelConfig& config, std::uint64_t salt) : params(ModelParams::init(config)) {
    Rng rng(derive_seed(kSuiteSeed, salt));
    const std::size_t n = config.image_size;
    image = Tensor::from_values({n, n, 3}, rng.uniform_vector(n * n * 3, 0.0, 1.0));
    valid = config.max_len / 2 + 1;
    tokens.assign(config.max_len, 0);
    for (std::size_t i = 0; i < valid; ++i) tokens[i] = 1 + static_cast<int>(rng.below(15));
    mask = BinaryMask(n, n);
    for (auto& b : mask.bits) b = static_cast<std::uint8_t>(rng.below(2));
  }
};

std::vector<SuiteCheck> model_checks() {
  std::vector<SuiteCheck> c;
  c.push_back({"model", "decode", [] {
                 Rng rng(derive_seed(kSuiteSeed, 500));
                 const std::array<std::size_t, kStages> channels = {4, 8, 16, 32};
                 std::array<StageFeatures, kStages> stages;
                 for (std::size_t i = 0; i < kStages; ++i) stages[i] = {leaf({8u >> i, 8u >> i, channels[i]}, rng)};
                 const DecoderParams p = DecoderParams::init(channels, rng);
                 ParamList list;
                 p.collect(list, "decoder");
                 auto inputs = tensors_of(list);
                 for (const auto& s : stages) inputs.push_back(s.map);
                 const Tensor image = leaf({16, 16, 3}, rng);
                 inputs.push_back(image);
                 return finite_diff_check("decode", [&] { return probe(decode(stages, p, image), 17); }, inputs,
                                          named(options(6), list));
               }});
  c.push_back({"model", "model.small", [] {
                 ModelFixture f(small_model_config(), 501);
                 return finite_diff_check(
                     "model.small", [&] { return ce_loss(forward(f.image, f.tokens, f.valid, f.params), f.mask); },
                     tensors_of(f.params.parameters()), named(options(2, 8), f.params.parameters()));
               }});
  c.push_back({"model", "model.toy", [] {
                 ModelFixture f(ModelConfig{}, 502);
                 // every fifth tensor, two coordinates each
                 const ParamList all = f.params.parameters();
                 ParamList list;
                 for (std::size_t i = 0; i < all.size(); i += 5) list.push_back(all[i]);
                 const auto inputs = tensors_of(list);
                 return finite_diff_check(
                     "model.toy", [&] { return ce_loss(forward(f.image, f.tokens, f.valid, f.params), f.mask); },
                     inputs, named(options(2, 8), list));
               }});
  return c;
}

}  // namespace

ModelConfig small_model_config() {
  ModelConfig c;
  c.image_size = 32;
  c.patch = 2;
  c.base_channels = 4;
  c.text_width = 8;
  c.max_len = 8;
  c.query_tokens = 2;
  c.guidance_dim = 8;
  c.heads = 4;
  return c;
}

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names = {"tensor", "nn", "bam", "tcsa", "model"};
  return names;
}

const std::vector<SuiteCheck>& gradcheck_registry() {
  static const std::vector<SuiteCheck> registry = [] {
    std::vector<SuiteCheck> all;
    for (auto&& group : {tensor_checks(), nn_checks(), bam_checks(), tcsa_checks(), model_checks()}) {
      all.insert(all.end(), group.begin(), group.end());
    }
    return all;
  }();
  return registry;
}

std::vector<CheckReport> run_gradchecks(std::string_view module) {
  const auto& modules = gradcheck_modules();
  if (module != "all" && std::find(modules.begin(), modules.end(), module) == modules.end()) {
    std::string known = "all";
    for (const auto& m : modules) known += ", " + m;
    throw UsageError("unknown gradcheck module \"" + std::string(module) + "\"; expected one of " + known);
  }
  std::vector<CheckReport> reports;
  for (const auto& check : gradcheck_registry()) {
    if (module == "all" || check.module == module) reports.push_back(check.run());
  }
  return reports;
}

}  // namespace sbanet
