#include "sbanet/nn.hpp"

#include <cmath>

#include "sbanet/errors.hpp"

namespace sbanet {

Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  const std::size_t n = shape_numel(shape);
  return Tensor::parameter(std::move(shape), rng.uniform_vector(n, -bound, bound));
}

LinearParams LinearParams::init(std::size_t in, std::size_t out, Rng& rng) {
  LinearParams p;
  p.weight = init_uniform({out, in}, in, rng);
  p.bias = init_uniform({out}, in, rng);
  return p;
}

LinearParams LinearParams::init_unbiased(std::size_t in, std::size_t out, Rng& rng) {
  return {init_uniform({out, in}, in, rng), Tensor{}};
}

void LinearParams::collect(ParamList& list, const std::string& prefix) const {
  list.push_back({prefix + ".weight", weight});
  if (bias.defined()) list.push_back({prefix + ".bias", bias});
}

LayerNormParams LayerNormParams::init(std::size_t n) {
  return {Tensor::parameter({n}, std::vector<double>(n, 1.0)), Tensor::parameter({n}, std::vector<double>(n, 0.0))};
}

void LayerNormParams::collect(ParamList& list, const std::string& prefix) const {
  list.push_back({prefix + ".gamma", gamma});
  list.push_back({prefix + ".beta", beta});
}

DepthwiseParams DepthwiseParams::init(std::size_t channels, Rng& rng, bool with_bias) {
  DepthwiseParams p;
  p.scale = init_uniform({channels}, 1, rng);
  if (with_bias) p.bias = init_uniform({channels}, 1, rng);
  return p;
}

void DepthwiseParams::collect(ParamList& list, const std::string& prefix) const {
  list.push_back({prefix + ".scale", scale});
  if (bias.defined()) list.push_back({prefix + ".bias", bias});
}

Mlp2Params Mlp2Params::init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
  Mlp2Params p;
  p.norm = LayerNormParams::init(in);
  p.fc1 = LinearParams::init(in, hidden, rng);
  p.fc2 = LinearParams::init(hidden, out, rng);
  return p;
}

void Mlp2Params::collect(ParamList& list, const std::string& prefix) const {
  norm.collect(list, prefix + ".norm");
  fc1.collect(list, prefix + ".fc1");
  fc2.collect(list, prefix + ".fc2");
}

PwamParams PwamParams::init(std::size_t visual_dim, std::size_t text_dim, std::size_t heads, Rng& rng) {
  PwamParams p;
  p.query = LinearParams::init(visual_dim, visual_dim, rng);
  p.key = LinearParams::init_unbiased(text_dim, visual_dim, rng);
  p.value = LinearParams::init(text_dim, visual_dim, rng);
  p.visual = LinearParams::init(visual_dim, visual_dim, rng);
  p.output = LinearParams::init(visual_dim, visual_dim, rng);
  p.heads = heads;
  return p;
}

void PwamParams::collect(ParamList& list, const std::string& prefix) const {
  query.collect(list, prefix + ".query");
  key.collect(list, prefix + ".key");
  value.collect(list, prefix + ".value");
  visual.collect(list, prefix + ".visual");
  output.collect(list, prefix + ".output");
}

GateParams GateParams::init(std::size_t channels, Rng& rng) {
  return {LinearParams::init(channels, channels, rng), LinearParams::init(channels, channels, rng)};
}

void GateParams::collect(ParamList& list, const std::string& prefix) const {
  fc1.collect(list, prefix + ".fc1");
  fc2.collect(list, prefix + ".fc2");
}

Tensor project(const Tensor& x, const LinearParams& p) {
  if (!p.bias.defined()) return linear(x, p.weight, Tensor::zeros({p.out()}));
  return linear(x, p.weight, p.bias);
}

Tensor depthwise(const Tensor& x, const DepthwiseParams& p) {
  const std::size_t c = p.scale.numel();
  if (x.shape().back() != c || (p.bias.defined() && p.bias.numel() != c)) {
    throw ShapeError("depthwise: input " + shape_str(x.shape()) + " does not have " + std::to_string(c) +
                     " channels");
  }
  const Tensor scaled = mul(x, p.scale);
  return p.bias.defined() ? add(scaled, p.bias) : scaled;
}

Tensor apply_layer_norm(const Tensor& x, const LayerNormParams& p) {
  return layer_norm(x, p.gamma, p.beta, x.rank() - 1, kLayerNormEps);
}

AttentionOutput attend(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                       std::size_t scale_dim, std::size_t valid_keys) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    throw ShapeError("attention: incompatible q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                     ", v " + shape_str(v.shape()));
  }
  const std::size_t nk = k.dim(0), dk = k.dim(1), dv = v.dim(1);
  if (heads == 0 || dk % heads != 0 || dv % heads != 0) {
    throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide key width " +
                      std::to_string(dk) + " and value width " + std::to_string(dv));
  }
  if (scale_dim == 0) throw ConfigError("attention: scale_dim must be positive");
  if (valid_keys == 0 || valid_keys > nk) {
    throw ContractError("attention: valid key count " + std::to_string(valid_keys) + " outside [1, " +
                        std::to_string(nk) + "]");
  }
  Tensor mask;
  if (valid_keys < nk) {
    std::vector<double> m(nk, 0.0);
    for (std::size_t j = valid_keys; j < nk; ++j) m[j] = kMaskLogit;
    mask = Tensor::from_values({nk}, std::move(m));
  }
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(scale_dim));
  const std::size_t hk = dk / heads, hv = dv / heads;
  AttentionOutput result;
  std::vector<Tensor> outputs;
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? q : slice(q, h * hk, hk);
    const Tensor kh = heads == 1 ? k : slice(k, h * hk, hk);
    const Tensor vh = heads == 1 ? v : slice(v, h * hv, hv);
    Tensor logits = scale(matmul(qh, transpose(kh)), inv_scale);
    if (mask.defined()) logits = add(logits, mask);
    Tensor weights = softmax(logits, 1);
    outputs.push_back(matmul(weights, vh));
    result.weights.push_back(weights);
  }
  result.output = heads == 1 ? outputs.front() : concat(outputs);
  return result;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, std::size_t scale_dim) {
  return attend(q, k, v, heads, scale_dim, k.dim(0)).output;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, std::size_t scale_dim,
                 std::size_t valid_keys) {
  return attend(q, k, v, heads, scale_dim, valid_keys).output;
}

std::vector<Tensor> pyramid_pool(const StageFeatures& x, std::span<const std::size_t> bins) {
  std::vector<Tensor> out;
  out.reserve(bins.size());
  for (std::size_t g : bins) {
    if (g == 0 || g > x.height() || g > x.width()) {
      throw ConfigError("pyramid_pool: bin count " + std::to_string(g) + " exceeds the " +
                        std::to_string(x.height()) + "x" + std::to_string(x.width()) + " map");
    }
    out.push_back(adaptive_avg_pool(x.map, g, g));
  }
  return out;
}

Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  return bilinear_resize(x, out_h, out_w);
}

Tensor mlp2(const Tensor& x, const Mlp2Params& p) {
  return project(gelu(project(apply_layer_norm(x, p.norm), p.fc1)), p.fc2);
}

Tensor pwam(const Tensor& visual, const TextFeatures& text, const PwamParams& p) {
  if (text.valid == 0) throw ContractError("pwam: text has no valid tokens");
  const std::size_t c = visual.shape().back();
  const Tensor flat = reshape(visual, {visual.numel() / c, c});
  const Tensor q = project(flat, p.query);
  const Tensor k = project(text.tokens, p.key);
  const Tensor v = project(text.tokens, p.value);
  const Tensor attended = attention(q, k, v, p.heads, c / p.heads, text.valid);
  const Tensor fused = mul(gelu(project(flat, p.visual)), attended);
  return reshape(relu(project(fused, p.output)), visual.shape());
}

Tensor language_gate(const Tensor& y, const GateParams& g) {
  const Tensor gate = tanh(project(relu(project(y, g.fc1)), g.fc2));
  return mul(gate, y);
}

}  // namespace sbanet
