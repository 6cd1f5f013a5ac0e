#include "oracle.hpp"

#include <algorithm>
#include <cmath>

namespace oracle {

Vec vec(const sbanet::Tensor& t) { return Vec(t.values().begin(), t.values().end()); }

Mat mat(const sbanet::Tensor& t, std::size_t cols) {
  const auto v = t.values();
  Mat out(v.size() / cols, Vec(cols));
  for (std::size_t r = 0; r < out.size(); ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r][c] = v[r * cols + c];
  return out;
}

Mat mat(const sbanet::Tensor& t) { return mat(t, t.shape().back()); }

Linear linear_of(const sbanet::LinearParams& p) {
  Linear l;
  l.w = mat(p.weight);
  if (p.bias.defined()) l.b = vec(p.bias);
  return l;
}

Norm norm_of(const sbanet::LayerNormParams& p) { return {vec(p.gamma), vec(p.beta)}; }

double gelu(double x) {
  const double inner = 0.7978845608 * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(inner));
}

Mat affine(const Mat& x, const Linear& p) {
  Mat out(x.size(), Vec(p.w.size(), 0.0));
  for (std::size_t r = 0; r < x.size(); ++r) {
    for (std::size_t o = 0; o < p.w.size(); ++o) {
      double s = p.b.empty() ? 0.0 : p.b[o];
      for (std::size_t i = 0; i < x[r].size(); ++i) s += x[r][i] * p.w[o][i];
      out[r][o] = s;
    }
  }
  return out;
}

Mat apply_gelu(const Mat& x) {
  Mat out = x;
  for (auto& row : out)
    for (auto& e : row) e = gelu(e);
  return out;
}

Mat apply_relu(const Mat& x) {
  Mat out = x;
  for (auto& row : out)
    for (auto& e : row) e = e > 0.0 ? e : 0.0;
  return out;
}

Mat layer_norm(const Mat& x, const Norm& n, double eps) {
  Mat out = x;
  for (auto& row : out) {
    double mean = 0.0;
    for (double e : row) mean += e;
    mean /= static_cast<double>(row.size());
    double var = 0.0;
    for (double e : row) var += (e - mean) * (e - mean);
    var /= static_cast<double>(row.size());
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean) * inv * n.gamma[j] + n.beta[j];
  }
  return out;
}

Mat hadamard(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t r = 0; r < a.size(); ++r)
    for (std::size_t c = 0; c < a[r].size(); ++c) out[r][c] = a[r][c] * b[r][c];
  return out;
}

Mat plus(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t r = 0; r < a.size(); ++r)
    for (std::size_t c = 0; c < a[r].size(); ++c) out[r][c] = a[r][c] + b[r][c];
  return out;
}

Mat attention(const Mat& q, const Mat& k, const Mat& v, std::size_t heads, double scale_dim, std::size_t valid,
              std::vector<Mat>* weights) {
  const std::size_t nq = q.size(), dk = q[0].size(), dv = v[0].size();
  const std::size_t hk = dk / heads, hv = dv / heads;
  Mat out(nq, Vec(dv, 0.0));
  if (weights) weights->assign(heads, Mat(nq, Vec(k.size(), 0.0)));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < nq; ++i) {
      Vec logits(valid);
      for (std::size_t j = 0; j < valid; ++j) {
        double dot = 0.0;
        for (std::size_t c = h * hk; c < (h + 1) * hk; ++c) dot += q[i][c] * k[j][c];
        logits[j] = dot / std::sqrt(scale_dim);
      }
      const double top = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (auto& l : logits) {
        l = std::exp(l - top);
        z += l;
      }
      for (std::size_t j = 0; j < valid; ++j) {
        const double a = logits[j] / z;
        if (weights) (*weights)[h][i][j] = a;
        for (std::size_t c = h * hv; c < (h + 1) * hv; ++c) out[i][c] += a * v[j][c];
      }
    }
  }
  return out;
}

Mat mlp2(const Mat& x, const sbanet::Mlp2Params& p) {
  return affine(apply_gelu(affine(layer_norm(x, norm_of(p.norm)), linear_of(p.fc1))), linear_of(p.fc2));
}

Mat pwam(const Mat& visual, const Mat& text, std::size_t valid, const sbanet::PwamParams& p) {
  const std::size_t c = visual[0].size();
  const Mat q = affine(visual, linear_of(p.query));
  const Mat k = affine(text, linear_of(p.key));
  const Mat v = affine(text, linear_of(p.value));
  const Mat att = attention(q, k, v, p.heads, static_cast<double>(c / p.heads), valid);
  const Mat fused = hadamard(apply_gelu(affine(visual, linear_of(p.visual))), att);
  return apply_relu(affine(fused, linear_of(p.output)));
}

Mat adaptive_pool(const Mat& x, std::size_t h, std::size_t w, std::size_t g) {
  const std::size_t c = x[0].size();
  Mat out(g * g, Vec(c, 0.0));
  for (std::size_t by = 0; by < g; ++by) {
    for (std::size_t bx = 0; bx < g; ++bx) {
      const std::size_t y0 = by * h / g, y1 = (by + 1) * h / g;
      const std::size_t x0 = bx * w / g, x1 = (bx + 1) * w / g;
      const double n = static_cast<double>((y1 - y0) * (x1 - x0));
      for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) s += x[y * w + xx][ch];
        out[by * g + bx][ch] = s / n;
      }
    }
  }
  return out;
}

namespace {
// Half-pixel source coordinate, clamped to the valid range.
void source(std::size_t dst, std::size_t in, std::size_t out, std::size_t& i0, std::size_t& i1, double& t) {
  double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
  if (s < 0.0) s = 0.0;
  i0 = static_cast<std::size_t>(std::floor(s));
  if (i0 > in - 1) i0 = in - 1;
  i1 = std::min(i0 + 1, in - 1);
  t = s - static_cast<double>(i0);
}
}  // namespace

Mat bilinear(const Mat& x, std::size_t h, std::size_t w, std::size_t oh, std::size_t ow) {
  const std::size_t c = x[0].size();
  Mat out(oh * ow, Vec(c, 0.0));
  for (std::size_t y = 0; y < oh; ++y) {
    std::size_t y0, y1;
    double ty;
    source(y, h, oh, y0, y1, ty);
    for (std::size_t xx = 0; xx < ow; ++xx) {
      std::size_t x0, x1;
      double tx;
      source(xx, w, ow, x0, x1, tx);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double top = x[y0 * w + x0][ch] * (1.0 - tx) + x[y0 * w + x1][ch] * tx;
        const double bottom = x[y1 * w + x0][ch] * (1.0 - tx) + x[y1 * w + x1][ch] * tx;
        out[y * ow + xx][ch] = top * (1.0 - ty) + bottom * ty;
      }
    }
  }
  return out;
}

Mat query_update(const Mat& tokens, const Mat& pos, const Mat& pixels, const sbanet::BamParams& p) {
  const Mat queries = pos.empty() ? tokens : plus(tokens, pos);
  const Mat q = affine(queries, linear_of(p.token_query));
  const Mat k = affine(pixels, linear_of(p.token_key));
  const Mat v = affine(pixels, linear_of(p.token_value));
  const Mat x = plus(queries, attention(q, k, v, 1, static_cast<double>(tokens[0].size()), pixels.size()));
  const Mat ffn = affine(apply_gelu(affine(x, linear_of(p.token_ffn1))), linear_of(p.token_ffn2));
  return layer_norm(plus(x, ffn), norm_of(p.token_norm));
}

Mat query_text_align(const Mat& text, std::size_t valid, const Mat& tokens, const sbanet::BamParams& p) {
  (void)valid;  // every text token is a query; the keys are the M query tokens
  const Mat q = apply_gelu(affine(text, linear_of(p.align_query)));
  const Mat k = apply_gelu(affine(tokens, linear_of(p.align_key)));
  const Mat v = apply_gelu(affine(tokens, linear_of(p.align_value)));
  const Mat r = attention(q, k, v, 1, static_cast<double>(tokens[0].size()), tokens.size());
  return layer_norm(affine(r, linear_of(p.align_out)), norm_of(p.align_norm));
}

Mat linguistic_update(const Mat& text, const Mat& evidence, const sbanet::BamParams& p) {
  const Mat lang = apply_relu(affine(text, linear_of(p.lang_in)));
  return apply_relu(affine(hadamard(lang, evidence), linear_of(p.lang_out)));
}

Mat dfs(const Mat& visual, std::size_t h, std::size_t w, const Mat& text, std::size_t valid,
        const sbanet::BamParams& p) {
  Mat stacked(h * w);
  for (std::size_t b = 0; b < p.bins.size(); ++b) {
    const std::size_t g = p.bins[b];
    const Mat pooled = adaptive_pool(visual, h, w, g);
    const Mat sub = layer_norm(affine(pooled, linear_of(p.bin_conv[b])), norm_of(p.bin_norm[b]));
    const Mat cross = pwam(sub, text, valid, p.bin_pwam[b]);
    const Mat up = bilinear(cross, g, g, h, w);
    for (std::size_t i = 0; i < h * w; ++i) stacked[i].insert(stacked[i].end(), up[i].begin(), up[i].end());
  }
  return mlp2(stacked, p.fusion);
}

Mat channel_update(const Mat& stage, const Mat& fc, const sbanet::TcsaParams& p, std::size_t index) {
  const auto& s = p.stages[index];
  const Vec qs = vec(s.channel_query.scale), qb = vec(s.channel_query.bias);
  const Vec ks = vec(s.channel_key.scale), kb = vec(s.channel_key.bias);
  const Vec vs = vec(s.channel_value.scale), vb = vec(s.channel_value.bias);
  const Vec os = vec(s.channel_out.scale), ob = vec(s.channel_out.bias);
  const std::size_t m = stage.size(), ci = stage[0].size(), cc = fc[0].size();
  Mat out(m, Vec(ci, 0.0));
  for (std::size_t i = 0; i < ci; ++i) {
    Vec logits(cc);
    for (std::size_t j = 0; j < cc; ++j) {
      double dot = 0.0;
      for (std::size_t r = 0; r < m; ++r) dot += (stage[r][i] * qs[i] + qb[i]) * (fc[r][j] * ks[j] + kb[j]);
      logits[j] = dot / std::sqrt(static_cast<double>(cc));
    }
    const double top = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (auto& l : logits) {
      l = std::exp(l - top);
      z += l;
    }
    for (std::size_t r = 0; r < m; ++r) {
      double acc = 0.0;
      for (std::size_t j = 0; j < cc; ++j) acc += logits[j] / z * (fc[r][j] * vs[j] + vb[j]);
      out[r][i] = acc * os[i] + ob[i];
    }
  }
  return out;
}

Mat spatial_update(const Mat& stage, const Mat& fc, const sbanet::TcsaParams& p, std::size_t index) {
  const auto& s = p.stages[index];
  const Vec qs = vec(s.spatial_query.scale), qb = vec(s.spatial_query.bias);
  const Vec ks = vec(s.spatial_key.scale);
  const Vec vs = vec(s.spatial_value.scale), vb = vec(s.spatial_value.bias);
  const Vec os = vec(s.spatial_out.scale), ob = vec(s.spatial_out.bias);
  const std::size_t m = stage.size(), ci = stage[0].size(), cc = fc[0].size();
  const std::size_t visual = cc - p.guidance_dim;
  Mat q(m, Vec(cc, 0.0)), k(m, Vec(cc, 0.0)), v(m, Vec(ci, 0.0));
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t j = 0; j < visual; ++j) {
      q[r][j] = fc[r][j] * qs[j] + qb[j];
      k[r][j] = fc[r][j] * ks[j];
    }
    for (std::size_t j = 0; j < ci; ++j) v[r][j] = stage[r][j] * vs[j] + vb[j];
  }
  const Mat att = attention(q, k, v, p.heads, static_cast<double>(cc / p.heads), m);
  Mat out(m, Vec(ci, 0.0));
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < ci; ++j) out[r][j] = att[r][j] * os[j] + ob[j];
  return out;
}

Vec adamw(const Vec& w, const Vec& g, Vec& m, Vec& v, std::uint64_t step, double lr, double b1, double b2,
          double eps, double wd) {
  Vec out(w.size());
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
    const double mh = m[i] / c1, vh = v[i] / c2;
    out[i] = w[i] * (1.0 - lr * wd) - lr * mh / (std::sqrt(vh) + eps);
  }
  return out;
}

CorpusCounts count_corpus(const std::vector<sbanet::BinaryMask>& preds, const std::vector<sbanet::BinaryMask>& gts,
                          const std::vector<double>& thresholds) {
  CorpusCounts c;
  std::uint64_t total_i = 0, total_u = 0;
  std::vector<double> ious;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    std::uint64_t in = 0, un = 0;
    for (std::size_t y = 0; y < gts[s].height; ++y) {
      for (std::size_t x = 0; x < gts[s].width; ++x) {
        const bool a = preds[s].at(y, x) != 0, b = gts[s].at(y, x) != 0;
        in += a && b;
        un += a || b;
      }
    }
    total_i += in;
    total_u += un;
    ious.push_back(un == 0 ? 1.0 : static_cast<double>(in) / static_cast<double>(un));
  }
  for (double i : ious) c.miou += i;
  c.miou /= static_cast<double>(ious.size());
  c.oiou = total_u == 0 ? 1.0 : static_cast<double>(total_i) / static_cast<double>(total_u);
  for (double t : thresholds) {
    std::size_t hits = 0;
    for (double i : ious) hits += i > t;
    c.pr.push_back(static_cast<double>(hits) / static_cast<double>(ious.size()));
  }
  return c;
}

}  // namespace oracle
