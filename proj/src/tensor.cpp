#include "sbanet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sbanet/errors.hpp"

namespace sbanet {

namespace detail {

struct Node {
  Shape shape;
  std::shared_ptr<std::vector<double>> values;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
};

struct Access {
  static Tensor make(Shape shape, std::vector<double> values, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->values = std::make_shared<std::vector<double>>(std::move(values));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }
  static Tensor share(Shape shape, const Tensor& src) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->values = src.node_->values;
    return Tensor(std::move(node));
  }
  static Node& node(const Tensor& t) { return *t.node_; }
  static std::vector<GradTape::Record>& records(GradTape& tape) { return tape.records_; }
};

}  // namespace detail

namespace {

using detail::Access;

thread_local GradTape* active_tape = nullptr;
std::atomic<int> flipped_op{-1};

std::span<double> grad_buffer(const Tensor& t) {
  auto& node = Access::node(t);
  if (node.grad.size() != node.values->size()) node.grad.assign(node.values->size(), 0.0);
  return node.grad;
}

const double* data(const Tensor& t) { return Access::node(t).values->data(); }

void require_defined(const Tensor& t, std::string_view op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

// Creates the result tensor and, when an input needs a gradient and a tape is
// active, records the backward closure.
Tensor finish(OpKind kind, Shape shape, std::vector<double> values,
              std::initializer_list<Tensor> inputs, BackwardFn backward_fn) {
  bool needs = false;
  for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  GradTape* tape = active_tape;
  if (!needs || tape == nullptr) return Access::make(std::move(shape), std::move(values), false);
  Tensor out = Access::make(std::move(shape), std::move(values), true);
  Access::node(out).leaf = false;
  Access::records(*tape).push_back({kind, std::vector<Tensor>(inputs), out, std::move(backward_fn)});
  return out;
}

// Broadcast helper: b's shape must equal a's or be a trailing suffix of it.
std::size_t broadcast_inner(const Tensor& a, const Tensor& b, std::string_view op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size();
  for (std::size_t i = 0; ok && i < sb.size(); ++i) ok = sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
  if (!ok) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
  }
  return b.numel();
}

void axis_split(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& n,
                std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

constexpr double kGeluScale = 0.7978845608;  // sqrt(2/pi), truncated
constexpr double kGeluCubic = 0.044715;

void require_hwc(const Tensor& x, std::string_view op) {
  if (x.rank() != 3) throw ShapeError(std::string(op) + ": expected [h, w, c], got " + shape_str(x.shape()));
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
constexpr std::pair<OpKind, std::string_view> kOpNames[] = {
    {OpKind::MatMul, "matmul"},
    {OpKind::Transpose, "transpose"},
    {OpKind::Linear, "linear"},
    {OpKind::Add, "add"},
    {OpKind::Mul, "mul"},
    {OpKind::Scale, "scale"},
    {OpKind::Relu, "relu"},
    {OpKind::Gelu, "gelu"},
    {OpKind::Tanh, "tanh"},
    {OpKind::Softmax, "softmax"},
    {OpKind::LayerNorm, "layer_norm"},
    {OpKind::Sum, "sum"},
    {OpKind::Mean, "mean"},
    {OpKind::Reshape, "reshape"},
    {OpKind::Concat, "concat"},
    {OpKind::Slice, "slice"},
    {OpKind::RowSlice, "slice_rows"},
    {OpKind::RowMean, "mean_rows"},
    {OpKind::AdaptivePool, "adaptive_avg_pool"},
    {OpKind::Bilinear, "bilinear_resize"},
    {OpKind::SpaceToDepth, "space_to_depth"},
    {OpKind::CrossEntropy, "cross_entropy"},
};
}  // namespace

std::string_view op_name(OpKind kind) {
  for (const auto& [k, name] : kOpNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

std::optional<OpKind> op_from_name(std::string_view name) {
  for (const auto& [k, n] : kOpNames) {
    if (n == name) return k;
  }
  return std::nullopt;
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return from_values(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  }
  return Access::make(std::move(shape), std::move(values), false);
}

Tensor Tensor::scalar(double value) { return from_values({1}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = from_values(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

std::size_t Tensor::numel() const {
  require_defined(*this, "numel");
  return node_->values->size();
}

std::span<const double> Tensor::values() const {
  require_defined(*this, "values");
  return *node_->values;
}

std::span<double> Tensor::mutable_values() {
  require_defined(*this, "mutable_values");
  if (!node_->leaf) throw UsageError("only leaf tensors can be modified in place");
  return *node_->values;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return (*node_->values)[0];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }
bool Tensor::is_leaf() const { return defined() && node_->leaf; }

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  return grad_buffer(*this);
}

void Tensor::zero_grad() {
  require_defined(*this, "zero_grad");
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from_values(shape(), std::vector<double>(values().begin(), values().end())); }

// ---- tape --------------------------------------------------------------------

TapeScope::TapeScope(GradTape& tape) : previous_(active_tape) { active_tape = &tape; }
TapeScope::~TapeScope() { active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(active_tape) { active_tape = nullptr; }
NoGradScope::~NoGradScope() { active_tape = previous_; }

void backward(const Tensor& loss, GradTape& tape) {
  if (tape.consumed_) throw UsageError("backward: tape has already been consumed");
  require_defined(loss, "backward");
  if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  tape.consumed_ = true;
  auto& records = tape.records_;
  if (records.empty()) return;
  const bool on_tape = std::any_of(records.rbegin(), records.rend(),
                                   [&](const GradTape::Record& r) { return r.output.same_node(loss); });
  if (!on_tape) throw ContractError("backward: loss was not produced on this tape");

  grad_buffer(loss)[0] += 1.0;
  const int flipped = flipped_op.load();
  std::vector<double> negated;
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    auto& out_node = Access::node(it->output);
    if (out_node.grad.empty()) continue;  // output not reached from the loss
    if (static_cast<int>(it->kind) == flipped) {
      negated.resize(out_node.grad.size());
      std::transform(out_node.grad.begin(), out_node.grad.end(), negated.begin(), std::negate<>());
      it->backward(negated);
    } else {
      it->backward(out_node.grad);
    }
    out_node.grad.clear();
    out_node.grad.shrink_to_fit();
  }
  records.clear();
}

namespace debug {
void inject_gradient_sign_flip(std::optional<OpKind> kind) {
  flipped_op.store(kind ? static_cast<int>(*kind) : -1);
}
}  // namespace debug

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const double* pa = data(a);
  const double* pb = data(b);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return finish(OpKind::MatMul, {m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g) {
    const double* pa = data(a);
    const double* pb = data(b);
    if (a.requires_grad()) {
      auto ga = grad_buffer(a);  // g · bᵀ
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[p * n + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (b.requires_grad()) {
      auto gb = grad_buffer(b);  // aᵀ · g
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  if (a.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const double* pa = data(a);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = pa[i * n + j];
  return finish(OpKind::Transpose, {n, m}, std::move(out), {a}, [a, m, n](std::span<const double> g) {
    auto ga = grad_buffer(a);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined(x, "linear");
  require_defined(weight, "linear");
  require_defined(bias, "linear");
  if (weight.rank() != 2 || bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
    throw ShapeError("linear: inconsistent parameters " + shape_str(weight.shape()) + " / " +
                     shape_str(bias.shape()));
  }
  const std::size_t in = weight.dim(1), out_dim = weight.dim(0);
  if (x.shape().back() != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not end in " + std::to_string(in));
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  std::vector<double> out(rows * out_dim);
  const double* px = data(x);
  const double* pw = data(weight);
  const double* pb = data(bias);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = px + r * in;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wr = pw + o * in;
      double acc = pb[o];
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      out[r * out_dim + o] = acc;
    }
  }
  return finish(OpKind::Linear, std::move(out_shape), std::move(out), {x, weight, bias},
                [x, weight, bias, rows, in, out_dim](std::span<const double> g) {
                  const double* px = data(x);
                  const double* pw = data(weight);
                  if (x.requires_grad()) {
                    auto gx = grad_buffer(x);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t o = 0; o < out_dim; ++o) {
                        const double go = g[r * out_dim + o];
                        const double* wr = pw + o * in;
                        double* gxr = gx.data() + r * in;
                        for (std::size_t i = 0; i < in; ++i) gxr[i] += go * wr[i];
                      }
                  }
                  if (weight.requires_grad()) {
                    auto gw = grad_buffer(weight);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t o = 0; o < out_dim; ++o) {
                        const double go = g[r * out_dim + o];
                        const double* xr = px + r * in;
                        double* gwr = gw.data() + o * in;
                        for (std::size_t i = 0; i < in; ++i) gwr[i] += go * xr[i];
                      }
                  }
                  if (bias.requires_grad()) {
                    auto gb = grad_buffer(bias);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[r * out_dim + o];
                  }
                });
}

// ---- pointwise ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  const std::size_t nb = broadcast_inner(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  const double* pb = data(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i % nb];
  return finish(OpKind::Add, a.shape(), std::move(out), {a, b}, [a, b, nb](std::span<const double> g) {
    if (a.requires_grad()) {
      auto ga = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  const std::size_t nb = broadcast_inner(a, b, "mul");
  std::vector<double> out(a.numel());
  const double* pa = data(a);
  const double* pb = data(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i % nb];
  return finish(OpKind::Mul, a.shape(), std::move(out), {a, b}, [a, b, nb](std::span<const double> g) {
    const double* pa = data(a);
    const double* pb = data(b);
    if (a.requires_grad()) {
      auto ga = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb[i % nb];
    }
    if (b.requires_grad()) {
      auto gb = grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i] * pa[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  require_defined(a, "scale");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return finish(OpKind::Scale, a.shape(), std::move(out), {a}, [a, factor](std::span<const double> g) {
    auto ga = grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return finish(OpKind::Relu, x.shape(), std::move(out), {x}, [x](std::span<const double> g) {
    auto gx = grad_buffer(x);
    const double* px = data(x);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (px[i] > 0.0) gx[i] += g[i];
  });
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  std::vector<double> out(x.numel());
  const double* px = data(x);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = px[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluScale * (v + kGeluCubic * v * v * v)));
  }
  return finish(OpKind::Gelu, x.shape(), std::move(out), {x}, [x](std::span<const double> g) {
    auto gx = grad_buffer(x);
    const double* px = data(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = px[i];
      const double t = std::tanh(kGeluScale * (v + kGeluCubic * v * v * v));
      const double dt = (1.0 - t * t) * kGeluScale * (1.0 + 3.0 * kGeluCubic * v * v);
      gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

Tensor tanh(const Tensor& x) {
  require_defined(x, "tanh");
  std::vector<double> out(x.numel());
  const double* px = data(x);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(px[i]);
  Tensor result = finish(OpKind::Tanh, x.shape(), std::move(out), {x}, nullptr);
  if (result.requires_grad()) {
    // The closure reads the output values, so it is attached after creation.
    auto& rec = Access::records(*active_tape).back();
    std::weak_ptr<std::vector<double>> weak_out = Access::node(result).values;
    rec.backward = [x, weak_out](std::span<const double> g) {
      auto y = weak_out.lock();
      auto gx = grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - (*y)[i] * (*y)[i]);
    };
  }
  return result;
}

Tensor elementwise(const Tensor& x, Pointwise kind, const Tensor& other) {
  switch (kind) {
    case Pointwise::Relu:
      return relu(x);
    case Pointwise::Gelu:
      return gelu(x);
    case Pointwise::Tanh:
      return tanh(x);
    case Pointwise::Mul:
      return mul(x, other);
    case Pointwise::Add:
      return add(x, other);
  }
  throw ContractError("elementwise: unknown kind");
}

// ---- normalizations -----------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  std::size_t outer, n, inner;
  axis_split(x.shape(), axis, outer, n, inner);
  std::vector<double> out(x.numel());
  const double* px = data(x);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = px[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, px[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(px[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  Tensor result = finish(OpKind::Softmax, x.shape(), std::move(out), {x}, nullptr);
  if (result.requires_grad()) {
    auto& rec = Access::records(*active_tape).back();
    std::weak_ptr<std::vector<double>> weak_out = Access::node(result).values;
    rec.backward = [x, weak_out, outer, n, inner](std::span<const double> g) {
      auto y = weak_out.lock();
      auto gx = grad_buffer(x);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * (*y)[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += (*y)[idx] * (g[idx] - dot);
          }
        }
      }
    };
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t axis, double eps) {
  require_defined(x, "layer_norm");
  if (axis >= x.rank()) throw ShapeError("layer_norm: axis out of range for " + shape_str(x.shape()));
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  std::size_t outer, n, inner;
  axis_split(x.shape(), axis, outer, n, inner);
  if (gamma.numel() != n || beta.numel() != n) {
    throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(n) + " entries");
  }
  const std::size_t slices = outer * inner;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(slices);
  std::vector<double> out(x.numel());
  const double* px = data(x);
  const double* pg = data(gamma);
  const double* pb = data(beta);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mu = 0.0;
      for (std::size_t j = 0; j < n; ++j) mu += px[base + j * inner];
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = px[base + j * inner] - mu;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[o * inner + in] = is;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = base + j * inner;
        (*xhat)[idx] = (px[idx] - mu) * is;
        out[idx] = (*xhat)[idx] * pg[j] + pb[j];
      }
    }
  }
  return finish(OpKind::LayerNorm, x.shape(), std::move(out), {x, gamma, beta},
                [x, gamma, beta, xhat, inv_std, outer, n, inner](std::span<const double> g) {
                  const double* pg = data(gamma);
                  if (gamma.requires_grad() || beta.requires_grad()) {
                    auto gg = gamma.requires_grad() ? grad_buffer(gamma) : std::span<double>{};
                    auto gb = beta.requires_grad() ? grad_buffer(beta) : std::span<double>{};
                    for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t j = 0; j < n; ++j)
                        for (std::size_t in = 0; in < inner; ++in) {
                          const std::size_t idx = (o * n + j) * inner + in;
                          if (!gg.empty()) gg[j] += g[idx] * (*xhat)[idx];
                          if (!gb.empty()) gb[j] += g[idx];
                        }
                  }
                  if (!x.requires_grad()) return;
                  auto gx = grad_buffer(x);
                  const double nn = static_cast<double>(n);
                  for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t in = 0; in < inner; ++in) {
                      const std::size_t base = o * n * inner + in;
                      double s1 = 0.0, s2 = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t idx = base + j * inner;
                        const double dxh = g[idx] * pg[j];
                        s1 += dxh;
                        s2 += dxh * (*xhat)[idx];
                      }
                      const double is = (*inv_std)[o * inner + in];
                      for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t idx = base + j * inner;
                        const double dxh = g[idx] * pg[j];
                        gx[idx] += is * (dxh - s1 / nn - (*xhat)[idx] * s2 / nn);
                      }
                    }
                  }
                });
}

// ---- reductions and layout ---------------------------------------------------

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double total = 0.0;
  for (double v : x.values()) total += v;
  return finish(OpKind::Sum, {1}, {total}, {x}, [x](std::span<const double> g) {
    auto gx = grad_buffer(x);
    for (auto& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  double total = 0.0;
  for (double v : x.values()) total += v;
  const double n = static_cast<double>(x.numel());
  return finish(OpKind::Mean, {1}, {total / n}, {x}, [x, n](std::span<const double> g) {
    auto gx = grad_buffer(x);
    for (auto& v : gx) v += g[0] / n;
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor view = Access::share(std::move(shape), x);
  if (!x.requires_grad() || active_tape == nullptr) return view;
  Access::node(view).requires_grad = true;
  Access::node(view).leaf = false;
  Access::records(*active_tape).push_back({OpKind::Reshape, {x}, view, [x](std::span<const double> g) {
                                             auto gx = grad_buffer(x);
                                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                           }});
  return view;
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    widths.push_back(s.back());
    total += s.back();
    s.pop_back();
    if (s != lead) throw ShapeError("concat: leading dimensions differ: " + shape_str(p.shape()));
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const double* pp = data(parts[k]);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pp + r * widths[k], widths[k], out.data() + r * total + offset);
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  bool needs = std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!needs || active_tape == nullptr) return Access::make(std::move(shape), std::move(out), false);
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  Tensor result = Access::make(std::move(shape), std::move(out), true);
  Access::node(result).leaf = false;
  Access::records(*active_tape).push_back(
      {OpKind::Concat, inputs, result, [inputs, widths, rows, total](std::span<const double> g) {
         std::size_t offset = 0;
         for (std::size_t k = 0; k < inputs.size(); ++k) {
           if (inputs[k].requires_grad()) {
             auto gk = grad_buffer(inputs[k]);
             for (std::size_t r = 0; r < rows; ++r)
               for (std::size_t j = 0; j < widths[k]; ++j) gk[r * widths[k] + j] += g[r * total + offset + j];
           }
           offset += widths[k];
         }
       }});
  return result;
}

Tensor slice(const Tensor& x, std::size_t start, std::size_t length) {
  require_defined(x, "slice");
  const std::size_t width = x.shape().back();
  if (length == 0 || start + length > width) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / width;
  std::vector<double> out(rows * length);
  const double* px = data(x);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(px + r * width + start, length, out.data() + r * length);
  Shape shape = x.shape();
  shape.back() = length;
  return finish(OpKind::Slice, std::move(shape), std::move(out), {x},
                [x, rows, width, start, length](std::span<const double> g) {
                  auto gx = grad_buffer(x);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < length; ++j) gx[r * width + start + j] += g[r * length + j];
                });
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t length) {
  require_defined(x, "slice_rows");
  if (length == 0 || start + length > x.dim(0)) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis 0 of " + shape_str(x.shape()));
  }
  const std::size_t stride = x.numel() / x.dim(0);
  std::vector<double> out(x.values().begin() + start * stride, x.values().begin() + (start + length) * stride);
  Shape shape = x.shape();
  shape[0] = length;
  return finish(OpKind::RowSlice, std::move(shape), std::move(out), {x}, [x, start, stride](std::span<const double> g) {
    auto gx = grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[start * stride + i] += g[i];
  });
}

Tensor mean_rows(const Tensor& x) {
  require_defined(x, "mean_rows");
  const std::size_t rows = x.dim(0);
  const std::size_t stride = x.numel() / rows;
  std::vector<double> out(stride, 0.0);
  const double* px = data(x);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < stride; ++j) out[j] += px[r * stride + j];
  for (auto& v : out) v /= static_cast<double>(rows);
  Shape shape(x.shape().begin() + 1, x.shape().end());
  if (shape.empty()) shape = {1};
  return finish(OpKind::RowMean, std::move(shape), std::move(out), {x}, [x, rows, stride](std::span<const double> g) {
    auto gx = grad_buffer(x);
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < stride; ++j) gx[r * stride + j] += g[j] * inv;
  });
}

// ---- spatial -----------------------------------------------------------------

Tensor adaptive_avg_pool(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_defined(x, "adaptive_avg_pool");
  require_hwc(x, "adaptive_avg_pool");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (out_h == 0 || out_w == 0 || out_h > h || out_w > w) {
    throw ConfigError("adaptive_avg_pool: " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                      " bins do not fit a " + std::to_string(h) + "x" + std::to_string(w) + " map");
  }
  auto rows = [&](std::size_t b) { return std::pair{b * h / out_h, (b + 1) * h / out_h}; };
  auto cols = [&](std::size_t b) { return std::pair{b * w / out_w, (b + 1) * w / out_w}; };
  std::vector<double> out(out_h * out_w * c, 0.0);
  const double* px = data(x);
  for (std::size_t by = 0; by < out_h; ++by) {
    const auto [y0, y1] = rows(by);
    for (std::size_t bx = 0; bx < out_w; ++bx) {
      const auto [x0, x1] = cols(bx);
      double* o = out.data() + (by * out_w + bx) * c;
      for (std::size_t yy = y0; yy < y1; ++yy)
        for (std::size_t xx = x0; xx < x1; ++xx)
          for (std::size_t ch = 0; ch < c; ++ch) o[ch] += px[(yy * w + xx) * c + ch];
      const double inv = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
      for (std::size_t ch = 0; ch < c; ++ch) o[ch] *= inv;
    }
  }
  return finish(OpKind::AdaptivePool, {out_h, out_w, c}, std::move(out), {x},
                [x, h, w, c, out_h, out_w](std::span<const double> g) {
                  auto gx = grad_buffer(x);
                  for (std::size_t by = 0; by < out_h; ++by) {
                    const std::size_t y0 = by * h / out_h, y1 = (by + 1) * h / out_h;
                    for (std::size_t bx = 0; bx < out_w; ++bx) {
                      const std::size_t x0 = bx * w / out_w, x1 = (bx + 1) * w / out_w;
                      const double inv = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
                      const double* go = g.data() + (by * out_w + bx) * c;
                      for (std::size_t yy = y0; yy < y1; ++yy)
                        for (std::size_t xx = x0; xx < x1; ++xx)
                          for (std::size_t ch = 0; ch < c; ++ch) gx[(yy * w + xx) * c + ch] += go[ch] * inv;
                    }
                  }
                });
}

namespace {
struct Tap {
  std::size_t i0, i1;
  double w0, w1;
};

// Half-pixel sampling: output coordinate o maps to src = (o + 0.5)·in/out − 0.5,
// clamped to the valid range.
std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double frac = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - frac, frac};
  }
  return taps;
}
}  // namespace

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_defined(x, "bilinear_resize");
  require_hwc(x, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: output size must be positive");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (h == out_h && w == out_w) {
    // Exact identity; avoids rounding from the weight arithmetic.
    return finish(OpKind::Bilinear, x.shape(), std::vector<double>(x.values().begin(), x.values().end()), {x},
                  [x](std::span<const double> g) {
                    auto gx = grad_buffer(x);
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                  });
  }
  auto ty = std::make_shared<std::vector<Tap>>(bilinear_taps(h, out_h));
  auto tx = std::make_shared<std::vector<Tap>>(bilinear_taps(w, out_w));
  std::vector<double> out(out_h * out_w * c);
  const double* px = data(x);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const Tap& a = (*ty)[oy];
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const Tap& b = (*tx)[ox];
      double* o = out.data() + (oy * out_w + ox) * c;
      const double* p00 = px + (a.i0 * w + b.i0) * c;
      const double* p01 = px + (a.i0 * w + b.i1) * c;
      const double* p10 = px + (a.i1 * w + b.i0) * c;
      const double* p11 = px + (a.i1 * w + b.i1) * c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        o[ch] = a.w0 * (b.w0 * p00[ch] + b.w1 * p01[ch]) + a.w1 * (b.w0 * p10[ch] + b.w1 * p11[ch]);
      }
    }
  }
  return finish(OpKind::Bilinear, {out_h, out_w, c}, std::move(out), {x},
                [x, ty, tx, w, c, out_h, out_w](std::span<const double> g) {
                  auto gx = grad_buffer(x);
                  for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const Tap& a = (*ty)[oy];
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                      const Tap& b = (*tx)[ox];
                      const double* go = g.data() + (oy * out_w + ox) * c;
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        gx[(a.i0 * w + b.i0) * c + ch] += a.w0 * b.w0 * go[ch];
                        gx[(a.i0 * w + b.i1) * c + ch] += a.w0 * b.w1 * go[ch];
                        gx[(a.i1 * w + b.i0) * c + ch] += a.w1 * b.w0 * go[ch];
                        gx[(a.i1 * w + b.i1) * c + ch] += a.w1 * b.w1 * go[ch];
                      }
                    }
                  }
                });
}

Tensor space_to_depth(const Tensor& x, std::size_t block) {
  require_defined(x, "space_to_depth");
  require_hwc(x, "space_to_depth");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (block == 0 || h % block != 0 || w % block != 0) {
    throw ConfigError("space_to_depth: " + std::to_string(h) + "x" + std::to_string(w) +
                      " is not a multiple of block " + std::to_string(block));
  }
  const std::size_t oh = h / block, ow = w / block, oc = block * block * c;
  std::vector<std::size_t> index(oh * ow * oc);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t xx = 0; xx < ow; ++xx)
      for (std::size_t dy = 0; dy < block; ++dy)
        for (std::size_t dx = 0; dx < block; ++dx)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t o = ((y * ow + xx) * block + dy) * block * c + dx * c + ch;
            index[o] = ((y * block + dy) * w + (xx * block + dx)) * c + ch;
          }
  std::vector<double> out(index.size());
  const double* px = data(x);
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = px[index[i]];
  auto shared_index = std::make_shared<std::vector<std::size_t>>(std::move(index));
  return finish(OpKind::SpaceToDepth, {oh, ow, oc}, std::move(out), {x}, [x, shared_index](std::span<const double> g) {
    auto gx = grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*shared_index)[i]] += g[i];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_defined(logits, "cross_entropy");
  const std::size_t k = logits.shape().back();
  const std::size_t n = logits.numel() / k;
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(logits.shape()));
  }
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  const double* pl = data(logits);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw DataError("cross_entropy: label " + std::to_string(label) + " outside [0, " + std::to_string(k) + ")");
    }
    const double* row = pl + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - mx) / z;
    total += std::log(z) + mx - row[label];
  }
  std::vector<int> kept(labels.begin(), labels.end());
  return finish(OpKind::CrossEntropy, {1}, {total / static_cast<double>(n)}, {logits},
                [logits, probs, kept = std::move(kept), n, k](std::span<const double> g) {
                  auto gl = grad_buffer(logits);
                  const double s = g[0] / static_cast<double>(n);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                      const double target = static_cast<std::size_t>(kept[i]) == j ? 1.0 : 0.0;
                      gl[i * k + j] += s * ((*probs)[i * k + j] - target);
                    }
                });
}

}  // namespace sbanet
