#pragma once

// Dense row-major f64 tensors with tape-based reverse-mode differentiation.
//
// Operations record themselves on the thread's active GradTape (see TapeScope)
// whenever at least one input requires a gradient. Without an active tape they
// are plain numeric kernels.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sbanet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class OpKind {
  MatMul,
  Transpose,
  Linear,
  Add,
  Mul,
  Scale,
  Relu,
  Gelu,
  Tanh,
  Softmax,
  LayerNorm,
  Sum,
  Mean,
  Reshape,
  Concat,
  Slice,
  RowSlice,
  RowMean,
  AdaptivePool,
  Bilinear,
  SpaceToDepth,
  CrossEntropy,
};

std::string_view op_name(OpKind kind);
std::optional<OpKind> op_from_name(std::string_view name);

namespace detail {
struct Node;
struct Access;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_values(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  // Leaf that accumulates gradients during backward.
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  // Only leaves may be written in place (initialization, optimizer, perturbation).
  std::span<double> mutable_values();
  double item() const;
  double value(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  bool is_leaf() const;

  // Gradient buffer; all zeros until a backward pass reaches this tensor.
  std::span<const double> grad() const;
  void zero_grad();

  // Same underlying node (identity, not value equality).
  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }
  // Fresh constant leaf holding a copy of the values.
  Tensor detach() const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend struct detail::Access;

  std::shared_ptr<detail::Node> node_;
};

using BackwardFn = std::function<void(std::span<const double> grad_out)>;

class GradTape {
 public:
  explicit GradTape(std::uint64_t rng_seed = 0) : rng_seed_(rng_seed) {}
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  std::size_t size() const noexcept { return records_.size(); }
  bool consumed() const noexcept { return consumed_; }
  std::uint64_t rng_seed() const noexcept { return rng_seed_; }

 private:
  struct Record {
    OpKind kind;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  friend struct detail::Access;
  friend void backward(const Tensor& loss, GradTape& tape);

  std::vector<Record> records_;
  std::uint64_t rng_seed_;
  bool consumed_ = false;
};

// Makes `tape` the active tape of the calling thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* previous_;
};

// Suspends recording on the calling thread for the scope's lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape* previous_;
};

// Populates grad() of every leaf reachable from `loss` (accumulating into
// existing buffers) and consumes the tape.
void backward(const Tensor& loss, GradTape& tape);

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// x[..., in] · weightᵀ + bias, weight is [out, in].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Binary ops accept equal shapes or `b` whose shape is a trailing suffix of `a`'s.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor relu(const Tensor& x);
// Tanh approximation: 0.5·x·(1 + tanh(0.7978845608·(x + 0.044715·x³))).
Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);

enum class Pointwise { Relu, Gelu, Tanh, Mul, Add };
Tensor elementwise(const Tensor& x, Pointwise kind, const Tensor& other = Tensor{});

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t axis,
                  double eps = 1e-5);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Shares the value buffer with `x`.
Tensor reshape(const Tensor& x, Shape shape);
// Concatenation / slicing along the last axis.
Tensor concat(std::span<const Tensor> parts);
Tensor slice(const Tensor& x, std::size_t start, std::size_t length);
// Rows [start, start+length) along axis 0.
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t length);
// Mean over axis 0.
Tensor mean_rows(const Tensor& x);

// Adaptive average pooling of an [h, w, c] map into out_h × out_w bins. Bin b
// along rows covers input rows [floor(b·h/out_h), floor((b+1)·h/out_h)), same
// rule along columns. Requires out_h ≤ h and out_w ≤ w so no bin is empty.
Tensor adaptive_avg_pool(const Tensor& x, std::size_t out_h, std::size_t out_w);
// Bilinear resize of an [h, w, c] map with half-pixel centers (align_corners = false).
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);
// [h, w, c] -> [h/s, w/s, s·s·c]; each output vector is the s×s block in row-major
// (dy, dx, channel) order.
Tensor space_to_depth(const Tensor& x, std::size_t block);

// Mean over positions of -log softmax(logits[p, :])[labels[p]]; logits are [..., K].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

namespace debug {
// Test hook: negates the gradient contribution of the given primitive.
void inject_gradient_sign_flip(std::optional<OpKind> kind);
}  // namespace debug

}  // namespace sbanet
