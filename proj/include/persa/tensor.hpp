#pragma once

// Reverse-mode automatic differentiation over dense double-precision tensors.
//
// A Tensor is a cheap shared handle. Every primitive that receives at least
// one input with requires_grad() records a Node on its output (define-by-run);
// backward() walks those nodes in reverse topological order. The record is
// owned by the output handles, so dropping the loss frees the graph.
//
// Shapes are row-major. Most primitives treat a tensor as a matrix of
// rows() x cols(), where cols() is the last axis. Broadcasting is limited to
// adding a bias vector across the leading axes.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace persa::ad {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t numel(const Shape& shape);

struct TensorImpl;

using BackwardFn = std::function<void(
    const TensorImpl& out, std::span<const std::shared_ptr<TensorImpl>> inputs)>;

// One recorded primitive application.
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves

  // Zero-filled gradient buffer, allocated on first use.
  double* grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  // Last axis length; 1 for scalars.
  std::size_t cols() const;
  // Product of the leading axes.
  std::size_t rows() const;

  std::span<const double> data() const { return impl_->data; }
  // Direct write access; only meaningful on leaves (optimizer updates, tests).
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const {
    return impl_->data[r * cols() + c];
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool is_leaf() const { return impl_->node == nullptr; }

  // Same values, no history, requires_grad false. Shares no storage.
  Tensor detach() const;
  // Deep copy of data that keeps the requires_grad flag but not the history.
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Recording is on by default; a NoGradGuard disables it on the current thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Topologically ordered view of the records reachable from a tensor: every
// node's inputs precede it.
class Graph {
 public:
  static Graph trace(const Tensor& root);

  std::span<const std::shared_ptr<TensorImpl>> order() const { return order_; }
  std::size_t size() const { return order_.size(); }
  std::vector<std::string> op_names() const;

 private:
  std::vector<std::shared_ptr<TensorImpl>> order_;
};

// Accumulates d(loss)/d(t) into every requires_grad tensor reachable from
// loss. Throws ContractError unless loss holds exactly one element.
void backward(const Tensor& loss);

// ---- primitives ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// a + b where b has a's shape, or b is a vector of length a.cols() (bias).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// log(sigmoid(a)) without overflow or cancellation.
Tensor log_sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
// Gradient flows only where lo < a < hi.
Tensor clamp(const Tensor& a, double lo, double hi);
// Elementwise min; ties route the gradient to a.
Tensor minimum(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
// Per-row normalization over the last axis, then gain * x + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
// Sets the strict upper triangle of a square score matrix to -inf.
Tensor causal_mask(const Tensor& scores);

// Rows of table selected by ids: result is ids.size() x table.cols().
Tensor embedding(const Tensor& table, std::span<const int> ids);
// Entry (r, index[r]) of each row; result is a vector of length rows().
Tensor pick(const Tensor& a, std::span<const int> index);
// Mean over rows of -log softmax(logits)[r, target[r]].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Sum over the last axis; result is a vector of length rows().
Tensor sum_rows(const Tensor& a);

// axis 0 stacks rows, axis 1 joins columns; inputs must be rank 2 (or vectors
// for axis 0 / last axis joins).
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
// Half-open range [begin, end) along axis 0 (rows) or the last axis.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin,
             std::size_t end);
// View of the same elements with a new shape of equal size.
Tensor reshape(const Tensor& a, Shape shape);

}  // namespace persa::ad
