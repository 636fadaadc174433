#include "persa/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "persa/errors.hpp"

namespace persa::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

thread_local int no_grad_depth = 0;

[[noreturn]] void dim_error(const std::string& op, const Shape& a) {
  throw DimensionError(op + ": unsupported shape " + to_string(a));
}

[[noreturn]] void dim_error(const std::string& op, const Shape& a,
                            const Shape& b) {
  throw DimensionError(op + ": shape mismatch " + to_string(a) + " vs " +
                       to_string(b));
}

bool needs_record(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Builds the output tensor and, when any input requires a gradient, attaches
// the backward rule.
Tensor make_result(const std::string& op, Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs,
                   BackwardFn backward_fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (needs_record(inputs)) {
    impl->requires_grad = true;
    auto node = std::make_shared<Node>();
    node->op = op;
    for (const Tensor* t : inputs) node->inputs.push_back(t->impl());
    node->backward = std::move(backward_fn);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

Tensor make_result(const std::string& op, Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs, BackwardFn backward_fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool record = false;
  if (grad_enabled()) {
    for (const Tensor& t : inputs) record = record || t.requires_grad();
  }
  if (record) {
    impl->requires_grad = true;
    auto node = std::make_shared<Node>();
    node->op = op;
    for (const Tensor& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(backward_fn);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename F, typename D>
Tensor unary(const std::string& op, const Tensor& a, F f, D dfdx) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result(
      op, a.shape(), std::move(out), {&a},
      [dfdx](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
        TensorImpl& ai = *in[0];
        if (!ai.requires_grad) return;
        double* g = ai.grad_buffer();
        for (std::size_t i = 0; i < o.data.size(); ++i) {
          g[i] += o.grad[i] * dfdx(ai.data[i], o.data[i]);
        }
      });
}

void require_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) dim_error(op, a.shape(), b.shape());
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

double* TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad.data();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor: zero-length axis in " + ad::to_string(shape));
  }
  if (ad::numel(shape) != data.size()) {
    throw DimensionError("tensor: shape " + ad::to_string(shape) + " needs " +
                         std::to_string(ad::numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = ad::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values, bool requires_grad) {
  return Tensor({rows, cols}, std::move(values), requires_grad);
}

std::size_t Tensor::cols() const {
  return impl_->shape.empty() ? 1 : impl_->shape.back();
}

std::size_t Tensor::rows() const { return numel() / cols(); }

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item: tensor of shape " + ad::to_string(shape()) +
                        " is not a scalar");
  }
  return impl_->data[0];
}

Tensor Tensor::detach() const {
  return Tensor(impl_->shape, impl_->data, false);
}

Tensor Tensor::clone() const {
  return Tensor(impl_->shape, impl_->data, impl_->requires_grad);
}

bool grad_enabled() { return no_grad_depth == 0; }

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }

Graph Graph::trace(const Tensor& root) {
  Graph g;
  if (!root.defined()) return g;
  std::unordered_set<const TensorImpl*> visited;
  // Iterative post-order DFS: (impl, next input index).
  std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack;
  stack.emplace_back(root.impl(), 0);
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const Node* node = impl->node.get();
    if (node && next < node->inputs.size()) {
      const auto& child = node->inputs[next++];
      if (visited.insert(child.get()).second) stack.emplace_back(child, 0);
      continue;
    }
    g.order_.push_back(impl);
    stack.pop_back();
  }
  return g;
}

std::vector<std::string> Graph::op_names() const {
  std::vector<std::string> names;
  for (const auto& impl : order_) {
    if (impl->node) names.push_back(impl->node->op);
  }
  return names;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;
  const Graph graph = Graph::trace(loss);
  loss.impl()->grad_buffer()[0] += 1.0;
  const auto order = graph.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const TensorImpl& impl = **it;
    if (!impl.node || impl.grad.empty()) continue;
    impl.node->backward(impl, impl.node->inputs);
  }
}

// ---- linear algebra -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    dim_error("matmul", a.shape(), b.shape());
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n);
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  return make_result(
      "matmul", {m, n}, std::move(out), {&a, &b},
      [m, k, n](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
        ConstMatMap dc(o.grad.data(), m, n);
        TensorImpl& ai = *in[0];
        TensorImpl& bi = *in[1];
        if (ai.requires_grad) {
          MatMap(ai.grad_buffer(), m, k).noalias() +=
              dc * ConstMatMap(bi.data.data(), k, n).transpose();
        }
        if (bi.requires_grad) {
          MatMap(bi.grad_buffer(), k, n).noalias() +=
              ConstMatMap(ai.data.data(), m, k).transpose() * dc;
        }
      });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) dim_error("transpose", a.shape());
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return make_result(
      "transpose", {n, m}, std::move(out), {&a},
      [m, n](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
        double* g = in[0]->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j * m + i];
      });
}

// ---- elementwise --------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias = a.shape() != b.shape();
  if (bias && !(b.rank() == 1 && b.numel() == a.cols())) {
    dim_error("add", a.shape(), b.shape());
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto y = b.data();
  const std::size_t cols = a.cols();
  if (bias) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i % cols];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  }
  return make_result(
      "add", a.shape(), std::move(out), {&a, &b},
      [bias, cols](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
        if (in[0]->requires_grad) {
          double* g = in[0]->grad_buffer();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
        if (in[1]->requires_grad) {
          double* g = in[1]->grad_buffer();
          if (bias) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % cols] += o.grad[i];
          } else {
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
          }
        }
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result(
      "sub", a.shape(), std::move(out), {&a, &b},
      [](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
        if (in[0]->requires_grad) {
          double* g = in[0]->grad_buffer();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
        if (in[1]->requires_grad) {
          double* g = in[1]->grad_buffer();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
        }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result(
      "mul", a.shape(), std::move(out), {&a, &b},
      [](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
        TensorImpl& ai = *in[0];
        TensorImpl& bi = *in[1];
        if (ai.requires_grad) {
          double* g = ai.grad_buffer();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bi.data[i];
        }
        if (bi.requires_grad) {
          double* g = bi.grad_buffer();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * ai.data[i];
        }
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (b[i] == 0.0) {
      throw DomainError("div: zero divisor at index " + std::to_string(i));
    }
    out[i] = a[i] / b[i];
  }
  return make_result(
      "div", a.shape(), std::move(out), {&a, &b},
      [](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
        TensorImpl& ai = *in[0];
        TensorImpl& bi = *in[1];
        if (ai.requires_grad) {
          double* g = ai.grad_buffer();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] / bi.data[i];
        }
        if (bi.requires_grad) {
          double* g = bi.grad_buffer();
          for (std::size_t i = 0; i < o.grad.size(); ++i) {
            g[i] -= o.grad[i] * o.data[i] / bi.data[i];
          }
        }
      });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      "add_scalar", a, [value](double x) { return x + value; },
      [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  const auto x = a.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) {
      throw DomainError("log: non-positive argument " + std::to_string(x[i]) +
                        " at index " + std::to_string(i));
    }
  }
  return unary(
      "log", a, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& a) {
  return unary(
      "log_sigmoid", a,
      [](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) {
        // d/dx log sigmoid(x) = sigmoid(-x)
        if (x >= 0) {
          const double e = std::exp(-x);
          return e / (1.0 + e);
        }
        return 1.0 / (1.0 + std::exp(x));
      });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  require_same_shape("minimum", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a[i], b[i]);
  return make_result(
      "minimum", a.shape(), std::move(out), {&a, &b},
      [](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
        TensorImpl& ai = *in[0];
        TensorImpl& bi = *in[1];
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
          const bool take_a = ai.data[i] <= bi.data[i];
          TensorImpl& target = take_a ? ai : bi;
          if (target.requires_grad) target.grad_buffer()[i] += o.grad[i];
        }
      });
}

// ---- row-wise -----------------------------------------------------------

Tensor softmax(const Tensor& a) {
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = out.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      total += yr[c];
    }
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= total;
  }
  return make_result(
      "softmax", a.shape(), std::move(out), {&a},
      [rows, cols](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
        double* g = in[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = o.data.data() + r * cols;
          const double* dy = o.grad.data() + r * cols;
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
          for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (dy[c] - dot);
        }
      });
}

Tensor log_softmax(const Tensor& a) {
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = out.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(xr[c] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) yr[c] = xr[c] - lse;
  }
  return make_result(
      "log_softmax", a.shape(), std::move(out), {&a},
      [rows, cols](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
        double* g = in[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = o.data.data() + r * cols;
          const double* dy = o.grad.data() + r * cols;
          double total = 0.0;
          for (std::size_t c = 0; c < cols; ++c) total += dy[c];
          for (std::size_t c = 0; c < cols; ++c) {
            g[r * cols + c] += dy[c] - std::exp(y[c]) * total;
          }
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gain.rank() != 1 || gain.numel() != cols) dim_error("layer_norm", x.shape(), gain.shape());
  if (bias.rank() != 1 || bias.numel() != cols) dim_error("layer_norm", x.shape(), bias.shape());
  std::vector<double> out(x.numel());
  // Cached per-row normalized values and inverse std for the backward rule.
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * is;
      (*xhat)[r * cols + c] = h;
      out[r * cols + c] = h * gv[c] + bv[c];
    }
  }
  return make_result(
      "layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
      [rows, cols, xhat, inv_std](const TensorImpl& o,
                                  std::span<const std::shared_ptr<TensorImpl>> in) {
        TensorImpl& xi = *in[0];
        TensorImpl& gi = *in[1];
        TensorImpl& bi = *in[2];
        const double n = static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = o.grad.data() + r * cols;
          const double* h = xhat->data() + r * cols;
          if (gi.requires_grad) {
            double* g = gi.grad_buffer();
            for (std::size_t c = 0; c < cols; ++c) g[c] += dy[c] * h[c];
          }
          if (bi.requires_grad) {
            double* g = bi.grad_buffer();
            for (std::size_t c = 0; c < cols; ++c) g[c] += dy[c];
          }
          if (xi.requires_grad) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
              const double dh = dy[c] * gi.data[c];
              mean_dh += dh;
              mean_dh_h += dh * h[c];
            }
            mean_dh /= n;
            mean_dh_h /= n;
            double* g = xi.grad_buffer() + r * cols;
            const double is = (*inv_std)[r];
            for (std::size_t c = 0; c < cols; ++c) {
              const double dh = dy[c] * gi.data[c];
              g[c] += is * (dh - mean_dh - h[c] * mean_dh_h);
            }
          }
        }
      });
}

Tensor causal_mask(const Tensor& scores) {
  if (scores.rank() != 2 || scores.shape()[0] != scores.shape()[1]) {
    dim_error("causal_mask", scores.shape());
  }
  const std::size_t n = scores.shape()[0];
  std::vector<double> out(scores.data().begin(), scores.data().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      out[i * n + j] = -std::numeric_limits<double>::infinity();
  return make_result(
      "causal_mask", scores.shape(), std::move(out), {&scores},
      [n](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
        double* g = in[0]->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j <= i; ++j) g[i * n + j] += o.grad[i * n + j];
      });
}

// ---- indexing -----------------------------------------------------------

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) dim_error("embedding", table.shape());
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::vector<double> out(ids.size() * d);
  const auto w = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw VocabularyError("embedding: id " + std::to_string(ids[i]) +
                            " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(w.data() + ids[i] * d, d, out.data() + i * d);
  }
  std::vector<int> id_copy(ids.begin(), ids.end());
  return make_result(
      "embedding", {ids.size(), d}, std::move(out), {&table},
      [d, id_copy = std::move(id_copy)](const TensorImpl& o,
                                        std::span<const std::shared_ptr<TensorImpl>> in) {
        double* g = in[0]->grad_buffer();
        for (std::size_t i = 0; i < id_copy.size(); ++i) {
          for (std::size_t c = 0; c < d; ++c) g[id_copy[i] * d + c] += o.grad[i * d + c];
        }
      });
}

Tensor pick(const Tensor& a, std::span<const int> index) {
  const std::size_t rows = a.rows(), cols = a.cols();
  if (index.size() != rows) {
    throw DimensionError("pick: " + std::to_string(index.size()) +
                         " indices for " + std::to_string(rows) + " rows of " +
                         to_string(a.shape()));
  }
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= cols) {
      throw DimensionError("pick: index " + std::to_string(index[r]) +
                           " outside " + std::to_string(cols) + " columns");
    }
    out[r] = a.data()[r * cols + index[r]];
  }
  std::vector<int> idx(index.begin(), index.end());
  return make_result(
      "pick", {rows}, std::move(out), {&a},
      [cols, idx = std::move(idx)](const TensorImpl& o,
                                   std::span<const std::shared_ptr<TensorImpl>> in) {
        double* g = in[0]->grad_buffer();
        for (std::size_t r = 0; r < idx.size(); ++r) g[r * cols + idx[r]] += o.grad[r];
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  const std::size_t rows = logits.rows(), cols = logits.cols();
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + to_string(logits.shape()));
  }
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  double loss = 0.0;
  const auto x = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= cols) {
      throw VocabularyError("cross_entropy: target " + std::to_string(targets[r]) +
                            " outside " + std::to_string(cols) + " classes");
    }
    const double* xr = x.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(xr[c] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) (*probs)[r * cols + c] = std::exp(xr[c] - lse);
    loss -= xr[targets[r]] - lse;
  }
  loss /= static_cast<double>(rows);
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result(
      "cross_entropy", {1}, {loss}, {&logits},
      [rows, cols, probs, tg = std::move(tg)](const TensorImpl& o,
                                             std::span<const std::shared_ptr<TensorImpl>> in) {
        double* g = in[0]->grad_buffer();
        const double s = o.grad[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += s * (*probs)[r * cols + c];
          g[r * cols + tg[r]] -= s;
        }
      });
}

// ---- reductions ---------------------------------------------------------

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result(
      "sum", {1}, {total}, {&a},
      [](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
        double* g = in[0]->grad_buffer();
        for (std::size_t i = 0; i < in[0]->data.size(); ++i) g[i] += o.grad[0];
      });
}

Tensor mean(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  const double n = static_cast<double>(a.numel());
  return make_result(
      "mean", {1}, {total / n}, {&a},
      [n](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
        double* g = in[0]->grad_buffer();
        for (std::size_t i = 0; i < in[0]->data.size(); ++i) g[i] += o.grad[0] / n;
      });
}

Tensor sum_rows(const Tensor& a) {
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r] += a.data()[r * cols + c];
  return make_result(
      "sum_rows", {rows}, std::move(out), {&a},
      [rows, cols](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
        double* g = in[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += o.grad[r];
      });
}

// ---- structural ---------------------------------------------------------

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  if (axis > 1) throw DimensionError("concat: axis must be 0 or 1");
  const Tensor& first = parts.front();
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  if (axis == 0) {
    // Stack along the leading axis: trailing shape must agree.
    Shape tail(first.shape().begin() + 1, first.shape().end());
    std::size_t lead = 0;
    std::vector<double> out;
    for (const Tensor& p : parts) {
      Shape pt(p.shape().begin() + 1, p.shape().end());
      if (pt != tail) dim_error("concat", first.shape(), p.shape());
      lead += p.shape()[0];
      out.insert(out.end(), p.data().begin(), p.data().end());
    }
    Shape shape = first.shape();
    shape[0] = lead;
    return make_result(
        "concat", std::move(shape), std::move(out), inputs,
        [](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
          std::size_t offset = 0;
          for (const auto& p : in) {
            if (p->requires_grad) {
              double* g = p->grad_buffer();
              for (std::size_t i = 0; i < p->data.size(); ++i) g[i] += o.grad[offset + i];
            }
            offset += p->data.size();
          }
        });
  }
  if (first.rank() != 2) dim_error("concat", first.shape());
  const std::size_t rows = first.shape()[0];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.shape()[0] != rows) dim_error("concat", first.shape(), p.shape());
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  std::vector<double> out(rows * total);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(src.data() + r * widths[k], widths[k], out.data() + r * total + col);
    }
    col += widths[k];
  }
  return make_result(
      "concat", {rows, total}, std::move(out), inputs,
      [rows, total, widths](const TensorImpl& o,
                            std::span<const std::shared_ptr<TensorImpl>> in) {
        std::size_t col = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          if (in[k]->requires_grad) {
            double* g = in[k]->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < widths[k]; ++c)
                g[r * widths[k] + c] += o.grad[r * total + col + c];
          }
          col += widths[k];
        }
      });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin,
             std::size_t end) {
  if (axis > 1) throw DimensionError("slice: axis must be 0 or 1");
  const bool rows_axis = axis == 0;
  const std::size_t extent = rows_axis ? a.shape()[0] : a.cols();
  if (begin >= end || end > extent) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for shape " +
                         to_string(a.shape()));
  }
  if (rows_axis) {
    const std::size_t stride = a.numel() / a.shape()[0];
    std::vector<double> out(a.data().begin() + begin * stride,
                            a.data().begin() + end * stride);
    Shape shape = a.shape();
    shape[0] = end - begin;
    return make_result(
        "slice", std::move(shape), std::move(out), {&a},
        [offset = begin * stride](const TensorImpl& o,
                                  std::span<const std::shared_ptr<TensorImpl>> in) {
          double* g = in[0]->grad_buffer() + offset;
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        });
  }
  if (a.rank() != 2) dim_error("slice", a.shape());
  const std::size_t rows = a.shape()[0], cols = a.shape()[1], w = end - begin;
  std::vector<double> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * cols + begin, w, out.data() + r * w);
  }
  return make_result(
      "slice", {rows, w}, std::move(out), {&a},
      [rows, cols, w, begin](const TensorImpl& o,
                             std::span<const std::shared_ptr<TensorImpl>> in) {
        double* g = in[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < w; ++c) g[r * cols + begin + c] += o.grad[r * w + c];
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (ad::numel(shape) != a.numel()) dim_error("reshape", a.shape(), shape);
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(
      "reshape", std::move(shape), std::move(out), {&a},
      [](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> in) {
        double* g = in[0]->grad_buffer();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
      });
}

}  // namespace persa::ad
