// SPDX-License-Identifier: Apache-2.0
#include "comodal/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "comodal/error.hpp"

namespace comodal {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

thread_local bool g_grad_enabled = true;

double* grad_buffer(Node& n) {
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad.data();
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      to_string(a.shape()) + " vs " +
                                      to_string(b.shape()));
}

struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * shape[i];
  }
  return strides;
}

// Visits every multi-index of `shape` in row-major order, passing the flat
// index and the offset under `mapped` strides.
template <typename Fn>
void for_each_mapped(const Shape& shape, const std::vector<std::size_t>& mapped,
                     Fn&& fn) {
  const std::size_t total = numel(shape);
  const std::size_t rank = shape.size();
  std::vector<std::size_t> index(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    fn(flat, offset);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++index[ax];
      offset += mapped[ax];
      if (index[ax] < shape[ax]) break;
      offset -= mapped[ax] * shape[ax];
      index[ax] = 0;
    }
  }
}

template <typename F, typename D>
Tensor unary(const Tensor& x, const char* op, F&& forward, D&& derivative) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  return make_op_result(
      x.shape(), std::move(out), {x.node()}, op,
      [derivative](Node& self) {
        Node& a = *self.inputs[0];
        double* ga = grad_buffer(a);
        if (!ga) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          ga[i] += self.grad[i] * derivative(a.value[i], self.value[i]);
        }
      });
}

}  // namespace

// ---- Tensor -------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = comodal::numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " +
                                 to_string(shape));
  }
  if (comodal::numel(shape) != values.size()) {
    throw ShapeError("shape " + to_string(shape) + " needs " +
                     std::to_string(comodal::numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     to_string(s));
  }
  return s[axis];
}

std::span<const double> Tensor::data() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + to_string(shape()));
  }
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) {
    throw ShapeError("index rank mismatch for " + to_string(s));
  }
  std::size_t flat = 0, ax = 0;
  for (auto i : index) {
    if (i >= s[ax]) throw ShapeError("index out of range for " + to_string(s));
    flat = flat * s[ax] + i;
    ++ax;
  }
  return node_->value[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return !node_ || !node_->backward; }
const char* Tensor::op() const { return node_ ? node_->op : "undefined"; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }
}

Tensor make_op_result(Shape shape, std::vector<double> value,
                      std::vector<NodePtr> inputs, const char* op,
                      std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  const bool track =
      g_grad_enabled &&
      std::any_of(inputs.begin(), inputs.end(),
                  [](const NodePtr& n) { return n && n->requires_grad; });
  if (track) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- Tape ---------------------------------------------------------------

Tape Tape::record(const Tensor& root) {
  Tape tape;
  if (!root.defined() || !root.requires_grad()) return tape;
  std::unordered_map<const Node*, std::size_t> position;
  // Iterative post-order DFS: a node is emitted once all inputs are emitted.
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  std::unordered_map<const Node*, bool> seen;
  stack.emplace_back(root.node(), 0);
  seen[root.node().get()] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const NodePtr child = node->inputs[next++];
      if (child->requires_grad && !seen[child.get()]) {
        seen[child.get()] = true;
        stack.emplace_back(child, 0);
      }
      continue;
    }
    Entry entry{node->op, {}};
    for (const auto& in : node->inputs) {
      if (in->requires_grad) entry.inputs.push_back(position.at(in.get()));
    }
    position[node.get()] = tape.nodes_.size();
    tape.nodes_.push_back(node);
    tape.entries_.push_back(std::move(entry));
    stack.pop_back();
  }
  return tape;
}

bool Tape::is_topological() const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    for (auto in : entries_[i].inputs) {
      if (in >= i) return false;
    }
  }
  return true;
}

std::size_t Tape::replay() {
  if (nodes_.empty()) return 0;
  for (auto& n : nodes_) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  Node& root = *nodes_.back();
  double* g = grad_buffer(root);
  for (std::size_t i = 0; i < root.value.size(); ++i) g[i] += 1.0;
  std::size_t invoked = 0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = *nodes_[i];
    if (n.backward) {
      n.backward(n);
      ++invoked;
    }
  }
  // Intermediate buffers are scratch space; only leaves keep gradients.
  for (auto& n : nodes_) {
    if (n->backward) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
  return invoked;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        to_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward on a loss that is not tape-recorded");
  }
  Tape::record(loss).replay();
}

// ---- element-wise -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op_result(a.shape(), std::move(out), {a.node(), b.node()}, "add",
                        [](Node& self) {
                          for (int k = 0; k < 2; ++k) {
                            if (double* g = grad_buffer(*self.inputs[k])) {
                              for (std::size_t i = 0; i < self.grad.size(); ++i)
                                g[i] += self.grad[i];
                            }
                          }
                        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op_result(a.shape(), std::move(out), {a.node(), b.node()}, "sub",
                        [](Node& self) {
                          if (double* g = grad_buffer(*self.inputs[0]))
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              g[i] += self.grad[i];
                          if (double* g = grad_buffer(*self.inputs[1]))
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              g[i] -= self.grad[i];
                        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op_result(a.shape(), std::move(out), {a.node(), b.node()}, "mul",
                        [](Node& self) {
                          Node& a = *self.inputs[0];
                          Node& b = *self.inputs[1];
                          if (double* g = grad_buffer(a))
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              g[i] += self.grad[i] * b.value[i];
                          if (double* g = grad_buffer(b))
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              g[i] += self.grad[i] * a.value[i];
                        });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
  return make_op_result(
      a.shape(), std::move(out), {a.node(), b.node()}, "div", [](Node& self) {
        Node& a = *self.inputs[0];
        Node& b = *self.inputs[1];
        if (double* g = grad_buffer(a))
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            g[i] += self.grad[i] / b.value[i];
        if (double* g = grad_buffer(b))
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            g[i] -= self.grad[i] * a.value[i] / (b.value[i] * b.value[i]);
      });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require(x.rank() >= 1 && bias.rank() == 1 && bias.dim(0) == x.shape().back(),
          "add_bias: bias " + to_string(bias.shape()) +
              " does not match trailing axis of " + to_string(x.shape()));
  const std::size_t n = bias.dim(0);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.data()[i % n];
  return make_op_result(x.shape(), std::move(out), {x.node(), bias.node()},
                        "add_bias", [n](Node& self) {
                          if (double* g = grad_buffer(*self.inputs[0]))
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              g[i] += self.grad[i];
                          if (double* g = grad_buffer(*self.inputs[1]))
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              g[i % n] += self.grad[i];
                        });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, "add_scalar", [value](double v) { return v + value; },
      [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor log_clamped(const Tensor& x, double eps) {
  return unary(
      x, "log_clamped", [eps](double v) { return std::log(std::max(v, eps)); },
      [eps](double v, double) { return v > eps ? 1.0 / v : 0.0; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, "abs", [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

// ---- linear algebra and layout -------------------------------------------

namespace {

// c[m x n] += a[m x k] * b[k x n], with optional transposes expressed by
// strides so the backward rules can reuse it.
void gemm_acc(const double* a, std::size_t a_row, std::size_t a_col,
              const double* b, std::size_t b_row, std::size_t b_col, double* c,
              std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * a_row + p * a_col];
      if (av == 0.0) continue;
      const double* brow = b + p * b_row;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j * b_col];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool batched = a.rank() == 3 && b.rank() == 3;
  const bool plain = a.rank() == 2 && b.rank() == 2;
  if (!(batched || plain) || (batched && a.dim(0) != b.dim(0)) ||
      a.shape()[a.rank() - 1] != b.shape()[b.rank() - 2]) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  }
  const std::size_t batch = batched ? a.dim(0) : 1;
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape().back();
  const std::size_t n = b.shape().back();
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t s = 0; s < batch; ++s) {
    gemm_acc(a.data().data() + s * m * k, k, 1, b.data().data() + s * k * n, n,
             1, out.data() + s * m * n, m, k, n);
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return make_op_result(
      std::move(shape), std::move(out), {a.node(), b.node()}, "matmul",
      [batch, m, k, n](Node& self) {
        Node& a = *self.inputs[0];
        Node& b = *self.inputs[1];
        double* ga = grad_buffer(a);
        double* gb = grad_buffer(b);
        for (std::size_t s = 0; s < batch; ++s) {
          const double* dc = self.grad.data() + s * m * n;
          // dA = dC * B^T
          if (ga)
            gemm_acc(dc, n, 1, b.value.data() + s * k * n, 1, n, ga + s * m * k,
                     m, n, k);
          // dB = A^T * dC
          if (gb)
            gemm_acc(a.value.data() + s * m * k, 1, k, dc, n, 1, gb + s * k * n,
                     k, m, n);
        }
      });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const auto& in_shape = x.shape();
  require(order.size() == in_shape.size(),
          "permute: order rank mismatch for " + to_string(in_shape));
  std::vector<bool> used(order.size(), false);
  for (auto ax : order) {
    require(ax < order.size() && !used[ax], "permute: invalid axis order");
    used[ax] = true;
  }
  const auto in_strides = strides_of(in_shape);
  Shape out_shape(order.size());
  std::vector<std::size_t> mapped(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    out_shape[i] = in_shape[order[i]];
    mapped[i] = in_strides[order[i]];
  }
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for_each_mapped(out_shape, mapped,
                  [&](std::size_t flat, std::size_t src) { out[flat] = in[src]; });
  return make_op_result(out_shape, std::move(out), {x.node()}, "permute",
                        [out_shape, mapped](Node& self) {
                          double* g = grad_buffer(*self.inputs[0]);
                          if (!g) return;
                          for_each_mapped(out_shape, mapped,
                                          [&](std::size_t flat, std::size_t src) {
                                            g[src] += self.grad[flat];
                                          });
                        });
}

Tensor transpose(const Tensor& x) {
  require(x.rank() >= 2, "transpose needs rank >= 2, got " + to_string(x.shape()));
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[x.rank() - 1], order[x.rank() - 2]);
  return permute(x, order);
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.numel(), "reshape: cannot view " +
                                         to_string(x.shape()) + " as " +
                                         to_string(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op_result(std::move(shape), std::move(out), {x.node()}, "reshape",
                        [](Node& self) {
                          if (double* g = grad_buffer(*self.inputs[0]))
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              g[i] += self.grad[i];
                        });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), "concat: axis out of range for " + to_string(first));
  std::vector<std::size_t> lengths;
  std::vector<NodePtr> inputs;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = first;
    a[axis] = b[axis] = 0;
    require(a == b, "concat: incompatible shapes " + to_string(first) + " and " +
                        to_string(p.shape()));
    lengths.push_back(p.dim(axis));
    total += p.dim(axis);
    inputs.push_back(p.node());
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  const AxisSplit s = split_at(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto src = parts[p].data();
    const std::size_t block = lengths[p] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(src.begin() + o * block, block,
                  out.begin() + o * total * s.inner + offset * s.inner);
    }
    offset += lengths[p];
  }
  return make_op_result(
      std::move(out_shape), std::move(out), std::move(inputs), "concat",
      [lengths, s, total](Node& self) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < lengths.size(); ++p) {
          const std::size_t block = lengths[p] * s.inner;
          if (double* g = grad_buffer(*self.inputs[p])) {
            for (std::size_t o = 0; o < s.outer; ++o) {
              const double* src =
                  self.grad.data() + o * total * s.inner + offset * s.inner;
              for (std::size_t i = 0; i < block; ++i) g[o * block + i] += src[i];
            }
          }
          offset += lengths[p];
        }
      });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length) {
  require(axis < x.rank() && length > 0 && start + length <= x.dim(axis),
          "slice: range out of bounds for " + to_string(x.shape()));
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<double> out(numel(out_shape));
  const auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(in.begin() + (o * s.length + start) * s.inner, length * s.inner,
                out.begin() + o * length * s.inner);
  }
  return make_op_result(std::move(out_shape), std::move(out), {x.node()},
                        "slice", [s, start, length](Node& self) {
                          double* g = grad_buffer(*self.inputs[0]);
                          if (!g) return;
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            double* dst = g + (o * s.length + start) * s.inner;
                            const double* src =
                                self.grad.data() + o * length * s.inner;
                            for (std::size_t i = 0; i < length * s.inner; ++i)
                              dst[i] += src[i];
                          }
                        });
}

// ---- reductions ---------------------------------------------------------

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_op_result({}, {total}, {x.node()}, "sum", [](Node& self) {
    if (double* g = grad_buffer(*self.inputs[0]))
      for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i)
        g[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

namespace {

Tensor reduce_axes(const Tensor& x, const std::vector<std::size_t>& axes,
                   bool average, const char* op) {
  const auto& in_shape = x.shape();
  std::vector<bool> reduced(in_shape.size(), false);
  for (auto ax : axes) {
    require(ax < in_shape.size(), std::string(op) + ": axis " +
                                      std::to_string(ax) + " invalid for " +
                                      to_string(in_shape));
    require(!reduced[ax], std::string(op) + ": duplicate axis " +
                              std::to_string(ax));
    reduced[ax] = true;
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < in_shape.size(); ++i) {
    if (reduced[i]) count *= in_shape[i];
    else out_shape.push_back(in_shape[i]);
  }
  // Strides into the output for each input axis; reduced axes contribute 0.
  std::vector<std::size_t> mapped(in_shape.size(), 0);
  {
    const auto out_strides = strides_of(out_shape);
    std::size_t j = 0;
    for (std::size_t i = 0; i < in_shape.size(); ++i) {
      if (!reduced[i]) mapped[i] = out_strides[j++];
    }
  }
  const double factor = average ? 1.0 / static_cast<double>(count) : 1.0;
  std::vector<double> out(numel(out_shape), 0.0);
  const auto in = x.data();
  for_each_mapped(in_shape, mapped,
                  [&](std::size_t flat, std::size_t dst) { out[dst] += in[flat]; });
  for (auto& v : out) v *= factor;
  return make_op_result(std::move(out_shape), std::move(out), {x.node()}, op,
                        [in_shape, mapped, factor](Node& self) {
                          double* g = grad_buffer(*self.inputs[0]);
                          if (!g) return;
                          for_each_mapped(in_shape, mapped,
                                          [&](std::size_t flat, std::size_t dst) {
                                            g[flat] += factor * self.grad[dst];
                                          });
                        });
}

}  // namespace

Tensor sum_axes(const Tensor& x, const std::vector<std::size_t>& axes) {
  return reduce_axes(x, axes, false, "sum_axes");
}

Tensor mean_pool(const Tensor& x, const std::vector<std::size_t>& axes) {
  return reduce_axes(x, axes, true, "mean_pool");
}

// ---- normalization ------------------------------------------------------

namespace {

void check_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("temperature must be positive, got " +
                         std::to_string(temperature));
  }
}

}  // namespace

Tensor softmax_t(const Tensor& z, std::size_t axis, double temperature) {
  check_temperature(temperature);
  require(axis < z.rank(), "softmax_t: axis out of range for " + to_string(z.shape()));
  const AxisSplit s = split_at(z.shape(), axis);
  std::vector<double> out(z.numel());
  const auto in = z.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.length * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.length; ++l) mx = std::max(mx, in[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.length; ++l) {
        const double e = std::exp((in[base + l * s.inner] - mx) / temperature);
        out[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.length; ++l) out[base + l * s.inner] /= total;
    }
  }
  return make_op_result(
      z.shape(), std::move(out), {z.node()}, "softmax_t",
      [s, temperature](Node& self) {
        double* g = grad_buffer(*self.inputs[0]);
        if (!g) return;
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.length * s.inner + i;
            double dot = 0.0;
            for (std::size_t l = 0; l < s.length; ++l) {
              const std::size_t at = base + l * s.inner;
              dot += self.grad[at] * self.value[at];
            }
            for (std::size_t l = 0; l < s.length; ++l) {
              const std::size_t at = base + l * s.inner;
              g[at] += self.value[at] * (self.grad[at] - dot) / temperature;
            }
          }
        }
      });
}

Tensor log_softmax_t(const Tensor& z, std::size_t axis, double temperature) {
  check_temperature(temperature);
  require(axis < z.rank(), "log_softmax_t: axis out of range for " + to_string(z.shape()));
  const AxisSplit s = split_at(z.shape(), axis);
  std::vector<double> out(z.numel());
  const auto in = z.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.length * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.length; ++l) mx = std::max(mx, in[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.length; ++l)
        total += std::exp((in[base + l * s.inner] - mx) / temperature);
      const double lse = std::log(total);
      for (std::size_t l = 0; l < s.length; ++l) {
        const std::size_t at = base + l * s.inner;
        out[at] = (in[at] - mx) / temperature - lse;
      }
    }
  }
  return make_op_result(
      z.shape(), std::move(out), {z.node()}, "log_softmax_t",
      [s, temperature](Node& self) {
        double* g = grad_buffer(*self.inputs[0]);
        if (!g) return;
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.length * s.inner + i;
            double total = 0.0;
            for (std::size_t l = 0; l < s.length; ++l) total += self.grad[base + l * s.inner];
            for (std::size_t l = 0; l < s.length; ++l) {
              const std::size_t at = base + l * s.inner;
              g[at] += (self.grad[at] - std::exp(self.value[at]) * total) / temperature;
            }
          }
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  require(x.rank() >= 1 && gain.rank() == 1 && bias.rank() == 1 &&
              gain.dim(0) == x.shape().back() && bias.dim(0) == x.shape().back(),
          "layer_norm: gain/bias do not match trailing axis of " +
              to_string(x.shape()));
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel()), xhat(x.numel()), inv_std(rows);
  const auto in = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (row[j] - mu) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * gv[j] + bv[j];
    }
  }
  return make_op_result(
      x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      "layer_norm",
      [n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& gain = *self.inputs[1];
        double* gx = grad_buffer(*self.inputs[0]);
        double* gg = grad_buffer(gain);
        double* gb = grad_buffer(*self.inputs[2]);
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = self.grad.data() + r * n;
          const double* xh = xhat.data() + r * n;
          if (gg)
            for (std::size_t j = 0; j < n; ++j) gg[j] += dy[j] * xh[j];
          if (gb)
            for (std::size_t j = 0; j < n; ++j) gb[j] += dy[j];
          if (gx) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = dy[j] * gain.value[j];
              mean_d += d;
              mean_dx += d * xh[j];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = dy[j] * gain.value[j];
              gx[r * n + j] += inv_std[r] * (d - mean_d - xh[j] * mean_dx);
            }
          }
        }
      });
}

// ---- specialised --------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& kernels, const Tensor& bias,
              std::size_t stride, std::size_t padding) {
  require(x.rank() == 2 || x.rank() == 3,
          "conv1d: input must be [c_in x L] or [B x c_in x L], got " +
              to_string(x.shape()));
  require(kernels.rank() == 3, "conv1d: kernels must be [c_out x c_in x k]");
  if (stride == 0) throw ParameterError("conv1d: stride must be positive");
  const bool batched = x.rank() == 3;
  const std::size_t batch = batched ? x.dim(0) : 1;
  const std::size_t c_in = x.shape()[x.rank() - 2];
  const std::size_t length = x.shape().back();
  const std::size_t c_out = kernels.dim(0);
  const std::size_t k = kernels.dim(2);
  require(kernels.dim(1) == c_in, "conv1d: kernels " + to_string(kernels.shape()) +
                                      " do not match input " + to_string(x.shape()));
  require(bias.rank() == 1 && bias.dim(0) == c_out,
          "conv1d: bias must be [c_out]");
  require(length + 2 * padding >= k, "conv1d: input length " +
                                         std::to_string(length) + " with padding " +
                                         std::to_string(padding) +
                                         " is shorter than kernel " +
                                         std::to_string(k));
  const std::size_t out_len = (length + 2 * padding - k) / stride + 1;
  std::vector<double> out(batch * c_out * out_len);
  const auto in = x.data();
  const auto w = kernels.data();
  const auto bv = bias.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < c_out; ++o) {
      for (std::size_t t = 0; t < out_len; ++t) {
        double acc = bv[o];
        for (std::size_t c = 0; c < c_in; ++c) {
          for (std::size_t j = 0; j < k; ++j) {
            const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * stride + j) -
                                       static_cast<std::ptrdiff_t>(padding);
            if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(length)) continue;
            acc += w[(o * c_in + c) * k + j] * in[(b * c_in + c) * length + pos];
          }
        }
        out[(b * c_out + o) * out_len + t] = acc;
      }
    }
  }
  Shape shape = batched ? Shape{batch, c_out, out_len} : Shape{c_out, out_len};
  return make_op_result(
      std::move(shape), std::move(out), {x.node(), kernels.node(), bias.node()},
      "conv1d",
      [=](Node& self) {
        Node& x = *self.inputs[0];
        Node& w = *self.inputs[1];
        double* gx = grad_buffer(x);
        double* gw = grad_buffer(w);
        double* gb = grad_buffer(*self.inputs[2]);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t o = 0; o < c_out; ++o) {
            for (std::size_t t = 0; t < out_len; ++t) {
              const double dy = self.grad[(b * c_out + o) * out_len + t];
              if (gb) gb[o] += dy;
              for (std::size_t c = 0; c < c_in; ++c) {
                for (std::size_t j = 0; j < k; ++j) {
                  const std::ptrdiff_t pos =
                      static_cast<std::ptrdiff_t>(t * stride + j) -
                      static_cast<std::ptrdiff_t>(padding);
                  if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(length)) continue;
                  const std::size_t xi = (b * c_in + c) * length + pos;
                  const std::size_t wi = (o * c_in + c) * k + j;
                  if (gw) gw[wi] += dy * x.value[xi];
                  if (gx) gx[xi] += dy * w.value[wi];
                }
              }
            }
          }
        }
      });
}

Tensor row_cosine(const Tensor& a, const Tensor& b, double eps) {
  require_same_shape(a, b, "row_cosine");
  require(a.rank() == 2, "row_cosine: inputs must be [B x d], got " +
                             to_string(a.shape()));
  const std::size_t rows = a.dim(0), d = a.dim(1);
  std::vector<double> out(rows), dots(rows), na(rows), nb(rows);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0, sa = 0, sb = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += av[r * d + j] * bv[r * d + j];
      sa += av[r * d + j] * av[r * d + j];
      sb += bv[r * d + j] * bv[r * d + j];
    }
    dots[r] = dot;
    na[r] = std::sqrt(sa);
    nb[r] = std::sqrt(sb);
    out[r] = dot / ((na[r] + eps) * (nb[r] + eps));
  }
  return make_op_result(
      {rows}, std::move(out), {a.node(), b.node()}, "row_cosine",
      [=](Node& self) {
        Node& a = *self.inputs[0];
        Node& b = *self.inputs[1];
        double* ga = grad_buffer(a);
        double* gb = grad_buffer(b);
        for (std::size_t r = 0; r < rows; ++r) {
          const double g = self.grad[r];
          const double denom = (na[r] + eps) * (nb[r] + eps);
          for (std::size_t j = 0; j < d; ++j) {
            const double aj = a.value[r * d + j], bj = b.value[r * d + j];
            if (ga) {
              double dn = na[r] > 0 ? aj / na[r] : 0.0;
              ga[r * d + j] += g * (bj / denom - dots[r] * dn /
                                                     ((na[r] + eps) * denom));
            }
            if (gb) {
              double dn = nb[r] > 0 ? bj / nb[r] : 0.0;
              gb[r * d + j] += g * (aj / denom - dots[r] * dn /
                                                     ((nb[r] + eps) * denom));
            }
          }
        }
      });
}

Tensor pick(const Tensor& x, std::span<const int> labels) {
  require(x.rank() == 2 && x.dim(0) == labels.size(),
          "pick: expected [B x C] with B = " + std::to_string(labels.size()) +
              ", got " + to_string(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<std::size_t> index(rows);
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= cols) {
      throw ContractError("label " + std::to_string(labels[r]) +
                          " outside [0, " + std::to_string(cols) + ")");
    }
    index[r] = r * cols + static_cast<std::size_t>(labels[r]);
    out[r] = x.data()[index[r]];
  }
  return make_op_result({rows}, std::move(out), {x.node()}, "pick",
                        [index](Node& self) {
                          if (double* g = grad_buffer(*self.inputs[0]))
                            for (std::size_t r = 0; r < index.size(); ++r)
                              g[index[r]] += self.grad[r];
                        });
}

Tensor detach(const Tensor& x) {
  return Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
}

}  // namespace comodal
