// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a graph node. Operations on tensors that
// require gradients record their inputs and a backward rule; `backward(loss)`
// orders the loss's ancestry topologically (the Tape) and replays the rules
// in reverse. Leaf tensors accumulate gradients across backward calls until
// `zero_grad()` drops the buffer.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace comodal {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  // Empty means "no gradient buffer".
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into input grads.
  std::function<void(Node&)> backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data().size(); }

  std::span<const double> data() const;
  // In-place access for optimizers and initializers. Does not touch the tape.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  bool is_leaf() const;
  const char* op() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Node identity, used by the tape and by tests checking shared computation.
  const detail::Node* id() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_op_result(Shape, std::vector<double>,
                               std::vector<std::shared_ptr<detail::Node>>,
                               const char*, std::function<void(detail::Node&)>);

  std::shared_ptr<detail::Node> node_;
};

// Builds the result of an operation. Inputs and the backward rule are only
// retained when gradient recording is enabled and some input requires grad.
Tensor make_op_result(Shape shape, std::vector<double> value,
                      std::vector<std::shared_ptr<detail::Node>> inputs,
                      const char* op,
                      std::function<void(detail::Node&)> backward);

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Topologically ordered ancestry of a root tensor. Every entry's inputs
/// precede it; only nodes that require grad are recorded.
class Tape {
 public:
  struct Entry {
    const char* op;
    std::vector<std::size_t> inputs;
  };

  static Tape record(const Tensor& root);

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  bool is_topological() const;

  // Seeds the root gradient with ones and runs every backward rule once,
  // in reverse order. Returns the number of rules invoked.
  std::size_t replay();

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  std::vector<Entry> entries_;
};

/// Populates gradient buffers of every requires-grad ancestor of `loss`.
/// Throws ContractError for a non-scalar or non-recorded loss.
void backward(const Tensor& loss);

// ---- element-wise --------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
/// Adds `bias[n]` along the trailing axis of `x[... x n]`.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
/// log(max(x, eps)); the gradient is zero where the clamp is active.
Tensor log_clamped(const Tensor& x, double eps);
Tensor abs(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---- linear algebra and layout ------------------------------------------

/// [m x k] x [k x n] -> [m x n], or batched [B x m x k] x [B x k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
/// Swaps the two trailing axes.
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length);

// ---- reductions ---------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axes(const Tensor& x, const std::vector<std::size_t>& axes);
/// Arithmetic mean over `axes`, which are removed from the shape.
Tensor mean_pool(const Tensor& x, const std::vector<std::size_t>& axes);

// ---- normalization ------------------------------------------------------

/// exp((z - max) / T) normalized along `axis`.
Tensor softmax_t(const Tensor& z, std::size_t axis, double temperature);
Tensor log_softmax_t(const Tensor& z, std::size_t axis, double temperature);
/// Normalizes the trailing axis, then applies gain and bias of that width.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// ---- specialised --------------------------------------------------------

/// Cross-correlation of x[c_in x L] (or [B x c_in x L]) with
/// kernels[c_out x c_in x k]; returns [c_out x L'] (or [B x c_out x L']).
Tensor conv1d(const Tensor& x, const Tensor& kernels, const Tensor& bias,
              std::size_t stride, std::size_t padding);
/// Row-wise cosine of a[B x d], b[B x d] with eps added to both norms.
Tensor row_cosine(const Tensor& a, const Tensor& b, double eps);
/// x[B x C] -> [B] holding x[i, labels[i]].
Tensor pick(const Tensor& x, std::span<const int> labels);

/// Same values, no tape ancestry. Gradients through the result never reach
/// the producers of `x`.
Tensor detach(const Tensor& x);

}  // namespace comodal
