// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with a reverse-mode gradient graph.
//
// A Tensor is a cheap handle onto shared storage. Operations build new
// tensors; when any input requires a gradient (and grad mode is on), the
// output records a node holding its inputs and a backward closure. backward()
// replays those nodes in reverse topological order.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tips/error.hpp"

namespace tips {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
struct Node;
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access; only valid for leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  bool is_leaf() const;

  // Deep copy of the values as a new leaf.
  Tensor detach() const;

  const detail::TensorImpl* impl() const { return impl_.get(); }
  detail::TensorImpl* impl() { return impl_.get(); }

 private:
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(detail::TensorImpl&)>);
  friend class GradTape;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

struct Node {
  std::vector<Tensor> inputs;
  // Reads out.grad and accumulates into the inputs that require a gradient.
  std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::unique_ptr<Node> node;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Builds an op result. If grad mode is on and any input requires a gradient,
// the result gets a node with the given backward closure.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(detail::TensorImpl& out)> backward);

// Accumulation target for an input inside a backward closure, or nullptr
// when that input does not need a gradient.
double* grad_target(const Tensor& input);

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Reverse topological ordering of the graph reachable from a root.
class GradTape {
 public:
  explicit GradTape(const Tensor& root);
  std::size_t size() const { return order_.size(); }
  // Nodes in the order backward visits them (root first).
  const std::vector<detail::TensorImpl*>& order() const { return order_; }
  void run();

 private:
  std::vector<detail::TensorImpl*> order_;
};

// Populates grad buffers of every leaf reachable from a scalar loss.
// Leaf gradients accumulate across calls until zero_grad().
void backward(const Tensor& loss);

// --- operations -----------------------------------------------------------

// a[..., m, k] x b[k, n] (b shared over a's leading dims), or
// a[..., m, k] x b[..., k, n] with identical leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise with b either the same shape as a or a trailing suffix of a's
// shape (broadcast over a's leading dims).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

// Stable softmax over the last dimension. -inf entries map to exactly 0.
Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_lastdim(const Tensor& x);

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor log(const Tensor& x);

Tensor transpose(const Tensor& x, std::size_t dim0, std::size_t dim1);
Tensor reshape(const Tensor& x, Shape shape);

// x[S, T, F] -> [S, T', p*F] with T' = (T - p) / s + 1. Window t' holds time
// steps [t'*s, t'*s + p) concatenated feature-major per step.
Tensor unfold(const Tensor& x, std::size_t patch, std::size_t stride);

// out[i] = table[indices[i]], reshaped to `shape`.
Tensor gather(const Tensor& table, std::span<const std::size_t> indices, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Mean over one axis; that axis is removed.
Tensor mean_dim(const Tensor& x, std::size_t axis);

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

// True when shapes match and every value has identical bits.
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace tips
