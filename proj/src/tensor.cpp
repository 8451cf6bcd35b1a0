// SPDX-License-Identifier: Apache-2.0
#include "tips/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

namespace tips {

namespace {

thread_local bool g_grad_enabled = true;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::shared_ptr<detail::TensorImpl> new_impl(Shape shape, std::vector<double> values,
                                             bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return impl;
}

// Number of leading elements `a` repeats `b` over, when b is a suffix of a.
std::size_t broadcast_repeats(const Tensor& a, const Tensor& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool suffix = sb.size() <= sa.size() &&
                std::equal(sb.begin(), sb.end(), sa.end() - static_cast<std::ptrdiff_t>(sb.size()));
  if (!suffix) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " +
                     shape_str(sa));
  }
  std::size_t nb = shape_numel(sb);
  return nb == 0 ? 0 : a.numel() / nb;
}

// Calls f(i, j) for every flat index i of `a` with j = i mod nb, without division.
template <typename F>
void for_broadcast(std::size_t n, std::size_t nb, F&& f) {
  if (nb == 0) return;
  for (std::size_t base = 0; base < n; base += nb) {
    for (std::size_t j = 0; j < nb; ++j) f(base + j, j);
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// --- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(new_impl(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(new_impl(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(new_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_impl({}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) { impl_->requires_grad = flag; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::mutable_grad() { return impl_->ensure_grad(); }

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

bool Tensor::is_leaf() const { return impl_->node == nullptr; }

Tensor Tensor::detach() const { return Tensor::from(shape(), impl_->data, false); }

// --- graph ----------------------------------------------------------------

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(detail::TensorImpl&)> backward_fn) {
  bool track = g_grad_enabled &&
               std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
  auto impl = new_impl(std::move(shape), std::move(values), track);
  if (track) {
    impl->node = std::make_unique<detail::Node>();
    impl->node->inputs = std::move(inputs);
    impl->node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(impl));
}

double* grad_target(const Tensor& input) {
  auto* impl = const_cast<detail::TensorImpl*>(input.impl());
  if (!impl->requires_grad) return nullptr;
  return impl->ensure_grad().data();
}

GradTape::GradTape(const Tensor& root) {
  // Iterative post-order DFS; reversing it gives root-first topological order.
  std::vector<detail::TensorImpl*> post;
  std::unordered_set<const detail::TensorImpl*> seen;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  auto* start = const_cast<detail::TensorImpl*>(root.impl());
  stack.emplace_back(start, 0);
  seen.insert(start);
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      auto* child = impl->node->inputs[next++].impl();
      if (child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(const_cast<detail::TensorImpl*>(child), 0);
      }
      continue;
    }
    post.push_back(impl);
    stack.pop_back();
  }
  order_.assign(post.rbegin(), post.rend());
}

void GradTape::run() {
  for (auto* impl : order_) {
    if (impl->node) impl->node->backward(*impl);
  }
  // Interior gradients are scratch space; only leaves keep theirs.
  for (auto* impl : order_) {
    if (impl->node) {
      impl->grad.clear();
      impl->grad.shrink_to_fit();
    }
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw Error("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw Error("backward: loss is not connected to any parameter requiring a gradient");
  }
  GradTape tape(loss);
  for (auto* impl : tape.order()) {
    if (impl->node) impl->grad.assign(impl->data.size(), 0.0);
  }
  auto* root = const_cast<detail::TensorImpl*>(loss.impl());
  root->ensure_grad()[0] += 1.0;
  tape.run();
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

// --- matmul ---------------------------------------------------------------

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// c[m x n] += a[m x k] * b[k x n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  MutMap(c, M, N).noalias() += ConstMap(a, M, K) * ConstMap(b, K, N);
}

// ga[m x k] += gc[m x n] * b^T
void gemm_grad_a(const double* gc, const double* b, double* ga, std::size_t m, std::size_t k,
                 std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  MutMap(ga, M, K).noalias() += ConstMap(gc, M, N) * ConstMap(b, K, N).transpose();
}

// gb[k x n] += a^T * gc[m x n]
void gemm_grad_b(const double* a, const double* gc, double* gb, std::size_t m, std::size_t k,
                 std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  MutMap(gb, K, N).noalias() += ConstMap(a, M, K).transpose() * ConstMap(gc, M, N);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] {
    return ShapeError("matmul: shape mismatch between " + shape_str(sa) + " and " +
                      shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  if (sb[sb.size() - 2] != k) throw mismatch();
  const std::size_t n = sb.back();

  std::size_t batches = 1;
  bool shared_b = sb.size() == 2;
  if (shared_b) {
    // Fold a's leading dims into rows.
    batches = 1;
  } else {
    if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
      throw mismatch();
    }
    batches = shape_numel(Shape(sa.begin(), sa.end() - 2));
  }
  const std::size_t rows = shared_b ? a.numel() / k : m;

  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(shape_numel(out_shape), 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  if (shared_b) {
    gemm_acc(ad, bd, out.data(), rows, k, n);
  } else {
    for (std::size_t bi = 0; bi < batches; ++bi) {
      gemm_acc(ad + bi * m * k, bd + bi * k * n, out.data() + bi * m * n, m, k, n);
    }
  }
  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [a, b, shared_b, batches, rows, m, k, n](detail::TensorImpl& o) {
                       const double* gc = o.grad.data();
                       const double* ad = a.data().data();
                       const double* bd = b.data().data();
                       double* ga = grad_target(a);
                       double* gb = grad_target(b);
                       if (shared_b) {
                         if (ga) gemm_grad_a(gc, bd, ga, rows, k, n);
                         if (gb) gemm_grad_b(ad, gc, gb, rows, k, n);
                         return;
                       }
                       for (std::size_t bi = 0; bi < batches; ++bi) {
                         if (ga) gemm_grad_a(gc + bi * m * n, bd + bi * k * n, ga + bi * m * k, m, k, n);
                         if (gb) gemm_grad_b(ad + bi * m * k, gc + bi * m * n, gb + bi * k * n, m, k, n);
                       }
                     });
}

// --- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t nb = b.numel();
  broadcast_repeats(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  const double* bd = b.data().data();
  for_broadcast(out.size(), nb, [&](std::size_t i, std::size_t j) { out[i] += bd[j]; });
  return make_result(a.shape(), std::move(out), {a, b}, [a, b, nb](detail::TensorImpl& o) {
    const double* g = o.grad.data();
    if (double* ga = grad_target(a)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i];
    }
    if (double* gb = grad_target(b)) {
      for_broadcast(o.grad.size(), nb, [&](std::size_t i, std::size_t j) { gb[j] += g[i]; });
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const std::size_t nb = b.numel();
  broadcast_repeats(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  const double* bd = b.data().data();
  for_broadcast(out.size(), nb, [&](std::size_t i, std::size_t j) { out[i] -= bd[j]; });
  return make_result(a.shape(), std::move(out), {a, b}, [a, b, nb](detail::TensorImpl& o) {
    const double* g = o.grad.data();
    if (double* ga = grad_target(a)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i];
    }
    if (double* gb = grad_target(b)) {
      for_broadcast(o.grad.size(), nb, [&](std::size_t i, std::size_t j) { gb[j] -= g[i]; });
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t nb = b.numel();
  broadcast_repeats(a, b, "mul");
  std::vector<double> out(a.data().begin(), a.data().end());
  const double* bd = b.data().data();
  for_broadcast(out.size(), nb, [&](std::size_t i, std::size_t j) { out[i] *= bd[j]; });
  return make_result(a.shape(), std::move(out), {a, b}, [a, b, nb](detail::TensorImpl& o) {
    const double* g = o.grad.data();
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    if (double* ga = grad_target(a)) {
      for_broadcast(o.grad.size(), nb, [&](std::size_t i, std::size_t j) { ga[i] += g[i] * bd[j]; });
    }
    if (double* gb = grad_target(b)) {
      for_broadcast(o.grad.size(), nb, [&](std::size_t i, std::size_t j) { gb[j] += g[i] * ad[i]; });
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), {a}, [a, factor](detail::TensorImpl& o) {
    if (double* ga = grad_target(a)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += factor * o.grad[i];
    }
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += value;
  return make_result(a.shape(), std::move(out), {a}, [a](detail::TensorImpl& o) {
    if (double* ga = grad_target(a)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
    }
  });
}

// --- softmax --------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw ShapeError("softmax_lastdim: last dimension must be >= 1, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const double* xd = x.data().data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd + r * n;
    double* y = out.data() + r * n;
    double mx = kNegInf;
    for (std::size_t j = 0; j < n; ++j) {
      if (row[j] > mx) mx = row[j];
    }
    if (mx == kNegInf) throw DegenerateRowError(r);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = row[j] == kNegInf ? 0.0 : std::exp(row[j] - mx);
      total += y[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
  }
  return make_result(x.shape(), std::move(out), {x}, [x, n, rows](detail::TensorImpl& o) {
    double* gx = grad_target(x);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = o.data.data() + r * n;
      const double* g = o.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw ShapeError("log_softmax_lastdim: last dimension must be >= 1, got " +
                     shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const double* xd = x.data().data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd + r * n;
    double mx = kNegInf;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
    if (mx == kNegInf) throw DegenerateRowError(r);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (row[j] != kNegInf) total += std::exp(row[j] - mx);
    }
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = row[j] - lse;
  }
  return make_result(x.shape(), std::move(out), {x}, [x, n, rows](detail::TensorImpl& o) {
    double* gx = grad_target(x);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* ly = o.data.data() + r * n;
      const double* g = o.grad.data() + r * n;
      double gsum = 0.0;
      for (std::size_t j = 0; j < n; ++j) gsum += g[j];
      for (std::size_t j = 0; j < n; ++j) {
        if (ly[j] == kNegInf) continue;
        gx[r * n + j] += g[j] - std::exp(ly[j]) * gsum;
      }
    }
  });
}

// --- layernorm ------------------------------------------------------------

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw ShapeError("layernorm on a scalar");
  const std::size_t n = x.shape().back();
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw ShapeError("layernorm: gamma " + shape_str(gamma.shape()) + " / beta " +
                     shape_str(beta.shape()) + " must match last dim of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const double* xd = x.data().data();
  const double* gd = gamma.data().data();
  const double* bd = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * inv_std[r];
      xhat[r * n + j] = h;
      out[r * n + j] = gd[j] * h + bd[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, rows, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](detail::TensorImpl& o) {
        double* gx = grad_target(x);
        double* gg = grad_target(gamma);
        double* gb = grad_target(beta);
        const double* gd = gamma.data().data();
        std::vector<double> gh(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = o.grad.data() + r * n;
          const double* h = xhat.data() + r * n;
          if (gg) {
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[j] * h[j];
          }
          if (gb) {
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[j];
          }
          if (!gx) continue;
          double mean_gh = 0.0;
          double mean_ghh = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            gh[j] = g[j] * gd[j];
            mean_gh += gh[j];
            mean_ghh += gh[j] * h[j];
          }
          mean_gh /= static_cast<double>(n);
          mean_ghh /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            gx[r * n + j] += inv_std[r] * (gh[j] - mean_gh - h[j] * mean_ghh);
          }
        }
      });
}

// --- activations ----------------------------------------------------------

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_result(x.shape(), std::move(out), {x}, [x](detail::TensorImpl& o) {
    double* gx = grad_target(x);
    if (!gx) return;
    const double* xd = x.data().data();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (xd[i] > 0.0) gx[i] += o.grad[i];
    }
  });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  std::vector<double> out(x.numel());
  const double* xd = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * kInvSqrt2));
  }
  return make_result(x.shape(), std::move(out), {x}, [x](detail::TensorImpl& o) {
    double* gx = grad_target(x);
    if (!gx) return;
    const double* xd = x.data().data();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const double v = xd[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      gx[i] += o.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor log(const Tensor& x) {
  std::vector<double> out(x.numel());
  const double* xd = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(xd[i]);
  return make_result(x.shape(), std::move(out), {x}, [x](detail::TensorImpl& o) {
    double* gx = grad_target(x);
    if (!gx) return;
    const double* xd = x.data().data();
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] / xd[i];
  });
}

// --- layout ---------------------------------------------------------------

namespace {

// Maps each output flat index to its source flat index for a dim swap.
std::vector<std::size_t> transpose_index(const Shape& in, std::size_t d0, std::size_t d1) {
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out = in;
  std::swap(out[d0], out[d1]);
  std::vector<std::size_t> src_stride = in_stride;
  std::swap(src_stride[d0], src_stride[d1]);

  std::vector<std::size_t> map(shape_numel(in));
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    map[flat] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      src += src_stride[ax];
      if (idx[ax] < out[ax]) break;
      src -= src_stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor transpose(const Tensor& x, std::size_t dim0, std::size_t dim1) {
  if (dim0 >= x.rank() || dim1 >= x.rank()) {
    throw ShapeError("transpose: dims " + std::to_string(dim0) + "," + std::to_string(dim1) +
                     " out of range for " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  std::swap(out_shape[dim0], out_shape[dim1]);
  if (dim0 == dim1) return reshape(x, out_shape);
  auto map = transpose_index(x.shape(), dim0, dim1);
  std::vector<double> out(x.numel());
  const double* xd = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[map[i]];
  return make_result(std::move(out_shape), std::move(out), {x},
                     [x, map = std::move(map)](detail::TensorImpl& o) {
                       double* gx = grad_target(x);
                       if (!gx) return;
                       for (std::size_t i = 0; i < o.grad.size(); ++i) gx[map[i]] += o.grad[i];
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [x](detail::TensorImpl& o) {
    if (double* gx = grad_target(x)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
    }
  });
}

Tensor unfold(const Tensor& x, std::size_t patch, std::size_t stride) {
  if (x.rank() != 3) throw ShapeError("unfold expects [S,T,F], got " + shape_str(x.shape()));
  const std::size_t stocks = x.dim(0);
  const std::size_t steps = x.dim(1);
  const std::size_t feats = x.dim(2);
  if (patch == 0 || stride == 0) throw ShapeError("unfold: patch and stride must be >= 1");
  if (patch > steps) {
    throw ShapeError("unfold: patch length " + std::to_string(patch) +
                     " exceeds sequence length " + std::to_string(steps));
  }
  const std::size_t windows = (steps - patch) / stride + 1;
  const std::size_t width = patch * feats;
  std::vector<std::size_t> map(stocks * windows * width);
  for (std::size_t s = 0; s < stocks; ++s) {
    for (std::size_t w = 0; w < windows; ++w) {
      for (std::size_t j = 0; j < patch; ++j) {
        for (std::size_t f = 0; f < feats; ++f) {
          map[(s * windows + w) * width + j * feats + f] =
              (s * steps + w * stride + j) * feats + f;
        }
      }
    }
  }
  std::vector<double> out(map.size());
  const double* xd = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[map[i]];
  return make_result({stocks, windows, width}, std::move(out), {x},
                     [x, map = std::move(map)](detail::TensorImpl& o) {
                       double* gx = grad_target(x);
                       if (!gx) return;
                       for (std::size_t i = 0; i < o.grad.size(); ++i) gx[map[i]] += o.grad[i];
                     });
}

Tensor gather(const Tensor& table, std::span<const std::size_t> indices, Shape shape) {
  if (shape_numel(shape) != indices.size()) {
    throw ShapeError("gather: " + std::to_string(indices.size()) + " indices for shape " +
                     shape_str(shape));
  }
  std::vector<double> out(indices.size());
  const double* td = table.data().data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= table.numel()) {
      throw ShapeError("gather: index " + std::to_string(indices[i]) + " outside table of " +
                       std::to_string(table.numel()));
    }
    out[i] = td[indices[i]];
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result(std::move(shape), std::move(out), {table},
                     [table, idx = std::move(idx)](detail::TensorImpl& o) {
                       double* gt = grad_target(table);
                       if (!gt) return;
                       for (std::size_t i = 0; i < idx.size(); ++i) gt[idx[i]] += o.grad[i];
                     });
}

// --- reductions -----------------------------------------------------------

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({}, {total}, {x}, [x](detail::TensorImpl& o) {
    if (double* gx = grad_target(x)) {
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += o.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean_dim(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("mean_dim: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  }
  const Shape& s = x.shape();
  const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t len = s[axis];
  const std::size_t inner = shape_numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  if (len == 0) throw ShapeError("mean_dim over an empty axis");
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(outer * inner, 0.0);
  const double* xd = x.data().data();
  const double inv = 1.0 / static_cast<double>(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      const double* src = xd + (o * len + l) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  for (double& v : out) v *= inv;
  return make_result(std::move(out_shape), std::move(out), {x},
                     [x, outer, len, inner, inv](detail::TensorImpl& res) {
                       double* gx = grad_target(x);
                       if (!gx) return;
                       for (std::size_t o = 0; o < outer; ++o) {
                         const double* g = res.grad.data() + o * inner;
                         for (std::size_t l = 0; l < len; ++l) {
                           double* dst = gx + (o * len + l) * inner;
                           for (std::size_t i = 0; i < inner; ++i) dst[i] += g[i] * inv;
                         }
                       }
                     });
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const double inv = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = keep(rng) ? inv : 0.0;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  return make_result(x.shape(), std::move(out), {x},
                     [x, mask = std::move(mask)](detail::TensorImpl& o) {
                       double* gx = grad_target(x);
                       if (!gx) return;
                       for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * mask[i];
                     });
}

}  // namespace tips
