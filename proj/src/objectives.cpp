// SPDX-License-Identifier: Apache-2.0
#include "tips/objectives.hpp"

#include <cmath>

#include "tips/stats.hpp"

namespace tips {

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Regularizer inside the norm of the centered soft ranks.
constexpr double kNormEps = 1e-12;

}  // namespace

Tensor soft_rank(const Tensor& z, double sharpness) {
  if (z.rank() != 1) throw ShapeError("soft_rank expects a vector, got " + shape_str(z.shape()));
  const std::size_t n = z.numel();
  const double* zd = z.data().data();
  std::vector<double> ranks(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) ranks[i] += sigmoid((zd[i] - zd[j]) * sharpness);
    }
  }
  return make_result({n}, std::move(ranks), {z}, [z, n, sharpness](detail::TensorImpl& o) {
    double* gz = grad_target(z);
    if (!gz) return;
    const double* zd = z.data().data();
    const double* g = o.grad.data();
    // d rank_i / d z_k = c * sig'(c (z_i - z_k)) * ([i == k] * sum - [i != k])
    for (std::size_t k = 0; k < n; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == k) continue;
        const double s = sigmoid((zd[k] - zd[j]) * sharpness);
        acc += s * (1.0 - s) * (g[k] - g[j]);
      }
      gz[k] += sharpness * acc;
    }
  });
}

Tensor pearson_with_constant(const Tensor& x, std::span<const double> target) {
  if (x.rank() != 1 || x.numel() != target.size()) {
    throw ShapeError("pearson_with_constant: " + shape_str(x.shape()) + " vs " +
                     std::to_string(target.size()) + " targets");
  }
  const std::size_t n = x.numel();
  std::vector<double> u(target.begin(), target.end());
  const double mu_t = mean_of(u);
  double nu = 0.0;
  for (double& v : u) {
    v -= mu_t;
    nu += v * v;
  }
  if (nu == 0.0) throw DataError("rank correlation is undefined for a constant target");
  for (double& v : u) v /= std::sqrt(nu);

  std::vector<double> a(x.data().begin(), x.data().end());
  const double mu_x = mean_of(a);
  double dot = 0.0;
  double aa = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    a[i] -= mu_x;
    dot += a[i] * u[i];
    aa += a[i] * a[i];
  }
  const double norm = std::sqrt(aa + kNormEps);
  const double rho = dot / norm;
  return make_result({}, {rho}, {x},
                     [x, n, rho, norm, a = std::move(a), u = std::move(u)](detail::TensorImpl& o) {
                       double* gx = grad_target(x);
                       if (!gx) return;
                       const double g = o.grad[0];
                       // d rho / d a = u / |a| - rho * a / |a|^2, then center (a = x - mean x)
                       std::vector<double> ga(n);
                       double mean_ga = 0.0;
                       for (std::size_t i = 0; i < n; ++i) {
                         ga[i] = u[i] / norm - rho * a[i] / (norm * norm);
                         mean_ga += ga[i];
                       }
                       mean_ga /= static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) gx[i] += g * (ga[i] - mean_ga);
                     });
}

Tensor soft_spearman(const Tensor& r, std::span<const double> y, double sharpness) {
  if (r.rank() != 1 || r.numel() != y.size()) {
    throw ShapeError("soft_spearman: logits " + shape_str(r.shape()) + " vs " +
                     std::to_string(y.size()) + " labels");
  }
  if (r.numel() < 2) throw DataError("soft_spearman needs at least 2 items");
  if (is_constant(y)) throw DataError("rank correlation is undefined for constant labels");
  const std::size_t n = r.numel();
  // z-score through layernorm with unit gain and zero shift
  Tensor ones = Tensor::full({n}, 1.0);
  Tensor zeros = Tensor::zeros({n});
  Tensor z = layernorm(r, ones, zeros, 1e-12);
  return pearson_with_constant(soft_rank(z, sharpness), average_ranks(y));
}

Tensor ensemble_target(const std::vector<Tensor>& teacher_logits, double tau) {
  if (teacher_logits.empty()) throw ConfigError("ensemble_target: empty teacher list");
  if (!(tau > 0.0)) throw ConfigError("ensemble_target: temperature must be positive");
  const std::size_t n = teacher_logits.front().numel();
  std::vector<double> avg(n, 0.0);
  for (const auto& t : teacher_logits) {
    if (t.numel() != n) throw ShapeError("ensemble_target: teacher logits differ in length");
    for (std::size_t i = 0; i < n; ++i) avg[i] += t.data()[i];
  }
  const double scale_factor = 1.0 / (tau * static_cast<double>(teacher_logits.size()));
  for (double& v : avg) v *= scale_factor;
  NoGradGuard no_grad;
  return softmax_lastdim(Tensor::from({n}, std::move(avg)));
}

Tensor smooth_target(const Tensor& p, double eps) {
  if (eps < 0.0 || eps > 1.0) throw ConfigError("smooth_target: epsilon must lie in [0, 1]");
  const double uniform = 1.0 / static_cast<double>(p.numel());
  std::vector<double> out(p.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - eps) * p.data()[i] + eps * uniform;
  return Tensor::from(p.shape(), std::move(out));
}

Tensor distill_loss(const Tensor& student_logits, const Tensor& target) {
  if (student_logits.shape() != target.shape()) {
    throw ShapeError("distill_loss: logits " + shape_str(student_logits.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  return scale(sum(mul(log_softmax_lastdim(student_logits), target)), -1.0);
}

ModelParams swa_average(const std::vector<ModelParams>& snapshots) {
  if (snapshots.empty()) throw ConfigError("swa_average: no snapshots");
  ModelParams avg = snapshots.front().clone();
  const auto& ref = snapshots.front().tensors();
  for (std::size_t s = 1; s < snapshots.size(); ++s) {
    const auto& other = snapshots[s].tensors();
    if (other.size() != ref.size()) throw ShapeError("swa_average: snapshots differ in tensor count");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (other[i].name != ref[i].name || other[i].value.shape() != ref[i].value.shape()) {
        throw ShapeError("swa_average: snapshot tensor '" + other[i].name + "' " +
                         shape_str(other[i].value.shape()) + " does not match '" + ref[i].name +
                         "' " + shape_str(ref[i].value.shape()));
      }
      auto dst = avg.tensors()[i].value.mutable_data();
      auto src = other[i].value.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
  const double inv = 1.0 / static_cast<double>(snapshots.size());
  for (auto& e : avg.tensors()) {
    for (double& v : e.value.mutable_data()) v *= inv;
  }
  return avg;
}

void DistillConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("distillation temperature must be positive");
  if (smoothing < 0.0 || smoothing > 1.0) throw ConfigError("label smoothing must lie in [0, 1]");
  if (total_epochs == 0) throw ConfigError("student needs at least one epoch");
  if (use_swa && (swa_epochs == 0 || swa_epochs > total_epochs)) {
    throw ConfigError("swa_epochs must lie in [1, total_epochs]");
  }
  if (lambda_distill < 0.0 || lambda_distill > 1.0) throw ConfigError("lambda_distill must lie in [0, 1]");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (effective_batch == 0) throw ConfigError("effective batch must be positive");
}

void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = nlohmann::json{{"temperature", c.temperature},
                     {"smoothing", c.smoothing},
                     {"use_swa", c.use_swa},
                     {"swa_epochs", c.swa_epochs},
                     {"total_epochs", c.total_epochs},
                     {"lr", c.lr},
                     {"lambda_distill", c.lambda_distill},
                     {"sharpness", c.sharpness},
                     {"effective_batch", c.effective_batch},
                     {"precompute_teacher_logits", c.precompute_teacher_logits}};
}

void from_json(const nlohmann::json& j, DistillConfig& c) {
  DistillConfig d;
  c.temperature = j.value("temperature", d.temperature);
  c.smoothing = j.value("smoothing", d.smoothing);
  c.use_swa = j.value("use_swa", d.use_swa);
  c.swa_epochs = j.value("swa_epochs", d.swa_epochs);
  c.total_epochs = j.value("total_epochs", d.total_epochs);
  c.lr = j.value("lr", d.lr);
  c.lambda_distill = j.value("lambda_distill", d.lambda_distill);
  c.sharpness = j.value("sharpness", d.sharpness);
  c.effective_batch = j.value("effective_batch", d.effective_batch);
  c.precompute_teacher_logits = j.value("precompute_teacher_logits", d.precompute_teacher_logits);
}

}  // namespace tips
