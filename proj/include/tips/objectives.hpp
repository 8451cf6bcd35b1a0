// SPDX-License-Identifier: Apache-2.0
//
// Ranking and distillation objectives.

#pragma once

#include <span>
#include <vector>

#include <json.hpp>

#include "tips/model.hpp"
#include "tips/tensor.hpp"

namespace tips {

// Pairwise-sigmoid soft ranks of z-scored logits:
//   rank_i = 1 + sum_{j != i} sigmoid((z_i - z_j) * sharpness)
// correlated (Pearson) with the exact average ranks of y. Differentiable in r.
Tensor soft_spearman(const Tensor& r, std::span<const double> y, double sharpness);

// Building blocks of soft_spearman, exposed for gradient checks.
Tensor soft_rank(const Tensor& z, double sharpness);
Tensor pearson_with_constant(const Tensor& x, std::span<const double> target);

// softmax((1/tau) * mean_j r_j)
Tensor ensemble_target(const std::vector<Tensor>& teacher_logits, double tau);
// (1 - eps) * p + eps / S
Tensor smooth_target(const Tensor& p, double eps);
// -sum_i target_i log softmax(student_logits)_i
Tensor distill_loss(const Tensor& student_logits, const Tensor& target);

// Elementwise arithmetic mean of parameter snapshots.
ModelParams swa_average(const std::vector<ModelParams>& snapshots);

struct DistillConfig {
  double temperature = 0.01;
  double smoothing = 0.9;
  bool use_swa = true;
  std::size_t swa_epochs = 10;
  std::size_t total_epochs = 20;
  double lr = 1e-4;
  // Weight on the distillation term; the rest goes to -soft_spearman on labels.
  double lambda_distill = 1.0;
  double sharpness = 50.0;
  std::size_t effective_batch = 256;
  // Cache teacher logits once instead of recomputing them every epoch.
  bool precompute_teacher_logits = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const DistillConfig& c);
void from_json(const nlohmann::json& j, DistillConfig& c);

}  // namespace tips
