// SPDX-License-Identifier: Apache-2.0
//
// Optimisation loops for teachers (rank loss on labels) and the student
// (logit distillation from frozen teachers).

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tips/data.hpp"
#include "tips/model.hpp"
#include "tips/objectives.hpp"

namespace tips {

class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  // Applies one update to every parameter that holds a gradient.
  void step(ModelParams& params);
  std::size_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainConfig {
  std::size_t epochs = 100;
  double lr = 1e-3;
  // Stocks per optimizer step; whole days are accumulated until reached.
  std::size_t effective_batch = 256;
  std::uint64_t seed = 0;
  double sharpness = 50.0;

  void validate() const;
  std::size_t days_per_step(std::size_t stocks) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;  // NaN when there are no validation days
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochLog> log;
};

// Called after each epoch; purely informational.
using EpochCallback = std::function<void(const EpochLog&)>;

// Divergence while training. Carries the epoch (1-based) and, for teacher sets, the prior.
class TrainingDivergence : public DivergenceError {
 public:
  TrainingDivergence(const DivergenceError& cause, std::size_t epoch, const std::string& who);
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

// Mean over days of the exact Spearman correlation between logits and labels.
// Days with constant predictions or labels are skipped.
double mean_rank_ic(const Model& model, const MarketPanel& panel, const std::vector<std::size_t>& days);

// Logits for each listed day, [days x S].
Matrix predict(const Model& model, const MarketPanel& panel, const std::vector<std::size_t>& days);

// Mean -soft_spearman over `days`, without gradients.
double rank_loss(const Model& model, const MarketPanel& panel, const std::vector<std::size_t>& days,
                 double sharpness);

TrainResult train_teacher(const MarketPanel& panel, const DataSplit& split, const PriorSpec& prior,
                          const ModelConfig& model_cfg, const TrainConfig& cfg,
                          const EpochCallback& on_epoch = {});

// Trains each teacher with derive_seed(cfg.seed, prior). Results come back in
// the order of `set.teachers` regardless of `workers`.
std::vector<TrainResult> train_all_teachers(const MarketPanel& panel, const DataSplit& split,
                                            const TeacherSetSpec& set, const ModelConfig& model_cfg,
                                            const TrainConfig& cfg, std::size_t workers = 1);

struct StudentResult {
  ModelParams params;  // SWA average when enabled, else final epoch
  std::vector<EpochLog> log;
  std::size_t snapshots = 0;
};

// The student always uses the vanilla prior and sees only teacher outputs
// (plus labels when lambda_distill < 1).
StudentResult train_student(const MarketPanel& panel, const DataSplit& split,
                            const std::vector<Model>& teachers, const ModelConfig& model_cfg,
                            const DistillConfig& cfg, std::uint64_t seed,
                            const EpochCallback& on_epoch = {});

// Distillation target for one day: smooth(softmax(mean teacher logits / tau)).
Tensor teacher_target(const std::vector<Model>& teachers, const Tensor& x, const DistillConfig& cfg);

}  // namespace tips
