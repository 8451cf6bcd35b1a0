// SPDX-License-Identifier: Apache-2.0
#include "tips/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include "tips/stats.hpp"

namespace tips {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Salt separating the student's initialisation stream from the vanilla teacher's.
constexpr std::uint64_t kStudentSalt = 0x53747564656e74ULL;

bool usable_labels(std::span<const double> y) {
  return std::all_of(y.begin(), y.end(), [](double v) { return std::isfinite(v); }) && !is_constant(y);
}

std::vector<std::size_t> shuffled(const std::vector<std::size_t>& days, std::mt19937_64& rng) {
  std::vector<std::size_t> order(days);
  // Fisher-Yates with explicit draws so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = order.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

template <typename DayLoss>
double run_epoch(ModelParams& params, Adam& opt, const std::vector<std::size_t>& order,
                 std::size_t days_per_step, DayLoss&& day_loss) {
  double total = 0.0;
  std::size_t counted = 0;
  std::size_t start = 0;
  while (start < order.size()) {
    const std::size_t end = std::min(order.size(), start + days_per_step);
    params.zero_grad();
    const double weight = 1.0 / static_cast<double>(end - start);
    bool any = false;
    for (std::size_t i = start; i < end; ++i) {
      Tensor loss = day_loss(order[i]);
      if (!loss.defined()) continue;
      total += loss.item();
      ++counted;
      backward(scale(loss, weight));
      any = true;
    }
    if (any) opt.step(params);
    start = end;
  }
  return counted ? total / static_cast<double>(counted) : kNaN;
}

}  // namespace

// --- Adam ---------------------------------------------------------------------

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
}

void Adam::step(ModelParams& params) {
  auto& tensors = params.tensors();
  if (m_.empty()) {
    for (const auto& e : tensors) {
      m_.emplace_back(e.value.numel(), 0.0);
      v_.emplace_back(e.value.numel(), 0.0);
    }
  }
  if (m_.size() != tensors.size()) throw ShapeError("optimizer state does not match parameters");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    Tensor& p = tensors[i].value;
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      w[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

// --- config -------------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("training needs at least one epoch");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (effective_batch == 0) throw ConfigError("effective batch must be positive");
  if (!(sharpness > 0.0)) throw ConfigError("soft-rank sharpness must be positive");
}

std::size_t TrainConfig::days_per_step(std::size_t stocks) const {
  if (stocks == 0) throw DataError("panel has no stocks");
  return std::max<std::size_t>(1, (effective_batch + stocks - 1) / stocks);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"lr", c.lr},
                     {"effective_batch", c.effective_batch},
                     {"seed", c.seed},
                     {"sharpness", c.sharpness}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.lr = j.value("lr", d.lr);
  c.effective_batch = j.value("effective_batch", d.effective_batch);
  c.seed = j.value("seed", d.seed);
  c.sharpness = j.value("sharpness", d.sharpness);
}

TrainingDivergence::TrainingDivergence(const DivergenceError& cause, std::size_t epoch,
                                       const std::string& who)
    : DivergenceError(cause.layer(), who + " diverged at epoch " + std::to_string(epoch) + " (" +
                                         cause.what() + ")"),
      epoch_(epoch) {}

// --- evaluation ---------------------------------------------------------------

Matrix predict(const Model& model, const MarketPanel& panel, const std::vector<std::size_t>& days) {
  NoGradGuard no_grad;
  const std::size_t lookback = model.config().lookback;
  Matrix out(days.size(), panel.stocks());
  for (std::size_t i = 0; i < days.size(); ++i) {
    Tensor logits = model.forward(panel.window(days[i], lookback)).logits;
    std::copy(logits.data().begin(), logits.data().end(), out.row(i).begin());
  }
  return out;
}

double mean_rank_ic(const Model& model, const MarketPanel& panel, const std::vector<std::size_t>& days) {
  const Matrix preds = predict(model, panel, days);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < days.size(); ++i) {
    const auto y = panel.label_row(days[i]);
    const auto p = preds.row(i);
    if (!usable_labels(y) || is_constant(p)) continue;
    total += spearman(p, y);
    ++n;
  }
  return n ? total / static_cast<double>(n) : kNaN;
}

double rank_loss(const Model& model, const MarketPanel& panel, const std::vector<std::size_t>& days,
                 double sharpness) {
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t t : days) {
    const auto y = panel.label_row(t);
    if (!usable_labels(y)) continue;
    Tensor logits = model.forward(panel.window(t, model.config().lookback)).logits;
    if (is_constant(logits.data())) continue;
    total -= soft_spearman(logits, y, sharpness).item();
    ++n;
  }
  return n ? total / static_cast<double>(n) : kNaN;
}

// --- teachers -----------------------------------------------------------------

TrainResult train_teacher(const MarketPanel& panel, const DataSplit& split, const PriorSpec& prior,
                          const ModelConfig& model_cfg, const TrainConfig& cfg,
                          const EpochCallback& on_epoch) {
  cfg.validate();
  prior.validate(model_cfg.lookback, model_cfg.heads);
  if (split.train.empty()) throw DataError("no training days");
  const std::uint64_t seed = derive_seed(cfg.seed, prior);
  Model model = Model::create(model_cfg, prior, seed);
  Adam opt(cfg.lr);
  std::mt19937_64 rng(seed);
  const std::size_t per_step = cfg.days_per_step(panel.stocks());

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLog entry{epoch, kNaN, kNaN};
    try {
      const auto order = shuffled(split.train, rng);
      ForwardOptions fo;
      fo.training = true;
      fo.rng = &rng;
      entry.train_loss = run_epoch(model.params, opt, order, per_step, [&](std::size_t t) {
        const auto y = panel.label_row(t);
        if (!usable_labels(y)) return Tensor();
        Tensor logits = model.forward(panel.window(t, model_cfg.lookback), fo).logits;
        return scale(soft_spearman(logits, y, cfg.sharpness), -1.0);
      });
      if (!split.valid.empty()) entry.valid_loss = rank_loss(model, panel, split.valid, cfg.sharpness);
    } catch (const DivergenceError& e) {
      throw TrainingDivergence(e, epoch, "teacher '" + std::string(to_string(prior.kind)) + "'");
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  result.params = std::move(model.params);
  return result;
}

std::vector<TrainResult> train_all_teachers(const MarketPanel& panel, const DataSplit& split,
                                            const TeacherSetSpec& set, const ModelConfig& model_cfg,
                                            const TrainConfig& cfg, std::size_t workers) {
  set.validate();
  cfg.validate();
  const std::size_t n = set.size();
  std::vector<TrainResult> results(n);
  std::vector<std::exception_ptr> failures(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        results[i] = train_teacher(panel, split, set.teachers[i], model_cfg, cfg);
      } catch (...) {
        failures[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(workers, 1, n);
  if (threads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  for (auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }
  return results;
}

// --- student ------------------------------------------------------------------

Tensor teacher_target(const std::vector<Model>& teachers, const Tensor& x, const DistillConfig& cfg) {
  NoGradGuard no_grad;
  std::vector<Tensor> logits;
  logits.reserve(teachers.size());
  for (const auto& t : teachers) logits.push_back(t.forward(x).logits);
  return smooth_target(ensemble_target(logits, cfg.temperature), cfg.smoothing);
}

StudentResult train_student(const MarketPanel& panel, const DataSplit& split,
                            const std::vector<Model>& teachers, const ModelConfig& model_cfg,
                            const DistillConfig& cfg, std::uint64_t seed,
                            const EpochCallback& on_epoch) {
  cfg.validate();
  if (teachers.empty()) throw ConfigError("distillation needs at least one teacher");
  if (split.train.empty()) throw DataError("no training days");
  for (const auto& t : teachers) {
    if (t.config().lookback != model_cfg.lookback || t.config().features != model_cfg.features) {
      throw ConfigError("teacher '" + std::string(to_string(t.prior.kind)) +
                        "' expects a different input window than the student");
    }
  }
  const PriorSpec prior = PriorSpec::vanilla();
  const std::uint64_t student_seed = derive_seed(seed ^ kStudentSalt, prior);
  Model student = Model::create(model_cfg, prior, student_seed);
  Adam opt(cfg.lr);
  std::mt19937_64 rng(student_seed);
  const std::size_t per_step =
      std::max<std::size_t>(1, (cfg.effective_batch + panel.stocks() - 1) / panel.stocks());

  std::vector<Tensor> cached;
  if (cfg.precompute_teacher_logits) {
    cached.resize(panel.days());
    for (std::size_t t : split.train) cached[t] = teacher_target(teachers, panel.window(t, model_cfg.lookback), cfg);
  }

  const bool use_labels = cfg.lambda_distill < 1.0;
  const std::size_t swa_from = cfg.use_swa ? cfg.total_epochs - cfg.swa_epochs + 1 : cfg.total_epochs + 1;
  std::vector<ModelParams> snapshots;
  StudentResult result;
  for (std::size_t epoch = 1; epoch <= cfg.total_epochs; ++epoch) {
    EpochLog entry{epoch, kNaN, kNaN};
    try {
      const auto order = shuffled(split.train, rng);
      ForwardOptions fo;
      fo.training = true;
      fo.rng = &rng;
      entry.train_loss = run_epoch(student.params, opt, order, per_step, [&](std::size_t t) {
        const Tensor x = panel.window(t, model_cfg.lookback);
        std::vector<double> y;
        if (use_labels) {
          y = panel.label_row(t);
          if (!usable_labels(y)) return Tensor();
        }
        const Tensor target = cfg.precompute_teacher_logits ? cached[t] : teacher_target(teachers, x, cfg);
        Tensor logits = student.forward(x, fo).logits;
        Tensor loss = distill_loss(logits, target);
        if (use_labels) {
          loss = add(scale(loss, cfg.lambda_distill),
                     scale(soft_spearman(logits, y, cfg.sharpness), -(1.0 - cfg.lambda_distill)));
        }
        return loss;
      });
      if (!split.valid.empty()) entry.valid_loss = rank_loss(student, panel, split.valid, cfg.sharpness);
    } catch (const DivergenceError& e) {
      throw TrainingDivergence(e, epoch, "student");
    }
    if (epoch >= swa_from) snapshots.push_back(student.params.clone());
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  if (snapshots.empty()) {
    result.params = std::move(student.params);
  } else {
    result.snapshots = snapshots.size();
    result.params = swa_average(snapshots);
  }
  return result;
}

}  // namespace tips
