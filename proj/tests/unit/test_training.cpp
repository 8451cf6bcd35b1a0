// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "tips/backtest.hpp"
#include "tips/error.hpp"
#include "tips/training.hpp"

using namespace tips;

namespace {

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.features = kFeatureCount;
  cfg.lookback = 8;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.heads = 2;
  cfg.layers = 2;
  return cfg;
}

MarketPanel small_market(Regime regime, double strength, std::size_t days, std::size_t stocks,
                         std::uint64_t seed) {
  SynthSpec spec;
  spec.stocks = stocks;
  spec.seed = seed;
  spec.segments = {{regime, days, strength, 5}};
  return synth_market(spec);
}

bool same_params(const ModelParams& a, const ModelParams& b) {
  if (a.tensors().size() != b.tensors().size()) return false;
  for (std::size_t i = 0; i < a.tensors().size(); ++i) {
    if (a.tensors()[i].name != b.tensors()[i].name) return false;
    if (!bitwise_equal(a.tensors()[i].value, b.tensors()[i].value)) return false;
  }
  return true;
}

TeacherSetSpec two_alibi_free(std::vector<PriorSpec> priors) {
  TeacherSetSpec set;
  set.teachers = std::move(priors);
  set.ablation_subset = true;
  return set;
}

}  // namespace

TEST_CASE("adam first step moves by the learning rate") {
  ModelConfig cfg = tiny_model();
  ModelParams p = ModelParams::init(cfg, PriorSpec::vanilla(), 1);
  Tensor& bias = p.get("readout.bias");
  bias.mutable_data()[0] = 1.0;
  p.zero_grad();
  backward(scale(sum(bias), 3.0));
  Adam opt(0.01);
  opt.step(p);
  CHECK(std::abs(bias.data()[0] - (1.0 - 0.01 * 3.0 / (3.0 + 1e-8))) <= 1e-15);
  CHECK(opt.steps() == 1);
  CHECK_THROWS_AS(Adam(0.0), ConfigError);
}

TEST_CASE("rank loss at initialisation is near zero") {
  const MarketPanel panel = small_market(Regime::noise, 0.0, 120, 40, 5);
  const Model m = Model::create(tiny_model(), PriorSpec::vanilla(), 9);
  const double loss = rank_loss(m, panel, panel.window_days(8), 50.0);
  CHECK(std::abs(loss) <= 0.2);
}

TEST_CASE("a single batch can be overfit") {
  const MarketPanel panel = small_market(Regime::noise, 0.0, 60, 20, 6);
  const std::size_t day = panel.window_days(8).front();
  DataSplit split;
  split.train = {day};
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.lr = 1e-2;
  cfg.effective_batch = panel.stocks();
  const TrainResult res = train_teacher(panel, split, PriorSpec::past(), tiny_model(), cfg);
  REQUIRE(res.log.size() == 200);
  const double final_loss = rank_loss(Model::wrap(PriorSpec::past(), res.params), panel, {day}, cfg.sharpness);
  CHECK(final_loss < -0.95);
}

TEST_CASE("causal teacher learns planted momentum better than shuffled labels") {
  MarketPanel panel = small_market(Regime::momentum, 0.6, 220, 30, 7);
  MarketPanel shuffled = panel;
  std::mt19937_64 rng(1);
  for (std::size_t t = 0; t < shuffled.days(); ++t) {
    for (std::size_t i = shuffled.stocks(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      const std::size_t j = pick(rng);
      std::swap(shuffled.labels[(i - 1) * shuffled.days() + t], shuffled.labels[j * shuffled.days() + t]);
    }
  }
  const DataSplit split = make_split(panel, SplitSpec{}, 8);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.lr = 3e-3;
  cfg.effective_batch = panel.stocks();
  const Model planted = Model::wrap(PriorSpec::past(), train_teacher(panel, split, PriorSpec::past(), tiny_model(), cfg).params);
  const Model noise = Model::wrap(PriorSpec::past(), train_teacher(shuffled, split, PriorSpec::past(), tiny_model(), cfg).params);
  CHECK(mean_rank_ic(planted, panel, split.valid) > mean_rank_ic(noise, shuffled, split.valid));
}

TEST_CASE("teacher sets: identical specs, count check and order independence") {
  const MarketPanel panel = small_market(Regime::noise, 0.0, 80, 12, 8);
  const DataSplit split = make_split(panel, SplitSpec{}, 8);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.effective_batch = panel.stocks();

  TeacherSetSpec vanilla;
  vanilla.teachers.assign(7, PriorSpec::vanilla());
  const auto seven = train_all_teachers(panel, split, vanilla, tiny_model(), cfg);
  REQUIRE(seven.size() == 7);
  for (std::size_t i = 1; i < 7; ++i) CHECK(same_params(seven[0].params, seven[i].params));

  TeacherSetSpec six = vanilla;
  six.teachers.pop_back();
  CHECK_THROWS_AS(train_all_teachers(panel, split, six, tiny_model(), cfg), ConfigError);

  const auto forward = train_all_teachers(panel, split, two_alibi_free({PriorSpec::past(), PriorSpec::future()}),
                                          tiny_model(), cfg);
  const auto backward_order = train_all_teachers(
      panel, split, two_alibi_free({PriorSpec::future(), PriorSpec::past()}), tiny_model(), cfg, 2);
  CHECK(same_params(forward[0].params, backward_order[1].params));
  CHECK(same_params(forward[1].params, backward_order[0].params));
  CHECK_FALSE(same_params(forward[0].params, forward[1].params));
}

TEST_CASE("divergence aborts with the epoch and the teacher") {
  MarketPanel panel = small_market(Regime::noise, 0.0, 60, 10, 9);
  const DataSplit split = make_split(panel, SplitSpec{}, 8);
  for (std::size_t s = 0; s < panel.stocks(); ++s) {
    panel.features[(s * panel.days() + split.train.front()) * kFeatureCount] = std::numeric_limits<double>::quiet_NaN();
  }
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.effective_batch = panel.stocks();
  try {
    train_teacher(panel, split, PriorSpec::future(), tiny_model(), cfg);
    FAIL("expected divergence");
  } catch (const TrainingDivergence& e) {
    CHECK(e.epoch() == 1);
    CHECK(std::string(e.what()).find("future") != std::string::npos);
  }
}

TEST_CASE("student training") {
  const MarketPanel panel = small_market(Regime::momentum, 0.4, 90, 12, 10);
  const DataSplit split = make_split(panel, SplitSpec{}, 8);
  TrainConfig tcfg;
  tcfg.epochs = 1;
  tcfg.effective_batch = panel.stocks();
  std::vector<Model> teachers;
  for (const auto& prior : {PriorSpec::past(), PriorSpec::alibi(2)}) {
    teachers.push_back(Model::wrap(prior, train_teacher(panel, split, prior, tiny_model(), tcfg).params));
  }

  DistillConfig dcfg;
  dcfg.total_epochs = 3;
  dcfg.swa_epochs = 2;
  dcfg.effective_batch = panel.stocks();

  SUBCASE("cached targets reproduce recomputed targets exactly") {
    const StudentResult live = train_student(panel, split, teachers, tiny_model(), dcfg, 4);
    DistillConfig cached_cfg = dcfg;
    cached_cfg.precompute_teacher_logits = true;
    const StudentResult cached = train_student(panel, split, teachers, tiny_model(), cached_cfg, 4);
    CHECK(same_params(live.params, cached.params));
    CHECK(live.snapshots == 2);
    CHECK(live.log.size() == 3);
  }
  SUBCASE("switches compose") {
    DistillConfig plain = dcfg;
    plain.use_swa = false;
    plain.smoothing = 0.0;
    plain.temperature = 1.0;
    CHECK(train_student(panel, split, teachers, tiny_model(), plain, 4).snapshots == 0);
    DistillConfig mixed = dcfg;
    mixed.lambda_distill = 0.5;
    const StudentResult res = train_student(panel, split, teachers, tiny_model(), mixed, 4);
    for (const auto& e : res.log) CHECK(std::isfinite(e.train_loss));
  }
  SUBCASE("near-uniform targets give near-uniform weights") {
    DistillConfig flat = dcfg;
    flat.temperature = 1e6;
    flat.smoothing = 0.0;
    flat.use_swa = false;
    flat.lr = 1e-3;
    flat.total_epochs = 5;
    const std::vector<Model> one{Model::wrap(PriorSpec::vanilla(), ModelParams::init(tiny_model(), PriorSpec::vanilla(), 3))};
    const StudentResult res = train_student(panel, split, one, tiny_model(), flat, 4);
    const Model student = Model::wrap(PriorSpec::vanilla(), res.params);
    const Matrix preds = predict(student, panel, split.test);
    Matrix zero(preds.rows, preds.cols, 0.0);
    const PortfolioRun run = portfolio_returns(preds, zero, panel.stocks(), 1);
    double top = 0.0;
    for (const auto& w : run.weights) top += w.front() / static_cast<double>(run.weights.size());
    CHECK(top <= 1.5 / static_cast<double>(panel.stocks()));
  }
  CHECK_THROWS_AS(train_student(panel, split, {}, tiny_model(), dcfg, 1), ConfigError);
}
