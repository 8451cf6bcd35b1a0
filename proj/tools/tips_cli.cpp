// SPDX-License-Identifier: Apache-2.0
//
// tips: command-line driver for the teacher/student pipeline.
//
// Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical divergence.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tips/error.hpp"
#include "tips/pipeline.hpp"
#include "tips/runtime.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 1, kData = 2, kDivergence = 3 };

struct Flags {
  std::string config;
  std::string run_dir = "run";
  std::vector<std::uint64_t> seeds;
  std::size_t workers = 0;

  // synth / ingest
  std::size_t stocks = 0;
  std::uint64_t synth_seed = 0;
  std::string csv;
  std::size_t horizon = 0;

  // train-teachers
  std::string subset;
  std::size_t epochs = 0;

  // distill
  bool no_ls = false;
  bool no_swa = false;
  double temp = 0.0;
  double lambda = 0.0;
  std::size_t distill_epochs = 0;
  bool precompute = false;

  // backtest / report
  std::string model = "student";
  bool ensemble = false;
  std::string costs;
  std::size_t k = 0;
  std::size_t window = 0;
};

// Flags override the file, which overrides built-in defaults.
tips::RunConfig effective_config(const Flags& f, const CLI::App& app) {
  tips::RunConfig cfg = f.config.empty() ? tips::RunConfig::defaults() : tips::RunConfig::load(f.config);
  auto given = [&](const char* name) {
    for (const CLI::App* sub : app.get_subcommands()) {
      const CLI::Option* opt = sub->get_option_no_throw(name);
      if (opt != nullptr && opt->count() > 0) return true;
    }
    const CLI::Option* opt = app.get_option_no_throw(name);
    return opt != nullptr && opt->count() > 0;
  };
  if (given("--seeds")) cfg.seeds = f.seeds;
  if (given("--workers")) cfg.workers = f.workers;
  if (given("--stocks")) cfg.data.synth.stocks = f.stocks;
  if (given("--synth-seed")) cfg.data.synth.seed = f.synth_seed;
  if (given("--csv")) cfg.data.csv = f.csv;
  if (given("--horizon")) cfg.data.horizon_q = f.horizon;
  if (given("--subset")) cfg.teachers = f.subset;
  if (given("--epochs")) cfg.train.epochs = f.epochs;
  if (given("--no-ls")) cfg.distill.smoothing = 0.0;
  if (given("--no-swa")) cfg.distill.use_swa = false;
  if (given("--temp")) cfg.distill.temperature = f.temp;
  if (given("--lambda")) cfg.distill.lambda_distill = f.lambda;
  if (given("--distill-epochs")) cfg.distill.total_epochs = f.distill_epochs;
  if (given("--precompute")) cfg.distill.precompute_teacher_logits = true;
  if (given("--costs")) cfg.backtest.costs = tips::CostModel::preset(f.costs, cfg.backtest.costs.period);
  if (given("--k")) cfg.backtest.k = f.k;
  if (given("--window")) cfg.backtest.window = f.window;
  cfg.validate();
  return cfg;
}

int run(int argc, char** argv) {
  CLI::App app{"Bias-specialised teacher ensembles distilled into one ranking student"};
  app.require_subcommand(1);
  Flags f;
  app.add_option("-c,--config", f.config, "JSON run configuration");
  app.add_option("-r,--run-dir", f.run_dir, "Directory holding all run artifacts")->capture_default_str();
  app.add_option("--seeds", f.seeds, "Seeds to run (overrides the config)");
  app.add_option("--workers", f.workers, "Teachers trained concurrently")->check(CLI::PositiveNumber);

  CLI::App* synth = app.add_subcommand("synth", "Generate and cache a synthetic market panel");
  synth->add_option("--stocks", f.stocks, "Number of stocks")->check(CLI::PositiveNumber);
  synth->add_option("--synth-seed", f.synth_seed, "Generator seed");

  CLI::App* ingest = app.add_subcommand("ingest", "Ingest an OHLCV CSV into the panel cache");
  ingest->add_option("--csv", f.csv, "CSV with date,symbol,open,high,low,close,volume");
  ingest->add_option("--horizon", f.horizon, "Label horizon q in days")->check(CLI::PositiveNumber);

  CLI::App* teachers = app.add_subcommand("train-teachers", "Train the bias teacher ensemble");
  teachers->add_option("--subset", f.subset, "all, or comma separated causality,locality,periodicity");
  teachers->add_option("--epochs", f.epochs, "Teacher epochs")->check(CLI::PositiveNumber);

  CLI::App* distill = app.add_subcommand("distill", "Distil the teachers into a vanilla student");
  distill->add_flag("--no-ls", f.no_ls, "Disable label smoothing");
  distill->add_flag("--no-swa", f.no_swa, "Disable stochastic weight averaging");
  distill->add_option("--temp", f.temp, "Distillation temperature")->check(CLI::PositiveNumber);
  distill->add_option("--lambda", f.lambda, "Weight of the distillation term")->check(CLI::Range(0.0, 1.0));
  distill->add_option("--distill-epochs", f.distill_epochs, "Student epochs")->check(CLI::PositiveNumber);
  distill->add_flag("--precompute", f.precompute, "Cache teacher logits once");

  CLI::App* backtest = app.add_subcommand("backtest", "Backtest a model on the test split");
  backtest->add_option("--model", f.model, "student or a teacher prior name")->capture_default_str();
  backtest->add_flag("--ensemble", f.ensemble, "Average pre-softmax teacher logits");
  auto add_backtest_opts = [&](CLI::App* sub) {
    sub->add_option("--costs", f.costs, "Cost preset: csi, ni225, sp500 or zero");
    sub->add_option("--k", f.k, "Stocks held per portfolio")->check(CLI::PositiveNumber);
    sub->add_option("--window", f.window, "Holding window W in days")->check(CLI::PositiveNumber);
  };
  add_backtest_opts(backtest);

  CLI::App* analyze = app.add_subcommand("analyze", "Attribution, similarity and attention diagnostics");
  add_backtest_opts(analyze);
  CLI::App* report = app.add_subcommand("report", "Aggregate per-seed metrics into report.json");
  add_backtest_opts(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  const tips::RunConfig cfg = effective_config(f, app);
  const tips::RunDir dir(f.run_dir);
  tips::write_json(dir.root() / "config.json", cfg);
  dir.record(cfg, dir.root() / "config.json", "config");

  if (synth->parsed()) {
    const auto s = tips::stage_synth(cfg, dir);
    std::cout << "panel: " << s.stocks << " stocks x " << s.days << " days (" << s.usable_days
              << " usable) -> " << dir.panel().string() << '\n';
    for (const auto& seg : s.segments) {
      std::cout << "  " << seg.at("regime").get<std::string>() << " x" << seg.at("length")
                << "  lag-1 return autocorrelation " << seg.at("lag1_autocorrelation").dump() << '\n';
    }
  } else if (ingest->parsed()) {
    const auto s = tips::stage_ingest(cfg, dir);
    std::cout << "panel: " << s.stocks << " stocks x " << s.days << " days (" << s.usable_days << " usable)\n";
    for (const auto& r : s.rejected_symbols) std::cout << "  rejected " << r << " (missing trading days)\n";
  } else if (teachers->parsed()) {
    for (std::uint64_t seed : cfg.seeds) tips::stage_train_teachers(cfg, dir, seed, &std::cout);
  } else if (distill->parsed()) {
    for (std::uint64_t seed : cfg.seeds) {
      const auto res = tips::stage_distill(cfg, dir, seed, &std::cout);
      std::cout << "seed " << seed << ": student saved (" << res.snapshots << " SWA snapshots)\n";
    }
  } else if (backtest->parsed()) {
    const std::string target = f.ensemble ? "ensemble" : f.model;
    for (std::uint64_t seed : cfg.seeds) {
      const auto r = tips::stage_backtest(cfg, dir, seed, target);
      std::cout << "seed " << seed << " " << target << ": gross " << r.at("gross").dump() << "\n  net "
                << r.at("net").dump() << '\n';
    }
  } else if (analyze->parsed()) {
    const auto a = tips::stage_analyze(cfg, dir);
    std::cout << a.dump(2) << '\n';
    for (const auto& w : a.at("warnings")) std::cerr << "warning: " << w.get<std::string>() << '\n';
  } else if (report->parsed()) {
    tips::stage_report(cfg, dir, &std::cout);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tips::configure_allocator();
  try {
    return run(argc, argv);
  } catch (const tips::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const tips::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kDivergence;
  } catch (const tips::Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
}
