// SPDX-License-Identifier: Apache-2.0
//
// Top-k softmax-weighted portfolios evaluated with a sliding holding window,
// plus return metrics and transaction costs.

#pragma once

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "tips/stats.hpp"

namespace tips {

struct PortfolioRun {
  std::size_t window = 0;
  // [W x B]; row d mod W holds the returns of the portfolio formed on day d
  // for days d .. d + min(W, B - d) - 1. Unfilled entries are NaN.
  Matrix returns;
  // Per formation day: selected stock indices (descending prediction) and their weights.
  std::vector<std::vector<std::size_t>> selected;
  std::vector<std::vector<double>> weights;
  // Column means of `returns` over the filled rows.
  std::vector<double> daily;
  // Each portfolio's first-day return, sum_s w_{d,s} R[d, s].
  std::vector<double> formation;
};

// P and R are [B x S]: predictions on day d and the returns realised after d.
PortfolioRun portfolio_returns(const Matrix& predictions, const Matrix& returns, std::size_t k,
                               std::size_t window);

struct MetricReport {
  double annual_return = 0.0;
  double sharpe = 0.0;
  double max_drawdown = 0.0;
  // +inf when the equity curve never falls.
  double calmar = std::numeric_limits<double>::infinity();
  std::size_t observations = 0;
};

// AR = 252 mean; SR = mean / sample std * sqrt(252); MaxDD on 1 + cumsum(daily).
MetricReport compute_metrics(const std::vector<double>& daily, double periods_per_year = 252.0);
double max_drawdown(const std::vector<double>& daily);

struct CostModel {
  double buy = 0.0;
  double sell = 0.0;
  std::size_t period = 5;

  // Named rate sets: "csi" (CSI300/CSI500), "ni225", "sp500", "zero".
  static CostModel preset(const std::string& name, std::size_t period = 5);
  void validate() const;
  double daily_cost() const;
  double annualized_cost(double periods_per_year = 252.0) const;
};

void to_json(nlohmann::json& j, const CostModel& c);
void from_json(const nlohmann::json& j, CostModel& c);

// Subtracts the round-trip cost spread evenly over each rebalance period.
std::vector<double> apply_costs(const std::vector<double>& daily, const CostModel& model);

struct BacktestReport {
  MetricReport gross;
  MetricReport net;
  double annualized_cost = 0.0;
  // Mean over days of the largest portfolio weight.
  double top1_concentration = 0.0;
};

BacktestReport make_report(const PortfolioRun& run, const CostModel& costs);

nlohmann::json to_json_value(const MetricReport& m);
nlohmann::json to_json_value(const BacktestReport& r);

// date,return,cost_adjusted_return
void write_daily_csv(const std::filesystem::path& path, const std::vector<std::string>& dates,
                     const std::vector<double>& gross, const std::vector<double>& net);

}  // namespace tips
