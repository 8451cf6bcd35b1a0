// SPDX-License-Identifier: Apache-2.0
#include "tips/backtest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "tips/error.hpp"

namespace tips {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

nlohmann::json finite_or_string(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

}  // namespace

PortfolioRun portfolio_returns(const Matrix& predictions, const Matrix& returns, std::size_t k,
                               std::size_t window) {
  if (predictions.rows != returns.rows || predictions.cols != returns.cols) {
    throw ShapeError("predictions [" + std::to_string(predictions.rows) + " x " +
                     std::to_string(predictions.cols) + "] and returns [" +
                     std::to_string(returns.rows) + " x " + std::to_string(returns.cols) +
                     "] differ in shape");
  }
  const std::size_t B = predictions.rows;
  const std::size_t S = predictions.cols;
  if (k == 0) throw ConfigError("top-k must be at least 1");
  if (window == 0) throw ConfigError("holding window must be at least 1");
  if (k > S) throw ConfigError("top-k " + std::to_string(k) + " exceeds " + std::to_string(S) + " stocks");

  PortfolioRun run;
  run.window = window;
  run.returns = Matrix(window, B, kNaN);
  run.selected.resize(B);
  run.weights.resize(B);
  run.formation.resize(B);

  std::vector<std::size_t> order(S);
  for (std::size_t d = 0; d < B; ++d) {
    const auto p = predictions.row(d);
    for (std::size_t s = 0; s < S; ++s) {
      if (std::isnan(p[s])) {
        throw DataError("NaN prediction on day " + std::to_string(d) + " for stock " + std::to_string(s));
      }
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    std::vector<std::size_t> sel(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));

    const double top = p[sel.front()];
    std::vector<double> w(k);
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      w[i] = std::exp(p[sel[i]] - top);
      z += w[i];
    }
    for (double& v : w) v /= z;

    const std::size_t row = d % window;
    const std::size_t span = std::min(window, B - d);
    for (std::size_t j = 0; j < span; ++j) {
      const auto r = returns.row(d + j);
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        if (!std::isfinite(r[sel[i]])) {
          throw DataError("non-finite return on day " + std::to_string(d + j) + " for stock " +
                          std::to_string(sel[i]));
        }
        acc += w[i] * r[sel[i]];
      }
      run.returns(row, d + j) = acc;
    }
    run.formation[d] = run.returns(row, d);
    run.selected[d] = std::move(sel);
    run.weights[d] = std::move(w);
  }

  run.daily.assign(B, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < window; ++r) {
      const double v = run.returns(r, b);
      if (!std::isnan(v)) {
        acc += v;
        ++n;
      }
    }
    run.daily[b] = acc / static_cast<double>(n);
  }
  return run;
}

double max_drawdown(const std::vector<double>& daily) {
  double equity = 1.0;
  double peak = 1.0;
  double worst = 0.0;
  for (double r : daily) {
    equity += r;
    peak = std::max(peak, equity);
    if (peak > 0.0) worst = std::max(worst, (peak - equity) / peak);
  }
  return worst;
}

MetricReport compute_metrics(const std::vector<double>& daily, double periods_per_year) {
  if (daily.size() < 2) throw DataError("metrics need at least 2 daily returns");
  MetricReport m;
  m.observations = daily.size();
  const double mu = mean_of(daily);
  const double sd = stddev_of(daily);
  m.annual_return = mu * periods_per_year;
  if (is_constant(daily) || !(sd > 0.0)) throw NumericalError("Sharpe ratio is undefined for a zero-variance return series");
  m.sharpe = mu / sd * std::sqrt(periods_per_year);
  m.max_drawdown = max_drawdown(daily);
  m.calmar = m.max_drawdown > 0.0 ? m.annual_return / m.max_drawdown
                                  : std::numeric_limits<double>::infinity();
  return m;
}

CostModel CostModel::preset(const std::string& name, std::size_t period) {
  if (name == "csi") return {0.00006, 0.00056, period};
  if (name == "ni225") return {0.00002, 0.00002, period};
  if (name == "sp500" || name == "zero") return {0.0, 0.0, period};
  throw ConfigError("unknown cost preset '" + name + "' (expected csi, ni225, sp500 or zero)");
}

void CostModel::validate() const {
  if (buy < 0.0 || sell < 0.0) throw ConfigError("transaction cost rates must be non-negative");
  if (period == 0) throw ConfigError("rebalance period must be at least 1 day");
}

double CostModel::daily_cost() const { return (buy + sell) / static_cast<double>(period); }

double CostModel::annualized_cost(double periods_per_year) const { return daily_cost() * periods_per_year; }

void to_json(nlohmann::json& j, const CostModel& c) {
  j = nlohmann::json{{"buy", c.buy}, {"sell", c.sell}, {"period", c.period}};
}

void from_json(const nlohmann::json& j, CostModel& c) {
  if (j.is_string()) {
    c = CostModel::preset(j.get<std::string>());
    return;
  }
  CostModel d;
  c.buy = j.value("buy", d.buy);
  c.sell = j.value("sell", d.sell);
  c.period = j.value("period", d.period);
}

std::vector<double> apply_costs(const std::vector<double>& daily, const CostModel& model) {
  model.validate();
  const double c = model.daily_cost();
  std::vector<double> out(daily);
  for (double& v : out) v -= c;
  return out;
}

BacktestReport make_report(const PortfolioRun& run, const CostModel& costs) {
  BacktestReport r;
  r.gross = compute_metrics(run.daily);
  r.net = compute_metrics(apply_costs(run.daily, costs));
  r.annualized_cost = costs.annualized_cost();
  double conc = 0.0;
  for (const auto& w : run.weights) conc += *std::max_element(w.begin(), w.end());
  r.top1_concentration = run.weights.empty() ? kNaN : conc / static_cast<double>(run.weights.size());
  return r;
}

nlohmann::json to_json_value(const MetricReport& m) {
  return nlohmann::json{{"AR", finite_or_string(m.annual_return)},
                        {"SR", finite_or_string(m.sharpe)},
                        {"MaxDD", finite_or_string(m.max_drawdown)},
                        {"CR", finite_or_string(m.calmar)},
                        {"observations", m.observations}};
}

nlohmann::json to_json_value(const BacktestReport& r) {
  return nlohmann::json{{"gross", to_json_value(r.gross)},
                        {"net", to_json_value(r.net)},
                        {"annualized_cost", r.annualized_cost},
                        {"top1_concentration", finite_or_string(r.top1_concentration)}};
}

void write_daily_csv(const std::filesystem::path& path, const std::vector<std::string>& dates,
                     const std::vector<double>& gross, const std::vector<double>& net) {
  if (dates.size() != gross.size() || gross.size() != net.size()) {
    throw ShapeError("daily CSV columns differ in length");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "date,return,cost_adjusted_return\n";
  for (std::size_t i = 0; i < dates.size(); ++i) {
    out << fmt::format("{},{:.17g},{:.17g}\n", dates[i], gross[i], net[i]);
  }
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace tips
