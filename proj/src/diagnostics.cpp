// SPDX-License-Identifier: Apache-2.0
#include "tips/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tips/error.hpp"

namespace tips {

namespace {

constexpr std::size_t kMinRegimeDays = 10;

nlohmann::json num(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

void accumulate(std::vector<double>& acc, std::span<const double> v) {
  if (acc.empty()) acc.assign(v.size(), 0.0);
  if (acc.size() != v.size()) throw ShapeError("attention maps differ in length");
  for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
}

void divide(std::vector<double>& v, double n) {
  for (double& x : v) x /= n;
}

}  // namespace

AttributionResult ols_attribution(std::span<const double> y, std::span<const double> x) {
  if (y.size() != x.size()) throw ShapeError("attribution series differ in length");
  const std::size_t n = y.size();
  if (n < 3) throw DataError("attribution needs at least 3 observations");
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw DataError("attribution regressor has zero variance");

  AttributionResult r;
  r.observations = n;
  r.beta = sxy / sxx;
  r.alpha = my - r.beta * mx;
  double sse = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = y[i] - r.alpha - r.beta * x[i];
    sse += e * e;
  }
  r.r2 = syy > 0.0 ? std::clamp(1.0 - sse / syy, 0.0, 1.0) : 1.0;
  const double dof = static_cast<double>(n - 2);
  const double sigma2 = sse / dof;
  const double se_alpha = std::sqrt(sigma2 * (1.0 / static_cast<double>(n) + mx * mx / sxx));
  if (se_alpha > 0.0) {
    r.t_alpha = r.alpha / se_alpha;
    r.p_value = student_t_upper(r.t_alpha, dof);
  } else {
    // Exact fit: the sign of alpha decides.
    r.t_alpha = r.alpha == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), r.alpha);
    r.p_value = r.alpha > 0.0 ? 0.0 : (r.alpha < 0.0 ? 1.0 : 0.5);
  }
  return r;
}

RankSimilarity teacher_student_rank_similarity(const Matrix& student, const std::vector<Matrix>& teachers) {
  if (teachers.empty()) throw ConfigError("rank similarity needs at least one teacher");
  RankSimilarity out;
  for (const auto& t : teachers) {
    if (t.rows != student.rows || t.cols != student.cols) throw ShapeError("teacher predictions are misaligned");
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t d = 0; d < student.rows; ++d) {
      if (is_constant(student.row(d)) || is_constant(t.row(d))) {
        ++out.skipped_days;
        continue;
      }
      total += spearman(student.row(d), t.row(d));
      ++n;
    }
    out.per_teacher.push_back(n ? total / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN());
  }
  out.mean = mean_of(out.per_teacher);
  out.stddev = out.per_teacher.size() > 1 ? stddev_of(out.per_teacher) : 0.0;
  return out;
}

std::vector<double> aggregate_attention(const std::vector<Tensor>& attention,
                                        std::span<const std::size_t> selected,
                                        std::span<const double> weights) {
  if (selected.size() != weights.size()) throw ShapeError("selection and weights differ in length");
  std::vector<double> out;
  for (const auto& layer : attention) {
    if (layer.rank() != 4) throw ShapeError("attention maps must be [S, H, T, T], got " + shape_str(layer.shape()));
    const std::size_t block = layer.dim(1) * layer.dim(2) * layer.dim(3);
    const std::size_t base = out.size();
    out.resize(base + block, 0.0);
    const auto data = layer.data();
    for (std::size_t i = 0; i < selected.size(); ++i) {
      if (selected[i] >= layer.dim(0)) throw ShapeError("selected stock outside the attention batch");
      const double* src = data.data() + selected[i] * block;
      for (std::size_t k = 0; k < block; ++k) out[base + k] += weights[i] * src[k];
    }
  }
  return out;
}

std::vector<double> upsample_attention(std::span<const double> maps, std::size_t from, std::size_t to) {
  const std::size_t area = from * from;
  if (from == 0 || maps.size() % area != 0) throw ShapeError("attention maps are not square blocks");
  if (from == to) return {maps.begin(), maps.end()};
  std::vector<std::size_t> src(to);
  for (std::size_t t = 0; t < to; ++t) {
    src[t] = std::min(from - 1, static_cast<std::size_t>((static_cast<double>(t) + 0.5) *
                                                         static_cast<double>(from) / static_cast<double>(to)));
  }
  const std::size_t blocks = maps.size() / area;
  std::vector<double> out(blocks * to * to);
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t i = 0; i < to; ++i) {
      for (std::size_t j = 0; j < to; ++j) {
        out[(b * to + i) * to + j] = maps[(b * from + src[i]) * from + src[j]];
      }
    }
  }
  return out;
}

AlignmentTable attention_alignment(const std::vector<std::vector<double>>& student,
                                   const std::vector<std::vector<std::vector<double>>>& teachers,
                                   const std::vector<PriorKind>& kinds) {
  if (teachers.empty() || teachers.size() != kinds.size()) {
    throw ConfigError("attention alignment needs one prior kind per teacher");
  }
  for (const auto& t : teachers) {
    if (t.size() != student.size()) throw ShapeError("teacher attention covers a different number of days");
  }
  // Candidate order fixes tie-breaking.
  const std::vector<BiasGroup> groups = {BiasGroup::causality, BiasGroup::locality, BiasGroup::periodicity,
                                         BiasGroup::vanilla};
  AlignmentTable table;
  table.days = student.size();
  std::vector<std::string> names;
  for (BiasGroup g : groups) {
    if (std::any_of(kinds.begin(), kinds.end(), [&](PriorKind k) { return bias_group_of(k) == g; })) {
      names.emplace_back(to_string(g));
    }
  }
  names.emplace_back("average");
  for (const auto& n : names) table.counts[n] = 0;

  for (std::size_t d = 0; d < student.size(); ++d) {
    std::vector<std::vector<double>> candidates;
    for (BiasGroup g : groups) {
      std::vector<double> acc;
      std::size_t members = 0;
      for (std::size_t m = 0; m < teachers.size(); ++m) {
        if (bias_group_of(kinds[m]) != g) continue;
        accumulate(acc, teachers[m][d]);
        ++members;
      }
      if (members == 0) continue;
      divide(acc, static_cast<double>(members));
      candidates.push_back(std::move(acc));
    }
    std::vector<double> avg;
    for (const auto& t : teachers) accumulate(avg, t[d]);
    divide(avg, static_cast<double>(teachers.size()));
    candidates.push_back(std::move(avg));

    std::size_t best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      if (candidates[c].size() != student[d].size()) throw ShapeError("student and teacher attention differ in size");
      const double sim = cosine_similarity(student[d], candidates[c]);
      if (sim > best_sim) {
        best_sim = sim;
        best = c;
      }
    }
    ++table.counts[names[best]];
  }
  for (const auto& [name, count] : table.counts) {
    table.fractions[name] = table.days ? static_cast<double>(count) / static_cast<double>(table.days) : 0.0;
  }
  return table;
}

std::vector<std::vector<double>> strategy_vectors(const PortfolioRun& run, const MarketPanel& panel,
                                                  const std::vector<std::size_t>& days,
                                                  std::size_t lookback) {
  if (days.size() != run.selected.size()) throw ShapeError("portfolio run and day list differ in length");
  std::vector<std::vector<double>> out(days.size(), std::vector<double>(lookback, 0.0));
  for (std::size_t d = 0; d < days.size(); ++d) {
    const std::size_t t = days[d];
    if (t + 1 < lookback) throw DataError("day " + std::to_string(t) + " has no full lookback window");
    for (std::size_t i = 0; i < run.selected[d].size(); ++i) {
      const std::size_t s = run.selected[d][i];
      const double w = run.weights[d][i];
      for (std::size_t j = 0; j < lookback; ++j) {
        out[d][j] += w * panel.feature(s, t + 1 - lookback + j, kMa5Channel);
      }
    }
  }
  return out;
}

ConditionalSimilarity conditional_similarity(const std::vector<std::vector<double>>& z_a,
                                             const std::vector<std::vector<double>>& z_b,
                                             std::span<const double> regime_value, double quantile) {
  if (z_a.size() != z_b.size() || z_a.size() != regime_value.size()) {
    throw ShapeError("conditional similarity inputs cover different days");
  }
  if (!(quantile > 0.0 && quantile <= 0.5)) throw ConfigError("regime quantile must lie in (0, 0.5]");
  ConditionalSimilarity out;
  const std::size_t n = z_a.size();
  out.per_day.resize(n);
  for (std::size_t d = 0; d < n; ++d) out.per_day[d] = cosine_similarity(z_a[d], z_b[d]);
  out.mean = n ? mean_of(out.per_day) : 0.0;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return regime_value[a] < regime_value[b]; });
  const auto take = static_cast<std::size_t>(std::floor(quantile * static_cast<double>(n)));
  std::vector<double> good, bad;
  for (std::size_t i = 0; i < take; ++i) {
    bad.push_back(out.per_day[order[i]]);
    good.push_back(out.per_day[order[n - 1 - i]]);
  }
  out.good_days = good.size();
  out.bad_days = bad.size();
  out.low_power = take < kMinRegimeDays;
  if (take >= 1) {
    out.good_mean = mean_of(good);
    out.bad_mean = mean_of(bad);
    out.delta = out.good_mean - out.bad_mean;
  }
  if (take >= 2) {
    const WelchResult w = welch_t_test(good, bad);
    out.t = w.t;
    out.p_value = w.p_greater;
  }
  return out;
}

ConditionalSimilarity conditional_similarity(const PortfolioRun& tips_run, const PortfolioRun& baseline_run,
                                             const MarketPanel& panel, const std::vector<std::size_t>& days,
                                             std::size_t lookback, double quantile) {
  return conditional_similarity(strategy_vectors(tips_run, panel, days, lookback),
                                strategy_vectors(baseline_run, panel, days, lookback),
                                baseline_run.formation, quantile);
}

Matrix average_matrices(const std::vector<Matrix>& runs) {
  if (runs.empty()) throw ConfigError("nothing to average");
  Matrix out(runs.front().rows, runs.front().cols);
  for (const auto& m : runs) {
    if (m.rows != out.rows || m.cols != out.cols) throw ShapeError("seed runs differ in shape");
    for (std::size_t i = 0; i < m.values.size(); ++i) out.values[i] += m.values[i];
  }
  for (double& v : out.values) v /= static_cast<double>(runs.size());
  return out;
}

std::vector<double> average_series(const std::vector<std::vector<double>>& runs) {
  if (runs.empty()) throw ConfigError("nothing to average");
  std::vector<double> out(runs.front().size(), 0.0);
  for (const auto& r : runs) {
    if (r.size() != out.size()) throw ShapeError("seed series differ in length");
    for (std::size_t i = 0; i < r.size(); ++i) out[i] += r[i];
  }
  for (double& v : out) v /= static_cast<double>(runs.size());
  return out;
}

nlohmann::json to_json_value(const AttributionResult& a) {
  return nlohmann::json{{"alpha", num(a.alpha)}, {"beta", num(a.beta)},       {"r2", num(a.r2)},
                        {"t_alpha", num(a.t_alpha)}, {"p_value", num(a.p_value)}, {"observations", a.observations}};
}

nlohmann::json to_json_value(const RankSimilarity& r) {
  nlohmann::json per = nlohmann::json::array();
  for (double v : r.per_teacher) per.push_back(num(v));
  return nlohmann::json{{"per_teacher", per}, {"mean", num(r.mean)}, {"std", num(r.stddev)},
                        {"skipped_days", r.skipped_days}};
}

nlohmann::json to_json_value(const AlignmentTable& t) {
  return nlohmann::json{{"fractions", t.fractions}, {"counts", t.counts}, {"days", t.days}};
}

nlohmann::json to_json_value(const ConditionalSimilarity& c) {
  return nlohmann::json{{"mean", num(c.mean)},         {"good_mean", num(c.good_mean)},
                        {"bad_mean", num(c.bad_mean)}, {"delta", num(c.delta)},
                        {"t", num(c.t)},               {"p_value", num(c.p_value)},
                        {"good_days", c.good_days},    {"bad_days", c.bad_days},
                        {"low_power", c.low_power}};
}

}  // namespace tips
