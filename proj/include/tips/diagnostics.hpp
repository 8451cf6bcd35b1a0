// SPDX-License-Identifier: Apache-2.0
//
// Post-hoc analyses of trained models and their portfolios: return
// attribution, prediction similarity, attention alignment and
// regime-conditional strategy similarity.

#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tips/backtest.hpp"
#include "tips/data.hpp"
#include "tips/priors.hpp"
#include "tips/stats.hpp"

namespace tips {

// --- attribution -------------------------------------------------------------

struct AttributionResult {
  double alpha = 0.0;
  double beta = 0.0;
  double r2 = 0.0;
  double t_alpha = 0.0;
  // One-tailed, H1: alpha > 0.
  double p_value = 0.5;
  std::size_t observations = 0;
};

// OLS fit y = alpha + beta x + e.
AttributionResult ols_attribution(std::span<const double> y, std::span<const double> x);

// --- rank similarity -----------------------------------------------------------

struct RankSimilarity {
  std::vector<double> per_teacher;  // mean daily Spearman per teacher
  double mean = 0.0;
  double stddev = 0.0;  // sample std across teachers; 0 for a single teacher
  std::size_t skipped_days = 0;
};

// Predictions are [days x S] matrices over the same days.
RankSimilarity teacher_student_rank_similarity(const Matrix& student, const std::vector<Matrix>& teachers);

// --- attention alignment ---------------------------------------------------------

// Portfolio-weighted attention of the selected stocks, flattened over
// (layer, head, query, key). `attention` holds one [S, H, T', T'] tensor per layer.
std::vector<double> aggregate_attention(const std::vector<Tensor>& attention,
                                        std::span<const std::size_t> selected,
                                        std::span<const double> weights);

// Nearest-neighbour resampling of [.., from, from] maps (flattened, `blocks`
// maps back to back) to [.., to, to].
std::vector<double> upsample_attention(std::span<const double> maps, std::size_t from, std::size_t to);

struct AlignmentTable {
  // Keys: "causality", "locality", "periodicity", "vanilla", "average".
  std::map<std::string, double> fractions;
  std::map<std::string, std::size_t> counts;
  std::size_t days = 0;
};

// `student[d]` and `teachers[m][d]` are aggregated maps of equal length for day d.
// Candidates are the mean map of each teacher group present and the mean over
// all teachers; each day goes to the candidate with the highest cosine.
AlignmentTable attention_alignment(const std::vector<std::vector<double>>& student,
                                   const std::vector<std::vector<std::vector<double>>>& teachers,
                                   const std::vector<PriorKind>& kinds);

// --- conditional similarity -------------------------------------------------------

struct ConditionalSimilarity {
  std::vector<double> per_day;  // cosine between strategy vectors
  double mean = 0.0;
  double good_mean = 0.0;
  double bad_mean = 0.0;
  double delta = 0.0;
  double t = 0.0;
  double p_value = 1.0;
  std::size_t good_days = 0;
  std::size_t bad_days = 0;
  bool low_power = false;
};

// z_d = sum_s w_{d,s} X[s, d-L+1 .. d, MA5] for each formation day.
std::vector<std::vector<double>> strategy_vectors(const PortfolioRun& run, const MarketPanel& panel,
                                                  const std::vector<std::size_t>& days,
                                                  std::size_t lookback);

// Splits days by the top / bottom `quantile` of `regime_value` and compares
// the similarity on good versus bad days with a one-tailed Welch test.
ConditionalSimilarity conditional_similarity(const std::vector<std::vector<double>>& z_a,
                                             const std::vector<std::vector<double>>& z_b,
                                             std::span<const double> regime_value,
                                             double quantile = 0.30);

// Full variant: regimes follow the baseline portfolio's formation-day return.
ConditionalSimilarity conditional_similarity(const PortfolioRun& tips_run, const PortfolioRun& baseline_run,
                                             const MarketPanel& panel, const std::vector<std::size_t>& days,
                                             std::size_t lookback, double quantile = 0.30);

// --- seed aggregation --------------------------------------------------------------

Matrix average_matrices(const std::vector<Matrix>& runs);
std::vector<double> average_series(const std::vector<std::vector<double>>& runs);

nlohmann::json to_json_value(const AttributionResult& a);
nlohmann::json to_json_value(const RankSimilarity& r);
nlohmann::json to_json_value(const AlignmentTable& t);
nlohmann::json to_json_value(const ConditionalSimilarity& c);

}  // namespace tips
