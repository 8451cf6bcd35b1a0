// SPDX-License-Identifier: Apache-2.0
//
// Market panels: OHLCV ingestion, the 8 per-day features, q-day labels,
// chronological splits and a synthetic market with planted regimes.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tips/stats.hpp"
#include "tips/tensor.hpp"

namespace tips {

inline constexpr std::size_t kFeatureCount = 8;
inline constexpr std::size_t kZscoreWindow = 20;
// Feature channels: z(open), z(high), z(low), z(close), z(volume), MA5, MA10, MA20 ratios.
inline constexpr std::size_t kMa5Channel = 5;

struct RollingZscore {
  std::vector<double> values;
  std::vector<std::uint8_t> valid;
  // Zero-variance windows: value forced to 0 and flagged here.
  std::vector<std::uint8_t> degenerate;
};

// (x_t - mean(x[t-w+1..t])) / sample_std(x[t-w+1..t]).
RollingZscore rolling_zscore(std::span<const double> x, std::size_t window = kZscoreWindow);

// MA_k(close)_t / close_t - 1; NaN before k observations.
std::vector<double> ma_ratio(std::span<const double> close, std::size_t k);

// (close_{t+q-1} - close_t) / close_t; NaN where fewer than q observations remain.
std::vector<double> make_label(std::span<const double> close, std::size_t q);

struct MarketPanel {
  std::vector<std::string> symbols;
  std::vector<std::string> dates;
  std::size_t horizon_q = 5;

  // Raw inputs, row-major [S x T_total].
  std::vector<double> open, high, low, close, volume;
  // [S x T_total x F]
  std::vector<double> features;
  // q-day forward return, [S x T_total]; NaN where invalid.
  std::vector<double> labels;
  // 1-day forward return, [S x T_total]; NaN on the final day.
  std::vector<double> next_returns;
  // Any feature channel fell back to a zero-variance window, [S x T_total].
  std::vector<std::uint8_t> degenerate;

  std::size_t stocks() const { return symbols.size(); }
  std::size_t days() const { return dates.size(); }

  double feature(std::size_t s, std::size_t t, std::size_t f) const {
    return features[(s * days() + t) * kFeatureCount + f];
  }
  double label(std::size_t s, std::size_t t) const { return labels[s * days() + t]; }
  double next_return(std::size_t s, std::size_t t) const { return next_returns[s * days() + t]; }

  bool feature_valid(std::size_t t) const { return t + 1 >= kZscoreWindow; }
  bool label_valid(std::size_t t) const { return t + horizon_q <= days(); }

  // Days with both valid features and labels: T_total - 19 - (q - 1) for a gap-free series.
  std::vector<std::size_t> usable_days() const;
  // Usable days whose whole lookback window has valid features.
  std::vector<std::size_t> window_days(std::size_t lookback) const;

  // X[:, t-lookback+1 .. t, :] as a [S, lookback, F] tensor.
  Tensor window(std::size_t t, std::size_t lookback) const;
  std::vector<double> label_row(std::size_t t) const;
  std::vector<double> return_row(std::size_t t) const;
};

// Computes features, labels and forward returns from raw OHLCV.
MarketPanel build_panel(std::vector<std::string> symbols, std::vector<std::string> dates,
                        std::vector<double> open, std::vector<double> high,
                        std::vector<double> low, std::vector<double> close,
                        std::vector<double> volume, std::size_t horizon_q = 5);

struct IngestReport {
  MarketPanel panel;
  // Symbols dropped because they miss at least one trading day.
  std::vector<std::string> rejected_symbols;
};

// CSV with header date,symbol,open,high,low,close,volume and ISO dates.
IngestReport ingest_csv(const std::filesystem::path& path, std::size_t horizon_q = 5);

void save_panel(const std::filesystem::path& path, const MarketPanel& panel);
MarketPanel load_panel(const std::filesystem::path& path);

// --- splits ---------------------------------------------------------------

struct SplitSpec {
  double train_frac = 0.6;
  double valid_frac = 0.2;
  // Days dropped between consecutive ranges so labels never straddle them.
  // Negative means horizon_q - 1.
  long embargo = -1;
};

void to_json(nlohmann::json& j, const SplitSpec& s);
void from_json(const nlohmann::json& j, SplitSpec& s);

struct DataSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> valid;
  std::vector<std::size_t> test;
};

// Partitions the window-eligible days chronologically.
DataSplit make_split(const MarketPanel& panel, const SplitSpec& spec, std::size_t lookback);

// --- synthetic market -----------------------------------------------------

enum class Regime { momentum, mean_revert, periodic, noise };

struct RegimeSegment {
  Regime regime = Regime::noise;
  std::size_t length = 0;
  // AR(1) coefficient magnitude for momentum / mean-revert; sinusoid
  // amplitude in units of idiosyncratic volatility for periodic.
  double strength = 0.0;
  std::size_t period = 5;
};

struct SynthSpec {
  std::size_t stocks = 50;
  std::uint64_t seed = 0;
  std::string start_date = "2015-01-05";
  double volatility = 0.02;
  double market_volatility = 0.01;
  std::size_t horizon_q = 5;
  std::vector<RegimeSegment> segments;

  std::size_t total_days() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);

std::string_view to_string(Regime r);
Regime regime_from_string(std::string_view name);

MarketPanel synth_market(const SynthSpec& spec);

// Weekday trading calendar starting at (or after) an ISO date.
std::vector<std::string> business_days(const std::string& start, std::size_t count);

}  // namespace tips
