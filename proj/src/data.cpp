// SPDX-License-Identifier: Apache-2.0
#include "tips/data.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "tips/binary_io.hpp"

namespace tips {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

RollingZscore rolling_zscore(std::span<const double> x, std::size_t window) {
  if (window < 2) throw ConfigError("rolling_zscore: window must be >= 2");
  RollingZscore out;
  out.values.assign(x.size(), 0.0);
  out.valid.assign(x.size(), 0);
  out.degenerate.assign(x.size(), 0);
  for (std::size_t t = window - 1; t < x.size(); ++t) {
    const auto w = x.subspan(t + 1 - window, window);
    double mu = 0.0;
    for (double v : w) mu += v;
    mu /= static_cast<double>(window);
    double ss = 0.0;
    for (double v : w) ss += (v - mu) * (v - mu);
    const double sd = std::sqrt(ss / static_cast<double>(window - 1));
    out.valid[t] = 1;
    if (sd <= 1e-12 * std::max(1.0, std::abs(mu))) {
      out.degenerate[t] = 1;
      continue;
    }
    out.values[t] = (x[t] - mu) / sd;
  }
  return out;
}

std::vector<double> ma_ratio(std::span<const double> close, std::size_t k) {
  if (k == 0) throw ConfigError("ma_ratio: k must be >= 1");
  for (std::size_t t = 0; t < close.size(); ++t) {
    if (!(close[t] > 0.0)) {
      throw DataError("ma_ratio: non-positive close " + std::to_string(close[t]) + " at index " +
                      std::to_string(t));
    }
  }
  std::vector<double> out(close.size(), kNaN);
  for (std::size_t t = k - 1; t < close.size(); ++t) {
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) total += close[t - i];
    out[t] = (total / static_cast<double>(k)) / close[t] - 1.0;
  }
  return out;
}

std::vector<double> make_label(std::span<const double> close, std::size_t q) {
  if (q == 0) throw ConfigError("make_label: horizon q must be >= 1");
  std::vector<double> out(close.size(), kNaN);
  for (std::size_t t = 0; t + q <= close.size(); ++t) {
    out[t] = (close[t + q - 1] - close[t]) / close[t];
  }
  return out;
}

// --- MarketPanel ----------------------------------------------------------

std::vector<std::size_t> MarketPanel::usable_days() const {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < days(); ++t) {
    if (feature_valid(t) && label_valid(t)) out.push_back(t);
  }
  return out;
}

std::vector<std::size_t> MarketPanel::window_days(std::size_t lookback) const {
  std::vector<std::size_t> out;
  if (lookback == 0) return out;
  for (std::size_t t = 0; t < days(); ++t) {
    if (t + 1 < lookback) continue;
    if (feature_valid(t + 1 - lookback) && label_valid(t)) out.push_back(t);
  }
  return out;
}

Tensor MarketPanel::window(std::size_t t, std::size_t lookback) const {
  if (t >= days() || t + 1 < lookback) {
    throw DataError("window ending at day " + std::to_string(t) + " with lookback " +
                    std::to_string(lookback) + " is out of range");
  }
  const std::size_t S = stocks();
  std::vector<double> x(S * lookback * kFeatureCount);
  const std::size_t first = t + 1 - lookback;
  for (std::size_t s = 0; s < S; ++s) {
    const double* src = features.data() + (s * days() + first) * kFeatureCount;
    std::copy(src, src + lookback * kFeatureCount, x.data() + s * lookback * kFeatureCount);
  }
  return Tensor::from({S, lookback, kFeatureCount}, std::move(x));
}

std::vector<double> MarketPanel::label_row(std::size_t t) const {
  std::vector<double> row(stocks());
  for (std::size_t s = 0; s < stocks(); ++s) row[s] = label(s, t);
  return row;
}

std::vector<double> MarketPanel::return_row(std::size_t t) const {
  std::vector<double> row(stocks());
  for (std::size_t s = 0; s < stocks(); ++s) row[s] = next_return(s, t);
  return row;
}

MarketPanel build_panel(std::vector<std::string> symbols, std::vector<std::string> dates,
                        std::vector<double> open, std::vector<double> high,
                        std::vector<double> low, std::vector<double> close,
                        std::vector<double> volume, std::size_t horizon_q) {
  const std::size_t S = symbols.size();
  const std::size_t T = dates.size();
  for (const auto* v : {&open, &high, &low, &close, &volume}) {
    if (v->size() != S * T) throw DataError("OHLCV block size does not match symbols x dates");
  }
  for (std::size_t t = 1; t < T; ++t) {
    if (!(dates[t - 1] < dates[t])) throw DataError("dates must be strictly increasing at " + dates[t]);
  }
  if (horizon_q == 0) throw ConfigError("horizon q must be >= 1");

  MarketPanel p;
  p.symbols = std::move(symbols);
  p.dates = std::move(dates);
  p.horizon_q = horizon_q;
  p.features.assign(S * T * kFeatureCount, 0.0);
  p.labels.assign(S * T, kNaN);
  p.next_returns.assign(S * T, kNaN);
  p.degenerate.assign(S * T, 0);

  for (std::size_t s = 0; s < S; ++s) {
    auto series = [&](const std::vector<double>& block) {
      return std::span<const double>(block.data() + s * T, T);
    };
    const std::vector<double>* raw[5] = {&open, &high, &low, &close, &volume};
    for (std::size_t f = 0; f < 5; ++f) {
      auto z = rolling_zscore(series(*raw[f]));
      for (std::size_t t = 0; t < T; ++t) {
        p.features[(s * T + t) * kFeatureCount + f] = z.values[t];
        p.degenerate[s * T + t] |= z.degenerate[t];
      }
    }
    const std::size_t ks[3] = {5, 10, 20};
    for (std::size_t i = 0; i < 3; ++i) {
      auto ma = ma_ratio(series(close), ks[i]);
      for (std::size_t t = 0; t < T; ++t) {
        if (p.feature_valid(t)) p.features[(s * T + t) * kFeatureCount + 5 + i] = ma[t];
      }
    }
    auto y = make_label(series(close), horizon_q);
    std::copy(y.begin(), y.end(), p.labels.begin() + static_cast<std::ptrdiff_t>(s * T));
    for (std::size_t t = 0; t + 1 < T; ++t) {
      p.next_returns[s * T + t] = close[s * T + t + 1] / close[s * T + t] - 1.0;
    }
  }
  p.open = std::move(open);
  p.high = std::move(high);
  p.low = std::move(low);
  p.close = std::move(close);
  p.volume = std::move(volume);
  return p;
}

// --- CSV ingestion --------------------------------------------------------

namespace {

bool valid_iso_date(std::string_view s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
  int y = 0;
  unsigned m = 0, d = 0;
  auto parse = [](std::string_view part, auto& out) {
    auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), out);
    return ec == std::errc() && ptr == part.data() + part.size();
  };
  if (!parse(s.substr(0, 4), y) || !parse(s.substr(5, 2), m) || !parse(s.substr(8, 2), d)) return false;
  return std::chrono::year_month_day{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}}.ok();
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  for (auto& f : out) {
    while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '\t')) f.remove_suffix(1);
  }
  return out;
}

struct Bar {
  double o, h, l, c, v;
  std::size_t line;
};

}  // namespace

IngestReport ingest_csv(const std::filesystem::path& path, std::size_t horizon_q) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV: " + path.string());
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    return DataError(path.string() + ":" + std::to_string(line_no) + ": " + msg);
  };

  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  {
    auto header = split_csv(line);
    const std::vector<std::string_view> expected = {"date", "symbol", "open", "high", "low", "close", "volume"};
    if (header != expected) throw fail("header must be date,symbol,open,high,low,close,volume");
  }

  std::map<std::string, std::map<std::string, Bar>> by_symbol;
  std::map<std::string, bool> all_dates;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv(line);
    if (fields.size() != 7) throw fail("expected 7 fields, got " + std::to_string(fields.size()));
    if (!valid_iso_date(fields[0])) throw fail("invalid ISO date '" + std::string(fields[0]) + "'");
    if (fields[1].empty()) throw fail("empty symbol");
    double vals[5];
    for (int i = 0; i < 5; ++i) {
      auto f = fields[2 + i];
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), vals[i]);
      if (ec != std::errc() || ptr != f.data() + f.size() || !std::isfinite(vals[i])) {
        throw fail("malformed number '" + std::string(f) + "'");
      }
    }
    for (int i = 0; i < 4; ++i) {
      if (!(vals[i] > 0.0)) throw fail("non-positive price " + std::string(fields[2 + i]));
    }
    if (vals[4] < 0.0) throw fail("negative volume");
    std::string date(fields[0]);
    std::string symbol(fields[1]);
    auto& rows = by_symbol[symbol];
    if (auto it = rows.find(date); it != rows.end()) {
      throw fail("duplicate (date, symbol) row (" + date + ", " + symbol + "), first seen at line " +
                 std::to_string(it->second.line));
    }
    rows.emplace(date, Bar{vals[0], vals[1], vals[2], vals[3], vals[4], line_no});
    all_dates[date] = true;
  }

  IngestReport report;
  std::vector<std::string> dates;
  for (const auto& [d, _] : all_dates) dates.push_back(d);
  std::vector<std::string> symbols;
  for (const auto& [sym, rows] : by_symbol) {
    if (rows.size() == dates.size()) symbols.push_back(sym);
    else report.rejected_symbols.push_back(sym);
  }
  if (symbols.empty()) throw DataError(path.string() + ": no symbol covers every trading day");

  const std::size_t S = symbols.size();
  const std::size_t T = dates.size();
  std::vector<double> o(S * T), h(S * T), l(S * T), c(S * T), v(S * T);
  for (std::size_t s = 0; s < S; ++s) {
    const auto& rows = by_symbol[symbols[s]];
    std::size_t t = 0;
    for (const auto& [_, bar] : rows) {
      o[s * T + t] = bar.o;
      h[s * T + t] = bar.h;
      l[s * T + t] = bar.l;
      c[s * T + t] = bar.c;
      v[s * T + t] = bar.v;
      ++t;
    }
  }
  report.panel = build_panel(std::move(symbols), std::move(dates), std::move(o), std::move(h),
                             std::move(l), std::move(c), std::move(v), horizon_q);
  return report;
}

// --- panel cache ----------------------------------------------------------

namespace {
constexpr char kPanelMagic[9] = "TIPSPANL";
constexpr std::uint32_t kPanelVersion = 1;
}  // namespace

void save_panel(const std::filesystem::path& path, const MarketPanel& p) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open panel cache for writing: " + path.string());
  binio::write_magic(out, kPanelMagic);
  binio::write_le(out, kPanelVersion);
  binio::write_le(out, static_cast<std::uint64_t>(p.stocks()));
  binio::write_le(out, static_cast<std::uint64_t>(p.days()));
  binio::write_le(out, static_cast<std::uint64_t>(kFeatureCount));
  binio::write_le(out, static_cast<std::uint64_t>(p.horizon_q));
  for (const auto& s : p.symbols) binio::write_string(out, s);
  for (const auto& d : p.dates) binio::write_string(out, d);
  for (const auto* block : {&p.open, &p.high, &p.low, &p.close, &p.volume, &p.features, &p.labels,
                            &p.next_returns}) {
    binio::write_f64s(out, *block);
  }
  for (auto flag : p.degenerate) binio::write_f64(out, flag ? 1.0 : 0.0);
  if (!out) throw DataError("failed writing panel cache: " + path.string());
}

MarketPanel load_panel(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open panel cache: " + path.string());
  binio::expect_magic(in, kPanelMagic, "panel cache");
  auto version = binio::read_le<std::uint32_t>(in);
  if (version != kPanelVersion) throw DataError("unsupported panel cache version " + std::to_string(version));
  const auto S = binio::read_le<std::uint64_t>(in);
  const auto T = binio::read_le<std::uint64_t>(in);
  const auto F = binio::read_le<std::uint64_t>(in);
  if (F != kFeatureCount) throw DataError("panel cache has " + std::to_string(F) + " features");
  MarketPanel p;
  p.horizon_q = binio::read_le<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < S; ++i) p.symbols.push_back(binio::read_string(in));
  for (std::uint64_t i = 0; i < T; ++i) p.dates.push_back(binio::read_string(in));
  const std::size_t n = S * T;
  for (auto* block : {&p.open, &p.high, &p.low, &p.close, &p.volume}) *block = binio::read_f64s(in, n);
  p.features = binio::read_f64s(in, n * kFeatureCount);
  p.labels = binio::read_f64s(in, n);
  p.next_returns = binio::read_f64s(in, n);
  auto flags = binio::read_f64s(in, n);
  p.degenerate.resize(n);
  for (std::size_t i = 0; i < n; ++i) p.degenerate[i] = flags[i] != 0.0 ? 1 : 0;
  return p;
}

// --- splits ---------------------------------------------------------------

void to_json(nlohmann::json& j, const SplitSpec& s) {
  j = nlohmann::json{{"train_frac", s.train_frac}, {"valid_frac", s.valid_frac}, {"embargo", s.embargo}};
}

void from_json(const nlohmann::json& j, SplitSpec& s) {
  SplitSpec d;
  s.train_frac = j.value("train_frac", d.train_frac);
  s.valid_frac = j.value("valid_frac", d.valid_frac);
  s.embargo = j.value("embargo", d.embargo);
}

DataSplit make_split(const MarketPanel& panel, const SplitSpec& spec, std::size_t lookback) {
  if (spec.train_frac <= 0.0 || spec.valid_frac < 0.0 || spec.train_frac + spec.valid_frac >= 1.0) {
    throw ConfigError("split fractions must satisfy train > 0, valid >= 0, train + valid < 1");
  }
  const auto days = panel.window_days(lookback);
  const std::size_t n = days.size();
  const std::size_t gap = spec.embargo < 0 ? panel.horizon_q - 1 : static_cast<std::size_t>(spec.embargo);
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train_frac * static_cast<double>(n)));
  const auto n_valid = static_cast<std::size_t>(std::floor(spec.valid_frac * static_cast<double>(n)));
  DataSplit split;
  auto take = [&](std::size_t from, std::size_t to, std::vector<std::size_t>& dst) {
    for (std::size_t i = from; i < std::min(to, n); ++i) dst.push_back(days[i]);
  };
  take(0, n_train, split.train);
  take(n_train + gap, n_train + n_valid, split.valid);
  take(n_train + n_valid + gap, n, split.test);
  if (split.train.empty() || split.test.empty() || (spec.valid_frac > 0.0 && split.valid.empty())) {
    throw DataError("panel with " + std::to_string(n) + " window days is too short for the split");
  }
  return split;
}

// --- synthetic market -----------------------------------------------------

std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::momentum: return "momentum";
    case Regime::mean_revert: return "mean-revert";
    case Regime::periodic: return "periodic";
    case Regime::noise: return "noise";
  }
  return "unknown";
}

Regime regime_from_string(std::string_view name) {
  if (name == "momentum") return Regime::momentum;
  if (name == "mean-revert") return Regime::mean_revert;
  if (name == "periodic") return Regime::periodic;
  if (name == "noise") return Regime::noise;
  throw ConfigError("unknown regime '" + std::string(name) + "'");
}

std::size_t SynthSpec::total_days() const {
  std::size_t n = 0;
  for (const auto& seg : segments) n += seg.length;
  return n;
}

void SynthSpec::validate() const {
  if (stocks < 2) throw ConfigError("synthetic market needs at least 2 stocks");
  if (segments.empty()) throw ConfigError("synthetic market needs at least one regime segment");
  for (const auto& seg : segments) {
    if (seg.length == 0) throw ConfigError("regime segment lengths must be positive");
    if (seg.regime == Regime::periodic && seg.period < 2) throw ConfigError("periodic regime needs period >= 2");
    if ((seg.regime == Regime::momentum || seg.regime == Regime::mean_revert) &&
        (seg.strength < 0.0 || seg.strength >= 1.0)) {
      throw ConfigError("AR regime strength must lie in [0, 1)");
    }
  }
  if (!(volatility > 0.0) || market_volatility < 0.0) throw ConfigError("volatilities must be positive");
  if (!valid_iso_date(start_date)) throw ConfigError("invalid start date '" + start_date + "'");
}

void to_json(nlohmann::json& j, const SynthSpec& s) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& seg : s.segments) {
    segs.push_back({{"regime", std::string(to_string(seg.regime))},
                    {"length", seg.length},
                    {"strength", seg.strength},
                    {"period", seg.period}});
  }
  j = nlohmann::json{{"stocks", s.stocks},
                     {"seed", s.seed},
                     {"start_date", s.start_date},
                     {"volatility", s.volatility},
                     {"market_volatility", s.market_volatility},
                     {"horizon_q", s.horizon_q},
                     {"segments", segs}};
}

void from_json(const nlohmann::json& j, SynthSpec& s) {
  SynthSpec d;
  s.stocks = j.value("stocks", d.stocks);
  s.seed = j.value("seed", d.seed);
  s.start_date = j.value("start_date", d.start_date);
  s.volatility = j.value("volatility", d.volatility);
  s.market_volatility = j.value("market_volatility", d.market_volatility);
  s.horizon_q = j.value("horizon_q", d.horizon_q);
  s.segments.clear();
  for (const auto& seg : j.at("segments")) {
    RegimeSegment r;
    r.regime = regime_from_string(seg.at("regime").get<std::string>());
    const auto length = seg.at("length").get<long long>();
    if (length <= 0) throw ConfigError("regime segment lengths must be positive");
    r.length = static_cast<std::size_t>(length);
    r.strength = seg.value("strength", 0.0);
    r.period = seg.value("period", std::size_t{5});
    s.segments.push_back(r);
  }
}

std::vector<std::string> business_days(const std::string& start, std::size_t count) {
  using namespace std::chrono;
  if (!valid_iso_date(start)) throw ConfigError("invalid ISO date '" + start + "'");
  int y = std::stoi(start.substr(0, 4));
  unsigned m = static_cast<unsigned>(std::stoi(start.substr(5, 2)));
  unsigned d = static_cast<unsigned>(std::stoi(start.substr(8, 2)));
  sys_days day{year_month_day{year{y}, month{m}, std::chrono::day{d}}};
  std::vector<std::string> out;
  out.reserve(count);
  char buf[16];
  while (out.size() < count) {
    weekday wd{day};
    if (wd != Saturday && wd != Sunday) {
      year_month_day ymd{day};
      std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                    static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
      out.emplace_back(buf);
    }
    day += days{1};
  }
  return out;
}

MarketPanel synth_market(const SynthSpec& spec) {
  spec.validate();
  const std::size_t S = spec.stocks;
  const std::size_t T = spec.total_days();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<double> vol(S), beta(S), phase(S), last_idio(S, 0.0), price(S);
  for (std::size_t s = 0; s < S; ++s) {
    vol[s] = spec.volatility * (0.8 + 0.4 * unit(rng));
    beta[s] = 0.5 + unit(rng);
    phase[s] = 2.0 * std::numbers::pi * unit(rng);
    price[s] = 20.0 + 80.0 * unit(rng);
  }

  std::vector<double> o(S * T), h(S * T), l(S * T), c(S * T), v(S * T);
  std::size_t t = 0;
  for (const auto& seg : spec.segments) {
    for (std::size_t i = 0; i < seg.length; ++i, ++t) {
      const double market = spec.market_volatility * normal(rng);
      for (std::size_t s = 0; s < S; ++s) {
        double idio = 0.0;
        switch (seg.regime) {
          case Regime::momentum:
          case Regime::mean_revert: {
            const double phi = seg.regime == Regime::momentum ? seg.strength : -seg.strength;
            idio = phi * last_idio[s] + vol[s] * std::sqrt(1.0 - phi * phi) * normal(rng);
            break;
          }
          case Regime::periodic: {
            const double angle = 2.0 * std::numbers::pi * static_cast<double>(t) /
                                     static_cast<double>(seg.period) + phase[s];
            idio = seg.strength * vol[s] * std::sin(angle) + vol[s] * normal(rng);
            break;
          }
          case Regime::noise:
            idio = vol[s] * normal(rng);
            break;
        }
        last_idio[s] = idio;
        const double ret = beta[s] * market + idio;
        const double prev = price[s];
        const double close = prev * std::exp(ret);
        const double open = prev * std::exp(0.25 * vol[s] * normal(rng));
        const double hi = std::max(open, close) * std::exp(0.5 * vol[s] * std::abs(normal(rng)));
        const double lo = std::min(open, close) * std::exp(-0.5 * vol[s] * std::abs(normal(rng)));
        const std::size_t k = s * T + t;
        o[k] = open;
        h[k] = hi;
        l[k] = lo;
        c[k] = close;
        v[k] = 1e6 * std::exp(0.25 * normal(rng) + 5.0 * std::abs(ret));
        price[s] = close;
      }
    }
  }

  std::vector<std::string> symbols(S);
  for (std::size_t s = 0; s < S; ++s) {
    std::string id = std::to_string(s);
    symbols[s] = "SYN" + std::string(id.size() < 3 ? 3 - id.size() : 0, '0') + id;
  }
  return build_panel(std::move(symbols), business_days(spec.start_date, T), std::move(o),
                     std::move(h), std::move(l), std::move(c), std::move(v), spec.horizon_q);
}

}  // namespace tips
