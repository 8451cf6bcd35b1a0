// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "tips/data.hpp"
#include "tips/error.hpp"
#include "tips/stats.hpp"

using namespace tips;
namespace fs = std::filesystem;

namespace {

// Writes a gap-free OHLCV CSV for `symbols` over `days` business days.
fs::path write_csv(const std::string& name, std::size_t symbols, std::size_t days, std::uint64_t seed,
                   const std::string& extra = "") {
  const fs::path path = fs::temp_directory_path() / name;
  std::ofstream out(path);
  out << "date,symbol,open,high,low,close,volume\n";
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.02);
  const auto dates = business_days("2020-01-01", days);
  for (std::size_t s = 0; s < symbols; ++s) {
    double price = 50.0 + 10.0 * static_cast<double>(s);
    for (const auto& d : dates) {
      price *= std::exp(n(rng));
      out << d << ",S" << s << "," << price << "," << price * 1.01 << "," << price * 0.99 << "," << price
          << "," << 1000 + static_cast<int>(s) << "\n";
    }
  }
  out << extra;
  return path;
}

double lag_autocorr(const std::vector<double>& x, std::size_t lag) {
  std::vector<double> a(x.begin(), x.end() - static_cast<std::ptrdiff_t>(lag));
  std::vector<double> b(x.begin() + static_cast<std::ptrdiff_t>(lag), x.end());
  return pearson(a, b);
}

std::vector<double> log_returns(const MarketPanel& p, std::size_t s) {
  std::vector<double> r;
  for (std::size_t t = 1; t < p.days(); ++t) r.push_back(std::log(p.close[s * p.days() + t] / p.close[s * p.days() + t - 1]));
  return r;
}

SynthSpec one_regime(Regime regime, double strength, std::size_t days, std::size_t period = 5) {
  SynthSpec spec;
  spec.stocks = 20;
  spec.seed = 3;
  spec.segments = {{regime, days, strength, period}};
  return spec;
}

}  // namespace

TEST_CASE("rolling z-score matches a direct window computation") {
  std::vector<double> x(40);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(5.0, 2.0);
  for (double& v : x) v = n(rng);
  const auto z = rolling_zscore(x, 20);
  for (std::size_t t = 0; t < x.size(); ++t) {
    if (t < 19) {
      CHECK(z.valid[t] == 0);
      continue;
    }
    double mu = 0.0;
    for (std::size_t i = t - 19; i <= t; ++i) mu += x[i] / 20.0;
    double ss = 0.0;
    for (std::size_t i = t - 19; i <= t; ++i) ss += (x[i] - mu) * (x[i] - mu);
    CHECK(z.valid[t] == 1);
    CHECK(std::abs(z.values[t] - (x[t] - mu) / std::sqrt(ss / 19.0)) <= 1e-12);
  }
  std::vector<double> ramp(20);
  for (std::size_t i = 0; i < 20; ++i) ramp[i] = static_cast<double>(i + 1);
  CHECK(std::abs(rolling_zscore(ramp).values[19] - 9.5 / std::sqrt(35.0)) <= 1e-12);
}

TEST_CASE("constant series give zero z-scores flagged degenerate") {
  const std::vector<double> flat(30, 7.0);
  const auto z = rolling_zscore(flat);
  for (std::size_t t = 19; t < 30; ++t) {
    CHECK(z.values[t] == 0.0);
    CHECK(z.degenerate[t] == 1);
  }
  CHECK_THROWS_AS(rolling_zscore(flat, 1), ConfigError);
}

TEST_CASE("moving-average ratios") {
  const std::vector<double> flat(30, 12.0);
  const auto ma5 = ma_ratio(flat, 5);
  for (std::size_t t = 0; t < 4; ++t) CHECK(std::isnan(ma5[t]));
  for (std::size_t t = 4; t < 30; ++t) CHECK(ma5[t] == 0.0);
  std::vector<double> walk{10, 11, 9, 12, 13, 8};
  for (double v : ma_ratio(walk, 1)) CHECK(v == 0.0);
  CHECK(std::abs(ma_ratio(walk, 3)[5] - ((12.0 + 13.0 + 8.0) / 3.0 / 8.0 - 1.0)) <= 1e-15);
  walk[2] = 0.0;
  CHECK_THROWS_AS(ma_ratio(walk, 3), DataError);
}

TEST_CASE("forward-return labels") {
  std::vector<double> close{100, 101, 99, 104, 110, 108};
  const auto y = make_label(close, 5);
  CHECK(std::abs(y[0] - 0.10) <= 1e-15);
  CHECK(std::abs(y[1] - (108.0 - 101.0) / 101.0) <= 1e-15);
  for (std::size_t t = 2; t < close.size(); ++t) CHECK(std::isnan(y[t]));
  for (double v : make_label(std::vector<double>(8, 3.0), 5)) CHECK((std::isnan(v) || v == 0.0));
  for (double v : make_label(close, 1)) CHECK(v == 0.0);
}

TEST_CASE("panel features come from the per-channel transforms") {
  MarketPanel p = synth_market(one_regime(Regime::noise, 0.0, 60));
  const std::size_t T = p.days();
  for (std::size_t s = 0; s < p.stocks(); s += 7) {
    std::span<const double> close(p.close.data() + s * T, T);
    const auto z = rolling_zscore(close);
    const auto ma5 = ma_ratio(close, 5);
    const auto y = make_label(close, 5);
    for (std::size_t t = 19; t < T; ++t) {
      CHECK(p.feature(s, t, 3) == z.values[t]);
      CHECK(p.feature(s, t, kMa5Channel) == ma5[t]);
      if (t + 5 <= T) CHECK(p.label(s, t) == y[t]);
    }
    for (std::size_t t = 0; t + 1 < T; ++t) CHECK(p.next_return(s, t) == close[t + 1] / close[t] - 1.0);
    CHECK(std::isnan(p.next_return(s, T - 1)));
  }
}

TEST_CASE("csv ingestion") {
  SUBCASE("two symbols over thirty days") {
    const auto path = write_csv("tips_ingest_ok.csv", 2, 30, 1);
    const auto rep = ingest_csv(path);
    CHECK(rep.panel.stocks() == 2);
    CHECK(rep.panel.days() == 30);
    CHECK(rep.rejected_symbols.empty());
    fs::remove(path);
  }
  SUBCASE("twenty-five days leave two usable days") {
    const auto path = write_csv("tips_ingest_25.csv", 3, 25, 2);
    const auto rep = ingest_csv(path, 5);
    const auto usable = rep.panel.usable_days();
    REQUIRE(usable.size() == 2);
    CHECK(usable[0] == 19);
    CHECK(usable[1] == 20);
    fs::remove(path);
  }
  SUBCASE("duplicate rows are rejected with their line") {
    const auto path = write_csv("tips_ingest_dup.csv", 2, 5, 3, "2020-01-01,S0,1,1,1,1,1\n");
    try {
      ingest_csv(path);
      FAIL("expected a data error");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find(":12:") != std::string::npos);
      CHECK(msg.find("duplicate") != std::string::npos);
      CHECK(msg.find("line 2") != std::string::npos);
    }
    fs::remove(path);
  }
  SUBCASE("malformed rows and prices") {
    for (const std::string bad : {"2020-01-07,S0,1,1,1\n", "2020-01-07,S0,1,1,1,-2,1\n", "2020-01-07,S0,1,x,1,1,1\n",
                                  "2020/01/07,S0,1,1,1,1,1\n"}) {
      const auto path = write_csv("tips_ingest_bad.csv", 1, 4, 4, bad);
      CHECK_THROWS_AS(ingest_csv(path), DataError);
      fs::remove(path);
    }
    CHECK_THROWS_AS(ingest_csv(fs::temp_directory_path() / "tips_missing_file.csv"), DataError);
  }
  SUBCASE("symbols with gaps are dropped") {
    const auto path = write_csv("tips_ingest_gap.csv", 2, 6, 5, "2020-01-01,ZZ,1,1,1,1,1\n");
    const auto rep = ingest_csv(path);
    CHECK(rep.panel.stocks() == 2);
    REQUIRE(rep.rejected_symbols.size() == 1);
    CHECK(rep.rejected_symbols[0] == "ZZ");
    fs::remove(path);
  }
}

TEST_CASE("panel cache round trip") {
  const MarketPanel p = synth_market(one_regime(Regime::momentum, 0.3, 50));
  const auto path = fs::temp_directory_path() / "tips_panel_rt.bin";
  save_panel(path, p);
  const MarketPanel q = load_panel(path);
  CHECK(q.symbols == p.symbols);
  CHECK(q.dates == p.dates);
  CHECK(q.horizon_q == p.horizon_q);
  auto same = [](const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
  };
  CHECK(same(q.features, p.features));
  CHECK(same(q.labels, p.labels));
  CHECK(same(q.next_returns, p.next_returns));
  CHECK(same(q.close, p.close));
  fs::remove(path);
}

TEST_CASE("chronological splits with an embargo") {
  const MarketPanel p = synth_market(one_regime(Regime::noise, 0.0, 200));
  const DataSplit split = make_split(p, SplitSpec{}, 20);
  const auto days = p.window_days(20);
  REQUIRE_FALSE(split.train.empty());
  REQUIRE_FALSE(split.valid.empty());
  REQUIRE_FALSE(split.test.empty());
  CHECK(split.train.back() < split.valid.front());
  CHECK(split.valid.back() < split.test.front());
  // The last training label ends strictly before the first validation day.
  CHECK(split.train.back() + p.horizon_q - 1 < split.valid.front());
  CHECK(split.valid.back() + p.horizon_q - 1 < split.test.front());
  CHECK(days.front() == 38);
  CHECK(days.back() == 195);
  CHECK_THROWS_AS(make_split(p, SplitSpec{0.9, 0.2, -1}, 20), ConfigError);
  const MarketPanel tiny = synth_market(one_regime(Regime::noise, 0.0, 45));
  CHECK_THROWS_AS(make_split(tiny, SplitSpec{}, 20), DataError);
}

TEST_CASE("windows slice the feature tensor") {
  const MarketPanel p = synth_market(one_regime(Regime::noise, 0.0, 60));
  const Tensor x = p.window(45, 20);
  CHECK(x.shape() == Shape{p.stocks(), 20, kFeatureCount});
  CHECK(x.data()[(2 * 20 + 19) * kFeatureCount + 4] == p.feature(2, 45, 4));
  CHECK(x.data()[(3 * 20 + 0) * kFeatureCount + 6] == p.feature(3, 26, 6));
  CHECK_THROWS_AS(p.window(10, 20), DataError);
}

TEST_CASE("synthetic market determinism and planted structure") {
  const SynthSpec spec = one_regime(Regime::momentum, 0.5, 400);
  const MarketPanel a = synth_market(spec), b = synth_market(spec);
  CHECK(std::memcmp(a.close.data(), b.close.data(), a.close.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(a.features.data(), b.features.data(), a.features.size() * sizeof(double)) == 0);
  SynthSpec other = spec;
  other.seed = 4;
  CHECK(synth_market(other).close != a.close);

  double momentum = 0.0;
  for (std::size_t s = 0; s < a.stocks(); ++s) momentum += lag_autocorr(log_returns(a, s), 1);
  CHECK(momentum / static_cast<double>(a.stocks()) > 0.2);

  const MarketPanel per = synth_market(one_regime(Regime::periodic, 3.0, 400, 5));
  double lag5 = 0.0;
  for (std::size_t s = 0; s < per.stocks(); ++s) lag5 += lag_autocorr(log_returns(per, s), 5);
  CHECK(lag5 / static_cast<double>(per.stocks()) > 0.3);

  const MarketPanel noise = synth_market(one_regime(Regime::noise, 0.0, 400));
  double ic = 0.0;
  std::size_t n = 0;
  for (std::size_t t : noise.usable_days()) {
    std::vector<double> f(noise.stocks()), y(noise.stocks());
    for (std::size_t s = 0; s < noise.stocks(); ++s) {
      f[s] = noise.feature(s, t, kMa5Channel);
      y[s] = noise.label(s, t);
    }
    ic += spearman(f, y);
    ++n;
  }
  CHECK(std::abs(ic / static_cast<double>(n)) <= 0.1);
}

TEST_CASE("synthetic spec validation and json") {
  SynthSpec spec = one_regime(Regime::periodic, 1.0, 100, 5);
  nlohmann::json j = spec;
  const SynthSpec back = j.get<SynthSpec>();
  CHECK(back.total_days() == 100);
  CHECK(back.segments[0].regime == Regime::periodic);
  CHECK(back.segments[0].period == 5);
  spec.segments[0].length = 0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = one_regime(Regime::momentum, 1.0, 10);
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = one_regime(Regime::noise, 0.0, 10);
  spec.stocks = 1;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  CHECK_THROWS_AS(regime_from_string("sideways"), ConfigError);
  const auto cal = business_days("2021-01-01", 3);
  CHECK(cal == std::vector<std::string>{"2021-01-01", "2021-01-04", "2021-01-05"});
}
