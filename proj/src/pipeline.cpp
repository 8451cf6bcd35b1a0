// SPDX-License-Identifier: Apache-2.0
#include "tips/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "tips/diagnostics.hpp"
#include "tips/error.hpp"
#include "tips/stats.hpp"

namespace tips {

namespace fs = std::filesystem;

namespace {

nlohmann::json number_or_string(double v) {
  if (std::isnan(v)) return nullptr;
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

// Unknown keys are almost always typos; refuse them instead of silently
// running with defaults.
void check_keys(const nlohmann::json& j, const nlohmann::json& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string relative_to(const fs::path& p, const fs::path& root) {
  return fs::relative(p, root).generic_string();
}

std::string teacher_file(std::size_t index, const PriorSpec& prior) {
  return fmt::format("{}_{}.ckpt", index, to_string(prior.kind));
}

std::string teacher_name(const PriorSpec& prior) { return std::string(to_string(prior.kind)); }

double lag1_autocorr(const std::vector<double>& x) {
  if (x.size() < 3) return std::nan("");
  const double m = mean_of(x);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    den += (x[i] - m) * (x[i] - m);
    if (i > 0) num += (x[i] - m) * (x[i - 1] - m);
  }
  return den > 0.0 ? num / den : std::nan("");
}

nlohmann::json segment_summary(const MarketPanel& panel, const SynthSpec& spec) {
  nlohmann::json out = nlohmann::json::array();
  std::size_t start = 0;
  for (const auto& seg : spec.segments) {
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t s = 0; s < panel.stocks(); ++s) {
      std::vector<double> r;
      for (std::size_t t = std::max<std::size_t>(start, 1); t < start + seg.length; ++t) {
        r.push_back(std::log(panel.close[s * panel.days() + t] / panel.close[s * panel.days() + t - 1]));
      }
      const double ac = lag1_autocorr(r);
      if (std::isfinite(ac)) {
        total += ac;
        ++counted;
      }
    }
    out.push_back({{"regime", std::string(to_string(seg.regime))},
                   {"length", seg.length},
                   {"strength", seg.strength},
                   {"period", seg.period},
                   {"lag1_autocorrelation", number_or_string(counted ? total / counted : std::nan(""))}});
    start += seg.length;
  }
  return out;
}

DataSplit run_split(const RunConfig& cfg, const MarketPanel& panel) {
  return make_split(panel, cfg.split, cfg.model.lookback);
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw DataError("cannot create directory " + p.string() + ": " + ec.message());
}

}  // namespace

// --- config ------------------------------------------------------------------------

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.data.synth.stocks = 50;
  c.data.synth.segments = {{Regime::momentum, 250, 0.3, 5},
                           {Regime::periodic, 250, 1.0, 5},
                           {Regime::mean_revert, 250, 0.3, 5},
                           {Regime::noise, 250, 0.0, 5}};
  return c;
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  nlohmann::json synth = c.data.synth;
  synth.erase("horizon_q");
  j = nlohmann::json{
      {"data", {{"csv", c.data.csv}, {"horizon_q", c.data.horizon_q}, {"synth", synth}}},
      {"split", c.split},
      {"model", c.model},
      {"train", c.train},
      {"teachers", c.teachers},
      {"distill", c.distill},
      {"backtest", {{"k", c.backtest.k}, {"window", c.backtest.window}, {"costs", c.backtest.costs}}},
      {"seeds", c.seeds},
      {"workers", c.workers},
      {"regime_quantile", c.regime_quantile},
  };
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  const RunConfig d = RunConfig::defaults();
  const nlohmann::json ref = d;
  check_keys(j, ref, "run config");
  try {
    c = d;
    if (j.contains("data")) {
      const auto& data = j.at("data");
      check_keys(data, ref.at("data"), "data");
      c.data.csv = data.value("csv", d.data.csv);
      c.data.horizon_q = data.value("horizon_q", d.data.horizon_q);
      if (data.contains("synth")) {
        check_keys(data.at("synth"), ref.at("data").at("synth"), "data.synth");
        for (const auto& seg : data.at("synth").value("segments", nlohmann::json::array())) {
          check_keys(seg, nlohmann::json{{"regime", 0}, {"length", 0}, {"strength", 0}, {"period", 0}},
                     "data.synth.segments");
        }
        nlohmann::json synth = ref.at("data").at("synth");
        synth.update(data.at("synth"));
        c.data.synth = synth.get<SynthSpec>();
      }
    }
    auto section = [&](const char* key, auto& target) {
      if (!j.contains(key)) return;
      check_keys(j.at(key), ref.at(key), key);
      nlohmann::json merged = ref.at(key);
      merged.update(j.at(key));
      merged.get_to(target);
    };
    section("split", c.split);
    section("model", c.model);
    section("train", c.train);
    section("distill", c.distill);
    if (j.contains("backtest")) {
      const auto& bt = j.at("backtest");
      check_keys(bt, ref.at("backtest"), "backtest");
      c.backtest.k = bt.value("k", d.backtest.k);
      c.backtest.window = bt.value("window", d.backtest.window);
      if (bt.contains("costs")) c.backtest.costs = bt.at("costs").get<CostModel>();
    }
    c.teachers = j.value("teachers", d.teachers);
    c.seeds = j.value("seeds", d.seeds);
    c.workers = j.value("workers", d.workers);
    c.regime_quantile = j.value("regime_quantile", d.regime_quantile);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
}

RunConfig RunConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_bytes(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return j.get<RunConfig>();
}

void RunConfig::validate() const {
  if (data.synthetic()) {
    data.synth.validate();
  } else if (!fs::exists(data.csv)) {
    throw DataError("data.csv does not exist: " + data.csv);
  }
  if (data.horizon_q == 0) throw ConfigError("data.horizon_q must be positive");
  model.validate();
  if (model.features != kFeatureCount) {
    throw ConfigError(fmt::format("model.features must be {} for market panels", kFeatureCount));
  }
  train.validate();
  distill.validate();
  teacher_set().validate();
  backtest.costs.validate();
  if (backtest.k == 0 || backtest.window == 0) throw ConfigError("backtest k and window must be positive");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("seeds must be distinct");
  }
  if (workers == 0) throw ConfigError("workers must be at least 1");
  if (!(regime_quantile > 0.0 && regime_quantile <= 0.5)) {
    throw ConfigError("regime_quantile must lie in (0, 0.5]");
  }
}

TeacherSetSpec RunConfig::teacher_set() const {
  TeacherSetSpec set = TeacherSetSpec::subset(teachers);
  if (set.teachers.empty()) throw ConfigError("teacher subset '" + teachers + "' selects no teachers");
  // The canonical set assumes 4 heads; other widths take the per-head slopes
  // for their own head count and cycle through the periods.
  for (PriorSpec& p : set.teachers) {
    if (p.kind == PriorKind::alibi) p.slopes = alibi_slopes(model.heads);
    if (p.kind == PriorKind::fixed_periodic && p.periods.size() != model.heads) {
      const std::vector<double> base = p.periods;
      p.periods.resize(model.heads);
      for (std::size_t h = 0; h < model.heads; ++h) p.periods[h] = base[h % base.size()];
    }
  }
  return set;
}

std::string RunConfig::hash() const { return fnv1a_hex(nlohmann::json(*this).dump()); }

std::string RunConfig::teacher_hash() const {
  const nlohmann::json all = *this;
  const nlohmann::json part{{"data", all.at("data")},   {"split", all.at("split")},
                            {"model", all.at("model")}, {"train", all.at("train")},
                            {"teachers", all.at("teachers")}};
  return fnv1a_hex(part.dump());
}

// --- files -------------------------------------------------------------------------

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

std::string file_hash(const fs::path& path) { return fnv1a_hex(read_bytes(path)); }

void write_json(const fs::path& path, const nlohmann::json& j) {
  ensure_dir(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw DataError("failed writing " + path.string());
  }
  fs::rename(tmp, path);
}

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_bytes(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("corrupt JSON in " + path.string() + ": " + e.what());
  }
}

// --- run directory -----------------------------------------------------------------

void RunDir::record(const RunConfig& cfg, const fs::path& artifact, const std::string& stage,
                    std::int64_t seed) const {
  nlohmann::json m = fs::exists(manifest()) ? read_json(manifest())
                                            : nlohmann::json{{"artifacts", nlohmann::json::object()}};
  m["config_hash"] = cfg.hash();
  nlohmann::json entry{{"hash", file_hash(artifact)}, {"stage", stage}, {"recorded_at", utc_now()}};
  if (seed >= 0) entry["seed"] = seed;
  m["artifacts"][relative_to(artifact, root_)] = entry;
  write_json(manifest(), m);
}

void RunDir::verify() const {
  if (!fs::exists(manifest())) throw DataError("no run manifest in " + root_.string());
  const nlohmann::json m = read_json(manifest());
  for (const auto& [rel, entry] : m.at("artifacts").items()) {
    const fs::path p = root_ / rel;
    if (!fs::exists(p)) throw DataError("manifest artifact missing: " + p.string());
    if (file_hash(p) != entry.at("hash").get<std::string>()) {
      throw DataError("manifest artifact modified: " + p.string());
    }
  }
}

// --- data --------------------------------------------------------------------------

nlohmann::json to_json_value(const DataSummary& s) {
  return nlohmann::json{{"stocks", s.stocks},
                        {"days", s.days},
                        {"usable_days", s.usable_days},
                        {"rejected_symbols", s.rejected_symbols},
                        {"segments", s.segments}};
}

namespace {

DataSummary finish_data_stage(const RunConfig& cfg, const RunDir& dir, const MarketPanel& panel,
                              DataSummary summary, const std::string& stage) {
  ensure_dir(dir.root());
  save_panel(dir.panel(), panel);
  summary.stocks = panel.stocks();
  summary.days = panel.days();
  summary.usable_days = panel.usable_days().size();
  write_json(dir.root() / "data.json", to_json_value(summary));
  dir.record(cfg, dir.panel(), stage);
  dir.record(cfg, dir.root() / "data.json", stage);
  return summary;
}

}  // namespace

DataSummary stage_synth(const RunConfig& cfg, const RunDir& dir) {
  if (!cfg.data.synthetic()) throw ConfigError("synth needs a synthetic data source (data.csv is set)");
  SynthSpec spec = cfg.data.synth;
  spec.horizon_q = cfg.data.horizon_q;
  const MarketPanel panel = synth_market(spec);
  DataSummary summary;
  summary.segments = segment_summary(panel, spec);
  return finish_data_stage(cfg, dir, panel, std::move(summary), "synth");
}

DataSummary stage_ingest(const RunConfig& cfg, const RunDir& dir) {
  if (cfg.data.synthetic()) throw ConfigError("ingest needs data.csv");
  IngestReport rep = ingest_csv(cfg.data.csv, cfg.data.horizon_q);
  DataSummary summary;
  summary.rejected_symbols = rep.rejected_symbols;
  return finish_data_stage(cfg, dir, rep.panel, std::move(summary), "ingest");
}

MarketPanel load_run_panel(const RunDir& dir) {
  if (!fs::exists(dir.panel())) {
    throw DataError("no panel cache at " + dir.panel().string() + "; run synth or ingest first");
  }
  return load_panel(dir.panel());
}

// --- teachers ----------------------------------------------------------------------

nlohmann::json to_json_value(const TeacherManifest& m) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& t : m.teachers) {
    list.push_back({{"prior", t.prior},
                    {"kind", teacher_name(t.prior)},
                    {"file", t.file},
                    {"hash", t.hash},
                    {"valid_rank_ic", number_or_string(t.valid_rank_ic)}});
  }
  return nlohmann::json{{"config_hash", m.config_hash}, {"seed", m.seed}, {"teachers", list}};
}

TeacherManifest teacher_manifest_from_json(const nlohmann::json& j) {
  try {
    TeacherManifest m;
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& t : j.at("teachers")) {
      TeacherEntry e;
      e.prior = t.at("prior").get<PriorSpec>();
      e.file = t.at("file").get<std::string>();
      e.hash = t.at("hash").get<std::string>();
      e.valid_rank_ic = t.at("valid_rank_ic").is_number() ? t.at("valid_rank_ic").get<double>() : std::nan("");
      m.teachers.push_back(std::move(e));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed teacher manifest: ") + e.what());
  }
}

namespace {

bool manifest_reusable(const RunConfig& cfg, const RunDir& dir, std::uint64_t seed, const TeacherSetSpec& set,
                       TeacherManifest& out) {
  if (!fs::exists(dir.teacher_manifest(seed))) return false;
  const TeacherManifest m = teacher_manifest_from_json(read_json(dir.teacher_manifest(seed)));
  if (m.config_hash != cfg.teacher_hash() || m.seed != seed || m.teachers.size() != set.size()) return false;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& e = m.teachers[i];
    if (!(e.prior == set.teachers[i])) return false;
    const fs::path p = dir.teachers(seed) / e.file;
    if (!fs::exists(p) || file_hash(p) != e.hash) return false;
  }
  out = m;
  return true;
}

}  // namespace

TeacherStageResult stage_train_teachers(const RunConfig& cfg, const RunDir& dir, std::uint64_t seed,
                                        std::ostream* log) {
  const TeacherSetSpec set = cfg.teacher_set();
  TeacherStageResult result;
  if (manifest_reusable(cfg, dir, seed, set, result.manifest)) {
    result.reused = true;
    if (log) *log << "seed " << seed << ": teacher checkpoints up to date, nothing to train\n";
    return result;
  }
  const MarketPanel panel = load_run_panel(dir);
  const DataSplit split = run_split(cfg, panel);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  const std::vector<TrainResult> trained = train_all_teachers(panel, split, set, cfg.model, tc, cfg.workers);

  ensure_dir(dir.teachers(seed));
  TeacherManifest& m = result.manifest;
  m.config_hash = cfg.teacher_hash();
  m.seed = seed;
  for (std::size_t i = 0; i < trained.size(); ++i) {
    TeacherEntry e;
    e.prior = set.teachers[i];
    e.file = teacher_file(i, e.prior);
    const fs::path p = dir.teachers(seed) / e.file;
    trained[i].params.save(p);
    e.hash = file_hash(p);
    e.valid_rank_ic = split.valid.empty()
                          ? std::nan("")
                          : mean_rank_ic(Model::wrap(e.prior, trained[i].params), panel, split.valid);
    dir.record(cfg, p, "train-teachers", static_cast<std::int64_t>(seed));
    if (log) {
      *log << fmt::format("seed {}: {:<15} train loss {:+.4f}  valid rank IC {:+.4f}\n", seed,
                          teacher_name(e.prior), trained[i].log.back().train_loss, e.valid_rank_ic);
    }
    m.teachers.push_back(std::move(e));
  }
  write_json(dir.teacher_manifest(seed), to_json_value(m));
  dir.record(cfg, dir.teacher_manifest(seed), "train-teachers", static_cast<std::int64_t>(seed));
  return result;
}

std::vector<Model> load_teachers(const RunConfig& cfg, const RunDir& dir, std::uint64_t seed) {
  if (!fs::exists(dir.teacher_manifest(seed))) {
    throw DataError(fmt::format("no teacher manifest for seed {} at {}; run train-teachers first", seed,
                                dir.teacher_manifest(seed).string()));
  }
  const TeacherManifest m = teacher_manifest_from_json(read_json(dir.teacher_manifest(seed)));
  if (m.config_hash != cfg.teacher_hash()) {
    throw ConfigError(fmt::format("teachers for seed {} were trained under a different configuration; "
                                  "rerun train-teachers",
                                  seed));
  }
  std::vector<Model> out;
  for (const auto& e : m.teachers) {
    const fs::path p = dir.teachers(seed) / e.file;
    if (!fs::exists(p)) throw DataError("missing teacher checkpoint " + p.string());
    if (file_hash(p) != e.hash) throw DataError("teacher checkpoint " + p.string() + " does not match its manifest");
    out.push_back(Model::wrap(e.prior, ModelParams::load(p, cfg.model, e.prior)));
  }
  if (out.empty()) throw DataError("teacher manifest for seed " + std::to_string(seed) + " lists no teachers");
  return out;
}

// --- student -----------------------------------------------------------------------

StudentResult stage_distill(const RunConfig& cfg, const RunDir& dir, std::uint64_t seed, std::ostream* log) {
  const std::vector<Model> teachers = load_teachers(cfg, dir, seed);
  const MarketPanel panel = load_run_panel(dir);
  const DataSplit split = run_split(cfg, panel);
  EpochCallback cb;
  if (log) {
    cb = [&](const EpochLog& e) {
      *log << fmt::format("seed {}: student epoch {:>3}  train {:+.5f}  valid {:+.5f}\n", seed, e.epoch,
                          e.train_loss, e.valid_loss);
    };
  }
  StudentResult res = train_student(panel, split, teachers, cfg.model, cfg.distill, seed, cb);
  ensure_dir(dir.seed(seed));
  res.params.save(dir.student(seed));

  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : res.log) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", number_or_string(e.train_loss)},
                      {"valid_loss", number_or_string(e.valid_loss)}});
  }
  const nlohmann::json info{{"seed", seed},
                            {"teachers", teachers.size()},
                            {"teacher_manifest_hash", file_hash(dir.teacher_manifest(seed))},
                            {"distill", cfg.distill},
                            {"swa_snapshots", res.snapshots},
                            {"log", epochs}};
  write_json(dir.seed(seed) / "student.json", info);
  dir.record(cfg, dir.student(seed), "distill", static_cast<std::int64_t>(seed));
  dir.record(cfg, dir.seed(seed) / "student.json", "distill", static_cast<std::int64_t>(seed));
  return res;
}

Model load_student(const RunConfig& cfg, const RunDir& dir, std::uint64_t seed) {
  if (!fs::exists(dir.student(seed))) {
    throw DataError(fmt::format("no student checkpoint for seed {}; run distill first", seed));
  }
  return Model::wrap(PriorSpec::vanilla(), ModelParams::load(dir.student(seed), cfg.model, PriorSpec::vanilla()));
}

// --- predictions and backtests -----------------------------------------------------

Matrix realised_returns(const MarketPanel& panel, const std::vector<std::size_t>& days) {
  Matrix R(days.size(), panel.stocks());
  for (std::size_t d = 0; d < days.size(); ++d) {
    const std::vector<double> row = panel.return_row(days[d]);
    std::copy(row.begin(), row.end(), R.row(d).begin());
  }
  return R;
}

Matrix model_predictions(const RunConfig& cfg, const RunDir& dir, std::uint64_t seed, const std::string& target,
                         const MarketPanel& panel, const std::vector<std::size_t>& days) {
  if (target == "student") return predict(load_student(cfg, dir, seed), panel, days);
  const std::vector<Model> teachers = load_teachers(cfg, dir, seed);
  if (target == "ensemble") {
    std::vector<Matrix> logits;
    for (const auto& t : teachers) logits.push_back(predict(t, panel, days));
    return average_matrices(logits);
  }
  std::string names;
  for (const auto& t : teachers) {
    if (teacher_name(t.prior) == target) return predict(t, panel, days);
    names += (names.empty() ? "" : ", ") + teacher_name(t.prior);
  }
  throw ConfigError("unknown backtest target '" + target + "'; expected student, ensemble or one of: " + names);
}

nlohmann::json stage_backtest(const RunConfig& cfg, const RunDir& dir, std::uint64_t seed,
                              const std::string& target) {
  const MarketPanel panel = load_run_panel(dir);
  const DataSplit split = run_split(cfg, panel);
  if (split.test.empty()) throw DataError("the test split is empty");
  const Matrix P = model_predictions(cfg, dir, seed, target, panel, split.test);
  const Matrix R = realised_returns(panel, split.test);
  const PortfolioRun run = portfolio_returns(P, R, cfg.backtest.k, cfg.backtest.window);
  const BacktestReport rep = make_report(run, cfg.backtest.costs);

  nlohmann::json out = to_json_value(rep);
  out["model"] = target;
  out["seed"] = seed;
  out["k"] = cfg.backtest.k;
  out["window"] = cfg.backtest.window;
  out["first_day"] = panel.dates[split.test.front()];
  out["last_day"] = panel.dates[split.test.back()];

  ensure_dir(dir.backtest(seed));
  const fs::path json_path = dir.backtest(seed) / (target + ".json");
  const fs::path csv_path = dir.backtest(seed) / (target + ".csv");
  const fs::path pred_path = dir.backtest(seed) / (target + ".pred.csv");
  write_json(json_path, out);

  std::vector<std::string> dates;
  for (std::size_t t : split.test) dates.push_back(panel.dates[t]);
  write_daily_csv(csv_path, dates, run.daily, apply_costs(run.daily, cfg.backtest.costs));
  {
    std::ofstream pred(pred_path, std::ios::binary);
    if (!pred) throw DataError("cannot write " + pred_path.string());
    pred << "date";
    for (const auto& s : panel.symbols) pred << ',' << s;
    pred << '\n';
    for (std::size_t d = 0; d < P.rows; ++d) {
      pred << dates[d];
      for (double v : P.row(d)) pred << fmt::format(",{:.17g}", v);
      pred << '\n';
    }
  }
  for (const auto& p : {json_path, csv_path, pred_path}) {
    dir.record(cfg, p, "backtest", static_cast<std::int64_t>(seed));
  }
  return out;
}

// --- analysis ----------------------------------------------------------------------

namespace {

std::vector<double> day_attention(const Model& m, const Tensor& x, std::span<const std::size_t> selected,
                                  std::span<const double> weights, std::size_t lookback) {
  ForwardOptions opts;
  opts.capture_attention = true;
  const ForwardArtifacts art = m.forward(x, opts);
  std::vector<double> map = aggregate_attention(art.attention, selected, weights);
  const std::size_t tokens = m.context->tokens;
  if (tokens != lookback) map = upsample_attention(map, tokens, lookback);
  return map;
}

// Alignment of the student's attention with the teachers' on the student's own picks.
AlignmentTable seed_alignment(const Model& student, const std::vector<Model>& teachers, const MarketPanel& panel,
                              const std::vector<std::size_t>& days, const PortfolioRun& run,
                              std::size_t lookback) {
  std::vector<std::vector<double>> s_maps;
  std::vector<std::vector<std::vector<double>>> t_maps(teachers.size());
  std::vector<PriorKind> kinds;
  for (const auto& t : teachers) kinds.push_back(t.prior.kind);
  for (std::size_t d = 0; d < days.size(); ++d) {
    const Tensor x = panel.window(days[d], lookback);
    s_maps.push_back(day_attention(student, x, run.selected[d], run.weights[d], lookback));
    for (std::size_t m = 0; m < teachers.size(); ++m) {
      t_maps[m].push_back(day_attention(teachers[m], x, run.selected[d], run.weights[d], lookback));
    }
  }
  return attention_alignment(s_maps, t_maps, kinds);
}

}  // namespace

nlohmann::json stage_analyze(const RunConfig& cfg, const RunDir& dir) {
  const MarketPanel panel = load_run_panel(dir);
  const DataSplit split = run_split(cfg, panel);
  const std::vector<std::size_t>& days = split.test;
  if (days.empty()) throw DataError("the test split is empty");
  const Matrix R = realised_returns(panel, days);
  const std::size_t k = cfg.backtest.k, W = cfg.backtest.window;

  std::vector<Matrix> student_runs, ensemble_runs, vanilla_runs;
  std::vector<std::string> names;
  std::map<std::string, std::vector<double>> per_teacher_similarity;
  nlohmann::json similarity_per_seed = nlohmann::json::object();
  std::map<std::string, std::size_t> alignment_counts;
  std::size_t alignment_days = 0;
  double inference_student = 0.0, inference_ensemble = 0.0;
  std::size_t teacher_count = 0;

  for (std::uint64_t seed : cfg.seeds) {
    const Model student = load_student(cfg, dir, seed);
    const std::vector<Model> teachers = load_teachers(cfg, dir, seed);
    teacher_count = teachers.size();

    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    const Matrix S = predict(student, panel, days);
    const auto t1 = clock::now();
    std::vector<Matrix> T;
    for (const auto& t : teachers) T.push_back(predict(t, panel, days));
    const auto t2 = clock::now();
    inference_student += std::chrono::duration<double>(t1 - t0).count();
    inference_ensemble += std::chrono::duration<double>(t2 - t1).count();

    student_runs.push_back(S);
    ensemble_runs.push_back(average_matrices(T));
    for (std::size_t m = 0; m < teachers.size(); ++m) {
      if (teachers[m].prior.kind == PriorKind::vanilla) {
        vanilla_runs.push_back(T[m]);
        break;
      }
    }

    const RankSimilarity sim = teacher_student_rank_similarity(S, T);
    nlohmann::json seed_sim = to_json_value(sim);
    similarity_per_seed[std::to_string(seed)] = seed_sim;
    for (std::size_t m = 0; m < teachers.size(); ++m) {
      per_teacher_similarity[fmt::format("{}_{}", m, teacher_name(teachers[m].prior))].push_back(sim.per_teacher[m]);
    }

    const PortfolioRun run = portfolio_returns(S, R, k, W);
    const AlignmentTable align = seed_alignment(student, teachers, panel, days, run, cfg.model.lookback);
    for (const auto& [key, n] : align.counts) alignment_counts[key] += n;
    alignment_days += align.days;
  }

  nlohmann::json out;
  out["seeds"] = cfg.seeds;
  out["test_days"] = days.size();
  nlohmann::json warnings = nlohmann::json::array();
  if (cfg.seeds.size() < 5) {
    warnings.push_back(fmt::format("low power: {} seed run(s); tests on seed-averaged series are weak",
                                   cfg.seeds.size()));
  }

  const PortfolioRun student_run = portfolio_returns(average_matrices(student_runs), R, k, W);
  const PortfolioRun ensemble_run = portfolio_returns(average_matrices(ensemble_runs), R, k, W);
  nlohmann::json attribution, conditional;
  attribution["vs_ensemble"] = to_json_value(ols_attribution(student_run.daily, ensemble_run.daily));
  conditional["vs_ensemble"] = to_json_value(
      conditional_similarity(student_run, ensemble_run, panel, days, cfg.model.lookback, cfg.regime_quantile));
  if (vanilla_runs.size() == cfg.seeds.size()) {
    const PortfolioRun vanilla_run = portfolio_returns(average_matrices(vanilla_runs), R, k, W);
    attribution["vs_vanilla"] = to_json_value(ols_attribution(student_run.daily, vanilla_run.daily));
    conditional["vs_vanilla"] = to_json_value(
        conditional_similarity(student_run, vanilla_run, panel, days, cfg.model.lookback, cfg.regime_quantile));
  } else {
    warnings.push_back("no vanilla teacher in the teacher set; vanilla comparisons skipped");
  }
  for (const auto& [key, c] : conditional.items()) {
    if (c.value("low_power", false)) warnings.push_back("conditional similarity " + key + " has low power");
  }
  out["attribution"] = attribution;
  out["conditional_similarity"] = conditional;

  nlohmann::json per_teacher = nlohmann::json::object();
  double total = 0.0;
  for (const auto& [name, v] : per_teacher_similarity) {
    per_teacher[name] = mean_of(v);
    total += mean_of(v);
  }
  out["rank_similarity"] = {{"per_teacher", per_teacher},
                            {"mean", total / static_cast<double>(per_teacher_similarity.size())},
                            {"per_seed", similarity_per_seed}};

  nlohmann::json fractions = nlohmann::json::object();
  for (const auto& [key, n] : alignment_counts) {
    fractions[key] = static_cast<double>(n) / static_cast<double>(alignment_days);
  }
  out["attention_alignment"] = {{"fractions", fractions}, {"counts", alignment_counts}, {"days", alignment_days}};
  out["inference"] = {{"forward_passes_student", 1}, {"forward_passes_ensemble", teacher_count}};
  out["warnings"] = warnings;

  write_json(dir.root() / "analysis.json", out);
  dir.record(cfg, dir.root() / "analysis.json", "analyze");

  const double n = static_cast<double>(cfg.seeds.size());
  const nlohmann::json timing{
      {"student_seconds_per_seed", inference_student / n},
      {"ensemble_seconds_per_seed", inference_ensemble / n},
      {"measured_ratio", inference_student > 0.0 ? inference_ensemble / inference_student : std::nan("")},
      {"forward_passes_student", 1},
      {"forward_passes_ensemble", teacher_count},
      {"days", days.size()}};
  write_json(dir.root() / "inference_cost.json", timing);
  dir.record(cfg, dir.root() / "inference_cost.json", "analyze");
  return out;
}

// --- report ------------------------------------------------------------------------

namespace {

double as_number(const nlohmann::json& v) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
  }
  return std::nan("");
}

}  // namespace

nlohmann::json stage_report(const RunConfig& cfg, const RunDir& dir, std::ostream* table) {
  std::vector<std::string> targets{"student", "ensemble"};
  for (const auto& p : cfg.teacher_set().teachers) {
    if (p.kind == PriorKind::vanilla) {
      targets.emplace_back("vanilla");
      break;
    }
  }
  const std::vector<std::string> metrics{"AR", "SR", "MaxDD", "CR"};

  nlohmann::json models = nlohmann::json::object();
  for (const auto& target : targets) {
    nlohmann::json per_seed = nlohmann::json::object();
    std::map<std::string, std::vector<double>> gross, net;
    std::vector<double> top1;
    for (std::uint64_t seed : cfg.seeds) {
      const nlohmann::json r = stage_backtest(cfg, dir, seed, target);
      per_seed[std::to_string(seed)] = {{"gross", r.at("gross")}, {"net", r.at("net")},
                                        {"top1_concentration", r.at("top1_concentration")}};
      for (const auto& m : metrics) {
        gross[m].push_back(as_number(r.at("gross").at(m)));
        net[m].push_back(as_number(r.at("net").at(m)));
      }
      top1.push_back(as_number(r.at("top1_concentration")));
    }
    nlohmann::json mean_gross, mean_net;
    for (const auto& m : metrics) {
      mean_gross[m] = number_or_string(mean_of(gross[m]));
      mean_net[m] = number_or_string(mean_of(net[m]));
    }
    models[target] = {{"per_seed", per_seed},
                      {"mean", {{"gross", mean_gross}, {"net", mean_net}, {"top1_concentration", mean_of(top1)}}}};
  }

  const nlohmann::json report{{"config_hash", cfg.hash()},
                              {"seeds", cfg.seeds},
                              {"k", cfg.backtest.k},
                              {"window", cfg.backtest.window},
                              {"annualized_cost", cfg.backtest.costs.annualized_cost()},
                              {"models", models}};
  write_json(dir.root() / "report.json", report);
  dir.record(cfg, dir.root() / "report.json", "report");

  if (table) {
    auto cell = [](const nlohmann::json& v) {
      const double x = as_number(v);
      return std::isfinite(x) ? fmt::format("{:>9.4f}", x) : fmt::format("{:>9}", v.dump());
    };
    *table << fmt::format("{:<10}{:>9}{:>9}{:>9}{:>9}{:>9}{:>9}\n", "model", "AR", "SR", "MaxDD", "CR", "net AR",
                          "net SR");
    for (const auto& target : targets) {
      const auto& g = models[target]["mean"]["gross"];
      const auto& n = models[target]["mean"]["net"];
      *table << fmt::format("{:<10}{}{}{}{}{}{}\n", target, cell(g["AR"]), cell(g["SR"]), cell(g["MaxDD"]),
                            cell(g["CR"]), cell(n["AR"]), cell(n["SR"]));
    }
    *table << fmt::format("means over {} seed(s); k={}, W={}\n", cfg.seeds.size(), cfg.backtest.k,
                          cfg.backtest.window);
  }
  return report;
}

}  // namespace tips
