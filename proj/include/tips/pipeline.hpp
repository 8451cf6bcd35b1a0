// SPDX-License-Identifier: Apache-2.0
//
// End-to-end run orchestration on a run directory:
//
//   <root>/panel.bin                    cached MarketPanel
//   <root>/data.json                    data summary
//   <root>/seed-<n>/teachers/*.ckpt     one checkpoint per teacher prior
//   <root>/seed-<n>/teachers/manifest.json
//   <root>/seed-<n>/student.ckpt, student.json
//   <root>/seed-<n>/backtest/<model>.{json,csv,pred}
//   <root>/analysis.json, inference_cost.json, report.json
//   <root>/manifest.json                artifact hashes for the whole run
//
// Every stage is deterministic in (config, seed); timings only ever land in
// inference_cost.json and the manifest timestamps.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "tips/backtest.hpp"
#include "tips/data.hpp"
#include "tips/model.hpp"
#include "tips/objectives.hpp"
#include "tips/priors.hpp"
#include "tips/training.hpp"

namespace tips {

struct DataSource {
  // Empty means synthetic.
  std::string csv;
  SynthSpec synth;
  std::size_t horizon_q = 5;

  bool synthetic() const { return csv.empty(); }
};

struct BacktestSettings {
  std::size_t k = 5;
  std::size_t window = 5;
  CostModel costs = CostModel::preset("zero");
};

struct RunConfig {
  DataSource data;
  SplitSpec split;
  ModelConfig model;
  TrainConfig train;
  // "all" or a comma separated list of bias groups.
  std::string teachers = "all";
  DistillConfig distill;
  BacktestSettings backtest;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t workers = 1;
  double regime_quantile = 0.30;

  static RunConfig defaults();
  // Strict about keys and types; call validate() once overrides are applied.
  static RunConfig load(const std::filesystem::path& path);

  void validate() const;
  TeacherSetSpec teacher_set() const;
  // FNV-1a of the canonical JSON, as 16 hex digits.
  std::string hash() const;
  // Hash of the fields that determine teacher checkpoints only.
  std::string teacher_hash() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

std::string fnv1a_hex(std::string_view bytes);
std::string file_hash(const std::filesystem::path& path);
// Deterministic JSON text (sorted keys, two-space indent, trailing newline).
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

// --- run directory ------------------------------------------------------------

class RunDir {
 public:
  explicit RunDir(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path panel() const { return root_ / "panel.bin"; }
  std::filesystem::path seed(std::uint64_t s) const { return root_ / ("seed-" + std::to_string(s)); }
  std::filesystem::path teachers(std::uint64_t s) const { return seed(s) / "teachers"; }
  std::filesystem::path teacher_manifest(std::uint64_t s) const { return teachers(s) / "manifest.json"; }
  std::filesystem::path student(std::uint64_t s) const { return seed(s) / "student.ckpt"; }
  std::filesystem::path backtest(std::uint64_t s) const { return seed(s) / "backtest"; }
  std::filesystem::path manifest() const { return root_ / "manifest.json"; }

  // Records (or refreshes) an artifact's hash in the run manifest.
  void record(const RunConfig& cfg, const std::filesystem::path& artifact, const std::string& stage,
              std::int64_t seed = -1) const;
  // Throws DataError naming the first missing or modified artifact.
  void verify() const;

 private:
  std::filesystem::path root_;
};

// --- stages ---------------------------------------------------------------------

struct DataSummary {
  std::size_t stocks = 0;
  std::size_t days = 0;
  std::size_t usable_days = 0;
  std::vector<std::string> rejected_symbols;
  // Per synthetic segment: regime, length and lag-1 autocorrelation of daily returns.
  nlohmann::json segments = nlohmann::json::array();
};

nlohmann::json to_json_value(const DataSummary& s);

DataSummary stage_synth(const RunConfig& cfg, const RunDir& dir);
DataSummary stage_ingest(const RunConfig& cfg, const RunDir& dir);
// Loads the cached panel; DataError when absent.
MarketPanel load_run_panel(const RunDir& dir);

struct TeacherEntry {
  PriorSpec prior;
  std::string file;  // relative to the teachers directory
  std::string hash;
  double valid_rank_ic = 0.0;
};

struct TeacherManifest {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<TeacherEntry> teachers;
};

nlohmann::json to_json_value(const TeacherManifest& m);
TeacherManifest teacher_manifest_from_json(const nlohmann::json& j);

struct TeacherStageResult {
  TeacherManifest manifest;
  bool reused = false;
};

// Reuses an existing manifest whose config hash and checkpoint hashes match.
TeacherStageResult stage_train_teachers(const RunConfig& cfg, const RunDir& dir, std::uint64_t seed,
                                        std::ostream* log = nullptr);
// Loads every teacher listed in the seed's manifest, checking hashes.
std::vector<Model> load_teachers(const RunConfig& cfg, const RunDir& dir, std::uint64_t seed);

StudentResult stage_distill(const RunConfig& cfg, const RunDir& dir, std::uint64_t seed,
                            std::ostream* log = nullptr);
Model load_student(const RunConfig& cfg, const RunDir& dir, std::uint64_t seed);

// "student", "ensemble" (mean teacher logits) or a teacher prior name.
Matrix model_predictions(const RunConfig& cfg, const RunDir& dir, std::uint64_t seed,
                         const std::string& target, const MarketPanel& panel,
                         const std::vector<std::size_t>& days);
// Realised next-day returns for `days`, [days x S].
Matrix realised_returns(const MarketPanel& panel, const std::vector<std::size_t>& days);

nlohmann::json stage_backtest(const RunConfig& cfg, const RunDir& dir, std::uint64_t seed,
                              const std::string& target);
nlohmann::json stage_analyze(const RunConfig& cfg, const RunDir& dir);
// Aggregates per-seed metric reports into report.json and renders a table.
nlohmann::json stage_report(const RunConfig& cfg, const RunDir& dir, std::ostream* table = nullptr);

}  // namespace tips
