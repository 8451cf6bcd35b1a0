// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "tips/error.hpp"
#include "tips/pipeline.hpp"

using namespace tips;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("tips_unit_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

RunConfig tiny_run() {
  RunConfig cfg = RunConfig::defaults();
  cfg.data.synth.stocks = 8;
  cfg.data.synth.seed = 2;
  cfg.data.synth.segments = {{Regime::momentum, 70, 0.4, 5}};
  cfg.model.lookback = 8;
  cfg.model.d_model = 8;
  cfg.model.d_ff = 16;
  cfg.model.heads = 2;
  cfg.model.layers = 1;
  cfg.train.epochs = 1;
  cfg.train.effective_batch = 8;
  cfg.teachers = "causality";
  cfg.seeds = {0};
  return cfg;
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST_CASE("config loading is strict and round-trips") {
  TempDir tmp("config");
  write_text(tmp.path / "bad.json", R"({"model": {"d_model": 8, "dmodel": 4}})");
  CHECK_THROWS_AS(RunConfig::load(tmp.path / "bad.json"), ConfigError);
  write_text(tmp.path / "type.json", R"({"seeds": "zero"})");
  CHECK_THROWS_AS(RunConfig::load(tmp.path / "type.json"), ConfigError);
  write_text(tmp.path / "syntax.json", "{ not json");
  CHECK_THROWS_AS(RunConfig::load(tmp.path / "syntax.json"), ConfigError);

  write_text(tmp.path / "partial.json", R"({"train": {"epochs": 3}, "backtest": {"costs": "csi"}})");
  const RunConfig partial = RunConfig::load(tmp.path / "partial.json");
  CHECK(partial.train.epochs == 3);
  CHECK(partial.model.d_model == RunConfig::defaults().model.d_model);
  CHECK(partial.backtest.costs.buy > 0.0);

  write_json(tmp.path / "full.json", partial);
  const RunConfig again = RunConfig::load(tmp.path / "full.json");
  CHECK(again.hash() == partial.hash());
  CHECK(again.hash() != RunConfig::defaults().hash());

  RunConfig invalid = RunConfig::defaults();
  invalid.model.heads = 3;  // 64 is not divisible by 3
  CHECK_THROWS_AS(invalid.validate(), ConfigError);
}

TEST_CASE("teacher hash ignores student and backtest settings") {
  RunConfig a = tiny_run();
  RunConfig b = a;
  b.distill.temperature = 0.5;
  b.backtest.k = 3;
  CHECK(a.teacher_hash() == b.teacher_hash());
  b.train.lr = 0.01;
  CHECK(a.teacher_hash() != b.teacher_hash());
}

TEST_CASE("stages run, resume and detect tampering") {
  TempDir tmp("stages");
  const RunConfig cfg = tiny_run();
  cfg.validate();
  const RunDir dir(tmp.path);

  CHECK_THROWS_AS(load_run_panel(dir), DataError);
  CHECK_THROWS_AS(load_teachers(cfg, dir, 0), DataError);

  const DataSummary data = stage_synth(cfg, dir);
  CHECK(data.stocks == 8);
  CHECK(data.days == 70);

  const TeacherStageResult first = stage_train_teachers(cfg, dir, 0);
  CHECK_FALSE(first.reused);
  CHECK(first.manifest.teachers.size() == cfg.teacher_set().teachers.size());
  const TeacherStageResult second = stage_train_teachers(cfg, dir, 0);
  CHECK(second.reused);
  CHECK(load_teachers(cfg, dir, 0).size() == first.manifest.teachers.size());

  RunConfig other = cfg;
  other.train.lr = 0.01;
  CHECK_THROWS_AS(load_teachers(other, dir, 0), ConfigError);

  const StudentResult student = stage_distill(cfg, dir, 0);
  CHECK(student.snapshots > 0);
  CHECK_NOTHROW(dir.verify());

  const fs::path ckpt = dir.teachers(0) / first.manifest.teachers.front().file;
  {
    std::ofstream out(ckpt, std::ios::binary | std::ios::app);
    out << 'x';
  }
  CHECK_THROWS_AS(dir.verify(), DataError);
  CHECK_FALSE(stage_train_teachers(cfg, dir, 0).reused);

  fs::remove(ckpt);
  CHECK_THROWS_AS(load_teachers(cfg, dir, 0), DataError);
}
