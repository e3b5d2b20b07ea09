// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "ver/error.hpp"
#include "ver/harness.hpp"
#include "ver/io.hpp"
#include "ver/schedule.hpp"

using namespace ver;

namespace {

ExperimentConfig tiny_config(const std::filesystem::path& out) {
  ExperimentConfig c = parse_config(R"(
[run]
seed = 3
[model]
image_height = 8
image_width = 8
patch = 4
width = 8
heads = 2
mlp_ratio = 2
base_blocks = 1
library_blocks = 2
experts = 4
gate_hidden = 8
teacher_router_hidden = 8
[teachers]
dims = 4, 4, 4
[distill]
steps = 4
batch = 2
[finetune]
strategy = per
steps = 3
batch = 2
eval_samples = 8
[task]
relevant_patches = 1, 2
calibration_samples = 16
[analysis]
enabled = true
dataset_size = 40
fraction = 0.5
pca_dims = 2
[ablation]
seeds = 2
k_values = 1, 2
)");
  c.output_dir = out.string();
  return c;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const char* name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("configs survive a serialise and parse round trip") {
  ExperimentConfig c;
  c.seed = 42;
  c.finetune.strategy = "per";
  c.finetune.cta = true;
  c.model.teacher_dims = {8, 16, 24};
  c.task.relevant_patches = {0, 3};
  c.loss.gamma = 0.25;
  const std::string text = serialize_config(c);
  const ExperimentConfig back = parse_config(text);
  CHECK(back == c);
  CHECK(serialize_config(back) == text);
  CHECK(parse_config("") == ExperimentConfig{});
}

TEST_CASE("unknown keys and malformed values are usage errors") {
  CHECK_THROWS_AS(parse_config("[model]\nwidht = 3\n"), UsageError);
  CHECK_THROWS_AS(parse_config("[nope]\nx = 1\n"), UsageError);
  CHECK_THROWS_AS(parse_config("[model]\nwidth = wide\n"), UsageError);
  CHECK_THROWS_AS(parse_config("[model]\nrenormalize = maybe\n"), UsageError);
  CHECK_THROWS_AS(parse_config("[task]\nrelevant_teacher = 0\n"), UsageError);
}

TEST_CASE("dotted overrides") {
  ExperimentConfig c;
  apply_override(c, "finetune.steps", "400");
  apply_override(c, "teachers.kinds", "local, global");
  apply_override(c, "teachers.dims", "4,5");
  apply_override(c, "task.relevant_teacher", "2");
  CHECK(c.finetune.steps == 400);
  CHECK(c.teacher_kinds == std::vector<TeacherKind>{TeacherKind::Local, TeacherKind::Global});
  CHECK(c.model.teacher_dims == std::vector<std::size_t>{4, 5});
  CHECK(c.task.relevant_teacher == 1);
  CHECK_THROWS_AS(apply_override(c, "finetune.stepz", "1"), UsageError);
  CHECK_THROWS_AS(apply_override(c, "steps", "1"), UsageError);
}

TEST_CASE("validation names the offending key") {
  ExperimentConfig c;
  CHECK_NOTHROW(c.validate());
  c.model.top_k = 9;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("top_k"), ContractError);
  c = ExperimentConfig{};
  c.teacher_kinds.pop_back();
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = ExperimentConfig{};
  c.finetune.schedule = "linear";
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("schedule"), ContractError);
}

TEST_CASE("learning-rate schedule hand points") {
  const LrSchedule s{1000, 0.002, 0.1, 0.4};
  CHECK(lr_at(s, 0) == 0.0);
  CHECK(lr_at(s, 50) == doctest::Approx(0.001));
  CHECK(lr_at(s, 100) == doctest::Approx(0.002));
  CHECK(lr_at(s, 500) == doctest::Approx(0.002));
  CHECK(lr_at(s, 750) == doctest::Approx(0.001));
  CHECK(lr_at(s, 1000) == doctest::Approx(0.0).scale(1.0));
  CHECK_THROWS_AS(lr_at(s, 1001), ContractError);
  CHECK_THROWS_AS(lr_at(LrSchedule{10, 1.0, 0.7, 0.4}, 0), ContractError);
}

TEST_CASE("learning-rate schedule is continuous") {
  for (std::size_t total : {10, 97, 1000, 2000}) {
    for (double warm : {0.0, 0.1, 0.3}) {
      for (double flat : {0.0, 0.4, 0.7}) {
        const LrSchedule s{total, 1.0, warm, flat};
        const double step_bound = std::max(1.0 / std::max(1.0, warm * total), std::numbers::pi / (2.0 * total * (1.0 - warm - flat) + 1e-12));
        for (std::size_t t = 0; t < total; ++t) {
          const double a = lr_at(s, t), b = lr_at(s, t + 1);
          CHECK((a >= 0.0 && a <= 1.0));
          if (!(warm == 0.0 && t == 0)) CHECK(std::abs(b - a) <= step_bound + 1e-12);
        }
      }
    }
  }
}

TEST_CASE("strategy names") {
  ExperimentConfig c;
  CHECK(std::get<TeacherSpecific>(make_strategy(c, "ts2")).teacher == 1);
  CHECK(std::holds_alternative<FramewiseTeacher>(make_strategy(c, "ftr")));
  CHECK(std::holds_alternative<LayerwiseTeacher>(make_strategy(c, "ltr")));
  CHECK_FALSE(std::get<PatchExpert>(make_strategy(c, "per")).cta.has_value());
  c.finetune.steps = 600;
  const auto cta = std::get<PatchExpert>(make_strategy(c, "per+cta")).cta;
  REQUIRE(cta.has_value());
  CHECK(cta->experts == 6);
  CHECK(cta->k_min == 2);
  CHECK(cta->horizon == 300);
  CHECK_THROWS_AS(make_strategy(c, "ts4"), UsageError);
  CHECK_THROWS_AS(make_strategy(c, "ts0"), UsageError);
  CHECK_THROWS_AS(make_strategy(c, "moe"), UsageError);
}

TEST_CASE("ablation grids") {
  CHECK(routing_strategy_grid(3) == std::vector<std::string>{"ts1", "ts2", "ts3", "ftr", "ltr", "per", "per+cta"});
  CHECK(dfm_tfs_grid(6) == std::vector<std::pair<std::size_t, std::size_t>>{{6, 0}, {0, 2}, {6, 1}});
  for (auto kind : {AblationKind::TopK, AblationKind::RoutingStrategy, AblationKind::DfmTfs, AblationKind::Cta})
    CHECK(parse_ablation_kind(to_string(kind)) == kind);
  CHECK_THROWS_AS(parse_ablation_kind("everything"), UsageError);
}

TEST_CASE("mean and sample standard deviation") {
  const auto [m, s] = mean_std({2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0});
  CHECK(m == 5.0);
  CHECK(s == doctest::Approx(std::sqrt(32.0 / 7.0)));
  CHECK(mean_std({3.0}).second == 0.0);
}

TEST_CASE("distill and finetune runs are reproducible") {
  TempDir a("ver_harness_a"), b("ver_harness_b");
  for (const auto* dir : {&a, &b}) {
    const ExperimentConfig c = tiny_config(dir->path);
    const DistillReport d = run_distill(c);
    CHECK(d.final_cosine.size() == 3);
    const FinetuneReport f = run_finetune(c, d.checkpoint);
    CHECK(f.run.metrics.size() == 3);
    CHECK(std::filesystem::exists(dir->path / "policy.ckpt"));
    CHECK(std::filesystem::exists(dir->path / "analysis" / "mi_map.pgm"));
  }
  for (const char* name : {"distill.ckpt", "distill_metrics.csv", "finetune.ckpt", "finetune_metrics.csv",
                           "policy.ckpt", "analysis/utilization.csv", "analysis/mi_map.csv"}) {
    INFO(std::string(name));
    CHECK(read_file(a.path / name) == read_file(b.path / name));
  }
  const ExperimentConfig c = tiny_config(a.path);
  CHECK(load_config(a.path / "config.ini") == c);
  ExperimentConfig other = load_config(b.path / "config.ini");
  other.output_dir = c.output_dir;
  CHECK(other == c);
  VerModel m = load_finetuned(c, a.path / "finetune.ckpt");
  CHECK(m.has_patch_router());
}

TEST_CASE("ablation writes one row per cell") {
  TempDir dir("ver_harness_ablation");
  ExperimentConfig c = tiny_config(dir.path);
  c.analysis.enabled = false;
  const DistillReport d = run_distill(c);
  const AblationReport r = run_ablation(c, d.checkpoint, AblationKind::DfmTfs);
  CHECK(r.cells.size() == 3);
  for (const auto& cell : r.cells) CHECK(cell.success.size() == 2);
  CHECK(std::filesystem::exists(dir.path / "ablation_dfm-tfs.csv"));
}
