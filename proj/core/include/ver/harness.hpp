// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration and the distill / finetune / ablation drivers.
//
// Configuration files are sectioned key-value text:
//
//   [model]
//   width = 32
//   [finetune]
//   strategy = per
//
// Every key has a default; unknown sections or keys are errors. Overrides use
// dotted paths ("finetune.steps=400").
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ver/backbone.hpp"
#include "ver/losses.hpp"
#include "ver/schedule.hpp"
#include "ver/task.hpp"
#include "ver/teachers.hpp"

namespace ver {

struct DistillSettings {
  std::size_t steps = 2000;
  std::size_t batch = 8;
  double lr = 0.002;
  double warmup_fraction = 0.10;
  double constant_fraction = 0.40;
};

struct FinetuneSettings {
  std::string strategy = "ftr";  // ts1..tsI, ftr, ltr, per
  std::size_t k = 2;
  bool cta = false;
  std::size_t k_min = 2;
  double cta_horizon_fraction = 0.5;
  std::size_t steps = 600;
  std::size_t batch = 8;
  double lr = 1e-3;
  double router_lr = 1e-3;
  std::string schedule = "constant";  // constant | cosine
  std::size_t policy_hidden = 32;
  std::size_t eval_samples = 256;
  bool keep_distilled = true;
  std::size_t tfs_experts = 0;
};

struct AnalysisSettings {
  bool enabled = false;
  std::size_t dataset_size = 2000;
  double fraction = 0.3;
  std::size_t knn_k = 3;
  std::size_t pca_dims = 5;
};

struct AblationSettings {
  std::size_t seeds = 5;
  std::vector<std::size_t> k_values{1, 2, 3, 4, 5, 6};
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
  ModelConfig model;
  std::vector<TeacherKind> teacher_kinds{TeacherKind::Mixing, TeacherKind::Local, TeacherKind::Global};
  std::uint64_t teacher_seed = 7;
  DistillConfig loss;
  DistillSettings distill;
  FinetuneSettings finetune;
  TaskConfig task;
  std::uint64_t task_seed = 11;
  AnalysisSettings analysis;
  AblationSettings ablation;

  /// Checks every value against the contracts of the module that consumes it;
  /// errors name the offending key.
  void validate() const;
  bool operator==(const ExperimentConfig& other) const;
};

ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const ExperimentConfig& config);
/// Applies "section.key" = value; throws UsageError for unknown paths.
void apply_override(ExperimentConfig& config, std::string_view dotted_key, std::string_view value);

TeacherBank make_teacher_bank(const ExperimentConfig& config);
SyntheticTask make_task(const ExperimentConfig& config, const TeacherBank& bank);
/// Strategy named by finetune.strategy, with CTA attached to PER when enabled.
RoutingStrategy make_strategy(const ExperimentConfig& config, std::string_view name);
FinetuneOptions make_finetune_options(const ExperimentConfig& config, const RoutingStrategy& strategy,
                                      std::uint64_t seed);

struct DistillReport {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
  std::vector<double> initial_cosine;
  std::vector<double> final_cosine;
  double initial_mi = 0.0;
  double final_mi = 0.0;
  double seconds = 0.0;
};

/// Trains BVT, expert library, teacher-specific gates and heads. Writes
/// distill.ckpt and distill_metrics.csv under the output directory.
DistillReport run_distill(const ExperimentConfig& config);

/// Model from a distillation checkpoint, with the configured expert mix applied.
VerModel load_pretrained(const ExperimentConfig& config, const std::filesystem::path& checkpoint);

struct FinetuneReport {
  FinetuneRun run;
  EvalResult eval;
  std::filesystem::path metrics;
  std::filesystem::path checkpoint;
  std::vector<std::filesystem::path> artifacts;
};

/// Writes finetune_metrics.csv, finetune.ckpt and policy.ckpt, plus analysis
/// artifacts when analysis.enabled is set.
FinetuneReport run_finetune(const ExperimentConfig& config, const std::filesystem::path& checkpoint);

/// Utilisation CSV, norm map and per-patch MI map (P2 + CSV) for a finetuned model.
std::vector<std::filesystem::path> write_analysis(const ExperimentConfig& config, const VerModel& model,
                                                  const RoutingStrategy& strategy,
                                                  const std::filesystem::path& directory);

/// Rebuilds the finetuned model (routers attached) from finetune.ckpt.
VerModel load_finetuned(const ExperimentConfig& config, const std::filesystem::path& checkpoint);

enum class AblationKind { TopK, RoutingStrategy, DfmTfs, Cta };
AblationKind parse_ablation_kind(std::string_view name);
std::string_view to_string(AblationKind kind);

struct AblationCell {
  std::string label;
  std::vector<double> success;  // one per seed
  std::vector<double> error;
  double success_mean = 0.0;
  double success_std = 0.0;
  double error_mean = 0.0;
  double error_std = 0.0;
  std::size_t active_parameters = 0;
};

struct AblationReport {
  AblationKind kind = AblationKind::TopK;
  std::vector<AblationCell> cells;
  std::filesystem::path summary;
};

/// Expert mixes (DFM, TFS) compared by the dfm-tfs ablation.
std::vector<std::pair<std::size_t, std::size_t>> dfm_tfs_grid(std::size_t distilled_experts);
/// Cell labels of the routing-strategy ablation: ts1..tsI, ftr, ltr, per, per+cta.
std::vector<std::string> routing_strategy_grid(std::size_t teachers);

/// Runs the grid over ablation.seeds replicas and writes ablation_<kind>.csv.
AblationReport run_ablation(const ExperimentConfig& config, const std::filesystem::path& checkpoint, AblationKind kind);

/// mean and sample standard deviation.
std::pair<double, double> mean_std(const std::vector<double>& values);

}  // namespace ver
