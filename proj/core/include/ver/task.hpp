// SPDX-License-Identifier: Apache-2.0
//
// Synthetic stand-in for robot policy learning. An image carries scene content
// on a few relevant patches and fresh i.i.d. noise everywhere else; the target
// is a fixed linear readout of one teacher's features averaged over the
// relevant patches. A frozen backbone feeds a trainable router and policy head.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ver/backbone.hpp"
#include "ver/image.hpp"
#include "ver/nn.hpp"
#include "ver/teachers.hpp"
#include "ver/tensor.hpp"

namespace ver {

struct TaskConfig {
  std::size_t relevant_teacher = 1;                  // 0-based
  std::vector<std::size_t> relevant_patches{5, 6, 9, 10};
  std::size_t target_dim = 2;
  double noise_amplitude = 1.0;                      // irrelevant pixels ~ U(0, amplitude)
  double success_threshold = 0.1;                    // RMS error in normalised target units
  std::size_t calibration_samples = 512;

  void validate(const PatchGrid& grid, std::size_t teachers) const;
};

struct Example {
  Image image;
  std::vector<double> target;
};

class SyntheticTask {
 public:
  SyntheticTask(const PatchGrid& grid, const TeacherBank& bank, TaskConfig config, std::uint64_t seed);

  const TaskConfig& config() const { return config_; }
  const PatchGrid& grid() const { return grid_; }
  std::uint64_t seed() const { return seed_; }
  bool relevant(std::size_t token) const;

  Example sample(std::mt19937_64& rng) const;
  /// Normalised target from the relevant teacher's features [T x D] of an image.
  std::vector<double> target_from_features(const Tensor& features) const;
  std::vector<double> target_of(const Image& image) const;

 private:
  PatchGrid grid_;
  SyntheticTeacher teacher_;
  TaskConfig config_;
  std::uint64_t seed_;
  std::vector<double> readout_;  // [target_dim x D]
  std::vector<double> offset_;
  std::vector<double> scale_;
};

/// Learned per-position weighted sum over patch tokens (initially the mean)
/// followed by a two-layer perceptron.
class PolicyHead {
 public:
  PolicyHead(std::size_t tokens, std::size_t width, std::size_t hidden, std::size_t out, std::mt19937_64& rng);

  /// tokens [F*T x M] -> predictions [F x out].
  Tensor operator()(const Tensor& tokens, std::size_t frames) const;
  void visit_parameters(const std::string& prefix, const ParamVisitor& fn);

 private:
  Tensor pool_weights_;  // [T]
  Linear fc1_;
  Linear fc2_;
};

/// Kind of per-step frequency a run records.
enum class FrequencyKind { Teacher, Expert };

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  std::size_t k = 0;
  std::vector<double> frequency;
};

struct FinetuneOptions {
  RoutingStrategy strategy = FramewiseTeacher{};
  std::size_t steps = 600;
  std::size_t batch = 8;
  double lr = 1e-3;
  double router_lr = 1e-3;       // robot routers; head and TFS experts use `lr`
  bool cosine_schedule = false;  // full warmup/plateau/cosine schedule peaking at `lr`
  std::size_t policy_hidden = 32;
  std::uint64_t seed = 0;
};

struct FinetuneRun {
  std::string strategy;
  bool cta = false;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  FrequencyKind frequency_kind = FrequencyKind::Teacher;
  std::vector<StepMetrics> metrics;
  std::uint64_t frozen_checksum_before = 0;
  std::uint64_t frozen_checksum_after = 0;
  std::shared_ptr<PolicyHead> head;
};

/// Attaches the router the strategy needs (if missing), freezes the backbone
/// and trains router + head (+ TFS experts) with Adam on the task's MSE.
FinetuneRun finetune_router(VerModel& model, const SyntheticTask& task, const FinetuneOptions& options);

struct EvalResult {
  double success_rate = 0.0;
  double mean_error = 0.0;
  std::vector<double> teacher_frequency;          // per teacher, eval-mode choices (teacher routing)
  std::vector<std::vector<double>> expert_usage;  // [layer][expert], hard selection frequency
};

/// Eval-mode rollout on n fresh samples drawn from `seed`.
EvalResult evaluate(const VerModel& model, const SyntheticTask& task, const PolicyHead& head,
                    const RoutingStrategy& strategy, std::size_t samples, std::uint64_t seed);

struct TopkRow {
  std::size_t k = 0;
  double success = 0.0;
  std::size_t active_parameters = 0;
};

/// Parameters touched by one token's forward pass with K experts per library layer.
std::size_t active_parameter_count(VerModel& model, std::size_t k);

/// One PER finetune + evaluation per K on a fresh model from `make_model`.
std::vector<TopkRow> ablate_topk(const std::function<VerModel()>& make_model, const SyntheticTask& task,
                                 std::span<const std::size_t> k_values, const FinetuneOptions& options,
                                 std::size_t eval_samples);

/// Step, loss, K, then one frequency column per teacher or expert.
std::string metrics_csv(const FinetuneRun& run);

}  // namespace ver
