// SPDX-License-Identifier: Apache-2.0
//
// Pretraining objective: per-teacher feature distillation (cosine plus smooth
// L1) and the mutual-information term that pushes teachers onto distinct
// experts.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ver/backbone.hpp"
#include "ver/teachers.hpp"
#include "ver/tensor.hpp"

namespace ver {

struct DistillConfig {
  std::vector<double> alpha;  // per teacher; empty means 1/I each
  double beta = 0.9;
  double gamma = 0.0005;
  double delta = 1.0;

  double alpha_for(std::size_t teacher, std::size_t teachers) const;
  void validate(std::size_t teachers) const;
};

/// Mean over rows of 1 - cos(a_r, b_r). `b` is a constant target; norms are clamped at 1e-12.
Tensor cosine_loss(const Tensor& a, const Tensor& b);
/// Elementwise Huber-style loss with threshold delta, mean-reduced. `b` is a constant target.
Tensor smooth_l1(const Tensor& a, const Tensor& b, double delta = 1.0);

/// Per library layer, the teacher-conditional expert usage p(E_l | I_i) as an [I x L] tensor.
struct SelectionStats {
  std::vector<Tensor> conditional;

  std::size_t layers() const { return conditional.size(); }
  /// p(E_l) = (1/I) sum_i p(E_l | I_i), per layer, as plain values.
  std::vector<std::vector<double>> marginals() const;
};

/// -sum_n sum_i sum_l p(I_i, E_l) log[p(I_i, E_l) / (p(I_i) p(E_l))] with p(I_i) = 1/I.
/// Zero-probability entries contribute nothing.
Tensor mi_loss(const SelectionStats& stats);

/// Hard selection counts per (layer, teacher, expert), normalised per (layer, teacher).
/// `selections[i]` holds teacher i's traces.
SelectionStats hard_selection_stats(const std::vector<std::vector<LayerTrace>>& selections);

struct PretrainTerms {
  Tensor total;
  Tensor distill;
  Tensor mi;
  std::vector<double> cosine;  // per teacher, current value
  SelectionStats soft_stats;   // batch-mean gate probabilities (differentiable)
  std::vector<std::vector<LayerTrace>> traces;  // per teacher
};

/// Teacher targets for a batch: one [F*T x D_i] tensor per teacher.
std::vector<Tensor> teacher_targets(const TeacherBank& bank, std::span<const Image> images);

/// Runs f once and g with every teacher-specific router, then assembles
/// distill + gamma * mi.
PretrainTerms pretrain_terms(const VerModel& model, std::span<const Image> images, const std::vector<Tensor>& targets,
                             const DistillConfig& cfg, const ForwardContext& ctx);

Tensor distill_loss(const VerModel& model, std::span<const Image> images, const std::vector<Tensor>& targets,
                    const DistillConfig& cfg, const ForwardContext& ctx);
Tensor pretrain_loss(const VerModel& model, std::span<const Image> images, const std::vector<Tensor>& targets,
                     const DistillConfig& cfg, const ForwardContext& ctx);

}  // namespace ver
