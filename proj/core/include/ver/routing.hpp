// SPDX-License-Identifier: Apache-2.0
//
// Robot-phase routing: curriculum top-K annealing, straight-through
// Gumbel-softmax teacher choice, teacher-choice routers (framewise and
// layerwise) and the patchwise expert router.
#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ver/moe.hpp"
#include "ver/nn.hpp"
#include "ver/tensor.hpp"

namespace ver {

/// Active-expert curriculum: K(s) = max(k_min, floor(L - (L - k_min) * s / horizon)).
struct CtaSchedule {
  std::size_t experts = 6;   // L
  std::size_t k_min = 2;
  std::size_t horizon = 1;   // S, in optimizer steps
};

std::size_t cta_k(const CtaSchedule& schedule, std::size_t step);

struct GumbelSample {
  Tensor selection;  // one-hot forward value; in training it carries the soft gradient
  Tensor soft;       // softmax((log pi + g) / tau); equals pi's one-hot in eval mode
  std::size_t index = 0;
};

/// Training-mode sample with caller-supplied Gumbel noise `g` (one value per category).
GumbelSample gumbel_sample(const Tensor& probs, double tau, std::span<const double> gumbel_noise);
/// Training mode draws g ~ Gumbel(0, 1) from `rng`; eval mode returns argmax(probs)
/// with ties going to the lowest index.
GumbelSample gumbel_sample(const Tensor& probs, double tau, std::mt19937_64& rng, bool train_mode);

/// Draws one standard Gumbel variate per category.
std::vector<double> draw_gumbel(std::size_t count, std::mt19937_64& rng);

enum class TeacherGranularity { Framewise, Layerwise };

/// Chooses which teacher-specific router drives each library layer. Patch
/// tokens are attention-pooled with one learned query and passed through a
/// three-layer SiLU perceptron with dropout that emits one logit per teacher.
class TeacherChoiceRouter {
 public:
  TeacherChoiceRouter(TeacherGranularity granularity, std::size_t width, std::size_t hidden, std::size_t teachers,
                      std::size_t layers, std::mt19937_64& rng, double dropout = 0.1, double tau = 1.0);

  TeacherGranularity granularity() const { return granularity_; }
  std::size_t teachers() const { return teachers_; }
  double tau() const { return tau_; }
  double dropout_rate() const { return dropout_; }

  /// Logits [I] for one frame's patch tokens [T x M]. Framewise routers ignore `layer`.
  Tensor teacher_logits(const Tensor& patch_tokens, std::size_t layer, bool train_mode,
                        std::mt19937_64* dropout_rng) const;

  void visit_parameters(const std::string& prefix, const ParamVisitor& fn);

  struct Head {
    Tensor query;
    Linear fc1;
    Linear fc2;
    Linear fc3;
  };
  std::vector<Head>& heads() { return heads_; }

 private:
  TeacherGranularity granularity_;
  std::size_t teachers_;
  double dropout_;
  double tau_;
  std::vector<Head> heads_;
};

struct TeacherRoute {
  Tensor weights;  // [I], one-hot forward
  Tensor probs;    // pi, [I]
  std::size_t teacher = 0;
};

/// Training mode needs `rng` for the Gumbel draw and dropout; eval mode is deterministic.
TeacherRoute route_teacher(const TeacherChoiceRouter& router, const Tensor& patch_tokens, std::size_t layer,
                           bool train_mode, std::mt19937_64* rng);

/// Per-token expert gates for every library layer, shaped like the
/// teacher-specific gates and trained during the robot phase.
class PatchExpertRouter {
 public:
  PatchExpertRouter(std::size_t width, std::size_t hidden, std::size_t experts, std::size_t layers,
                    std::mt19937_64& rng, double out_stddev = 0.02);

  std::size_t layers() const { return gates_.size(); }
  const NoisyGate& gate(std::size_t layer) const { return gates_.at(layer); }
  NoisyGate& gate(std::size_t layer) { return gates_.at(layer); }

  Routing route(const Tensor& tokens, std::size_t layer, std::size_t k, bool train_mode,
                std::mt19937_64* noise_rng) const;

  void add_experts(std::size_t count, std::mt19937_64& rng, double stddev);
  void visit_parameters(const std::string& prefix, const ParamVisitor& fn);

 private:
  std::vector<NoisyGate> gates_;
};

/// Sparse weights [L] for a single token [M].
Tensor route_patch(const PatchExpertRouter& router, const Tensor& token, std::size_t layer, std::size_t k,
                   bool train_mode, std::mt19937_64* noise_rng);

}  // namespace ver
