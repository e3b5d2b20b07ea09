// SPDX-License-Identifier: Apache-2.0
//
// Mixture-of-experts layer with noisy top-K gating.
//
// For a token x the gate computes [s1; s2] = MLP(x) and the routing weights
//   w = TopK(softmax(s1 + eps)),  eps ~ N(0, softplus(s2)^2) elementwise,
// where TopK keeps the K largest entries and zeroes the rest without
// renormalizing. The layer output is sum_l w_l * E_l(x), evaluated only for
// the selected experts.
#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ver/nn.hpp"
#include "ver/tensor.hpp"

namespace ver {

/// DFM experts come out of distillation and stay frozen afterwards; TFS experts
/// are added for a downstream task and trained there.
enum class ExpertOrigin { Distilled, FromScratch };

std::string_view to_string(ExpertOrigin origin);

class ExpertMlp {
 public:
  ExpertMlp(std::size_t width, std::size_t hidden, ExpertOrigin origin, std::mt19937_64& rng, double stddev);

  /// Applies the expert to every row of `tokens` and counts the rows.
  Tensor forward(const Tensor& tokens) const;

  ExpertOrigin origin() const { return origin_; }
  std::size_t width() const { return fc1_.in_features(); }
  std::size_t hidden() const { return fc1_.out_features(); }

  std::size_t evaluated_tokens() const { return evaluated_; }
  void reset_counter() const { evaluated_ = 0; }

  void visit_parameters(const std::string& prefix, const ParamVisitor& fn);

 private:
  Linear fc1_;
  Linear fc2_;
  ExpertOrigin origin_;
  mutable std::size_t evaluated_ = 0;
};

/// Two-layer perceptron (Linear, GELU, Linear) producing clean logits s1 and
/// noise scales s2, one per expert. The two output maps are stored separately
/// so that experts can be appended without reshuffling columns.
class NoisyGate {
 public:
  NoisyGate(std::size_t width, std::size_t hidden, std::size_t experts, std::mt19937_64& rng,
            double out_stddev = 0.02);

  struct Logits {
    Tensor clean;      // s1, [R x L]
    Tensor noise_std;  // softplus(s2), [R x L]
  };
  Logits logits(const Tensor& tokens) const;

  std::size_t experts() const { return clean_head.out_features(); }
  std::size_t width() const { return hidden_layer.in_features(); }

  /// Appends `count` expert columns initialised with N(0, stddev).
  void add_experts(std::size_t count, std::mt19937_64& rng, double stddev);

  void visit_parameters(const std::string& prefix, const ParamVisitor& fn);

  Linear hidden_layer;
  Linear clean_head;
  Linear noise_head;
  bool noise_enabled = true;
};

/// softmax(s1 + eps) for tokens [R x M] (or a single token [M], giving [L]).
/// eps is drawn from `noise_rng` only when train_mode and the gate's noise is on.
Tensor gate_scores(const NoisyGate& gate, const Tensor& tokens, bool train_mode, std::mt19937_64* noise_rng);

/// Indices of the k largest entries, largest first; equal values keep index order.
std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k);

/// Keeps the k largest entries of each row of `scores` (shape [L] or [R x L])
/// and zeroes the others. With `renormalize` the kept entries are rescaled to
/// sum to one; by default they keep their softmax values.
Tensor topk_mask(const Tensor& scores, std::size_t k, bool renormalize = false);

/// Per-token routing decision.
struct Routing {
  Tensor probs;    // full softmax, [R x L]
  Tensor weights;  // top-K masked probs, [R x L]
  std::vector<std::vector<std::size_t>> selected;  // per row, best first
};

Routing route_tokens(const NoisyGate& gate, const Tensor& tokens, std::size_t k, bool train_mode,
                     std::mt19937_64* noise_rng, bool renormalize = false);

class MoeLayer {
 public:
  MoeLayer(std::size_t width, std::size_t hidden, std::size_t experts, std::mt19937_64& rng, double stddev);

  std::size_t num_experts() const { return experts_.size(); }
  std::size_t width() const { return width_; }
  std::size_t hidden() const { return hidden_; }

  const std::vector<ExpertMlp>& experts() const { return experts_; }
  std::vector<ExpertMlp>& experts() { return experts_; }

  void add_experts(std::size_t count, ExpertOrigin origin, std::mt19937_64& rng, double stddev = 0.02);
  /// Removes every expert with the given origin. Gates bound to this layer must be rebuilt.
  void remove_experts(ExpertOrigin origin);

  /// Sparse dispatch: expert l runs only on the rows that selected it, and its
  /// output is scaled by the row's routing weight.
  Tensor combine(const Tensor& tokens, const Routing& routing) const;

  void reset_counters() const;
  std::size_t evaluated_tokens() const;

  void visit_parameters(const std::string& prefix, const ParamVisitor& fn);

 private:
  std::size_t width_;
  std::size_t hidden_;
  std::vector<ExpertMlp> experts_;
};

struct MoeOutput {
  Tensor output;
  Routing routing;
};

MoeOutput moe_forward(const MoeLayer& layer, const Tensor& tokens, const NoisyGate& gate, std::size_t k,
                      bool train_mode, std::mt19937_64* noise_rng, bool renormalize = false);

}  // namespace ver
