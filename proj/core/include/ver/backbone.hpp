// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale vision transformer. The first `base_blocks` blocks form the base
// transformer f (plain pre-norm blocks); the last `library_blocks` replace the
// feed-forward sublayer with a mixture of experts and form the expert library
// g. Each teacher i has its own gate per library layer and a projection head h_i.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ver/image.hpp"
#include "ver/moe.hpp"
#include "ver/nn.hpp"
#include "ver/routing.hpp"
#include "ver/tensor.hpp"

namespace ver {

struct ModelConfig {
  PatchGrid grid{};
  std::size_t width = 32;  // token dim M
  std::size_t heads = 2;
  std::size_t mlp_ratio = 4;
  std::size_t base_blocks = 4;
  std::size_t library_blocks = 3;
  std::size_t experts = 6;  // L
  std::size_t top_k = 2;    // K used by the teacher-specific gates
  std::size_t gate_hidden = 32;
  std::size_t patch_router_hidden = 4;
  std::size_t teacher_router_hidden = 32;
  std::vector<std::size_t> teacher_dims{32, 32, 32};
  double router_dropout = 0.1;
  double gumbel_tau = 1.0;
  bool renormalize = false;

  std::size_t teachers() const { return teacher_dims.size(); }
  std::size_t tokens() const { return grid.tokens(); }
  void validate() const;
};

// Routing strategies for the expert library. Teacher indices are 0-based.
struct TeacherSpecific {
  std::size_t teacher = 0;
};
struct FramewiseTeacher {};
struct LayerwiseTeacher {};
struct PatchExpert {
  std::size_t k = 2;
  std::optional<CtaSchedule> cta;  // when set, K comes from the schedule at ctx.step
};
using RoutingStrategy = std::variant<TeacherSpecific, FramewiseTeacher, LayerwiseTeacher, PatchExpert>;

std::string describe(const RoutingStrategy& strategy);

struct ForwardContext {
  bool train = false;
  std::size_t step = 0;
  std::mt19937_64* gate_noise = nullptr;
  std::mt19937_64* gumbel = nullptr;  // Gumbel draws and router dropout
};

/// Eval-mode context for a trained strategy: CTA sits at the end of its
/// schedule so K equals K_min.
ForwardContext settled_context(const RoutingStrategy& strategy);

struct LayerTrace {
  std::size_t k = 0;
  Tensor probs;  // [R x L] full gate softmax that produced the layer output
  std::vector<std::vector<std::size_t>> selected;  // per token
  std::vector<std::size_t> teacher_choice;         // per frame (teacher routing only)
  Tensor teacher_probs;                            // [F x I] (teacher routing only)
};

struct VelOutput {
  Tensor tokens;
  std::vector<LayerTrace> layers;
};

struct AttentionSublayer {
  LayerNorm norm;
  Linear qkv;
  Linear proj;
  std::size_t heads = 1;

  /// Multi-head self-attention over each frame's tokens; x is [F*T x M].
  Tensor operator()(const Tensor& x, std::size_t frames) const;
  void visit_parameters(const std::string& prefix, const ParamVisitor& fn);
};

struct DenseBlock {
  AttentionSublayer attention;
  LayerNorm ffn_norm;
  Linear fc1;
  Linear fc2;

  Tensor operator()(const Tensor& x, std::size_t frames) const;
  void visit_parameters(const std::string& prefix, const ParamVisitor& fn);
};

struct ExpertBlock {
  AttentionSublayer attention;
  LayerNorm moe_norm;
  MoeLayer moe;
  std::vector<NoisyGate> teacher_gates;  // one per teacher

  void visit_parameters(const std::string& prefix, const ParamVisitor& fn);
};

struct PatchEmbedder {
  PatchGrid grid;
  Linear proj;
  Tensor position;  // [T x M]

  Tensor operator()(std::span<const Image> images) const;
  void visit_parameters(const std::string& prefix, const ParamVisitor& fn);
};

class VerModel {
 public:
  VerModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::size_t num_experts() const { return library_.front().moe.num_experts(); }

  /// z = f(x): tokens [F*T x M] for F images.
  Tensor forward_bvt(std::span<const Image> images) const;
  /// y = g(z, strategy) for `frames` frames stacked in z.
  VelOutput forward_vel(const Tensor& z, std::size_t frames, const RoutingStrategy& strategy,
                        const ForwardContext& ctx) const;
  /// h_i(y): [R x D_i].
  Tensor project_to_teacher(const Tensor& y, std::size_t teacher) const;

  void attach_framewise_router(std::mt19937_64& rng);
  void attach_layerwise_router(std::mt19937_64& rng);
  void attach_patch_router(std::mt19937_64& rng);
  bool has_framewise_router() const { return framewise_.has_value(); }
  bool has_layerwise_router() const { return layerwise_.has_value(); }
  bool has_patch_router() const { return patch_.has_value(); }
  TeacherChoiceRouter& framewise_router();
  TeacherChoiceRouter& layerwise_router();
  PatchExpertRouter& patch_router();

  /// Appends experts to every library layer and widens every attached gate.
  void add_experts(std::size_t count, ExpertOrigin origin, std::mt19937_64& rng, double stddev = 0.02);
  /// Keeps all distilled experts (or none, with keep_distilled = false) and
  /// appends `from_scratch` trainable ones. Teacher-specific gates no longer
  /// fit after dropping experts; only patchwise routing remains usable then.
  void set_expert_mix(bool keep_distilled, std::size_t from_scratch, std::mt19937_64& rng);

  /// Freezes everything except the attached robot routers and TFS experts.
  void freeze_for_robot_phase();

  std::vector<ExpertBlock>& library() { return library_; }
  const std::vector<ExpertBlock>& library() const { return library_; }
  std::vector<DenseBlock>& base() { return base_; }
  std::vector<Linear>& heads() { return heads_; }
  PatchEmbedder& embedder() { return embed_; }

  void visit_parameters(const std::string& prefix, const ParamVisitor& fn);
  /// Parameters that must not move during the robot phase.
  std::vector<Tensor> frozen_parameters();
  std::vector<Tensor> trainable_parameters();
  std::size_t parameter_count();
  std::size_t patch_router_parameter_count();

 private:
  Tensor teacher_routed_layer(const ExpertBlock& block, const Tensor& h, std::size_t frames,
                              const std::vector<TeacherRoute>& routes, const ForwardContext& ctx,
                              LayerTrace& trace) const;

  ModelConfig config_;
  std::uint64_t seed_;
  PatchEmbedder embed_;
  std::vector<DenseBlock> base_;
  std::vector<ExpertBlock> library_;
  std::vector<Linear> heads_;
  std::optional<TeacherChoiceRouter> framewise_;
  std::optional<TeacherChoiceRouter> layerwise_;
  std::optional<PatchExpertRouter> patch_;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Checkpoint file: "VERCKPT1", u32 record count, then per parameter a u32
/// byte length followed by the UTF-8 record "name<TAB>d0xd1...<TAB>offset",
/// then the fp64 little-endian payloads back to back (offsets are relative to
/// the payload start).
void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

void save_checkpoint(VerModel& model, const std::filesystem::path& path);
/// Loads values into an identically structured model. Any difference in names
/// or shapes raises ContractError listing the manifest differences.
void load_checkpoint(VerModel& model, const std::filesystem::path& path);

}  // namespace ver
