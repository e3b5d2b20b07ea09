// SPDX-License-Identifier: Apache-2.0
#include "ver/task.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>

#include "ver/error.hpp"
#include "ver/schedule.hpp"

namespace ver {

namespace {

constexpr std::size_t kEvalBatch = 16;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

bool uses_teacher_router(const RoutingStrategy& s) {
  return std::holds_alternative<FramewiseTeacher>(s) || std::holds_alternative<LayerwiseTeacher>(s);
}

Tensor target_matrix(std::span<const Example> batch) {
  std::vector<double> v;
  for (const auto& e : batch) v.insert(v.end(), e.target.begin(), e.target.end());
  return Tensor({batch.size(), batch.front().target.size()}, std::move(v));
}

std::vector<Image> images_of(std::span<const Example> batch) {
  std::vector<Image> out;
  out.reserve(batch.size());
  for (const auto& e : batch) out.push_back(e.image);
  return out;
}

// Per-step frequencies: teacher choices per (frame, layer), or expert picks per (token, layer).
std::vector<double> step_frequency(const VerModel& model, const RoutingStrategy& strategy, const VelOutput& out) {
  if (std::holds_alternative<TeacherSpecific>(strategy)) {
    std::vector<double> f(model.config().teachers(), 0.0);
    f.at(std::get<TeacherSpecific>(strategy).teacher) = 1.0;
    return f;
  }
  if (uses_teacher_router(strategy)) {
    std::vector<double> f(model.config().teachers(), 0.0);
    double n = 0.0;
    for (const auto& layer : out.layers) {
      for (std::size_t t : layer.teacher_choice) {
        f[t] += 1.0;
        n += 1.0;
      }
    }
    for (auto& v : f) v /= n;
    return f;
  }
  std::vector<double> f(model.num_experts(), 0.0);
  double n = 0.0;
  for (const auto& layer : out.layers) {
    for (const auto& sel : layer.selected) {
      for (std::size_t l : sel) {
        f[l] += 1.0;
        n += 1.0;
      }
    }
  }
  for (auto& v : f) v /= n;
  return f;
}

}  // namespace

void TaskConfig::validate(const PatchGrid& grid, std::size_t teachers) const {
  if (relevant_teacher >= teachers) {
    throw ContractError("relevant teacher " + std::to_string(relevant_teacher) + " out of range for " +
                        std::to_string(teachers) + " teachers");
  }
  if (relevant_patches.empty()) throw ContractError("the task needs at least one relevant patch");
  std::set<std::size_t> unique(relevant_patches.begin(), relevant_patches.end());
  if (unique.size() != relevant_patches.size()) throw ContractError("relevant patches must be distinct");
  if (*unique.rbegin() >= grid.tokens()) throw ContractError("relevant patch index outside the patch grid");
  if (target_dim == 0) throw ContractError("target_dim must be positive");
  if (!(noise_amplitude >= 0.0)) throw ContractError("noise amplitude must be non-negative");
  if (!(success_threshold > 0.0)) throw ContractError("success threshold must be positive");
  if (calibration_samples < 2) throw ContractError("calibration needs at least two samples");
}

SyntheticTask::SyntheticTask(const PatchGrid& grid, const TeacherBank& bank, TaskConfig config, std::uint64_t seed)
    : grid_(grid), teacher_(bank[config.relevant_teacher]), config_(std::move(config)), seed_(seed) {
  config_.validate(grid_, bank.size());
  const std::size_t d = teacher_.dim();
  auto rng = make_stream(seed, "task");
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  readout_.resize(config_.target_dim * d);
  for (auto& v : readout_) v = normal(rng);

  offset_.assign(config_.target_dim, 0.0);
  scale_.assign(config_.target_dim, 1.0);
  auto calib = make_stream(seed, "calibration");
  std::vector<std::vector<double>> raw;
  for (std::size_t n = 0; n < config_.calibration_samples; ++n) raw.push_back(target_of(sample(calib).image));
  for (std::size_t k = 0; k < config_.target_dim; ++k) {
    double m = 0.0, s = 0.0;
    for (const auto& r : raw) m += r[k];
    m /= static_cast<double>(raw.size());
    for (const auto& r : raw) s += (r[k] - m) * (r[k] - m);
    s = std::sqrt(s / static_cast<double>(raw.size() - 1));
    offset_[k] = m;
    scale_[k] = s > 0.0 ? s : 1.0;
  }
}

bool SyntheticTask::relevant(std::size_t token) const {
  return std::find(config_.relevant_patches.begin(), config_.relevant_patches.end(), token) !=
         config_.relevant_patches.end();
}

Example SyntheticTask::sample(std::mt19937_64& rng) const {
  Image img = make_scene_image(grid_, rng);
  std::uniform_real_distribution<double> noise(0.0, config_.noise_amplitude);
  std::vector<double> patch(grid_.patch_dim());
  for (std::size_t j = 0; j < grid_.tokens(); ++j) {
    if (relevant(j)) continue;
    for (auto& v : patch) v = noise(rng);
    set_patch(img, grid_, j, patch);
  }
  auto target = target_of(img);
  return {std::move(img), std::move(target)};
}

std::vector<double> SyntheticTask::target_from_features(const Tensor& features) const {
  const std::size_t d = teacher_.dim();
  if (features.rank() != 2 || features.dim(0) != grid_.tokens() || features.dim(1) != d) {
    throw DimensionError("task features must be [" + std::to_string(grid_.tokens()) + " x " + std::to_string(d) +
                         "], got " + shape_string(features.shape()));
  }
  std::vector<double> pooled(d, 0.0);
  const double w = 1.0 / static_cast<double>(config_.relevant_patches.size());
  for (std::size_t j : config_.relevant_patches)
    for (std::size_t c = 0; c < d; ++c) pooled[c] += w * features.at(j, c);
  std::vector<double> out(config_.target_dim);
  for (std::size_t k = 0; k < out.size(); ++k) {
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) acc += readout_[k * d + c] * pooled[c];
    out[k] = (acc - offset_[k]) / scale_[k];
  }
  return out;
}

std::vector<double> SyntheticTask::target_of(const Image& image) const {
  return target_from_features(teacher_.features(image));
}

PolicyHead::PolicyHead(std::size_t tokens, std::size_t width, std::size_t hidden, std::size_t out,
                       std::mt19937_64& rng)
    : pool_weights_(Tensor::full({tokens}, 1.0 / static_cast<double>(tokens)).set_requires_grad(true)),
      fc1_(width, hidden, rng, 1.0 / std::sqrt(static_cast<double>(width))),
      fc2_(hidden, out, rng, 1.0 / std::sqrt(static_cast<double>(hidden))) {}

Tensor PolicyHead::operator()(const Tensor& tokens, std::size_t frames) const {
  const std::size_t t = pool_weights_.numel();
  if (tokens.rank() != 2 || tokens.dim(0) != frames * t) {
    throw DimensionError("policy head expects [" + std::to_string(frames * t) + " x M], got " +
                         shape_string(tokens.shape()));
  }
  const Tensor weights = reshape(pool_weights_, {1, t});
  std::vector<Tensor> pooled;
  pooled.reserve(frames);
  for (std::size_t f = 0; f < frames; ++f) pooled.push_back(matmul(weights, slice_rows(tokens, f * t, (f + 1) * t)));
  const Tensor summary = frames == 1 ? pooled.front() : concat_rows(pooled);
  return fc2_(silu(fc1_(summary)));
}

void PolicyHead::visit_parameters(const std::string& prefix, const ParamVisitor& fn) {
  fn(join_name(prefix, "pool"), pool_weights_);
  fc1_.visit_parameters(join_name(prefix, "fc1"), fn);
  fc2_.visit_parameters(join_name(prefix, "fc2"), fn);
}

FinetuneRun finetune_router(VerModel& model, const SyntheticTask& task, const FinetuneOptions& options) {
  if (options.steps == 0 || options.batch == 0) throw ContractError("finetuning needs positive steps and batch");
  const auto& strategy = options.strategy;
  auto router_rng = make_stream(options.seed, "router");
  if (std::holds_alternative<FramewiseTeacher>(strategy) && !model.has_framewise_router()) {
    model.attach_framewise_router(router_rng);
  } else if (std::holds_alternative<LayerwiseTeacher>(strategy) && !model.has_layerwise_router()) {
    model.attach_layerwise_router(router_rng);
  } else if (std::holds_alternative<PatchExpert>(strategy) && !model.has_patch_router()) {
    model.attach_patch_router(router_rng);
  }
  model.freeze_for_robot_phase();

  FinetuneRun run;
  run.strategy = describe(strategy);
  run.cta = std::holds_alternative<PatchExpert>(strategy) && std::get<PatchExpert>(strategy).cta.has_value();
  run.steps = options.steps;
  run.seed = options.seed;
  run.frequency_kind = std::holds_alternative<PatchExpert>(strategy) ? FrequencyKind::Expert : FrequencyKind::Teacher;
  run.frozen_checksum_before = checksum(model.frozen_parameters());

  auto head_rng = make_stream(options.seed, "head");
  run.head = std::make_shared<PolicyHead>(model.config().tokens(), model.config().width, options.policy_hidden,
                                          task.config().target_dim, head_rng);
  std::vector<Tensor> router_params;
  auto collect = [&router_params](const std::string&, Tensor& p) { router_params.push_back(p); };
  if (model.has_framewise_router()) model.framewise_router().visit_parameters("", collect);
  if (model.has_layerwise_router()) model.layerwise_router().visit_parameters("", collect);
  if (model.has_patch_router()) model.patch_router().visit_parameters("", collect);
  std::vector<Tensor> other_params;
  for (const Tensor& p : model.trainable_parameters()) {
    const bool is_router = std::any_of(router_params.begin(), router_params.end(),
                                       [&p](const Tensor& r) { return r.same_as(p); });
    if (!is_router) other_params.push_back(p);
  }
  run.head->visit_parameters("", [&other_params](const std::string&, Tensor& p) { other_params.push_back(p); });
  Adam router_opt(router_params);
  Adam other_opt(other_params);
  const LrSchedule schedule{options.steps, 1.0};

  auto data = make_stream(options.seed, "data");
  auto gate_noise = make_stream(options.seed, "gate-noise");
  auto gumbel = make_stream(options.seed, "gumbel");
  std::vector<Example> batch(options.batch);
  for (std::size_t step = 0; step < options.steps; ++step) {
    for (auto& e : batch) e = task.sample(data);
    const auto images = images_of(batch);
    const Tensor z = model.forward_bvt(images);
    const Tensor target = target_matrix(batch);

    Tape tape;
    TapeScope scope(tape);
    const ForwardContext ctx{true, step, &gate_noise, &gumbel};
    VelOutput out = model.forward_vel(z, batch.size(), strategy, ctx);
    const Tensor diff = sub((*run.head)(out.tokens, batch.size()), target);
    const Tensor loss = mean(mul(diff, diff));
    router_opt.zero_grad();
    other_opt.zero_grad();
    tape.backward(loss);
    const double scale = options.cosine_schedule ? lr_at(schedule, step) : 1.0;
    router_opt.step(scale * options.router_lr);
    other_opt.step(scale * options.lr);

    run.metrics.push_back({step, loss.item(), out.layers.front().k, step_frequency(model, strategy, out)});
  }
  run.frozen_checksum_after = checksum(model.frozen_parameters());
  return run;
}

EvalResult evaluate(const VerModel& model, const SyntheticTask& task, const PolicyHead& head,
                    const RoutingStrategy& strategy, std::size_t samples, std::uint64_t seed) {
  if (samples == 0) throw ContractError("evaluation needs at least one sample");
  auto data = make_stream(seed, "eval");
  EvalResult result;
  result.teacher_frequency.assign(model.config().teachers(), 0.0);
  result.expert_usage.assign(model.config().library_blocks, std::vector<double>(model.num_experts(), 0.0));
  double choices = 0.0;
  std::size_t hits = 0;
  double error_sum = 0.0;
  const ForwardContext ctx = settled_context(strategy);
  for (std::size_t done = 0; done < samples;) {
    const std::size_t n = std::min(kEvalBatch, samples - done);
    std::vector<Example> batch(n);
    for (auto& e : batch) e = task.sample(data);
    const auto images = images_of(batch);
    VelOutput out = model.forward_vel(model.forward_bvt(images), n, strategy, ctx);
    const Tensor pred = head(out.tokens, n);
    const std::size_t dim = task.config().target_dim;
    for (std::size_t f = 0; f < n; ++f) {
      double sq = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double d = pred.at(f, k) - batch[f].target[k];
        sq += d * d;
      }
      const double rms = std::sqrt(sq / static_cast<double>(dim));
      error_sum += rms;
      if (rms < task.config().success_threshold) ++hits;
    }
    for (std::size_t layer = 0; layer < out.layers.size(); ++layer) {
      const auto& trace = out.layers[layer];
      for (std::size_t t : trace.teacher_choice) {
        result.teacher_frequency[t] += 1.0;
        choices += 1.0;
      }
      for (const auto& sel : trace.selected)
        for (std::size_t l : sel) result.expert_usage[layer][l] += 1.0;
    }
    done += n;
  }
  if (std::holds_alternative<TeacherSpecific>(strategy)) {
    result.teacher_frequency[std::get<TeacherSpecific>(strategy).teacher] = 1.0;
  } else if (choices > 0.0) {
    for (auto& v : result.teacher_frequency) v /= choices;
  }
  for (auto& row : result.expert_usage) {
    double total = 0.0;
    for (double v : row) total += v;
    if (total > 0.0)
      for (auto& v : row) v /= total;
  }
  result.success_rate = static_cast<double>(hits) / static_cast<double>(samples);
  result.mean_error = error_sum / static_cast<double>(samples);
  return result;
}

std::size_t active_parameter_count(VerModel& model, std::size_t k) {
  if (k < 1 || k > model.num_experts()) throw ContractError("K must lie in [1, experts]");
  std::size_t n = count_parameters(model.embedder());
  for (auto& block : model.base()) n += count_parameters(block);
  for (std::size_t layer = 0; layer < model.library().size(); ++layer) {
    auto& block = model.library()[layer];
    n += count_parameters(block.attention) + count_parameters(block.moe_norm);
    n += k * count_parameters(block.moe.experts().front());
    n += model.has_patch_router() ? count_parameters(model.patch_router().gate(layer))
                                  : count_parameters(block.teacher_gates.front());
  }
  return n;
}

std::vector<TopkRow> ablate_topk(const std::function<VerModel()>& make_model, const SyntheticTask& task,
                                 std::span<const std::size_t> k_values, const FinetuneOptions& options,
                                 std::size_t eval_samples) {
  std::vector<TopkRow> rows;
  for (std::size_t k : k_values) {
    VerModel model = make_model();
    if (k < 1 || k > model.num_experts()) throw ContractError("K=" + std::to_string(k) + " outside [1, experts]");
    FinetuneOptions opts = options;
    opts.strategy = PatchExpert{k, std::nullopt};
    const FinetuneRun run = finetune_router(model, task, opts);
    const EvalResult eval = evaluate(model, task, *run.head, opts.strategy, eval_samples, options.seed);
    rows.push_back({k, eval.success_rate, active_parameter_count(model, k)});
  }
  return rows;
}

std::string metrics_csv(const FinetuneRun& run) {
  std::string out = "step,loss,K";
  const std::size_t columns = run.metrics.empty() ? 0 : run.metrics.front().frequency.size();
  const char* prefix = run.frequency_kind == FrequencyKind::Teacher ? "teacher_freq_" : "expert_freq_";
  for (std::size_t c = 0; c < columns; ++c) out += fmt::format(",{}{}", prefix, c + 1);
  out += '\n';
  for (const auto& m : run.metrics) {
    out += fmt::format("{},{},{}", m.step, m.loss, m.k);
    for (double f : m.frequency) out += fmt::format(",{}", f);
    out += '\n';
  }
  return out;
}

}  // namespace ver
