// SPDX-License-Identifier: Apache-2.0
#include "ver/routing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ver/error.hpp"

namespace ver {

std::size_t cta_k(const CtaSchedule& schedule, std::size_t step) {
  const std::size_t l = schedule.experts;
  if (schedule.k_min < 1 || schedule.k_min > l) {
    throw ContractError("CTA: k_min=" + std::to_string(schedule.k_min) + " must lie in [1, L=" + std::to_string(l) + "]");
  }
  if (schedule.horizon == 0) throw ContractError("CTA: annealing horizon must be positive");
  // floor(L - a / S) = L - ceil(a / S) with a = (L - k_min) * s, all integers.
  const std::size_t a = (l - schedule.k_min) * step;
  const std::size_t drop = (a + schedule.horizon - 1) / schedule.horizon;
  if (drop >= l - schedule.k_min) return schedule.k_min;
  return l - drop;
}

std::vector<double> draw_gumbel(std::size_t count, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uniform(std::numeric_limits<double>::min(), 1.0);
  std::vector<double> g(count);
  for (auto& v : g) v = -std::log(-std::log(uniform(rng)));
  return g;
}

namespace {

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

Tensor one_hot(std::size_t size, std::size_t index) {
  Tensor t = Tensor::zeros({size});
  t.mutable_data()[index] = 1.0;
  return t;
}

void check_distribution(const Tensor& probs) {
  if (probs.rank() != 1 || probs.numel() == 0) {
    throw DimensionError("gumbel_sample expects a probability vector, got " + shape_string(probs.shape()));
  }
}

}  // namespace

GumbelSample gumbel_sample(const Tensor& probs, double tau, std::span<const double> gumbel_noise) {
  check_distribution(probs);
  if (!(tau > 0.0)) throw ContractError("gumbel_sample: temperature must be positive");
  if (gumbel_noise.size() != probs.numel()) throw DimensionError("gumbel_sample: noise size mismatch");
  Tensor noise({probs.numel()}, std::vector<double>(gumbel_noise.begin(), gumbel_noise.end()));
  Tensor logits = (log(clamp_min(probs, 1e-12)) + noise) * (1.0 / tau);
  GumbelSample s;
  s.soft = softmax(logits, -1);
  s.index = argmax(s.soft.data());
  s.selection = straight_through(s.soft, one_hot(probs.numel(), s.index));
  return s;
}

GumbelSample gumbel_sample(const Tensor& probs, double tau, std::mt19937_64& rng, bool train_mode) {
  check_distribution(probs);
  if (train_mode) {
    const auto g = draw_gumbel(probs.numel(), rng);
    return gumbel_sample(probs, tau, g);
  }
  GumbelSample s;
  s.index = argmax(probs.data());
  s.selection = one_hot(probs.numel(), s.index);
  s.soft = s.selection;
  return s;
}

TeacherChoiceRouter::TeacherChoiceRouter(TeacherGranularity granularity, std::size_t width, std::size_t hidden,
                                         std::size_t teachers, std::size_t layers, std::mt19937_64& rng,
                                         double dropout, double tau)
    : granularity_(granularity), teachers_(teachers), dropout_(dropout), tau_(tau) {
  if (teachers < 1) throw ContractError("teacher router needs at least one teacher");
  if (!(tau > 0.0)) throw ContractError("teacher router temperature must be positive");
  const std::size_t count = granularity == TeacherGranularity::Framewise ? 1 : layers;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(width));
  const double hid_std = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (std::size_t i = 0; i < count; ++i) {
    Head h;
    h.query = Tensor::zeros({width}).set_requires_grad(true);
    h.fc1 = Linear(width, hidden, rng, in_std);
    h.fc2 = Linear(hidden, hidden, rng, hid_std);
    h.fc3 = Linear(hidden, teachers, rng, 0.02);
    heads_.push_back(std::move(h));
  }
}

Tensor TeacherChoiceRouter::teacher_logits(const Tensor& patch_tokens, std::size_t layer, bool train_mode,
                                           std::mt19937_64* dropout_rng) const {
  const std::size_t head = granularity_ == TeacherGranularity::Framewise ? 0 : layer;
  if (head >= heads_.size()) throw ContractError("teacher router has no head for layer " + std::to_string(layer));
  const Head& h = heads_[head];
  const std::size_t tokens = patch_tokens.dim(0);
  const std::size_t width = patch_tokens.dim(1);
  Tensor scores = matmul(patch_tokens, reshape(h.query, {width, 1})) * (1.0 / std::sqrt(static_cast<double>(width)));
  Tensor attn = reshape(softmax(reshape(scores, {tokens}), -1), {1, tokens});
  Tensor pooled = matmul(attn, patch_tokens);
  const bool drop = train_mode && dropout_ > 0.0;
  if (drop && dropout_rng == nullptr) throw ContractError("teacher router dropout needs a random stream");
  Tensor x = silu(h.fc1(pooled));
  if (drop) x = dropout(x, dropout_, *dropout_rng, true);
  x = silu(h.fc2(x));
  if (drop) x = dropout(x, dropout_, *dropout_rng, true);
  return reshape(h.fc3(x), {teachers_});
}

void TeacherChoiceRouter::visit_parameters(const std::string& prefix, const ParamVisitor& fn) {
  for (std::size_t i = 0; i < heads_.size(); ++i) {
    const std::string p = join_name(prefix, "head" + std::to_string(i));
    fn(join_name(p, "query"), heads_[i].query);
    heads_[i].fc1.visit_parameters(join_name(p, "fc1"), fn);
    heads_[i].fc2.visit_parameters(join_name(p, "fc2"), fn);
    heads_[i].fc3.visit_parameters(join_name(p, "fc3"), fn);
  }
}

TeacherRoute route_teacher(const TeacherChoiceRouter& router, const Tensor& patch_tokens, std::size_t layer,
                           bool train_mode, std::mt19937_64* rng) {
  if (train_mode && rng == nullptr) throw ContractError("route_teacher: training mode needs a random stream");
  TeacherRoute route;
  route.probs = softmax(router.teacher_logits(patch_tokens, layer, train_mode, rng), -1);
  std::mt19937_64 unused;
  GumbelSample s = gumbel_sample(route.probs, router.tau(), train_mode ? *rng : unused, train_mode);
  route.weights = s.selection;
  route.teacher = s.index;
  return route;
}

PatchExpertRouter::PatchExpertRouter(std::size_t width, std::size_t hidden, std::size_t experts, std::size_t layers,
                                     std::mt19937_64& rng, double out_stddev) {
  gates_.reserve(layers);
  for (std::size_t n = 0; n < layers; ++n) gates_.emplace_back(width, hidden, experts, rng, out_stddev);
}

Routing PatchExpertRouter::route(const Tensor& tokens, std::size_t layer, std::size_t k, bool train_mode,
                                 std::mt19937_64* noise_rng) const {
  return route_tokens(gate(layer), tokens, k, train_mode, noise_rng);
}

void PatchExpertRouter::add_experts(std::size_t count, std::mt19937_64& rng, double stddev) {
  for (auto& g : gates_) g.add_experts(count, rng, stddev);
}

void PatchExpertRouter::visit_parameters(const std::string& prefix, const ParamVisitor& fn) {
  for (std::size_t n = 0; n < gates_.size(); ++n) gates_[n].visit_parameters(join_name(prefix, "layer" + std::to_string(n)), fn);
}

Tensor route_patch(const PatchExpertRouter& router, const Tensor& token, std::size_t layer, std::size_t k,
                   bool train_mode, std::mt19937_64* noise_rng) {
  if (token.rank() != 1) throw DimensionError("route_patch expects one token [M], got " + shape_string(token.shape()));
  Routing r = router.route(token, layer, k, train_mode, noise_rng);
  return reshape(r.weights, {r.weights.numel()});
}

}  // namespace ver
