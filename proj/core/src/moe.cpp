// SPDX-License-Identifier: Apache-2.0
#include "ver/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ver/error.hpp"

namespace ver {

std::string_view to_string(ExpertOrigin origin) {
  return origin == ExpertOrigin::Distilled ? "DFM" : "TFS";
}

ExpertMlp::ExpertMlp(std::size_t width, std::size_t hidden, ExpertOrigin origin, std::mt19937_64& rng,
                     double stddev)
    : fc1_(width, hidden, rng, stddev), fc2_(hidden, width, rng, stddev), origin_(origin) {}

Tensor ExpertMlp::forward(const Tensor& tokens) const {
  evaluated_ += tokens.rank() == 2 ? tokens.dim(0) : 1;
  return fc2_(gelu(fc1_(tokens)));
}

void ExpertMlp::visit_parameters(const std::string& prefix, const ParamVisitor& fn) {
  fc1_.visit_parameters(join_name(prefix, "fc1"), fn);
  fc2_.visit_parameters(join_name(prefix, "fc2"), fn);
}

NoisyGate::NoisyGate(std::size_t width, std::size_t hidden, std::size_t experts, std::mt19937_64& rng,
                     double out_stddev)
    : hidden_layer(width, hidden, rng, 1.0 / std::sqrt(static_cast<double>(width))),
      clean_head(hidden, experts, rng, out_stddev),
      noise_head(hidden, experts, rng, out_stddev) {}

NoisyGate::Logits NoisyGate::logits(const Tensor& tokens) const {
  Tensor h = gelu(hidden_layer(tokens));
  return {clean_head(h), softplus(noise_head(h))};
}

namespace {

// Appends `count` columns to an affine map [in x out] -> [in x (out + count)].
void widen(Linear& map, std::size_t count, std::mt19937_64& rng, double stddev) {
  const std::size_t in = map.in_features();
  const std::size_t out = map.out_features();
  const bool trainable = map.weight.requires_grad();
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> w(in * (out + count));
  for (std::size_t i = 0; i < in; ++i) {
    for (std::size_t j = 0; j < out; ++j) w[i * (out + count) + j] = map.weight.data()[i * out + j];
    for (std::size_t j = out; j < out + count; ++j) w[i * (out + count) + j] = dist(rng);
  }
  std::vector<double> b(map.bias.data().begin(), map.bias.data().end());
  b.resize(out + count, 0.0);
  map.weight = Tensor({in, out + count}, std::move(w), trainable);
  map.bias = Tensor({out + count}, std::move(b), trainable);
}

}  // namespace

void NoisyGate::add_experts(std::size_t count, std::mt19937_64& rng, double stddev) {
  widen(clean_head, count, rng, stddev);
  widen(noise_head, count, rng, stddev);
}

void NoisyGate::visit_parameters(const std::string& prefix, const ParamVisitor& fn) {
  hidden_layer.visit_parameters(join_name(prefix, "hidden"), fn);
  clean_head.visit_parameters(join_name(prefix, "clean"), fn);
  noise_head.visit_parameters(join_name(prefix, "noise"), fn);
}

Tensor gate_scores(const NoisyGate& gate, const Tensor& tokens, bool train_mode, std::mt19937_64* noise_rng) {
  const bool single = tokens.rank() == 1;
  const Tensor x = single ? reshape(tokens, {1, tokens.numel()}) : tokens;
  auto [clean, noise_std] = gate.logits(x);
  Tensor logits = clean;
  if (train_mode && gate.noise_enabled) {
    if (noise_rng == nullptr) throw ContractError("gate_scores: training-mode noise needs a random stream");
    Tensor unit = Tensor::randn(noise_std.shape(), *noise_rng);
    logits = add(clean, mul(unit, noise_std));
  }
  Tensor probs = softmax(logits, -1);
  return single ? reshape(probs, {gate.experts()}) : probs;
}

std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size()) {
    throw ContractError("top-k: k=" + std::to_string(k) + " outside [1, " + std::to_string(scores.size()) + "]");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  order.resize(k);
  return order;
}

namespace {

std::vector<std::vector<std::size_t>> select_rows(const Tensor& scores, std::size_t k) {
  const std::size_t width = scores.shape().back();
  const std::size_t rows = scores.numel() / width;
  std::vector<std::vector<std::size_t>> selected(rows);
  for (std::size_t r = 0; r < rows; ++r) selected[r] = topk_indices(scores.data().subspan(r * width, width), k);
  return selected;
}

Tensor masked(const Tensor& scores, const std::vector<std::vector<std::size_t>>& selected, bool renormalize) {
  const std::size_t width = scores.shape().back();
  const std::size_t rows = selected.size();
  std::vector<double> mask(scores.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t l : selected[r]) mask[r * width + l] = 1.0;
  Tensor kept = mul(scores, Tensor(scores.shape(), std::move(mask)));
  if (!renormalize) return kept;
  Tensor as_matrix = reshape(kept, {rows, width});
  Tensor totals = clamp_min(sum(as_matrix, 1), 1e-300);
  Tensor normalized = scale_rows(as_matrix, div(Tensor::full({rows}, 1.0), totals));
  return reshape(normalized, scores.shape());
}

}  // namespace

Tensor topk_mask(const Tensor& scores, std::size_t k, bool renormalize) {
  if (scores.rank() != 1 && scores.rank() != 2) {
    throw DimensionError("topk_mask expects [L] or [R x L], got " + shape_string(scores.shape()));
  }
  return masked(scores, select_rows(scores, k), renormalize);
}

Routing route_tokens(const NoisyGate& gate, const Tensor& tokens, std::size_t k, bool train_mode,
                     std::mt19937_64* noise_rng, bool renormalize) {
  Routing r;
  r.probs = gate_scores(gate, tokens, train_mode, noise_rng);
  if (r.probs.rank() == 1) r.probs = reshape(r.probs, {1, r.probs.numel()});
  r.selected = select_rows(r.probs, k);
  r.weights = masked(r.probs, r.selected, renormalize);
  return r;
}

MoeLayer::MoeLayer(std::size_t width, std::size_t hidden, std::size_t experts, std::mt19937_64& rng, double stddev)
    : width_(width), hidden_(hidden) {
  experts_.reserve(experts);
  for (std::size_t l = 0; l < experts; ++l) experts_.emplace_back(width, hidden, ExpertOrigin::Distilled, rng, stddev);
}

void MoeLayer::add_experts(std::size_t count, ExpertOrigin origin, std::mt19937_64& rng, double stddev) {
  if (count < 1) throw ContractError("add_experts: count must be at least 1");
  for (std::size_t i = 0; i < count; ++i) experts_.emplace_back(width_, hidden_, origin, rng, stddev);
}

void MoeLayer::remove_experts(ExpertOrigin origin) {
  std::erase_if(experts_, [origin](const ExpertMlp& e) { return e.origin() == origin; });
}

Tensor MoeLayer::combine(const Tensor& tokens, const Routing& routing) const {
  const std::size_t rows = tokens.dim(0);
  if (routing.selected.size() != rows || routing.weights.dim(1) != experts_.size()) {
    throw DimensionError("moe combine: routing for " + shape_string(routing.weights.shape()) + " applied to " +
                         shape_string(tokens.shape()) + " with " + std::to_string(experts_.size()) + " experts");
  }
  std::vector<std::vector<std::size_t>> assigned(experts_.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t l : routing.selected[r]) assigned[l].push_back(r);

  Tensor out;
  for (std::size_t l = 0; l < experts_.size(); ++l) {
    const auto& rows_l = assigned[l];
    if (rows_l.empty()) continue;
    Tensor y = experts_[l].forward(gather_rows(tokens, rows_l));
    Tensor w = gather_rows(slice_cols(routing.weights, l, l + 1), rows_l);
    Tensor part = scatter_add_rows(scale_rows(y, w), rows_l, rows);
    out = out.defined() ? add(out, part) : part;
  }
  if (!out.defined()) out = Tensor::zeros({rows, width_});
  return out;
}

void MoeLayer::reset_counters() const {
  for (const auto& e : experts_) e.reset_counter();
}

std::size_t MoeLayer::evaluated_tokens() const {
  std::size_t n = 0;
  for (const auto& e : experts_) n += e.evaluated_tokens();
  return n;
}

void MoeLayer::visit_parameters(const std::string& prefix, const ParamVisitor& fn) {
  for (std::size_t l = 0; l < experts_.size(); ++l) {
    experts_[l].visit_parameters(join_name(prefix, "expert" + std::to_string(l)), fn);
  }
}

MoeOutput moe_forward(const MoeLayer& layer, const Tensor& tokens, const NoisyGate& gate, std::size_t k,
                      bool train_mode, std::mt19937_64* noise_rng, bool renormalize) {
  if (gate.experts() != layer.num_experts()) {
    throw ContractError("gate scores " + std::to_string(gate.experts()) + " experts but the layer holds " +
                        std::to_string(layer.num_experts()));
  }
  MoeOutput out;
  out.routing = route_tokens(gate, tokens, k, train_mode, noise_rng, renormalize);
  out.output = layer.combine(tokens, out.routing);
  return out;
}

}  // namespace ver
