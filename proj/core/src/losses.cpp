// SPDX-License-Identifier: Apache-2.0
#include "ver/losses.hpp"

#include <cmath>
#include <string>

#include "ver/error.hpp"

namespace ver {

namespace {

constexpr double kNormFloor = 1e-12;

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
}

}  // namespace

double DistillConfig::alpha_for(std::size_t teacher, std::size_t teachers) const {
  return alpha.empty() ? 1.0 / static_cast<double>(teachers) : alpha.at(teacher);
}

void DistillConfig::validate(std::size_t teachers) const {
  if (!alpha.empty() && alpha.size() != teachers) {
    throw ContractError("alpha has " + std::to_string(alpha.size()) + " weights for " + std::to_string(teachers) +
                        " teachers");
  }
  for (double a : alpha)
    if (!(a >= 0.0)) throw ContractError("alpha weights must be non-negative");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("beta must lie in [0, 1]");
  if (!(gamma >= 0.0)) throw ContractError("gamma must be non-negative");
  if (!(delta > 0.0)) throw ContractError("delta must be positive");
}

Tensor cosine_loss(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "cosine_loss");
  if (a.rank() != 2) throw DimensionError("cosine_loss expects [T x D], got " + shape_string(a.shape()));
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> dot(rows), na(rows), nb(rows);
  std::vector<char> clamped(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double x = av[r * cols + c], y = bv[r * cols + c];
      ab += x * y;
      aa += x * x;
      bb += y * y;
    }
    dot[r] = ab;
    clamped[r] = std::sqrt(aa) < kNormFloor;
    na[r] = std::max(std::sqrt(aa), kNormFloor);
    nb[r] = std::max(std::sqrt(bb), kNormFloor);
    total += 1.0 - ab / (na[r] * nb[r]);
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  const Tensor target = b.detach();
  return make_result({}, {total * inv_rows}, {a}, [a, target, dot, na, nb, clamped, rows, cols, inv_rows](const detail::TensorImpl& o) {
    const auto av = a.data();
    const auto bv = target.data();
    std::vector<double> g(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        double d = bv[r * cols + c] / (na[r] * nb[r]);
        if (!clamped[r]) d -= dot[r] * av[r * cols + c] / (na[r] * na[r] * na[r] * nb[r]);
        g[r * cols + c] = -o.grad[0] * inv_rows * d;
      }
    }
    accumulate_grad(a, g);
  });
}

Tensor smooth_l1(const Tensor& a, const Tensor& b, double delta) {
  require_same_shape(a, b, "smooth_l1");
  if (!(delta > 0.0)) throw ContractError("smooth_l1 threshold must be positive");
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t n = av.size();
  std::vector<double> diff(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = av[i] - bv[i];
    diff[i] = d;
    total += std::abs(d) < delta ? 0.5 * d * d / delta : std::abs(d) - 0.5 * delta;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return make_result({}, {total * inv_n}, {a}, [a, diff, delta, inv_n](const detail::TensorImpl& o) {
    std::vector<double> g(diff.size());
    for (std::size_t i = 0; i < diff.size(); ++i) {
      const double d = diff[i];
      const double slope = std::abs(d) < delta ? d / delta : (d > 0.0 ? 1.0 : -1.0);
      g[i] = o.grad[0] * inv_n * slope;
    }
    accumulate_grad(a, g);
  });
}

std::vector<std::vector<double>> SelectionStats::marginals() const {
  std::vector<std::vector<double>> out;
  for (const auto& cond : conditional) {
    const std::size_t teachers = cond.dim(0), experts = cond.dim(1);
    std::vector<double> m(experts, 0.0);
    for (std::size_t i = 0; i < teachers; ++i)
      for (std::size_t l = 0; l < experts; ++l) m[l] += cond.at(i, l) / static_cast<double>(teachers);
    out.push_back(std::move(m));
  }
  return out;
}

namespace {

// One layer's term: value and d/dcond, using d/dc_il = -(1/I) log(c_il / m_l).
Tensor layer_mi(const Tensor& cond) {
  if (cond.rank() != 2) throw DimensionError("selection stats must be [I x L], got " + shape_string(cond.shape()));
  const std::size_t teachers = cond.dim(0), experts = cond.dim(1);
  const double inv_i = 1.0 / static_cast<double>(teachers);
  const auto c = cond.data();
  for (double v : c)
    if (!(v >= 0.0) || !std::isfinite(v)) throw NumericError("selection probabilities must be finite and non-negative");
  std::vector<double> marg(experts, 0.0);
  for (std::size_t i = 0; i < teachers; ++i)
    for (std::size_t l = 0; l < experts; ++l) marg[l] += c[i * experts + l] * inv_i;

  double value = 0.0;
  std::vector<double> dvalue(teachers * experts, 0.0);
  for (std::size_t i = 0; i < teachers; ++i) {
    for (std::size_t l = 0; l < experts; ++l) {
      const double p = c[i * experts + l];
      if (p <= 0.0) continue;
      const double lr = std::log(p / marg[l]);
      value -= inv_i * p * lr;
      dvalue[i * experts + l] = -inv_i * lr;
    }
  }
  return make_result({}, {value}, {cond}, [cond, dvalue](const detail::TensorImpl& o) {
    std::vector<double> g(dvalue.size());
    for (std::size_t k = 0; k < g.size(); ++k) g[k] = o.grad[0] * dvalue[k];
    accumulate_grad(cond, g);
  });
}

}  // namespace

Tensor mi_loss(const SelectionStats& stats) {
  if (stats.conditional.empty()) return Tensor::scalar(0.0);
  Tensor total = layer_mi(stats.conditional.front());
  for (std::size_t n = 1; n < stats.conditional.size(); ++n) total = add(total, layer_mi(stats.conditional[n]));
  return total;
}

SelectionStats hard_selection_stats(const std::vector<std::vector<LayerTrace>>& selections) {
  if (selections.empty()) throw ContractError("hard_selection_stats needs at least one teacher");
  const std::size_t teachers = selections.size();
  const std::size_t layers = selections.front().size();
  SelectionStats stats;
  for (std::size_t n = 0; n < layers; ++n) {
    const std::size_t experts = selections.front().at(n).probs.dim(1);
    std::vector<double> table(teachers * experts, 0.0);
    for (std::size_t i = 0; i < teachers; ++i) {
      double count = 0.0;
      for (const auto& sel : selections[i].at(n).selected) {
        for (std::size_t l : sel) {
          table[i * experts + l] += 1.0;
          count += 1.0;
        }
      }
      if (count > 0.0)
        for (std::size_t l = 0; l < experts; ++l) table[i * experts + l] /= count;
    }
    stats.conditional.emplace_back(Shape{teachers, experts}, std::move(table));
  }
  return stats;
}

std::vector<Tensor> teacher_targets(const TeacherBank& bank, std::span<const Image> images) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    std::vector<Tensor> per_image;
    per_image.reserve(images.size());
    for (const auto& img : images) per_image.push_back(bank[i].features(img));
    out.push_back(per_image.size() == 1 ? per_image.front() : concat_rows(per_image));
  }
  return out;
}

PretrainTerms pretrain_terms(const VerModel& model, std::span<const Image> images, const std::vector<Tensor>& targets,
                             const DistillConfig& cfg, const ForwardContext& ctx) {
  const std::size_t teachers = model.config().teachers();
  cfg.validate(teachers);
  if (targets.size() != teachers) {
    throw ContractError(std::to_string(targets.size()) + " target sets for " + std::to_string(teachers) + " teachers");
  }
  PretrainTerms terms;
  const Tensor z = model.forward_bvt(images);
  std::vector<std::vector<Tensor>> cond_rows(model.config().library_blocks);
  for (std::size_t i = 0; i < teachers; ++i) {
    VelOutput y = model.forward_vel(z, images.size(), TeacherSpecific{i}, ctx);
    const Tensor pred = model.project_to_teacher(y.tokens, i);
    const Tensor target = targets[i].detach();
    const Tensor cos = cosine_loss(pred, target);
    Tensor term = cos * cfg.beta;
    if (cfg.beta < 1.0) term = add(term, smooth_l1(pred, target, cfg.delta) * (1.0 - cfg.beta));
    term = term * cfg.alpha_for(i, teachers);
    terms.distill = terms.distill.defined() ? add(terms.distill, term) : term;
    terms.cosine.push_back(cos.item());
    for (std::size_t n = 0; n < y.layers.size(); ++n) {
      const Tensor& probs = y.layers[n].probs;
      cond_rows[n].push_back(reshape(mean(probs, 0), {1, probs.dim(1)}));
    }
    terms.traces.push_back(std::move(y.layers));
  }
  for (auto& rows : cond_rows) terms.soft_stats.conditional.push_back(concat_rows(rows));
  terms.mi = mi_loss(terms.soft_stats);
  terms.total = cfg.gamma > 0.0 ? add(terms.distill, terms.mi * cfg.gamma) : terms.distill;
  return terms;
}

Tensor distill_loss(const VerModel& model, std::span<const Image> images, const std::vector<Tensor>& targets,
                    const DistillConfig& cfg, const ForwardContext& ctx) {
  return pretrain_terms(model, images, targets, cfg, ctx).distill;
}

Tensor pretrain_loss(const VerModel& model, std::span<const Image> images, const std::vector<Tensor>& targets,
                     const DistillConfig& cfg, const ForwardContext& ctx) {
  return pretrain_terms(model, images, targets, cfg, ctx).total;
}

}  // namespace ver
