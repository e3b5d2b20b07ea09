// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per headline criterion.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "gradcheck.hpp"
#include "ver/analysis.hpp"
#include "ver/harness.hpp"
#include "ver/io.hpp"
#include "ver/losses.hpp"
#include "ver/moe.hpp"
#include "ver/routing.hpp"

using namespace ver;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ver_acceptance_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : testing::primitive_cases()) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(seed);
      const double e = testing::max_relative_error(c, rng, 1e-5);
      if (!(e <= worst)) {
        worst = e;
        worst_name = c.name;
      }
    }
  }
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (const auto& r : testing::model_loss_errors(seed)) {
      if (!(r.error <= worst)) {
        worst = r.error;
        worst_name = r.name;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 120.0,
          fmt::format("worst rel err {:.2e} ({}), {:.1f}s", worst, worst_name, secs)};
}

Outcome dense_equivalence() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::uniform_int_distribution<std::size_t> w(2, 12), l(1, 8), r(1, 10);
    const std::size_t width = w(rng), experts = l(rng), rows = r(rng);
    MoeLayer layer(width, 2 * width, experts, rng, 0.5);
    NoisyGate gate(width, width, experts, rng, 1.0);
    const Tensor x = Tensor::randn({rows, width}, rng);
    const MoeOutput out = moe_forward(layer, x, gate, experts, false, nullptr);
    const Tensor probs = gate_scores(gate, x, false, nullptr);
    for (std::size_t row = 0; row < rows; ++row) {
      const Tensor xr = slice_rows(x, row, row + 1);
      for (std::size_t c = 0; c < width; ++c) {
        double dense = 0.0;
        for (std::size_t e = 0; e < experts; ++e) dense += probs.at(row, e) * layer.experts()[e].forward(xr).at(0, c);
        worst = std::max(worst, std::abs(dense - out.output.at(row, c)));
      }
    }
  }
  return {worst < 1e-9, fmt::format("max abs diff {:.2e} over 100 configurations", worst)};
}

Outcome cta_exhaustive() {
  std::size_t checked = 0, mismatches = 0;
  for (std::size_t l = 1; l <= 8; ++l) {
    for (std::size_t kmin = 1; kmin <= l; ++kmin) {
      for (std::size_t horizon : {10, 100, 1000}) {
        for (std::size_t s = 0; s <= horizon + 10; ++s) {
          const double direct = std::floor(static_cast<double>(l) - static_cast<double>(l - kmin) *
                                                                        static_cast<double>(s) /
                                                                        static_cast<double>(horizon));
          const auto expected = static_cast<std::size_t>(std::max(static_cast<double>(kmin), direct));
          ++checked;
          if (cta_k(CtaSchedule{l, kmin, horizon}, s) != expected) ++mismatches;
        }
      }
    }
  }
  return {mismatches == 0, fmt::format("{} mismatches in {} grid points", mismatches, checked)};
}

Outcome mi_oracle() {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> ti(2, 5), te(2, 8), tn(1, 3);
  std::gamma_distribution<double> g(0.7, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t teachers = ti(rng), experts = te(rng), layers = tn(rng);
    SelectionStats stats;
    double truth = 0.0;
    for (std::size_t n = 0; n < layers; ++n) {
      std::vector<double> table(teachers * experts);
      for (std::size_t i = 0; i < teachers; ++i) {
        double s = 0.0;
        for (std::size_t e = 0; e < experts; ++e) s += (table[i * experts + e] = g(rng) + 1e-9);
        for (std::size_t e = 0; e < experts; ++e) table[i * experts + e] /= s;
      }
      const double pi = 1.0 / static_cast<double>(teachers);
      for (std::size_t e = 0; e < experts; ++e) {
        double pe = 0.0;
        for (std::size_t i = 0; i < teachers; ++i) pe += pi * table[i * experts + e];
        for (std::size_t i = 0; i < teachers; ++i) {
          const double joint = pi * table[i * experts + e];
          truth += joint * std::log(joint / (pi * pe));
        }
      }
      stats.conditional.emplace_back(Shape{teachers, experts}, std::move(table));
    }
    worst = std::max(worst, std::abs(mi_loss(stats).item() + truth));
  }
  double disjoint_worst = 0.0;
  for (std::size_t teachers = 2; teachers <= 5; ++teachers) {
    for (std::size_t layers = 1; layers <= 3; ++layers) {
      SelectionStats stats;
      for (std::size_t n = 0; n < layers; ++n) {
        std::vector<double> t(teachers * 6, 0.0);
        for (std::size_t i = 0; i < teachers; ++i) t[i * 6 + i] = 1.0;
        stats.conditional.emplace_back(Shape{teachers, 6}, std::move(t));
      }
      const double expect = -static_cast<double>(layers) * std::log(static_cast<double>(teachers));
      disjoint_worst = std::max(disjoint_worst, std::abs(mi_loss(stats).item() - expect));
    }
  }
  SelectionStats three;
  three.conditional.emplace_back(Shape{3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  const double value = mi_loss(three).item();
  return {worst < 1e-9 && disjoint_worst < 1e-9,
          fmt::format("random tables max diff {:.2e}; disjoint max diff {:.2e}; I=3 N=1 gives {:.6f}", worst,
                      disjoint_worst, value)};
}

Outcome gumbel_contract() {
  std::mt19937_64 rng(5);
  bool one_hot = true;
  double worst_grad = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor logits = Tensor::randn({5}, rng);
    const Tensor w = Tensor::randn({5}, rng);
    const auto noise = draw_gumbel(5, rng);
    Tensor l1 = logits.detach().set_requires_grad(true);
    Tensor l2 = logits.detach().set_requires_grad(true);
    {
      Tape tape;
      TapeScope scope(tape);
      const GumbelSample s = gumbel_sample(softmax(l1, -1), 0.8, noise);
      std::size_t ones = 0;
      for (double v : s.selection.data()) {
        if (v == 1.0) ++ones;
        else if (v != 0.0) one_hot = false;
      }
      one_hot = one_hot && ones == 1;
      tape.backward(sum(mul(s.selection, w)));
    }
    {
      Tape tape;
      TapeScope scope(tape);
      const GumbelSample s = gumbel_sample(softmax(l2, -1), 0.8, noise);
      tape.backward(sum(mul(s.soft, w)));
    }
    double diff = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      diff += std::pow(l1.grad()[i] - l2.grad()[i], 2);
      norm += std::pow(l2.grad()[i], 2);
    }
    worst_grad = std::max(worst_grad, std::sqrt(diff) / std::max(std::sqrt(norm), 1e-12));
  }
  const Tensor pi = Tensor::vec({0.1, 0.25, 0.05, 0.4, 0.2});
  std::vector<double> freq(5, 0.0);
  const int draws = 10000;
  for (int d = 0; d < draws; ++d) freq[gumbel_sample(pi, 1.0, rng, true).index] += 1.0 / draws;
  double freq_dev = 0.0;
  for (std::size_t i = 0; i < 5; ++i) freq_dev = std::max(freq_dev, std::abs(freq[i] - pi[i]));
  return {one_hot && worst_grad < 1e-6 && freq_dev <= 0.02,
          fmt::format("one-hot {}; straight-through vs soft rel err {:.2e}; max frequency deviation {:.4f}",
                      one_hot ? "yes" : "no", worst_grad, freq_dev)};
}

ExperimentConfig reference_config(const std::filesystem::path& out) {
  ExperimentConfig c;
  c.output_dir = out.string();
  return c;
}

struct DistillOutcome {
  Outcome outcome;
  std::filesystem::path checkpoint;
};

DistillOutcome desk_distillation(const ExperimentConfig& config) {
  const DistillReport r = run_distill(config);
  bool pass = r.seconds < 600.0 && r.final_mi < r.initial_mi;
  std::string cos;
  for (std::size_t i = 0; i < r.final_cosine.size(); ++i) {
    const double reduction = 1.0 - r.final_cosine[i] / r.initial_cosine[i];
    pass = pass && reduction >= 0.5;
    cos += fmt::format("{}{:.3f}->{:.3f}", i ? ", " : "", r.initial_cosine[i], r.final_cosine[i]);
  }
  return {{pass, fmt::format("cosine {}; MI {:.3f}->{:.3f}; {:.0f}s", cos, r.initial_mi, r.final_mi, r.seconds)},
          r.checkpoint};
}

struct RobotRun {
  VerModel model;
  FinetuneRun run;
  EvalResult eval;
};

RobotRun robot_run(const ExperimentConfig& config, const std::filesystem::path& ckpt, const SyntheticTask& task,
                   const std::string& strategy, std::uint64_t seed) {
  VerModel model = load_pretrained(config, ckpt);
  const RoutingStrategy s = make_strategy(config, strategy);
  FinetuneRun run = finetune_router(model, task, make_finetune_options(config, s, seed));
  EvalResult eval = evaluate(model, task, *run.head, s, config.finetune.eval_samples, derive_seed(seed, "eval"));
  return {std::move(model), std::move(run), std::move(eval)};
}

Outcome teacher_selection(const ExperimentConfig& config, const std::filesystem::path& ckpt,
                          const SyntheticTask& task) {
  const std::size_t r = config.task.relevant_teacher;
  int wins = 0;
  std::string freqs;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const RobotRun run = robot_run(config, ckpt, task, "ftr", seed);
    const double f = run.eval.teacher_frequency[r];
    wins += f > 0.9;
    freqs += fmt::format("{}{:.2f}", seed > 1 ? " " : "", f);
  }
  return {wins >= 4, fmt::format("teacher {} frequency per seed [{}]; {} of 5 above 0.9", r + 1, freqs, wins)};
}

double mean_across_seed_variance(const std::vector<EvalResult>& evals) {
  const auto& first = evals.front().expert_usage;
  double total = 0.0;
  std::size_t cells = 0;
  for (std::size_t layer = 0; layer < first.size(); ++layer) {
    for (std::size_t e = 0; e < first[layer].size(); ++e) {
      std::vector<double> v;
      for (const auto& ev : evals) v.push_back(ev.expert_usage[layer][e]);
      const double sd = mean_std(v).second;
      total += sd * sd;
      ++cells;
    }
  }
  return total / static_cast<double>(cells);
}

struct PatchOutcomes {
  Outcome variance;
  Outcome suppression;
};

PatchOutcomes patch_routing(const ExperimentConfig& config, const std::filesystem::path& ckpt,
                            const SyntheticTask& task) {
  std::vector<EvalResult> per, cta;
  int wins = 0;
  std::string gaps;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    per.push_back(robot_run(config, ckpt, task, "per", seed).eval);
    RobotRun run = robot_run(config, ckpt, task, "per+cta", seed);
    cta.push_back(run.eval);
    const RoutingStrategy s = make_strategy(config, "per+cta");
    const Tensor mi = per_patch_mi_before_after(run.model, task, s, config.analysis.dataset_size,
                                                config.analysis.fraction, derive_seed(seed, "mi"),
                                                config.analysis.knn_k, config.analysis.pca_dims);
    double noise = 0.0, relevant = 0.0;
    std::size_t nn = 0, nr = 0;
    for (std::size_t j = 0; j < mi.numel(); ++j) {
      if (task.relevant(j)) {
        relevant += mi[j];
        ++nr;
      } else {
        noise += mi[j];
        ++nn;
      }
    }
    noise /= static_cast<double>(nn);
    relevant /= static_cast<double>(nr);
    wins += noise < relevant;
    gaps += fmt::format("{}{:.3f}/{:.3f}", seed > 1 ? " " : "", noise, relevant);
  }
  const double vp = mean_across_seed_variance(per), vc = mean_across_seed_variance(cta);
  return {{vc < vp, fmt::format("mean across-seed utilisation variance PER {:.3e}, PER+CTA {:.3e}", vp, vc)},
          {wins >= 4, fmt::format("noise/relevant patch MI per seed [{}]; {} of 5 lower on noise", gaps, wins)}};
}

Outcome estimator_calibration() {
  std::mt19937_64 rng(2025);
  std::normal_distribution<double> g(0.0, 1.0);
  const std::size_t n = 5000;
  bool pass = true;
  std::string detail;
  for (double rho : {0.0, 0.5, 0.9}) {
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = g(rng);
      y[i] = rho * x[i] + std::sqrt(1.0 - rho * rho) * g(rng);
    }
    const double est = knn_mutual_information(Tensor({n, 1}, x), Tensor({n, 1}, y), 3).value;
    const double truth = -0.5 * std::log(1.0 - rho * rho);
    pass = pass && std::abs(est - truth) <= 0.05;
    detail += fmt::format("rho {}: {:.4f} vs {:.4f}; ", rho, est, truth);
  }
  std::vector<double> z(n);
  for (auto& v : z) v = g(rng);
  const double h = knn_entropy(Tensor({n, 1}, z), 3);
  const double truth = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  pass = pass && std::abs(h - truth) <= 0.05;
  detail += fmt::format("entropy {:.4f} vs {:.4f}", h, truth);
  return {pass, detail};
}

Outcome budget_audit() {
  VerModel model(ModelConfig{}, 1);
  auto rng = make_stream(1, "router");
  model.attach_patch_router(rng);
  const double router = static_cast<double>(model.patch_router_parameter_count());
  const double total = static_cast<double>(model.parameter_count());
  return {router / total < 0.004,
          fmt::format("{} router of {} total parameters ({:.3f}%)", router, total, 100.0 * router / total)};
}

Outcome reproducibility() {
  const std::vector<std::string> files{"distill.ckpt", "distill_metrics.csv", "finetune.ckpt", "finetune_metrics.csv",
                                       "policy.ckpt", "analysis/utilization.csv", "analysis/mi_map.csv"};
  std::vector<std::filesystem::path> dirs{scratch("repro_a"), scratch("repro_b")};
  for (const auto& dir : dirs) {
    ExperimentConfig c = reference_config(dir);
    c.seed = 17;
    c.distill.steps = 20;
    c.finetune.strategy = "per";
    c.finetune.cta = true;
    c.finetune.steps = 10;
    c.finetune.eval_samples = 16;
    c.analysis.enabled = true;
    c.analysis.dataset_size = 100;
    const DistillReport d = run_distill(c);
    run_finetune(c, d.checkpoint);
  }
  std::size_t identical = 0;
  for (const auto& f : files) identical += read_file(dirs[0] / f) == read_file(dirs[1] / f);
  for (const auto& dir : dirs) std::filesystem::remove_all(dir);
  return {identical == files.size(), fmt::format("{} of {} artifacts bit-identical across reruns", identical, files.size())};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](const std::string& name, const Outcome& o) {
    fmt::print("{} {}: {}\n", o.pass ? "PASS" : "FAIL", name, o.detail);
    std::fflush(stdout);
    failures += !o.pass;
  };
  auto guarded = [&](const std::string& name, const std::function<Outcome()>& fn) {
    try {
      report(name, fn());
    } catch (const std::exception& e) {
      report(name, {false, std::string("exception: ") + e.what()});
    }
  };

  guarded("gradient suite", gradient_suite);
  guarded("dense equivalence at K = L", dense_equivalence);
  guarded("CTA schedule exhaustive grid", cta_exhaustive);
  guarded("MI loss oracle", mi_oracle);
  guarded("Gumbel straight-through contract", gumbel_contract);

  const auto dir = scratch("reference");
  const ExperimentConfig config = reference_config(dir);
  std::filesystem::path ckpt;
  guarded("desk-scale distillation", [&] {
    DistillOutcome d = desk_distillation(config);
    ckpt = d.checkpoint;
    return d.outcome;
  });
  if (ckpt.empty()) {
    report("FTR selects the relevant teacher", {false, "no distilled checkpoint"});
    report("CTA lowers across-seed utilisation variance", {false, "no distilled checkpoint"});
    report("noise patches lose information", {false, "no distilled checkpoint"});
  } else {
    const TeacherBank bank = make_teacher_bank(config);
    const SyntheticTask task = make_task(config, bank);
    guarded("FTR selects the relevant teacher", [&] { return teacher_selection(config, ckpt, task); });
    PatchOutcomes patch;
    try {
      patch = patch_routing(config, ckpt, task);
    } catch (const std::exception& e) {
      patch.variance = patch.suppression = {false, std::string("exception: ") + e.what()};
    }
    report("CTA lowers across-seed utilisation variance", patch.variance);
    report("noise patches lose information", patch.suppression);
  }
  guarded("KSG and KL estimator calibration", estimator_calibration);
  guarded("PER router parameter budget", budget_audit);
  guarded("bit-identical reruns", reproducibility);
  std::filesystem::remove_all(dir);

  fmt::print("{} of 12 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
