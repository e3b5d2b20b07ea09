// SPDX-License-Identifier: Apache-2.0
//
// ver: command-line driver for distillation, finetuning, ablations and
// analysis. Config keys can be overridden as --section.key=value.
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "ver/backbone.hpp"
#include "ver/error.hpp"
#include "ver/harness.hpp"

namespace {

constexpr int kExitContract = 1;
constexpr int kExitUsage = 2;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("-c,--config", common.config_path, "Experiment config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", common.seed, "Override run.seed");
  cmd->add_option("-o,--output-dir", common.output_dir, "Override run.output_dir");
  cmd->allow_extras();
}

// Turns leftover "--section.key=value" / "--section.key value" arguments into overrides.
void apply_extras(ver::ExperimentConfig& config, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& arg = extras[i];
    if (arg.rfind("--", 0) != 0) throw ver::UsageError("unexpected argument '" + arg + "'");
    std::string key = arg.substr(2);
    std::string value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key.resize(eq);
    } else {
      if (i + 1 >= extras.size()) throw ver::UsageError("missing value for --" + key);
      value = extras[++i];
    }
    ver::apply_override(config, key, value);
  }
}

ver::ExperimentConfig resolve(const Common& common, const CLI::App* cmd) {
  ver::ExperimentConfig config = common.config_path.empty() ? ver::ExperimentConfig{} : ver::load_config(common.config_path);
  apply_extras(config, cmd->remaining());
  if (common.seed) config.seed = *common.seed;
  if (common.output_dir) config.output_dir = *common.output_dir;
  config.validate();
  return config;
}

std::filesystem::path default_path(const ver::ExperimentConfig& config, const std::string& given, const char* name) {
  return given.empty() ? std::filesystem::path(config.output_dir) / name : std::filesystem::path(given);
}

std::string joined(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += fmt::format("{}{:.4f}", i ? " " : "", v[i]);
  return out;
}

void inspect(const std::filesystem::path& path) {
  const auto tensors = ver::read_checkpoint(path);
  std::size_t total = 0;
  for (const auto& t : tensors) {
    fmt::print("{}\t{}\n", t.name, ver::shape_string(t.value.shape()));
    total += t.value.numel();
  }
  fmt::print("{} tensors, {} parameters\n", tensors.size(), total);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vision expert library experiments"};
  app.require_subcommand(1);

  Common distill_opts, finetune_opts, ablate_opts, analyze_opts;
  std::string checkpoint, kind, print_config_path;
  bool dump_config = false;

  auto* distill = app.add_subcommand("distill", "Distil the synthetic teachers into the expert library");
  add_common(distill, distill_opts);
  distill->add_flag("--print-config", dump_config, "Print the resolved config and exit");

  auto* finetune = app.add_subcommand("finetune", "Train a robot router and policy head on the synthetic task");
  add_common(finetune, finetune_opts);
  finetune->add_option("--checkpoint", checkpoint, "Distillation checkpoint (default <output_dir>/distill.ckpt)");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid over seeds");
  add_common(ablate, ablate_opts);
  ablate->add_option("kind", kind, "topk | routing-strategy | dfm-tfs | cta")->required();
  ablate->add_option("--checkpoint", checkpoint, "Distillation checkpoint (default <output_dir>/distill.ckpt)");

  auto* analyze = app.add_subcommand("analyze", "Write utilisation, norm and MI maps for a finetuned model");
  add_common(analyze, analyze_opts);
  analyze->add_option("--checkpoint", checkpoint, "Finetuned checkpoint (default <output_dir>/finetune.ckpt)");

  auto* inspect_cmd = app.add_subcommand("inspect-checkpoint", "List the tensors stored in a checkpoint");
  inspect_cmd->add_option("path", print_config_path, "Checkpoint file")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*distill) {
      const auto config = resolve(distill_opts, distill);
      if (dump_config) {
        std::fputs(ver::serialize_config(config).c_str(), stdout);
        return 0;
      }
      const auto r = ver::run_distill(config);
      fmt::print("cosine  {} -> {}\n", joined(r.initial_cosine), joined(r.final_cosine));
      fmt::print("mi      {:.4f} -> {:.4f}\n", r.initial_mi, r.final_mi);
      fmt::print("wrote   {} and {} ({:.1f}s)\n", r.checkpoint.string(), r.metrics.string(), r.seconds);
    } else if (*finetune) {
      const auto config = resolve(finetune_opts, finetune);
      const auto r = ver::run_finetune(config, default_path(config, checkpoint, "distill.ckpt"));
      fmt::print("strategy {}  success {:.3f}  error {:.4f}\n", r.run.strategy, r.eval.success_rate, r.eval.mean_error);
      if (!r.eval.teacher_frequency.empty()) fmt::print("teacher frequency {}\n", joined(r.eval.teacher_frequency));
      fmt::print("frozen parameters {}\n",
                 r.run.frozen_checksum_before == r.run.frozen_checksum_after ? "unchanged" : "CHANGED");
      fmt::print("wrote {} and {}\n", r.metrics.string(), r.checkpoint.string());
      for (const auto& p : r.artifacts) fmt::print("wrote {}\n", p.string());
    } else if (*ablate) {
      const auto config = resolve(ablate_opts, ablate);
      const auto k = ver::parse_ablation_kind(kind);
      const auto r = ver::run_ablation(config, default_path(config, checkpoint, "distill.ckpt"), k);
      for (const auto& c : r.cells) {
        fmt::print("{:<14} success {:.3f} +- {:.3f}  error {:.4f} +- {:.4f}", c.label, c.success_mean, c.success_std,
                   c.error_mean, c.error_std);
        if (c.active_parameters) fmt::print("  active {}", c.active_parameters);
        fmt::print("\n");
      }
      fmt::print("wrote {}\n", r.summary.string());
    } else if (*analyze) {
      const auto config = resolve(analyze_opts, analyze);
      const auto model = ver::load_finetuned(config, default_path(config, checkpoint, "finetune.ckpt"));
      const auto strategy = ver::make_strategy(config, config.finetune.strategy);
      for (const auto& p : ver::write_analysis(config, model, strategy, std::filesystem::path(config.output_dir) / "analysis"))
        fmt::print("wrote {}\n", p.string());
    } else if (*inspect_cmd) {
      inspect(print_config_path);
    }
  } catch (const ver::UsageError& e) {
    fmt::print(stderr, "usage error: {}\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitContract;
  }
  return 0;
}
