// SPDX-License-Identifier: Apache-2.0
#include "ver/harness.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "ver/analysis.hpp"
#include "ver/error.hpp"
#include "ver/io.hpp"

namespace ver {

namespace {

// ---------------------------------------------------------------------------
// Config field registry

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::string item;
  std::stringstream ss{std::string(s)};
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(std::string_view key, std::string_view text) {
  const std::string t = trim(text);
  T value{};
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (ec != std::errc{} || ptr != t.data() + t.size() || t.empty()) {
    throw UsageError(fmt::format("{}: '{}' is not a valid number", key, t));
  }
  return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  throw UsageError(fmt::format("{}: '{}' is not a boolean", key, t));
}

std::string format_double(double v) { return fmt::format("{}", v); }

template <class T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + fmt::format("{}", values[i]);
  return out;
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, std::string_view, std::string_view)> set;
};

template <class T, class Access>
Field size_field(std::string section, std::string key, Access access) {
  return {std::move(section), std::move(key),
          [access](const ExperimentConfig& c) { return fmt::format("{}", access(const_cast<ExperimentConfig&>(c))); },
          [access](ExperimentConfig& c, std::string_view name, std::string_view v) {
            access(c) = parse_number<T>(name, v);
          }};
}

template <class Access>
Field double_field(std::string section, std::string key, Access access) {
  return {std::move(section), std::move(key),
          [access](const ExperimentConfig& c) { return format_double(access(const_cast<ExperimentConfig&>(c))); },
          [access](ExperimentConfig& c, std::string_view name, std::string_view v) {
            access(c) = parse_number<double>(name, v);
          }};
}

template <class Access>
Field bool_field(std::string section, std::string key, Access access) {
  return {std::move(section), std::move(key),
          [access](const ExperimentConfig& c) {
            return std::string(access(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
          },
          [access](ExperimentConfig& c, std::string_view name, std::string_view v) { access(c) = parse_bool(name, v); }};
}

template <class Access>
Field string_field(std::string section, std::string key, Access access) {
  return {std::move(section), std::move(key),
          [access](const ExperimentConfig& c) { return access(const_cast<ExperimentConfig&>(c)); },
          [access](ExperimentConfig& c, std::string_view, std::string_view v) { access(c) = trim(v); }};
}

template <class Access>
Field size_list_field(std::string section, std::string key, Access access) {
  return {std::move(section), std::move(key),
          [access](const ExperimentConfig& c) { return join(access(const_cast<ExperimentConfig&>(c))); },
          [access](ExperimentConfig& c, std::string_view name, std::string_view v) {
            std::vector<std::size_t> out;
            for (const auto& item : split_list(v)) out.push_back(parse_number<std::size_t>(name, item));
            access(c) = std::move(out);
          }};
}

template <class Access>
Field double_list_field(std::string section, std::string key, Access access) {
  return {std::move(section), std::move(key),
          [access](const ExperimentConfig& c) { return join(access(const_cast<ExperimentConfig&>(c))); },
          [access](ExperimentConfig& c, std::string_view name, std::string_view v) {
            std::vector<double> out;
            for (const auto& item : split_list(v)) out.push_back(parse_number<double>(name, item));
            access(c) = std::move(out);
          }};
}

#define VER_ACCESS(member) [](ExperimentConfig& c) -> auto& { return c.member; }

const std::vector<Field>& fields() {
  static const std::vector<Field> registry = [] {
    std::vector<Field> f;
    f.push_back(size_field<std::uint64_t>("run", "seed", VER_ACCESS(seed)));
    f.push_back(string_field("run", "output_dir", VER_ACCESS(output_dir)));

    f.push_back(size_field<std::size_t>("model", "image_height", VER_ACCESS(model.grid.height)));
    f.push_back(size_field<std::size_t>("model", "image_width", VER_ACCESS(model.grid.width)));
    f.push_back(size_field<std::size_t>("model", "channels", VER_ACCESS(model.grid.channels)));
    f.push_back(size_field<std::size_t>("model", "patch", VER_ACCESS(model.grid.patch)));
    f.push_back(size_field<std::size_t>("model", "width", VER_ACCESS(model.width)));
    f.push_back(size_field<std::size_t>("model", "heads", VER_ACCESS(model.heads)));
    f.push_back(size_field<std::size_t>("model", "mlp_ratio", VER_ACCESS(model.mlp_ratio)));
    f.push_back(size_field<std::size_t>("model", "base_blocks", VER_ACCESS(model.base_blocks)));
    f.push_back(size_field<std::size_t>("model", "library_blocks", VER_ACCESS(model.library_blocks)));
    f.push_back(size_field<std::size_t>("model", "experts", VER_ACCESS(model.experts)));
    f.push_back(size_field<std::size_t>("model", "top_k", VER_ACCESS(model.top_k)));
    f.push_back(size_field<std::size_t>("model", "gate_hidden", VER_ACCESS(model.gate_hidden)));
    f.push_back(size_field<std::size_t>("model", "patch_router_hidden", VER_ACCESS(model.patch_router_hidden)));
    f.push_back(size_field<std::size_t>("model", "teacher_router_hidden", VER_ACCESS(model.teacher_router_hidden)));
    f.push_back(double_field("model", "router_dropout", VER_ACCESS(model.router_dropout)));
    f.push_back(double_field("model", "gumbel_tau", VER_ACCESS(model.gumbel_tau)));
    f.push_back(bool_field("model", "renormalize", VER_ACCESS(model.renormalize)));

    f.push_back({"teachers", "kinds",
                 [](const ExperimentConfig& c) {
                   std::string out;
                   for (std::size_t i = 0; i < c.teacher_kinds.size(); ++i)
                     out += (i ? "," : "") + std::string(to_string(c.teacher_kinds[i]));
                   return out;
                 },
                 [](ExperimentConfig& c, std::string_view, std::string_view v) {
                   c.teacher_kinds.clear();
                   for (const auto& item : split_list(v)) c.teacher_kinds.push_back(parse_teacher_kind(item));
                 }});
    f.push_back(size_list_field("teachers", "dims", VER_ACCESS(model.teacher_dims)));
    f.push_back(size_field<std::uint64_t>("teachers", "seed", VER_ACCESS(teacher_seed)));

    f.push_back(double_list_field("loss", "alpha", VER_ACCESS(loss.alpha)));
    f.push_back(double_field("loss", "beta", VER_ACCESS(loss.beta)));
    f.push_back(double_field("loss", "gamma", VER_ACCESS(loss.gamma)));
    f.push_back(double_field("loss", "delta", VER_ACCESS(loss.delta)));

    f.push_back(size_field<std::size_t>("distill", "steps", VER_ACCESS(distill.steps)));
    f.push_back(size_field<std::size_t>("distill", "batch", VER_ACCESS(distill.batch)));
    f.push_back(double_field("distill", "lr", VER_ACCESS(distill.lr)));
    f.push_back(double_field("distill", "warmup_fraction", VER_ACCESS(distill.warmup_fraction)));
    f.push_back(double_field("distill", "constant_fraction", VER_ACCESS(distill.constant_fraction)));

    f.push_back(string_field("finetune", "strategy", VER_ACCESS(finetune.strategy)));
    f.push_back(size_field<std::size_t>("finetune", "k", VER_ACCESS(finetune.k)));
    f.push_back(bool_field("finetune", "cta", VER_ACCESS(finetune.cta)));
    f.push_back(size_field<std::size_t>("finetune", "k_min", VER_ACCESS(finetune.k_min)));
    f.push_back(double_field("finetune", "cta_horizon_fraction", VER_ACCESS(finetune.cta_horizon_fraction)));
    f.push_back(size_field<std::size_t>("finetune", "steps", VER_ACCESS(finetune.steps)));
    f.push_back(size_field<std::size_t>("finetune", "batch", VER_ACCESS(finetune.batch)));
    f.push_back(double_field("finetune", "lr", VER_ACCESS(finetune.lr)));
    f.push_back(double_field("finetune", "router_lr", VER_ACCESS(finetune.router_lr)));
    f.push_back(string_field("finetune", "schedule", VER_ACCESS(finetune.schedule)));
    f.push_back(size_field<std::size_t>("finetune", "policy_hidden", VER_ACCESS(finetune.policy_hidden)));
    f.push_back(size_field<std::size_t>("finetune", "eval_samples", VER_ACCESS(finetune.eval_samples)));
    f.push_back(bool_field("finetune", "keep_distilled", VER_ACCESS(finetune.keep_distilled)));
    f.push_back(size_field<std::size_t>("finetune", "tfs_experts", VER_ACCESS(finetune.tfs_experts)));

    // Teacher numbering in files is 1-based, matching the CLI strategy names.
    f.push_back({"task", "relevant_teacher",
                 [](const ExperimentConfig& c) { return fmt::format("{}", c.task.relevant_teacher + 1); },
                 [](ExperimentConfig& c, std::string_view name, std::string_view v) {
                   const auto t = parse_number<std::size_t>(name, v);
                   if (t == 0) throw UsageError("task.relevant_teacher counts from 1");
                   c.task.relevant_teacher = t - 1;
                 }});
    f.push_back(size_list_field("task", "relevant_patches", VER_ACCESS(task.relevant_patches)));
    f.push_back(size_field<std::size_t>("task", "target_dim", VER_ACCESS(task.target_dim)));
    f.push_back(double_field("task", "noise_amplitude", VER_ACCESS(task.noise_amplitude)));
    f.push_back(double_field("task", "success_threshold", VER_ACCESS(task.success_threshold)));
    f.push_back(size_field<std::size_t>("task", "calibration_samples", VER_ACCESS(task.calibration_samples)));
    f.push_back(size_field<std::uint64_t>("task", "seed", VER_ACCESS(task_seed)));

    f.push_back(bool_field("analysis", "enabled", VER_ACCESS(analysis.enabled)));
    f.push_back(size_field<std::size_t>("analysis", "dataset_size", VER_ACCESS(analysis.dataset_size)));
    f.push_back(double_field("analysis", "fraction", VER_ACCESS(analysis.fraction)));
    f.push_back(size_field<std::size_t>("analysis", "knn_k", VER_ACCESS(analysis.knn_k)));
    f.push_back(size_field<std::size_t>("analysis", "pca_dims", VER_ACCESS(analysis.pca_dims)));

    f.push_back(size_field<std::size_t>("ablation", "seeds", VER_ACCESS(ablation.seeds)));
    f.push_back(size_list_field("ablation", "k_values", VER_ACCESS(ablation.k_values)));
    return f;
  }();
  return registry;
}

#undef VER_ACCESS

const Field* find_field(std::string_view section, std::string_view key) {
  for (const auto& f : fields())
    if (f.section == section && f.key == key) return &f;
  return nullptr;
}

void require(bool ok, std::string_view key, std::string_view message) {
  if (!ok) throw ContractError(fmt::format("config {}: {}", key, message));
}

std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const std::filesystem::path& path, const std::string& text) { write_file_atomic(path, text); }

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ExperimentConfig::validate() const {
  try {
    model.validate();
  } catch (const ContractError& e) {
    throw ContractError(std::string("config [model]: ") + e.what());
  }
  require(teacher_kinds.size() == model.teacher_dims.size(), "teachers.kinds",
          "must list one kind per entry of teachers.dims");
  try {
    loss.validate(model.teachers());
  } catch (const ContractError& e) {
    throw ContractError(std::string("config [loss]: ") + e.what());
  }
  require(distill.steps > 0, "distill.steps", "must be positive");
  require(distill.batch > 0, "distill.batch", "must be positive");
  LrSchedule{distill.steps, distill.lr, distill.warmup_fraction, distill.constant_fraction}.validate();

  const auto& ft = finetune;
  require(ft.steps > 0, "finetune.steps", "must be positive");
  require(ft.batch > 0, "finetune.batch", "must be positive");
  require(ft.lr >= 0.0 && ft.router_lr >= 0.0, "finetune.lr", "learning rates must be non-negative");
  require(ft.schedule == "constant" || ft.schedule == "cosine", "finetune.schedule", "must be constant or cosine");
  require(ft.policy_hidden > 0, "finetune.policy_hidden", "must be positive");
  require(ft.eval_samples > 0, "finetune.eval_samples", "must be positive");
  const std::size_t experts = (ft.keep_distilled ? model.experts : 0) + ft.tfs_experts;
  require(experts > 0, "finetune.tfs_experts", "an expert library needs at least one expert");
  require(ft.k >= 1 && ft.k <= experts, "finetune.k", "must lie in [1, experts]");
  require(ft.k_min >= 1 && ft.k_min <= experts, "finetune.k_min", "must lie in [1, experts]");
  require(ft.cta_horizon_fraction > 0.0 && ft.cta_horizon_fraction <= 1.0, "finetune.cta_horizon_fraction",
          "must lie in (0, 1]");
  make_strategy(*this, ft.strategy);

  try {
    task.validate(model.grid, model.teachers());
  } catch (const ContractError& e) {
    throw ContractError(std::string("config [task]: ") + e.what());
  }
  require(analysis.fraction > 0.0 && analysis.fraction <= 1.0, "analysis.fraction", "must lie in (0, 1]");
  require(analysis.knn_k >= 1, "analysis.knn_k", "must be positive");
  require(analysis.pca_dims >= 1 && analysis.pca_dims <= model.width, "analysis.pca_dims", "must lie in [1, width]");
  require(ablation.seeds >= 1, "ablation.seeds", "must be positive");
  for (std::size_t k : ablation.k_values) require(k >= 1 && k <= experts, "ablation.k_values", "must lie in [1, experts]");
}

bool ExperimentConfig::operator==(const ExperimentConfig& other) const {
  for (const auto& f : fields())
    if (f.get(*this) != f.get(other)) return false;
  return true;
}

ExperimentConfig parse_config(std::string_view text) {
  boost::property_tree::ptree tree;
  std::istringstream in{std::string(text)};
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  ExperimentConfig config;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw UsageError("config: key '" + section + "' outside any section");
    for (const auto& [key, value] : body) {
      const Field* f = find_field(section, key);
      if (!f) throw UsageError("config: unknown key " + section + "." + key);
      f->set(config, section + "." + key, value.get_value<std::string>());
    }
  }
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(read_text(path)); }

std::string serialize_config(const ExperimentConfig& config) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      out += (section.empty() ? "" : "\n") + fmt::format("[{}]\n", f.section);
      section = f.section;
    }
    out += fmt::format("{} = {}\n", f.key, f.get(config));
  }
  return out;
}

void apply_override(ExperimentConfig& config, std::string_view dotted_key, std::string_view value) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string_view::npos) throw UsageError("override '" + std::string(dotted_key) + "' needs section.key");
  const Field* f = find_field(dotted_key.substr(0, dot), dotted_key.substr(dot + 1));
  if (!f) throw UsageError("unknown config key " + std::string(dotted_key));
  f->set(config, dotted_key, value);
}

// ---------------------------------------------------------------------------
// Builders

TeacherBank make_teacher_bank(const ExperimentConfig& config) {
  return TeacherBank::make(config.model.grid, config.teacher_kinds, config.model.teacher_dims, config.teacher_seed);
}

SyntheticTask make_task(const ExperimentConfig& config, const TeacherBank& bank) {
  return SyntheticTask(config.model.grid, bank, config.task, config.task_seed);
}

RoutingStrategy make_strategy(const ExperimentConfig& config, std::string_view name) {
  const auto& ft = config.finetune;
  if (name == "ftr") return FramewiseTeacher{};
  if (name == "ltr") return LayerwiseTeacher{};
  if (name == "per" || name == "per+cta") {
    const std::size_t experts = (ft.keep_distilled ? config.model.experts : 0) + ft.tfs_experts;
    PatchExpert s{std::min(ft.k, experts), std::nullopt};
    if (ft.cta || name == "per+cta") {
      const auto horizon = static_cast<std::size_t>(std::max(1.0, std::round(ft.cta_horizon_fraction * ft.steps)));
      s.cta = CtaSchedule{experts, std::min(ft.k_min, experts), horizon};
    }
    return s;
  }
  if (name.size() > 2 && name.substr(0, 2) == "ts") {
    const auto i = parse_number<std::size_t>("finetune.strategy", name.substr(2));
    if (i >= 1 && i <= config.model.teachers()) return TeacherSpecific{i - 1};
  }
  throw UsageError(fmt::format("unknown strategy '{}' (expected ts1..ts{}, ftr, ltr, per or per+cta)", name,
                               config.model.teachers()));
}

FinetuneOptions make_finetune_options(const ExperimentConfig& config, const RoutingStrategy& strategy,
                                      std::uint64_t seed) {
  FinetuneOptions o;
  o.strategy = strategy;
  o.steps = config.finetune.steps;
  o.batch = config.finetune.batch;
  o.lr = config.finetune.lr;
  o.router_lr = config.finetune.router_lr;
  o.cosine_schedule = config.finetune.schedule == "cosine";
  o.policy_hidden = config.finetune.policy_hidden;
  o.seed = seed;
  return o;
}

std::pair<double, double> mean_std(const std::vector<double>& values) {
  if (values.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double v : values) m += v;
  m /= static_cast<double>(values.size());
  if (values.size() < 2) return {m, 0.0};
  double s = 0.0;
  for (double v : values) s += (v - m) * (v - m);
  return {m, std::sqrt(s / static_cast<double>(values.size() - 1))};
}

// ---------------------------------------------------------------------------
// Distillation

DistillReport run_distill(const ExperimentConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const std::filesystem::path dir = config.output_dir;
  const TeacherBank bank = make_teacher_bank(config);
  VerModel model(config.model, derive_seed(config.seed, "init"));
  Adam optimizer(model.trainable_parameters());
  const LrSchedule schedule{config.distill.steps, config.distill.lr, config.distill.warmup_fraction,
                            config.distill.constant_fraction};
  auto data = make_stream(config.seed, "data");
  auto gate_noise = make_stream(config.seed, "gate-noise");

  const std::size_t teachers = model.config().teachers();
  std::string csv = "step,lr,total,distill,mi,mi_hard";
  for (std::size_t i = 0; i < teachers; ++i) csv += fmt::format(",cos_{}", i + 1);
  csv += '\n';

  DistillReport report;
  std::vector<Image> images(config.distill.batch);
  for (std::size_t step = 0; step < config.distill.steps; ++step) {
    for (auto& img : images) img = make_scene_image(config.model.grid, data);
    const auto targets = teacher_targets(bank, images);
    Tape tape;
    TapeScope scope(tape);
    const ForwardContext ctx{true, step, &gate_noise, nullptr};
    PretrainTerms terms = pretrain_terms(model, images, targets, config.loss, ctx);
    optimizer.zero_grad();
    tape.backward(terms.total);
    const double lr = lr_at(schedule, step);
    optimizer.step(lr);

    const double hard = mi_loss(hard_selection_stats(terms.traces)).item();
    csv += fmt::format("{},{},{},{},{},{}", step, lr, terms.total.item(), terms.distill.item(), terms.mi.item(), hard);
    for (double c : terms.cosine) csv += fmt::format(",{}", c);
    csv += '\n';
    if (step == 0) {
      report.initial_cosine = terms.cosine;
      report.initial_mi = terms.mi.item();
    }
    report.final_cosine = terms.cosine;
    report.final_mi = terms.mi.item();
  }
  report.checkpoint = dir / "distill.ckpt";
  report.metrics = dir / "distill_metrics.csv";
  save_checkpoint(model, report.checkpoint);
  write_text(report.metrics, csv);
  write_text(dir / "config.ini", serialize_config(config));
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// ---------------------------------------------------------------------------
// Finetuning

VerModel load_pretrained(const ExperimentConfig& config, const std::filesystem::path& checkpoint) {
  config.validate();
  VerModel model(config.model, derive_seed(config.seed, "init"));
  load_checkpoint(model, checkpoint);
  const auto& ft = config.finetune;
  if (!ft.keep_distilled || ft.tfs_experts > 0) {
    auto rng = make_stream(config.seed, "tfs");
    model.set_expert_mix(ft.keep_distilled, ft.tfs_experts, rng);
  }
  return model;
}

namespace {

void attach_router_for(VerModel& model, const RoutingStrategy& strategy, std::uint64_t seed) {
  auto rng = make_stream(seed, "router");
  if (std::holds_alternative<FramewiseTeacher>(strategy) && !model.has_framewise_router()) {
    model.attach_framewise_router(rng);
  } else if (std::holds_alternative<LayerwiseTeacher>(strategy) && !model.has_layerwise_router()) {
    model.attach_layerwise_router(rng);
  } else if (std::holds_alternative<PatchExpert>(strategy) && !model.has_patch_router()) {
    model.attach_patch_router(rng);
  }
}

std::string utilization_csv(const UtilizationTable& table) {
  std::string out = "layer,teacher,expert,frequency\n";
  for (std::size_t n = 0; n < table.per_layer.size(); ++n) {
    for (std::size_t l = 0; l < table.per_layer[n].size(); ++l)
      out += fmt::format("{},all,{},{}\n", n + 1, l + 1, table.per_layer[n][l]);
    for (std::size_t i = 0; i < table.per_layer_teacher[n].size(); ++i)
      for (std::size_t l = 0; l < table.per_layer_teacher[n][i].size(); ++l)
        out += fmt::format("{},{},{},{}\n", n + 1, i + 1, l + 1, table.per_layer_teacher[n][i][l]);
  }
  return out;
}

}  // namespace

std::vector<std::filesystem::path> write_analysis(const ExperimentConfig& config, const VerModel& model,
                                                  const RoutingStrategy& strategy,
                                                  const std::filesystem::path& directory) {
  const TeacherBank bank = make_teacher_bank(config);
  const SyntheticTask task = make_task(config, bank);
  const auto& a = config.analysis;
  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(directory / name, text);
    written.push_back(directory / name);
  };

  // Selection logs and the average last-layer norm map over a fixed sample set.
  auto data = make_stream(config.seed, "analysis-logs");
  std::vector<std::vector<LayerTrace>> logs;
  const std::size_t tokens = model.config().tokens();
  std::vector<double> norm_sum(tokens, 0.0);
  const std::size_t frames = std::min<std::size_t>(64, a.dataset_size);
  for (std::size_t f = 0; f < frames; ++f) {
    const Image img = task.sample(data).image;
    VelOutput out = model.forward_vel(model.forward_bvt(std::span<const Image>(&img, 1)), 1, strategy, settled_context(strategy));
    const Tensor norms = feature_norm_map(out.tokens, model.config().grid);
    for (std::size_t t = 0; t < tokens; ++t) norm_sum[t] += norms[t] / static_cast<double>(frames);
    logs.push_back(std::move(out.layers));
  }
  const Tensor norm_map({model.config().grid.rows(), model.config().grid.cols()}, norm_sum);
  emit("utilization.csv", utilization_csv(expert_utilization(logs, model.config().teachers())));
  emit("norm_map.pgm", to_pgm(norm_map));
  emit("norm_map.csv", to_csv(norm_map));

  const Tensor mi = per_patch_mi_before_after(model, task, strategy, a.dataset_size, a.fraction, config.seed, a.knn_k,
                                              a.pca_dims);
  emit("mi_map.pgm", to_pgm(mi));
  emit("mi_map.csv", to_csv(mi));
  return written;
}

FinetuneReport run_finetune(const ExperimentConfig& config, const std::filesystem::path& checkpoint) {
  VerModel model = load_pretrained(config, checkpoint);
  const TeacherBank bank = make_teacher_bank(config);
  const SyntheticTask task = make_task(config, bank);
  const RoutingStrategy strategy = make_strategy(config, config.finetune.strategy);
  const std::filesystem::path dir = config.output_dir;

  FinetuneReport report;
  report.run = finetune_router(model, task, make_finetune_options(config, strategy, config.seed));
  report.eval = evaluate(model, task, *report.run.head, strategy, config.finetune.eval_samples,
                         derive_seed(config.seed, "eval"));
  report.metrics = dir / "finetune_metrics.csv";
  report.checkpoint = dir / "finetune.ckpt";
  write_text(report.metrics, metrics_csv(report.run));
  save_checkpoint(model, report.checkpoint);
  std::vector<NamedTensor> head;
  report.run.head->visit_parameters("policy", [&head](const std::string& name, Tensor& p) { head.push_back({name, p}); });
  write_checkpoint(dir / "policy.ckpt", head);
  write_text(dir / "config.ini", serialize_config(config));
  if (config.analysis.enabled) report.artifacts = write_analysis(config, model, strategy, dir / "analysis");
  return report;
}

VerModel load_finetuned(const ExperimentConfig& config, const std::filesystem::path& checkpoint) {
  config.validate();
  VerModel model(config.model, derive_seed(config.seed, "init"));
  const auto& ft = config.finetune;
  if (!ft.keep_distilled || ft.tfs_experts > 0) {
    auto rng = make_stream(config.seed, "tfs");
    model.set_expert_mix(ft.keep_distilled, ft.tfs_experts, rng);
  }
  attach_router_for(model, make_strategy(config, ft.strategy), config.seed);
  load_checkpoint(model, checkpoint);
  return model;
}

// ---------------------------------------------------------------------------
// Ablations

AblationKind parse_ablation_kind(std::string_view name) {
  if (name == "topk") return AblationKind::TopK;
  if (name == "routing-strategy") return AblationKind::RoutingStrategy;
  if (name == "dfm-tfs") return AblationKind::DfmTfs;
  if (name == "cta") return AblationKind::Cta;
  throw UsageError("unknown ablation '" + std::string(name) + "' (valid: topk, routing-strategy, dfm-tfs, cta)");
}

std::string_view to_string(AblationKind kind) {
  switch (kind) {
    case AblationKind::TopK:
      return "topk";
    case AblationKind::RoutingStrategy:
      return "routing-strategy";
    case AblationKind::DfmTfs:
      return "dfm-tfs";
    case AblationKind::Cta:
      return "cta";
  }
  return "?";
}

std::vector<std::pair<std::size_t, std::size_t>> dfm_tfs_grid(std::size_t distilled_experts) {
  return {{distilled_experts, 0}, {0, 2}, {distilled_experts, 1}};
}

std::vector<std::string> routing_strategy_grid(std::size_t teachers) {
  std::vector<std::string> out;
  for (std::size_t i = 1; i <= teachers; ++i) out.push_back(fmt::format("ts{}", i));
  for (const char* s : {"ftr", "ltr", "per", "per+cta"}) out.emplace_back(s);
  return out;
}

AblationReport run_ablation(const ExperimentConfig& config, const std::filesystem::path& checkpoint,
                            AblationKind kind) {
  config.validate();
  const TeacherBank bank = make_teacher_bank(config);
  const SyntheticTask task = make_task(config, bank);

  struct Cell {
    std::string label;
    ExperimentConfig config;
    std::string strategy;
    std::size_t k = 0;
  };
  std::vector<Cell> cells;
  switch (kind) {
    case AblationKind::TopK:
      for (std::size_t k : config.ablation.k_values) {
        Cell c{fmt::format("K={}", k), config, "per", k};
        c.config.finetune.k = k;
        c.config.finetune.cta = false;
        cells.push_back(std::move(c));
      }
      break;
    case AblationKind::RoutingStrategy:
      for (const auto& s : routing_strategy_grid(config.model.teachers())) {
        Cell c{s, config, s, 0};
        c.config.finetune.cta = false;
        cells.push_back(std::move(c));
      }
      break;
    case AblationKind::DfmTfs:
      for (const auto& [dfm, tfs] : dfm_tfs_grid(config.model.experts)) {
        Cell c{fmt::format("DFM={} TFS={}", dfm, tfs), config, "per", 0};
        c.config.finetune.keep_distilled = dfm > 0;
        c.config.finetune.tfs_experts = tfs;
        c.config.finetune.k = std::min(config.finetune.k, dfm + tfs);
        c.config.finetune.k_min = std::min(config.finetune.k_min, dfm + tfs);
        cells.push_back(std::move(c));
      }
      break;
    case AblationKind::Cta:
      cells.push_back({"PER", config, "per", 0});
      cells.back().config.finetune.cta = false;
      cells.push_back({"PER+CTA", config, "per+cta", 0});
      break;
  }

  AblationReport report;
  report.kind = kind;
  for (auto& cell : cells) {
    cell.config.validate();
    AblationCell out;
    out.label = cell.label;
    const RoutingStrategy strategy = make_strategy(cell.config, cell.strategy);
    for (std::size_t r = 0; r < config.ablation.seeds; ++r) {
      const std::uint64_t seed = derive_seed(config.seed, fmt::format("replica{}", r));
      VerModel model = load_pretrained(cell.config, checkpoint);
      const FinetuneRun run = finetune_router(model, task, make_finetune_options(cell.config, strategy, seed));
      const EvalResult eval = evaluate(model, task, *run.head, strategy, cell.config.finetune.eval_samples,
                                       derive_seed(seed, "eval"));
      out.success.push_back(eval.success_rate);
      out.error.push_back(eval.mean_error);
      if (kind == AblationKind::TopK) out.active_parameters = active_parameter_count(model, cell.k);
    }
    std::tie(out.success_mean, out.success_std) = mean_std(out.success);
    std::tie(out.error_mean, out.error_std) = mean_std(out.error);
    report.cells.push_back(std::move(out));
  }

  std::string csv = "cell,seeds,success_mean,success_std,error_mean,error_std";
  if (kind == AblationKind::TopK) csv += ",active_parameters";
  csv += '\n';
  for (const auto& c : report.cells) {
    csv += fmt::format("{},{},{},{},{},{}", c.label, c.success.size(), c.success_mean, c.success_std, c.error_mean,
                       c.error_std);
    if (kind == AblationKind::TopK) csv += fmt::format(",{}", c.active_parameters);
    csv += '\n';
  }
  report.summary = std::filesystem::path(config.output_dir) / fmt::format("ablation_{}.csv", to_string(kind));
  write_text(report.summary, csv);
  return report;
}

}  // namespace ver
