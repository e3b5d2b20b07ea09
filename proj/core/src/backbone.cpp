// SPDX-License-Identifier: Apache-2.0
#include "ver/backbone.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "ver/error.hpp"
#include "ver/io.hpp"

namespace ver {

namespace {

double fan_in_std(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

AttentionSublayer make_attention(std::size_t width, std::size_t heads, std::mt19937_64& rng) {
  AttentionSublayer a;
  a.norm = LayerNorm(width);
  a.qkv = Linear(width, 3 * width, rng, fan_in_std(width));
  a.proj = Linear(width, width, rng, fan_in_std(width));
  a.heads = heads;
  return a;
}

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

}  // namespace

void ModelConfig::validate() const {
  grid.validate();
  if (width == 0 || heads == 0 || width % heads != 0) throw ContractError("width must be a positive multiple of heads");
  if (library_blocks == 0) throw ContractError("the expert library needs at least one block");
  if (experts == 0) throw ContractError("at least one expert per library layer is required");
  if (top_k < 1 || top_k > experts) throw ContractError("top_k must lie in [1, experts]");
  if (teacher_dims.empty()) throw ContractError("at least one teacher is required");
  if (gate_hidden == 0 || patch_router_hidden == 0 || teacher_router_hidden == 0 || mlp_ratio == 0) {
    throw ContractError("hidden widths must be positive");
  }
  if (router_dropout < 0.0 || router_dropout >= 1.0) throw ContractError("router dropout must be in [0, 1)");
  if (!(gumbel_tau > 0.0)) throw ContractError("Gumbel temperature must be positive");
}

ForwardContext settled_context(const RoutingStrategy& strategy) {
  ForwardContext ctx;
  if (const auto* per = std::get_if<PatchExpert>(&strategy); per && per->cta) ctx.step = per->cta->horizon;
  return ctx;
}

std::string describe(const RoutingStrategy& strategy) {
  return std::visit(Overloaded{
                        [](const TeacherSpecific& s) { return "TS(" + std::to_string(s.teacher + 1) + ")"; },
                        [](const FramewiseTeacher&) { return std::string("FTR"); },
                        [](const LayerwiseTeacher&) { return std::string("LTR"); },
                        [](const PatchExpert& s) { return std::string(s.cta ? "PER+CTA" : "PER"); },
                    },
                    strategy);
}

// ---------------------------------------------------------------------------
// Blocks

Tensor AttentionSublayer::operator()(const Tensor& x, std::size_t frames) const {
  const std::size_t rows = x.dim(0);
  const std::size_t width = x.dim(1);
  const std::size_t tokens = rows / frames;
  const std::size_t head_dim = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Tensor qkv_all = qkv(norm(x));
  std::vector<Tensor> per_frame;
  per_frame.reserve(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    Tensor frame = slice_rows(qkv_all, f * tokens, (f + 1) * tokens);
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor q = slice_cols(frame, h * head_dim, (h + 1) * head_dim);
      Tensor k = slice_cols(frame, width + h * head_dim, width + (h + 1) * head_dim);
      Tensor v = slice_cols(frame, 2 * width + h * head_dim, 2 * width + (h + 1) * head_dim);
      Tensor attn = softmax(matmul(q, transpose(k)) * scale, -1);
      outs.push_back(matmul(attn, v));
    }
    per_frame.push_back(heads == 1 ? outs.front() : concat_cols(outs));
  }
  return proj(frames == 1 ? per_frame.front() : concat_rows(per_frame));
}

void AttentionSublayer::visit_parameters(const std::string& prefix, const ParamVisitor& fn) {
  norm.visit_parameters(join_name(prefix, "norm"), fn);
  qkv.visit_parameters(join_name(prefix, "qkv"), fn);
  proj.visit_parameters(join_name(prefix, "proj"), fn);
}

Tensor DenseBlock::operator()(const Tensor& x, std::size_t frames) const {
  Tensor h = add(x, attention(x, frames));
  return add(h, fc2(gelu(fc1(ffn_norm(h)))));
}

void DenseBlock::visit_parameters(const std::string& prefix, const ParamVisitor& fn) {
  attention.visit_parameters(join_name(prefix, "attn"), fn);
  ffn_norm.visit_parameters(join_name(prefix, "ffn_norm"), fn);
  fc1.visit_parameters(join_name(prefix, "fc1"), fn);
  fc2.visit_parameters(join_name(prefix, "fc2"), fn);
}

void ExpertBlock::visit_parameters(const std::string& prefix, const ParamVisitor& fn) {
  attention.visit_parameters(join_name(prefix, "attn"), fn);
  moe_norm.visit_parameters(join_name(prefix, "moe_norm"), fn);
  moe.visit_parameters(join_name(prefix, "moe"), fn);
  for (std::size_t i = 0; i < teacher_gates.size(); ++i) {
    teacher_gates[i].visit_parameters(join_name(prefix, "gate.teacher" + std::to_string(i)), fn);
  }
}

Tensor PatchEmbedder::operator()(std::span<const Image> images) const {
  Tensor patches = patchify(images, grid);
  Tensor tokens = proj(patches);
  std::vector<std::size_t> pos_index(patches.dim(0));
  for (std::size_t r = 0; r < pos_index.size(); ++r) pos_index[r] = r % grid.tokens();
  return add(tokens, gather_rows(position, pos_index));
}

void PatchEmbedder::visit_parameters(const std::string& prefix, const ParamVisitor& fn) {
  proj.visit_parameters(join_name(prefix, "proj"), fn);
  fn(join_name(prefix, "position"), position);
}

// ---------------------------------------------------------------------------
// Model

VerModel::VerModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
  config_.validate();
  auto rng = make_stream(seed, "init");
  const std::size_t m = config_.width;
  const std::size_t hidden = m * config_.mlp_ratio;

  embed_.grid = config_.grid;
  embed_.proj = Linear(config_.grid.patch_dim(), m, rng, fan_in_std(config_.grid.patch_dim()));
  embed_.position = Tensor::randn({config_.tokens(), m}, rng, 0.1).set_requires_grad(true);

  for (std::size_t b = 0; b < config_.base_blocks; ++b) {
    DenseBlock block;
    block.attention = make_attention(m, config_.heads, rng);
    block.ffn_norm = LayerNorm(m);
    block.fc1 = Linear(m, hidden, rng, fan_in_std(m));
    block.fc2 = Linear(hidden, m, rng, fan_in_std(hidden));
    base_.push_back(std::move(block));
  }
  for (std::size_t n = 0; n < config_.library_blocks; ++n) {
    ExpertBlock block{make_attention(m, config_.heads, rng), LayerNorm(m),
                      MoeLayer(m, hidden, config_.experts, rng, fan_in_std(m)), {}};
    for (std::size_t i = 0; i < config_.teachers(); ++i) {
      block.teacher_gates.emplace_back(m, config_.gate_hidden, config_.experts, rng);
    }
    library_.push_back(std::move(block));
  }
  for (std::size_t i = 0; i < config_.teachers(); ++i) {
    heads_.emplace_back(m, config_.teacher_dims[i], rng, fan_in_std(m));
  }
}

Tensor VerModel::forward_bvt(std::span<const Image> images) const {
  if (images.empty()) throw ContractError("forward_bvt needs at least one image");
  Tensor x = embed_(images);
  for (const auto& block : base_) x = block(x, images.size());
  return x;
}

Tensor VerModel::teacher_routed_layer(const ExpertBlock& block, const Tensor& h, std::size_t frames,
                                      const std::vector<TeacherRoute>& routes, const ForwardContext& ctx,
                                      LayerTrace& trace) const {
  const std::size_t rows = h.dim(0);
  const std::size_t tokens = rows / frames;
  const std::size_t teachers = config_.teachers();
  const std::size_t experts = block.moe.num_experts();

  std::vector<Tensor> weight_rows;
  for (const auto& r : routes) weight_rows.push_back(reshape(r.weights, {1, teachers}));
  const Tensor weights = frames == 1 ? weight_rows.front() : concat_rows(weight_rows);

  trace.k = config_.top_k;
  trace.selected.assign(rows, {});
  std::vector<double> probs(rows * experts, 0.0);
  for (const auto& r : routes) trace.teacher_choice.push_back(r.teacher);
  {
    std::vector<Tensor> p;
    for (const auto& r : routes) p.push_back(reshape(r.probs.detach(), {1, teachers}));
    trace.teacher_probs = frames == 1 ? p.front() : concat_rows(p);
  }

  Tensor mixed;
  for (std::size_t i = 0; i < teachers; ++i) {
    std::vector<std::size_t> rows_i;
    for (std::size_t r = 0; r < rows; ++r) {
      if (ctx.train || routes[r / tokens].teacher == i) rows_i.push_back(r);
    }
    if (rows_i.empty()) continue;
    const bool all_rows = rows_i.size() == rows;
    Tensor hi = all_rows ? h : gather_rows(h, rows_i);
    MoeOutput out = moe_forward(block.moe, hi, block.teacher_gates[i], config_.top_k, ctx.train, ctx.gate_noise,
                                config_.renormalize);
    std::vector<std::size_t> frame_of(rows_i.size());
    for (std::size_t k = 0; k < rows_i.size(); ++k) frame_of[k] = rows_i[k] / tokens;
    Tensor w = gather_rows(slice_cols(weights, i, i + 1), frame_of);
    Tensor contrib = scale_rows(out.output, w);
    if (!all_rows) contrib = scatter_add_rows(contrib, rows_i, rows);
    mixed = mixed.defined() ? add(mixed, contrib) : contrib;

    for (std::size_t k = 0; k < rows_i.size(); ++k) {
      const std::size_t r = rows_i[k];
      if (routes[r / tokens].teacher != i) continue;
      trace.selected[r] = out.routing.selected[k];
      std::copy_n(out.routing.probs.data().begin() + static_cast<std::ptrdiff_t>(k * experts), experts,
                  probs.begin() + static_cast<std::ptrdiff_t>(r * experts));
    }
  }
  trace.probs = Tensor({rows, experts}, std::move(probs));
  return mixed;
}

VelOutput VerModel::forward_vel(const Tensor& z, std::size_t frames, const RoutingStrategy& strategy,
                                const ForwardContext& ctx) const {
  if (frames == 0 || z.rank() != 2 || z.dim(0) % frames != 0 || z.dim(1) != config_.width) {
    throw DimensionError("forward_vel: tokens " + shape_string(z.shape()) + " for " + std::to_string(frames) + " frames");
  }
  const std::size_t tokens = z.dim(0) / frames;
  const TeacherChoiceRouter* teacher_router = nullptr;
  if (std::holds_alternative<FramewiseTeacher>(strategy)) {
    if (!framewise_) throw ContractError("FTR strategy used without an attached framewise router");
    teacher_router = &*framewise_;
  } else if (std::holds_alternative<LayerwiseTeacher>(strategy)) {
    if (!layerwise_) throw ContractError("LTR strategy used without an attached layerwise router");
    teacher_router = &*layerwise_;
  } else if (std::holds_alternative<PatchExpert>(strategy)) {
    if (!patch_) throw ContractError("PER strategy used without an attached patch router");
  } else if (std::get<TeacherSpecific>(strategy).teacher >= config_.teachers()) {
    throw ContractError("teacher index " + std::to_string(std::get<TeacherSpecific>(strategy).teacher) +
                        " out of range");
  }
  if (ctx.train && ctx.gate_noise == nullptr) throw ContractError("training-mode forward needs a gate-noise stream");
  if (ctx.train && teacher_router && ctx.gumbel == nullptr) {
    throw ContractError("training-mode teacher routing needs a Gumbel stream");
  }

  auto frame_routes = [&](const Tensor& x, std::size_t layer) {
    std::vector<TeacherRoute> routes;
    for (std::size_t f = 0; f < frames; ++f) {
      routes.push_back(route_teacher(*teacher_router, slice_rows(x, f * tokens, (f + 1) * tokens), layer, ctx.train,
                                     ctx.gumbel));
    }
    return routes;
  };

  VelOutput out;
  Tensor x = z;
  std::vector<TeacherRoute> shared_routes;
  if (teacher_router && teacher_router->granularity() == TeacherGranularity::Framewise) shared_routes = frame_routes(z, 0);

  for (std::size_t n = 0; n < library_.size(); ++n) {
    const ExpertBlock& block = library_[n];
    LayerTrace trace;
    std::vector<TeacherRoute> layer_routes;
    if (teacher_router && teacher_router->granularity() == TeacherGranularity::Layerwise) layer_routes = frame_routes(x, n);

    x = add(x, block.attention(x, frames));
    Tensor h = block.moe_norm(x);
    Tensor mixed = std::visit(
        Overloaded{
            [&](const TeacherSpecific& s) {
              MoeOutput o = moe_forward(block.moe, h, block.teacher_gates[s.teacher], config_.top_k, ctx.train,
                                        ctx.gate_noise, config_.renormalize);
              trace.k = config_.top_k;
              trace.probs = o.routing.probs;
              trace.selected = std::move(o.routing.selected);
              return o.output;
            },
            [&](const FramewiseTeacher&) { return teacher_routed_layer(block, h, frames, shared_routes, ctx, trace); },
            [&](const LayerwiseTeacher&) { return teacher_routed_layer(block, h, frames, layer_routes, ctx, trace); },
            [&](const PatchExpert& s) {
              const std::size_t k = s.cta ? cta_k(*s.cta, ctx.step) : s.k;
              Routing r = patch_->route(h, n, k, ctx.train, ctx.gate_noise);
              Tensor o = block.moe.combine(h, r);
              trace.k = k;
              trace.probs = r.probs;
              trace.selected = std::move(r.selected);
              return o;
            },
        },
        strategy);
    x = add(x, mixed);
    out.layers.push_back(std::move(trace));
  }
  out.tokens = x;
  return out;
}

Tensor VerModel::project_to_teacher(const Tensor& y, std::size_t teacher) const {
  if (teacher >= heads_.size()) {
    throw ContractError("teacher index " + std::to_string(teacher) + " out of range for " +
                        std::to_string(heads_.size()) + " heads");
  }
  return heads_[teacher](y);
}

void VerModel::attach_framewise_router(std::mt19937_64& rng) {
  framewise_.emplace(TeacherGranularity::Framewise, config_.width, config_.teacher_router_hidden, config_.teachers(),
                     config_.library_blocks, rng, config_.router_dropout, config_.gumbel_tau);
}

void VerModel::attach_layerwise_router(std::mt19937_64& rng) {
  layerwise_.emplace(TeacherGranularity::Layerwise, config_.width, config_.teacher_router_hidden, config_.teachers(),
                     config_.library_blocks, rng, config_.router_dropout, config_.gumbel_tau);
}

void VerModel::attach_patch_router(std::mt19937_64& rng) {
  patch_.emplace(config_.width, config_.patch_router_hidden, num_experts(), config_.library_blocks, rng);
}

TeacherChoiceRouter& VerModel::framewise_router() {
  if (!framewise_) throw ContractError("no framewise router attached");
  return *framewise_;
}

TeacherChoiceRouter& VerModel::layerwise_router() {
  if (!layerwise_) throw ContractError("no layerwise router attached");
  return *layerwise_;
}

PatchExpertRouter& VerModel::patch_router() {
  if (!patch_) throw ContractError("no patch router attached");
  return *patch_;
}

void VerModel::add_experts(std::size_t count, ExpertOrigin origin, std::mt19937_64& rng, double stddev) {
  for (auto& block : library_) {
    block.moe.add_experts(count, origin, rng, stddev);
    for (auto& g : block.teacher_gates) g.add_experts(count, rng, stddev);
  }
  if (patch_) patch_->add_experts(count, rng, stddev);
}

void VerModel::set_expert_mix(bool keep_distilled, std::size_t from_scratch, std::mt19937_64& rng) {
  if (!keep_distilled) {
    if (from_scratch == 0) throw ContractError("an expert library needs at least one expert");
    for (auto& block : library_) block.moe.remove_experts(ExpertOrigin::Distilled);
    patch_.reset();
  }
  for (auto& block : library_) {
    if (from_scratch > 0) block.moe.add_experts(from_scratch, ExpertOrigin::FromScratch, rng);
  }
  if (keep_distilled && from_scratch > 0) {
    for (auto& block : library_)
      for (auto& g : block.teacher_gates) g.add_experts(from_scratch, rng, 0.02);
    if (patch_) patch_->add_experts(from_scratch, rng, 0.02);
  }
}

void VerModel::freeze_for_robot_phase() {
  visit_parameters("", [](const std::string&, Tensor& p) { p.set_requires_grad(false); });
  auto thaw = [](const std::string&, Tensor& p) { p.set_requires_grad(true); };
  if (framewise_) framewise_->visit_parameters("", thaw);
  if (layerwise_) layerwise_->visit_parameters("", thaw);
  if (patch_) patch_->visit_parameters("", thaw);
  for (auto& block : library_)
    for (auto& e : block.moe.experts())
      if (e.origin() == ExpertOrigin::FromScratch) e.visit_parameters("", thaw);
}

void VerModel::visit_parameters(const std::string& prefix, const ParamVisitor& fn) {
  embed_.visit_parameters(join_name(prefix, "embed"), fn);
  for (std::size_t b = 0; b < base_.size(); ++b) base_[b].visit_parameters(join_name(prefix, "base." + std::to_string(b)), fn);
  for (std::size_t n = 0; n < library_.size(); ++n) {
    library_[n].visit_parameters(join_name(prefix, "library." + std::to_string(n)), fn);
  }
  for (std::size_t i = 0; i < heads_.size(); ++i) heads_[i].visit_parameters(join_name(prefix, "head." + std::to_string(i)), fn);
  if (framewise_) framewise_->visit_parameters(join_name(prefix, "router.framewise"), fn);
  if (layerwise_) layerwise_->visit_parameters(join_name(prefix, "router.layerwise"), fn);
  if (patch_) patch_->visit_parameters(join_name(prefix, "router.patch"), fn);
}

std::vector<Tensor> VerModel::frozen_parameters() {
  std::vector<Tensor> out;
  auto collect = [&out](const std::string&, Tensor& p) { out.push_back(p); };
  embed_.visit_parameters("", collect);
  for (auto& b : base_) b.visit_parameters("", collect);
  for (auto& block : library_) {
    block.attention.visit_parameters("", collect);
    block.moe_norm.visit_parameters("", collect);
    for (auto& e : block.moe.experts())
      if (e.origin() == ExpertOrigin::Distilled) e.visit_parameters("", collect);
    for (auto& g : block.teacher_gates) g.visit_parameters("", collect);
  }
  for (auto& h : heads_) h.visit_parameters("", collect);
  return out;
}

std::vector<Tensor> VerModel::trainable_parameters() {
  std::vector<Tensor> out;
  visit_parameters("", [&out](const std::string&, Tensor& p) {
    if (p.requires_grad()) out.push_back(p);
  });
  return out;
}

std::size_t VerModel::parameter_count() { return count_parameters(*this); }

std::size_t VerModel::patch_router_parameter_count() { return patch_ ? count_parameters(*patch_) : 0; }

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::string_view kCheckpointMagic = "VERCKPT1";

std::string encode_shape(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

Shape decode_shape(const std::string& text, std::size_t offset) {
  Shape s;
  if (text.empty()) return s;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    try {
      std::size_t used = 0;
      s.push_back(std::stoul(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw FormatError("bad shape '" + text + "' in checkpoint manifest", offset);
    }
  }
  return s;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  ByteWriter w;
  w.text(kCheckpointMagic);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    const std::string record = t.name + '\t' + encode_shape(t.value.shape()) + '\t' + std::to_string(offset);
    w.u32(static_cast<std::uint32_t>(record.size()));
    w.text(record);
    offset += t.value.numel() * sizeof(double);
  }
  for (const auto& t : tensors) w.f64s(t.value.data());
  write_file_atomic(path, w.buffer());
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes);
  if (r.text(kCheckpointMagic.size(), "checkpoint magic") != kCheckpointMagic) {
    throw FormatError("bad checkpoint magic", 0);
  }
  const std::uint32_t count = r.u32("record count");
  struct Record {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Record> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const std::uint32_t len = r.u32("manifest record length");
    const std::string rec = r.text(len, "manifest record");
    const auto t1 = rec.find('\t');
    const auto t2 = t1 == std::string::npos ? std::string::npos : rec.find('\t', t1 + 1);
    if (t2 == std::string::npos) throw FormatError("malformed manifest record", at);
    Record record{rec.substr(0, t1), decode_shape(rec.substr(t1 + 1, t2 - t1 - 1), at), 0};
    try {
      record.offset = std::stoull(rec.substr(t2 + 1));
    } catch (const std::exception&) {
      throw FormatError("bad payload offset in manifest", at);
    }
    records.push_back(std::move(record));
  }
  const std::size_t payload_start = r.offset();
  std::uint64_t expected = 0;
  std::vector<NamedTensor> out;
  for (const auto& rec : records) {
    if (rec.offset != expected) throw FormatError("non-contiguous payload for " + rec.name, payload_start + rec.offset);
    const std::size_t n = shape_numel(rec.shape);
    out.push_back({rec.name, Tensor(rec.shape, r.f64s(n, "parameter payload"))});
    expected += n * sizeof(double);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint payload", r.offset());
  return out;
}

void save_checkpoint(VerModel& model, const std::filesystem::path& path) {
  std::vector<NamedTensor> tensors;
  model.visit_parameters("", [&tensors](const std::string& name, Tensor& p) { tensors.push_back({name, p}); });
  write_checkpoint(path, tensors);
}

void load_checkpoint(VerModel& model, const std::filesystem::path& path) {
  const auto stored = read_checkpoint(path);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : stored) by_name[t.name] = &t.value;

  std::vector<std::string> diff;
  std::map<std::string, bool> seen;
  model.visit_parameters("", [&](const std::string& name, Tensor& p) {
    seen[name] = true;
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      diff.push_back("missing " + name);
    } else if (it->second->shape() != p.shape()) {
      diff.push_back("shape " + name + ": model " + shape_string(p.shape()) + ", checkpoint " +
                     shape_string(it->second->shape()));
    }
  });
  for (const auto& t : stored) {
    if (!seen.count(t.name)) diff.push_back("unexpected " + t.name);
  }
  if (!diff.empty()) {
    std::string msg = "checkpoint " + path.string() + " does not match the model:";
    for (const auto& d : diff) msg += "\n  " + d;
    throw ContractError(msg);
  }
  model.visit_parameters("", [&](const std::string& name, Tensor& p) {
    const auto src = by_name.at(name)->data();
    auto dst = p.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  });
}

}  // namespace ver
