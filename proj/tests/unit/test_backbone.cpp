// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "ver/backbone.hpp"
#include "ver/error.hpp"
#include "ver/io.hpp"
#include "ver/teachers.hpp"

using namespace ver;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.grid = PatchGrid{8, 8, 3, 4};
  c.width = 8;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.base_blocks = 1;
  c.library_blocks = 3;
  c.experts = 4;
  c.top_k = 2;
  c.gate_hidden = 8;
  c.teacher_router_hidden = 8;
  c.patch_router_hidden = 4;
  c.teacher_dims = {5, 6, 7};
  return c;
}

std::vector<Image> images(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Image> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_scene_image(c.grid, rng));
  return out;
}

void max_abs_equal(const Tensor& a, const Tensor& b, double tol = 0.0) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  CHECK(worst <= tol);
}

// Zero the output layer and set its bias so the router always prefers `teacher`.
void pin_router(TeacherChoiceRouter& r, std::size_t teacher) {
  for (auto& h : r.heads()) {
    for (auto& v : h.fc3.weight.mutable_data()) v = 0.0;
    auto b = h.fc3.bias.mutable_data();
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = i == teacher ? 1.0 : 0.0;
  }
}

struct TempDir {
  std::filesystem::path path;
  TempDir() : path(std::filesystem::temp_directory_path() / ("ver_backbone_" + std::to_string(::getpid()))) {
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("config validation names the offending setting") {
  ModelConfig c = small_config();
  c.top_k = 5;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("top_k"), ContractError);
  c = small_config();
  c.width = 9;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = small_config();
  c.gumbel_tau = 0.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("strategy descriptions") {
  CHECK(describe(TeacherSpecific{0}) == "TS(1)");
  CHECK(describe(FramewiseTeacher{}) == "FTR");
  CHECK(describe(LayerwiseTeacher{}) == "LTR");
  CHECK(describe(PatchExpert{2, std::nullopt}) == "PER");
  CHECK(describe(PatchExpert{2, CtaSchedule{4, 2, 10}}) == "PER+CTA");
}

TEST_CASE("forward passes keep the token layout") {
  const ModelConfig c = small_config();
  VerModel model(c, 1);
  const auto imgs = images(c, 3, 2);
  const Tensor z = model.forward_bvt(imgs);
  CHECK(z.shape() == Shape{3 * 4, 8});
  const VelOutput out = model.forward_vel(z, 3, TeacherSpecific{1}, ForwardContext{});
  CHECK(out.tokens.shape() == z.shape());
  REQUIRE(out.layers.size() == 3);
  for (const auto& l : out.layers) {
    CHECK(l.probs.shape() == Shape{12, 4});
    CHECK(l.selected.size() == 12);
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(model.project_to_teacher(out.tokens, i).shape() == Shape{12, c.teacher_dims[i]});
  CHECK_THROWS_AS(model.project_to_teacher(out.tokens, 3), ContractError);
  CHECK_THROWS_AS(model.forward_vel(z, 5, TeacherSpecific{0}, ForwardContext{}), DimensionError);
  CHECK_THROWS_AS(model.forward_vel(z, 3, TeacherSpecific{3}, ForwardContext{}), ContractError);
}

TEST_CASE("robot strategies need their routers and random streams") {
  const ModelConfig c = small_config();
  VerModel model(c, 1);
  const Tensor z = model.forward_bvt(images(c, 1, 3));
  CHECK_THROWS_AS(model.forward_vel(z, 1, FramewiseTeacher{}, ForwardContext{}), ContractError);
  CHECK_THROWS_AS(model.forward_vel(z, 1, LayerwiseTeacher{}, ForwardContext{}), ContractError);
  CHECK_THROWS_AS(model.forward_vel(z, 1, PatchExpert{}, ForwardContext{}), ContractError);
  auto rng = make_stream(1, "router");
  model.attach_framewise_router(rng);
  std::mt19937_64 noise(1);
  CHECK_THROWS_AS(model.forward_vel(z, 1, FramewiseTeacher{}, ForwardContext{true, 0, &noise, nullptr}), ContractError);
  CHECK_THROWS_AS(model.forward_vel(z, 1, TeacherSpecific{0}, ForwardContext{true, 0, nullptr, nullptr}), ContractError);
}

TEST_CASE("framewise routing shares one teacher across layers and matches that teacher's router") {
  const ModelConfig c = small_config();
  VerModel model(c, 4);
  auto rng = make_stream(4, "router");
  model.attach_framewise_router(rng);
  const Tensor z = model.forward_bvt(images(c, 4, 5));
  std::mt19937_64 noise(2), gumbel(3);
  const VelOutput train = model.forward_vel(z, 4, FramewiseTeacher{}, ForwardContext{true, 0, &noise, &gumbel});
  for (std::size_t f = 0; f < 4; ++f)
    for (const auto& l : train.layers) CHECK(l.teacher_choice[f] == train.layers[0].teacher_choice[f]);

  for (std::size_t t = 0; t < 3; ++t) {
    pin_router(model.framewise_router(), t);
    const VelOutput ftr = model.forward_vel(z, 4, FramewiseTeacher{}, ForwardContext{});
    const VelOutput ts = model.forward_vel(z, 4, TeacherSpecific{t}, ForwardContext{});
    max_abs_equal(ftr.tokens, ts.tokens, 1e-12);
  }
}

TEST_CASE("layerwise routing with layer-constant logits equals framewise routing") {
  const ModelConfig c = small_config();
  VerModel model(c, 6);
  auto rng = make_stream(6, "router");
  model.attach_framewise_router(rng);
  model.attach_layerwise_router(rng);
  pin_router(model.framewise_router(), 2);
  pin_router(model.layerwise_router(), 2);
  const Tensor z = model.forward_bvt(images(c, 2, 7));
  const VelOutput a = model.forward_vel(z, 2, FramewiseTeacher{}, ForwardContext{});
  const VelOutput b = model.forward_vel(z, 2, LayerwiseTeacher{}, ForwardContext{});
  max_abs_equal(a.tokens, b.tokens);
}

TEST_CASE("patch routing uses the CTA schedule when present") {
  const ModelConfig c = small_config();
  VerModel model(c, 8);
  auto rng = make_stream(8, "router");
  model.attach_patch_router(rng);
  const Tensor z = model.forward_bvt(images(c, 2, 9));
  const PatchExpert per{2, CtaSchedule{4, 1, 10}};
  for (std::size_t step : {0, 3, 5, 10, 20}) {
    ForwardContext ctx;
    ctx.step = step;
    const VelOutput out = model.forward_vel(z, 2, per, ctx);
    for (const auto& l : out.layers) {
      CHECK(l.k == cta_k(*per.cta, step));
      for (const auto& sel : l.selected) CHECK(sel.size() == l.k);
    }
  }
}

TEST_CASE("parameter names are unique and the router budget is small") {
  VerModel model(ModelConfig{}, 1);
  std::set<std::string> names;
  model.visit_parameters("", [&](const std::string& n, Tensor&) { CHECK(names.insert(n).second); });
  const std::size_t before = model.parameter_count();
  auto rng = make_stream(1, "router");
  model.attach_patch_router(rng);
  const double share = static_cast<double>(model.patch_router_parameter_count()) / static_cast<double>(model.parameter_count());
  CHECK(model.parameter_count() == before + model.patch_router_parameter_count());
  CHECK(share < 0.004);
}

TEST_CASE("robot-phase freezing leaves only routers and new experts trainable") {
  const ModelConfig c = small_config();
  VerModel model(c, 2);
  auto rng = make_stream(2, "router");
  model.attach_patch_router(rng);
  model.set_expert_mix(true, 1, rng);
  CHECK(model.num_experts() == 5);
  model.freeze_for_robot_phase();
  std::size_t trainable = 0;
  model.visit_parameters("", [&](const std::string& n, Tensor& p) {
    if (!p.requires_grad()) return;
    ++trainable;
    const bool router = n.rfind("router.", 0) == 0;
    const bool new_expert = n.find("moe.expert4") != std::string::npos;
    CHECK_MESSAGE((router || new_expert), n);
  });
  CHECK(trainable > 0);
  for (const auto& p : model.frozen_parameters()) CHECK_FALSE(p.requires_grad());
}

TEST_CASE("expert mixes") {
  const ModelConfig c = small_config();
  VerModel scratch_only(c, 3);
  auto rng = make_stream(3, "tfs");
  scratch_only.set_expert_mix(false, 2, rng);
  CHECK(scratch_only.num_experts() == 2);
  for (const auto& e : scratch_only.library()[0].moe.experts()) CHECK(e.origin() == ExpertOrigin::FromScratch);
  VerModel none(c, 3);
  CHECK_THROWS_AS(none.set_expert_mix(false, 0, rng), ContractError);
}

TEST_CASE("checkpoints round-trip exactly") {
  TempDir dir;
  const ModelConfig c = small_config();
  VerModel a(c, 11);
  VerModel b(c, 12);
  const auto imgs = images(c, 2, 13);
  save_checkpoint(a, dir.path / "a.ckpt");
  load_checkpoint(b, dir.path / "a.ckpt");
  const Tensor za = a.forward_bvt(imgs), zb = b.forward_bvt(imgs);
  max_abs_equal(a.forward_vel(za, 2, TeacherSpecific{0}, {}).tokens, b.forward_vel(zb, 2, TeacherSpecific{0}, {}).tokens);
  save_checkpoint(b, dir.path / "b.ckpt");
  CHECK(read_file(dir.path / "a.ckpt") == read_file(dir.path / "b.ckpt"));
}

TEST_CASE("loading a mismatched checkpoint lists the manifest differences") {
  TempDir dir;
  ModelConfig c = small_config();
  VerModel a(c, 1);
  save_checkpoint(a, dir.path / "a.ckpt");
  c.experts = 5;
  VerModel wider(c, 1);
  CHECK_THROWS_WITH_AS(load_checkpoint(wider, dir.path / "a.ckpt"), doctest::Contains("missing library.0.moe.expert4"),
                       ContractError);
  c = small_config();
  c.teacher_dims = {5, 6, 8};
  VerModel other(c, 1);
  CHECK_THROWS_WITH_AS(load_checkpoint(other, dir.path / "a.ckpt"), doctest::Contains("shape head.2.weight"),
                       ContractError);
}

TEST_CASE("corrupt checkpoints raise format errors with offsets") {
  TempDir dir;
  VerModel a(small_config(), 1);
  save_checkpoint(a, dir.path / "a.ckpt");
  auto bytes = read_file(dir.path / "a.ckpt");

  auto write = [&](const std::vector<unsigned char>& data) {
    write_file_atomic(dir.path / "bad.ckpt", std::span<const unsigned char>(data));
    return dir.path / "bad.ckpt";
  };
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(read_checkpoint(write(truncated)), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_WITH_AS(read_checkpoint(write(trailing)), doctest::Contains("trailing"), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  try {
    read_checkpoint(write(magic));
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }
}

TEST_CASE("settled context puts CTA at its final K") {
  CHECK(settled_context(PatchExpert{2, CtaSchedule{6, 2, 300}}).step == 300);
  CHECK(cta_k(CtaSchedule{6, 2, 300}, settled_context(PatchExpert{2, CtaSchedule{6, 2, 300}}).step) == 2);
  CHECK(settled_context(PatchExpert{}).step == 0);
  CHECK_FALSE(settled_context(FramewiseTeacher{}).train);
}
