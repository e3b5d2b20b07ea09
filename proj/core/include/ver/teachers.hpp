// SPDX-License-Identifier: Apache-2.0
//
// Deterministic stand-ins for pretrained vision teachers. Each teacher maps an
// image to per-patch features [T x D] with a distinct structural signature:
//
//   local   t_j = tanh(W p_j + b)                         (patch j only)
//   mixing  t_j = tanh(W sum_k K_jk p_k + b)              (3x3 neighbourhood average)
//   global  t_j = tanh(W p_j + b) * (1 + 0.8 tanh(U pbar)) (pbar = image mean patch)
//
// with p_j the centred pixels of patch j and W, b, U drawn from the teacher seed.
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string_view>
#include <vector>

#include "ver/image.hpp"
#include "ver/tensor.hpp"

namespace ver {

enum class TeacherKind { Local, Mixing, Global };

std::string_view to_string(TeacherKind kind);
TeacherKind parse_teacher_kind(std::string_view name);

class SyntheticTeacher {
 public:
  SyntheticTeacher(TeacherKind kind, std::size_t dim, const PatchGrid& grid, std::uint64_t seed);

  /// Features [T x D]; a pure function of (seed, kind, image).
  Tensor features(const Image& image) const;

  TeacherKind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }
  const PatchGrid& grid() const { return grid_; }

 private:
  std::vector<double> project(std::span<const double> patch) const;

  TeacherKind kind_;
  std::size_t dim_;
  PatchGrid grid_;
  std::uint64_t seed_;
  std::vector<double> weight_;  // [D x patch_dim]
  std::vector<double> bias_;    // [D]
  std::vector<double> global_;  // [D x patch_dim], global kind only
};

class TeacherBank {
 public:
  TeacherBank() = default;
  explicit TeacherBank(std::vector<SyntheticTeacher> teachers) : teachers_(std::move(teachers)) {}

  /// Builds one teacher per kind with the given output dims; teacher i uses a
  /// seed derived from (`seed`, i).
  static TeacherBank make(const PatchGrid& grid, const std::vector<TeacherKind>& kinds,
                          const std::vector<std::size_t>& dims, std::uint64_t seed);

  std::size_t size() const { return teachers_.size(); }
  const SyntheticTeacher& operator[](std::size_t i) const { return teachers_.at(i); }
  std::vector<std::size_t> dims() const;

 private:
  std::vector<SyntheticTeacher> teachers_;
};

/// Smooth random scene: colour gradient background plus a few Gaussian blobs.
Image make_scene_image(const PatchGrid& grid, std::mt19937_64& rng);

/// Feature file: "VERFEAT1", u32 T, u32 D (little endian), then T*D fp64 values.
void save_features(const std::filesystem::path& path, const Tensor& features);
Tensor load_features(const std::filesystem::path& path);

}  // namespace ver
