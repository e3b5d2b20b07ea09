// SPDX-License-Identifier: Apache-2.0
#include "ver/teachers.hpp"

#include <cmath>
#include <string>

#include "ver/error.hpp"
#include "ver/io.hpp"
#include "ver/nn.hpp"

namespace ver {

namespace {

constexpr std::string_view kFeatureMagic = "VERFEAT1";
constexpr double kProjectionGain = 3.0;
constexpr double kBiasScale = 0.8;
constexpr double kGlobalDepth = 0.8;

std::vector<double> gaussian(std::size_t n, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

std::vector<double> centred_patch(const Image& image, const PatchGrid& grid, std::size_t token) {
  auto p = patch_vector(image, grid, token);
  for (auto& v : p) v -= 0.5;
  return p;
}

}  // namespace

std::string_view to_string(TeacherKind kind) {
  switch (kind) {
    case TeacherKind::Local:
      return "local";
    case TeacherKind::Mixing:
      return "mixing";
    case TeacherKind::Global:
      return "global";
  }
  return "?";
}

TeacherKind parse_teacher_kind(std::string_view name) {
  if (name == "local") return TeacherKind::Local;
  if (name == "mixing") return TeacherKind::Mixing;
  if (name == "global") return TeacherKind::Global;
  throw UsageError("unknown teacher kind '" + std::string(name) + "' (expected local, mixing or global)");
}

SyntheticTeacher::SyntheticTeacher(TeacherKind kind, std::size_t dim, const PatchGrid& grid, std::uint64_t seed)
    : kind_(kind), dim_(dim), grid_(grid), seed_(seed) {
  grid_.validate();
  if (dim == 0) throw ContractError("teacher feature dim must be positive");
  auto rng = make_stream(seed, "teacher");
  const double stddev = kProjectionGain / std::sqrt(static_cast<double>(grid_.patch_dim()));
  weight_ = gaussian(dim * grid_.patch_dim(), stddev, rng);
  bias_ = gaussian(dim, kBiasScale, rng);
  if (kind == TeacherKind::Global) global_ = gaussian(dim * grid_.patch_dim(), 2.0 * stddev, rng);
}

std::vector<double> SyntheticTeacher::project(std::span<const double> patch) const {
  const std::size_t pd = grid_.patch_dim();
  std::vector<double> out(dim_);
  for (std::size_t d = 0; d < dim_; ++d) {
    double acc = bias_[d];
    const double* w = weight_.data() + d * pd;
    for (std::size_t k = 0; k < pd; ++k) acc += w[k] * patch[k];
    out[d] = std::tanh(acc);
  }
  return out;
}

Tensor SyntheticTeacher::features(const Image& image) const {
  grid_.check(image);
  const std::size_t t = grid_.tokens();
  const std::size_t pd = grid_.patch_dim();
  std::vector<std::vector<double>> patches(t);
  for (std::size_t j = 0; j < t; ++j) patches[j] = centred_patch(image, grid_, j);

  std::vector<double> out;
  out.reserve(t * dim_);
  switch (kind_) {
    case TeacherKind::Local:
      for (std::size_t j = 0; j < t; ++j) {
        const auto f = project(patches[j]);
        out.insert(out.end(), f.begin(), f.end());
      }
      break;
    case TeacherKind::Mixing: {
      const auto rows = static_cast<long>(grid_.rows());
      const auto cols = static_cast<long>(grid_.cols());
      for (long r = 0; r < rows; ++r) {
        for (long c = 0; c < cols; ++c) {
          std::vector<double> mixed(pd, 0.0);
          double count = 0.0;
          for (long dr = -1; dr <= 1; ++dr) {
            for (long dc = -1; dc <= 1; ++dc) {
              const long rr = r + dr, cc = c + dc;
              if (rr < 0 || rr >= rows || cc < 0 || cc >= cols) continue;
              const auto& p = patches[static_cast<std::size_t>(rr * cols + cc)];
              for (std::size_t k = 0; k < pd; ++k) mixed[k] += p[k];
              count += 1.0;
            }
          }
          // Averaging shrinks the spread; rescale so the projection sees comparable magnitudes.
          const double scale = std::sqrt(count) / count;
          for (auto& v : mixed) v *= scale;
          const auto f = project(mixed);
          out.insert(out.end(), f.begin(), f.end());
        }
      }
      break;
    }
    case TeacherKind::Global: {
      std::vector<double> mean_patch(pd, 0.0);
      for (const auto& p : patches)
        for (std::size_t k = 0; k < pd; ++k) mean_patch[k] += p[k] / static_cast<double>(t);
      std::vector<double> modulation(dim_);
      for (std::size_t d = 0; d < dim_; ++d) {
        double acc = 0.0;
        const double* u = global_.data() + d * pd;
        for (std::size_t k = 0; k < pd; ++k) acc += u[k] * mean_patch[k];
        modulation[d] = 1.0 + kGlobalDepth * std::tanh(acc);
      }
      for (std::size_t j = 0; j < t; ++j) {
        auto f = project(patches[j]);
        for (std::size_t d = 0; d < dim_; ++d) f[d] *= modulation[d];
        out.insert(out.end(), f.begin(), f.end());
      }
      break;
    }
  }
  return Tensor({t, dim_}, std::move(out));
}

TeacherBank TeacherBank::make(const PatchGrid& grid, const std::vector<TeacherKind>& kinds,
                              const std::vector<std::size_t>& dims, std::uint64_t seed) {
  if (kinds.size() != dims.size()) throw ContractError("teacher kinds and dims differ in length");
  std::vector<SyntheticTeacher> teachers;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    teachers.emplace_back(kinds[i], dims[i], grid, derive_seed(seed, "teacher" + std::to_string(i)));
  }
  return TeacherBank(std::move(teachers));
}

std::vector<std::size_t> TeacherBank::dims() const {
  std::vector<std::size_t> d;
  for (const auto& t : teachers_) d.push_back(t.dim());
  return d;
}

Image make_scene_image(const PatchGrid& grid, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Image img(grid.height, grid.width, grid.channels);
  std::vector<double> base(grid.channels), gx(grid.channels), gy(grid.channels);
  for (std::size_t c = 0; c < grid.channels; ++c) {
    base[c] = 0.2 + 0.6 * unit(rng);
    gx[c] = 0.6 * (unit(rng) - 0.5);
    gy[c] = 0.6 * (unit(rng) - 0.5);
  }
  const double h = static_cast<double>(grid.height), w = static_cast<double>(grid.width);
  for (std::size_t y = 0; y < grid.height; ++y)
    for (std::size_t x = 0; x < grid.width; ++x)
      for (std::size_t c = 0; c < grid.channels; ++c)
        img.at(y, x, c) = base[c] + gx[c] * (static_cast<double>(x) / w - 0.5) + gy[c] * (static_cast<double>(y) / h - 0.5);

  const int blobs = 3;
  for (int b = 0; b < blobs; ++b) {
    const double cy = unit(rng) * h, cx = unit(rng) * w;
    const double radius = 2.0 + 6.0 * unit(rng);
    std::vector<double> colour(grid.channels);
    for (auto& v : colour) v = 1.2 * (unit(rng) - 0.5);
    for (std::size_t y = 0; y < grid.height; ++y) {
      for (std::size_t x = 0; x < grid.width; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double a = std::exp(-(dx * dx + dy * dy) / (2.0 * radius * radius));
        for (std::size_t c = 0; c < grid.channels; ++c) img.at(y, x, c) += a * colour[c];
      }
    }
  }
  std::normal_distribution<double> noise(0.0, 0.02);
  for (auto& v : img.pixels) v += noise(rng);
  return img;
}

void save_features(const std::filesystem::path& path, const Tensor& features) {
  if (features.rank() != 2) throw DimensionError("features must be [T x D], got " + shape_string(features.shape()));
  ByteWriter w;
  w.text(kFeatureMagic);
  w.u32(static_cast<std::uint32_t>(features.dim(0)));
  w.u32(static_cast<std::uint32_t>(features.dim(1)));
  w.f64s(features.data());
  write_file_atomic(path, w.buffer());
}

Tensor load_features(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes);
  if (r.text(kFeatureMagic.size(), "feature header") != kFeatureMagic) {
    throw FormatError("bad feature file magic", 0);
  }
  const std::uint32_t t = r.u32("feature header");
  const std::uint32_t d = r.u32("feature header");
  const std::size_t expected = static_cast<std::size_t>(t) * d * sizeof(double);
  if (r.remaining() != expected) {
    throw FormatError("header declares " + std::to_string(t) + "x" + std::to_string(d) + " features (" +
                          std::to_string(expected) + " bytes) but the payload holds " + std::to_string(r.remaining()),
                      r.offset());
  }
  return Tensor({t, d}, r.f64s(static_cast<std::size_t>(t) * d, "feature payload"));
}

}  // namespace ver
