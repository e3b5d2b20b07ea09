// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ver/tensor.hpp"

namespace ver {

/// Row-major HWC image with real-valued pixels.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c) : height(h), width(w), channels(c), pixels(h * w * c, 0.0) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

/// Square patch tiling of a fixed image geometry. Tokens are numbered row-major.
struct PatchGrid {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 3;
  std::size_t patch = 8;

  std::size_t rows() const { return height / patch; }
  std::size_t cols() const { return width / patch; }
  std::size_t tokens() const { return rows() * cols(); }
  std::size_t patch_dim() const { return patch * patch * channels; }

  /// Throws DimensionError unless the extents tile exactly and `image` matches them.
  void check(const Image& image) const;
  void validate() const;
};

/// Pixels of one patch, flattened (row, column, channel).
std::vector<double> patch_vector(const Image& image, const PatchGrid& grid, std::size_t token);
/// Writes `values` back into the pixels of one patch.
void set_patch(Image& image, const PatchGrid& grid, std::size_t token, std::span<const double> values);

/// Patch vectors of every image stacked into [F*T x patch_dim].
Tensor patchify(std::span<const Image> images, const PatchGrid& grid);

}  // namespace ver
