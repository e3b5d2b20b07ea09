// SPDX-License-Identifier: Apache-2.0
#include "ver/image.hpp"

#include <string>

#include "ver/error.hpp"

namespace ver {

void PatchGrid::validate() const {
  if (patch == 0 || height == 0 || width == 0 || channels == 0 || height % patch != 0 || width % patch != 0) {
    throw DimensionError("image " + std::to_string(height) + "x" + std::to_string(width) + " is not tiled by " +
                         std::to_string(patch) + "-pixel patches");
  }
}

void PatchGrid::check(const Image& image) const {
  validate();
  if (image.height != height || image.width != width || image.channels != channels ||
      image.pixels.size() != height * width * channels) {
    throw DimensionError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) + "x" +
                         std::to_string(image.channels) + " does not match the expected " + std::to_string(height) +
                         "x" + std::to_string(width) + "x" + std::to_string(channels));
  }
}

std::vector<double> patch_vector(const Image& image, const PatchGrid& grid, std::size_t token) {
  if (token >= grid.tokens()) throw IndexError("patch index " + std::to_string(token) + " out of range");
  const std::size_t py = (token / grid.cols()) * grid.patch;
  const std::size_t px = (token % grid.cols()) * grid.patch;
  std::vector<double> v;
  v.reserve(grid.patch_dim());
  for (std::size_t y = 0; y < grid.patch; ++y)
    for (std::size_t x = 0; x < grid.patch; ++x)
      for (std::size_t c = 0; c < grid.channels; ++c) v.push_back(image.at(py + y, px + x, c));
  return v;
}

void set_patch(Image& image, const PatchGrid& grid, std::size_t token, std::span<const double> values) {
  if (token >= grid.tokens()) throw IndexError("patch index " + std::to_string(token) + " out of range");
  if (values.size() != grid.patch_dim()) throw DimensionError("patch value count mismatch");
  const std::size_t py = (token / grid.cols()) * grid.patch;
  const std::size_t px = (token % grid.cols()) * grid.patch;
  std::size_t i = 0;
  for (std::size_t y = 0; y < grid.patch; ++y)
    for (std::size_t x = 0; x < grid.patch; ++x)
      for (std::size_t c = 0; c < grid.channels; ++c) image.at(py + y, px + x, c) = values[i++];
}

Tensor patchify(std::span<const Image> images, const PatchGrid& grid) {
  const std::size_t t = grid.tokens();
  const std::size_t d = grid.patch_dim();
  std::vector<double> v;
  v.reserve(images.size() * t * d);
  for (const auto& img : images) {
    grid.check(img);
    for (std::size_t j = 0; j < t; ++j) {
      const auto p = patch_vector(img, grid, j);
      v.insert(v.end(), p.begin(), p.end());
    }
  }
  return Tensor({images.size() * t, d}, std::move(v));
}

}  // namespace ver
