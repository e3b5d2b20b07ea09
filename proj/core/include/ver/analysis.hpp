// SPDX-License-Identifier: Apache-2.0
//
// Feature analysis: PCA, k-nearest-neighbour entropy and mutual information
// (Kraskov estimator with max-norm neighbourhoods), per-patch feature norms
// and expert utilisation tables.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ver/backbone.hpp"
#include "ver/image.hpp"
#include "ver/task.hpp"
#include "ver/tensor.hpp"

namespace ver {

struct PcaProjector {
  std::vector<double> mean;        // [d]
  Tensor components;               // [k x d], orthonormal rows
  std::vector<double> variances;   // [k], non-increasing

  std::size_t input_dim() const { return mean.size(); }
  std::size_t output_dim() const { return variances.size(); }
};

/// Top-k eigenvectors of the sample covariance of `samples` [n x d].
PcaProjector pca_fit(const Tensor& samples, std::size_t k = 5);
/// Centres and projects: [n x d] -> [n x k].
Tensor pca_apply(const PcaProjector& projector, const Tensor& samples);

struct MiEstimate {
  double value = 0.0;  // nats
  std::size_t samples = 0;
  std::size_t k = 0;
};

inline constexpr double kTieJitter = 1e-10;

/// psi(k) + psi(n) - <psi(n_x + 1) + psi(n_y + 1)>, where n_x and n_y count
/// marginal points strictly inside the max-norm distance to the k-th joint
/// neighbour. Inputs get a deterministic jitter of 1e-10 * U(0, 1).
MiEstimate knn_mutual_information(const Tensor& x, const Tensor& y, std::size_t k = 3, std::uint64_t jitter_seed = 0);

/// Kozachenko-Leonenko differential entropy in nats with max-norm balls.
double knn_entropy(const Tensor& x, std::size_t k = 3, std::uint64_t jitter_seed = 0);

/// L2 norm of each token, laid out on the patch grid: [rows x cols].
Tensor feature_norm_map(const Tensor& tokens, const PatchGrid& grid);

struct UtilizationTable {
  std::vector<std::vector<double>> per_layer;                      // [layer][expert]
  std::vector<std::vector<std::vector<double>>> per_layer_teacher;  // [layer][teacher][expert]
};

/// Hard-selection frequencies pooled over every logged forward pass. The
/// per-teacher table groups tokens by their frame's chosen teacher and is
/// filled only when the traces carry teacher choices. Rows with no events stay zero.
UtilizationTable expert_utilization(std::span<const std::vector<LayerTrace>> logs, std::size_t teachers);

/// MI between each patch position's features before and after the expert
/// library, over round(fraction * dataset_size) task samples drawn from
/// `seed`; both sides are reduced to `pca_dims` dimensions first.
Tensor per_patch_mi_before_after(const VerModel& model, const SyntheticTask& task, const RoutingStrategy& strategy,
                                 std::size_t dataset_size, double fraction, std::uint64_t seed, std::size_t k = 3,
                                 std::size_t pca_dims = 5);

/// Plain-text graymap (P2) with values min-max scaled to 0..255.
std::string to_pgm(const Tensor& map);
/// Unscaled values, one grid row per line.
std::string to_csv(const Tensor& map);

}  // namespace ver
