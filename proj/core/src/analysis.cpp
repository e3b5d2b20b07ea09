// SPDX-License-Identifier: Apache-2.0
#include "ver/analysis.hpp"

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <fmt/format.h>

#include "ver/error.hpp"

namespace ver {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Index ei(std::size_t v) { return static_cast<Eigen::Index>(v); }

Eigen::Map<const RowMatrix> as_matrix(const Tensor& t) {
  return Eigen::Map<const RowMatrix>(t.data().data(), ei(t.dim(0)), ei(t.dim(1)));
}

double digamma(double v) { return boost::math::digamma(v); }

std::vector<double> jittered(const Tensor& x, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> v(x.data().begin(), x.data().end());
  for (auto& e : v) e += kTieJitter * unit(rng);
  return v;
}

double max_dist(const double* a, const double* b, std::size_t d) {
  double m = 0.0;
  for (std::size_t c = 0; c < d; ++c) m = std::max(m, std::abs(a[c] - b[c]));
  return m;
}

// Distance from each point to its k-th nearest other point (max-norm). Rows of
// `parts` are concatenated feature blocks so that joint spaces need no copy.
std::vector<double> kth_neighbour(const std::vector<std::pair<const double*, std::size_t>>& parts, std::size_t n,
                                  std::size_t k) {
  std::vector<double> out(n);
  std::vector<double> best;
  for (std::size_t i = 0; i < n; ++i) {
    best.assign(k, std::numeric_limits<double>::infinity());
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double d = 0.0;
      for (const auto& [data, dim] : parts) d = std::max(d, max_dist(data + i * dim, data + j * dim, dim));
      if (d < best.back()) {
        auto pos = std::upper_bound(best.begin(), best.end(), d);
        best.insert(pos, d);
        best.pop_back();
      }
    }
    out[i] = best.back();
  }
  return out;
}

// Mean of psi(number of points within a strictly smaller radius, self included).
double average_digamma(const double* data, std::size_t dim, std::size_t n, const std::vector<double>& radius) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = radius[i] - 1e-15;
    std::size_t count = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (max_dist(data + i * dim, data + j * dim, dim) < r) ++count;
    acc += digamma(static_cast<double>(std::max<std::size_t>(count, 1)));
  }
  return acc / static_cast<double>(n);
}

void require_samples(const Tensor& x, std::size_t k, const char* what) {
  if (x.rank() != 2) throw DimensionError(std::string(what) + " expects [n x d], got " + shape_string(x.shape()));
  if (k == 0) throw ContractError(std::string(what) + ": k must be positive");
  if (x.dim(0) < 2 * k || x.dim(0) <= k) {
    throw ContractError(std::string(what) + ": " + std::to_string(x.dim(0)) + " samples is fewer than 2k = " +
                        std::to_string(2 * k));
  }
}

}  // namespace

PcaProjector pca_fit(const Tensor& samples, std::size_t k) {
  if (samples.rank() != 2) throw DimensionError("pca_fit expects [n x d], got " + shape_string(samples.shape()));
  const std::size_t n = samples.dim(0), d = samples.dim(1);
  if (k == 0 || k > d) throw ContractError("pca_fit: k=" + std::to_string(k) + " outside [1, " + std::to_string(d) + "]");
  if (n <= k) throw ContractError("pca_fit: need more than k samples");
  const auto x = as_matrix(samples);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const RowMatrix centred = x.rowwise() - mu;
  const Eigen::MatrixXd cov = (centred.transpose() * centred) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("covariance eigendecomposition failed");

  PcaProjector p;
  p.mean.assign(mu.data(), mu.data() + d);
  std::vector<double> comps(k * d);
  for (std::size_t r = 0; r < k; ++r) {
    const Eigen::Index col = ei(d - 1 - r);  // eigenvalues come out ascending
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index pivot = 0;
    v.cwiseAbs().maxCoeff(&pivot);
    if (v(pivot) < 0.0) v = -v;
    for (std::size_t c = 0; c < d; ++c) comps[r * d + c] = v(ei(c));
    p.variances.push_back(std::max(eig.eigenvalues()(col), 0.0));
  }
  p.components = Tensor({k, d}, std::move(comps));
  return p;
}

Tensor pca_apply(const PcaProjector& projector, const Tensor& samples) {
  if (samples.rank() != 2 || samples.dim(1) != projector.input_dim()) {
    throw DimensionError("pca_apply: samples " + shape_string(samples.shape()) + " for a projector of input dim " +
                         std::to_string(projector.input_dim()));
  }
  const auto x = as_matrix(samples);
  const Eigen::Map<const Eigen::RowVectorXd> mu(projector.mean.data(), ei(projector.input_dim()));
  const RowMatrix out = (x.rowwise() - mu) * as_matrix(projector.components).transpose();
  return Tensor({samples.dim(0), projector.output_dim()}, std::vector<double>(out.data(), out.data() + out.size()));
}

MiEstimate knn_mutual_information(const Tensor& x, const Tensor& y, std::size_t k, std::uint64_t jitter_seed) {
  require_samples(x, k, "knn_mutual_information");
  if (y.rank() != 2 || y.dim(0) != x.dim(0)) {
    throw DimensionError("knn_mutual_information: x " + shape_string(x.shape()) + " and y " + shape_string(y.shape()) +
                         " differ in sample count");
  }
  const std::size_t n = x.dim(0), dx = x.dim(1), dy = y.dim(1);
  std::mt19937_64 rng(jitter_seed);
  const auto xs = jittered(x, rng);
  const auto ys = jittered(y, rng);
  const auto radius = kth_neighbour({{xs.data(), dx}, {ys.data(), dy}}, n, k);
  const double a = average_digamma(xs.data(), dx, n, radius);
  const double b = average_digamma(ys.data(), dy, n, radius);
  return {digamma(static_cast<double>(k)) + digamma(static_cast<double>(n)) - a - b, n, k};
}

double knn_entropy(const Tensor& x, std::size_t k, std::uint64_t jitter_seed) {
  require_samples(x, k, "knn_entropy");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::mt19937_64 rng(jitter_seed);
  const auto xs = jittered(x, rng);
  const auto radius = kth_neighbour({{xs.data(), d}}, n, k);
  double log_sum = 0.0;
  for (double r : radius) log_sum += std::log(r);
  const double dd = static_cast<double>(d);
  return digamma(static_cast<double>(n)) - digamma(static_cast<double>(k)) + dd * std::log(2.0) +
         dd * log_sum / static_cast<double>(n);
}

Tensor feature_norm_map(const Tensor& tokens, const PatchGrid& grid) {
  if (tokens.rank() != 2 || tokens.dim(0) != grid.tokens()) {
    throw ContractError("feature_norm_map: " + shape_string(tokens.shape()) + " tokens for a " +
                        std::to_string(grid.rows()) + "x" + std::to_string(grid.cols()) + " grid");
  }
  std::vector<double> norms(grid.tokens());
  for (std::size_t t = 0; t < norms.size(); ++t) {
    double s = 0.0;
    for (std::size_t c = 0; c < tokens.dim(1); ++c) s += tokens.at(t, c) * tokens.at(t, c);
    norms[t] = std::sqrt(s);
  }
  return Tensor({grid.rows(), grid.cols()}, std::move(norms));
}

UtilizationTable expert_utilization(std::span<const std::vector<LayerTrace>> logs, std::size_t teachers) {
  if (logs.empty() || logs.front().empty()) throw ContractError("expert_utilization needs a non-empty log");
  const std::size_t layers = logs.front().size();
  const std::size_t experts = logs.front().front().probs.dim(1);
  UtilizationTable table;
  table.per_layer.assign(layers, std::vector<double>(experts, 0.0));
  table.per_layer_teacher.assign(layers, std::vector<std::vector<double>>(teachers, std::vector<double>(experts, 0.0)));
  for (const auto& log : logs) {
    if (log.size() != layers) throw ContractError("selection logs disagree on the layer count");
    for (std::size_t n = 0; n < layers; ++n) {
      const auto& trace = log[n];
      const std::size_t frames = trace.teacher_choice.size();
      const std::size_t per_frame = frames ? trace.selected.size() / frames : 0;
      for (std::size_t r = 0; r < trace.selected.size(); ++r) {
        for (std::size_t l : trace.selected[r]) {
          if (l >= experts) throw IndexError("expert index " + std::to_string(l) + " out of range");
          table.per_layer[n][l] += 1.0;
          if (frames) table.per_layer_teacher[n].at(trace.teacher_choice[r / per_frame])[l] += 1.0;
        }
      }
    }
  }
  auto normalise = [](std::vector<double>& row) {
    double total = 0.0;
    for (double v : row) total += v;
    if (total > 0.0)
      for (auto& v : row) v /= total;
  };
  for (auto& row : table.per_layer) normalise(row);
  for (auto& layer : table.per_layer_teacher)
    for (auto& row : layer) normalise(row);
  return table;
}

Tensor per_patch_mi_before_after(const VerModel& model, const SyntheticTask& task, const RoutingStrategy& strategy,
                                 std::size_t dataset_size, double fraction, std::uint64_t seed, std::size_t k,
                                 std::size_t pca_dims) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractError("dataset fraction must lie in (0, 1]");
  const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(dataset_size)));
  if (n < 2 * k || n <= pca_dims) {
    throw ContractError("per_patch_mi_before_after: " + std::to_string(n) + " samples are too few for k=" +
                        std::to_string(k) + " and " + std::to_string(pca_dims) + " PCA dims");
  }
  const std::size_t tokens = model.config().tokens();
  const std::size_t width = model.config().width;
  std::vector<std::vector<double>> before(tokens), after(tokens);
  auto data = make_stream(seed, "analysis");
  const ForwardContext ctx = settled_context(strategy);
  constexpr std::size_t kBatch = 16;
  for (std::size_t done = 0; done < n;) {
    const std::size_t b = std::min(kBatch, n - done);
    std::vector<Image> images;
    for (std::size_t i = 0; i < b; ++i) images.push_back(task.sample(data).image);
    const Tensor z = model.forward_bvt(images);
    const Tensor y = model.forward_vel(z, b, strategy, ctx).tokens;
    for (std::size_t f = 0; f < b; ++f) {
      for (std::size_t t = 0; t < tokens; ++t) {
        const std::size_t row = f * tokens + t;
        for (std::size_t c = 0; c < width; ++c) {
          before[t].push_back(z.at(row, c));
          after[t].push_back(y.at(row, c));
        }
      }
    }
    done += b;
  }
  std::vector<double> map(tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    const Tensor zb({n, width}, std::move(before[t]));
    const Tensor ya({n, width}, std::move(after[t]));
    const Tensor zp = pca_apply(pca_fit(zb, pca_dims), zb);
    const Tensor yp = pca_apply(pca_fit(ya, pca_dims), ya);
    map[t] = knn_mutual_information(zp, yp, k, derive_seed(seed, "jitter")).value;
  }
  return Tensor({task.grid().rows(), task.grid().cols()}, std::move(map));
}

std::string to_pgm(const Tensor& map) {
  if (map.rank() != 2) throw DimensionError("to_pgm expects a 2-D map, got " + shape_string(map.shape()));
  const auto v = map.data();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double span = *hi - *lo;
  std::string out = fmt::format("P2\n{} {}\n255\n", map.dim(1), map.dim(0));
  for (std::size_t r = 0; r < map.dim(0); ++r) {
    for (std::size_t c = 0; c < map.dim(1); ++c) {
      const double scaled = span > 0.0 ? (map.at(r, c) - *lo) / span * 255.0 : 0.0;
      out += fmt::format("{}{}", c ? " " : "", static_cast<int>(std::lround(scaled)));
    }
    out += '\n';
  }
  return out;
}

std::string to_csv(const Tensor& map) {
  if (map.rank() != 2) throw DimensionError("to_csv expects a 2-D map, got " + shape_string(map.shape()));
  std::string out;
  for (std::size_t r = 0; r < map.dim(0); ++r) {
    for (std::size_t c = 0; c < map.dim(1); ++c) out += fmt::format("{}{}", c ? "," : "", map.at(r, c));
    out += '\n';
  }
  return out;
}

}  // namespace ver
