// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "ver/analysis.hpp"
#include "ver/error.hpp"

using namespace ver;

namespace {

// Cyclic Jacobi rotations on a symmetric matrix; returns eigenpairs sorted by value, descending.
std::vector<std::pair<double, std::vector<double>>> jacobi_eigen(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::pair<double, std::vector<double>>> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> col(n);
    for (std::size_t k = 0; k < n; ++k) col[k] = v[k][i];
    out.emplace_back(a[i][i], col);
  }
  std::sort(out.begin(), out.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
  return out;
}

Tensor correlated_gaussian(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> mix(d * d);
  for (auto& m : mix) m = g(rng);
  std::vector<double> out(n * d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    std::vector<double> z(d);
    for (auto& v : z) v = g(rng);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) out[r * d + i] += mix[i * d + j] * z[j] * (1.0 + static_cast<double>(j));
  }
  return Tensor({n, d}, std::move(out));
}

std::pair<Tensor, Tensor> gaussian_pair(std::size_t n, double rho, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = g(rng);
    y[i] = rho * x[i] + std::sqrt(1.0 - rho * rho) * g(rng);
  }
  return {Tensor({n, 1}, std::move(x)), Tensor({n, 1}, std::move(y))};
}

}  // namespace

TEST_CASE("pca matches a Jacobi eigendecomposition of the sample covariance") {
  std::mt19937_64 rng(5);
  const std::size_t n = 300, d = 7;
  const Tensor x = correlated_gaussian(n, d, rng);
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i) mean[i] += x.at(r, i) / n;
  std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov[i][j] += (x.at(r, i) - mean[i]) * (x.at(r, j) - mean[j]) / (n - 1);
  const auto eig = jacobi_eigen(cov);

  const PcaProjector p = pca_fit(x, 5);
  REQUIRE(p.output_dim() == 5);
  CHECK(p.input_dim() == d);
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(p.variances[k] == doctest::Approx(eig[k].first).epsilon(1e-9));
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += p.components.at(k, i) * eig[k].second[i];
    CHECK(std::abs(dot) == doctest::Approx(1.0).epsilon(1e-9));
  }
  const Tensor proj = pca_apply(p, x);
  CHECK(proj.shape() == Shape{n, 5});
  double var0 = 0.0;
  for (std::size_t r = 0; r < n; ++r) var0 += proj.at(r, 0) * proj.at(r, 0) / (n - 1);
  CHECK(var0 == doctest::Approx(p.variances[0]).epsilon(1e-9));
  CHECK_THROWS_AS(pca_fit(x, 8), ContractError);
  CHECK_THROWS_AS(pca_apply(p, Tensor::zeros({3, 4})), DimensionError);
}

TEST_CASE("ksg recovers the mutual information of correlated Gaussians") {
  std::mt19937_64 rng(11);
  for (double rho : {0.0, 0.5, 0.9}) {
    const auto [x, y] = gaussian_pair(2000, rho, rng);
    const double truth = -0.5 * std::log(1.0 - rho * rho);
    const MiEstimate est = knn_mutual_information(x, y, 3);
    CHECK(est.samples == 2000);
    CHECK(est.k == 3);
    CHECK(std::abs(est.value - truth) < 0.06);
  }
}

TEST_CASE("ksg handles ties and rejects bad inputs") {
  std::vector<double> v(200);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i % 4);
  const Tensor x({200, 1}, v);
  const MiEstimate est = knn_mutual_information(x, x, 3);
  CHECK(std::isfinite(est.value));
  CHECK(est.value > 1.0);
  CHECK(knn_mutual_information(x, x, 3, 1).value == knn_mutual_information(x, x, 3, 1).value);
  CHECK_THROWS_AS(knn_mutual_information(x, Tensor::zeros({199, 1}), 3), DimensionError);
  CHECK_THROWS_AS(knn_mutual_information(Tensor::zeros({3, 1}), Tensor::zeros({3, 1}), 3), ContractError);
}

TEST_CASE("kl entropy of a standard normal") {
  std::mt19937_64 rng(13);
  const auto [x, y] = gaussian_pair(4000, 0.0, rng);
  CHECK(std::abs(knn_entropy(x, 3) - 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e)) < 0.05);
  std::vector<double> wide(x.data().begin(), x.data().end());
  for (auto& w : wide) w *= 3.0;
  CHECK(std::abs(knn_entropy(Tensor({4000, 1}, wide), 3) - knn_entropy(x, 3) - std::log(3.0)) < 1e-6);
}

TEST_CASE("feature norm map") {
  const PatchGrid grid{4, 8, 1, 4};
  const Tensor tokens({2, 2}, {3, 4, 0, 1});
  const Tensor map = feature_norm_map(tokens, grid);
  CHECK(map.shape() == Shape{1, 2});
  CHECK(map.at(0, 0) == 5.0);
  CHECK(map.at(0, 1) == 1.0);
  CHECK_THROWS_AS(feature_norm_map(Tensor::zeros({3, 2}), grid), ContractError);
}

TEST_CASE("pgm and csv renderings") {
  const Tensor map({2, 2}, {1.0, 2.0, 3.0, 5.0});
  CHECK(to_pgm(map) == "P2\n2 2\n255\n0 64\n128 255\n");
  CHECK(to_csv(map) == "1,2\n3,5\n");
  CHECK(to_pgm(Tensor::full({1, 2}, 4.0)) == "P2\n2 1\n255\n0 0\n");
}

TEST_CASE("expert utilisation pools hard selections") {
  LayerTrace a, b;
  a.selected = {{0}, {1}, {0}, {2}};
  a.teacher_choice = {1, 0};
  b.selected = {{2}, {2}};
  b.teacher_choice = {1};
  a.probs = Tensor::zeros({4, 3});
  b.probs = Tensor::zeros({2, 3});
  const std::vector<std::vector<LayerTrace>> logs{{a}, {b}};
  const UtilizationTable t = expert_utilization(logs, 2);
  REQUIRE(t.per_layer.size() == 1);
  CHECK(t.per_layer[0] == std::vector<double>{2.0 / 6, 1.0 / 6, 3.0 / 6});
  CHECK(t.per_layer_teacher[0][0] == std::vector<double>{0.5, 0.0, 0.5});
  CHECK(t.per_layer_teacher[0][1] == std::vector<double>{0.25, 0.25, 0.5});
}
