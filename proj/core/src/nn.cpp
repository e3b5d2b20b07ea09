// SPDX-License-Identifier: Apache-2.0
#include "ver/nn.hpp"

#include <cmath>
#include <cstring>

#include "ver/error.hpp"

namespace ver {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = kFnvOffset;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= kFnvPrime;
  }
  return splitmix64(splitmix64(seed) ^ h);
}

std::mt19937_64 make_stream(std::uint64_t seed, std::string_view name) {
  return std::mt19937_64(derive_seed(seed, name));
}

Linear::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, double stddev)
    : weight(Tensor::randn({in, out}, rng, stddev)), bias(Tensor::zeros({out})) {
  weight.set_requires_grad(true);
  bias.set_requires_grad(true);
}

Tensor Linear::operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

void Linear::visit_parameters(const std::string& prefix, const ParamVisitor& fn) {
  fn(join_name(prefix, "weight"), weight);
  fn(join_name(prefix, "bias"), bias);
}

LayerNorm::LayerNorm(std::size_t width) : gain(Tensor::full({width}, 1.0)), bias(Tensor::zeros({width})) {
  gain.set_requires_grad(true);
  bias.set_requires_grad(true);
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }

void LayerNorm::visit_parameters(const std::string& prefix, const ParamVisitor& fn) {
  fn(join_name(prefix, "gain"), gain);
  fn(join_name(prefix, "bias"), bias);
}

std::uint64_t checksum(const std::vector<Tensor>& tensors) {
  std::uint64_t h = kFnvOffset;
  for (const auto& t : tensors) {
    for (double v : t.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char b : bytes) {
        h ^= b;
        h *= kFnvPrime;
      }
    }
  }
  return h;
}

Adam::Adam(std::vector<Tensor> params) : Adam(std::move(params), Options{}) {}

Adam::Adam(std::vector<Tensor> params, Options options) : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    if (!p.requires_grad()) throw ContractError("Adam given a frozen parameter");
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
  steps_.assign(params_.size(), 0);
}

void Adam::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    const auto t = static_cast<double>(++steps_[i]);
    const double c1 = 1.0 - std::pow(options_.beta1, t);
    const double c2 = 1.0 - std::pow(options_.beta2, t);
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g[j];
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + options_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace ver
