// SPDX-License-Identifier: Apache-2.0
//
// Small building blocks shared by every network in the library: seeded random
// substreams, affine maps, layer norm parameters, parameter traversal and Adam.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "ver/tensor.hpp"

namespace ver {

/// Seed of the named substream `name` of a run seeded with `seed`.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name);
std::mt19937_64 make_stream(std::uint64_t seed, std::string_view name);

using ParamVisitor = std::function<void(const std::string& name, Tensor& param)>;

inline std::string join_name(const std::string& prefix, std::string_view leaf) {
  return prefix.empty() ? std::string(leaf) : prefix + "." + std::string(leaf);
}

/// y = x W + b with W stored [in x out].
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, double stddev);

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x) const;
  void visit_parameters(const std::string& prefix, const ParamVisitor& fn);
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);

  Tensor operator()(const Tensor& x) const;
  void visit_parameters(const std::string& prefix, const ParamVisitor& fn);
};

/// Marks every parameter reached by `visit` as frozen or trainable.
template <class Visitable>
void set_trainable(Visitable& module, bool trainable) {
  module.visit_parameters("", [trainable](const std::string&, Tensor& p) { p.set_requires_grad(trainable); });
}

template <class Visitable>
std::size_t count_parameters(Visitable& module) {
  std::size_t n = 0;
  module.visit_parameters("", [&n](const std::string&, Tensor& p) { n += p.numel(); });
  return n;
}

/// FNV-1a over the raw bytes of the given tensors, in order.
std::uint64_t checksum(const std::vector<Tensor>& tensors);

class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  explicit Adam(std::vector<Tensor> params);
  Adam(std::vector<Tensor> params, Options options);

  /// Parameters without an accumulated gradient this step are left untouched.
  void step(double lr);
  void zero_grad();

  const std::vector<Tensor>& parameters() const { return params_; }

 private:
  std::vector<Tensor> params_;
  Options options_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::vector<std::uint64_t> steps_;
};

}  // namespace ver
