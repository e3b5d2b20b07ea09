// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "ver/error.hpp"
#include "ver/tensor.hpp"

using namespace ver;

TEST_CASE("every primitive matches central differences on ten seeds") {
  for (const auto& c : testing::primitive_cases()) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(seed);
      const double err = testing::max_relative_error(c, rng);
      INFO(c.name << " seed " << seed << " rel err " << err);
      CHECK(err < 1e-6);
    }
  }
}

TEST_CASE("gradient of sum(a*b) with respect to a is b") {
  std::mt19937_64 rng(3);
  Tensor a = Tensor::randn({4, 3}, rng).set_requires_grad(true);
  const Tensor b = Tensor::randn({4, 3}, rng);
  Tape tape;
  TapeScope scope(tape);
  tape.backward(sum(mul(a, b)));
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.grad()[i] == doctest::Approx(b[i]).epsilon(1e-15));
}

TEST_CASE("matmul agrees with a triple loop") {
  std::mt19937_64 rng(4);
  const Tensor a = Tensor::randn({5, 7}, rng), b = Tensor::randn({7, 3}, rng);
  const Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{5, 3});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 7; ++k) acc += a.at(i, k) * b.at(k, j);
      CHECK(c.at(i, j) == doctest::Approx(acc).epsilon(1e-13));
    }
  const Tensor at = transpose(a);
  const Tensor again = transpose(matmul(transpose(b), at));
  for (std::size_t i = 0; i < c.numel(); ++i) CHECK(again[i] == doctest::Approx(c[i]).epsilon(1e-13));
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  const Tensor x = Tensor::matrix({{1000.0, 1001.0, 999.0}, {-5.0, 0.0, 5.0}});
  const Tensor p = softmax(x, -1);
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(std::isfinite(p.at(r, c)));
      s += p.at(r, c);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  }
  CHECK(p.at(0, 1) > p.at(0, 0));
}

TEST_CASE("broadcasting follows trailing-suffix rules") {
  const Tensor a = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  const Tensor row = Tensor::vec({10, 20, 30});
  const Tensor s = add(a, row);
  CHECK(s.at(1, 2) == 36.0);
  CHECK((a * 2.0).at(1, 0) == 8.0);
  CHECK_THROWS_AS(add(a, Tensor::vec({1, 2})), DimensionError);
}

TEST_CASE("gather and scatter are adjoint") {
  std::mt19937_64 rng(5);
  const Tensor x = Tensor::randn({4, 3}, rng), y = Tensor::randn({6, 3}, rng);
  const std::size_t idx[] = {1, 3, 1, 0, 2, 3};
  // <gather(x), y> == <x, scatter(y)>
  const double lhs = sum(mul(gather_rows(x, idx), y)).item();
  const double rhs = sum(mul(x, scatter_add_rows(y, idx, 4))).item();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-13));
  const std::size_t bad[] = {4};
  CHECK_THROWS_AS(gather_rows(x, bad), IndexError);
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
  std::mt19937_64 rng(6);
  const Tensor x = Tensor::randn({3, 16}, rng, 4.0);
  const Tensor y = layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}), 0.0);
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 16; ++c) m += y.at(r, c) / 16.0;
    for (std::size_t c = 0; c < 16; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m) / 16.0;
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-10));
  }
}

TEST_CASE("dropout is identity in eval mode and preserves the mean in train mode") {
  std::mt19937_64 rng(7);
  const Tensor x = Tensor::full({200, 50}, 1.0);
  const Tensor eval = dropout(x, 0.4, rng, false);
  CHECK(sum(eval).item() == 10000.0);
  const Tensor train = dropout(x, 0.4, rng, true);
  CHECK(mean(train).item() == doctest::Approx(1.0).epsilon(0.03));
  CHECK_THROWS_AS(dropout(x, 1.0, rng, true), ContractError);
}

TEST_CASE("straight-through forwards the hard value and routes gradient into the soft one") {
  Tensor logits = Tensor::vec({0.1, 0.5, -0.3}).set_requires_grad(true);
  const Tensor w = Tensor::vec({2.0, -1.0, 0.5});
  Tape tape;
  TapeScope scope(tape);
  const Tensor soft = softmax(logits, -1);
  const Tensor st = straight_through(soft, Tensor::vec({0, 1, 0}));
  CHECK(st[0] == 0.0);
  CHECK(st[1] == 1.0);
  tape.backward(sum(mul(st, w)));
  std::vector<double> via_st(logits.grad().begin(), logits.grad().end());

  Tensor l2 = Tensor::vec({0.1, 0.5, -0.3}).set_requires_grad(true);
  Tape tape2;
  TapeScope scope2(tape2);
  tape2.backward(sum(mul(softmax(l2, -1), w)));
  for (std::size_t i = 0; i < 3; ++i) CHECK(via_st[i] == doctest::Approx(l2.grad()[i]).epsilon(1e-14));
}

TEST_CASE("tape misuse is reported") {
  Tensor a = Tensor::vec({1.0, 2.0}).set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor loss = sum(mul(a, a));
  CHECK_THROWS_AS(tape.backward(mul(a, a)), ContractError);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), ContractError);
  tape.clear();
  CHECK_THROWS_AS(tape.backward(loss), ContractError);
}

TEST_CASE("gradients accumulate across uses of a leaf") {
  Tensor a = Tensor::vec({1.5, -2.0}).set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  tape.backward(sum(add(mul(a, a), a)));  // d/da = 2a + 1
  CHECK(a.grad()[0] == doctest::Approx(4.0));
  CHECK(a.grad()[1] == doctest::Approx(-3.0));
}

TEST_CASE("no tape means no recording") {
  Tensor a = Tensor::vec({1.0, 2.0}).set_requires_grad(true);
  const Tensor b = mul(a, a);
  CHECK(active_tape() == nullptr);
  CHECK(b[1] == 4.0);
}

TEST_CASE("numeric domain errors") {
  CHECK_THROWS_AS(log(Tensor::vec({1.0, 0.0})), NumericError);
  CHECK_THROWS_AS(sqrt(Tensor::vec({-1.0})), NumericError);
  CHECK_THROWS_AS(div(Tensor::vec({1.0}), Tensor::vec({0.0})), NumericError);
  CHECK_THROWS_AS(softmax(Tensor::vec({NAN, 1.0}), -1), NumericError);
}

TEST_CASE("shape errors") {
  const Tensor a = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
  CHECK_THROWS_AS(reshape(a, {4, 2}), DimensionError);
  CHECK_THROWS_AS(slice_rows(a, 1, 3), IndexError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), DimensionError);
  CHECK_THROWS_AS(a.item(), DimensionError);
}
