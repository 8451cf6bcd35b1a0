// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "../support/gradcheck_suite.hpp"
#include "../support/oracles.hpp"
#include "tips/checkpoint.hpp"
#include "tips/error.hpp"
#include "tips/tensor.hpp"

using namespace tips;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

void require_values(const Tensor& t, std::initializer_list<double> expected, double tol) {
  REQUIRE(t.numel() == expected.size());
  std::size_t i = 0;
  for (double e : expected) {
    CHECK(std::abs(t.data()[i] - e) <= tol);
    ++i;
  }
}
}  // namespace

TEST_CASE("matmul examples") {
  Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
  CHECK(matmul(id, b).data()[0] == 3);
  CHECK(bitwise_equal(matmul(id, b), b));
  Tensor row = Tensor::from({1, 2}, {1, 2}, true);
  Tensor col = Tensor::from({2, 1}, {3, 4});
  Tensor c = matmul(row, col);
  CHECK(c.shape() == Shape{1, 1});
  CHECK(c.data()[0] == 11);
  backward(sum(c));
  CHECK(row.grad()[0] == doctest::Approx(3));
  CHECK(row.grad()[1] == doctest::Approx(4));
}

TEST_CASE("matmul shape errors name both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax examples and masking") {
  require_values(softmax_lastdim(Tensor::from({2}, {0, 0})), {0.5, 0.5}, 1e-12);
  Tensor s = softmax_lastdim(Tensor::from({2}, {1, 0}));
  CHECK(s.data()[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(s.data()[1] == doctest::Approx(0.2689).epsilon(1e-4));
  Tensor m = softmax_lastdim(Tensor::from({3}, {5, -kInf, 5}));
  CHECK(m.data()[0] == 0.5);
  CHECK(m.data()[1] == 0.0);
  CHECK(m.data()[2] == 0.5);
  CHECK_THROWS_AS(softmax_lastdim(Tensor::from({2, 2}, {0, 1, -kInf, -kInf})), DegenerateRowError);
}

TEST_CASE("softmax slices sum to one and are shift invariant") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = oracle::random_tensor({4, 7}, rng, 3.0, false);
    Tensor shifted = add_scalar(x, 12.5);
    Tensor a = softmax_lastdim(x);
    Tensor b = softmax_lastdim(shifted);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        total += a.data()[r * 7 + c];
        CHECK(std::abs(a.data()[r * 7 + c] - b.data()[r * 7 + c]) <= 1e-10);
      }
      CHECK(std::abs(total - 1.0) <= 1e-10);
    }
  }
}

TEST_CASE("layernorm examples") {
  Tensor ones = Tensor::full({3}, 1.0), zeros = Tensor::zeros({3});
  require_values(layernorm(Tensor::from({3}, {1, 1, 1}), ones, zeros, 1e-5), {0, 0, 0}, 1e-12);
  Tensor y = layernorm(Tensor::from({2}, {0, 2}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-5);
  CHECK(y.data()[0] == doctest::Approx(-1).epsilon(1e-3));
  CHECK(y.data()[1] == doctest::Approx(1).epsilon(1e-3));
}

TEST_CASE("backward examples and accumulation") {
  Tensor p = Tensor::from({3}, {1, 2, 3}, true);
  backward(sum(p));
  for (double g : p.grad()) CHECK(g == 1.0);
  backward(sum(p));
  for (double g : p.grad()) CHECK(g == 2.0);  // accumulates without reset

  Tensor q = Tensor::from({2}, {1, 2}, true);
  backward(sum(mul(q, q)));
  CHECK(q.grad()[0] == doctest::Approx(2));
  CHECK(q.grad()[1] == doctest::Approx(4));

  CHECK_THROWS_AS(backward(mul(q, q)), ShapeError);
}

TEST_CASE("shared subexpressions are visited once per backward") {
  Tensor p = Tensor::from({1}, {3}, true);
  Tensor s = mul(p, p);
  Tensor loss = sum(add(s, s));  // d/dp 2p^2 = 4p
  backward(loss);
  CHECK(p.grad()[0] == doctest::Approx(12));
}

TEST_CASE("GradTape visits every node once in reverse topological order") {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  Tensor b = mul(a, a);
  Tensor c = add(b, a);
  Tensor d = sum(add(c, b));
  GradTape tape(d);
  const auto& order = tape.order();
  CHECK(order.front() == d.impl());
  std::vector<detail::TensorImpl*> seen(order.begin(), order.end());
  std::sort(seen.begin(), seen.end());
  CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
  auto pos = [&](const Tensor& t) {
    return std::find(order.begin(), order.end(), t.impl()) - order.begin();
  };
  CHECK(pos(c) < pos(b));
  CHECK(pos(b) < pos(a));
}

TEST_CASE("no-grad guard skips graph construction") {
  Tensor p = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  Tensor y = mul(p, p);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.is_leaf());
}

TEST_CASE("finite-difference gradients of every op") {
  const auto outcomes = gradcheck::run(gradcheck::op_cases(), 5);
  for (const auto& o : outcomes) {
    INFO(o.name << " seed " << o.seed);
    CHECK(o.worst_rel <= 1e-4);
  }
}

TEST_CASE("unfold and reshape shapes") {
  Tensor x = Tensor::zeros({2, 20, 8});
  CHECK(unfold(x, 2, 1).shape() == Shape{2, 19, 16});
  CHECK(unfold(x, 20, 3).shape() == Shape{2, 1, 160});
  CHECK_THROWS_AS(unfold(x, 21, 1), ShapeError);
  CHECK_THROWS_AS(reshape(x, {3, 3}), ShapeError);
}

TEST_CASE("dropout at rate zero is the identity and inverted otherwise") {
  std::mt19937_64 rng(1);
  Tensor x = Tensor::full({1000}, 1.0);
  CHECK(bitwise_equal(dropout(x, 0.0, rng), x));
  Tensor y = dropout(x, 0.5, rng);
  double total = 0.0;
  for (double v : y.data()) {
    CHECK((v == 0.0 || v == 2.0));
    total += v;
  }
  CHECK(total / 1000.0 == doctest::Approx(1.0).epsilon(0.15));
}

TEST_CASE("checkpoint round trip is bit exact") {
  std::mt19937_64 rng(9);
  std::vector<NamedTensor> tensors{{"a.weight", oracle::random_tensor({3, 4}, rng)},
                                   {"b", oracle::random_tensor({5}, rng)},
                                   {"scalar", Tensor::from({1}, {-0.0})}};
  tensors[0].value.mutable_data()[0] = std::numeric_limits<double>::denorm_min();
  const auto path = std::filesystem::temp_directory_path() / "tips_ckpt_roundtrip.bin";
  save_checkpoint(path, tensors);
  const auto loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    CHECK(loaded[i].name == tensors[i].name);
    CHECK(bitwise_equal(loaded[i].value, tensors[i].value));
  }
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint loader rejects corrupt files") {
  const auto path = std::filesystem::temp_directory_path() / "tips_ckpt_corrupt.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTACKPT";
  }
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  save_checkpoint(path, {{"x", Tensor::from({2}, {1, 2})}});
  {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out << "junk";
  }
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  std::filesystem::remove(path);
}
