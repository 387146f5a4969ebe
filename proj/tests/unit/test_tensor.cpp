// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <vector>

#include "doctest.h"
#include "lbw/rng.hpp"
#include "lbw/tensor.hpp"

using namespace lbw;
using namespace lbw::tensor;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = false,
                     double scale = 1.0) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, scale);
  return Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("matmul identity") {
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Rng rng(7);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor out = matmul(eye, a);
  for (size_t i = 0; i < a.numel(); ++i) CHECK(out.values()[i] == doctest::Approx(a.values()[i]));
}

TEST_CASE("matmul hand arithmetic") {
  Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_values({2, 1}, {0, 1});
  Tensor out = matmul(a, b);
  CHECK(out.values()[0] == doctest::Approx(2.0));
  CHECK(out.values()[1] == doctest::Approx(4.0));
}

TEST_CASE("matmul shape mismatch rejected") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("inner dimensions"), Error);
}

TEST_CASE("matmul backward matches central finite differences") {
  Rng rng(11);
  Tensor a = random_tensor({3, 4}, rng, true);
  Tensor b = random_tensor({4, 2}, rng, true);
  Tensor w = random_tensor({3, 2}, rng);  // fixed weights to scalarize
  auto fn = [&]() { return sum(hadamard(matmul(a, b), w)); };
  double err = grad_check(fn, {a, b}, 1e-5, 64, rng);
  CHECK(err < 1e-6);
}

TEST_CASE("softmax symmetry and stabilization") {
  Tensor x = Tensor::from_values({3}, {0, 0, 0});
  Tensor y = softmax(x, 0);
  for (double v : y.values()) CHECK(v == doctest::Approx(1.0 / 3.0));

  Tensor big = Tensor::from_values({2}, {1000, 0});
  Tensor yb = softmax(big, 0);
  CHECK(yb.values()[0] == doctest::Approx(1.0));
  CHECK(yb.values()[1] == doctest::Approx(0.0));
  CHECK(std::isfinite(yb.values()[0]));
}

TEST_CASE("softmax rows sum to one on random input") {
  Rng rng(3);
  for (int axis : {0, 1}) {
    Tensor x = random_tensor({4, 6}, rng, false, 30.0);
    Tensor y = softmax(x, axis);
    int m = 4, n = 6;
    if (axis == 1) {
      for (int i = 0; i < m; ++i) {
        double s = 0;
        for (int j = 0; j < n; ++j) s += y.values()[static_cast<size_t>(i * n + j)];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      }
    } else {
      for (int j = 0; j < n; ++j) {
        double s = 0;
        for (int i = 0; i < m; ++i) s += y.values()[static_cast<size_t>(i * n + j)];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("softmax gradient vs finite differences") {
  Rng rng(13);
  Tensor x = random_tensor({2, 5}, rng, true);
  Tensor w = random_tensor({2, 5}, rng);
  auto fn = [&]() { return sum(hadamard(softmax(x, 1), w)); };
  double err = grad_check(fn, {x}, 1e-6, 10, rng);
  CHECK(err < 1e-6);
}

TEST_CASE("cross entropy uniform logits equals ln V") {
  Tensor logits = Tensor::zeros({1, 4});
  Tensor loss = cross_entropy(logits, {2});
  CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-9));
}

TEST_CASE("cross entropy decreases monotonically with margin") {
  double previous = 1e9;
  for (double margin : {1.0, 2.0, 4.0, 8.0, 16.0, 32.0}) {
    Tensor logits = Tensor::from_values({1, 4}, {margin, 0, 0, 0});
    double loss = cross_entropy(logits, {0}).item();
    CHECK(loss < previous);
    CHECK(loss > 0.0);
    previous = loss;
  }
  CHECK(previous < 1e-10);  // large-margin limit
}

TEST_CASE("cross entropy matches independent log-sum-exp computation") {
  Rng rng(17);
  int n = 3, vocab = 7;
  Tensor logits = random_tensor({n, vocab}, rng, false, 2.0);
  std::vector<TokenId> targets = {4, 0, 6};
  double expected = 0.0;
  for (int i = 0; i < n; ++i) {
    double mx = -1e300;
    for (int v = 0; v < vocab; ++v)
      mx = std::max(mx, logits.values()[static_cast<size_t>(i * vocab + v)]);
    double denom = 0.0;
    for (int v = 0; v < vocab; ++v)
      denom += std::exp(logits.values()[static_cast<size_t>(i * vocab + v)] - mx);
    expected += mx + std::log(denom) -
                logits.values()[static_cast<size_t>(i * vocab + targets[static_cast<size_t>(i)])];
  }
  expected /= n;
  CHECK(cross_entropy(logits, targets).item() == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("cross entropy rejects out-of-range target") {
  Tensor logits = Tensor::zeros({1, 4});
  CHECK_THROWS_AS(cross_entropy(logits, {4}), Error);
  try {
    cross_entropy(logits, {4});
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::index);
  }
}

TEST_CASE("backward of sum gives ones") {
  Rng rng(5);
  Tensor x = random_tensor({3, 2}, rng, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("backward of x dot x gives 2x") {
  Rng rng(6);
  Tensor x = random_tensor({1, 5}, rng, true);
  backward(sum(hadamard(x, x)));
  for (size_t i = 0; i < x.numel(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(2.0 * x.values()[i]));
}

TEST_CASE("backward rejects non-scalar root and repeated calls") {
  Rng rng(8);
  Tensor x = random_tensor({2, 2}, rng, true);
  Tensor y = scale(x, 2.0);
  CHECK_THROWS_AS(backward(y), Error);

  Tensor loss = sum(x);
  backward(loss);
  CHECK_THROWS_WITH_AS(backward(loss), doctest::Contains("repeated"), Error);
}

TEST_CASE("grad_check on a linear function is near machine precision") {
  Rng rng(21);
  Tensor x = random_tensor({4}, rng, true);
  Tensor w = random_tensor({4}, rng);
  auto fn = [&]() { return sum(hadamard(x, w)); };
  CHECK(grad_check(fn, {x}, 1e-4, 4, rng) < 1e-9);
}

TEST_CASE("grad_check on softmax cross-entropy chain") {
  Rng rng(22);
  Tensor logits = random_tensor({3, 8}, rng, true);
  std::vector<TokenId> targets = {1, 7, 3};
  auto fn = [&]() { return cross_entropy(logits, targets); };
  CHECK(grad_check(fn, {logits}, 1e-5, 24, rng) < 1e-6);
}

TEST_CASE("grad_check flags a corrupted backward") {
  Rng rng(23);
  Tensor x = random_tensor({4}, rng, true);
  // Hand-built op: forward 2x, backward wrongly claims 3x.
  auto bad_double = [](const Tensor& in) {
    auto node = std::make_shared<detail::Node>();
    node->shape = in.shape();
    node->value.resize(in.numel());
    for (size_t i = 0; i < in.numel(); ++i) node->value[i] = 2.0 * in.values()[i];
    node->id = detail::next_node_id();
    node->requires_grad = true;
    node->inputs = {in.node()};
    auto in_node = in.node();
    node->backward_fn = [in_node](detail::Node& self) {
      in_node->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        in_node->grad[i] += 3.0 * self.grad[i];
    };
    return Tensor::wrap(node);
  };
  auto fn = [&]() { return sum(bad_double(x)); };
  CHECK(grad_check(fn, {x}, 1e-5, 4, rng) > 1e-2);
}

TEST_CASE("adam leaves params unchanged on zero grads") {
  ParamSet params;
  Tensor& w = params.create("w", {3});
  w.mutable_values() = {1.0, 2.0, 3.0};
  Adam opt({0.1, 0.9, 0.999, 1e-8});
  CHECK(params.step_count() == 0);
  opt.step(params);  // no grads allocated at all
  CHECK(params.step_count() == 1);
  CHECK(params.get("w").values() == std::vector<double>{1.0, 2.0, 3.0});
}

TEST_CASE("adam bias-corrected first step moves by about lr") {
  ParamSet params;
  params.create("w", {1});
  Tensor w = params.get("w");
  Tensor loss = sum(w);  // d loss / d w = 1
  backward(loss);
  Adam opt({0.1, 0.9, 0.999, 1e-8});
  opt.step(params);
  CHECK(params.get("w").values()[0] == doctest::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("adam raises a training error naming the parameter on NaN grads") {
  ParamSet params;
  params.create("broken", {1});
  Tensor w = params.get("broken");
  backward(sum(w));
  w.node()->grad[0] = std::nan("");
  Adam opt({0.1, 0.9, 0.999, 1e-8});
  CHECK_THROWS_WITH_AS(opt.step(params), doctest::Contains("broken"), Error);
}

TEST_CASE("adam runs are deterministic") {
  auto run = []() {
    Rng rng(99);
    ParamSet params;
    Tensor& w = params.create("w", {8});
    for (auto& v : w.mutable_values()) v = rng.normal();
    Adam opt({0.01, 0.9, 0.999, 1e-8});
    for (int step = 0; step < 25; ++step) {
      Tensor t = params.get("w");
      backward(sum(hadamard(t, t)));
      opt.step(params);
      params.zero_grads();
    }
    return params.get("w").values();
  };
  auto a = run();
  auto b = run();
  CHECK(a == b);  // bit-identical
}

TEST_CASE("randomized op chains match finite differences") {
  Rng rng(31);
  for (int trial = 0; trial < 4; ++trial) {
    int m = 2 + static_cast<int>(rng.uniform_below(3));
    int k = 2 + static_cast<int>(rng.uniform_below(3));
    int n = 2 + static_cast<int>(rng.uniform_below(3));
    Tensor a = random_tensor({m, k}, rng, true);
    Tensor b = random_tensor({k, n}, rng, true);
    Tensor gain = Tensor::from_values({n}, std::vector<double>(static_cast<size_t>(n), 1.0), true);
    Tensor bias = Tensor::zeros({n}, true);
    Tensor w = random_tensor({m, n}, rng);
    auto fn = [&]() {
      Tensor h = gelu(matmul(a, b));
      Tensor ln = layer_norm(h, gain, bias);
      return sum(hadamard(softmax(ln, 1), w));
    };
    CHECK(grad_check(fn, {a, b, gain, bias}, 1e-5, 16, rng) < 1e-4);
  }
}

TEST_CASE("one-hot times table equals row gather") {
  Rng rng(41);
  Tensor table = random_tensor({10, 4}, rng);
  std::vector<TokenId> ids = {3, 0, 7, 7};
  Tensor via_gather = embed_rows(table, ids);
  Tensor via_onehot = matmul(Tensor::one_hot(ids, 10), table);
  for (size_t i = 0; i < via_gather.numel(); ++i)
    CHECK(via_gather.values()[i] == doctest::Approx(via_onehot.values()[i]).epsilon(1e-12));
}

}  // TEST_SUITE
