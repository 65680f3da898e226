#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "lmoe/tensor.hpp"
#include "oracles.hpp"

using lmoe::Shape;
using lmoe::Tensor;

namespace {

template <class S>
Tensor<S> random_tensor(Shape shape, lmoe::Rng& rng, bool requires_grad = true,
                        double stddev = 1.0) {
  auto t = Tensor<S>::randn(std::move(shape), rng, stddev);
  t.set_requires_grad(requires_grad);
  return t;
}

}  // namespace

TEST_CASE("tensor construction and invariants") {
  auto t = Tensor<float>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK_FALSE(t.requires_grad());
  CHECK_FALSE(t.has_grad());

  CHECK_THROWS_AS(Tensor<float>::from_data({2, 2}, {1, 2, 3}), lmoe::shape_error);

  auto s = Tensor<float>::scalar(3.5f);
  CHECK(s.rank() == 0);
  CHECK(s.size() == 1);
  CHECK(s.item() == 3.5f);
  CHECK_THROWS_AS(t.item(), lmoe::contract_error);
}

TEST_CASE("matmul forward examples") {
  // Identity times a 2x2 matrix.
  auto eye = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
  auto m = Tensor<double>::from_data({2, 2}, {1, 2, 3, 4});
  auto r = lmoe::matmul(eye, m);
  CHECK(r.value() == std::vector<double>{1, 2, 3, 4});

  // Hand-computed 1x2 . 2x1.
  auto a = Tensor<double>::from_data({1, 2}, {1, 2});
  auto b = Tensor<double>::from_data({2, 1}, {3, 4});
  CHECK(lmoe::matmul(a, b).value() == std::vector<double>{11});

  // Shape mismatch names both shapes.
  auto c = Tensor<double>::zeros({3, 5});
  try {
    lmoe::matmul(m, c);
    FAIL("expected shape_error");
  } catch (const lmoe::shape_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,2]") != std::string::npos);
    CHECK(msg.find("[3,5]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches central finite differences") {
  lmoe::Rng rng(42);
  auto a = random_tensor<double>({3, 4}, rng);
  auto b = random_tensor<double>({4, 2}, rng);

  auto loss_of = [&]() { return lmoe::sum_all(lmoe::matmul(a, b)).item(); };

  auto loss = lmoe::sum_all(lmoe::matmul(a, b));
  lmoe::backward(loss);
  CHECK(oracle::max_grad_rel_err(loss_of, a, a.grad()) < 1e-6);
  a.zero_grad();
  b.zero_grad();
  loss = lmoe::sum_all(lmoe::matmul(a, b));
  lmoe::backward(loss);
  CHECK(oracle::max_grad_rel_err(loss_of, b, b.grad()) < 1e-6);
}

TEST_CASE("batched matmul matches per-slice products") {
  lmoe::Rng rng(7);
  auto a = random_tensor<double>({2, 3, 4}, rng);
  auto b = random_tensor<double>({2, 4, 5}, rng);
  auto out = lmoe::matmul(a, b);
  REQUIRE(out.shape() == Shape{2, 3, 5});
  for (std::size_t g = 0; g < 2; ++g) {
    auto as = Tensor<double>::from_data(
        {3, 4}, std::vector<double>(a.value().begin() + g * 12, a.value().begin() + (g + 1) * 12));
    auto bs = Tensor<double>::from_data(
        {4, 5}, std::vector<double>(b.value().begin() + g * 20, b.value().begin() + (g + 1) * 20));
    auto slice = lmoe::matmul(as, bs);
    for (std::size_t i = 0; i < 15; ++i)
      CHECK(out.value()[g * 15 + i] == Catch::Approx(slice.value()[i]).epsilon(1e-12));
  }

  // Gradient through the batched path.
  auto f = [&]() { return lmoe::sum_all(lmoe::mul(lmoe::matmul(a, b), lmoe::matmul(a, b))).item(); };
  auto loss = lmoe::sum_all(lmoe::mul(lmoe::matmul(a, b), lmoe::matmul(a, b)));
  lmoe::backward(loss);
  CHECK(oracle::max_grad_rel_err(f, a, a.grad()) < 1e-6);
}

TEST_CASE("softmax forward examples") {
  auto uniform = lmoe::softmax(Tensor<double>::from_data({4}, {0, 0, 0, 0}), -1);
  for (double v : uniform.value()) CHECK(v == Catch::Approx(0.25));

  // Stability under extreme logits: no overflow, saturated output.
  auto hot = lmoe::softmax(Tensor<double>::from_data({2}, {1000, 0}), -1);
  CHECK(hot.value()[0] == Catch::Approx(1.0));
  CHECK(hot.value()[1] == Catch::Approx(0.0).margin(1e-12));
  CHECK(std::isfinite(hot.value()[0]));

  lmoe::Rng rng(3);
  auto x = random_tensor<double>({8}, rng);
  auto sm = lmoe::softmax(x, 0);
  double total = 0;
  for (double v : sm.value()) {
    CHECK(v > 0);
    total += v;
  }
  CHECK(total == Catch::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("softmax jacobian matches finite differences") {
  lmoe::Rng rng(11);
  auto x = random_tensor<double>({8}, rng);
  auto c = random_tensor<double>({8}, rng, false);

  auto f = [&]() { return lmoe::sum_all(lmoe::mul(lmoe::softmax(x, 0), c)).item(); };
  auto loss = lmoe::sum_all(lmoe::mul(lmoe::softmax(x, 0), c));
  lmoe::backward(loss);
  CHECK(oracle::max_grad_rel_err(f, x, x.grad()) < 1e-6);
}

TEST_CASE("softmax along a middle axis") {
  lmoe::Rng rng(12);
  auto x = random_tensor<double>({2, 3, 4}, rng);
  auto sm = lmoe::softmax(x, 1);
  // Sums over axis 1 are 1 for every (outer, inner) pair.
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t i = 0; i < 4; ++i) {
      double total = 0;
      for (std::size_t j = 0; j < 3; ++j) total += sm.value()[o * 12 + j * 4 + i];
      CHECK(total == Catch::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("cross entropy examples") {
  // Uniform logits over 16 classes -> ln 16.
  auto logits = Tensor<double>::zeros({3, 16});
  logits.set_requires_grad(true);
  std::vector<std::int32_t> targets{0, 5, 15};
  std::vector<std::uint8_t> mask{1, 1, 1};
  auto loss = lmoe::cross_entropy<double>(logits, targets, mask);
  CHECK(loss.item() == Catch::Approx(std::log(16.0)).epsilon(1e-9));

  // Confident correct prediction -> ~0.
  auto confident = Tensor<double>::zeros({1, 16});
  confident.mut_value()[7] = 20.0;
  auto l2 = lmoe::cross_entropy<double>(confident, std::vector<std::int32_t>{7},
                                        std::vector<std::uint8_t>{1});
  CHECK(l2.item() < 1e-6);

  // All-masked batch is an error.
  CHECK_THROWS_AS(lmoe::cross_entropy<double>(logits, targets, std::vector<std::uint8_t>{0, 0, 0}),
                  lmoe::data_error);

  // Out-of-range target id.
  CHECK_THROWS_AS(lmoe::cross_entropy<double>(logits, std::vector<std::int32_t>{99, 0, 0}, mask),
                  lmoe::vocab_error);
}

TEST_CASE("cross entropy matches a direct summation oracle") {
  lmoe::Rng rng(21);
  auto logits = random_tensor<double>({5, 11}, rng);
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask(5, 1);
  for (int r = 0; r < 5; ++r) targets.push_back(static_cast<std::int32_t>(rng.below(11)));

  // Direct oracle: -sum log p / rows via explicit normalization.
  double expect = 0;
  for (std::size_t r = 0; r < 5; ++r) {
    double denom = 0;
    for (std::size_t j = 0; j < 11; ++j) denom += std::exp(logits.value()[r * 11 + j]);
    const double p = std::exp(logits.value()[r * 11 + targets[r]]) / denom;
    expect -= std::log(p);
  }
  expect /= 5;

  auto loss = lmoe::cross_entropy<double>(logits, targets, mask);
  CHECK(loss.item() == Catch::Approx(expect).epsilon(1e-6));

  // Masked rows do not contribute.
  mask[2] = 0;
  double expect_masked = 0;
  for (std::size_t r = 0; r < 5; ++r) {
    if (!mask[r]) continue;
    double denom = 0;
    for (std::size_t j = 0; j < 11; ++j) denom += std::exp(logits.value()[r * 11 + j]);
    expect_masked -= std::log(std::exp(logits.value()[r * 11 + targets[r]]) / denom);
  }
  expect_masked /= 4;
  CHECK(lmoe::cross_entropy<double>(logits, targets, mask).item() ==
        Catch::Approx(expect_masked).epsilon(1e-6));

  // Gradient vs finite differences.
  auto f = [&]() { return lmoe::cross_entropy<double>(logits, targets, mask).item(); };
  auto l = lmoe::cross_entropy<double>(logits, targets, mask);
  lmoe::backward(l);
  CHECK(oracle::max_grad_rel_err(f, logits, logits.grad()) < 1e-6);
}

TEST_CASE("backward basics") {
  // loss = sum(x) -> grad is all ones.
  lmoe::Rng rng(5);
  auto x = random_tensor<double>({3, 4}, rng);
  auto loss = lmoe::sum_all(x);
  lmoe::backward(loss);
  for (double g : x.grad()) CHECK(g == 1.0);

  // Detached loss leaves x without a gradient.
  auto y = random_tensor<double>({2}, rng);
  auto other = lmoe::sum_all(y);
  x.zero_grad();
  lmoe::backward(other);
  CHECK_FALSE(x.has_grad());

  // Non-scalar backward is a contract violation.
  CHECK_THROWS_AS(lmoe::backward(x), lmoe::contract_error);
}

TEST_CASE("composite chain gradient: softmax -> matmul -> cross entropy") {
  lmoe::Rng rng(9);
  auto x = random_tensor<double>({4, 6}, rng);
  auto w = random_tensor<double>({6, 9}, rng);
  std::vector<std::int32_t> targets{1, 4, 0, 8};
  std::vector<std::uint8_t> mask{1, 1, 1, 1};

  auto make_loss = [&]() {
    auto sm = lmoe::softmax(x, -1);
    auto logits = lmoe::matmul(sm, w);
    return lmoe::cross_entropy<double>(logits, targets, mask);
  };

  auto loss = make_loss();
  lmoe::backward(loss);
  auto f = [&]() { return make_loss().item(); };
  CHECK(oracle::max_grad_rel_err(f, x, x.grad(), 1e-5) < 1e-4);
  CHECK(oracle::max_grad_rel_err(f, w, w.grad(), 1e-5) < 1e-4);
}

TEST_CASE("gradient accumulates additively across multiple uses") {
  auto x = Tensor<double>::from_data({2}, {3, 4});
  x.set_requires_grad(true);
  // loss = sum(x * x): dx = 2x.
  auto loss = lmoe::sum_all(lmoe::mul(x, x));
  lmoe::backward(loss);
  CHECK(x.grad()[0] == Catch::Approx(6.0));
  CHECK(x.grad()[1] == Catch::Approx(8.0));
}

TEST_CASE("zero-gradient guarantee for frozen tensors") {
  lmoe::Rng rng(13);
  auto frozen = random_tensor<double>({3, 3}, rng, false);
  auto live = random_tensor<double>({3, 3}, rng, true);
  auto loss = lmoe::sum_all(lmoe::matmul(frozen, live));
  lmoe::backward(loss);
  CHECK_FALSE(frozen.has_grad());
  CHECK(live.has_grad());
}

TEST_CASE("elementwise, reduction and shape ops match finite differences") {
  lmoe::Rng rng(17);

  SECTION("add with suffix broadcast") {
    auto a = random_tensor<double>({2, 3, 4}, rng);
    auto b = random_tensor<double>({4}, rng);
    auto f = [&]() { return lmoe::sum_all(lmoe::mul(lmoe::add(a, b), lmoe::add(a, b))).item(); };
    auto loss = lmoe::sum_all(lmoe::mul(lmoe::add(a, b), lmoe::add(a, b)));
    lmoe::backward(loss);
    CHECK(oracle::max_grad_rel_err(f, a, a.grad()) < 1e-5);
    CHECK(oracle::max_grad_rel_err(f, b, b.grad()) < 1e-5);
    CHECK_THROWS_AS(lmoe::add(a, random_tensor<double>({3}, rng)), lmoe::shape_error);
  }

  SECTION("scale and sub") {
    auto a = random_tensor<double>({5}, rng);
    auto b = random_tensor<double>({5}, rng);
    auto f = [&]() { return lmoe::sum_all(lmoe::mul(lmoe::sub(a, b), lmoe::scale(a, 3.0))).item(); };
    auto loss = lmoe::sum_all(lmoe::mul(lmoe::sub(a, b), lmoe::scale(a, 3.0)));
    lmoe::backward(loss);
    CHECK(oracle::max_grad_rel_err(f, a, a.grad()) < 1e-5);
    CHECK(oracle::max_grad_rel_err(f, b, b.grad()) < 1e-5);
  }

  SECTION("rowwise_scale") {
    auto v = random_tensor<double>({2, 3, 4}, rng);
    auto w = random_tensor<double>({2, 3}, rng);
    auto f = [&]() {
      return lmoe::sum_all(lmoe::mul(lmoe::rowwise_scale(v, w), lmoe::rowwise_scale(v, w))).item();
    };
    auto loss = lmoe::sum_all(lmoe::mul(lmoe::rowwise_scale(v, w), lmoe::rowwise_scale(v, w)));
    lmoe::backward(loss);
    CHECK(oracle::max_grad_rel_err(f, v, v.grad()) < 1e-5);
    CHECK(oracle::max_grad_rel_err(f, w, w.grad()) < 1e-5);
  }

  SECTION("index_last") {
    auto a = random_tensor<double>({3, 5}, rng);
    auto f = [&]() { return lmoe::sum_all(lmoe::mul(lmoe::index_last(a, 2), lmoe::index_last(a, 2))).item(); };
    auto loss = lmoe::sum_all(lmoe::mul(lmoe::index_last(a, 2), lmoe::index_last(a, 2)));
    lmoe::backward(loss);
    CHECK(oracle::max_grad_rel_err(f, a, a.grad()) < 1e-5);
    CHECK_THROWS_AS(lmoe::index_last(a, 5), lmoe::shape_error);
  }

  SECTION("sum_axis") {
    auto a = random_tensor<double>({2, 3, 4}, rng);
    auto s0 = lmoe::sum_axis(a, 0);
    REQUIRE(s0.shape() == Shape{3, 4});
    // Spot-check against a direct loop.
    for (std::size_t j = 0; j < 12; ++j)
      CHECK(s0.value()[j] == Catch::Approx(a.value()[j] + a.value()[12 + j]).epsilon(1e-12));
    auto f = [&]() { return lmoe::sum_all(lmoe::mul(lmoe::sum_axis(a, 1), lmoe::sum_axis(a, 1))).item(); };
    auto loss = lmoe::sum_all(lmoe::mul(lmoe::sum_axis(a, 1), lmoe::sum_axis(a, 1)));
    lmoe::backward(loss);
    CHECK(oracle::max_grad_rel_err(f, a, a.grad()) < 1e-5);
  }

  SECTION("reshape and transpose") {
    auto a = random_tensor<double>({2, 3, 4}, rng);
    auto t = lmoe::transpose(a, {1, 2, 0});
    REQUIRE(t.shape() == Shape{3, 4, 2});
    // transpose moves elements without changing them.
    CHECK(t.value()[0] == a.value()[0]);
    CHECK(t.value()[1] == a.value()[12]);  // [0,0,1] <- a[1,0,0]

    auto f = [&]() {
      auto tt = lmoe::transpose(lmoe::reshape(a, {6, 4}), {1, 0});
      return lmoe::sum_all(lmoe::mul(tt, tt)).item();
    };
    auto tt = lmoe::transpose(lmoe::reshape(a, {6, 4}), {1, 0});
    auto loss = lmoe::sum_all(lmoe::mul(tt, tt));
    lmoe::backward(loss);
    CHECK(oracle::max_grad_rel_err(f, a, a.grad()) < 1e-5);
    CHECK_THROWS_AS(lmoe::reshape(a, {5, 5}), lmoe::shape_error);
    CHECK_THROWS_AS(lmoe::transpose(a, {0, 0, 1}), lmoe::shape_error);
  }

  SECTION("relu and gelu") {
    auto a = random_tensor<double>({20}, rng);
    // keep relu inputs away from the kink
    for (auto& v : a.mut_value())
      if (std::abs(v) < 0.05) v += 0.1;
    auto f_relu = [&]() { return lmoe::sum_all(lmoe::mul(lmoe::relu(a), lmoe::relu(a))).item(); };
    auto loss_r = lmoe::sum_all(lmoe::mul(lmoe::relu(a), lmoe::relu(a)));
    lmoe::backward(loss_r);
    CHECK(oracle::max_grad_rel_err(f_relu, a, a.grad()) < 1e-5);

    a.zero_grad();
    auto f_gelu = [&]() { return lmoe::sum_all(lmoe::mul(lmoe::gelu(a), lmoe::gelu(a))).item(); };
    auto loss_g = lmoe::sum_all(lmoe::mul(lmoe::gelu(a), lmoe::gelu(a)));
    lmoe::backward(loss_g);
    CHECK(oracle::max_grad_rel_err(f_gelu, a, a.grad()) < 1e-5);
  }

  SECTION("layer_norm") {
    auto x = random_tensor<double>({3, 6}, rng);
    auto g = random_tensor<double>({6}, rng);
    auto b = random_tensor<double>({6}, rng);
    auto make = [&]() {
      auto y = lmoe::layer_norm(x, g, b);
      return lmoe::sum_all(lmoe::mul(y, y));
    };
    auto loss = make();
    lmoe::backward(loss);
    auto f = [&]() { return make().item(); };
    CHECK(oracle::max_grad_rel_err(f, x, x.grad(), 1e-6) < 1e-4);
    CHECK(oracle::max_grad_rel_err(f, g, g.grad(), 1e-6) < 1e-4);
    CHECK(oracle::max_grad_rel_err(f, b, b.grad(), 1e-6) < 1e-4);
    CHECK_THROWS_AS(lmoe::layer_norm(x, random_tensor<double>({5}, rng), b), lmoe::shape_error);
  }

  SECTION("embedding") {
    auto table = random_tensor<double>({7, 3}, rng);
    std::vector<std::int32_t> ids{1, 4, 1, 6};
    auto out = lmoe::embedding<double>(table, ids, {2, 2});
    REQUIRE(out.shape() == Shape{2, 2, 3});
    for (std::size_t c = 0; c < 3; ++c) CHECK(out.value()[c] == table.value()[3 + c]);

    auto f = [&]() {
      auto e = lmoe::embedding<double>(table, ids, {2, 2});
      return lmoe::sum_all(lmoe::mul(e, e)).item();
    };
    auto e = lmoe::embedding<double>(table, ids, {2, 2});
    auto loss = lmoe::sum_all(lmoe::mul(e, e));
    lmoe::backward(loss);
    CHECK(oracle::max_grad_rel_err(f, table, table.grad()) < 1e-5);

    CHECK_THROWS_AS(lmoe::embedding<double>(table, std::vector<std::int32_t>{7}, {1}),
                    lmoe::vocab_error);
  }
}

TEST_CASE("forward evaluation is deterministic") {
  lmoe::Rng rng(99);
  auto x = random_tensor<float>({4, 4}, rng);
  auto w = random_tensor<float>({4, 4}, rng);
  auto once = lmoe::softmax(lmoe::matmul(lmoe::gelu(x), w), -1);
  auto twice = lmoe::softmax(lmoe::matmul(lmoe::gelu(x), w), -1);
  CHECK(std::memcmp(once.value().data(), twice.value().data(),
                    once.size() * sizeof(float)) == 0);
}
