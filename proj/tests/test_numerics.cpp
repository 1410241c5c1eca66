#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dapo/rng.hpp"
#include "dapo/tensor.hpp"

using namespace dapo;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  Tensor t(shape, 0.0, requires_grad);
  for (double& v : t.data()) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("matmul identity cases") {
  Tensor a(Shape{2, 2}, {1, 2, 3, 4});
  Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
  Tensor r = matmul(eye, a);
  CHECK(r.data() == a.data());
  Tensor r2 = matmul(a, eye);
  CHECK(r2.data() == a.data());
}

TEST_CASE("matmul shape mismatch throws") {
  Tensor a(Shape{2, 3});
  Tensor b(Shape{2, 2});
  CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("matmul associativity with identity") {
  Rng rng(7);
  Tensor a = random_tensor({3, 3}, rng);
  Tensor b = random_tensor({3, 3}, rng);
  Tensor eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor left = matmul(matmul(a, eye), b);
  Tensor right = matmul(a, matmul(eye, b));
  for (int i = 0; i < 9; ++i)
    CHECK(std::abs(left.data()[size_t(i)] - right.data()[size_t(i)]) <= 1e-12);
}

TEST_CASE("matmul gradient matches finite differences") {
  Rng rng(42);
  Tensor b = random_tensor({4, 3}, rng);
  Tensor a0 = random_tensor({2, 4}, rng);
  double err = finite_diff_check(
      [&](const Tensor& a) { return sum(matmul(a, b)); }, a0, 1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("softmax basics") {
  Tensor x(Shape{2}, {0, 0});
  Tensor y = softmax(x, 0);
  CHECK(y.data()[0] == doctest::Approx(0.5));
  Tensor big(Shape{2}, {1000, 1000});
  Tensor yb = softmax(big, 0);
  CHECK(yb.data()[0] == doctest::Approx(0.5));
  CHECK(std::isfinite(yb.data()[0]));
}

TEST_CASE("softmax matches exp-normalize oracle") {
  Tensor x(Shape{3}, {1, 2, 3});
  Tensor y = softmax(x, 0);
  double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(y.data()[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
  CHECK(y.data()[1] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-12));
  CHECK(y.data()[2] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-12));
}

TEST_CASE("softmax sums to one along axis for random inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = random_tensor({4, 5}, rng);
    Tensor y = softmax(x, 1);
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int c = 0; c < 5; ++c) s += y.at({r, c});
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("layer_norm contracts") {
  Tensor gain(Shape{4}, {1, 1, 1, 1});
  Tensor bias(Shape{4}, {0, 0, 0, 0});
  SUBCASE("constant vector maps to zero") {
    Tensor x(Shape{4}, {3, 3, 3, 3});
    Tensor y = layer_norm(x, gain, bias);
    for (double v : y.data()) CHECK(std::abs(v) < 1e-6);
  }
  SUBCASE("output mean equals bias") {
    Tensor x(Shape{4}, {1, 2, 3, 7});
    Tensor b2(Shape{4}, {0.5, 0.5, 0.5, 0.5});
    Tensor y = layer_norm(x, gain, b2);
    double m = 0;
    for (double v : y.data()) m += v;
    CHECK(m / 4 == doctest::Approx(0.5).epsilon(1e-6));
  }
}

TEST_CASE("layer_norm gradient vs finite differences") {
  Rng rng(5);
  Tensor gain = random_tensor({4}, rng);
  Tensor bias = random_tensor({4}, rng);
  Tensor x0 = random_tensor({3, 4}, rng);
  double err = finite_diff_check(
      [&](const Tensor& x) {
        return sum(mul(layer_norm(x, gain, bias), layer_norm(x, gain, bias)));
      },
      x0, 1e-5);
  CHECK(err < 1e-4);
  Tensor g0 = random_tensor({4}, rng);
  double gerr = finite_diff_check(
      [&](const Tensor& g) { return sum(pow_scalar(layer_norm(x0, g, bias), 2.0)); },
      g0, 1e-5);
  CHECK(gerr < 1e-4);
}

TEST_CASE("elementwise basics") {
  CHECK(sigmoid(Tensor::scalar(0)).value() == doctest::Approx(0.5));
  CHECK(gelu(Tensor::scalar(0)).value() == doctest::Approx(0.0));
  Tensor a(Shape{2}, {1, 2});
  Tensor b(Shape{2}, {3, 4});
  CHECK(elementwise(ElemKind::Add, {a, b}).data()[1] == 6);
  CHECK_THROWS_AS(divide(a, Tensor(Shape{2}, {1, 0})), std::domain_error);
}

TEST_CASE("broadcast follows trailing-axis alignment") {
  Tensor m(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor row(Shape{3}, {10, 20, 30});
  Tensor r = add(m, row);
  CHECK(r.at({0, 2}) == 33);
  CHECK(r.at({1, 0}) == 14);
  Tensor bad(Shape{2});
  CHECK_THROWS_AS(add(m, bad), std::invalid_argument);
}

TEST_CASE("elementwise gradients pass finite-difference check at random points") {
  Rng rng(99);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x0 = random_tensor({6}, rng);
    CHECK(finite_diff_check([](const Tensor& x) { return sum(gelu(x)); }, x0, 1e-5) < 1e-4);
    CHECK(finite_diff_check([](const Tensor& x) { return sum(sigmoid(x)); }, x0, 1e-5) < 1e-4);
    CHECK(finite_diff_check([](const Tensor& x) { return sum(exp_op(x)); }, x0, 1e-5) < 1e-4);
    CHECK(finite_diff_check([](const Tensor& x) { return sum(mul(x, x)); }, x0, 1e-5) < 1e-4);
    Tensor pos = add_scalar(pow_scalar(x0, 2.0), 0.5).detached();
    CHECK(finite_diff_check([](const Tensor& x) { return sum(log_op(x)); }, pos, 1e-6) < 1e-4);
    Tensor y0 = random_tensor({6}, rng);
    CHECK(finite_diff_check(
              [&](const Tensor& x) { return sum(divide(x, add_scalar(pow_scalar(y0, 2.0), 1.0))); },
              x0, 1e-5) < 1e-4);
    CHECK(finite_diff_check([](const Tensor& x) { return sum(softmax(x, 0)); }, x0, 1e-5) < 1e-2);
    CHECK(finite_diff_check(
              [](const Tensor& x) { return dot(softmax(x, 0), pow_scalar(x, 2.0)); },
              x0, 1e-5) < 1e-4);
  }
}

TEST_CASE("backward populates leaf gradients") {
  SUBCASE("sum gives ones") {
    Tensor x(Shape{3}, {1, 2, 3}, true);
    Tape tape;
    Tensor loss = sum(x);
    backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("sum of squares gives 2x") {
    Tensor x(Shape{3}, {1, 2, 3}, true);
    Tape tape;
    Tensor loss = sum(mul(x, x));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2));
    CHECK(x.grad()[1] == doctest::Approx(4));
    CHECK(x.grad()[2] == doctest::Approx(6));
  }
}

TEST_CASE("backward guards") {
  Tensor x(Shape{2}, {1, 2}, true);
  SUBCASE("non-scalar loss rejected") {
    Tape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y), std::invalid_argument);
  }
  SUBCASE("repeated backward rejected") {
    Tape tape;
    Tensor loss = sum(x);
    backward(loss);
    CHECK_THROWS_AS(backward(loss), std::runtime_error);
  }
  SUBCASE("detached graph rejected") {
    Tensor loss;
    {
      Tape inner;
      loss = sum(x);
    }
    Tape other;
    CHECK_THROWS_AS(backward(loss), std::runtime_error);
  }
  SUBCASE("no tape rejected") {
    Tensor loss = sum(x);
    CHECK_THROWS_AS(backward(loss), std::runtime_error);
  }
}

TEST_CASE("backward is deterministic") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = random_tensor({4, 4}, rng, true);
    Tensor w = random_tensor({4, 4}, rng, true);
    Tape tape;
    Tensor loss = sum(mul(softmax(matmul(x, w), 1), matmul(x, w)));
    backward(loss);
    return std::make_pair(x.grad(), w.grad());
  };
  auto a = run(123);
  auto b = run(123);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("finite_diff_check on known analytics") {
  Tensor x(Shape{2}, {1, 2});
  CHECK(finite_diff_check([](const Tensor& t) { return sum(t); }, x, 1e-5) < 1e-9);
  CHECK(finite_diff_check([](const Tensor& t) { return sum(mul(t, t)); }, x, 1e-5) < 1e-6);
}

TEST_CASE("structure ops round out") {
  Tensor a(Shape{2, 3}, {1, 2, 3, 4, 5, 6}, true);
  SUBCASE("transpose grad") {
    double err = finite_diff_check(
        [](const Tensor& t) { return sum(mul(transpose(t), transpose(t))); }, a, 1e-5);
    CHECK(err < 1e-6);
  }
  SUBCASE("concat and slice invert") {
    Tensor b(Shape{1, 3}, {7, 8, 9});
    Tensor c = concat_rows({a, b});
    CHECK(c.dim(0) == 3);
    CHECK(slice_rows(c, 2, 1).data() == b.data());
    CHECK(slice_cols(c, 1, 1).at({0, 0}) == 2);
  }
  SUBCASE("gather_rows grad accumulates over repeats") {
    Tensor table(Shape{3, 2}, {1, 2, 3, 4, 5, 6}, true);
    Tape tape;
    Tensor g = gather_rows(table, {1, 1, 2});
    backward(sum(g));
    CHECK(table.grad()[2] == 2.0);  // row 1 gathered twice
    CHECK(table.grad()[4] == 1.0);
  }
}

TEST_CASE("upsample_bilinear basics") {
  SUBCASE("constant map stays constant") {
    Tensor a(Shape{2, 2}, {3, 3, 3, 3});
    Tensor u = upsample_bilinear(a, 5, 5);
    for (double v : u.data()) CHECK(v == doctest::Approx(3.0));
  }
  SUBCASE("1x1 broadcasts") {
    Tensor a(Shape{1, 1}, {0.7});
    Tensor u = upsample_bilinear(a, 4, 4);
    for (double v : u.data()) CHECK(v == doctest::Approx(0.7));
  }
  SUBCASE("2x2 to 4x4 matches hand bilinear weights") {
    Tensor a(Shape{2, 2}, {0, 1, 2, 3});
    Tensor u = upsample_bilinear(a, 4, 4);
    // align-corners-false: sample points at src = (i+0.5)/2 - 0.5
    CHECK(u.at({0, 0}) == doctest::Approx(0.0));
    CHECK(u.at({0, 1}) == doctest::Approx(0.25));
    CHECK(u.at({0, 2}) == doctest::Approx(0.75));
    CHECK(u.at({0, 3}) == doctest::Approx(1.0));
    CHECK(u.at({1, 1}) == doctest::Approx(0.75));
    CHECK(u.at({2, 2}) == doctest::Approx(2.25));
  }
  SUBCASE("downscale rejected") {
    Tensor a(Shape{4, 4});
    CHECK_THROWS_AS(upsample_bilinear(a, 2, 2), std::invalid_argument);
  }
  SUBCASE("gradient") {
    Rng rng(3);
    Tensor a = random_tensor({3, 3}, rng);
    double err = finite_diff_check(
        [](const Tensor& t) { return sum(pow_scalar(upsample_bilinear(t, 7, 7), 2.0)); },
        a, 1e-5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("values stay finite through a deep chain") {
  Rng rng(21);
  Tensor x = random_tensor({4, 4}, rng, true);
  Tape tape;
  Tensor h = x;
  for (int i = 0; i < 8; ++i) h = l2_normalize_rows(add(matmul(h, x), gelu(h)));
  Tensor loss = sum(h);
  backward(loss);
  for (double v : h.data()) CHECK(std::isfinite(v));
  for (double g : x.grad()) CHECK(std::isfinite(g));
}
