#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gaitforge/ops.hpp"
#include "gaitforge/tensor.hpp"

using namespace gaitforge;

TEST_CASE("tensor creation and access") {
  auto t = Tensor<float>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rank() == 2);
  CHECK(t.numel() == 6);
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(-1) == 3);
  CHECK(t.at({1, 2}) == doctest::Approx(6.0f));
  CHECK_THROWS_AS(Tensor<float>::from_data({2, 2}, {1, 2, 3}), Error);
  auto z = Tensor<double>::zeros({4});
  CHECK(z.at({3}) == 0.0);
  auto s = Tensor<float>::scalar(2.5f);
  CHECK(s.rank() == 0);
  CHECK(s.value() == doctest::Approx(2.5f));
}

TEST_CASE("rng determinism and permutation") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(7);
  auto p = c.permutation(10);
  std::vector<bool> seen(10, false);
  for (auto v : p) {
    CHECK(v >= 0);
    CHECK(v < 10);
    CHECK(!seen[v]);
    seen[v] = true;
  }
}

TEST_CASE("tape records and backpropagates a chain") {
  // loss = sum((x * 2 + 1)^2-ish chain) exercised via ops
  auto x = Tensor<double>::from_data({3}, {1.0, -2.0, 0.5});
  Tape<double> tape;
  tape.watch(x);
  auto y = ops::mul_scalar(x, 2.0);
  auto z = ops::add_scalar(y, 1.0);
  auto w = ops::mul(z, z);
  auto loss = ops::sum_all(w);
  tape.backward(loss);
  // d/dx (2x+1)^2 = 8x + 4
  const auto& g = x.grad();
  CHECK(g[0] == doctest::Approx(12.0));
  CHECK(g[1] == doctest::Approx(-12.0));
  CHECK(g[2] == doctest::Approx(8.0));
}

TEST_CASE("backward runs once per tape") {
  auto x = Tensor<double>::from_data({2}, {1.0, 2.0});
  Tape<double> tape;
  tape.watch(x);
  auto loss = ops::sum_all(x);
  tape.backward(loss);
  CHECK(tape.consumed());
  CHECK_THROWS_AS(tape.backward(loss), Error);
}

TEST_CASE("backward requires a scalar on this tape") {
  auto x = Tensor<double>::from_data({2}, {1.0, 2.0});
  Tape<double> tape;
  tape.watch(x);
  auto y = ops::mul_scalar(x, 3.0);
  CHECK_THROWS_AS(tape.backward(y), Error);  // not scalar
  Tape<double> other;
  auto z = Tensor<double>::scalar(1.0);
  CHECK_THROWS_AS(other.backward(z), Error);  // not recorded there
}

TEST_CASE("watched leaf with no gradient flow still gets a zero buffer") {
  auto x = Tensor<double>::from_data({2}, {1.0, 2.0});
  auto unused = Tensor<double>::from_data({3}, {1.0, 1.0, 1.0});
  Tape<double> tape;
  tape.watch(x);
  tape.watch(unused);
  auto loss = ops::sum_all(x);
  tape.backward(loss);
  REQUIRE(unused.has_grad());
  for (double v : unused.grad()) CHECK(v == 0.0);
}

TEST_CASE("mixing tensors from two tapes is rejected") {
  auto a = Tensor<double>::from_data({2}, {1.0, 2.0});
  auto b = Tensor<double>::from_data({2}, {3.0, 4.0});
  Tape<double> t1, t2;
  t1.watch(a);
  t2.watch(b);
  CHECK_THROWS_AS(ops::add(a, b), Error);
}

TEST_CASE("gradients accumulate across fan-out") {
  auto x = Tensor<double>::from_data({2}, {3.0, -1.0});
  Tape<double> tape;
  tape.watch(x);
  auto a = ops::mul_scalar(x, 2.0);
  auto b = ops::mul_scalar(x, 5.0);
  auto loss = ops::sum_all(ops::add(a, b));
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(7.0));
  CHECK(x.grad()[1] == doctest::Approx(7.0));
}

TEST_CASE("tape destruction detaches tensors; grads persist") {
  auto x = Tensor<float>::from_data({2}, {1.0f, 2.0f});
  {
    Tape<float> tape;
    tape.watch(x);
    auto loss = ops::sum_all(x);
    tape.backward(loss);
  }
  CHECK(x.tape() == nullptr);
  REQUIRE(x.has_grad());
  CHECK(x.grad()[0] == doctest::Approx(1.0f));
  // A fresh tape can re-watch the same tensor; stale grads are cleared.
  Tape<float> t2;
  t2.watch(x);
  CHECK(!x.has_grad());
}

TEST_CASE("clone detaches and copies") {
  auto x = Tensor<float>::from_data({2}, {1.0f, 2.0f});
  auto c = x.clone();
  c.data()[0] = 99.0f;
  CHECK(x.at({0}) == doctest::Approx(1.0f));
  CHECK(c.tape() == nullptr);
}
