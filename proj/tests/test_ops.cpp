#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gaitforge/gradcheck.hpp"
#include "gaitforge/ops.hpp"
#include "gaitforge/tensor.hpp"
#include "oracles.hpp"

using namespace gaitforge;
namespace o = oracles;

namespace {

// gradcheck convenience: single-op losses are summed to a scalar.
GradCheckReport check_grads(const GradCheckFn& fn,
                            std::vector<Tensor<double>> inputs,
                            double tol = 1e-5) {
  GradCheckOptions opts;
  opts.tolerance = tol;
  auto rep = grad_check(fn, std::move(inputs), opts);
  INFO("max relative error = " << rep.max_relative_error);
  CHECK(rep.pass);
  return rep;
}

}  // namespace

// ---------- convolution ----------

TEST_CASE("conv2d matches the direct oracle") {
  Rng rng(11);
  auto x = Tensor<double>::randn({2, 2, 5, 6}, rng);
  auto w = Tensor<double>::randn({3, 2, 3, 3}, rng);
  auto got = ops::conv2d(x, w, {2, 2}, {1, 1});
  auto want = o::conv2d_direct(x, w, 2, 2, 1, 1);
  CHECK(got.shape() == Shape{2, 3, 3, 3});
  CHECK(o::max_abs_diff(got, want) < 1e-12);

  // 1x1 kernel, no padding
  auto w1 = Tensor<double>::randn({4, 2, 1, 1}, rng);
  auto g1 = ops::conv2d(x, w1, {1, 1}, {0, 0});
  CHECK(o::max_abs_diff(g1, o::conv2d_direct(x, w1, 1, 1, 0, 0)) < 1e-12);

  // stride 1, padding 1 (same-size)
  auto w2 = Tensor<double>::randn({2, 2, 3, 3}, rng);
  auto g2 = ops::conv2d(x, w2, {1, 1}, {1, 1});
  CHECK(g2.shape() == Shape{2, 2, 5, 6});
  CHECK(o::max_abs_diff(g2, o::conv2d_direct(x, w2, 1, 1, 1, 1)) < 1e-12);
}

TEST_CASE("conv2d rejects a kernel larger than the padded input") {
  Rng rng(1);
  auto x = Tensor<double>::randn({1, 1, 2, 2}, rng);
  auto w = Tensor<double>::randn({1, 1, 5, 5}, rng);
  CHECK_THROWS_AS(ops::conv2d(x, w, {1, 1}, {0, 0}), Error);
  CHECK_THROWS_AS(ops::conv2d(x, w, {0, 1}, {2, 2}), Error);  // stride >= 1
}

TEST_CASE("conv2d gradients") {
  Rng rng(12);
  auto x = Tensor<double>::randn({2, 2, 5, 5}, rng);
  auto w = Tensor<double>::randn({3, 2, 3, 3}, rng);
  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        return ops::sum_all(
            ops::mul(ops::conv2d(in[0], in[1], {2, 2}, {1, 1}),
                     ops::conv2d(in[0], in[1], {2, 2}, {1, 1})));
      },
      {x, w});
}

TEST_CASE("conv3d matches the direct oracle") {
  Rng rng(13);
  auto x = Tensor<double>::randn({2, 2, 4, 5, 5}, rng);
  auto w = Tensor<double>::randn({3, 2, 3, 3, 3}, rng);
  auto got = ops::conv3d(x, w, {1, 2, 2}, {1, 1, 1});
  auto want = o::conv3d_direct(x, w, 1, 2, 2, 1, 1, 1);
  CHECK(got.shape() == Shape{2, 3, 4, 3, 3});
  CHECK(o::max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("conv3d handles a single frame with temporal padding") {
  Rng rng(14);
  auto x = Tensor<double>::randn({1, 2, 1, 4, 4}, rng);
  auto w = Tensor<double>::randn({2, 2, 3, 3, 3}, rng);
  auto got = ops::conv3d(x, w, {1, 1, 1}, {1, 1, 1});
  CHECK(got.shape() == Shape{1, 2, 1, 4, 4});
  CHECK(o::max_abs_diff(got, o::conv3d_direct(x, w, 1, 1, 1, 1, 1, 1)) <
        1e-12);
}

TEST_CASE("conv3d gradients") {
  Rng rng(15);
  auto x = Tensor<double>::randn({1, 2, 3, 4, 4}, rng);
  auto w = Tensor<double>::randn({2, 2, 3, 3, 3}, rng);
  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        auto y = ops::conv3d(in[0], in[1], {1, 2, 2}, {1, 1, 1});
        return ops::sum_all(ops::mul(y, y));
      },
      {x, w});
}

TEST_CASE("conv1d_temporal equals conv3d with a [kt,1,1] kernel") {
  Rng rng(16);
  auto x = Tensor<double>::randn({2, 3, 5, 2, 2}, rng);
  auto w = Tensor<double>::randn({4, 3, 3}, rng);
  auto got = ops::conv1d_temporal(x, w);
  auto w5 = Tensor<double>::from_data({4, 3, 3, 1, 1},
                                      std::vector<double>(w.data(),
                                                          w.data() + 36));
  auto want = o::conv3d_direct(x, w5, 1, 1, 1, 1, 0, 0);
  CHECK(got.shape() == Shape{2, 4, 5, 2, 2});
  CHECK(o::max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("conv1d_temporal preserves temporal extent and is spatially local") {
  Rng rng(17);
  auto x = Tensor<double>::randn({1, 2, 6, 3, 3}, rng);
  auto w = Tensor<double>::randn({2, 2, 3}, rng);
  auto y = ops::conv1d_temporal(x, w);
  CHECK(y.dim(2) == 6);
  // Perturbing one spatial site leaves all other sites untouched.
  auto x2 = x.clone();
  x2.data()[(((0 * 2 + 0) * 6 + 2) * 3 + 1) * 3 + 1] += 3.0;
  auto y2 = ops::conv1d_temporal(x2, w);
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t t = 0; t < 6; ++t)
      for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j) {
          double d = std::fabs(y2.at({0, c, t, i, j}) - y.at({0, c, t, i, j}));
          if (i == 1 && j == 1) continue;
          CHECK(d == 0.0);
        }
}

TEST_CASE("conv1d_temporal rejects even kernels") {
  Rng rng(18);
  auto x = Tensor<double>::randn({1, 2, 4, 2, 2}, rng);
  auto w = Tensor<double>::randn({2, 2, 4}, rng);
  CHECK_THROWS_AS(ops::conv1d_temporal(x, w), Error);
}

// ---------- linear / matmul ----------

TEST_CASE("matmul matches the oracle for all transpose combinations") {
  Rng rng(19);
  auto A = Tensor<double>::randn({4, 3}, rng);
  auto B = Tensor<double>::randn({3, 5}, rng);
  CHECK(o::max_abs_diff(ops::matmul(A, B), o::matmul2d_direct(A, B)) < 1e-12);

  auto At = ops::permute(A, {1, 0});
  CHECK(o::max_abs_diff(ops::matmul(At, B, true, false),
                        o::matmul2d_direct(A, B)) < 1e-12);
  auto Bt = ops::permute(B, {1, 0});
  CHECK(o::max_abs_diff(ops::matmul(A, Bt, false, true),
                        o::matmul2d_direct(A, B)) < 1e-12);
  CHECK(o::max_abs_diff(ops::matmul(At, Bt, true, true),
                        o::matmul2d_direct(A, B)) < 1e-12);
}

TEST_CASE("batched matmul and gradients") {
  Rng rng(20);
  auto A = Tensor<double>::randn({2, 3, 4, 3}, rng);
  auto B = Tensor<double>::randn({2, 3, 3, 2}, rng);
  auto C = ops::matmul(A, B);
  CHECK(C.shape() == Shape{2, 3, 4, 2});
  // Spot-check one batch entry against the 2-D oracle.
  auto a0 = ops::slice(ops::reshape(A, {6, 4, 3}), 0, 4, 1);
  auto b0 = ops::slice(ops::reshape(B, {6, 3, 2}), 0, 4, 1);
  auto c0 = o::matmul2d_direct(ops::reshape(a0, {4, 3}),
                               ops::reshape(b0, {3, 2}));
  auto cg = ops::reshape(ops::slice(ops::reshape(C, {6, 4, 2}), 0, 4, 1),
                         {4, 2});
  CHECK(o::max_abs_diff(cg, c0) < 1e-12);

  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        auto y = ops::matmul(in[0], in[1], false, true);
        return ops::sum_all(ops::mul(y, y));
      },
      {Tensor<double>::randn({2, 3, 4}, rng),
       Tensor<double>::randn({2, 5, 4}, rng)});
}

TEST_CASE("linear matches x*w^T + b and differentiates") {
  Rng rng(21);
  auto x = Tensor<double>::randn({3, 2, 4}, rng);
  auto w = Tensor<double>::randn({5, 4}, rng);
  auto b = Tensor<double>::randn({5}, rng);
  auto y = ops::linear(x, w, b);
  CHECK(y.shape() == Shape{3, 2, 5});
  for (int64_t m = 0; m < 3; ++m)
    for (int64_t t = 0; t < 2; ++t)
      for (int64_t j = 0; j < 5; ++j) {
        double acc = b.at({j});
        for (int64_t k = 0; k < 4; ++k)
          acc += x.at({m, t, k}) * w.at({j, k});
        CHECK(y.at({m, t, j}) == doctest::Approx(acc).epsilon(1e-10));
      }
  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        auto out = ops::linear(in[0], in[1], in[2]);
        return ops::sum_all(ops::mul(out, out));
      },
      {x, w, b});
  // Bias-free form.
  auto y2 = ops::linear(x, w, Tensor<double>());
  CHECK(y2.shape() == Shape{3, 2, 5});
}

// ---------- normalization ----------

TEST_CASE("batch_norm train mode normalizes and tracks running stats") {
  Rng rng(22);
  auto x = Tensor<double>::randn({4, 3, 2, 2}, rng);
  auto scale = Tensor<double>::ones({3});
  auto shift = Tensor<double>::zeros({3});
  auto rm = Tensor<double>::zeros({3});
  auto rv = Tensor<double>::ones({3});
  auto y = ops::batch_norm(x, scale, shift, rm, rv, Mode::Train, 0.1, 1e-5);
  // Per-channel batch stats of the output: mean 0, var ~1.
  for (int64_t c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    for (int64_t n = 0; n < 4; ++n)
      for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 2; ++j) {
          double v = y.at({n, c, i, j});
          sum += v;
          sq += v * v;
        }
    double mean = sum / 16, var = sq / 16 - mean * mean;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
  // Running stats follow (1-m)*old + m*batch with unbiased variance.
  for (int64_t c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    for (int64_t n = 0; n < 4; ++n)
      for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 2; ++j) {
          double v = x.at({n, c, i, j});
          sum += v;
          sq += v * v;
        }
    double mean = sum / 16;
    double var = (sq / 16 - mean * mean) * 16.0 / 15.0;
    CHECK(rm.at({c}) == doctest::Approx(0.1 * mean).epsilon(1e-9));
    CHECK(rv.at({c}) == doctest::Approx(0.9 + 0.1 * var).epsilon(1e-9));
  }
}

TEST_CASE("batch_norm eval uses running stats; error when uninitialized") {
  Rng rng(23);
  auto x = Tensor<double>::randn({2, 2, 3}, rng);
  auto scale = Tensor<double>::from_data({2}, {2.0, 0.5});
  auto shift = Tensor<double>::from_data({2}, {1.0, -1.0});
  auto rm = Tensor<double>::from_data({2}, {0.5, -0.5});
  auto rv = Tensor<double>::from_data({2}, {4.0, 0.25});
  auto y = ops::batch_norm(x, scale, shift, rm, rv, Mode::Eval);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 2; ++c)
      for (int64_t i = 0; i < 3; ++i) {
        double inv = 1.0 / std::sqrt(rv.at({c}) + 1e-5);
        double want = (x.at({n, c, i}) - rm.at({c})) * inv * scale.at({c}) +
                      shift.at({c});
        CHECK(y.at({n, c, i}) == doctest::Approx(want).epsilon(1e-12));
      }
  Tensor<double> none;
  CHECK_THROWS_WITH_AS(
      ops::batch_norm(x, scale, shift, none, none, Mode::Eval),
      doctest::Contains("eval mode without initialized running statistics"),
      Error);
}

TEST_CASE("batch_norm train mode needs at least two elements per channel") {
  auto x = Tensor<double>::from_data({1, 2}, {1.0, 2.0});
  auto s = Tensor<double>::ones({2});
  auto b = Tensor<double>::zeros({2});
  auto rm = Tensor<double>::zeros({2});
  auto rv = Tensor<double>::ones({2});
  CHECK_THROWS_AS(ops::batch_norm(x, s, b, rm, rv, Mode::Train), Error);
}

TEST_CASE("batch_norm gradients (train and eval)") {
  Rng rng(24);
  auto x = Tensor<double>::randn({3, 2, 4}, rng);
  auto scale = Tensor<double>::uniform({2}, rng, 0.5, 1.5);
  auto shift = Tensor<double>::randn({2}, rng);
  // Elementwise random weights keep the loss sensitive to x: a plain sum of
  // squares is nearly invariant under train-mode normalization.
  auto wts = Tensor<double>::randn({3, 2, 4}, rng);
  for (Mode mode : {Mode::Train, Mode::Eval}) {
    check_grads(
        [mode, wts](const std::vector<Tensor<double>>& in, Tape<double>*) {
          auto rm = Tensor<double>::from_data({2}, {0.2, -0.1});
          auto rv = Tensor<double>::from_data({2}, {1.5, 0.7});
          auto y = ops::batch_norm(in[0], in[1], in[2], rm, rv, mode);
          auto z = ops::mul(y, wts);
          return ops::sum_all(ops::add(z, ops::mul(z, z)));
        },
        {x, scale, shift});
  }
}

TEST_CASE("layer_norm normalizes rows and differentiates") {
  Rng rng(25);
  auto x = Tensor<double>::randn({4, 6}, rng);
  auto scale = Tensor<double>::ones({6});
  auto shift = Tensor<double>::zeros({6});
  auto y = ops::layer_norm(x, scale, shift);
  for (int64_t m = 0; m < 4; ++m) {
    double sum = 0, sq = 0;
    for (int64_t j = 0; j < 6; ++j) {
      sum += y.at({m, j});
      sq += y.at({m, j}) * y.at({m, j});
    }
    CHECK(sum / 6 == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(sq / 6 == doctest::Approx(1.0).epsilon(1e-3));
  }
  auto wts = Tensor<double>::randn({4, 6}, rng);
  check_grads(
      [wts](const std::vector<Tensor<double>>& in, Tape<double>*) {
        auto out = ops::layer_norm(in[0], in[1], in[2]);
        auto z = ops::mul(out, wts);
        return ops::sum_all(ops::add(z, ops::mul(z, z)));
      },
      {x, Tensor<double>::uniform({6}, rng, 0.5, 1.5),
       Tensor<double>::randn({6}, rng)});
}

// ---------- softmax / losses ----------

TEST_CASE("softmax normalizes, matches the oracle, handles -inf lanes") {
  Rng rng(26);
  auto x = Tensor<double>::randn({3, 5}, rng);
  auto y = ops::softmax(x, -1);
  for (int64_t m = 0; m < 3; ++m) {
    std::vector<double> row(5);
    double sum = 0;
    for (int64_t j = 0; j < 5; ++j) {
      row[j] = x.at({m, j});
      sum += y.at({m, j});
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    auto want = o::softmax_row(row);
    for (int64_t j = 0; j < 5; ++j)
      CHECK(y.at({m, j}) == doctest::Approx(want[j]).epsilon(1e-12));
  }
  // A -inf entry gets weight exactly 0.
  double inf = std::numeric_limits<double>::infinity();
  auto xm = Tensor<double>::from_data({1, 3}, {1.0, -inf, 2.0});
  auto ym = ops::softmax(xm, -1);
  CHECK(ym.at({0, 1}) == 0.0);
  CHECK(ym.at({0, 0}) + ym.at({0, 2}) == doctest::Approx(1.0));
  // Fully masked lane: all zeros by definition.
  auto xz = Tensor<double>::from_data({1, 2}, {-inf, -inf});
  auto yz = ops::softmax(xz, -1);
  CHECK(yz.at({0, 0}) == 0.0);
  CHECK(yz.at({0, 1}) == 0.0);
}

TEST_CASE("softmax along a middle axis and gradients") {
  Rng rng(27);
  auto x = Tensor<double>::randn({2, 4, 3}, rng);
  auto y = ops::softmax(x, 1);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t i = 0; i < 3; ++i) {
      double sum = 0;
      for (int64_t k = 0; k < 4; ++k) sum += y.at({n, k, i});
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        auto s = ops::softmax(in[0], 1);
        return ops::sum_all(ops::mul(s, in[1]));
      },
      {x, Tensor<double>::randn({2, 4, 3}, rng)});
}

TEST_CASE("cross_entropy matches the closed form and differentiates") {
  Rng rng(28);
  auto logits = Tensor<double>::randn({4, 3}, rng);
  std::vector<int64_t> labels = {0, 2, 1, 2};
  auto loss = ops::cross_entropy(logits, labels);
  double want = 0;
  for (int64_t m = 0; m < 4; ++m) {
    std::vector<double> row(3);
    for (int64_t j = 0; j < 3; ++j) row[j] = logits.at({m, j});
    auto p = o::softmax_row(row);
    want -= std::log(p[labels[m]]);
  }
  CHECK(loss.value() == doctest::Approx(want / 4).epsilon(1e-12));
  check_grads(
      [&labels](const std::vector<Tensor<double>>& in, Tape<double>*) {
        return ops::cross_entropy(in[0], labels);
      },
      {logits});
  CHECK_THROWS_AS(ops::cross_entropy(logits, {0, 1, 2, 3}), Error);
}

// ---------- elementwise / reductions / shape ----------

TEST_CASE("relu clamps and passes gradient only where positive") {
  auto x = Tensor<double>::from_data({4}, {-2.0, -0.5, 0.0, 3.0});
  Tape<double> tape;
  tape.watch(x);
  auto loss = ops::sum_all(ops::relu(x));
  tape.backward(loss);
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);
  CHECK(x.grad()[2] == 0.0);  // gradient at the kink is defined as 0
  CHECK(x.grad()[3] == 1.0);
}

TEST_CASE("gelu matches the erf closed form and differentiates") {
  Rng rng(29);
  auto x = Tensor<double>::randn({10}, rng);
  auto y = ops::gelu(x);
  for (int64_t i = 0; i < 10; ++i) {
    double v = x.at({i});
    double want = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    CHECK(y.at({i}) == doctest::Approx(want).epsilon(1e-12));
  }
  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        auto g = ops::gelu(in[0]);
        return ops::sum_all(ops::mul(g, g));
      },
      {x});
}

TEST_CASE("broadcast add/mul follow numpy alignment") {
  auto a = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor<double>::from_data({3}, {10, 20, 30});
  auto s = ops::add(a, b);
  CHECK(s.at({0, 0}) == 11.0);
  CHECK(s.at({1, 2}) == 36.0);
  auto c = Tensor<double>::from_data({2, 1}, {2, 3});
  auto m = ops::mul(a, c);
  CHECK(m.at({0, 2}) == 6.0);
  CHECK(m.at({1, 0}) == 12.0);
  // Middle-axis broadcast.
  auto d = Tensor<double>::from_data({2, 1, 2}, {1, 2, 3, 4});
  auto e = Tensor<double>::from_data({1, 3, 1}, {1, 10, 100});
  auto f = ops::mul(d, e);
  CHECK(f.shape() == Shape{2, 3, 2});
  CHECK(f.at({1, 2, 0}) == 300.0);
  CHECK_THROWS_AS(ops::add(Tensor<double>::zeros({2, 3}),
                           Tensor<double>::zeros({2, 2})),
                  Error);
  Rng rng(30);
  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        auto y = ops::mul(ops::add(in[0], in[1]), in[2]);
        return ops::sum_all(ops::mul(y, y));
      },
      {Tensor<double>::randn({2, 3, 4}, rng),
       Tensor<double>::randn({3, 1}, rng), Tensor<double>::randn({4}, rng)});
}

TEST_CASE("max_over_axis takes the first maximal index on ties") {
  auto x = Tensor<double>::from_data({2, 3}, {5, 5, 1, 0, 7, 7});
  auto r = ops::max_over_axis(x, 1);
  CHECK(r.values.shape() == Shape{2});
  CHECK(r.values.at({0}) == 5.0);
  CHECK(r.values.at({1}) == 7.0);
  CHECK(r.argmax[0] == 0);
  CHECK(r.argmax[1] == 1);
  // Gradient flows only to the first maximal element.
  Tape<double> tape;
  tape.watch(x);
  auto mr = ops::max_over_axis(x, 1);
  tape.backward(ops::sum_all(mr.values));
  CHECK(x.grad() == std::vector<double>{1, 0, 0, 0, 1, 0});
}

TEST_CASE("max/mean reductions over a middle axis with gradients") {
  Rng rng(31);
  auto x = Tensor<double>::randn({2, 4, 3}, rng);
  auto mx = ops::max_over_axis(x, 1);
  auto mn = ops::mean_over_axis(x, 1);
  CHECK(mx.values.shape() == Shape{2, 3});
  CHECK(mn.shape() == Shape{2, 3});
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t i = 0; i < 3; ++i) {
      double best = -1e30, sum = 0;
      for (int64_t k = 0; k < 4; ++k) {
        best = std::max(best, x.at({n, k, i}));
        sum += x.at({n, k, i});
      }
      CHECK(mx.values.at({n, i}) == doctest::Approx(best));
      CHECK(mn.at({n, i}) == doctest::Approx(sum / 4));
    }
  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        auto m = ops::max_over_axis(in[0], 1);
        auto a = ops::mean_over_axis(in[0], 2);
        return ops::add(ops::sum_all(ops::mul(m.values, m.values)),
                        ops::sum_all(ops::mul(a, a)));
      },
      {x});
}

TEST_CASE("reshape shares storage, infers -1, differentiates") {
  auto x = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto y = ops::reshape(x, {3, -1});
  CHECK(y.shape() == Shape{3, 2});
  CHECK(y.impl->storage == x.impl->storage);
  CHECK_THROWS_AS(ops::reshape(x, {4, 2}), Error);
  Rng rng(32);
  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        auto r = ops::reshape(in[0], {6});
        return ops::sum_all(ops::mul(r, r));
      },
      {Tensor<double>::randn({2, 3}, rng)});
}

TEST_CASE("permute moves axes and differentiates") {
  auto x = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto y = ops::permute(x, {1, 0});
  CHECK(y.shape() == Shape{3, 2});
  CHECK(y.at({2, 1}) == 6.0);
  Rng rng(33);
  auto big = Tensor<double>::randn({2, 3, 4, 5}, rng);
  auto p = ops::permute(big, {2, 0, 3, 1});
  CHECK(p.shape() == Shape{4, 2, 5, 3});
  for (int64_t a = 0; a < 4; ++a)
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t c = 0; c < 5; ++c)
        for (int64_t d = 0; d < 3; ++d)
          CHECK(p.at({a, b, c, d}) == big.at({b, d, a, c}));
  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        auto t = ops::permute(in[0], {2, 0, 1});
        return ops::sum_all(ops::mul(t, t));
      },
      {Tensor<double>::randn({2, 3, 4}, rng)});
}

TEST_CASE("slice/stack/index_select round-trip with gradients") {
  Rng rng(34);
  auto x = Tensor<double>::randn({2, 5, 3}, rng);
  auto s = ops::slice(x, 1, 1, 2);
  CHECK(s.shape() == Shape{2, 2, 3});
  CHECK(s.at({1, 0, 2}) == x.at({1, 1, 2}));
  CHECK_THROWS_AS(ops::slice(x, 1, 4, 2), Error);

  auto a = Tensor<double>::randn({2, 3}, rng);
  auto b = Tensor<double>::randn({2, 3}, rng);
  auto st = ops::stack<double>({a, b}, 1);
  CHECK(st.shape() == Shape{2, 2, 3});
  CHECK(st.at({0, 0, 1}) == a.at({0, 1}));
  CHECK(st.at({0, 1, 1}) == b.at({0, 1}));

  auto table = Tensor<double>::randn({4, 3}, rng);
  auto sel = ops::index_select(table, {2, 0, 2});
  CHECK(sel.shape() == Shape{3, 3});
  CHECK(sel.at({0, 1}) == table.at({2, 1}));
  CHECK(sel.at({2, 1}) == table.at({2, 1}));

  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        auto sl = ops::slice(in[0], 1, 1, 2);
        auto k = ops::stack<double>({sl, sl}, 0);
        auto g = ops::index_select(in[1], {1, 1, 0});
        return ops::add(ops::sum_all(ops::mul(k, k)),
                        ops::sum_all(ops::mul(g, g)));
      },
      {x, table});
}

// ---------- resize / drop_path ----------

TEST_CASE("bilinear_resize identity and averaging behavior") {
  Rng rng(35);
  auto x = Tensor<double>::randn({1, 2, 4, 6}, rng);
  auto same = ops::bilinear_resize(x, 4, 6);
  CHECK(o::max_abs_diff(same, x) < 1e-12);
  auto flat = Tensor<double>::full({1, 1, 5, 7}, 3.25);
  auto up = ops::bilinear_resize(flat, 9, 13);
  for (int64_t i = 0; i < up.numel(); ++i)
    CHECK(up.data()[i] == doctest::Approx(3.25).epsilon(1e-12));
  // Exact 2x downsample of a 2x2-blocked image averages each block.
  auto blk = Tensor<double>::from_data({1, 1, 2, 2}, {1.0, 3.0, 5.0, 7.0});
  auto down = ops::bilinear_resize(blk, 1, 1);
  CHECK(down.at({0, 0, 0, 0}) == doctest::Approx(4.0));
  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        auto y = ops::bilinear_resize(in[0], 3, 4);
        return ops::sum_all(ops::mul(y, y));
      },
      {x});
}

TEST_CASE("drop_path identity in eval or at rate 0; scaling in train") {
  Rng rng(36);
  auto x = Tensor<double>::randn({64, 3}, rng);
  Rng r1(1);
  auto y_eval = ops::drop_path(x, 0.5, Mode::Eval, &r1);
  CHECK(y_eval.impl == x.impl);
  auto y0 = ops::drop_path(x, 0.0, Mode::Train, &r1);
  CHECK(y0.impl == x.impl);
  CHECK_THROWS_AS(ops::drop_path(x, 1.0, Mode::Train, &r1), Error);

  // Train: each sample row is either zero or x/(1-rate).
  Rng r2(2);
  auto y = ops::drop_path(x, 0.25, Mode::Train, &r2);
  int64_t dropped = 0;
  for (int64_t n = 0; n < 64; ++n) {
    bool zero = true;
    for (int64_t j = 0; j < 3; ++j)
      if (y.at({n, j}) != 0.0) zero = false;
    if (zero) {
      ++dropped;
    } else {
      for (int64_t j = 0; j < 3; ++j)
        CHECK(y.at({n, j}) == doctest::Approx(x.at({n, j}) / 0.75));
    }
  }
  CHECK(dropped > 2);
  CHECK(dropped < 40);
  // Deterministic given the seed: replaying yields the same mask.
  Rng r3(2);
  auto y2 = ops::drop_path(x, 0.25, Mode::Train, &r3);
  CHECK(o::max_abs_diff(y, y2) == 0.0);
  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        Rng r(5);
        auto y3 = ops::drop_path(in[0], 0.5, Mode::Train, &r);
        return ops::sum_all(ops::mul(y3, y3));
      },
      {Tensor<double>::randn({8, 3}, rng)});
}

// ---------- gradcheck plumbing ----------

TEST_CASE("grad_check rejects out-of-range epsilon and non-scalar losses") {
  auto x = Tensor<double>::from_data({2}, {1.0, 2.0});
  GradCheckOptions opts;
  opts.epsilon = 1e-2;
  CHECK_THROWS_AS(
      grad_check([](const std::vector<Tensor<double>>& in,
                    Tape<double>*) { return ops::sum_all(in[0]); },
                 {x}, opts),
      Error);
  CHECK_THROWS_AS(
      grad_check([](const std::vector<Tensor<double>>& in,
                    Tape<double>*) { return ops::mul_scalar(in[0], 2.0); },
                 {x}),
      Error);
}

TEST_CASE("grad_check flags a wrong gradient") {
  // relu gradient probed exactly at the kink with a shifted input: the
  // analytic convention (0 at 0) disagrees with the secant through ±eps.
  auto x = Tensor<double>::from_data({1}, {0.0});
  GradCheckOptions opts;
  opts.tolerance = 0.4;
  auto rep = grad_check(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        return ops::sum_all(ops::relu(in[0]));
      },
      {x}, opts);
  CHECK(!rep.pass);
  // analytic 0 vs secant 0.5: |0 - 0.5| / max(0, 0.5) = 1.
  CHECK(rep.max_relative_error == doctest::Approx(1.0));
}
