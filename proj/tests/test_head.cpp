#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "gaitforge/backbone.hpp"
#include "gaitforge/gradcheck.hpp"
#include "gaitforge/head.hpp"
#include "gaitforge/ops.hpp"
#include "gaitforge/tensor.hpp"
#include "oracles.hpp"

using namespace gaitforge;
using namespace gaitforge::head;
namespace o = oracles;

namespace {

GradCheckReport check_grads(const GradCheckFn& fn,
                            std::vector<Tensor<double>> inputs,
                            double tol = 1e-4, double floor = 1e-6) {
  GradCheckOptions opts;
  opts.tolerance = tol;
  opts.denom_floor = floor;
  auto rep = grad_check(fn, std::move(inputs), opts);
  INFO("max relative error = " << rep.max_relative_error);
  CHECK(rep.pass);
  return rep;
}

// Exhaustive reference: per part, enumerate every (anchor, positive,
// negative) triple, average the positive hinge terms, then average parts.
struct TripletOracle {
  double loss = 0.0;
  double count = 0.0;  // non-zero triplets per part, averaged over parts
};

TripletOracle triplet_oracle(const Tensor<double>& emb,
                             const std::vector<int64_t>& labels,
                             double margin) {
  const int64_t n = emb.dim(0), p = emb.dim(1), dim = emb.dim(2);
  auto dist = [&](int64_t a, int64_t b, int64_t part) {
    double acc = 0;
    for (int64_t k = 0; k < dim; ++k) {
      double diff = emb.at({a, part, k}) - emb.at({b, part, k});
      acc += diff * diff;
    }
    return std::sqrt(acc);
  };
  TripletOracle out;
  for (int64_t part = 0; part < p; ++part) {
    double s = 0;
    int64_t cnt = 0;
    for (int64_t a = 0; a < n; ++a)
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
          if (i == a || labels[i] != labels[a] || labels[j] == labels[a])
            continue;
          double term = dist(a, i, part) - dist(a, j, part) + margin;
          if (term > 0) {
            s += term;
            ++cnt;
          }
        }
    if (cnt > 0) out.loss += s / cnt;
    out.count += double(cnt);
  }
  out.loss /= double(p);
  out.count /= double(p);
  return out;
}

// Random batch with at least one valid triplet.
Tensor<double> random_batch(Rng& rng, int64_t n, int64_t p, int64_t dim,
                            int64_t classes, std::vector<int64_t>& labels) {
  while (true) {
    labels.clear();
    for (int64_t i = 0; i < n; ++i) labels.push_back(rng.randint(0, classes));
    bool pair = false, two = false;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < i; ++j)
        (labels[i] == labels[j] ? pair : two) = true;
    if (pair && two) break;
  }
  return Tensor<double>::randn({n, p, dim}, rng);
}

HeadConfig tiny_config(int64_t parts, int64_t cin, int64_t dim, int64_t k) {
  HeadConfig cfg;
  cfg.parts = parts;
  cfg.in_channels = cin;
  cfg.embed_dim = dim;
  cfg.num_classes = k;
  return cfg;
}

}  // namespace

// ---------- temporal pooling ----------

TEST_CASE("temporal pooling is an exact frame-permutation-invariant max") {
  Rng rng(3);
  auto x = Tensor<double>::randn({2, 5, 3, 4, 4}, rng);

  auto one = temporal_pooling(ops::slice(x, 1, 2, 1));
  CHECK(one.shape() == Shape{2, 3, 4, 4});
  CHECK(o::max_abs_diff(one, ops::reshape(ops::slice(x, 1, 2, 1),
                                          {2, 3, 4, 4})) == 0.0);

  auto y = temporal_pooling(x);
  auto xp = ops::permute(x, {1, 0, 2, 3, 4});
  xp = ops::permute(ops::index_select(xp, {4, 1, 3, 0, 2}), {1, 0, 2, 3, 4});
  CHECK(o::max_abs_diff(y, temporal_pooling(xp)) == 0.0);

  // A frame that dominates everywhere is the pooled output.
  auto big = Tensor<double>::zeros({1, 3, 2, 2, 2});
  for (int64_t t = 0; t < 3; ++t)
    for (int64_t i = 0; i < 8; ++i)
      big.at({0, t, i / 4, (i / 2) % 2, i % 2}) = double(t == 1 ? 10 + i : i);
  auto pooled = temporal_pooling(big);
  for (int64_t i = 0; i < 8; ++i)
    CHECK(pooled.at({0, i / 4, (i / 2) % 2, i % 2}) == double(10 + i));

  CHECK_THROWS_AS(temporal_pooling(Tensor<double>::zeros({1, 3, 2, 2})),
                  Error);
}

TEST_CASE("temporal pooling routes gradient to the argmax frames") {
  Rng rng(5);
  auto x = Tensor<double>::randn({2, 4, 3, 2, 2}, rng);
  auto w = Tensor<double>::randn({2, 3, 2, 2}, rng);
  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        auto y = temporal_pooling(in[0]);
        return ops::sum_all(ops::mul(y, in[1]));
      },
      {x, w});
}

// ---------- horizontal pooling ----------

TEST_CASE("horizontal pooling strips, pools, and validates divisibility") {
  Rng rng(7);
  auto x = Tensor<double>::randn({2, 5, 16, 3}, rng);

  auto y = horizontal_pooling(x, 16);
  CHECK(y.shape() == Shape{2, 16, 5});
  // P = H: each part pools one row by max + mean.
  for (int64_t c = 0; c < 5; ++c)
    for (int64_t p = 0; p < 16; ++p) {
      double mx = -1e30, mn = 0;
      for (int64_t w = 0; w < 3; ++w) {
        mx = std::max(mx, x.at({1, c, p, w}));
        mn += x.at({1, c, p, w}) / 3.0;
      }
      CHECK(y.at({1, p, c}) == doctest::Approx(mx + mn).epsilon(1e-12));
    }

  // Constant map: max + mean gives 2v, max-only gives v.
  auto cst = ops::add_scalar(Tensor<double>::zeros({1, 2, 8, 4}), 1.5);
  auto both = horizontal_pooling(cst, 4);
  auto mx_only = horizontal_pooling(cst, 4, HpMode::MaxOnly);
  CHECK(both.at({0, 0, 0}) == doctest::Approx(3.0));
  CHECK(mx_only.at({0, 3, 1}) == doctest::Approx(1.5));

  // P = 1 is global pooling.
  auto global = horizontal_pooling(x, 1, HpMode::MaxOnly);
  CHECK(global.shape() == Shape{2, 1, 5});
  double best = -1e30;
  for (int64_t h = 0; h < 16; ++h)
    for (int64_t w = 0; w < 3; ++w) best = std::max(best, x.at({0, 2, h, w}));
  CHECK(global.at({0, 0, 2}) == best);

  CHECK_THROWS_AS(horizontal_pooling(x, 5), Error);
}

TEST_CASE("horizontal pooling gradcheck") {
  Rng rng(8);
  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        auto y = horizontal_pooling(in[0], 4);
        return ops::sum_all(ops::mul(y, in[1]));
      },
      {Tensor<double>::randn({2, 3, 8, 3}, rng),
       Tensor<double>::randn({2, 4, 3}, rng)});
}

// ---------- head forward ----------

TEST_CASE("head_forward shapes, naming, and identity-FC behaviour") {
  auto cfg = tiny_config(2, 4, 4, 3);
  Rng rng(9);
  auto h = init_head<double>(cfg, rng);
  CHECK(h.params.has("head.fc.0"));
  CHECK(h.params.has("head.bn.1.scale"));
  CHECK(h.params.has("head.cls.1"));
  CHECK(h.state.has("head.bn.0.running_var"));
  CHECK(int64_t(h.fc.size()) == 2);

  // Identity FC: embeddings reproduce the part vectors exactly.
  for (auto& w : h.fc)
    for (int64_t i = 0; i < 4; ++i)
      for (int64_t j = 0; j < 4; ++j) w.at({i, j}) = (i == j) ? 1.0 : 0.0;
  auto parts = Tensor<double>::randn({3, 2, 4}, rng);
  nn::Ctx<double> ctx;
  auto out = head_forward(h, parts, ctx);
  CHECK(out.embeddings.shape() == Shape{3, 2, 4});
  CHECK(out.logits.shape() == Shape{3, 2, 3});
  CHECK(o::max_abs_diff(out.embeddings, parts) == 0.0);

  auto bad = Tensor<double>::randn({3, 5, 4}, rng);
  CHECK_THROWS_AS(head_forward(h, bad, ctx), Error);
}

TEST_CASE("parts stay separated through the head") {
  auto cfg = tiny_config(4, 3, 5, 6);
  Rng rng(10);
  auto h = init_head<double>(cfg, rng);
  auto a = Tensor<double>::randn({2, 4, 3}, rng);
  auto b = a.clone();
  for (int64_t k = 0; k < 3; ++k) b.at({0, 2, k}) += 0.75;  // bump part 2 only

  nn::Ctx<double> ctx;  // eval: BN uses running stats, keeps rows independent
  auto ya = head_forward(h, a, ctx);
  auto yb = head_forward(h, b, ctx);
  for (int64_t p = 0; p < 4; ++p) {
    double demb = 0, dlog = 0;
    for (int64_t n = 0; n < 2; ++n) {
      for (int64_t k = 0; k < 5; ++k)
        demb = std::max(demb, std::abs(ya.embeddings.at({n, p, k}) -
                                       yb.embeddings.at({n, p, k})));
      for (int64_t k = 0; k < 6; ++k)
        dlog = std::max(dlog, std::abs(ya.logits.at({n, p, k}) -
                                       yb.logits.at({n, p, k})));
    }
    if (p == 2) {
      CHECK(demb > 1e-3);
      CHECK(dlog > 1e-6);
    } else {
      CHECK(demb == 0.0);
      CHECK(dlog == 0.0);
    }
  }
}

TEST_CASE("combined-loss gradient reaches FC_i only through part i") {
  auto cfg = tiny_config(3, 3, 4, 2);
  Rng rng(11);
  auto h = init_head<double>(cfg, rng);
  std::vector<int64_t> labels{0, 0, 1, 1};
  auto x1 = Tensor<double>::randn({4, 3, 3}, rng);
  auto x2 = x1.clone();
  // Perturb part 1 of one sample only. (A batch-uniform shift would sit in
  // the loss kernel: distances and batch-normalized logits both ignore it.)
  for (int64_t k = 0; k < 3; ++k) x2.at({0, 1, k}) += 0.4;

  auto fc_grads = [&](const Tensor<double>& x) {
    Tape<double> tape;
    for (auto& w : h.fc) tape.watch(w);
    nn::Ctx<double> ctx;
    ctx.tape = &tape;
    ctx.mode = Mode::Train;
    auto out = head_forward(h, x, ctx);
    auto loss =
        combined_loss(out.embeddings, out.logits, labels, cfg.triplet_margin);
    tape.backward(loss.loss);
    std::vector<std::vector<double>> g;
    for (auto& w : h.fc) g.push_back(w.grad());
    return g;
  };
  auto g1 = fc_grads(x1);
  auto g2 = fc_grads(x2);
  auto linf = [](const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i)
      m = std::max(m, std::abs(a[i] - b[i]));
    return m;
  };
  CHECK(linf(g1[0], g2[0]) == 0.0);  // untouched parts: identical gradients
  CHECK(linf(g1[2], g2[2]) == 0.0);
  CHECK(linf(g1[1], g2[1]) > 1e-6);  // the bumped part's FC feels it
}

// ---------- triplet loss ----------

TEST_CASE("triplet loss analytic cases") {
  // a = p and d(a,n) = 0: every active term equals the margin.
  auto emb = Tensor<double>::zeros({3, 1, 2});
  std::vector<int64_t> labels{0, 0, 1};
  auto out = triplet_loss(emb, labels, 0.2);
  CHECK(out.loss.at({}) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(out.nonzero_count == doctest::Approx(2.0));

  // Tight positives, far negatives: zero loss, zero count.
  auto easy = Tensor<double>::zeros({4, 2, 3});
  for (int64_t n = 2; n < 4; ++n)
    for (int64_t p = 0; p < 2; ++p) easy.at({n, p, 0}) = 10.0;
  std::vector<int64_t> lab2{0, 0, 1, 1};
  auto out2 = triplet_loss(easy, lab2, 0.2);
  CHECK(out2.loss.at({}) == 0.0);
  CHECK(out2.nonzero_count == 0.0);

  // Degenerate batches carry no valid triplet.
  CHECK_THROWS_AS(triplet_loss(easy, {0, 0, 0, 0}, 0.2), Error);
  CHECK_THROWS_AS(triplet_loss(easy, {0, 1, 2, 3}, 0.2), Error);
}

TEST_CASE("triplet loss equals the exhaustive oracle on 100 random batches") {
  Rng rng(12);
  for (int rep = 0; rep < 100; ++rep) {
    int64_t n = 4 + rng.randint(0, 9);              // 4..12
    int64_t p = int64_t(1) << rng.randint(0, 3);    // 1, 2, 4
    int64_t dim = rep % 2 ? 2 : 8;
    double margin = rep % 3 ? 0.2 : 0.5;
    std::vector<int64_t> labels;
    auto emb = random_batch(rng, n, p, dim, 3, labels);
    auto got = triplet_loss(emb, labels, margin);
    auto want = triplet_oracle(emb, labels, margin);
    INFO("rep " << rep << " n=" << n << " p=" << p);
    CHECK(std::abs(got.loss.at({}) - want.loss) <= 1e-6);
    CHECK(got.nonzero_count == doctest::Approx(want.count).epsilon(1e-12));
  }
}

TEST_CASE("triplet zero/non-zero pattern scales and is margin-monotone") {
  Rng rng(13);
  std::vector<int64_t> labels;
  auto emb = random_batch(rng, 8, 2, 4, 3, labels);

  auto base = triplet_loss(emb, labels, 0.0);
  auto scaled = triplet_loss(ops::mul_scalar(emb, 2.5), labels, 0.0);
  CHECK(base.nonzero_count == scaled.nonzero_count);

  auto m02 = triplet_loss(emb, labels, 0.2);
  CHECK(base.nonzero_count <= m02.nonzero_count);
}

TEST_CASE("triplet loss gradcheck") {
  Rng rng(14);
  std::vector<int64_t> labels;
  auto emb = random_batch(rng, 5, 2, 3, 2, labels);
  // Keep every hinge term clear of its kink so central differences see a
  // smooth function.
  auto probe = triplet_loss(emb, labels, 0.2);
  REQUIRE(probe.nonzero_count > 0);
  check_grads(
      [&](const std::vector<Tensor<double>>& in, Tape<double>*) {
        return triplet_loss(in[0], labels, 0.2).loss;
      },
      {emb});
}

// ---------- cross entropy over parts ----------

TEST_CASE("part-averaged cross entropy") {
  // Uniform logits: ln K for every row, hence ln K overall.
  auto uni = Tensor<double>::zeros({2, 3, 5});
  auto l = cross_entropy_parts(uni, {1, 4});
  CHECK(l.at({}) == doctest::Approx(std::log(5.0)).epsilon(1e-12));

  // A huge aligned logit drives the loss to zero.
  auto sharp = Tensor<double>::zeros({1, 2, 4});
  sharp.at({0, 0, 3}) = 50.0;
  sharp.at({0, 1, 3}) = 50.0;
  CHECK(cross_entropy_parts(sharp, {3}).at({}) ==
        doctest::Approx(0.0).epsilon(1e-12));

  CHECK_THROWS_AS(cross_entropy_parts(sharp, {4}), Error);
  CHECK_THROWS_AS(cross_entropy_parts(sharp, {-1}), Error);

  Rng rng(15);
  check_grads(
      [](const std::vector<Tensor<double>>& in, Tape<double>*) {
        return cross_entropy_parts(in[0], {2, 0, 1});
      },
      {Tensor<double>::randn({3, 2, 4}, rng)});
}

// ---------- combined loss ----------

TEST_CASE("combined loss is exactly triplet plus cross entropy") {
  Rng rng(16);
  std::vector<int64_t> labels;
  auto emb = random_batch(rng, 6, 2, 4, 3, labels);
  auto logits = Tensor<double>::randn({6, 2, 3}, rng);
  auto comb = combined_loss(emb, logits, labels, 0.2);
  auto tri = triplet_loss(emb, labels, 0.2);
  auto ce = cross_entropy_parts(logits, labels);
  CHECK(comb.loss.at({}) ==
        doctest::Approx(tri.loss.at({}) + ce.at({})).epsilon(1e-15));
  CHECK(comb.l_tri.at({}) == tri.loss.at({}));
  CHECK(comb.l_ce.at({}) == ce.at({}));
  CHECK(comb.nonzero_count == tri.nonzero_count);
}

TEST_CASE("combined loss gradcheck through the full head") {
  auto cfg = tiny_config(2, 3, 4, 2);
  Rng rng(17);
  auto h = init_head<double>(cfg, rng);
  std::vector<int64_t> labels{0, 0, 1, 1};
  auto parts = Tensor<double>::randn({4, 2, 3}, rng);

  std::vector<Tensor<double>> inputs{parts};
  for (const auto& [name, t] : h.params.entries()) inputs.push_back(t);

  check_grads(
      [&](const std::vector<Tensor<double>>& in, Tape<double>*tape) {
        Head<double> hh = h;
        size_t at = 1;
        for (int64_t i = 0; i < cfg.parts; ++i) {
          hh.fc[size_t(i)] = in[at++];
          hh.bn[size_t(i)].scale = in[at++];
          hh.bn[size_t(i)].shift = in[at++];
          // Fresh running stats: probes must not leak into each other.
          hh.bn[size_t(i)].running_mean = Tensor<double>::zeros({cfg.embed_dim});
          hh.bn[size_t(i)].running_var =
              Tensor<double>::ones({cfg.embed_dim});
          hh.cls[size_t(i)] = in[at++];
        }
        nn::Ctx<double> ctx;
        ctx.tape = tape;
        ctx.mode = Mode::Train;
        auto out = head_forward(hh, in[0], ctx);
        return combined_loss(out.embeddings, out.logits, labels, 0.2).loss;
      },
      inputs);
}

// ---------- pipeline permutation property ----------

TEST_CASE("2D backbone + head embeddings ignore frame order; P3D does not") {
  using namespace gaitforge::backbone;
  Rng rng(18);
  const int64_t t = 5;
  std::vector<int64_t> perm{2, 4, 0, 3, 1};
  auto x = Tensor<float>::uniform({2, t, 1, 64, 44}, rng, 0.0, 1.0);
  auto xp = ops::permute(
      ops::index_select(ops::permute(x, {1, 0, 2, 3, 4}), perm),
      {1, 0, 2, 3, 4});

  auto embed = [&](Family f, const Tensor<float>& inp, Rng& r) {
    BackboneConfig cfg;
    cfg.family = f;
    cfg.base_channels = 16;
    cfg.block_counts = {1, 1, 1, 1};
    auto m = build_backbone<float>(cfg, r);
    auto cfg_head = tiny_config(cfg.parts(), 8 * cfg.base_channels, 16, 3);
    Rng hr(99);
    auto hd = init_head<float>(cfg_head, hr);
    auto y = backbone::forward(m, inp, Mode::Eval, nullptr);
    if (is_swin(f)) y = tokens_to_map(y);
    auto pooled = horizontal_pooling(temporal_pooling(y), cfg.parts());
    nn::Ctx<float> ctx;
    return head_forward(hd, pooled, ctx).embeddings;
  };

  {
    Rng r(30);
    Rng r2(30);
    auto e1 = embed(Family::DeepGait2D, x, r);
    auto e2 = embed(Family::DeepGait2D, xp, r2);
    CHECK(o::max_abs_diff(e1, e2) <= 1e-5);
  }
  {
    Rng r(31);
    Rng r2(31);
    auto e1 = embed(Family::DeepGaitP3D, x, r);
    auto e2 = embed(Family::DeepGaitP3D, xp, r2);
    CHECK(o::max_abs_diff(e1, e2) > 1e-3);
  }
}
