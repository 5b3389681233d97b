#include "gaitforge/head.hpp"

#include <algorithm>
#include <cmath>

#include "gaitforge/ops.hpp"

namespace gaitforge::head {

using namespace ops;
using nn::fan_in_normal;
using nn::init_batch_norm;

const char* hp_mode_name(HpMode mode) {
  return mode == HpMode::MaxPlusMean ? "max+mean" : "max";
}

HpMode hp_mode_from_string(const std::string& name) {
  if (name == "max+mean") return HpMode::MaxPlusMean;
  if (name == "max") return HpMode::MaxOnly;
  throw Error("unknown horizontal pooling mode: " + name);
}

void validate_head_config(const HeadConfig& cfg) {
  check(cfg.parts >= 1, "head needs at least one part");
  check(cfg.in_channels >= 1, "head input width must be positive");
  check(cfg.embed_dim >= 1, "embedding width must be positive");
  check(cfg.num_classes >= 2, "head needs at least two classes");
  check(cfg.triplet_margin > 0.0, "triplet margin must be positive");
}

template <typename S>
Head<S> init_head(const HeadConfig& cfg, Rng& rng) {
  validate_head_config(cfg);
  Head<S> h;
  h.config = cfg;
  for (int64_t i = 0; i < cfg.parts; ++i) {
    const std::string idx = std::to_string(i);
    h.fc.push_back(h.params.add(
        "head.fc." + idx,
        fan_in_normal<S>({cfg.embed_dim, cfg.in_channels}, 1.0, rng)));
    BatchNormParams<S> bn = init_batch_norm<S>(cfg.embed_dim);
    h.params.add("head.bn." + idx + ".scale", bn.scale);
    h.params.add("head.bn." + idx + ".shift", bn.shift);
    h.state.add("head.bn." + idx + ".running_mean", bn.running_mean);
    h.state.add("head.bn." + idx + ".running_var", bn.running_var);
    h.bn.push_back(bn);
    h.cls.push_back(h.params.add(
        "head.cls." + idx,
        fan_in_normal<S>({cfg.num_classes, cfg.embed_dim}, 1.0, rng)));
  }
  return h;
}

template <typename S>
Tensor<S> temporal_pooling(const Tensor<S>& x) {
  check(x.rank() == 5, "temporal_pooling expects [N, T, C, H, W]");
  check(x.dim(1) >= 1, "temporal_pooling needs at least one frame");
  return max_over_axis(x, 1).values;
}

template <typename S>
Tensor<S> tokens_to_map(const Tensor<S>& tokens) {
  check(tokens.rank() == 5, "tokens_to_map expects [N, T, Ht, Wt, D]");
  return permute(tokens, {0, 1, 4, 2, 3});
}

template <typename S>
Tensor<S> horizontal_pooling(const Tensor<S>& x, int64_t parts, HpMode mode) {
  check(x.rank() == 4, "horizontal_pooling expects [N, C, H, W]");
  check(parts >= 1, "horizontal_pooling needs at least one part");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  check(h % parts == 0, "feature height is not divisible by the part count");
  Tensor<S> strips = reshape(x, {n, c, parts, (h / parts) * w});
  Tensor<S> pooled = max_over_axis(strips, 3).values;  // [N, C, P]
  if (mode == HpMode::MaxPlusMean)
    pooled = add(pooled, mean_over_axis(strips, 3));
  return permute(pooled, {0, 2, 1});  // [N, P, C]
}

namespace {

template <typename S>
Tensor<S> apply_bn(const Tensor<S>& x, const BatchNormParams<S>& p,
                   Ctx<S>& c) {
  auto& mp = const_cast<BatchNormParams<S>&>(p);
  return batch_norm(x, p.scale, p.shift, mp.running_mean, mp.running_var,
                    c.mode);
}

}  // namespace

template <typename S>
HeadOut<S> head_forward(const Head<S>& head, const Tensor<S>& parts,
                        Ctx<S>& ctx) {
  const HeadConfig& cfg = head.config;
  check(parts.rank() == 3, "head_forward expects [N, P, C] part vectors");
  check(parts.dim(1) == cfg.parts, "part count does not match head");
  check(parts.dim(2) == cfg.in_channels, "part width does not match head");
  const int64_t n = parts.dim(0);

  // Per-part FC as one batched matmul over stacked weights.
  Tensor<S> w = stack(head.fc, 0);                    // [P, dim, 8C]
  Tensor<S> xp = permute(parts, {1, 0, 2});           // [P, N, 8C]
  Tensor<S> emb = matmul(xp, w, false, true);         // [P, N, dim]

  // BNNeck + bias-free classifier stay strictly per part.
  std::vector<Tensor<S>> logits_parts;
  logits_parts.reserve(cfg.parts);
  for (int64_t i = 0; i < cfg.parts; ++i) {
    Tensor<S> ei = reshape(slice(emb, 0, i, 1), {n, cfg.embed_dim});
    Tensor<S> bi = apply_bn(ei, head.bn[static_cast<size_t>(i)], ctx);
    logits_parts.push_back(
        matmul(bi, head.cls[static_cast<size_t>(i)], false, true));
  }
  HeadOut<S> out;
  out.embeddings = permute(emb, {1, 0, 2});                       // [N, P, dim]
  out.logits = permute(stack(logits_parts, 0), {1, 0, 2});        // [N, P, K]
  return out;
}

namespace {

// Pairwise Euclidean distances for one part: d[i*n+j] = ||e_i - e_j||.
template <typename S>
void part_distances(const S* e, int64_t n, int64_t p_total, int64_t part,
                    int64_t dim, std::vector<double>& d) {
  d.assign(static_cast<size_t>(n) * n, 0.0);
  for (int64_t i = 0; i < n; ++i) {
    const S* ei = e + (i * p_total + part) * dim;
    for (int64_t j = i + 1; j < n; ++j) {
      const S* ej = e + (j * p_total + part) * dim;
      double acc = 0;
      for (int64_t k = 0; k < dim; ++k) {
        double diff = static_cast<double>(ei[k]) - static_cast<double>(ej[k]);
        acc += diff * diff;
      }
      double dist = std::sqrt(acc);
      d[static_cast<size_t>(i) * n + j] = dist;
      d[static_cast<size_t>(j) * n + i] = dist;
    }
  }
}

}  // namespace

template <typename S>
TripletOut<S> triplet_loss(const Tensor<S>& emb,
                           const std::vector<int64_t>& labels, double margin) {
  check(emb.rank() == 3, "triplet_loss expects [N, P, dim] embeddings");
  const int64_t n = emb.dim(0), p = emb.dim(1), dim = emb.dim(2);
  check(static_cast<int64_t>(labels.size()) == n,
        "label count does not match the batch");
  check(margin >= 0.0, "margin must be non-negative");
  bool same_pair = false, two_classes = false;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < i; ++j)
      (labels[i] == labels[j] ? same_pair : two_classes) = true;
  check(same_pair && two_classes, "batch contains no valid triplet");

  const S* e = emb.data();
  std::vector<double> d;
  double loss_acc = 0.0, count_acc = 0.0;
  for (int64_t part = 0; part < p; ++part) {
    part_distances(e, n, p, part, dim, d);
    double s = 0.0;
    int64_t cnt = 0;
    for (int64_t a = 0; a < n; ++a)
      for (int64_t i = 0; i < n; ++i) {
        if (i == a || labels[i] != labels[a]) continue;
        const double dap = d[static_cast<size_t>(a) * n + i];
        for (int64_t j = 0; j < n; ++j) {
          if (labels[j] == labels[a]) continue;
          double term = dap - d[static_cast<size_t>(a) * n + j] + margin;
          if (term > 0.0) {
            s += term;
            ++cnt;
          }
        }
      }
    if (cnt > 0) loss_acc += s / static_cast<double>(cnt);
    count_acc += static_cast<double>(cnt);
  }

  TripletOut<S> out;
  out.loss = Tensor<S>::scalar(static_cast<S>(loss_acc / p));
  out.nonzero_count = count_acc / static_cast<double>(p);

  if (Tape<S>* tape = tape_of<S>({&emb})) {
    tape->record({emb}, out.loss,
                 [emb, labels, margin, n, p, dim](const std::vector<S>& g) {
      if (!grad_enabled(emb)) return;
      auto& ge = const_cast<Tensor<S>&>(emb).mutable_grad();
      const S* e2 = emb.data();
      const double g0 = static_cast<double>(g[0]);
      std::vector<double> d2;
      auto vec = [&](int64_t i, int64_t part) {
        return e2 + (i * p + part) * dim;
      };
      for (int64_t part = 0; part < p; ++part) {
        part_distances(e2, n, p, part, dim, d2);
        // First pass: the per-part active count fixes the triplet weight.
        int64_t cnt = 0;
        for (int64_t a = 0; a < n; ++a)
          for (int64_t i = 0; i < n; ++i) {
            if (i == a || labels[i] != labels[a]) continue;
            for (int64_t j = 0; j < n; ++j)
              if (labels[j] != labels[a] &&
                  d2[static_cast<size_t>(a) * n + i] -
                          d2[static_cast<size_t>(a) * n + j] + margin >
                      0.0)
                ++cnt;
          }
        if (cnt == 0) continue;
        const double wgt = g0 / (static_cast<double>(p) * cnt);
        auto push = [&](int64_t from, int64_t to, int64_t at, double scale) {
          // scale * (e_from - e_to) / d accumulated into grad of row `at`.
          const double dist =
              std::max(d2[static_cast<size_t>(from) * n + to], 1e-12);
          const S* ef = vec(from, part);
          const S* et = vec(to, part);
          S* gr = ge.data() + (at * p + part) * dim;
          const double c = scale / dist;
          for (int64_t k = 0; k < dim; ++k)
            gr[k] += static_cast<S>(
                c * (static_cast<double>(ef[k]) - static_cast<double>(et[k])));
        };
        for (int64_t a = 0; a < n; ++a)
          for (int64_t i = 0; i < n; ++i) {
            if (i == a || labels[i] != labels[a]) continue;
            const double dap = d2[static_cast<size_t>(a) * n + i];
            for (int64_t j = 0; j < n; ++j) {
              if (labels[j] == labels[a]) continue;
              if (dap - d2[static_cast<size_t>(a) * n + j] + margin <= 0.0)
                continue;
              push(a, i, a, wgt);   // d(a,p) pulls anchor toward positive
              push(a, i, i, -wgt);
              push(a, j, a, -wgt);  // d(a,n) pushes anchor from negative
              push(a, j, j, wgt);
            }
          }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> cross_entropy_parts(const Tensor<S>& logits,
                              const std::vector<int64_t>& labels) {
  check(logits.rank() == 3, "cross_entropy_parts expects [N, P, K] logits");
  const int64_t n = logits.dim(0), p = logits.dim(1);
  check(static_cast<int64_t>(labels.size()) == n,
        "label count does not match the batch");
  std::vector<int64_t> expanded(static_cast<size_t>(n) * p);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < p; ++j)
      expanded[static_cast<size_t>(i) * p + j] = labels[i];
  return cross_entropy(reshape(logits, {n * p, logits.dim(2)}), expanded);
}

template <typename S>
CombinedOut<S> combined_loss(const Tensor<S>& embeddings,
                             const Tensor<S>& logits,
                             const std::vector<int64_t>& labels,
                             double margin) {
  CombinedOut<S> out;
  TripletOut<S> tri = triplet_loss(embeddings, labels, margin);
  out.l_tri = tri.loss;
  out.nonzero_count = tri.nonzero_count;
  out.l_ce = cross_entropy_parts(logits, labels);
  out.loss = add(out.l_tri, out.l_ce);
  return out;
}

#define GAITFORGE_INSTANTIATE_HEAD(S)                                         \
  template Head<S> init_head<S>(const HeadConfig&, Rng&);                     \
  template Tensor<S> temporal_pooling<S>(const Tensor<S>&);                   \
  template Tensor<S> tokens_to_map<S>(const Tensor<S>&);                      \
  template Tensor<S> horizontal_pooling<S>(const Tensor<S>&, int64_t,         \
                                           HpMode);                           \
  template HeadOut<S> head_forward<S>(const Head<S>&, const Tensor<S>&,       \
                                      Ctx<S>&);                               \
  template TripletOut<S> triplet_loss<S>(const Tensor<S>&,                    \
                                         const std::vector<int64_t>&,         \
                                         double);                             \
  template Tensor<S> cross_entropy_parts<S>(const Tensor<S>&,                 \
                                            const std::vector<int64_t>&);     \
  template CombinedOut<S> combined_loss<S>(const Tensor<S>&,                  \
                                           const Tensor<S>&,                  \
                                           const std::vector<int64_t>&,       \
                                           double);

GAITFORGE_INSTANTIATE_HEAD(float)
GAITFORGE_INSTANTIATE_HEAD(double)

}  // namespace gaitforge::head
