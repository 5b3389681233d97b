#include "gaitforge/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace gaitforge::ops {
namespace {

template <typename S>
using MatRM =
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<MatRM<S>>;
template <typename S>
using MapCM = Eigen::Map<const MatRM<S>>;

int axis_norm(int axis, int rank) {
  if (axis < 0) axis += rank;
  check(axis >= 0 && axis < rank, "axis out of range");
  return axis;
}

// Splits `shape` around `axis` into (outer, extent, inner) products.
struct Axis3 {
  int64_t outer = 1, extent = 1, inner = 1;
};
Axis3 split_axis(const Shape& shape, int axis) {
  Axis3 v;
  for (int i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

struct BcastPlan {
  Shape out_shape;
  std::vector<int64_t> a_strides, b_strides;  // 0 on broadcast axes
  int64_t out_numel = 1;
  bool same_shape = false;
};

BcastPlan make_bcast(const Shape& a, const Shape& b) {
  BcastPlan p;
  if (a == b) {
    p.out_shape = a;
    p.out_numel = numel_of(a);
    p.same_shape = true;
    return p;
  }
  int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  int r = std::max(ra, rb);
  p.out_shape.resize(r);
  for (int i = 0; i < r; ++i) {
    int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
    int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
    check(da == db || da == 1 || db == 1,
          "broadcast: incompatible shapes " + shape_str(a) + " vs " +
              shape_str(b));
    p.out_shape[i] = std::max(da, db);
  }
  auto sa = strides_of(a), sb = strides_of(b);
  p.a_strides.assign(r, 0);
  p.b_strides.assign(r, 0);
  for (int i = 0; i < r; ++i) {
    int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
    int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (i >= r - ra && da != 1) p.a_strides[i] = sa[i - (r - ra)];
    if (i >= r - rb && db != 1) p.b_strides[i] = sb[i - (r - rb)];
  }
  p.out_numel = numel_of(p.out_shape);
  return p;
}

// Odometer walk over the broadcast output; f(out_flat, a_off, b_off).
template <typename F>
void bcast_iterate(const BcastPlan& p, F&& f) {
  int r = static_cast<int>(p.out_shape.size());
  if (p.out_numel == 0) return;
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<int64_t> idx(r, 0);
  int64_t ao = 0, bo = 0;
  for (int64_t o = 0;; ++o) {
    f(o, ao, bo);
    int ax = r - 1;
    for (; ax >= 0; --ax) {
      ++idx[ax];
      ao += p.a_strides[ax];
      bo += p.b_strides[ax];
      if (idx[ax] < p.out_shape[ax]) break;
      ao -= p.a_strides[ax] * p.out_shape[ax];
      bo -= p.b_strides[ax] * p.out_shape[ax];
      idx[ax] = 0;
    }
    if (ax < 0) break;
  }
}

enum class BinKind { Add, Sub, Mul };

template <typename S>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, BinKind kind) {
  check(a.defined() && b.defined(), "binary op: undefined input");
  BcastPlan p = make_bcast(a.shape(), b.shape());
  Tensor<S> out = Tensor<S>::zeros(p.out_shape);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  if (p.same_shape) {
    int64_t n = p.out_numel;
    switch (kind) {
      case BinKind::Add:
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
        break;
      case BinKind::Sub:
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
        break;
      case BinKind::Mul:
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
        break;
    }
  } else {
    bcast_iterate(p, [&](int64_t o, int64_t ao, int64_t bo) {
      switch (kind) {
        case BinKind::Add: po[o] = pa[ao] + pb[bo]; break;
        case BinKind::Sub: po[o] = pa[ao] - pb[bo]; break;
        case BinKind::Mul: po[o] = pa[ao] * pb[bo]; break;
      }
    });
  }
  Tape<S>* tape = tape_of<S>({&a, &b});
  if (tape) {
    tape->record({a, b}, out, [a, b, p, kind](const std::vector<S>& g) {
      bool ga = grad_enabled(a), gb = grad_enabled(b);
      std::vector<S>* agrad = ga ? &const_cast<Tensor<S>&>(a).mutable_grad() : nullptr;
      std::vector<S>* bgrad = gb ? &const_cast<Tensor<S>&>(b).mutable_grad() : nullptr;
      const S* pa2 = a.data();
      const S* pb2 = b.data();
      if (p.same_shape) {
        int64_t n = p.out_numel;
        for (int64_t i = 0; i < n; ++i) {
          S gi = g[i];
          switch (kind) {
            case BinKind::Add:
              if (agrad) (*agrad)[i] += gi;
              if (bgrad) (*bgrad)[i] += gi;
              break;
            case BinKind::Sub:
              if (agrad) (*agrad)[i] += gi;
              if (bgrad) (*bgrad)[i] -= gi;
              break;
            case BinKind::Mul:
              if (agrad) (*agrad)[i] += gi * pb2[i];
              if (bgrad) (*bgrad)[i] += gi * pa2[i];
              break;
          }
        }
      } else {
        bcast_iterate(p, [&](int64_t o, int64_t ao, int64_t bo) {
          S gi = g[o];
          switch (kind) {
            case BinKind::Add:
              if (agrad) (*agrad)[ao] += gi;
              if (bgrad) (*bgrad)[bo] += gi;
              break;
            case BinKind::Sub:
              if (agrad) (*agrad)[ao] += gi;
              if (bgrad) (*bgrad)[bo] -= gi;
              break;
            case BinKind::Mul:
              if (agrad) (*agrad)[ao] += gi * pb2[bo];
              if (bgrad) (*bgrad)[bo] += gi * pa2[ao];
              break;
          }
        });
      }
    });
  }
  return out;
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(a, b, BinKind::Add);
}
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(a, b, BinKind::Sub);
}
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(a, b, BinKind::Mul);
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + c;
  if (Tape<S>* tape = tape_of<S>({&a})) {
    tape->record({a}, out, [a, n](const std::vector<S>& g) {
      if (grad_enabled(a)) accumulate_grad(a, g.data(), n);
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  if (Tape<S>* tape = tape_of<S>({&a})) {
    tape->record({a}, out, [a, c, n](const std::vector<S>& g) {
      if (!grad_enabled(a)) return;
      auto& ag = const_cast<Tensor<S>&>(a).mutable_grad();
      for (int64_t i = 0; i < n; ++i) ag[i] += g[i] * c;
    });
  }
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = px[i] > S(0) ? px[i] : S(0);
  if (Tape<S>* tape = tape_of<S>({&x})) {
    tape->record({x}, out, [x, n](const std::vector<S>& g) {
      if (!grad_enabled(x)) return;
      auto& xg = const_cast<Tensor<S>&>(x).mutable_grad();
      const S* px2 = x.data();
      for (int64_t i = 0; i < n; ++i)
        if (px2[i] > S(0)) xg[i] += g[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    double v = static_cast<double>(px[i]);
    po[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  if (Tape<S>* tape = tape_of<S>({&x})) {
    tape->record({x}, out, [x, n](const std::vector<S>& g) {
      if (!grad_enabled(x)) return;
      auto& xg = const_cast<Tensor<S>&>(x).mutable_grad();
      const S* px2 = x.data();
      for (int64_t i = 0; i < n; ++i) {
        double v = static_cast<double>(px2[i]);
        double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        xg[i] += g[i] * static_cast<S>(cdf + v * pdf);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  check(x.defined(), "reshape: undefined input");
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      check(infer < 0, "reshape: more than one inferred extent");
      infer = static_cast<int>(i);
    } else {
      check(shape[i] >= 0, "reshape: negative extent");
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    check(known > 0 && x.numel() % known == 0,
          "reshape: cannot infer extent for " + shape_str(shape));
    shape[infer] = x.numel() / known;
  }
  check(numel_of(shape) == x.numel(),
        "reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
            shape_str(shape));
  Tensor<S> out;
  out.impl = std::make_shared<TensorImpl<S>>();
  out.impl->shape = std::move(shape);
  out.impl->storage = x.impl->storage;
  if (Tape<S>* tape = tape_of<S>({&x})) {
    int64_t n = x.numel();
    tape->record({x}, out, [x, n](const std::vector<S>& g) {
      if (grad_enabled(x)) accumulate_grad(x, g.data(), n);
    });
  }
  return out;
}

template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& dims) {
  int r = x.rank();
  check(static_cast<int>(dims.size()) == r, "permute: rank mismatch");
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) {
    int d = axis_norm(dims[i], r);
    check(!seen[d], "permute: duplicate axis");
    seen[d] = true;
    out_shape[i] = x.shape()[d];
  }
  auto xs = strides_of(x.shape());
  std::vector<int64_t> map_strides(r);  // stride in x per out axis
  for (int i = 0; i < r; ++i) map_strides[i] = xs[axis_norm(dims[i], r)];

  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const S* px = x.data();
  S* po = out.data();
  int64_t n = out.numel();
  // Contiguous-run fast path when the innermost axis is preserved.
  bool keep_last = r > 0 && axis_norm(dims[r - 1], r) == r - 1;
  int64_t run = keep_last && r > 0 ? out_shape[r - 1] : 1;
  if (n > 0) {
    if (r == 0) {
      po[0] = px[0];
    } else {
      std::vector<int64_t> idx(r, 0);
      int64_t xo = 0;
      int step_axes = keep_last ? r - 1 : r;
      for (int64_t o = 0; o < n; o += run) {
        if (run > 1) {
          std::memcpy(po + o, px + xo, sizeof(S) * run);
        } else {
          po[o] = px[xo];
        }
        int ax = step_axes - 1;
        for (; ax >= 0; --ax) {
          ++idx[ax];
          xo += map_strides[ax];
          if (idx[ax] < out_shape[ax]) break;
          xo -= map_strides[ax] * out_shape[ax];
          idx[ax] = 0;
        }
        if (ax < 0) break;
      }
    }
  }
  if (Tape<S>* tape = tape_of<S>({&x})) {
    tape->record(
        {x}, out,
        [x, out_shape, map_strides, keep_last, r](const std::vector<S>& g) {
          if (!grad_enabled(x)) return;
          auto& xg = const_cast<Tensor<S>&>(x).mutable_grad();
          int64_t n2 = static_cast<int64_t>(g.size());
          if (n2 == 0) return;
          if (r == 0) {
            xg[0] += g[0];
            return;
          }
          int64_t run2 = keep_last ? out_shape[r - 1] : 1;
          std::vector<int64_t> idx(r, 0);
          int64_t xo = 0;
          int step_axes = keep_last ? r - 1 : r;
          for (int64_t o = 0; o < n2; o += run2) {
            for (int64_t k = 0; k < run2; ++k) xg[xo + k] += g[o + k];
            int ax = step_axes - 1;
            for (; ax >= 0; --ax) {
              ++idx[ax];
              xo += map_strides[ax];
              if (idx[ax] < out_shape[ax]) break;
              xo -= map_strides[ax] * out_shape[ax];
              idx[ax] = 0;
            }
            if (ax < 0) break;
          }
        });
  }
  return out;
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, int64_t start, int64_t len) {
  int ax = axis_norm(axis, x.rank());
  const Shape& sh = x.shape();
  check(start >= 0 && len >= 0 && start + len <= sh[ax],
        "slice: range [" + std::to_string(start) + "," +
            std::to_string(start + len) + ") outside extent " +
            std::to_string(sh[ax]));
  Shape out_shape = sh;
  out_shape[ax] = len;
  Axis3 v = split_axis(sh, ax);
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const S* px = x.data();
  S* po = out.data();
  for (int64_t o = 0; o < v.outer; ++o) {
    std::memcpy(po + o * len * v.inner,
                px + (o * v.extent + start) * v.inner,
                sizeof(S) * len * v.inner);
  }
  if (Tape<S>* tape = tape_of<S>({&x})) {
    tape->record({x}, out, [x, v, start, len](const std::vector<S>& g) {
      if (!grad_enabled(x)) return;
      auto& xg = const_cast<Tensor<S>&>(x).mutable_grad();
      for (int64_t o = 0; o < v.outer; ++o) {
        const S* gs = g.data() + o * len * v.inner;
        S* xd = xg.data() + (o * v.extent + start) * v.inner;
        for (int64_t i = 0; i < len * v.inner; ++i) xd[i] += gs[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> stack(const std::vector<Tensor<S>>& xs, int axis) {
  check(!xs.empty(), "stack: empty input list");
  const Shape& sh = xs[0].shape();
  for (const auto& t : xs)
    check(t.shape() == sh, "stack: inputs differ in shape");
  int r = static_cast<int>(sh.size());
  int ax = axis < 0 ? axis + r + 1 : axis;
  check(ax >= 0 && ax <= r, "stack: axis out of range");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= sh[i];
  for (int i = ax; i < r; ++i) inner *= sh[i];
  int64_t K = static_cast<int64_t>(xs.size());
  Shape out_shape = sh;
  out_shape.insert(out_shape.begin() + ax, K);
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  S* po = out.data();
  for (int64_t j = 0; j < K; ++j) {
    const S* pj = xs[j].data();
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(po + (o * K + j) * inner, pj + o * inner,
                  sizeof(S) * inner);
    }
  }
  std::vector<const Tensor<S>*> ptrs;
  for (const auto& t : xs) ptrs.push_back(&t);
  Tape<S>* tape = nullptr;
  for (const auto& t : xs) {
    Tape<S>* tt = tape_of<S>({&t});
    check(!tape || !tt || tape == tt, "stack: inputs from two tapes");
    if (tt) tape = tt;
  }
  if (tape) {
    tape->record(xs, out, [xs, outer, inner, K](const std::vector<S>& g) {
      for (int64_t j = 0; j < K; ++j) {
        if (!grad_enabled(xs[j])) continue;
        auto& xg = const_cast<Tensor<S>&>(xs[j]).mutable_grad();
        for (int64_t o = 0; o < outer; ++o) {
          const S* gs = g.data() + (o * K + j) * inner;
          S* xd = xg.data() + o * inner;
          for (int64_t i = 0; i < inner; ++i) xd[i] += gs[i];
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> index_select(const Tensor<S>& table,
                       const std::vector<int64_t>& indices) {
  check(table.rank() >= 1, "index_select: table must have rank >= 1");
  int64_t rows = table.dim(0);
  int64_t rowlen = table.numel() / std::max<int64_t>(rows, 1);
  for (int64_t i : indices)
    check(i >= 0 && i < rows, "index_select: index out of range");
  Shape out_shape = table.shape();
  out_shape[0] = static_cast<int64_t>(indices.size());
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const S* pt = table.data();
  S* po = out.data();
  for (size_t m = 0; m < indices.size(); ++m) {
    std::memcpy(po + m * rowlen, pt + indices[m] * rowlen,
                sizeof(S) * rowlen);
  }
  if (Tape<S>* tape = tape_of<S>({&table})) {
    tape->record({table}, out, [table, indices, rowlen](const std::vector<S>& g) {
      if (!grad_enabled(table)) return;
      auto& tg = const_cast<Tensor<S>&>(table).mutable_grad();
      for (size_t m = 0; m < indices.size(); ++m) {
        const S* gs = g.data() + m * rowlen;
        S* td = tg.data() + indices[m] * rowlen;
        for (int64_t i = 0; i < rowlen; ++i) td[i] += gs[i];
      }
    });
  }
  return out;
}

template <typename S>
MaxOut<S> max_over_axis(const Tensor<S>& x, int axis) {
  int ax = axis_norm(axis, x.rank());
  Axis3 v = split_axis(x.shape(), ax);
  check(v.extent >= 1, "max_over_axis: empty axis");
  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i)
    if (i != ax) out_shape.push_back(x.shape()[i]);
  MaxOut<S> res;
  res.values = Tensor<S>::zeros(out_shape);
  res.argmax.assign(v.outer * v.inner, 0);
  const S* px = x.data();
  S* po = res.values.data();
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t i = 0; i < v.inner; ++i) {
      const S* base = px + o * v.extent * v.inner + i;
      S best = base[0];
      int64_t bk = 0;
      for (int64_t k = 1; k < v.extent; ++k) {
        S val = base[k * v.inner];
        if (val > best) {  // strict: ties keep the first maximal index
          best = val;
          bk = k;
        }
      }
      po[o * v.inner + i] = best;
      res.argmax[o * v.inner + i] = bk;
    }
  }
  if (Tape<S>* tape = tape_of<S>({&x})) {
    auto arg = res.argmax;
    tape->record({x}, res.values, [x, v, arg](const std::vector<S>& g) {
      if (!grad_enabled(x)) return;
      auto& xg = const_cast<Tensor<S>&>(x).mutable_grad();
      for (int64_t o = 0; o < v.outer; ++o) {
        for (int64_t i = 0; i < v.inner; ++i) {
          int64_t flat = o * v.inner + i;
          xg[(o * v.extent + arg[flat]) * v.inner + i] += g[flat];
        }
      }
    });
  }
  return res;
}

template <typename S>
Tensor<S> mean_over_axis(const Tensor<S>& x, int axis) {
  int ax = axis_norm(axis, x.rank());
  Axis3 v = split_axis(x.shape(), ax);
  check(v.extent >= 1, "mean_over_axis: empty axis");
  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i)
    if (i != ax) out_shape.push_back(x.shape()[i]);
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const S* px = x.data();
  S* po = out.data();
  S inv = S(1) / static_cast<S>(v.extent);
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t k = 0; k < v.extent; ++k) {
      const S* base = px + (o * v.extent + k) * v.inner;
      S* dst = po + o * v.inner;
      for (int64_t i = 0; i < v.inner; ++i) dst[i] += base[i];
    }
  }
  for (int64_t i = 0; i < out.numel(); ++i) po[i] *= inv;
  if (Tape<S>* tape = tape_of<S>({&x})) {
    tape->record({x}, out, [x, v, inv](const std::vector<S>& g) {
      if (!grad_enabled(x)) return;
      auto& xg = const_cast<Tensor<S>&>(x).mutable_grad();
      for (int64_t o = 0; o < v.outer; ++o) {
        for (int64_t k = 0; k < v.extent; ++k) {
          S* xd = xg.data() + (o * v.extent + k) * v.inner;
          const S* gs = g.data() + o * v.inner;
          for (int64_t i = 0; i < v.inner; ++i) xd[i] += gs[i] * inv;
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros({});
  const S* px = x.data();
  S acc = 0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += px[i];
  out.data()[0] = acc;
  if (Tape<S>* tape = tape_of<S>({&x})) {
    tape->record({x}, out, [x](const std::vector<S>& g) {
      if (!grad_enabled(x)) return;
      auto& xg = const_cast<Tensor<S>&>(x).mutable_grad();
      for (auto& v : xg) v += g[0];
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  check(x.numel() > 0, "mean_all: empty tensor");
  return mul_scalar(sum_all(x), S(1) / static_cast<S>(x.numel()));
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  int ax = axis_norm(axis, x.rank());
  Axis3 v = split_axis(x.shape(), ax);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t i = 0; i < v.inner; ++i) {
      const S* base = px + o * v.extent * v.inner + i;
      S* dst = po + o * v.extent * v.inner + i;
      S mx = base[0];
      for (int64_t k = 1; k < v.extent; ++k)
        mx = std::max(mx, base[k * v.inner]);
      if (!(mx > -std::numeric_limits<S>::infinity())) {
        for (int64_t k = 0; k < v.extent; ++k) dst[k * v.inner] = S(0);
        continue;  // fully masked lane: defined as all-zero weights
      }
      S denom = 0;
      for (int64_t k = 0; k < v.extent; ++k) {
        S e = std::exp(base[k * v.inner] - mx);
        dst[k * v.inner] = e;
        denom += e;
      }
      S inv = S(1) / denom;
      for (int64_t k = 0; k < v.extent; ++k) dst[k * v.inner] *= inv;
    }
  }
  if (Tape<S>* tape = tape_of<S>({&x})) {
    Tensor<S> y = out;  // saved output
    tape->record({x}, out, [x, y, v](const std::vector<S>& g) {
      if (!grad_enabled(x)) return;
      auto& xg = const_cast<Tensor<S>&>(x).mutable_grad();
      const S* py = y.data();
      for (int64_t o = 0; o < v.outer; ++o) {
        for (int64_t i = 0; i < v.inner; ++i) {
          int64_t base = o * v.extent * v.inner + i;
          S dot = 0;
          for (int64_t k = 0; k < v.extent; ++k)
            dot += g[base + k * v.inner] * py[base + k * v.inner];
          for (int64_t k = 0; k < v.extent; ++k) {
            int64_t p = base + k * v.inner;
            xg[p] += py[p] * (g[p] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits,
                        const std::vector<int64_t>& labels) {
  check(logits.rank() == 2, "cross_entropy: logits must be [M, K]");
  int64_t M = logits.dim(0), K = logits.dim(1);
  check(static_cast<int64_t>(labels.size()) == M,
        "cross_entropy: label count mismatch");
  for (int64_t y : labels)
    check(y >= 0 && y < K, "cross_entropy: label out of range");
  check(M > 0, "cross_entropy: empty batch");
  const S* pl = logits.data();
  double acc = 0;
  for (int64_t m = 0; m < M; ++m) {
    const S* row = pl + m * K;
    S mx = row[0];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double denom = 0;
    for (int64_t k = 0; k < K; ++k)
      denom += std::exp(static_cast<double>(row[k] - mx));
    acc += std::log(denom) + static_cast<double>(mx) -
           static_cast<double>(row[labels[m]]);
  }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc / M));
  if (Tape<S>* tape = tape_of<S>({&logits})) {
    tape->record({logits}, out, [logits, labels, M, K](const std::vector<S>& g) {
      if (!grad_enabled(logits)) return;
      auto& lg = const_cast<Tensor<S>&>(logits).mutable_grad();
      const S* pl2 = logits.data();
      S scale = g[0] / static_cast<S>(M);
      std::vector<double> p(K);
      for (int64_t m = 0; m < M; ++m) {
        const S* row = pl2 + m * K;
        S mx = row[0];
        for (int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double denom = 0;
        for (int64_t k = 0; k < K; ++k) {
          p[k] = std::exp(static_cast<double>(row[k] - mx));
          denom += p[k];
        }
        for (int64_t k = 0; k < K; ++k) {
          S soft = static_cast<S>(p[k] / denom);
          lg[m * K + k] += scale * (soft - (k == labels[m] ? S(1) : S(0)));
        }
      }
    });
  }
  return out;
}

// ----- matmul / linear -----

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a,
                 bool trans_b) {
  check(a.rank() >= 2 && b.rank() == a.rank(),
        "matmul: ranks must match and be >= 2");
  int r = a.rank();
  int64_t batch = 1;
  for (int i = 0; i < r - 2; ++i) {
    check(a.shape()[i] == b.shape()[i], "matmul: batch extents differ");
    batch *= a.shape()[i];
  }
  int64_t ra0 = a.shape()[r - 2], ra1 = a.shape()[r - 1];
  int64_t rb0 = b.shape()[r - 2], rb1 = b.shape()[r - 1];
  int64_t M = trans_a ? ra1 : ra0;
  int64_t K = trans_a ? ra0 : ra1;
  int64_t Kb = trans_b ? rb1 : rb0;
  int64_t N = trans_b ? rb0 : rb1;
  check(K == Kb, "matmul: inner extents differ");
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(M);
  out_shape.push_back(N);
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (int64_t bi = 0; bi < batch; ++bi) {
    MapCM<S> A(pa + bi * ra0 * ra1, ra0, ra1);
    MapCM<S> B(pb + bi * rb0 * rb1, rb0, rb1);
    MapM<S> C(po + bi * M * N, M, N);
    if (!trans_a && !trans_b)
      C.noalias() = A * B;
    else if (!trans_a && trans_b)
      C.noalias() = A * B.transpose();
    else if (trans_a && !trans_b)
      C.noalias() = A.transpose() * B;
    else
      C.noalias() = A.transpose() * B.transpose();
  }
  if (Tape<S>* tape = tape_of<S>({&a, &b})) {
    tape->record({a, b}, out,
                 [a, b, trans_a, trans_b, batch, ra0, ra1, rb0, rb1, M, N,
                  K](const std::vector<S>& g) {
                   bool ga = grad_enabled(a), gb = grad_enabled(b);
                   if (!ga && !gb) return;
                   const S* pa2 = a.data();
                   const S* pb2 = b.data();
                   std::vector<S>* agrad =
                       ga ? &const_cast<Tensor<S>&>(a).mutable_grad() : nullptr;
                   std::vector<S>* bgrad =
                       gb ? &const_cast<Tensor<S>&>(b).mutable_grad() : nullptr;
                   for (int64_t bi = 0; bi < batch; ++bi) {
                     MapCM<S> A(pa2 + bi * ra0 * ra1, ra0, ra1);
                     MapCM<S> B(pb2 + bi * rb0 * rb1, rb0, rb1);
                     MapCM<S> G(g.data() + bi * M * N, M, N);
                     if (agrad) {
                       MapM<S> dA(agrad->data() + bi * ra0 * ra1, ra0, ra1);
                       if (!trans_a && !trans_b)
                         dA.noalias() += G * B.transpose();
                       else if (!trans_a && trans_b)
                         dA.noalias() += G * B;
                       else if (trans_a && !trans_b)
                         dA.noalias() += B * G.transpose();
                       else
                         dA.noalias() += B.transpose() * G.transpose();
                     }
                     if (bgrad) {
                       MapM<S> dB(bgrad->data() + bi * rb0 * rb1, rb0, rb1);
                       if (!trans_a && !trans_b)
                         dB.noalias() += A.transpose() * G;
                       else if (!trans_a && trans_b)
                         dB.noalias() += G.transpose() * A;
                       else if (trans_a && !trans_b)
                         dB.noalias() += A * G;
                       else
                         dB.noalias() += G.transpose() * A.transpose();
                     }
                   }
                 });
  }
  return out;
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  check(x.rank() >= 1, "linear: input rank must be >= 1");
  check(w.rank() == 2, "linear: weight must be [Dout, Din]");
  int64_t din = x.dim(-1);
  int64_t dout = w.dim(0);
  check(w.dim(1) == din, "linear: weight in-features mismatch (" +
                             std::to_string(w.dim(1)) + " vs " +
                             std::to_string(din) + ")");
  if (b.defined())
    check(b.rank() == 1 && b.dim(0) == dout, "linear: bias shape mismatch");
  int64_t M = x.numel() / din;
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  MapCM<S> X(x.data(), M, din);
  MapCM<S> W(w.data(), dout, din);
  MapM<S> Y(out.data(), M, dout);
  Y.noalias() = X * W.transpose();
  if (b.defined()) {
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> bv(b.data(), dout);
    Y.rowwise() += bv.transpose();
  }
  std::vector<Tensor<S>> inputs = {x, w};
  if (b.defined()) inputs.push_back(b);
  if (Tape<S>* tape = tape_of<S>({&x, &w, &b})) {
    Tensor<S> bb = b;
    tape->record(std::move(inputs), out,
                 [x, w, bb, M, din, dout](const std::vector<S>& g) {
                   MapCM<S> G(g.data(), M, dout);
                   MapCM<S> X2(x.data(), M, din);
                   MapCM<S> W2(w.data(), dout, din);
                   if (grad_enabled(x)) {
                     auto& xg = const_cast<Tensor<S>&>(x).mutable_grad();
                     MapM<S> dX(xg.data(), M, din);
                     dX.noalias() += G * W2;
                   }
                   if (grad_enabled(w)) {
                     auto& wg = const_cast<Tensor<S>&>(w).mutable_grad();
                     MapM<S> dW(wg.data(), dout, din);
                     dW.noalias() += G.transpose() * X2;
                   }
                   if (bb.defined() && grad_enabled(bb)) {
                     auto& bg = const_cast<Tensor<S>&>(bb).mutable_grad();
                     for (int64_t m = 0; m < M; ++m)
                       for (int64_t j = 0; j < dout; ++j)
                         bg[j] += g[m * dout + j];
                   }
                 });
  }
  return out;
}

// ----- convolution -----

namespace {

// Output extent with floor semantics; errors when the kernel does not fit.
int64_t conv_out_extent(int64_t in, int64_t k, int64_t s, int64_t p,
                        const char* what) {
  check(s >= 1, std::string("conv: stride must be >= 1 on ") + what);
  check(p >= 0, std::string("conv: padding must be >= 0 on ") + what);
  check(in + 2 * p >= k,
        std::string("conv: kernel does not fit padded input on ") + what);
  return (in + 2 * p - k) / s + 1;
}

// Columns processed per GEMM chunk, sized to keep workspaces cache-friendly.
int64_t conv_chunk_cols(int64_t K) {
  int64_t target = K > 1024 ? 4096 : 8192;
  return target;
}

struct ConvGeom {
  // Flattened item axis: conv2d items are (n); conv3d items are (n, ot).
  int64_t items, cols_per_item, K, Cout;
};

// conv2d im2col over items [m0, m1): col is [K, (m1-m0)*Ho*Wo] row-major.
template <typename S>
void im2col2d(const S* x, int64_t Cin, int64_t H, int64_t W, int64_t kh,
              int64_t kw, int64_t sh, int64_t sw, int64_t ph, int64_t pw,
              int64_t Ho, int64_t Wo, int64_t m0, int64_t m1, S* col) {
  int64_t cols = (m1 - m0) * Ho * Wo;
  int64_t r = 0;
  for (int64_t ci = 0; ci < Cin; ++ci) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj, ++r) {
        S* crow = col + r * cols;
        for (int64_t m = m0; m < m1; ++m) {
          const S* xc = x + (m * Cin + ci) * H * W;
          S* dst0 = crow + (m - m0) * Ho * Wo;
          for (int64_t oh = 0; oh < Ho; ++oh) {
            int64_t ih = oh * sh - ph + ki;
            S* dst = dst0 + oh * Wo;
            if (ih < 0 || ih >= H) {
              std::fill(dst, dst + Wo, S(0));
              continue;
            }
            const S* src = xc + ih * W;
            int64_t iw0 = -pw + kj;
            if (sw == 1) {
              int64_t lo = std::max<int64_t>(0, -iw0);
              int64_t hi = std::min<int64_t>(Wo, W - iw0);
              if (lo > 0) std::fill(dst, dst + std::min(lo, Wo), S(0));
              if (hi > lo)
                std::memcpy(dst + lo, src + iw0 + lo, sizeof(S) * (hi - lo));
              if (hi < Wo)
                std::fill(dst + std::max(hi, int64_t(0)), dst + Wo, S(0));
            } else {
              for (int64_t ow = 0; ow < Wo; ++ow) {
                int64_t iw = ow * sw + iw0;
                dst[ow] = (iw >= 0 && iw < W) ? src[iw] : S(0);
              }
            }
          }
        }
      }
    }
  }
}

// Scatter-add transpose of im2col2d.
template <typename S>
void col2im2d_add(const S* col, int64_t Cin, int64_t H, int64_t W, int64_t kh,
                  int64_t kw, int64_t sh, int64_t sw, int64_t ph, int64_t pw,
                  int64_t Ho, int64_t Wo, int64_t m0, int64_t m1, S* dx) {
  int64_t cols = (m1 - m0) * Ho * Wo;
  int64_t r = 0;
  for (int64_t ci = 0; ci < Cin; ++ci) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj, ++r) {
        const S* crow = col + r * cols;
        for (int64_t m = m0; m < m1; ++m) {
          S* xc = dx + (m * Cin + ci) * H * W;
          const S* src0 = crow + (m - m0) * Ho * Wo;
          for (int64_t oh = 0; oh < Ho; ++oh) {
            int64_t ih = oh * sh - ph + ki;
            if (ih < 0 || ih >= H) continue;
            const S* src = src0 + oh * Wo;
            S* dst = xc + ih * W;
            int64_t iw0 = -pw + kj;
            for (int64_t ow = 0; ow < Wo; ++ow) {
              int64_t iw = ow * sw + iw0;
              if (iw >= 0 && iw < W) dst[iw] += src[ow];
            }
          }
        }
      }
    }
  }
}

// conv3d im2col: items are flattened (n, ot) pairs.
template <typename S>
void im2col3d(const S* x, int64_t Cin, int64_t T, int64_t H, int64_t W,
              int64_t kt, int64_t kh, int64_t kw, int64_t st, int64_t sh,
              int64_t sw, int64_t pt, int64_t ph, int64_t pw, int64_t To,
              int64_t Ho, int64_t Wo, int64_t m0, int64_t m1, S* col) {
  int64_t cols = (m1 - m0) * Ho * Wo;
  int64_t r = 0;
  for (int64_t ci = 0; ci < Cin; ++ci) {
    for (int64_t kti = 0; kti < kt; ++kti) {
      for (int64_t ki = 0; ki < kh; ++ki) {
        for (int64_t kj = 0; kj < kw; ++kj, ++r) {
          S* crow = col + r * cols;
          for (int64_t m = m0; m < m1; ++m) {
            int64_t n = m / To, ot = m % To;
            int64_t it = ot * st - pt + kti;
            S* dst0 = crow + (m - m0) * Ho * Wo;
            if (it < 0 || it >= T) {
              std::fill(dst0, dst0 + Ho * Wo, S(0));
              continue;
            }
            const S* xc = x + ((n * Cin + ci) * T + it) * H * W;
            for (int64_t oh = 0; oh < Ho; ++oh) {
              int64_t ih = oh * sh - ph + ki;
              S* dst = dst0 + oh * Wo;
              if (ih < 0 || ih >= H) {
                std::fill(dst, dst + Wo, S(0));
                continue;
              }
              const S* src = xc + ih * W;
              int64_t iw0 = -pw + kj;
              if (sw == 1) {
                int64_t lo = std::max<int64_t>(0, -iw0);
                int64_t hi = std::min<int64_t>(Wo, W - iw0);
                if (lo > 0) std::fill(dst, dst + std::min(lo, Wo), S(0));
                if (hi > lo)
                  std::memcpy(dst + lo, src + iw0 + lo,
                              sizeof(S) * (hi - lo));
                if (hi < Wo)
                  std::fill(dst + std::max(hi, int64_t(0)), dst + Wo, S(0));
              } else {
                for (int64_t ow = 0; ow < Wo; ++ow) {
                  int64_t iw = ow * sw + iw0;
                  dst[ow] = (iw >= 0 && iw < W) ? src[iw] : S(0);
                }
              }
            }
          }
        }
      }
    }
  }
}

template <typename S>
void col2im3d_add(const S* col, int64_t Cin, int64_t T, int64_t H, int64_t W,
                  int64_t kt, int64_t kh, int64_t kw, int64_t st, int64_t sh,
                  int64_t sw, int64_t pt, int64_t ph, int64_t pw, int64_t To,
                  int64_t Ho, int64_t Wo, int64_t m0, int64_t m1, S* dx) {
  int64_t cols = (m1 - m0) * Ho * Wo;
  int64_t r = 0;
  for (int64_t ci = 0; ci < Cin; ++ci) {
    for (int64_t kti = 0; kti < kt; ++kti) {
      for (int64_t ki = 0; ki < kh; ++ki) {
        for (int64_t kj = 0; kj < kw; ++kj, ++r) {
          const S* crow = col + r * cols;
          for (int64_t m = m0; m < m1; ++m) {
            int64_t n = m / To, ot = m % To;
            int64_t it = ot * st - pt + kti;
            if (it < 0 || it >= T) continue;
            S* xc = dx + ((n * Cin + ci) * T + it) * H * W;
            const S* src0 = crow + (m - m0) * Ho * Wo;
            for (int64_t oh = 0; oh < Ho; ++oh) {
              int64_t ih = oh * sh - ph + ki;
              if (ih < 0 || ih >= H) continue;
              const S* src = src0 + oh * Wo;
              S* dst = xc + ih * W;
              int64_t iw0 = -pw + kj;
              for (int64_t ow = 0; ow < Wo; ++ow) {
                int64_t iw = ow * sw + iw0;
                if (iw >= 0 && iw < W) dst[iw] += src[ow];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w,
                 std::array<int64_t, 2> stride, std::array<int64_t, 2> pad) {
  check(x.rank() == 4, "conv2d: input must be [N, Cin, H, W]");
  check(w.rank() == 4, "conv2d: weight must be [Cout, Cin, kh, kw]");
  int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  check(w.dim(1) == Cin, "conv2d: channel mismatch (" +
                             std::to_string(w.dim(1)) + " vs " +
                             std::to_string(Cin) + ")");
  int64_t sh = stride[0], sw = stride[1], ph = pad[0], pw = pad[1];
  int64_t Ho = conv_out_extent(H, kh, sh, ph, "height");
  int64_t Wo = conv_out_extent(W, kw, sw, pw, "width");
  int64_t K = Cin * kh * kw;
  Tensor<S> out = Tensor<S>::zeros({N, Cout, Ho, Wo});
  int64_t cpi = Ho * Wo;  // columns per item
  int64_t items_per_chunk =
      std::clamp<int64_t>(conv_chunk_cols(K) / std::max<int64_t>(cpi, 1), 1, N);
  std::vector<S> col(K * items_per_chunk * cpi);
  const S* px = x.data();
  S* po = out.data();
  MapCM<S> Wm(w.data(), Cout, K);
  MatRM<S> outm;
  for (int64_t m0 = 0; m0 < N; m0 += items_per_chunk) {
    int64_t m1 = std::min(N, m0 + items_per_chunk);
    int64_t cols = (m1 - m0) * cpi;
    im2col2d(px, Cin, H, W, kh, kw, sh, sw, ph, pw, Ho, Wo, m0, m1,
             col.data());
    MapCM<S> colm(col.data(), K, cols);
    outm.noalias() = Wm * colm;
    for (int64_t co = 0; co < Cout; ++co) {
      const S* row = outm.data() + co * cols;
      for (int64_t m = m0; m < m1; ++m) {
        std::memcpy(po + (m * Cout + co) * cpi, row + (m - m0) * cpi,
                    sizeof(S) * cpi);
      }
    }
  }
  if (Tape<S>* tape = tape_of<S>({&x, &w})) {
    tape->record({x, w}, out,
                 [x, w, N, Cin, H, W, Cout, kh, kw, sh, sw, ph, pw, Ho, Wo, K,
                  cpi, items_per_chunk](const std::vector<S>& g) {
                   bool gx = grad_enabled(x), gw = grad_enabled(w);
                   if (!gx && !gw) return;
                   std::vector<S> dwbuf, dxbuf;
                   if (gw) dwbuf.assign(Cout * K, S(0));
                   if (gx) dxbuf.assign(x.numel(), S(0));
                   std::vector<S> col(K * items_per_chunk * cpi);
                   std::vector<S> dy(Cout * items_per_chunk * cpi);
                   std::vector<S> cg(gx ? K * items_per_chunk * cpi : 0);
                   MapCM<S> Wm2(w.data(), Cout, K);
                   for (int64_t m0 = 0; m0 < N; m0 += items_per_chunk) {
                     int64_t m1 = std::min(N, m0 + items_per_chunk);
                     int64_t cols = (m1 - m0) * cpi;
                     for (int64_t co = 0; co < Cout; ++co) {
                       S* row = dy.data() + co * cols;
                       for (int64_t m = m0; m < m1; ++m)
                         std::memcpy(row + (m - m0) * cpi,
                                     g.data() + (m * Cout + co) * cpi,
                                     sizeof(S) * cpi);
                     }
                     MapCM<S> dym(dy.data(), Cout, cols);
                     if (gw) {
                       im2col2d(x.data(), Cin, H, W, kh, kw, sh, sw, ph, pw,
                                Ho, Wo, m0, m1, col.data());
                       MapCM<S> colm(col.data(), K, cols);
                       MapM<S> dwm(dwbuf.data(), Cout, K);
                       dwm.noalias() += dym * colm.transpose();
                     }
                     if (gx) {
                       MapM<S> cgm(cg.data(), K, cols);
                       cgm.noalias() = Wm2.transpose() * dym;
                       col2im2d_add(cg.data(), Cin, H, W, kh, kw, sh, sw, ph,
                                    pw, Ho, Wo, m0, m1, dxbuf.data());
                     }
                   }
                   if (gw) accumulate_grad(w, dwbuf.data(), Cout * K);
                   if (gx) accumulate_grad(x, dxbuf.data(), x.numel());
                 });
  }
  return out;
}

template <typename S>
Tensor<S> conv3d(const Tensor<S>& x, const Tensor<S>& w,
                 std::array<int64_t, 3> stride, std::array<int64_t, 3> pad) {
  check(x.rank() == 5, "conv3d: input must be [N, Cin, T, H, W]");
  check(w.rank() == 5, "conv3d: weight must be [Cout, Cin, kt, kh, kw]");
  int64_t N = x.dim(0), Cin = x.dim(1), T = x.dim(2), H = x.dim(3),
          W = x.dim(4);
  int64_t Cout = w.dim(0), kt = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  check(w.dim(1) == Cin, "conv3d: channel mismatch");
  int64_t st = stride[0], sh = stride[1], sw = stride[2];
  int64_t pt = pad[0], ph = pad[1], pw = pad[2];
  int64_t To = conv_out_extent(T, kt, st, pt, "time");
  int64_t Ho = conv_out_extent(H, kh, sh, ph, "height");
  int64_t Wo = conv_out_extent(W, kw, sw, pw, "width");
  int64_t K = Cin * kt * kh * kw;
  Tensor<S> out = Tensor<S>::zeros({N, Cout, To, Ho, Wo});
  int64_t cpi = Ho * Wo;
  int64_t items = N * To;  // chunk over flattened (n, ot)
  int64_t items_per_chunk = std::clamp<int64_t>(
      conv_chunk_cols(K) / std::max<int64_t>(cpi, 1), 1, items);
  std::vector<S> col(K * items_per_chunk * cpi);
  const S* px = x.data();
  S* po = out.data();
  MapCM<S> Wm(w.data(), Cout, K);
  MatRM<S> outm;
  for (int64_t m0 = 0; m0 < items; m0 += items_per_chunk) {
    int64_t m1 = std::min(items, m0 + items_per_chunk);
    int64_t cols = (m1 - m0) * cpi;
    im2col3d(px, Cin, T, H, W, kt, kh, kw, st, sh, sw, pt, ph, pw, To, Ho, Wo,
             m0, m1, col.data());
    MapCM<S> colm(col.data(), K, cols);
    outm.noalias() = Wm * colm;
    for (int64_t co = 0; co < Cout; ++co) {
      const S* row = outm.data() + co * cols;
      for (int64_t m = m0; m < m1; ++m) {
        int64_t n = m / To, ot = m % To;
        std::memcpy(po + ((n * Cout + co) * To + ot) * cpi,
                    row + (m - m0) * cpi, sizeof(S) * cpi);
      }
    }
  }
  if (Tape<S>* tape = tape_of<S>({&x, &w})) {
    tape->record(
        {x, w}, out,
        [x, w, N, Cin, T, H, W, Cout, kt, kh, kw, st, sh, sw, pt, ph, pw, To,
         Ho, Wo, K, cpi, items, items_per_chunk](const std::vector<S>& g) {
          bool gx = grad_enabled(x), gw = grad_enabled(w);
          if (!gx && !gw) return;
          std::vector<S> dwbuf, dxbuf;
          if (gw) dwbuf.assign(Cout * K, S(0));
          if (gx) dxbuf.assign(x.numel(), S(0));
          std::vector<S> col(K * items_per_chunk * cpi);
          std::vector<S> dy(Cout * items_per_chunk * cpi);
          std::vector<S> cg(gx ? K * items_per_chunk * cpi : 0);
          MapCM<S> Wm2(w.data(), Cout, K);
          for (int64_t m0 = 0; m0 < items; m0 += items_per_chunk) {
            int64_t m1 = std::min(items, m0 + items_per_chunk);
            int64_t cols = (m1 - m0) * cpi;
            for (int64_t co = 0; co < Cout; ++co) {
              S* row = dy.data() + co * cols;
              for (int64_t m = m0; m < m1; ++m) {
                int64_t n = m / To, ot = m % To;
                std::memcpy(row + (m - m0) * cpi,
                            g.data() + ((n * Cout + co) * To + ot) * cpi,
                            sizeof(S) * cpi);
              }
            }
            MapCM<S> dym(dy.data(), Cout, cols);
            if (gw) {
              im2col3d(x.data(), Cin, T, H, W, kt, kh, kw, st, sh, sw, pt, ph,
                       pw, To, Ho, Wo, m0, m1, col.data());
              MapCM<S> colm(col.data(), K, cols);
              MapM<S> dwm(dwbuf.data(), Cout, K);
              dwm.noalias() += dym * colm.transpose();
            }
            if (gx) {
              MapM<S> cgm(cg.data(), K, cols);
              cgm.noalias() = Wm2.transpose() * dym;
              col2im3d_add(cg.data(), Cin, T, H, W, kt, kh, kw, st, sh, sw, pt,
                           ph, pw, To, Ho, Wo, m0, m1, dxbuf.data());
            }
          }
          if (gw) accumulate_grad(w, dwbuf.data(), Cout * K);
          if (gx) accumulate_grad(x, dxbuf.data(), x.numel());
        });
  }
  return out;
}

template <typename S>
Tensor<S> conv1d_temporal(const Tensor<S>& x, const Tensor<S>& w) {
  check(x.rank() == 5, "conv1d_temporal: input must be [N, C, T, H, W]");
  check(w.rank() == 3, "conv1d_temporal: weight must be [Cout, Cin, kt]");
  int64_t kt = w.dim(2);
  check(kt % 2 == 1, "conv1d_temporal: kernel extent must be odd, got " +
                         std::to_string(kt));
  Tensor<S> w5 = reshape(w, {w.dim(0), w.dim(1), kt, 1, 1});
  return conv3d(x, w5, {1, 1, 1}, {kt / 2, 0, 0});
}

// ----- normalization -----

template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& scale,
                     const Tensor<S>& shift, Tensor<S>& running_mean,
                     Tensor<S>& running_var, Mode mode, double momentum,
                     double eps, int channel_axis) {
  int ax = axis_norm(channel_axis, x.rank());
  Axis3 v = split_axis(x.shape(), ax);
  int64_t C = v.extent;
  check(scale.defined() && shift.defined() && scale.numel() == C &&
            shift.numel() == C,
        "batch_norm: scale/shift must hold one value per channel");
  check(running_mean.defined() && running_var.defined() &&
            running_mean.numel() == C && running_var.numel() == C,
        mode == Mode::Eval
            ? "batch_norm: eval mode without initialized running statistics"
            : "batch_norm: running statistics must be allocated");
  int64_t M = v.outer * v.inner;  // reduced elements per channel
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  const S* pg = scale.data();
  const S* pb = shift.data();
  std::vector<S> mean(C), invstd(C);
  if (mode == Mode::Train) {
    check(M >= 2, "batch_norm: train mode needs >= 2 elements per channel");
    for (int64_t c = 0; c < C; ++c) {
      double sum = 0, sq = 0;
      for (int64_t o = 0; o < v.outer; ++o) {
        const S* base = px + (o * C + c) * v.inner;
        for (int64_t i = 0; i < v.inner; ++i) {
          double val = static_cast<double>(base[i]);
          sum += val;
          sq += val * val;
        }
      }
      double mu = sum / M;
      double var = std::max(0.0, sq / M - mu * mu);
      mean[c] = static_cast<S>(mu);
      invstd[c] = static_cast<S>(1.0 / std::sqrt(var + eps));
      // Running stats take the unbiased variance.
      S* rm = running_mean.data();
      S* rv = running_var.data();
      rm[c] = static_cast<S>((1 - momentum) * rm[c] + momentum * mu);
      rv[c] = static_cast<S>((1 - momentum) * rv[c] +
                             momentum * var * M / (M - 1));
    }
  } else {
    const S* rm = running_mean.data();
    const S* rv = running_var.data();
    for (int64_t c = 0; c < C; ++c) {
      mean[c] = rm[c];
      invstd[c] = static_cast<S>(1.0 / std::sqrt(static_cast<double>(rv[c]) + eps));
    }
  }
  for (int64_t c = 0; c < C; ++c) {
    S a = pg[c] * invstd[c];
    S b2 = pb[c] - mean[c] * a;
    for (int64_t o = 0; o < v.outer; ++o) {
      const S* base = px + (o * C + c) * v.inner;
      S* dst = po + (o * C + c) * v.inner;
      for (int64_t i = 0; i < v.inner; ++i) dst[i] = base[i] * a + b2;
    }
  }
  if (Tape<S>* tape = tape_of<S>({&x, &scale, &shift})) {
    bool train = mode == Mode::Train;
    tape->record(
        {x, scale, shift}, out,
        [x, scale, shift, v, C, M, mean, invstd, train](const std::vector<S>& g) {
          bool gx = grad_enabled(x), gs = grad_enabled(scale),
               gb = grad_enabled(shift);
          if (!gx && !gs && !gb) return;
          const S* px2 = x.data();
          const S* pg2 = scale.data();
          std::vector<S>* xg =
              gx ? &const_cast<Tensor<S>&>(x).mutable_grad() : nullptr;
          std::vector<S>* sg =
              gs ? &const_cast<Tensor<S>&>(scale).mutable_grad() : nullptr;
          std::vector<S>* bg =
              gb ? &const_cast<Tensor<S>&>(shift).mutable_grad() : nullptr;
          for (int64_t c = 0; c < C; ++c) {
            double dsum = 0, dxhat_sum = 0;
            for (int64_t o = 0; o < v.outer; ++o) {
              const S* xb = px2 + (o * C + c) * v.inner;
              const S* gb2 = g.data() + (o * C + c) * v.inner;
              for (int64_t i = 0; i < v.inner; ++i) {
                double xhat = (xb[i] - mean[c]) * invstd[c];
                dsum += gb2[i];
                dxhat_sum += gb2[i] * xhat;
              }
            }
            if (sg) (*sg)[c] += static_cast<S>(dxhat_sum);
            if (bg) (*bg)[c] += static_cast<S>(dsum);
            if (xg) {
              S a = pg2[c] * invstd[c];
              if (train) {
                S k1 = static_cast<S>(dsum / M);
                S k2 = static_cast<S>(dxhat_sum / M);
                for (int64_t o = 0; o < v.outer; ++o) {
                  const S* xb = px2 + (o * C + c) * v.inner;
                  const S* gb2 = g.data() + (o * C + c) * v.inner;
                  S* xd = xg->data() + (o * C + c) * v.inner;
                  for (int64_t i = 0; i < v.inner; ++i) {
                    S xhat = (xb[i] - mean[c]) * invstd[c];
                    xd[i] += a * (gb2[i] - k1 - xhat * k2);
                  }
                }
              } else {
                for (int64_t o = 0; o < v.outer; ++o) {
                  const S* gb2 = g.data() + (o * C + c) * v.inner;
                  S* xd = xg->data() + (o * C + c) * v.inner;
                  for (int64_t i = 0; i < v.inner; ++i) xd[i] += a * gb2[i];
                }
              }
            }
          }
        });
  }
  return out;
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& scale,
                     const Tensor<S>& shift, double eps) {
  check(x.rank() >= 1, "layer_norm: input rank must be >= 1");
  int64_t D = x.dim(-1);
  check(scale.defined() && shift.defined() && scale.numel() == D &&
            shift.numel() == D,
        "layer_norm: scale/shift must hold one value per feature");
  int64_t rows = x.numel() / D;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  const S* pg = scale.data();
  const S* pb = shift.data();
  std::vector<S> mean(rows), invstd(rows);
  for (int64_t m = 0; m < rows; ++m) {
    const S* row = px + m * D;
    double sum = 0, sq = 0;
    for (int64_t j = 0; j < D; ++j) {
      sum += row[j];
      sq += static_cast<double>(row[j]) * row[j];
    }
    double mu = sum / D;
    double var = std::max(0.0, sq / D - mu * mu);
    mean[m] = static_cast<S>(mu);
    invstd[m] = static_cast<S>(1.0 / std::sqrt(var + eps));
    S* dst = po + m * D;
    for (int64_t j = 0; j < D; ++j)
      dst[j] = (row[j] - mean[m]) * invstd[m] * pg[j] + pb[j];
  }
  if (Tape<S>* tape = tape_of<S>({&x, &scale, &shift})) {
    tape->record(
        {x, scale, shift}, out,
        [x, scale, shift, rows, D, mean, invstd](const std::vector<S>& g) {
          bool gx = grad_enabled(x), gs = grad_enabled(scale),
               gb = grad_enabled(shift);
          if (!gx && !gs && !gb) return;
          const S* px2 = x.data();
          const S* pg2 = scale.data();
          std::vector<S>* xg =
              gx ? &const_cast<Tensor<S>&>(x).mutable_grad() : nullptr;
          std::vector<S>* sg =
              gs ? &const_cast<Tensor<S>&>(scale).mutable_grad() : nullptr;
          std::vector<S>* bg =
              gb ? &const_cast<Tensor<S>&>(shift).mutable_grad() : nullptr;
          for (int64_t m = 0; m < rows; ++m) {
            const S* row = px2 + m * D;
            const S* gr = g.data() + m * D;
            double d1 = 0, d2 = 0;
            for (int64_t j = 0; j < D; ++j) {
              double xhat = (row[j] - mean[m]) * invstd[m];
              double dyg = static_cast<double>(gr[j]) * pg2[j];
              d1 += dyg;
              d2 += dyg * xhat;
              if (sg) (*sg)[j] += static_cast<S>(gr[j] * xhat);
              if (bg) (*bg)[j] += gr[j];
            }
            if (xg) {
              d1 /= D;
              d2 /= D;
              S* xd = xg->data() + m * D;
              for (int64_t j = 0; j < D; ++j) {
                double xhat = (row[j] - mean[m]) * invstd[m];
                double dyg = static_cast<double>(gr[j]) * pg2[j];
                xd[j] += static_cast<S>(invstd[m] * (dyg - d1 - xhat * d2));
              }
            }
          }
        });
  }
  return out;
}

// ----- bilinear resize -----

namespace {
struct LerpAxis {
  std::vector<int64_t> i0, i1;
  std::vector<double> w1;  // weight on i1; (1-w1) on i0
};
LerpAxis make_lerp(int64_t in, int64_t out) {
  LerpAxis a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.w1.resize(out);
  double scale = static_cast<double>(in) / out;
  for (int64_t o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    double f = std::floor(src);
    int64_t lo = static_cast<int64_t>(f);
    double w = src - f;
    if (lo < 0) {
      lo = 0;
      w = 0;
    }
    int64_t hi = lo + 1;
    if (hi >= in) {
      hi = in - 1;
      if (lo >= in) lo = in - 1;
      if (lo == hi) w = 0;
    }
    a.i0[o] = lo;
    a.i1[o] = hi;
    a.w1[o] = w;
  }
  return a;
}
}  // namespace

template <typename S>
Tensor<S> bilinear_resize(const Tensor<S>& x, int64_t out_h, int64_t out_w) {
  check(x.rank() == 4, "bilinear_resize: input must be [N, C, H, W]");
  check(out_h >= 1 && out_w >= 1, "bilinear_resize: output extents must be >= 1");
  int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  check(H >= 1 && W >= 1, "bilinear_resize: input extents must be >= 1");
  LerpAxis ay = make_lerp(H, out_h), ax = make_lerp(W, out_w);
  Tensor<S> out = Tensor<S>::zeros({x.dim(0), x.dim(1), out_h, out_w});
  const S* px = x.data();
  S* po = out.data();
  for (int64_t p = 0; p < NC; ++p) {
    const S* plane = px + p * H * W;
    S* dst = po + p * out_h * out_w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      const S* r0 = plane + ay.i0[oy] * W;
      const S* r1 = plane + ay.i1[oy] * W;
      double wy = ay.w1[oy];
      for (int64_t ox = 0; ox < out_w; ++ox) {
        double wx = ax.w1[ox];
        double top = (1 - wx) * r0[ax.i0[ox]] + wx * r0[ax.i1[ox]];
        double bot = (1 - wx) * r1[ax.i0[ox]] + wx * r1[ax.i1[ox]];
        dst[oy * out_w + ox] = static_cast<S>((1 - wy) * top + wy * bot);
      }
    }
  }
  if (Tape<S>* tape = tape_of<S>({&x})) {
    tape->record({x}, out,
                 [x, NC, H, W, out_h, out_w, ay, ax](const std::vector<S>& g) {
                   if (!grad_enabled(x)) return;
                   auto& xg = const_cast<Tensor<S>&>(x).mutable_grad();
                   for (int64_t p = 0; p < NC; ++p) {
                     S* plane = xg.data() + p * H * W;
                     const S* gs = g.data() + p * out_h * out_w;
                     for (int64_t oy = 0; oy < out_h; ++oy) {
                       double wy = ay.w1[oy];
                       S* r0 = plane + ay.i0[oy] * W;
                       S* r1 = plane + ay.i1[oy] * W;
                       for (int64_t ox = 0; ox < out_w; ++ox) {
                         double wx = ax.w1[ox];
                         S gv = gs[oy * out_w + ox];
                         r0[ax.i0[ox]] += static_cast<S>((1 - wy) * (1 - wx)) * gv;
                         r0[ax.i1[ox]] += static_cast<S>((1 - wy) * wx) * gv;
                         r1[ax.i0[ox]] += static_cast<S>(wy * (1 - wx)) * gv;
                         r1[ax.i1[ox]] += static_cast<S>(wy * wx) * gv;
                       }
                     }
                   }
                 });
  }
  return out;
}

template <typename S>
Tensor<S> drop_path(const Tensor<S>& x, double rate, Mode mode, Rng* rng) {
  check(rate >= 0.0 && rate < 1.0,
        "drop_path: rate must lie in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::Eval || rate == 0.0) return x;  // identity
  check(rng != nullptr, "drop_path: train mode requires an rng");
  check(x.rank() >= 1, "drop_path: input needs a sample axis");
  int64_t N = x.dim(0);
  int64_t inner = x.numel() / std::max<int64_t>(N, 1);
  std::vector<S> scales(N);
  S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  for (int64_t n = 0; n < N; ++n)
    scales[n] = rng->bernoulli(rate) ? S(0) : keep_scale;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (int64_t n = 0; n < N; ++n) {
    S s = scales[n];
    const S* src = px + n * inner;
    S* dst = po + n * inner;
    if (s != S(0))
      for (int64_t i = 0; i < inner; ++i) dst[i] = src[i] * s;
  }
  if (Tape<S>* tape = tape_of<S>({&x})) {
    tape->record({x}, out, [x, scales, N, inner](const std::vector<S>& g) {
      if (!grad_enabled(x)) return;
      auto& xg = const_cast<Tensor<S>&>(x).mutable_grad();
      for (int64_t n = 0; n < N; ++n) {
        S s = scales[n];
        if (s == S(0)) continue;
        const S* gs = g.data() + n * inner;
        S* xd = xg.data() + n * inner;
        for (int64_t i = 0; i < inner; ++i) xd[i] += gs[i] * s;
      }
    });
  }
  return out;
}

// ----- explicit instantiations -----

#define GAITFORGE_INSTANTIATE_OPS(S)                                          \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);              \
  template Tensor<S> sub<S>(const Tensor<S>&, const Tensor<S>&);              \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);              \
  template Tensor<S> add_scalar<S>(const Tensor<S>&, S);                      \
  template Tensor<S> mul_scalar<S>(const Tensor<S>&, S);                      \
  template Tensor<S> relu<S>(const Tensor<S>&);                               \
  template Tensor<S> gelu<S>(const Tensor<S>&);                               \
  template Tensor<S> reshape<S>(const Tensor<S>&, Shape);                     \
  template Tensor<S> permute<S>(const Tensor<S>&, const std::vector<int>&);   \
  template Tensor<S> slice<S>(const Tensor<S>&, int, int64_t, int64_t);       \
  template Tensor<S> stack<S>(const std::vector<Tensor<S>>&, int);            \
  template Tensor<S> index_select<S>(const Tensor<S>&,                        \
                                     const std::vector<int64_t>&);            \
  template MaxOut<S> max_over_axis<S>(const Tensor<S>&, int);                 \
  template Tensor<S> mean_over_axis<S>(const Tensor<S>&, int);                \
  template Tensor<S> sum_all<S>(const Tensor<S>&);                            \
  template Tensor<S> mean_all<S>(const Tensor<S>&);                           \
  template Tensor<S> softmax<S>(const Tensor<S>&, int);                       \
  template Tensor<S> cross_entropy<S>(const Tensor<S>&,                       \
                                      const std::vector<int64_t>&);           \
  template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&, bool,      \
                               bool);                                         \
  template Tensor<S> linear<S>(const Tensor<S>&, const Tensor<S>&,            \
                               const Tensor<S>&);                             \
  template Tensor<S> conv2d<S>(const Tensor<S>&, const Tensor<S>&,            \
                               std::array<int64_t, 2>,                        \
                               std::array<int64_t, 2>);                       \
  template Tensor<S> conv3d<S>(const Tensor<S>&, const Tensor<S>&,            \
                               std::array<int64_t, 3>,                        \
                               std::array<int64_t, 3>);                       \
  template Tensor<S> conv1d_temporal<S>(const Tensor<S>&, const Tensor<S>&);  \
  template Tensor<S> batch_norm<S>(const Tensor<S>&, const Tensor<S>&,        \
                                   const Tensor<S>&, Tensor<S>&, Tensor<S>&,  \
                                   Mode, double, double, int);                \
  template Tensor<S> layer_norm<S>(const Tensor<S>&, const Tensor<S>&,        \
                                   const Tensor<S>&, double);                 \
  template Tensor<S> bilinear_resize<S>(const Tensor<S>&, int64_t, int64_t);  \
  template Tensor<S> drop_path<S>(const Tensor<S>&, double, Mode, Rng*);

GAITFORGE_INSTANTIATE_OPS(float)
GAITFORGE_INSTANTIATE_OPS(double)

#undef GAITFORGE_INSTANTIATE_OPS

}  // namespace gaitforge::ops
