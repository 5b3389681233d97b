#pragma once

// Reference implementations kept deliberately naive. Tests trust these
// brute-force forms, never the optimized kernels under test.

#include <cmath>
#include <vector>

#include "gaitforge/tensor.hpp"

namespace oracles {

using gaitforge::Shape;
using gaitforge::Tensor;

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  const S* pa = a.data();
  const S* pb = b.data();
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::fabs(static_cast<double>(pa[i]) - pb[i]));
  return m;
}

// Direct 7-loop convolution, floor output extents, zero padding.
template <typename S>
Tensor<S> conv2d_direct(const Tensor<S>& x, const Tensor<S>& w, int64_t sh,
                        int64_t sw, int64_t ph, int64_t pw) {
  int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int64_t Ho = (H + 2 * ph - kh) / sh + 1;
  int64_t Wo = (W + 2 * pw - kw) / sw + 1;
  Tensor<S> out = Tensor<S>::zeros({N, Cout, Ho, Wo});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double acc = 0;
          for (int64_t ci = 0; ci < Cin; ++ci)
            for (int64_t ki = 0; ki < kh; ++ki)
              for (int64_t kj = 0; kj < kw; ++kj) {
                int64_t ih = oh * sh - ph + ki;
                int64_t iw = ow * sw - pw + kj;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += static_cast<double>(x.at({n, ci, ih, iw})) *
                       w.at({co, ci, ki, kj});
              }
          out.data()[((n * Cout + co) * Ho + oh) * Wo + ow] =
              static_cast<S>(acc);
        }
  return out;
}

template <typename S>
Tensor<S> conv3d_direct(const Tensor<S>& x, const Tensor<S>& w, int64_t st,
                        int64_t sh, int64_t sw, int64_t pt, int64_t ph,
                        int64_t pw) {
  int64_t N = x.dim(0), Cin = x.dim(1), T = x.dim(2), H = x.dim(3),
          W = x.dim(4);
  int64_t Cout = w.dim(0), kt = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  int64_t To = (T + 2 * pt - kt) / st + 1;
  int64_t Ho = (H + 2 * ph - kh) / sh + 1;
  int64_t Wo = (W + 2 * pw - kw) / sw + 1;
  Tensor<S> out = Tensor<S>::zeros({N, Cout, To, Ho, Wo});
  S* po = out.data();
  int64_t idx = 0;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t ot = 0; ot < To; ++ot)
        for (int64_t oh = 0; oh < Ho; ++oh)
          for (int64_t ow = 0; ow < Wo; ++ow, ++idx) {
            double acc = 0;
            for (int64_t ci = 0; ci < Cin; ++ci)
              for (int64_t kti = 0; kti < kt; ++kti)
                for (int64_t ki = 0; ki < kh; ++ki)
                  for (int64_t kj = 0; kj < kw; ++kj) {
                    int64_t it = ot * st - pt + kti;
                    int64_t ih = oh * sh - ph + ki;
                    int64_t iw = ow * sw - pw + kj;
                    if (it < 0 || it >= T || ih < 0 || ih >= H || iw < 0 ||
                        iw >= W)
                      continue;
                    acc += static_cast<double>(x.at({n, ci, it, ih, iw})) *
                           w.at({co, ci, kti, ki, kj});
                  }
            po[idx] = static_cast<S>(acc);
          }
  return out;
}

// Plain three-loop matmul of 2-D tensors.
template <typename S>
Tensor<S> matmul2d_direct(const Tensor<S>& a, const Tensor<S>& b) {
  int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  REQUIRE(b.dim(0) == K);
  Tensor<S> out = Tensor<S>::zeros({M, N});
  for (int64_t m = 0; m < M; ++m)
    for (int64_t n = 0; n < N; ++n) {
      double acc = 0;
      for (int64_t k = 0; k < K; ++k)
        acc += static_cast<double>(a.at({m, k})) * b.at({k, n});
      out.data()[m * N + n] = static_cast<S>(acc);
    }
  return out;
}

// Exhaustive softmax along the last axis.
inline std::vector<double> softmax_row(const std::vector<double>& row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  std::vector<double> e(row.size());
  double denom = 0;
  for (size_t i = 0; i < row.size(); ++i) {
    e[i] = std::exp(row[i] - mx);
    denom += e[i];
  }
  for (auto& v : e) v /= denom;
  return e;
}

}  // namespace oracles
