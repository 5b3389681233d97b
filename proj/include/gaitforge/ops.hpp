#pragma once

// Differentiable tensor operations. Every op is tape-aware: when any input is
// attached to a live tape the op records a node whose backward accumulates
// into the inputs' gradient buffers; otherwise it is a plain eager kernel.

#include <array>
#include <utility>
#include <vector>

#include "gaitforge/tensor.hpp"

namespace gaitforge::ops {

// ----- elementwise / broadcast -----
// add/sub/mul broadcast with numpy alignment rules (trailing axes aligned;
// extents must match or be 1).
template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c);
template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c);
template <typename S>
Tensor<S> relu(const Tensor<S>& x);
template <typename S>
Tensor<S> gelu(const Tensor<S>& x);  // exact erf form

// ----- shape manipulation -----
// Shares storage; one extent may be -1 (inferred).
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape);
template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& dims);
template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, int64_t start, int64_t len);
// Stacks equally shaped tensors along a fresh axis at position `axis`.
template <typename S>
Tensor<S> stack(const std::vector<Tensor<S>>& xs, int axis);
// Rows of `table` ([R, ...]) gathered by index; duplicate indices allowed.
template <typename S>
Tensor<S> index_select(const Tensor<S>& table,
                       const std::vector<int64_t>& indices);

// ----- reductions -----
template <typename S>
struct MaxOut {
  Tensor<S> values;              // input shape with `axis` removed
  std::vector<int64_t> argmax;   // first maximal index along `axis`
};
template <typename S>
MaxOut<S> max_over_axis(const Tensor<S>& x, int axis);
template <typename S>
Tensor<S> mean_over_axis(const Tensor<S>& x, int axis);
template <typename S>
Tensor<S> sum_all(const Tensor<S>& x);
template <typename S>
Tensor<S> mean_all(const Tensor<S>& x);

// ----- softmax / losses -----
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis);
// Mean NLL over rows of logits [M, K]; labels in [0, K).
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits,
                        const std::vector<int64_t>& labels);

// ----- dense linear algebra -----
// Batched matmul: a [*, M, K] x b [*, K, N] with optional transposes of the
// trailing two axes; leading (batch) extents must match exactly.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false,
                 bool trans_b = false);
// x [..., Din] * w^T + b, w [Dout, Din], b [Dout] or undefined for no bias.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b);

// ----- convolution -----
// x [N, Cin, H, W], w [Cout, Cin, kh, kw]. Output extent floor((X+2p-k)/s)+1.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w,
                 std::array<int64_t, 2> stride, std::array<int64_t, 2> pad);
// x [N, Cin, T, H, W], w [Cout, Cin, kt, kh, kw].
template <typename S>
Tensor<S> conv3d(const Tensor<S>& x, const Tensor<S>& w,
                 std::array<int64_t, 3> stride, std::array<int64_t, 3> pad);
// Temporal-only conv over x [N, C, T, H, W] with w [Cout, Cin, kt], kt odd,
// stride 1, symmetric zero padding kt/2 (temporal extent preserved).
template <typename S>
Tensor<S> conv1d_temporal(const Tensor<S>& x, const Tensor<S>& w);

// ----- normalization -----
// Batch normalization over all axes except `channel_axis`. In Train mode the
// batch statistics normalize and the running stats are updated in place
// (momentum `momentum`, unbiased variance); in Eval mode the running stats
// normalize and must be defined.
template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& scale,
                     const Tensor<S>& shift, Tensor<S>& running_mean,
                     Tensor<S>& running_var, Mode mode, double momentum = 0.1,
                     double eps = 1e-5, int channel_axis = 1);
// Layer normalization over the last axis.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& scale,
                     const Tensor<S>& shift, double eps = 1e-5);

// ----- resampling -----
// Per-frame bilinear resize of x [N, C, H, W] to (out_h, out_w), half-pixel
// center alignment.
template <typename S>
Tensor<S> bilinear_resize(const Tensor<S>& x, int64_t out_h, int64_t out_w);

// ----- stochastic depth -----
// Per-sample (axis 0) branch drop. Train mode zeroes a sample's slice with
// probability `rate` and scales survivors by 1/(1-rate); eval is identity.
template <typename S>
Tensor<S> drop_path(const Tensor<S>& x, double rate, Mode mode, Rng* rng);

}  // namespace gaitforge::ops
