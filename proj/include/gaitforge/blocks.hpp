#pragma once

// Neural building blocks: pre-activation conv residual blocks (2D/3D/P3D)
// and shifted-window attention blocks over [N, T, H, W, D] token grids.

#include <array>
#include <vector>

#include "gaitforge/ops.hpp"
#include "gaitforge/tensor.hpp"

namespace gaitforge::nn {

enum class BlockKind { Res2D, Res3D, ResP3D, Swin2D, Swin3D };

struct BlockSpec {
  BlockKind kind = BlockKind::Res2D;
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  int64_t stride = 1;  // spatial stride (conv kinds; first block of a stage)
  std::array<int64_t, 3> window{1, 1, 1};  // (wt, wh, ww), Swin kinds
  bool shifted = false;                    // Swin kinds: odd-indexed blocks
  int64_t heads = 1;                       // Swin kinds
  double drop_path_rate = 0.0;
};

void validate_block_spec(const BlockSpec& spec);

// Forward-pass context threaded through every block.
template <typename S>
struct Ctx {
  Tape<S>* tape = nullptr;
  Mode mode = Mode::Eval;
  Rng* rng = nullptr;
};

template <typename S>
struct BatchNormParams {
  Tensor<S> scale, shift;
  Tensor<S> running_mean, running_var;  // state, not learnable
};

template <typename S>
struct ConvBlockParams {
  Tensor<S> conv1_w;
  BatchNormParams<S> bn1;
  Tensor<S> conv2_w;
  Tensor<S> tconv_w;  // P3D only: [Cout, Cout, 3] temporal mixer
  BatchNormParams<S> bn2;
  bool projection = false;  // 1x1(+BN) shortcut when channels/stride change
  Tensor<S> down_w;
  BatchNormParams<S> down_bn;
};

template <typename S>
struct LayerNormParams {
  Tensor<S> scale, shift;
};

template <typename S>
struct WindowAttentionParams {
  Tensor<S> qkv_w, qkv_b;    // [3D, D], [3D]
  Tensor<S> proj_w, proj_b;  // [D, D], [D]
  Tensor<S> rel_bias;        // [(2wt-1)(2wh-1)(2ww-1), heads]
  std::vector<int64_t> rel_index;  // [L*L] lookup into rel_bias rows
};

template <typename S>
struct SwinBlockParams {
  LayerNormParams<S> ln1, ln2;
  WindowAttentionParams<S> attn;
  Tensor<S> fc1_w, fc1_b;  // [4D, D], [4D]
  Tensor<S> fc2_w, fc2_b;  // [D, 4D], [D]
};

// ----- residual conv blocks -----
// Branch: conv -> BN -> ReLU -> conv(s) -> BN; output relu(shortcut + branch).
// Res2D accepts [B, C, H, W] (true 2-D conv) or [N, C, T, H, W] (per-frame
// (1,3,3) kernels); Res3D/ResP3D require [N, C, T, H, W].
template <typename S>
Tensor<S> residual_block(const Tensor<S>& x, const BlockSpec& spec,
                         const ConvBlockParams<S>& p, Ctx<S>& ctx);

// ----- shifted-window machinery -----
struct WindowLayout {
  std::array<int64_t, 3> grid{};    // (T, H, W) tokens
  std::array<int64_t, 3> padded{};  // rounded up to window multiples
  std::array<int64_t, 3> window{};
  std::array<int64_t, 3> shift{};
  int64_t windows_per_item = 0;
  int64_t win_len = 0;
  // For each (window, cell): source token index in the (T, H, W) grid, or -1
  // for padding cells.
  std::vector<int64_t> gather;
  // Contiguity region id per (window, cell); -1 for padding. Pairs with
  // differing ids must not attend to each other.
  std::vector<int64_t> region;
  bool needs_mask = false;
};

WindowLayout make_window_layout(std::array<int64_t, 3> grid,
                                std::array<int64_t, 3> window,
                                std::array<int64_t, 3> shift);

// tokens [N, T, H, W, D] -> windows [N * windows_per_item, win_len, D];
// cyclic shift and zero padding are folded into the gather map.
template <typename S>
Tensor<S> window_partition(const Tensor<S>& tokens, const WindowLayout& lay);

// Exact inverse of window_partition (padding cells dropped).
template <typename S>
Tensor<S> window_reverse(const Tensor<S>& windows, const WindowLayout& lay,
                         int64_t n_items);

// Additive attention mask [windows_per_item, L, L]: 0 where attention is
// permitted, -inf across shifted-region or real<->pad pairs. Undefined tensor
// when no masking is needed.
template <typename S>
Tensor<S> attention_mask(const WindowLayout& lay);

// windows [NW, L, D] -> windows [NW, L, D]; mask may be undefined.
template <typename S>
Tensor<S> window_attention(const Tensor<S>& windows, const Tensor<S>& mask,
                           const WindowAttentionParams<S>& p, int64_t heads,
                           int64_t windows_per_item);

// Full Swin block over tokens [N, T, H, W, D]: LN -> windowed attention ->
// residual, LN -> MLP(GELU, ratio 4) -> residual, with drop-path on both
// branches.
template <typename S>
Tensor<S> swin_block(const Tensor<S>& tokens, const BlockSpec& spec,
                     const SwinBlockParams<S>& p, Ctx<S>& ctx);

// ----- initialization -----
// Fan-in scaled zero-mean normals for conv/linear weights; BN/LN at (1, 0);
// running stats at (0, 1).
// Zero-mean normal with stddev sqrt(gain / fan_in); fan_in = product of all
// extents but the first. gain 2 for relu-followed convs, 1 for linears.
template <typename S>
Tensor<S> fan_in_normal(const Shape& shape, double gain, Rng& rng);
template <typename S>
BatchNormParams<S> init_batch_norm(int64_t channels);
template <typename S>
ConvBlockParams<S> init_conv_block(const BlockSpec& spec, bool five_d,
                                   Rng& rng);
template <typename S>
SwinBlockParams<S> init_swin_block(const BlockSpec& spec, int64_t dim,
                                   Rng& rng);

// Relative-position index for a (wt, wh, ww) window; length L*L. The indices
// address a bias table laid out for `table_window` (all zeros: same window),
// so a clamped effective window can reuse the full configured table.
std::vector<int64_t> relative_position_index(
    std::array<int64_t, 3> window,
    std::array<int64_t, 3> table_window = {0, 0, 0});

}  // namespace gaitforge::nn
