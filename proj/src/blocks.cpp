#include "gaitforge/blocks.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <string>

namespace gaitforge::nn {

using ops::add;
using ops::batch_norm;
using ops::conv1d_temporal;
using ops::conv2d;
using ops::conv3d;
using ops::drop_path;
using ops::gelu;
using ops::index_select;
using ops::layer_norm;
using ops::linear;
using ops::matmul;
using ops::mul_scalar;
using ops::permute;
using ops::relu;
using ops::reshape;
using ops::slice;
using ops::softmax;

void validate_block_spec(const BlockSpec& spec) {
  check(spec.in_channels > 0 && spec.out_channels > 0,
        "block channels must be positive");
  check(spec.stride == 1 || spec.stride == 2,
        "block stride must be 1 or 2, got " + std::to_string(spec.stride));
  bool swin = spec.kind == BlockKind::Swin2D || spec.kind == BlockKind::Swin3D;
  if (swin) {
    check(spec.in_channels == spec.out_channels,
          "swin blocks do not change channel count");
    check(spec.stride == 1, "swin blocks do not stride");
    for (int64_t w : spec.window) check(w >= 1, "window extents must be >= 1");
    if (spec.kind == BlockKind::Swin2D)
      check(spec.window[0] == 1, "Swin2D requires a temporal window of 1");
    check(spec.heads >= 1, "attention needs at least one head");
    check(spec.out_channels % spec.heads == 0,
          "channels must divide evenly across heads");
  }
  check(spec.drop_path_rate >= 0.0 && spec.drop_path_rate < 1.0,
        "drop_path_rate must lie in [0, 1)");
}

// ---------------------------------------------------------------------------
// residual conv blocks
// ---------------------------------------------------------------------------

namespace {

template <typename S>
Tensor<S> apply_bn(const Tensor<S>& x, const BatchNormParams<S>& p, Ctx<S>& c) {
  auto& mp = const_cast<BatchNormParams<S>&>(p);
  return batch_norm(x, p.scale, p.shift, mp.running_mean, mp.running_var,
                    c.mode);
}

// Shortcut path: identity, or 1x1 strided projection + BN.
template <typename S>
Tensor<S> shortcut(const Tensor<S>& x, const BlockSpec& spec,
                   const ConvBlockParams<S>& p, Ctx<S>& ctx) {
  if (!p.projection) return x;
  Tensor<S> s;
  if (x.rank() == 4) {
    s = conv2d(x, p.down_w, {spec.stride, spec.stride}, {0, 0});
  } else {
    s = conv3d(x, p.down_w, {1, spec.stride, spec.stride}, {0, 0, 0});
  }
  return apply_bn(s, p.down_bn, ctx);
}

}  // namespace

template <typename S>
Tensor<S> residual_block(const Tensor<S>& x, const BlockSpec& spec,
                         const ConvBlockParams<S>& p, Ctx<S>& ctx) {
  validate_block_spec(spec);
  check(spec.kind == BlockKind::Res2D || spec.kind == BlockKind::Res3D ||
            spec.kind == BlockKind::ResP3D,
        "residual_block expects a conv block kind");
  bool five_d = x.rank() == 5;
  check(five_d || x.rank() == 4, "residual_block expects rank 4 or 5 input");
  if (spec.kind != BlockKind::Res2D)
    check(five_d, "3D/P3D blocks require [N, C, T, H, W] input");
  check(x.dim(1) == spec.in_channels,
        "input channel count does not match block spec");

  Tensor<S> h;
  const int64_t s = spec.stride;
  if (!five_d) {
    // True 2-D convolution over [B, C, H, W].
    h = conv2d(x, p.conv1_w, {s, s}, {1, 1});
    h = relu(apply_bn(h, p.bn1, ctx));
    h = conv2d(h, p.conv2_w, {1, 1}, {1, 1});
  } else if (spec.kind == BlockKind::Res3D) {
    h = conv3d(x, p.conv1_w, {1, s, s}, {1, 1, 1});
    h = relu(apply_bn(h, p.bn1, ctx));
    h = conv3d(h, p.conv2_w, {1, 1, 1}, {1, 1, 1});
  } else {
    // Res2D on rank-5 input (per-frame (1,3,3) kernels) and the spatial part
    // of ResP3D share the same plan.
    h = conv3d(x, p.conv1_w, {1, s, s}, {0, 1, 1});
    h = relu(apply_bn(h, p.bn1, ctx));
    h = conv3d(h, p.conv2_w, {1, 1, 1}, {0, 1, 1});
    if (spec.kind == BlockKind::ResP3D) h = conv1d_temporal(h, p.tconv_w);
  }
  h = apply_bn(h, p.bn2, ctx);
  // Stochastic depth applies to the residual branch, never the shortcut.
  if (spec.drop_path_rate > 0.0)
    h = drop_path(h, spec.drop_path_rate, ctx.mode, ctx.rng);
  return relu(add(h, shortcut(x, spec, p, ctx)));
}

// ---------------------------------------------------------------------------
// shifted windows
// ---------------------------------------------------------------------------

WindowLayout make_window_layout(std::array<int64_t, 3> grid,
                                std::array<int64_t, 3> window,
                                std::array<int64_t, 3> shift) {
  WindowLayout lay;
  lay.grid = grid;
  for (int a = 0; a < 3; ++a) {
    check(grid[a] >= 1, "token grid extents must be >= 1");
    check(window[a] >= 1, "window extents must be >= 1");
    check(shift[a] >= 0 && shift[a] < window[a],
          "window shift must lie in [0, window)");
    // An axis the window already covers is neither padded nor shifted.
    if (grid[a] <= window[a]) {
      window[a] = grid[a];
      shift[a] = 0;
    }
  }
  lay.window = window;
  lay.shift = shift;
  int64_t wpi = 1, wl = 1;
  bool any_pad = false, any_shift = false;
  for (int a = 0; a < 3; ++a) {
    int64_t nwin = (grid[a] + window[a] - 1) / window[a];
    lay.padded[a] = nwin * window[a];
    wpi *= nwin;
    wl *= window[a];
    any_pad |= lay.padded[a] != grid[a];
    any_shift |= shift[a] > 0;
  }
  lay.windows_per_item = wpi;
  lay.win_len = wl;
  lay.needs_mask = any_pad || any_shift;
  lay.gather.assign(wpi * wl, -1);
  lay.region.assign(wpi * wl, -1);

  const auto [gt, gh, gw] = grid;
  const auto [pt, ph, pw] = lay.padded;
  const auto [wt, wh, ww] = window;
  // Band id per padded post-shift coordinate: the classic three slices
  // (bulk, tail-of-last-window, wrapped head) per shifted axis.
  auto band = [](int64_t i, int64_t p, int64_t w, int64_t s) -> int64_t {
    if (s == 0) return 0;
    if (i < p - w) return 0;
    return i < p - s ? 1 : 2;
  };
  int64_t idx = 0;
  for (int64_t bt = 0; bt < pt / wt; ++bt)
    for (int64_t bh = 0; bh < ph / wh; ++bh)
      for (int64_t bw = 0; bw < pw / ww; ++bw)
        for (int64_t it = 0; it < wt; ++it)
          for (int64_t ih = 0; ih < wh; ++ih)
            for (int64_t iw = 0; iw < ww; ++iw, ++idx) {
              // Post-shift padded coordinates of this window cell.
              int64_t ct = bt * wt + it;
              int64_t ch = bh * wh + ih;
              int64_t cw = bw * ww + iw;
              // The cyclic shift rolls content by -shift, so the source
              // sits shift further along, wrapping over the padded extent.
              int64_t st = (ct + lay.shift[0]) % pt;
              int64_t sh = (ch + lay.shift[1]) % ph;
              int64_t sw = (cw + lay.shift[2]) % pw;
              if (st < gt && sh < gh && sw < gw) {
                lay.gather[idx] = (st * gh + sh) * gw + sw;
                lay.region[idx] = (band(ct, pt, wt, lay.shift[0]) * 3 +
                                   band(ch, ph, wh, lay.shift[1])) *
                                      3 +
                                  band(cw, pw, ww, lay.shift[2]);
              }
            }
  return lay;
}

template <typename S>
Tensor<S> window_partition(const Tensor<S>& tokens, const WindowLayout& lay) {
  check(tokens.rank() == 5, "window_partition expects [N, T, H, W, D] tokens");
  check(tokens.dim(1) == lay.grid[0] && tokens.dim(2) == lay.grid[1] &&
            tokens.dim(3) == lay.grid[2],
        "token grid does not match window layout");
  const int64_t n = tokens.dim(0), d = tokens.dim(4);
  const int64_t wpi = lay.windows_per_item, wl = lay.win_len;
  const int64_t cells = wpi * wl;
  const int64_t item = lay.grid[0] * lay.grid[1] * lay.grid[2];
  Tensor<S> out = Tensor<S>::zeros({n * wpi, wl, d});
  const S* px = tokens.data();
  S* po = out.data();
  const int64_t* map = lay.gather.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t c = 0; c < cells; ++c)
      if (map[c] >= 0)
        std::memcpy(po + (i * cells + c) * d, px + (i * item + map[c]) * d,
                    sizeof(S) * static_cast<size_t>(d));
  if (Tape<S>* tape = tape_of<S>({&tokens})) {
    std::vector<int64_t> gather = lay.gather;
    tape->record({tokens}, out,
                 [tokens, gather, n, d, cells, item](const std::vector<S>& g) {
                   if (!grad_enabled(tokens)) return;
                   auto& xg = const_cast<Tensor<S>&>(tokens).mutable_grad();
                   for (int64_t i = 0; i < n; ++i)
                     for (int64_t c = 0; c < cells; ++c) {
                       if (gather[c] < 0) continue;
                       S* dst = xg.data() + (i * item + gather[c]) * d;
                       const S* src = g.data() + (i * cells + c) * d;
                       for (int64_t k = 0; k < d; ++k) dst[k] += src[k];
                     }
                 });
  }
  return out;
}

template <typename S>
Tensor<S> window_reverse(const Tensor<S>& windows, const WindowLayout& lay,
                         int64_t n_items) {
  check(windows.rank() == 3, "window_reverse expects [NW, L, D] windows");
  check(windows.dim(0) == n_items * lay.windows_per_item &&
            windows.dim(1) == lay.win_len,
        "window tensor does not match layout");
  const int64_t d = windows.dim(2);
  const int64_t cells = lay.windows_per_item * lay.win_len;
  const int64_t item = lay.grid[0] * lay.grid[1] * lay.grid[2];
  Tensor<S> out =
      Tensor<S>::zeros({n_items, lay.grid[0], lay.grid[1], lay.grid[2], d});
  const S* px = windows.data();
  S* po = out.data();
  const int64_t* map = lay.gather.data();
  for (int64_t i = 0; i < n_items; ++i)
    for (int64_t c = 0; c < cells; ++c)
      if (map[c] >= 0)
        std::memcpy(po + (i * item + map[c]) * d, px + (i * cells + c) * d,
                    sizeof(S) * static_cast<size_t>(d));
  if (Tape<S>* tape = tape_of<S>({&windows})) {
    std::vector<int64_t> gather = lay.gather;
    tape->record({windows}, out,
                 [windows, gather, n_items, d, cells,
                  item](const std::vector<S>& g) {
                   if (!grad_enabled(windows)) return;
                   auto& xg = const_cast<Tensor<S>&>(windows).mutable_grad();
                   for (int64_t i = 0; i < n_items; ++i)
                     for (int64_t c = 0; c < cells; ++c) {
                       if (gather[c] < 0) continue;
                       S* dst = xg.data() + (i * cells + c) * d;
                       const S* src = g.data() + (i * item + gather[c]) * d;
                       for (int64_t k = 0; k < d; ++k) dst[k] += src[k];
                     }
                 });
  }
  return out;
}

template <typename S>
Tensor<S> attention_mask(const WindowLayout& lay) {
  if (!lay.needs_mask) return Tensor<S>();
  const int64_t wpi = lay.windows_per_item, wl = lay.win_len;
  Tensor<S> mask = Tensor<S>::zeros({wpi, wl, wl});
  const S ninf = -std::numeric_limits<S>::infinity();
  S* pm = mask.data();
  for (int64_t w = 0; w < wpi; ++w) {
    const int64_t* reg = lay.region.data() + w * wl;
    for (int64_t i = 0; i < wl; ++i)
      for (int64_t j = 0; j < wl; ++j)
        if (reg[i] < 0 || reg[j] < 0 || reg[i] != reg[j])
          pm[(w * wl + i) * wl + j] = ninf;
  }
  return mask;
}

// ---------------------------------------------------------------------------
// window attention / swin block
// ---------------------------------------------------------------------------

std::vector<int64_t> relative_position_index(
    std::array<int64_t, 3> window, std::array<int64_t, 3> table_window) {
  const auto [wt, wh, ww] = window;
  auto [twt, twh, tww] = table_window;
  if (twt == 0 && twh == 0 && tww == 0) {
    twt = wt;
    twh = wh;
    tww = ww;
  }
  check(wt <= twt && wh <= twh && ww <= tww,
        "effective window exceeds bias table window");
  const int64_t l = wt * wh * ww;
  std::vector<int64_t> out(static_cast<size_t>(l) * l);
  auto coord = [&](int64_t c, int64_t& t, int64_t& h, int64_t& w) {
    t = c / (wh * ww);
    h = (c / ww) % wh;
    w = c % ww;
  };
  for (int64_t i = 0; i < l; ++i)
    for (int64_t j = 0; j < l; ++j) {
      int64_t ti, hi, wi, tj, hj, wj;
      coord(i, ti, hi, wi);
      coord(j, tj, hj, wj);
      int64_t rt = ti - tj + twt - 1;
      int64_t rh = hi - hj + twh - 1;
      int64_t rw = wi - wj + tww - 1;
      out[static_cast<size_t>(i * l + j)] =
          (rt * (2 * twh - 1) + rh) * (2 * tww - 1) + rw;
    }
  return out;
}

template <typename S>
Tensor<S> window_attention(const Tensor<S>& windows, const Tensor<S>& mask,
                           const WindowAttentionParams<S>& p, int64_t heads,
                           int64_t windows_per_item) {
  check(windows.rank() == 3, "window_attention expects [NW, L, D] windows");
  const int64_t nw = windows.dim(0), l = windows.dim(1), d = windows.dim(2);
  check(d % heads == 0, "channels must divide evenly across heads");
  check(nw % windows_per_item == 0,
        "window count is not a multiple of windows per item");
  const int64_t hd = d / heads;
  const int64_t n_items = nw / windows_per_item;

  Tensor<S> qkv = linear(reshape(windows, {nw * l, d}), p.qkv_w, p.qkv_b);
  qkv = reshape(qkv, {nw, l, 3 * d});
  auto head_split = [&](int64_t part) {
    Tensor<S> t = slice(qkv, 2, part * d, d);        // [NW, L, D]
    t = reshape(t, {nw, l, heads, hd});
    return permute(t, {0, 2, 1, 3});                 // [NW, heads, L, hd]
  };
  Tensor<S> q = head_split(0), k = head_split(1), v = head_split(2);
  q = mul_scalar(q, static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd))));
  Tensor<S> attn = matmul(q, k, false, true);        // [NW, heads, L, L]

  // Learned relative-position bias, shared across windows.
  check(static_cast<int64_t>(p.rel_index.size()) == l * l,
        "relative position index does not match window length");
  Tensor<S> bias = index_select(p.rel_bias, p.rel_index);  // [L*L, heads]
  bias = permute(reshape(bias, {l, l, heads}), {2, 0, 1});
  bias = reshape(bias, {1, heads, l, l});
  attn = add(attn, bias);

  if (mask.impl) {
    check(mask.dim(0) == windows_per_item && mask.dim(1) == l,
          "attention mask does not match layout");
    attn = reshape(attn, {n_items, windows_per_item, heads, l, l});
    attn = add(attn, reshape(mask, {1, windows_per_item, 1, l, l}));
    attn = reshape(attn, {nw, heads, l, l});
  }
  attn = softmax(attn, -1);
  Tensor<S> out = matmul(attn, v);                   // [NW, heads, L, hd]
  out = reshape(permute(out, {0, 2, 1, 3}), {nw * l, d});
  out = linear(out, p.proj_w, p.proj_b);
  return reshape(out, {nw, l, d});
}

template <typename S>
Tensor<S> swin_block(const Tensor<S>& tokens, const BlockSpec& spec,
                     const SwinBlockParams<S>& p, Ctx<S>& ctx) {
  validate_block_spec(spec);
  check(spec.kind == BlockKind::Swin2D || spec.kind == BlockKind::Swin3D,
        "swin_block expects a swin block kind");
  check(tokens.rank() == 5, "swin_block expects [N, T, H, W, D] tokens");
  check(tokens.dim(4) == spec.in_channels,
        "token dim does not match block spec");
  const int64_t n = tokens.dim(0);
  std::array<int64_t, 3> grid{tokens.dim(1), tokens.dim(2), tokens.dim(3)};
  std::array<int64_t, 3> shift{0, 0, 0};
  if (spec.shifted)
    for (int a = 0; a < 3; ++a) shift[a] = spec.window[a] / 2;
  WindowLayout lay = make_window_layout(grid, spec.window, shift);
  Tensor<S> mask = attention_mask<S>(lay);
  // A grid shorter than the window clamps the layout; re-derive the bias
  // lookup for the effective window against the full configured table.
  const WindowAttentionParams<S>* attn = &p.attn;
  WindowAttentionParams<S> clamped;
  if (lay.window != spec.window) {
    clamped = p.attn;
    clamped.rel_index = relative_position_index(lay.window, spec.window);
    attn = &clamped;
  }

  // Pre-norm attention with a residual connection.
  Tensor<S> h = layer_norm(tokens, p.ln1.scale, p.ln1.shift);
  h = window_partition(h, lay);
  h = window_attention(h, mask, *attn, spec.heads, lay.windows_per_item);
  h = window_reverse(h, lay, n);
  h = drop_path(h, spec.drop_path_rate, ctx.mode, ctx.rng);
  Tensor<S> x = add(tokens, h);

  // Pre-norm MLP (expansion 4, GELU) with a residual connection.
  Tensor<S> m = layer_norm(x, p.ln2.scale, p.ln2.shift);
  const int64_t d = spec.in_channels;
  m = reshape(m, {-1, d});
  m = linear(m, p.fc1_w, p.fc1_b);
  m = gelu(m);
  m = linear(m, p.fc2_w, p.fc2_b);
  m = reshape(m, {n, grid[0], grid[1], grid[2], d});
  m = drop_path(m, spec.drop_path_rate, ctx.mode, ctx.rng);
  return add(x, m);
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

template <typename S>
BatchNormParams<S> init_batch_norm(int64_t channels) {
  BatchNormParams<S> p;
  p.scale = Tensor<S>::ones({channels});
  p.shift = Tensor<S>::zeros({channels});
  p.running_mean = Tensor<S>::zeros({channels});
  p.running_var = Tensor<S>::ones({channels});
  return p;
}

template <typename S>
Tensor<S> fan_in_normal(const Shape& shape, double gain, Rng& rng) {
  int64_t fan = 1;
  for (size_t i = 1; i < shape.size(); ++i) fan *= shape[i];
  return Tensor<S>::randn(shape, rng, std::sqrt(gain / double(fan)));
}

template <typename S>
ConvBlockParams<S> init_conv_block(const BlockSpec& spec, bool five_d,
                                   Rng& rng) {
  validate_block_spec(spec);
  const int64_t ci = spec.in_channels, co = spec.out_channels;
  ConvBlockParams<S> p;
  auto conv_w = [&](int64_t o, int64_t i, int64_t kt, int64_t kh, int64_t kw) {
    Shape sh = five_d ? Shape{o, i, kt, kh, kw} : Shape{o, i, kh, kw};
    return fan_in_normal<S>(sh, 2.0, rng);
  };
  int64_t kt = spec.kind == BlockKind::Res3D ? 3 : 1;
  p.conv1_w = conv_w(co, ci, kt, 3, 3);
  p.bn1 = init_batch_norm<S>(co);
  p.conv2_w = conv_w(co, co, kt, 3, 3);
  if (spec.kind == BlockKind::ResP3D)
    p.tconv_w = fan_in_normal<S>({co, co, 3}, 2.0, rng);
  p.bn2 = init_batch_norm<S>(co);
  p.projection = ci != co || spec.stride != 1;
  if (p.projection) {
    p.down_w = conv_w(co, ci, 1, 1, 1);
    p.down_bn = init_batch_norm<S>(co);
  }
  return p;
}

template <typename S>
SwinBlockParams<S> init_swin_block(const BlockSpec& spec, int64_t dim,
                                   Rng& rng) {
  validate_block_spec(spec);
  check(dim == spec.in_channels, "swin dim must match block channels");
  SwinBlockParams<S> p;
  p.ln1 = {Tensor<S>::ones({dim}), Tensor<S>::zeros({dim})};
  p.ln2 = {Tensor<S>::ones({dim}), Tensor<S>::zeros({dim})};
  p.attn.qkv_w = fan_in_normal<S>({3 * dim, dim}, 1.0, rng);
  p.attn.qkv_b = Tensor<S>::zeros({3 * dim});
  p.attn.proj_w = fan_in_normal<S>({dim, dim}, 1.0, rng);
  p.attn.proj_b = Tensor<S>::zeros({dim});
  const auto [wt, wh, ww] = spec.window;
  int64_t rows = (2 * wt - 1) * (2 * wh - 1) * (2 * ww - 1);
  p.attn.rel_bias = Tensor<S>::randn({rows, spec.heads}, rng, 0.02);
  p.attn.rel_index = relative_position_index(spec.window);
  p.fc1_w = fan_in_normal<S>({4 * dim, dim}, 1.0, rng);
  p.fc1_b = Tensor<S>::zeros({4 * dim});
  p.fc2_w = fan_in_normal<S>({dim, 4 * dim}, 1.0, rng);
  p.fc2_b = Tensor<S>::zeros({dim});
  return p;
}

#define GAITFORGE_INSTANTIATE_BLOCKS(S)                                       \
  template Tensor<S> residual_block<S>(const Tensor<S>&, const BlockSpec&,    \
                                       const ConvBlockParams<S>&, Ctx<S>&);   \
  template Tensor<S> window_partition<S>(const Tensor<S>&,                    \
                                         const WindowLayout&);                \
  template Tensor<S> window_reverse<S>(const Tensor<S>&, const WindowLayout&, \
                                       int64_t);                              \
  template Tensor<S> attention_mask<S>(const WindowLayout&);                  \
  template Tensor<S> window_attention<S>(const Tensor<S>&, const Tensor<S>&,  \
                                         const WindowAttentionParams<S>&,     \
                                         int64_t, int64_t);                   \
  template Tensor<S> swin_block<S>(const Tensor<S>&, const BlockSpec&,        \
                                   const SwinBlockParams<S>&, Ctx<S>&);       \
  template Tensor<S> fan_in_normal<S>(const Shape&, double, Rng&);            \
  template BatchNormParams<S> init_batch_norm<S>(int64_t);                    \
  template ConvBlockParams<S> init_conv_block<S>(const BlockSpec&, bool,      \
                                                 Rng&);                       \
  template SwinBlockParams<S> init_swin_block<S>(const BlockSpec&, int64_t,   \
                                                 Rng&);

GAITFORGE_INSTANTIATE_BLOCKS(float)
GAITFORGE_INSTANTIATE_BLOCKS(double)

}  // namespace gaitforge::nn
