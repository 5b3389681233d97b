#include "gaitforge/backbone.hpp"

#include <algorithm>
#include <string>
#include <unordered_map>

#include "gaitforge/ops.hpp"

namespace gaitforge::backbone {

using nn::BlockKind;
using nn::BlockSpec;

bool is_swin(Family f) {
  return f == Family::SwinGait2D || f == Family::SwinGait3D;
}

std::string family_name(Family f) {
  switch (f) {
    case Family::DeepGait2D: return "deepgaitv2-2d";
    case Family::DeepGait3D: return "deepgaitv2-3d";
    case Family::DeepGaitP3D: return "deepgaitv2-p3d";
    case Family::SwinGait2D: return "swingait-2d";
    case Family::SwinGait3D: return "swingait-3d";
  }
  throw Error("unreachable family");
}

Family family_from_string(const std::string& s) {
  for (Family f : {Family::DeepGait2D, Family::DeepGait3D, Family::DeepGaitP3D,
                   Family::SwinGait2D, Family::SwinGait3D})
    if (family_name(f) == s) return f;
  throw Error("unknown family: " + s +
              " (expected deepgaitv2-{2d,3d,p3d} or swingait-{2d,3d})");
}

std::string conv_kind_name(ConvKind k) {
  switch (k) {
    case ConvKind::Conv2D: return "2d";
    case ConvKind::Conv3D: return "3d";
    case ConvKind::ConvP3D: return "p3d";
  }
  throw Error("unreachable conv kind");
}

ConvKind conv_kind_from_string(const std::string& s) {
  for (ConvKind k : {ConvKind::Conv2D, ConvKind::Conv3D, ConvKind::ConvP3D})
    if (conv_kind_name(k) == s) return k;
  throw Error("unknown conv kind: " + s + " (expected 2d, 3d, or p3d)");
}

ConvKind BackboneConfig::stem_kind() const {
  switch (family) {
    case Family::DeepGait2D: return ConvKind::Conv2D;
    case Family::DeepGait3D: return ConvKind::Conv3D;
    case Family::DeepGaitP3D: return ConvKind::ConvP3D;
    case Family::SwinGait2D:
      return swin_conv_kind_set ? swin_conv_kind : ConvKind::Conv2D;
    case Family::SwinGait3D:
      return swin_conv_kind_set ? swin_conv_kind : ConvKind::Conv3D;
  }
  throw Error("unreachable family");
}

int64_t BackboneConfig::parts() const {
  if (part_count > 0) return part_count;
  return is_swin(family) ? 15 : 16;
}

double BackboneConfig::swin_drop_path() const {
  return drop_path_rate >= 0.0 ? drop_path_rate : 0.1;
}

void validate_config(const BackboneConfig& cfg) {
  check(cfg.base_channels >= 1, "base_channels must be >= 1");
  for (int64_t b : cfg.block_counts)
    check(b >= 1, "every block count must be >= 1");
  check(cfg.input_size[0] >= 8 && cfg.input_size[1] >= 8 &&
            cfg.input_size[0] % 4 == 0 && cfg.input_size[1] % 4 == 0,
        "input size must be at least 8x8 and divisible by 4 (two strided "
        "stages)");
  check(cfg.part_count >= 0, "part_count must be non-negative");
  check(cfg.drop_path_rate < 1.0, "drop_path_rate must be < 1");
  if (cfg.swin_conv_kind_set)
    check(is_swin(cfg.family),
          "swin_conv_kind applies only to SwinGait families");
  int64_t feat_h = is_swin(cfg.family) ? 15 : cfg.input_size[0] / 4;
  check(feat_h % cfg.parts() == 0,
        "part_count " + std::to_string(cfg.parts()) +
            " must divide the feature height " + std::to_string(feat_h));
}

int64_t depth_of(const std::array<int64_t, 4>& b) {
  int64_t sum = 0;
  for (int64_t v : b) {
    check(v >= 1, "every block count must be >= 1");
    sum += v;
  }
  return 2 * sum + 2;
}

namespace {

// Per-stage geometry shared by the builder, planner, and FLOP counter.
struct StagePlan {
  int64_t index;          // 1-based stage number
  BlockKind kind;
  int64_t in_ch, out_ch;
  int64_t stride;         // first block only
  int64_t blocks;
};

// Conv stages for a config: 4 for conv families, 2 for swin stems.
std::vector<StagePlan> conv_stage_plans(const BackboneConfig& cfg) {
  const int64_t c = cfg.base_channels;
  ConvKind stem = cfg.stem_kind();
  BlockKind later = stem == ConvKind::Conv2D   ? BlockKind::Res2D
                    : stem == ConvKind::Conv3D ? BlockKind::Res3D
                                               : BlockKind::ResP3D;
  int64_t n_stages = is_swin(cfg.family) ? 2 : 4;
  const int64_t widths[4] = {c, 2 * c, 4 * c, 8 * c};
  const int64_t strides[4] = {1, 2, 2, 1};
  std::vector<StagePlan> plans;
  int64_t in_ch = c;  // conv0 output width
  for (int64_t s = 0; s < n_stages; ++s) {
    StagePlan p;
    p.index = s + 1;
    // Stage 1 stays 2D in every family; deeper stages take the stem kind.
    p.kind = s == 0 ? BlockKind::Res2D : later;
    p.in_ch = in_ch;
    p.out_ch = widths[s];
    p.stride = strides[s];
    p.blocks = cfg.block_counts[static_cast<size_t>(s)];
    plans.push_back(p);
    in_ch = p.out_ch;
  }
  return plans;
}

std::array<int64_t, 3> swin_window(Family f) {
  return f == Family::SwinGait2D ? std::array<int64_t, 3>{1, 3, 5}
                                 : std::array<int64_t, 3>{3, 3, 5};
}

BlockSpec swin_spec(const BackboneConfig& cfg, int64_t dim, int64_t index) {
  BlockSpec spec;
  spec.kind = cfg.family == Family::SwinGait2D ? BlockKind::Swin2D
                                               : BlockKind::Swin3D;
  spec.in_channels = spec.out_channels = dim;
  spec.window = swin_window(cfg.family);
  spec.shifted = index % 2 == 1;
  spec.heads = std::max<int64_t>(1, dim / 32);
  spec.drop_path_rate = cfg.swin_drop_path();
  return spec;
}

}  // namespace

template <typename S>
Model<S> build_backbone(const BackboneConfig& cfg, Rng& rng) {
  validate_config(cfg);
  Model<S> m;
  m.config = cfg;
  const int64_t c = cfg.base_channels;
  const bool five_d = cfg.stem_kind() != ConvKind::Conv2D;

  auto reg_bn = [&m](const std::string& prefix, nn::BatchNormParams<S>& bn) {
    m.params.add(prefix + ".scale", bn.scale);
    m.params.add(prefix + ".shift", bn.shift);
    m.state.add(prefix + ".running_mean", bn.running_mean);
    m.state.add(prefix + ".running_var", bn.running_var);
  };
  auto reg_ln = [&m](const std::string& prefix, nn::LayerNormParams<S>& ln) {
    m.params.add(prefix + ".scale", ln.scale);
    m.params.add(prefix + ".shift", ln.shift);
  };

  // Conv0: 3x3, stride 1, 1 -> C (temporal-singleton kernel on 3D stems).
  Shape w0 = five_d ? Shape{c, 1, 1, 3, 3} : Shape{c, 1, 3, 3};
  m.conv0_w = nn::fan_in_normal<S>(w0, 2.0, rng);
  m.params.add("conv0.conv_w", m.conv0_w);
  m.conv0_bn = nn::init_batch_norm<S>(c);
  reg_bn("conv0.bn", m.conv0_bn);

  for (const StagePlan& sp : conv_stage_plans(cfg)) {
    ConvStage<S> stage;
    for (int64_t i = 0; i < sp.blocks; ++i) {
      BlockSpec spec;
      spec.kind = sp.kind;
      spec.in_channels = i == 0 ? sp.in_ch : sp.out_ch;
      spec.out_channels = sp.out_ch;
      spec.stride = i == 0 ? sp.stride : 1;
      auto p = nn::init_conv_block<S>(spec, five_d, rng);
      std::string pre =
          "stage" + std::to_string(sp.index) + "." + std::to_string(i);
      m.params.add(pre + ".conv1_w", p.conv1_w);
      reg_bn(pre + ".bn1", p.bn1);
      m.params.add(pre + ".conv2_w", p.conv2_w);
      if (spec.kind == BlockKind::ResP3D)
        m.params.add(pre + ".tconv_w", p.tconv_w);
      reg_bn(pre + ".bn2", p.bn2);
      if (p.projection) {
        m.params.add(pre + ".down_w", p.down_w);
        reg_bn(pre + ".down_bn", p.down_bn);
      }
      stage.specs.push_back(spec);
      stage.blocks.push_back(std::move(p));
    }
    m.conv_stages.push_back(std::move(stage));
  }

  if (is_swin(cfg.family)) {
    const int64_t d3 = 4 * c, d4 = 8 * c;
    auto build_swin_stage = [&](int64_t stage_idx, int64_t dim,
                                int64_t blocks) {
      SwinStage<S> st;
      for (int64_t i = 0; i < blocks; ++i) {
        BlockSpec spec = swin_spec(cfg, dim, i);
        auto p = nn::init_swin_block<S>(spec, dim, rng);
        std::string pre =
            "stage" + std::to_string(stage_idx) + "." + std::to_string(i);
        reg_ln(pre + ".ln1", p.ln1);
        m.params.add(pre + ".attn.qkv_w", p.attn.qkv_w);
        m.params.add(pre + ".attn.qkv_b", p.attn.qkv_b);
        m.params.add(pre + ".attn.proj_w", p.attn.proj_w);
        m.params.add(pre + ".attn.proj_b", p.attn.proj_b);
        m.params.add(pre + ".attn.rel_bias", p.attn.rel_bias);
        reg_ln(pre + ".ln2", p.ln2);
        m.params.add(pre + ".mlp.fc1_w", p.fc1_w);
        m.params.add(pre + ".mlp.fc1_b", p.fc1_b);
        m.params.add(pre + ".mlp.fc2_w", p.fc2_w);
        m.params.add(pre + ".mlp.fc2_b", p.fc2_b);
        st.specs.push_back(spec);
        st.blocks.push_back(std::move(p));
      }
      return st;
    };

    // Tokens carry 8C features (2x2 patches of 2C); embed to 4C, then 8C.
    m.embed3_w = nn::fan_in_normal<S>({d3, 8 * c}, 1.0, rng);
    m.embed3_b = Tensor<S>::zeros({d3});
    m.embed3_ln = {Tensor<S>::ones({d3}), Tensor<S>::zeros({d3})};
    m.params.add("embed3.w", m.embed3_w);
    m.params.add("embed3.b", m.embed3_b);
    reg_ln("embed3.ln", m.embed3_ln);
    m.stage3 = build_swin_stage(3, d3, cfg.block_counts[2]);

    m.embed4_w = nn::fan_in_normal<S>({d4, d3}, 1.0, rng);
    m.embed4_b = Tensor<S>::zeros({d4});
    m.embed4_ln = {Tensor<S>::ones({d4}), Tensor<S>::zeros({d4})};
    m.params.add("embed4.w", m.embed4_w);
    m.params.add("embed4.b", m.embed4_b);
    reg_ln("embed4.ln", m.embed4_ln);
    m.stage4 = build_swin_stage(4, d4, cfg.block_counts[3]);
  }
  return m;
}

std::vector<StageShape> plan_shapes(const BackboneConfig& cfg, int64_t n,
                                    int64_t t) {
  validate_config(cfg);
  check(n >= 1 && t >= 1, "plan_shapes needs n >= 1 and t >= 1");
  const int64_t c = cfg.base_channels;
  const bool five_d = cfg.stem_kind() != ConvKind::Conv2D;
  int64_t h = cfg.input_size[0], w = cfg.input_size[1];
  std::vector<StageShape> plan;
  auto frame_shape = [&](int64_t ch, int64_t hh, int64_t ww) {
    return five_d ? Shape{n, ch, t, hh, ww} : Shape{n * t, ch, hh, ww};
  };
  plan.push_back({"conv0", frame_shape(c, h, w)});
  for (const StagePlan& sp : conv_stage_plans(cfg)) {
    h /= sp.stride;
    w /= sp.stride;
    plan.push_back(
        {"stage" + std::to_string(sp.index), frame_shape(sp.out_ch, h, w)});
  }
  if (!is_swin(cfg.family)) {
    plan.push_back({"output", Shape{n, t, 8 * c, h, w}});
    return plan;
  }
  plan.push_back({"resize", Shape{n * t, 2 * c, 30, 20}});
  plan.push_back({"tokens", Shape{n, t, 15, 10, 8 * c}});
  plan.push_back({"embed3", Shape{n, t, 15, 10, 4 * c}});
  plan.push_back({"stage3", Shape{n, t, 15, 10, 4 * c}});
  plan.push_back({"embed4", Shape{n, t, 15, 10, 8 * c}});
  plan.push_back({"stage4", Shape{n, t, 15, 10, 8 * c}});
  plan.push_back({"output", Shape{n, t, 15, 10, 8 * c}});
  return plan;
}

template <typename S>
Tensor<S> forward(Model<S>& m, const Tensor<S>& x, Mode mode, Rng* rng,
                  std::vector<StageShape>* trace) {
  const BackboneConfig& cfg = m.config;
  check(x.rank() == 5 && x.dim(2) == 1,
        "forward expects [N, T, 1, H, W] input, got " + shape_str(x.shape()));
  check(x.dim(3) == cfg.input_size[0] && x.dim(4) == cfg.input_size[1],
        "wrong input spatial size: got " + std::to_string(x.dim(3)) + "x" +
            std::to_string(x.dim(4)) + ", configured " +
            std::to_string(cfg.input_size[0]) + "x" +
            std::to_string(cfg.input_size[1]));
  const int64_t n = x.dim(0), t = x.dim(1);
  const int64_t c = cfg.base_channels;
  const bool five_d = cfg.stem_kind() != ConvKind::Conv2D;
  nn::Ctx<S> ctx;
  ctx.mode = mode;
  ctx.rng = rng;
  auto note = [&](const char* name, const Tensor<S>& v) {
    if (trace) trace->push_back({name, v.shape()});
  };

  Tensor<S> h;
  if (five_d) {
    h = ops::permute(x, {0, 2, 1, 3, 4});  // [N, 1, T, H, W]
    h = ops::conv3d(h, m.conv0_w, {1, 1, 1}, {0, 1, 1});
  } else {
    h = ops::reshape(x, {n * t, 1, x.dim(3), x.dim(4)});
    h = ops::conv2d(h, m.conv0_w, {1, 1}, {1, 1});
  }
  h = ops::batch_norm(h, m.conv0_bn.scale, m.conv0_bn.shift,
                      m.conv0_bn.running_mean, m.conv0_bn.running_var, mode);
  h = ops::relu(h);
  note("conv0", h);

  for (size_t s = 0; s < m.conv_stages.size(); ++s) {
    ConvStage<S>& stage = m.conv_stages[s];
    for (size_t i = 0; i < stage.blocks.size(); ++i)
      h = nn::residual_block(h, stage.specs[i], stage.blocks[i], ctx);
    note(("stage" + std::to_string(s + 1)).c_str(), h);
  }

  if (!is_swin(cfg.family)) {
    if (five_d)
      h = ops::permute(h, {0, 2, 1, 3, 4});  // [N, T, 8C, h, w]
    else
      h = ops::reshape(h, {n, t, 8 * c, h.dim(2), h.dim(3)});
    note("output", h);
    return h;
  }

  // SwinGait tail: per-frame resize to 30x20, 2x2 patchify to 15x10 tokens.
  if (five_d)
    h = ops::reshape(ops::permute(h, {0, 2, 1, 3, 4}),
                     {n * t, 2 * c, h.dim(3), h.dim(4)});
  h = ops::bilinear_resize(h, 30, 20);
  note("resize", h);
  h = ops::reshape(h, {n * t, 2 * c, 15, 2, 10, 2});
  h = ops::permute(h, {0, 2, 4, 1, 3, 5});  // [NT, 15, 10, 2C, 2, 2]
  h = ops::reshape(h, {n, t, 15, 10, 8 * c});
  note("tokens", h);

  h = ops::linear(h, m.embed3_w, m.embed3_b);
  h = ops::layer_norm(h, m.embed3_ln.scale, m.embed3_ln.shift);
  note("embed3", h);
  for (size_t i = 0; i < m.stage3.blocks.size(); ++i)
    h = nn::swin_block(h, m.stage3.specs[i], m.stage3.blocks[i], ctx);
  note("stage3", h);

  h = ops::linear(h, m.embed4_w, m.embed4_b);
  h = ops::layer_norm(h, m.embed4_ln.scale, m.embed4_ln.shift);
  note("embed4", h);
  for (size_t i = 0; i < m.stage4.blocks.size(); ++i)
    h = nn::swin_block(h, m.stage4.specs[i], m.stage4.blocks[i], ctx);
  note("stage4", h);
  note("output", h);
  return h;
}

template <typename S>
int64_t count_params(const Model<S>& model) {
  return model.params.total_elements();
}

double count_flops(const BackboneConfig& cfg) {
  validate_config(cfg);
  const double c = static_cast<double>(cfg.base_channels);
  int64_t h = cfg.input_size[0], w = cfg.input_size[1];
  double total = 0.0;

  // Conv0: 3x3 spatial kernel regardless of stem kind.
  total += 9.0 * 1.0 * c * double(h) * double(w);

  for (const StagePlan& sp : conv_stage_plans(cfg)) {
    h /= sp.stride;
    w /= sp.stride;
    const double hw = double(h) * double(w);
    const double ci = double(sp.in_ch), co = double(sp.out_ch);
    // Temporal kernel factor of each conv layer in this block kind.
    const double kt = sp.kind == BlockKind::Res3D ? 3.0 : 1.0;
    for (int64_t i = 0; i < sp.blocks; ++i) {
      const double bin = i == 0 ? ci : co;
      total += kt * 9.0 * bin * co * hw;  // conv1
      total += kt * 9.0 * co * co * hw;   // conv2
      if (sp.kind == BlockKind::ResP3D) total += 3.0 * co * co * hw;
      if (i == 0 && (sp.in_ch != sp.out_ch || sp.stride != 1))
        total += bin * co * hw;  // 1x1 projection shortcut
    }
  }
  if (!is_swin(cfg.family)) return total;

  // Bilinear resize: 4 source taps per output pixel and channel.
  total += 4.0 * 2.0 * c * 30.0 * 20.0;
  const double tokens = 15.0 * 10.0;  // per frame
  const double d3 = 4.0 * c, d4 = 8.0 * c;
  const double len =
      cfg.family == Family::SwinGait2D ? 15.0 : 45.0;  // window length
  auto swin_stage_macs = [&](double d, int64_t blocks) {
    double per_block = tokens * d * (3.0 * d)   // qkv projection
                       + tokens * d * d         // output projection
                       + 2.0 * tokens * len * d // scores + weighted values
                       + 8.0 * tokens * d * d;  // MLP (4x expansion, 2 maps)
    return per_block * double(blocks);
  };
  total += tokens * (8.0 * c) * d3;  // embed3
  total += swin_stage_macs(d3, cfg.block_counts[2]);
  total += tokens * d3 * d4;         // embed4
  total += swin_stage_macs(d4, cfg.block_counts[3]);
  return total;
}

template <typename S>
std::vector<std::string> warm_start_from(Model<S>& m,
                                         const NamedTensors<S>& ckpt) {
  check(is_swin(m.config.family),
        "warm start targets SwinGait models (conv stages are inherited)");
  std::unordered_map<std::string, const Tensor<S>*> by_name;
  for (const auto& [name, tensor] : ckpt) by_name[name] = &tensor;

  auto mapped = [](const std::string& name) {
    return name.rfind("conv0.", 0) == 0 || name.rfind("stage1.", 0) == 0 ||
           name.rfind("stage2.", 0) == 0;
  };
  std::vector<std::string> copied;
  m.warm_names.clear();
  auto copy_store = [&](ParamStore<S>& store, bool learnable) {
    for (const auto& [name, tensor] : store.entries()) {
      if (!mapped(name)) continue;
      auto it = by_name.find(name);
      check(it != by_name.end(),
            "warm start: checkpoint is missing parameter " + name);
      check(it->second->shape() == tensor.shape(),
            "warm start: shape mismatch on " + name + ": model " +
                shape_str(tensor.shape()) + " vs checkpoint " +
                shape_str(it->second->shape()));
      store.at(name).copy_from(*it->second);
      copied.push_back(name);
      if (learnable) m.warm_names.push_back(name);
    }
  };
  copy_store(m.params, true);
  copy_store(m.state, false);
  return copied;
}

#define GAITFORGE_INSTANTIATE_BACKBONE(S)                                  \
  template Model<S> build_backbone<S>(const BackboneConfig&, Rng&);        \
  template Tensor<S> forward<S>(Model<S>&, const Tensor<S>&, Mode, Rng*,  \
                                std::vector<StageShape>*);                 \
  template int64_t count_params<S>(const Model<S>&);                      \
  template std::vector<std::string> warm_start_from<S>(                   \
      Model<S>&, const NamedTensors<S>&);

GAITFORGE_INSTANTIATE_BACKBONE(float)
GAITFORGE_INSTANTIATE_BACKBONE(double)

}  // namespace gaitforge::backbone
