#pragma once

// Backbone assembly: the DeepGaitV2 family (2D / 3D / P3D residual stages)
// and the SwinGait family (conv stem + shifted-window transformer stages),
// with shape planning, parameter/FLOP accounting, and warm-start support.

#include <array>
#include <string>
#include <vector>

#include "gaitforge/blocks.hpp"
#include "gaitforge/checkpoint.hpp"
#include "gaitforge/params.hpp"
#include "gaitforge/tensor.hpp"

namespace gaitforge::backbone {

enum class Family {
  DeepGait2D,
  DeepGait3D,
  DeepGaitP3D,
  SwinGait2D,
  SwinGait3D,
};

// Conv-stem block kind for SwinGait families.
enum class ConvKind { Conv2D, Conv3D, ConvP3D };

bool is_swin(Family f);
std::string family_name(Family f);
Family family_from_string(const std::string& s);
std::string conv_kind_name(ConvKind k);
ConvKind conv_kind_from_string(const std::string& s);

struct BackboneConfig {
  Family family = Family::DeepGait2D;
  int64_t base_channels = 64;                 // C
  std::array<int64_t, 4> block_counts{1, 4, 4, 1};  // B = (b1, b2, b3, b4)
  std::array<int64_t, 2> input_size{64, 44};
  // SwinGait only: block kind of the shared conv stem (Conv0 + Stages 1-2).
  // Defaults to the family's natural kind (2D / 3D).
  ConvKind swin_conv_kind = ConvKind::Conv2D;
  bool swin_conv_kind_set = false;
  int64_t part_count = 0;       // 0 -> family default (16 conv, 15 swin)
  double drop_path_rate = -1.0;  // < 0 -> default (0.1, swin blocks only)

  ConvKind stem_kind() const;    // resolved conv kind of the stem stages
  int64_t parts() const;         // resolved horizontal part count
  double swin_drop_path() const; // resolved stochastic depth rate
};

void validate_config(const BackboneConfig& cfg);

// Layer-count formula 2*(b1+b2+b3+b4) + 2; every b must be >= 1.
int64_t depth_of(const std::array<int64_t, 4>& b);

template <typename S>
struct ConvStage {
  std::vector<nn::BlockSpec> specs;
  std::vector<nn::ConvBlockParams<S>> blocks;
};

template <typename S>
struct SwinStage {
  std::vector<nn::BlockSpec> specs;
  std::vector<nn::SwinBlockParams<S>> blocks;
};

template <typename S>
struct Model {
  BackboneConfig config;

  Tensor<S> conv0_w;
  nn::BatchNormParams<S> conv0_bn;
  std::vector<ConvStage<S>> conv_stages;  // 4 (conv families) or 2 (swin)

  // SwinGait tail: tokenizer embeddings + two transformer stages.
  Tensor<S> embed3_w, embed3_b;
  nn::LayerNormParams<S> embed3_ln;
  SwinStage<S> stage3;
  Tensor<S> embed4_w, embed4_b;
  nn::LayerNormParams<S> embed4_ln;
  SwinStage<S> stage4;

  ParamStore<S> params;  // learnable tensors, insertion-ordered
  ParamStore<S> state;   // batch-norm running statistics
  // Parameter names copied by the last warm start (reduced-LR group).
  std::vector<std::string> warm_names;
};

// Builds a fresh model: conv/linear weights from zero-mean normals scaled by
// fan-in, normalization at (scale 1, shift 0), running stats at (0, 1).
template <typename S>
Model<S> build_backbone(const BackboneConfig& cfg, Rng& rng);

struct StageShape {
  std::string name;
  Shape shape;
};

// Analytic shape plan for a [n, t, 1, H, W] input; forward() must agree.
std::vector<StageShape> plan_shapes(const BackboneConfig& cfg, int64_t n,
                                    int64_t t);

// sequences [N, T, 1, H, W] -> conv families [N, T, 8C, H/4, W/4];
// swin families [N, T, 15, 10, 8C] token grids.
template <typename S>
Tensor<S> forward(Model<S>& model, const Tensor<S>& x, Mode mode, Rng* rng,
                  std::vector<StageShape>* trace = nullptr);

// Backbone parameter total (learnables only; running stats excluded).
template <typename S>
int64_t count_params(const Model<S>& model);

// Analytic multiply-accumulate count per silhouette frame at the configured
// input size. Convention: 1 MAC = 1 FLOP; conv/linear/attention products
// counted, normalization and activations ignored (documented, dominant-term
// accounting).
double count_flops(const BackboneConfig& cfg);

// Copies Conv0/Stage1/Stage2 parameters and running statistics from a
// checkpoint (names per the registry convention). Every mapped name must be
// present with a matching shape. Returns the copied names and records them
// in model.warm_names for reduced-LR grouping.
template <typename S>
std::vector<std::string> warm_start_from(Model<S>& model,
                                         const NamedTensors<S>& ckpt);

}  // namespace gaitforge::backbone
