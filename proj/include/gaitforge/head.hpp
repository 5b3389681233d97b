#pragma once
// Recognition head: temporal max pooling, horizontal strip pooling, per-part
// fully-connected embeddings with BNNeck classifiers, and the combined
// triplet + cross-entropy objective.

#include <cstdint>
#include <string>
#include <vector>

#include "gaitforge/blocks.hpp"
#include "gaitforge/params.hpp"
#include "gaitforge/tensor.hpp"

namespace gaitforge::head {

using nn::BatchNormParams;
using nn::Ctx;

enum class HpMode { MaxPlusMean, MaxOnly };

const char* hp_mode_name(HpMode mode);
HpMode hp_mode_from_string(const std::string& name);

struct HeadConfig {
  int64_t parts = 16;
  int64_t in_channels = 512;  // backbone output width (8C)
  int64_t embed_dim = 256;
  int64_t num_classes = 0;
  HpMode hp_mode = HpMode::MaxPlusMean;
  double triplet_margin = 0.2;
};

void validate_head_config(const HeadConfig& cfg);

template <typename S>
struct Head {
  HeadConfig config;
  std::vector<Tensor<S>> fc;            // P matrices [dim, 8C], bias-free
  std::vector<BatchNormParams<S>> bn;   // P BNNecks over the embedding
  std::vector<Tensor<S>> cls;           // P matrices [K, dim], bias-free
  ParamStore<S> params;                 // learnables ("head.fc.<i>", ...)
  ParamStore<S> state;                  // BN running statistics
};

template <typename S>
Head<S> init_head(const HeadConfig& cfg, Rng& rng);

// [N, T, C, H, W] -> [N, C, H, W]: element-wise max over frames; the
// gradient is routed to the per-element argmax frame.
template <typename S>
Tensor<S> temporal_pooling(const Tensor<S>& x);

// Token grids [N, T, Ht, Wt, D] -> channel-first maps [N, T, D, Ht, Wt].
template <typename S>
Tensor<S> tokens_to_map(const Tensor<S>& tokens);

// [N, C, H, W] -> [N, P, C]: P equal-height strips, each pooled over its
// spatial extent by max + mean (summed) or max only.
template <typename S>
Tensor<S> horizontal_pooling(const Tensor<S>& x, int64_t parts,
                             HpMode mode = HpMode::MaxPlusMean);

template <typename S>
struct HeadOut {
  Tensor<S> embeddings;  // [N, P, dim] pre-BN: triplet + retrieval features
  Tensor<S> logits;      // [N, P, K] post-BN bias-free classifier outputs
};

// parts: [N, P, 8C]. Part i passes through exactly its own FC/BN/classifier.
template <typename S>
HeadOut<S> head_forward(const Head<S>& head, const Tensor<S>& parts,
                        Ctx<S>& ctx);

template <typename S>
struct TripletOut {
  Tensor<S> loss;        // scalar
  double nonzero_count;  // triplets with non-zero loss, averaged over parts
};

// Batch-all triplet loss on [N, P, dim] embeddings: per part, the mean over
// non-zero terms max(0, d(a,p) - d(a,n) + margin) with Euclidean d over all
// (anchor, positive, negative) label-compatible triples; averaged over parts.
template <typename S>
TripletOut<S> triplet_loss(const Tensor<S>& embeddings,
                           const std::vector<int64_t>& labels, double margin);

// Softmax cross-entropy on [N, P, K] logits, averaged over parts and batch.
template <typename S>
Tensor<S> cross_entropy_parts(const Tensor<S>& logits,
                              const std::vector<int64_t>& labels);

template <typename S>
struct CombinedOut {
  Tensor<S> loss;   // l_tri + l_ce, unweighted
  Tensor<S> l_tri;
  Tensor<S> l_ce;
  double nonzero_count;
};

template <typename S>
CombinedOut<S> combined_loss(const Tensor<S>& embeddings,
                             const Tensor<S>& logits,
                             const std::vector<int64_t>& labels,
                             double margin);

}  // namespace gaitforge::head
