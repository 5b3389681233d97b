#pragma once
// Retrieval evaluation: whole-sequence embedding extraction, the rank-k/mAP
// gallery-probe evaluator with optional identical-view exclusion, and the
// frame-shuffling ablation.

#include <cstdint>
#include <string>
#include <vector>

#include "gaitforge/data.hpp"
#include "gaitforge/tensor.hpp"
#include "gaitforge/train.hpp"

namespace gaitforge::eval {

template <typename S>
struct EmbeddingSet {
  std::vector<Tensor<S>> embeddings;  // one [P, dim] tensor per sequence
  std::vector<std::string> subjects;
  std::vector<std::string> views;
  // Unique per physical sequence; matching gallery/probe ids are treated as
  // the same recording and excluded from each other's candidate list.
  std::vector<std::string> ids;
};

// Eval mode, whole sequence (no temporal subsampling); [P, dim] pre-BN.
template <typename S>
Tensor<S> extract_embedding(train::GaitModel<S>& model,
                            const data::Sequence& seq);

template <typename S>
EmbeddingSet<S> extract_embeddings(train::GaitModel<S>& model,
                                   const data::Dataset& dataset);

struct EvalOptions {
  bool exclude_identical_view = false;
};

struct EvalReport {
  double rank1 = 0, rank5 = 0, rank10 = 0, map = 0;
  std::vector<int64_t> per_query_rank;  // 1-based first-hit rank per probe
  int64_t probes_evaluated = 0;
  // Probes whose subject has no valid gallery entry are excluded, not failed.
  int64_t probes_excluded = 0;
  bool exclude_identical_view = false;
};

// Distance = per-part Euclidean distances summed over parts, on the pre-BN
// embeddings. rank-k = fraction of probes with a correct subject among the
// k nearest valid gallery entries; mAP = mean average precision over the
// ranked valid gallery.
template <typename S>
EvalReport evaluate(const EmbeddingSet<S>& gallery,
                    const EmbeddingSet<S>& probe,
                    const EvalOptions& opts = {});

// Structured text, all metrics to 4 decimals.
std::string format_report(const EvalReport& r);

struct ShuffleReport {
  EvalReport intact;
  EvalReport shuffled;
  double accuracy = 0;           // intact rank-1
  double shuffled_accuracy = 0;  // shuffled-probe rank-1
  double delta = 0;              // accuracy - shuffled_accuracy
};

// Leave-one-out retrieval over the dataset: every sequence probes the full
// gallery with itself excluded, once intact and once with its frames
// shuffled per sequence. Single-frame sequences pass through unshuffled.
template <typename S>
ShuffleReport shuffled_eval(train::GaitModel<S>& model,
                            const data::Dataset& dataset, Rng& rng,
                            const EvalOptions& opts = {});

std::string format_shuffle_report(const ShuffleReport& r);

}  // namespace gaitforge::eval
