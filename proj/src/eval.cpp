#include "gaitforge/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace gaitforge::eval {

template <typename S>
Tensor<S> extract_embedding(train::GaitModel<S>& model,
                            const data::Sequence& seq) {
  Tensor<float> clip = data::sequence_to_clip(seq);
  Tensor<S> input;
  if constexpr (std::is_same_v<S, float>) {
    input = clip;
  } else {
    input = Tensor<S>::zeros(clip.shape());
    const float* src = clip.data();
    S* dst = input.data();
    for (int64_t i = 0; i < clip.numel(); ++i) dst[i] = S(src[i]);
  }
  nn::Ctx<S> ctx;  // eval mode, no tape, no rng
  head::HeadOut<S> out = train::model_forward(model, input, ctx);
  const int64_t p = out.embeddings.dim(1), d = out.embeddings.dim(2);
  Tensor<S> emb = Tensor<S>::zeros({p, d});
  const S* src = out.embeddings.data();
  std::copy(src, src + p * d, emb.data());
  return emb;
}

template <typename S>
EmbeddingSet<S> extract_embeddings(train::GaitModel<S>& model,
                                   const data::Dataset& dataset) {
  EmbeddingSet<S> set;
  set.embeddings.reserve(dataset.sequences.size());
  for (const auto& seq : dataset.sequences) {
    set.embeddings.push_back(extract_embedding(model, seq));
    set.subjects.push_back(seq.subject);
    set.views.push_back(seq.view);
    set.ids.push_back(seq.subject + "/" + seq.condition + "/" + seq.view);
  }
  return set;
}

namespace {

template <typename S>
double part_summed_distance(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.shape() == b.shape(), "embedding shape mismatch");
  const int64_t p = a.dim(0), d = a.dim(1);
  const S* pa = a.data();
  const S* pb = b.data();
  double total = 0;
  for (int64_t i = 0; i < p; ++i) {
    double acc = 0;
    for (int64_t j = 0; j < d; ++j) {
      const double diff = double(pa[i * d + j]) - double(pb[i * d + j]);
      acc += diff * diff;
    }
    total += std::sqrt(acc);
  }
  return total;
}

template <typename S>
void validate_set(const EmbeddingSet<S>& set, const char* what) {
  check(set.embeddings.size() == set.subjects.size(),
        std::string(what) + ": subjects out of step with embeddings");
  check(set.views.empty() || set.views.size() == set.embeddings.size(),
        std::string(what) + ": views out of step with embeddings");
  check(set.ids.empty() || set.ids.size() == set.embeddings.size(),
        std::string(what) + ": ids out of step with embeddings");
  for (const auto& e : set.embeddings)
    check(e.rank() == 2, std::string(what) + ": embeddings must be [P, dim]");
}

}  // namespace

template <typename S>
EvalReport evaluate(const EmbeddingSet<S>& gallery,
                    const EmbeddingSet<S>& probe, const EvalOptions& opts) {
  validate_set(gallery, "gallery");
  validate_set(probe, "probe");
  check(!gallery.embeddings.empty(), "gallery is empty");

  EvalReport report;
  report.exclude_identical_view = opts.exclude_identical_view;
  double sum_ap = 0;
  int64_t hit1 = 0, hit5 = 0, hit10 = 0;

  const size_t g_count = gallery.embeddings.size();
  for (size_t pi = 0; pi < probe.embeddings.size(); ++pi) {
    // Candidate gallery after protocol exclusions.
    std::vector<std::pair<double, size_t>> ranked;
    ranked.reserve(g_count);
    int64_t relevant = 0;
    for (size_t gi = 0; gi < g_count; ++gi) {
      if (!probe.ids.empty() && !gallery.ids.empty() &&
          probe.ids[pi] == gallery.ids[gi])
        continue;  // the probe itself
      if (opts.exclude_identical_view && !probe.views.empty() &&
          !gallery.views.empty() && probe.views[pi] == gallery.views[gi])
        continue;
      ranked.emplace_back(
          part_summed_distance(probe.embeddings[pi], gallery.embeddings[gi]),
          gi);
      if (gallery.subjects[gi] == probe.subjects[pi]) ++relevant;
    }
    if (relevant == 0) {
      ++report.probes_excluded;
      continue;
    }
    std::sort(ranked.begin(), ranked.end());

    int64_t first_hit = 0, hits = 0;
    double ap = 0;
    for (size_t r = 0; r < ranked.size(); ++r) {
      if (gallery.subjects[ranked[r].second] == probe.subjects[pi]) {
        ++hits;
        ap += double(hits) / double(r + 1);
        if (first_hit == 0) first_hit = int64_t(r) + 1;
      }
    }
    ap /= double(relevant);

    report.per_query_rank.push_back(first_hit);
    ++report.probes_evaluated;
    sum_ap += ap;
    if (first_hit <= 1) ++hit1;
    if (first_hit <= 5) ++hit5;
    if (first_hit <= 10) ++hit10;
  }

  if (report.probes_evaluated > 0) {
    const double n = double(report.probes_evaluated);
    report.rank1 = hit1 / n;
    report.rank5 = hit5 / n;
    report.rank10 = hit10 / n;
    report.map = sum_ap / n;
  }
  return report;
}

std::string format_report(const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "rank-1=%.4f\nrank-5=%.4f\nrank-10=%.4f\nmAP=%.4f\n"
                "probes-evaluated=%lld\nprobes-excluded=%lld\n"
                "exclude-identical-view=%s\n",
                r.rank1, r.rank5, r.rank10, r.map,
                static_cast<long long>(r.probes_evaluated),
                static_cast<long long>(r.probes_excluded),
                r.exclude_identical_view ? "yes" : "no");
  return buf;
}

template <typename S>
ShuffleReport shuffled_eval(train::GaitModel<S>& model,
                            const data::Dataset& dataset, Rng& rng,
                            const EvalOptions& opts) {
  check(!dataset.sequences.empty(), "dataset is empty");
  EmbeddingSet<S> gallery = extract_embeddings(model, dataset);

  data::Dataset shuffled;
  shuffled.sequences.reserve(dataset.sequences.size());
  for (const auto& seq : dataset.sequences)
    shuffled.sequences.push_back(
        seq.frames.size() >= 2 ? data::shuffle_frames(seq, rng) : seq);
  EmbeddingSet<S> shuffled_probes = extract_embeddings(model, shuffled);

  ShuffleReport report;
  report.intact = evaluate(gallery, gallery, opts);
  report.shuffled = evaluate(gallery, shuffled_probes, opts);
  report.accuracy = report.intact.rank1;
  report.shuffled_accuracy = report.shuffled.rank1;
  report.delta = report.accuracy - report.shuffled_accuracy;
  return report;
}

std::string format_shuffle_report(const ShuffleReport& r) {
  char buf[128];
  std::snprintf(buf, sizeof(buf),
                "accuracy=%.4f\nshuffled-accuracy=%.4f\ndelta=%.4f\n",
                r.accuracy, r.shuffled_accuracy, r.delta);
  return buf;
}

#define GAITFORGE_INSTANTIATE_EVAL(S)                                     \
  template Tensor<S> extract_embedding<S>(train::GaitModel<S>&,           \
                                          const data::Sequence&);         \
  template EmbeddingSet<S> extract_embeddings<S>(train::GaitModel<S>&,    \
                                                 const data::Dataset&);   \
  template EvalReport evaluate<S>(const EmbeddingSet<S>&,                 \
                                  const EmbeddingSet<S>&,                 \
                                  const EvalOptions&);                    \
  template ShuffleReport shuffled_eval<S>(train::GaitModel<S>&,           \
                                          const data::Dataset&, Rng&,     \
                                          const EvalOptions&);

GAITFORGE_INSTANTIATE_EVAL(float)
GAITFORGE_INSTANTIATE_EVAL(double)

}  // namespace gaitforge::eval
