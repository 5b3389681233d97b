#include "gaitforge/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <ostream>
#include <unordered_map>

#include "gaitforge/checkpoint.hpp"

namespace gaitforge::train {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

const char* opt_kind_name(OptKind k) {
  return k == OptKind::SGD ? "sgd" : "adamw";
}

OptKind opt_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptKind::SGD;
  if (s == "adamw") return OptKind::AdamW;
  throw Error("unknown optimizer kind: " + s);
}

void validate_optimizer(const OptimizerConfig& cfg) {
  check(cfg.lr > 0, "learning rate must be positive");
  check(cfg.weight_decay >= 0, "weight decay must be non-negative");
  check(cfg.momentum >= 0 && cfg.momentum < 1, "momentum outside [0, 1)");
  check(cfg.beta1 > 0 && cfg.beta1 < 1, "beta1 outside (0, 1)");
  check(cfg.beta2 > 0 && cfg.beta2 < 1, "beta2 outside (0, 1)");
  check(cfg.eps > 0, "eps must be positive");
  check(cfg.lr_min >= 0, "lr_min must be non-negative");
  check(cfg.lr_min <= cfg.lr, "lr_min must not exceed lr");
  for (const auto& group : cfg.overrides) {
    check(group.lr > 0, "override learning rate must be positive");
    check(!group.names.empty(), "override group with no parameter names");
  }
}

namespace {

template <typename S>
std::vector<S>& slot(std::map<std::string, std::vector<S>>& slots,
                     const std::string& name, size_t n) {
  auto& v = slots[name];
  if (v.empty()) v.assign(n, S(0));
  check(v.size() == n, "optimizer state size mismatch for " + name);
  return v;
}

}  // namespace

template <typename S>
void optimizer_step(const std::vector<ParamStore<S>*>& groups,
                    OptState<S>& state, const OptimizerConfig& cfg,
                    double lr_scale) {
  validate_optimizer(cfg);
  check(lr_scale >= 0, "negative schedule multiplier");

  std::unordered_map<std::string, double> base_lr;
  for (const auto& group : cfg.overrides)
    for (const auto& name : group.names) base_lr[name] = group.lr;

  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));

  bool any = false;
  for (ParamStore<S>* store : groups) {
    for (const auto& [name, handle] : store->entries()) {
      Tensor<S>& w = store->at(name);
      if (!w.has_grad()) continue;  // frozen-group contract
      any = true;
      const auto& g = w.grad();
      S* p = w.data();
      const size_t n = g.size();
      auto it = base_lr.find(name);
      const double lr =
          (it == base_lr.end() ? cfg.lr : it->second) * lr_scale;

      if (cfg.kind == OptKind::SGD) {
        // Classic momentum with L2 weight decay folded into the gradient.
        auto& v = slot(state.velocity, name, n);
        for (size_t i = 0; i < n; ++i) {
          const double gi = double(g[i]) + cfg.weight_decay * double(p[i]);
          const double vi = cfg.momentum * double(v[i]) + gi;
          v[i] = S(vi);
          p[i] = S(double(p[i]) - lr * vi);
        }
      } else {
        // AdamW: decoupled weight decay.
        auto& m = slot(state.velocity, name, n);
        auto& v = slot(state.second, name, n);
        for (size_t i = 0; i < n; ++i) {
          const double gi = double(g[i]);
          const double mi = cfg.beta1 * double(m[i]) + (1 - cfg.beta1) * gi;
          const double vi =
              cfg.beta2 * double(v[i]) + (1 - cfg.beta2) * gi * gi;
          m[i] = S(mi);
          v[i] = S(vi);
          const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
          p[i] = S(double(p[i]) - lr * update -
                   lr * cfg.weight_decay * double(p[i]));
        }
      }
    }
  }
  check(any, "optimizer step with no gradients anywhere");
}

template <typename S>
void optimizer_step(ParamStore<S>& params, OptState<S>& state,
                    const OptimizerConfig& cfg, double lr_scale) {
  optimizer_step<S>({&params}, state, cfg, lr_scale);
}

// ---------------------------------------------------------------------------
// schedules
// ---------------------------------------------------------------------------

const char* sched_kind_name(SchedKind k) {
  return k == SchedKind::Multistep ? "multistep" : "cosine";
}

SchedKind sched_kind_from_string(const std::string& s) {
  if (s == "multistep") return SchedKind::Multistep;
  if (s == "cosine") return SchedKind::Cosine;
  throw Error("unknown schedule kind: " + s);
}

void validate_schedule(const ScheduleConfig& cfg) {
  check(cfg.total_steps >= 0, "total_steps must be non-negative");
  check(cfg.gamma > 0 && cfg.gamma <= 1, "gamma outside (0, 1]");
  check(cfg.i_max >= 1, "i_max must be positive");
  check(cfg.update_granularity >= 1, "update granularity must be positive");
  for (size_t i = 0; i < cfg.milestones.size(); ++i) {
    check(cfg.milestones[i] > 0, "milestones must be positive");
    check(cfg.milestones[i] < cfg.total_steps,
          "milestones must stay below total_steps");
    if (i > 0)
      check(cfg.milestones[i] > cfg.milestones[i - 1],
            "milestones must be strictly increasing");
  }
}

double lr_at(int64_t step, const ScheduleConfig& sched, double base_lr,
             double lr_min) {
  validate_schedule(sched);
  check(base_lr > 0, "learning rate must be positive");
  check(step >= 0 && step < sched.total_steps,
        "step " + std::to_string(step) + " outside [0, " +
            std::to_string(sched.total_steps) + ")");
  if (sched.kind == SchedKind::Multistep) {
    int64_t passed = 0;
    for (int64_t m : sched.milestones)
      if (step >= m) ++passed;
    return base_lr * std::pow(sched.gamma, double(passed));
  }
  // Cosine, quantized to the update granularity, held at the floor past
  // i_max (no warm restart).
  const int64_t q = (step / sched.update_granularity) *
                    sched.update_granularity;
  if (q >= sched.i_max) return lr_min;
  return lr_min + (base_lr - lr_min) *
                      (1.0 + std::cos(M_PI * double(q) / double(sched.i_max))) /
                      2.0;
}

// ---------------------------------------------------------------------------
// composite model
// ---------------------------------------------------------------------------

template <typename S>
GaitModel<S> build_model(const TrainConfig& cfg, int64_t num_classes,
                         Rng& rng) {
  backbone::validate_config(cfg.backbone);
  head::HeadConfig hc;
  hc.parts = cfg.backbone.parts();
  hc.in_channels = 8 * cfg.backbone.base_channels;
  hc.embed_dim = cfg.embed_dim;
  hc.num_classes = num_classes;
  hc.hp_mode = cfg.hp_mode;
  hc.triplet_margin = cfg.triplet_margin;

  GaitModel<S> model;
  model.backbone = backbone::build_backbone<S>(cfg.backbone, rng);
  model.head = head::init_head<S>(hc, rng);
  return model;
}

template <typename S>
head::HeadOut<S> model_forward(GaitModel<S>& model, const Tensor<S>& clips,
                               nn::Ctx<S>& ctx) {
  Tensor<S> y =
      backbone::forward(model.backbone, clips, ctx.mode, ctx.rng);
  if (backbone::is_swin(model.backbone.config.family))
    y = head::tokens_to_map(y);
  Tensor<S> pooled = head::temporal_pooling(y);
  Tensor<S> parts = head::horizontal_pooling(pooled, model.head.config.parts,
                                             model.head.config.hp_mode);
  return head::head_forward(model.head, parts, ctx);
}

namespace {

constexpr const char* kMetaName = "meta.model";
constexpr int64_t kMetaLen = 13;

template <typename S>
Tensor<S> pack_meta(const GaitModel<S>& model) {
  const backbone::BackboneConfig& bb = model.backbone.config;
  const head::HeadConfig& hc = model.head.config;
  Tensor<S> meta = Tensor<S>::zeros({kMetaLen});
  S* m = meta.data();
  m[0] = S(static_cast<int>(bb.family));
  m[1] = S(bb.base_channels);
  for (int i = 0; i < 4; ++i) m[2 + i] = S(bb.block_counts[size_t(i)]);
  m[6] = S(static_cast<int>(bb.stem_kind()));
  m[7] = S(bb.parts());
  m[8] = S(backbone::is_swin(bb.family) ? bb.swin_drop_path() : 0.0);
  m[9] = S(hc.embed_dim);
  m[10] = S(hc.num_classes);
  m[11] = S(hc.hp_mode == head::HpMode::MaxPlusMean ? 0 : 1);
  m[12] = S(hc.triplet_margin);
  return meta;
}

template <typename S>
void unpack_meta(const Tensor<S>& meta, backbone::BackboneConfig& bb,
                 head::HeadConfig& hc) {
  check(meta.shape() == Shape({kMetaLen}), "unrecognized checkpoint meta");
  const S* m = meta.data();
  bb.family = static_cast<backbone::Family>(int(m[0]));
  bb.base_channels = int64_t(m[1]);
  for (int i = 0; i < 4; ++i) bb.block_counts[size_t(i)] = int64_t(m[2 + i]);
  if (backbone::is_swin(bb.family)) {
    bb.swin_conv_kind = static_cast<backbone::ConvKind>(int(m[6]));
    bb.swin_conv_kind_set = true;
    bb.drop_path_rate = double(m[8]);
  }
  bb.part_count = int64_t(m[7]);
  hc.parts = bb.part_count;
  hc.in_channels = 8 * bb.base_channels;
  hc.embed_dim = int64_t(m[9]);
  hc.num_classes = int64_t(m[10]);
  hc.hp_mode = int(m[11]) == 0 ? head::HpMode::MaxPlusMean
                               : head::HpMode::MaxOnly;
  hc.triplet_margin = double(m[12]);
}

}  // namespace

template <typename S>
NamedTensors<S> model_tensors(const GaitModel<S>& model) {
  NamedTensors<S> out;
  out.emplace_back(kMetaName, pack_meta(model));
  for (const ParamStore<S>* store :
       {&model.backbone.params, &model.backbone.state, &model.head.params,
        &model.head.state})
    for (const auto& entry : store->entries()) out.push_back(entry);
  return out;
}

template <typename S>
void save_model(const GaitModel<S>& model, const std::string& path) {
  save_checkpoint(path, model_tensors(model));
}

template <typename S>
GaitModel<S> load_model(const std::string& path) {
  NamedTensors<S> entries = load_checkpoint<S>(path);
  std::unordered_map<std::string, const Tensor<S>*> by_name;
  for (const auto& [name, t] : entries) {
    check(by_name.emplace(name, &t).second,
          "duplicate checkpoint entry: " + name);
  }
  auto meta_it = by_name.find(kMetaName);
  check(meta_it != by_name.end(), "checkpoint lacks model metadata");

  TrainConfig cfg;
  head::HeadConfig hc;
  unpack_meta(*meta_it->second, cfg.backbone, hc);
  cfg.embed_dim = hc.embed_dim;
  cfg.hp_mode = hc.hp_mode;
  cfg.triplet_margin = hc.triplet_margin;

  Rng rng(0);
  GaitModel<S> model = build_model<S>(cfg, hc.num_classes, rng);
  size_t restored = 1;  // meta
  for (ParamStore<S>* store :
       {&model.backbone.params, &model.backbone.state, &model.head.params,
        &model.head.state})
    for (const auto& [name, handle] : store->entries()) {
      auto it = by_name.find(name);
      check(it != by_name.end(), "checkpoint is missing tensor: " + name);
      store->at(name).copy_from(*it->second);
      ++restored;
    }
  check(restored == entries.size(),
        "checkpoint holds tensors the model does not declare");
  return model;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

std::string format_log_entry(const TrainLogEntry& e) {
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "step=%lld lr=%.6g l_tri=%.4f l_ce=%.4f nzt=%.1f",
                static_cast<long long>(e.step), e.lr, e.l_tri, e.l_ce, e.nzt);
  return buf;
}

namespace {

template <typename S>
Tensor<S> clips_to(const Tensor<float>& clips) {
  if constexpr (std::is_same_v<S, float>) {
    return clips.clone();
  } else {
    Tensor<S> out = Tensor<S>::zeros(clips.shape());
    const float* src = clips.data();
    S* dst = out.data();
    for (int64_t i = 0; i < clips.numel(); ++i) dst[i] = S(src[i]);
    return out;
  }
}

template <typename S>
std::string write_checkpoint(const GaitModel<S>& model,
                             const std::string& out_dir,
                             const std::string& stem) {
  fs::create_directories(out_dir);
  std::string path = (fs::path(out_dir) / (stem + ".gfckpt")).string();
  save_model(model, path);
  return path;
}

}  // namespace

template <typename S>
TrainResult train(GaitModel<S>& model, const data::Dataset& dataset,
                  const TrainConfig& cfg, uint64_t seed,
                  const std::string& out_dir, std::ostream* log_stream) {
  validate_optimizer(cfg.optimizer);
  validate_schedule(cfg.schedule);
  data::validate_batch_spec(cfg.batch);
  check(!out_dir.empty(), "training needs an output directory");
  const int64_t classes =
      static_cast<int64_t>(dataset.subjects().size());
  check(model.head.config.num_classes >= classes,
        "classifier is narrower than the dataset's subject count");

  Rng root(seed);
  Rng data_rng = root.fork(1);
  Rng model_rng = root.fork(2);  // stochastic depth
  data::AugmentPolicy policy;    // defaults; toggled wholesale by cfg.augment

  TrainResult result;
  result.checkpoints.push_back(write_checkpoint(model, out_dir, "init"));

  OptState<S> opt_state;
  const std::vector<ParamStore<S>*> learnables = {&model.backbone.params,
                                                  &model.head.params};

  for (int64_t step = 0; step < cfg.schedule.total_steps; ++step) {
    const double lr =
        lr_at(step, cfg.schedule, cfg.optimizer.lr, cfg.optimizer.lr_min);
    data::Batch batch = data::sample_batch(dataset, cfg.batch, data_rng,
                                           cfg.augment ? &policy : nullptr);
    Tensor<S> clips = clips_to<S>(batch.clips);

    Tape<S> tape;
    for (ParamStore<S>* store : learnables)
      for (const auto& [name, handle] : store->entries())
        tape.watch(store->at(name));

    nn::Ctx<S> ctx{&tape, Mode::Train, &model_rng};
    head::HeadOut<S> out = model_forward(model, clips, ctx);
    head::CombinedOut<S> losses = head::combined_loss(
        out.embeddings, out.logits, batch.labels, cfg.triplet_margin);

    TrainLogEntry entry;
    entry.step = step;
    entry.lr = lr;
    entry.l_tri = double(losses.l_tri.value());
    entry.l_ce = double(losses.l_ce.value());
    entry.nzt = losses.nonzero_count;
    check(std::isfinite(entry.l_tri) && std::isfinite(entry.l_ce),
          "training diverged: non-finite loss at step " +
              std::to_string(step));

    tape.backward(losses.loss);
    optimizer_step(learnables, opt_state, cfg.optimizer, lr / cfg.optimizer.lr);

    result.log.push_back(entry);
    if (log_stream &&
        (cfg.log_every <= 1 || step % cfg.log_every == 0 ||
         step + 1 == cfg.schedule.total_steps))
      (*log_stream) << format_log_entry(entry) << "\n";

    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
        step + 1 < cfg.schedule.total_steps) {
      char stem[32];
      std::snprintf(stem, sizeof(stem), "step-%06lld",
                    static_cast<long long>(step + 1));
      result.checkpoints.push_back(write_checkpoint(model, out_dir, stem));
    }
    result.steps = step + 1;
  }

  if (cfg.schedule.total_steps > 0)
    result.checkpoints.push_back(write_checkpoint(model, out_dir, "final"));
  return result;
}

#define GAITFORGE_INSTANTIATE_TRAIN(S)                                       \
  template void optimizer_step<S>(const std::vector<ParamStore<S>*>&,        \
                                  OptState<S>&, const OptimizerConfig&,      \
                                  double);                                   \
  template void optimizer_step<S>(ParamStore<S>&, OptState<S>&,              \
                                  const OptimizerConfig&, double);           \
  template GaitModel<S> build_model<S>(const TrainConfig&, int64_t, Rng&);   \
  template head::HeadOut<S> model_forward<S>(GaitModel<S>&,                  \
                                             const Tensor<S>&, nn::Ctx<S>&); \
  template NamedTensors<S> model_tensors<S>(const GaitModel<S>&);            \
  template void save_model<S>(const GaitModel<S>&, const std::string&);      \
  template GaitModel<S> load_model<S>(const std::string&);                   \
  template TrainResult train<S>(GaitModel<S>&, const data::Dataset&,         \
                                const TrainConfig&, uint64_t,                \
                                const std::string&, std::ostream*);

GAITFORGE_INSTANTIATE_TRAIN(float)
GAITFORGE_INSTANTIATE_TRAIN(double)

}  // namespace gaitforge::train
