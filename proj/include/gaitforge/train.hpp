#pragma once
// Optimizers (SGD momentum, AdamW), learning-rate schedules (multistep,
// cosine with 1k-step granularity), the composite recognition model
// (backbone + head), checkpointing, and the training loop.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "gaitforge/backbone.hpp"
#include "gaitforge/data.hpp"
#include "gaitforge/head.hpp"
#include "gaitforge/tensor.hpp"

namespace gaitforge::train {

// ----- optimizers -----

enum class OptKind { SGD, AdamW };

const char* opt_kind_name(OptKind k);
OptKind opt_kind_from_string(const std::string& s);

// Parameters listed in an override keep their own base learning rate (the
// schedule still scales it); used for warm-started backbone groups.
struct LrOverride {
  std::vector<std::string> names;
  double lr = 0.0;
};

struct OptimizerConfig {
  OptKind kind = OptKind::SGD;
  double lr = 0.1;
  double weight_decay = 5e-5;
  double momentum = 0.9;  // SGD
  double beta1 = 0.9;     // AdamW
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr_min = 0.0;    // cosine floor
  std::vector<LrOverride> overrides;
};

void validate_optimizer(const OptimizerConfig& cfg);

// Per-parameter slots are keyed by registry name and allocated on first use.
template <typename S>
struct OptState {
  std::map<std::string, std::vector<S>> velocity;  // SGD momentum / Adam m
  std::map<std::string, std::vector<S>> second;    // Adam v
  int64_t step = 0;                                // Adam bias correction
};

// One update over every parameter that carries a gradient; parameters
// without a gradient buffer are left untouched (frozen-group contract).
// `lr_scale` is the schedule multiplier applied to every group's base rate.
// Errors if no parameter in any group carries a gradient.
template <typename S>
void optimizer_step(const std::vector<ParamStore<S>*>& groups,
                    OptState<S>& state, const OptimizerConfig& cfg,
                    double lr_scale = 1.0);

template <typename S>
void optimizer_step(ParamStore<S>& params, OptState<S>& state,
                    const OptimizerConfig& cfg, double lr_scale = 1.0);

// ----- schedules -----

enum class SchedKind { Multistep, Cosine };

const char* sched_kind_name(SchedKind k);
SchedKind sched_kind_from_string(const std::string& s);

struct ScheduleConfig {
  SchedKind kind = SchedKind::Multistep;
  std::vector<int64_t> milestones;  // multistep drop points
  double gamma = 0.1;
  int64_t i_max = 60000;               // cosine half period
  int64_t update_granularity = 1000;   // cosine updates per this many steps
  int64_t total_steps = 60000;
};

void validate_schedule(const ScheduleConfig& cfg);

// Multistep: base_lr * gamma^(milestones passed). Cosine: quantized to the
// update granularity, annealed over i_max steps, held at lr_min afterwards.
// Errors when step is outside [0, total_steps).
double lr_at(int64_t step, const ScheduleConfig& sched, double base_lr,
             double lr_min = 0.0);

// ----- run configuration -----

struct TrainConfig {
  backbone::BackboneConfig backbone;
  int64_t embed_dim = 256;
  head::HpMode hp_mode = head::HpMode::MaxPlusMean;
  double triplet_margin = 0.2;
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  data::BatchSpec batch;
  bool augment = true;
  int64_t log_every = 10;
  int64_t checkpoint_every = 0;  // 0: only the initial + final checkpoints
  std::string warm_start;       // donor checkpoint path, empty = fresh
  double warm_lr = 3e-5;        // base rate of the warm-started group
};

// UTF-8 key=value lines, '#' comments; unknown keys are errors.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::string& path);

// ----- composite model -----

template <typename S>
struct GaitModel {
  backbone::Model<S> backbone;
  head::Head<S> head;
};

template <typename S>
GaitModel<S> build_model(const TrainConfig& cfg, int64_t num_classes,
                         Rng& rng);

// clips [N, T, 1, H, W] -> head outputs; swin token grids are converted to
// channel-first maps before pooling.
template <typename S>
head::HeadOut<S> model_forward(GaitModel<S>& model, const Tensor<S>& clips,
                               nn::Ctx<S>& ctx);

// All learnables and running statistics plus a "meta.model" tensor that
// records the architecture, so checkpoints are self-describing.
template <typename S>
NamedTensors<S> model_tensors(const GaitModel<S>& model);

template <typename S>
void save_model(const GaitModel<S>& model, const std::string& path);

// Rebuilds the architecture recorded in the checkpoint and restores every
// tensor by name; missing or shape-mismatched entries are errors.
template <typename S>
GaitModel<S> load_model(const std::string& path);

// ----- training loop -----

struct TrainLogEntry {
  int64_t step = 0;
  double lr = 0;
  double l_tri = 0;
  double l_ce = 0;
  double nzt = 0;  // non-zero triplet terms, averaged over parts
};

std::string format_log_entry(const TrainLogEntry& e);

struct TrainResult {
  std::vector<TrainLogEntry> log;          // one entry per step
  std::vector<std::string> checkpoints;    // paths, in write order
  int64_t steps = 0;
};

// Runs schedule.total_steps optimization steps. Writes an initial checkpoint
// before training, one every checkpoint_every steps (when > 0), and a final
// one after the last step. Log lines go to `log_stream` (when non-null)
// every log_every steps. Deterministic given the seed. Aborts with an error
// on a non-finite loss.
template <typename S>
TrainResult train(GaitModel<S>& model, const data::Dataset& dataset,
                  const TrainConfig& cfg, uint64_t seed,
                  const std::string& out_dir,
                  std::ostream* log_stream = nullptr);

}  // namespace gaitforge::train
