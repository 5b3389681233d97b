// gaitforge: train, evaluate, and probe gait-recognition models.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gaitforge/blocks.hpp"
#include "gaitforge/checkpoint.hpp"
#include "gaitforge/data.hpp"
#include "gaitforge/eval.hpp"
#include "gaitforge/gradcheck.hpp"
#include "gaitforge/head.hpp"
#include "gaitforge/ops.hpp"
#include "gaitforge/train.hpp"

namespace fs = std::filesystem;
using namespace gaitforge;

namespace {

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, uint64_t seed) {
  train::TrainConfig cfg = train::load_train_config(config_path);
  data::Dataset ds = data::load_dataset(data_dir);
  const int64_t classes = int64_t(ds.subjects().size());
  check(classes > 0, "training data contains no subjects");

  Rng root(seed);
  Rng init_rng = root.fork(0);
  train::GaitModel<float> model =
      train::build_model<float>(cfg, classes, init_rng);

  if (!cfg.warm_start.empty()) {
    NamedTensors<float> donor = load_checkpoint<float>(cfg.warm_start);
    backbone::warm_start_from(model.backbone, donor);
    cfg.optimizer.overrides.push_back(
        {model.backbone.warm_names, cfg.warm_lr});
    std::printf("warm start: %zu parameter groups at lr=%g\n",
                model.backbone.warm_names.size(), cfg.warm_lr);
  }

  std::printf("subjects=%" PRId64 " sequences=%zu steps=%" PRId64 "\n",
              classes, ds.sequences.size(), cfg.schedule.total_steps);
  train::TrainResult result =
      train::train(model, ds, cfg, seed, out_dir, &std::cout);

  std::ofstream log_file(fs::path(out_dir) / "train.log");
  for (const auto& entry : result.log)
    log_file << train::format_log_entry(entry) << "\n";

  std::printf("trained-steps=%" PRId64 "\n", result.steps);
  if (!result.checkpoints.empty())
    std::printf("final-checkpoint=%s\n", result.checkpoints.back().c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& gallery_dir,
             const std::string& probe_dir, bool exclude_identical_view) {
  train::GaitModel<float> model = train::load_model<float>(ckpt);
  data::Dataset gallery_ds = data::load_dataset(gallery_dir);
  data::Dataset probe_ds = data::load_dataset(probe_dir);
  eval::EmbeddingSet<float> gallery =
      eval::extract_embeddings(model, gallery_ds);
  eval::EmbeddingSet<float> probe = eval::extract_embeddings(model, probe_ds);
  eval::EvalOptions opts;
  opts.exclude_identical_view = exclude_identical_view;
  eval::EvalReport report = eval::evaluate(gallery, probe, opts);
  std::printf("%s\n", eval::format_report(report).c_str());
  return 0;
}

int cmd_ablate_shuffle(const std::string& ckpt, const std::string& data_dir,
                       uint64_t seed) {
  train::GaitModel<float> model = train::load_model<float>(ckpt);
  data::Dataset ds = data::load_dataset(data_dir);
  Rng rng(seed);
  eval::ShuffleReport report = eval::shuffled_eval(model, ds, rng);
  std::printf("%s\n", eval::format_shuffle_report(report).c_str());
  return 0;
}

int cmd_inspect(const std::string& config_path, const std::string& family,
                int64_t channels, const std::string& blocks) {
  backbone::BackboneConfig cfg;
  if (!config_path.empty()) {
    cfg = train::load_train_config(config_path).backbone;
  } else {
    check(!family.empty(),
          "inspect needs --config or --family (plus optional --channels, "
          "--blocks)");
    cfg.family = backbone::family_from_string(family);
    if (channels > 0) cfg.base_channels = channels;
    if (!blocks.empty()) {
      std::array<int64_t, 4> counts{};
      if (std::sscanf(blocks.c_str(),
                      "%" SCNd64 ",%" SCNd64 ",%" SCNd64 ",%" SCNd64,
                      &counts[0], &counts[1], &counts[2], &counts[3]) != 4)
        throw Error("--blocks expects four comma-separated counts, got: " +
                    blocks);
      cfg.block_counts = counts;
    }
  }
  backbone::validate_config(cfg);

  Rng rng(0);
  backbone::Model<float> model = backbone::build_backbone<float>(cfg, rng);
  const int64_t params = backbone::count_params(model);
  const double flops = backbone::count_flops(cfg);

  std::printf("family=%s\n", backbone::family_name(cfg.family).c_str());
  std::printf("base-channels=%" PRId64 "\n", cfg.base_channels);
  std::printf("block-counts=%" PRId64 ",%" PRId64 ",%" PRId64 ",%" PRId64
              "\n",
              cfg.block_counts[0], cfg.block_counts[1], cfg.block_counts[2],
              cfg.block_counts[3]);
  std::printf("depth=%" PRId64 "\n", backbone::depth_of(cfg.block_counts));
  std::printf("parts=%" PRId64 "\n", cfg.parts());
  std::printf("params=%" PRId64 " (%.2fM)\n", params, double(params) / 1e6);
  std::printf("flops-per-frame=%.0f (%.2fG)\n", flops, flops / 1e9);
  std::printf("stages:\n");
  for (const auto& stage : backbone::plan_shapes(cfg, 1, 30))
    std::printf("  %-10s %s\n", stage.name.c_str(),
                shape_str(stage.shape).c_str());
  return 0;
}

int cmd_synth(const std::string& out_dir, int64_t subjects, uint64_t seed,
              int64_t views, int64_t seqs, int64_t frames, bool motion_only,
              bool raw, bool loose) {
  data::CorpusOptions opts;
  opts.subjects = subjects;
  opts.views = views;
  opts.seqs_per_view = seqs;
  opts.frames = frames;
  opts.seed = seed;
  opts.motion_only = motion_only;
  opts.raw_canvas = raw;
  data::Dataset ds = data::make_synthetic_corpus(opts);
  data::save_dataset(ds, out_dir, /*packed=*/!loose);
  std::printf("wrote %zu sequences (%" PRId64 " subjects x %" PRId64
              " views x %" PRId64 " seqs, %" PRId64 " frames) to %s\n",
              ds.sequences.size(), subjects, views, seqs, frames,
              out_dir.c_str());
  return 0;
}

int cmd_patches(const std::string& data_dir, int64_t patch) {
  data::Dataset ds = data::load_dataset(data_dir);
  const double fraction = data::dumb_patch_fraction(ds, patch);
  std::printf("patch=%" PRId64 " dumb-fraction=%.4f\n", patch, fraction);
  return 0;
}

// ----- gradcheck: representative composites over the double engine -----

// Random positive loss weights decouple symmetric coordinates so that a
// sign error in one position cannot hide behind its mirror.
Tensor<double> weighted_sum(const Tensor<double>& x, uint64_t seed) {
  Rng rng(seed);
  Tensor<double> w = Tensor<double>::uniform(x.shape(), rng, 0.25, 1.0);
  return ops::sum_all(ops::mul(x, w));
}

struct CheckCase {
  std::string name;
  GradCheckFn fn;
  std::vector<Tensor<double>> inputs;
  GradCheckOptions opts;
};

int cmd_gradcheck() {
  Rng rng(404);
  std::vector<CheckCase> cases;

  {
    CheckCase c;
    c.name = "conv2d";
    c.inputs = {Tensor<double>::randn({2, 3, 8, 7}, rng),
                Tensor<double>::randn({4, 3, 3, 3}, rng, 0.3)};
    c.fn = [](const std::vector<Tensor<double>>& in, Tape<double>*) {
      return weighted_sum(ops::conv2d(in[0], in[1], {2, 1}, {1, 1}), 11);
    };
    cases.push_back(std::move(c));
  }
  {
    CheckCase c;
    c.name = "conv3d";
    c.inputs = {Tensor<double>::randn({1, 2, 4, 6, 5}, rng),
                Tensor<double>::randn({3, 2, 3, 3, 3}, rng, 0.3)};
    c.fn = [](const std::vector<Tensor<double>>& in, Tape<double>*) {
      return weighted_sum(ops::conv3d(in[0], in[1], {1, 2, 2}, {1, 1, 1}),
                          12);
    };
    cases.push_back(std::move(c));
  }
  {
    CheckCase c;
    c.name = "batch-norm-train";
    c.inputs = {Tensor<double>::randn({3, 4, 5, 5}, rng),
                Tensor<double>::uniform({4}, rng, 0.5, 1.5),
                Tensor<double>::randn({4}, rng, 0.2)};
    c.fn = [](const std::vector<Tensor<double>>& in, Tape<double>*) {
      Tensor<double> mean = Tensor<double>::zeros({4});
      Tensor<double> var = Tensor<double>::ones({4});
      return weighted_sum(
          ops::batch_norm(in[0], in[1], in[2], mean, var, Mode::Train), 13);
    };
    cases.push_back(std::move(c));
  }
  {
    CheckCase c;
    c.name = "swin-block";
    nn::BlockSpec spec;
    spec.kind = nn::BlockKind::Swin2D;
    spec.in_channels = 4;
    spec.out_channels = 4;
    spec.window = {1, 3, 1};
    spec.heads = 2;
    Rng init(77);
    auto params = nn::init_swin_block<double>(spec, 4, init);
    c.inputs = {Tensor<double>::randn({1, 1, 6, 2, 4}, rng)};
    c.fn = [spec, params](const std::vector<Tensor<double>>& in,
                          Tape<double>* tape) {
      nn::Ctx<double> ctx;
      ctx.tape = tape;
      return weighted_sum(nn::swin_block(in[0], spec, params, ctx), 14);
    };
    c.opts.denom_floor = 1e-5;  // attention softmax amplifies probe noise
    cases.push_back(std::move(c));
  }
  {
    CheckCase c;
    c.name = "head-combined-loss";
    head::HeadConfig hcfg;
    hcfg.parts = 2;
    hcfg.in_channels = 8;
    hcfg.embed_dim = 4;
    hcfg.num_classes = 3;
    Rng init(88);
    auto head_params = head::init_head<double>(hcfg, init);
    std::vector<int64_t> labels = {0, 0, 1, 1};
    c.inputs = {Tensor<double>::randn({4, 2, 8}, rng)};
    c.fn = [head_params, labels](const std::vector<Tensor<double>>& in,
                                 Tape<double>* tape) {
      nn::Ctx<double> ctx;
      ctx.tape = tape;
      ctx.mode = Mode::Train;
      auto out = head::head_forward(head_params, in[0], ctx);
      return head::combined_loss(out.embeddings, out.logits, labels, 0.2)
          .loss;
    };
    c.opts.denom_floor = 1e-5;
    cases.push_back(std::move(c));
  }

  bool all_pass = true;
  for (auto& c : cases) {
    GradCheckReport report = grad_check(c.fn, c.inputs, c.opts);
    all_pass &= report.pass;
    std::printf("%s %-18s max-rel-err=%.3e coords=%" PRId64 "\n",
                report.pass ? "PASS" : "FAIL", c.name.c_str(),
                report.max_relative_error, report.coords_checked);
  }
  std::printf("gradcheck: %s\n", all_pass ? "all passed" : "FAILURES");
  return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gaitforge: gait-recognition model training and evaluation"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model on a dataset");
  std::string train_config, train_data, train_out;
  uint64_t train_seed = 0;
  train_cmd->add_option("--config", train_config, "training config file")
      ->required();
  train_cmd->add_option("--data", train_data, "dataset root")->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--seed", train_seed, "rng seed");

  // eval
  auto* eval_cmd =
      app.add_subcommand("eval", "Evaluate a checkpoint: rank-k and mAP");
  std::string eval_ckpt, eval_gallery, eval_probe;
  bool eval_exclude_view = false;
  eval_cmd->add_option("--ckpt", eval_ckpt, "model checkpoint")->required();
  eval_cmd->add_option("--gallery", eval_gallery, "gallery dataset root")
      ->required();
  eval_cmd->add_option("--probe", eval_probe, "probe dataset root")
      ->required();
  eval_cmd->add_flag("--exclude-identical-view", eval_exclude_view,
                     "skip gallery entries sharing the probe's view");

  // ablate-shuffle
  auto* shuffle_cmd = app.add_subcommand(
      "ablate-shuffle", "Compare accuracy on intact vs frame-shuffled probes");
  std::string shuffle_ckpt, shuffle_data;
  uint64_t shuffle_seed = 0;
  shuffle_cmd->add_option("--ckpt", shuffle_ckpt, "model checkpoint")
      ->required();
  shuffle_cmd->add_option("--data", shuffle_data, "dataset root")->required();
  shuffle_cmd->add_option("--seed", shuffle_seed, "shuffle rng seed");

  // inspect
  auto* inspect_cmd = app.add_subcommand(
      "inspect", "Print depth, stage shapes, parameters, and FLOPs");
  std::string inspect_config, inspect_family, inspect_blocks;
  int64_t inspect_channels = 0;
  inspect_cmd->add_option("--config", inspect_config, "training config file");
  inspect_cmd->add_option("--family", inspect_family,
                          "model family (e.g. deepgaitv2-2d, swingait-3d)");
  inspect_cmd->add_option("--channels", inspect_channels, "base channels C");
  inspect_cmd->add_option("--blocks", inspect_blocks,
                          "comma-separated block counts b1,b2,b3,b4");

  // synth
  auto* synth_cmd =
      app.add_subcommand("synth", "Generate a synthetic walker corpus");
  std::string synth_out;
  int64_t synth_subjects = 40, synth_views = 2, synth_seqs = 4,
          synth_frames = 30;
  uint64_t synth_seed = 1234;
  bool synth_motion_only = false, synth_raw = false, synth_loose = false;
  synth_cmd->add_option("--out", synth_out, "output dataset root")
      ->required();
  synth_cmd->add_option("--subjects", synth_subjects, "number of subjects");
  synth_cmd->add_option("--seed", synth_seed, "corpus seed");
  synth_cmd->add_option("--views", synth_views, "views per subject");
  synth_cmd->add_option("--seqs", synth_seqs, "sequences per view");
  synth_cmd->add_option("--frames", synth_frames, "frames per sequence");
  synth_cmd->add_flag("--motion-only", synth_motion_only,
                      "identical bodies, distinct cadences");
  synth_cmd->add_flag("--raw", synth_raw,
                      "emit raw 64x64 canvases instead of normalized frames");
  synth_cmd->add_flag("--loose", synth_loose,
                      "write per-frame PGM files instead of packed .gsq");

  // patches
  auto* patches_cmd = app.add_subcommand(
      "patches", "Report the dataset's dumb-patch fraction");
  std::string patches_data;
  int64_t patches_patch = 4;
  patches_cmd->add_option("--data", patches_data, "dataset root")->required();
  patches_cmd->add_option("--patch", patches_patch, "patch edge in pixels");

  // gradcheck
  app.add_subcommand("gradcheck",
                     "Verify analytic gradients on representative blocks");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed())
      return cmd_train(train_config, train_data, train_out, train_seed);
    if (eval_cmd->parsed())
      return cmd_eval(eval_ckpt, eval_gallery, eval_probe, eval_exclude_view);
    if (shuffle_cmd->parsed())
      return cmd_ablate_shuffle(shuffle_ckpt, shuffle_data, shuffle_seed);
    if (inspect_cmd->parsed())
      return cmd_inspect(inspect_config, inspect_family, inspect_channels,
                         inspect_blocks);
    if (synth_cmd->parsed())
      return cmd_synth(synth_out, synth_subjects, synth_seed, synth_views,
                       synth_seqs, synth_frames, synth_motion_only, synth_raw,
                       synth_loose);
    if (patches_cmd->parsed())
      return cmd_patches(patches_data, patches_patch);
    if (app.get_subcommand("gradcheck")->parsed()) return cmd_gradcheck();
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
