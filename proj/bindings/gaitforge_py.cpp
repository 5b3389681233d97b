// _gaitforge: numpy-facing bindings over the C++ core.
//
// Exposed surface mirrors the CLI: silhouette normalization, the synthetic
// walker, dumb-patch analysis, architecture inspection, model build /
// save / load / embed, training, and the two evaluation protocols.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <string>
#include <vector>

#include "gaitforge/backbone.hpp"
#include "gaitforge/data.hpp"
#include "gaitforge/eval.hpp"
#include "gaitforge/train.hpp"

namespace py = pybind11;
using namespace gaitforge;

namespace {

using MaskArray = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>;

data::Frame frame_from_array(const py::array_t<uint8_t>& arr) {
  if (arr.ndim() != 2) throw Error("expected a 2-d uint8 mask array");
  data::Frame f = data::make_frame(arr.shape(0), arr.shape(1));
  std::memcpy(f.mask.data(), arr.data(), size_t(arr.size()));
  return f;
}

py::array_t<uint8_t> array_from_frame(const data::Frame& f) {
  py::array_t<uint8_t> arr({f.height, f.width});
  std::memcpy(arr.mutable_data(), f.mask.data(), f.mask.size());
  return arr;
}

std::vector<data::Frame> frames_from_array(const py::array_t<uint8_t>& arr) {
  if (arr.ndim() == 2) return {frame_from_array(arr)};
  if (arr.ndim() != 3) throw Error("expected a [T, H, W] uint8 array");
  std::vector<data::Frame> frames;
  const int64_t t = arr.shape(0), h = arr.shape(1), w = arr.shape(2);
  for (int64_t i = 0; i < t; ++i) {
    data::Frame f = data::make_frame(h, w);
    std::memcpy(f.mask.data(), arr.data() + i * h * w, size_t(h * w));
    frames.push_back(std::move(f));
  }
  return frames;
}

py::array_t<uint8_t> array_from_frames(const std::vector<data::Frame>& fr) {
  check(!fr.empty(), "sequence is empty");
  const int64_t h = fr[0].height, w = fr[0].width;
  py::array_t<uint8_t> arr({int64_t(fr.size()), h, w});
  for (size_t i = 0; i < fr.size(); ++i) {
    check(fr[i].height == h && fr[i].width == w,
          "inconsistent frame sizes in sequence");
    std::memcpy(arr.mutable_data() + int64_t(i) * h * w, fr[i].mask.data(),
                size_t(h * w));
  }
  return arr;
}

backbone::BackboneConfig config_from_args(const std::string& family,
                                          int64_t channels,
                                          const std::vector<int64_t>& blocks) {
  backbone::BackboneConfig cfg;
  cfg.family = backbone::family_from_string(family);
  if (channels > 0) cfg.base_channels = channels;
  if (!blocks.empty()) {
    check(blocks.size() == 4, "blocks must hold exactly four counts");
    std::copy(blocks.begin(), blocks.end(), cfg.block_counts.begin());
  }
  backbone::validate_config(cfg);
  return cfg;
}

// Thin owning wrapper so Python holds a complete trained or fresh model.
struct PyModel {
  train::GaitModel<float> model;

  py::array_t<float> embed(const py::array_t<uint8_t>& frames_arr) {
    data::Sequence seq;
    seq.frames = frames_from_array(frames_arr);
    Tensor<float> e = eval::extract_embedding(model, seq);
    const int64_t parts = e.shape()[0], dim = e.shape()[1];
    py::array_t<float> out({parts, dim});
    std::memcpy(out.mutable_data(), e.data(),
                size_t(e.numel()) * sizeof(float));
    return out;
  }

  void save(const std::string& path) { train::save_model(model, path); }

  py::dict info() const {
    py::dict d;
    d["family"] = backbone::family_name(model.backbone.config.family);
    d["base_channels"] = model.backbone.config.base_channels;
    d["embed_dim"] = model.head.config.embed_dim;
    d["parts"] = model.head.config.parts;
    d["num_classes"] = model.head.config.num_classes;
    d["backbone_params"] = backbone::count_params(model.backbone);
    return d;
  }
};

PyModel build_model_py(const std::string& family, int64_t channels,
                       const std::vector<int64_t>& blocks, int64_t embed_dim,
                       int64_t num_classes, uint64_t seed) {
  train::TrainConfig cfg;
  cfg.backbone = config_from_args(family, channels, blocks);
  cfg.embed_dim = embed_dim;
  Rng rng(seed);
  return PyModel{train::build_model<float>(cfg, num_classes, rng)};
}

PyModel load_model_py(const std::string& path) {
  return PyModel{train::load_model<float>(path)};
}

py::dict report_to_dict(const eval::EvalReport& r) {
  py::dict d;
  d["rank1"] = r.rank1;
  d["rank5"] = r.rank5;
  d["rank10"] = r.rank10;
  d["map"] = r.map;
  d["probes_evaluated"] = r.probes_evaluated;
  d["probes_excluded"] = r.probes_excluded;
  return d;
}

}  // namespace

PYBIND11_MODULE(_gaitforge, m) {
  m.doc() = "gait-recognition model family: C++ core bindings";

  py::register_exception<Error>(m, "GaitforgeError", PyExc_RuntimeError);

  m.def(
      "normalize_silhouette",
      [](const MaskArray& mask) {
        return array_from_frame(data::normalize_silhouette(
            frame_from_array(mask)));
      },
      py::arg("mask"),
      "Threshold, crop to the foreground box, rescale to height 64, and "
      "center on the centroid column in a 64x44 canvas.");

  m.def(
      "synth_walker",
      [](int64_t frames, uint64_t seed, double leg_len, double thigh_ratio,
         double torso_len, double torso_width, double head_radius,
         double arm_len, double limb_width, double frequency,
         double stride_amp, double phase, double view, bool raw) {
        data::WalkerIdentity id;
        id.leg_len = leg_len;
        id.thigh_ratio = thigh_ratio;
        id.torso_len = torso_len;
        id.torso_width = torso_width;
        id.head_radius = head_radius;
        id.arm_len = arm_len;
        id.limb_width = limb_width;
        id.frequency = frequency;
        id.stride_amp = stride_amp;
        id.phase = phase;
        id.view = view;
        return array_from_frames(
            data::synth_walker(id, frames, seed, raw).frames);
      },
      py::arg("frames") = 30, py::arg("seed") = 0, py::arg("leg_len") = 24.0,
      py::arg("thigh_ratio") = 0.5, py::arg("torso_len") = 17.0,
      py::arg("torso_width") = 7.0, py::arg("head_radius") = 4.5,
      py::arg("arm_len") = 15.0, py::arg("limb_width") = 2.6,
      py::arg("frequency") = 0.06, py::arg("stride_amp") = 0.55,
      py::arg("phase") = 0.0, py::arg("view") = 0.0, py::arg("raw") = false,
      "Render a deterministic articulated walker as [T, H, W] uint8 masks.");

  m.def(
      "synth_corpus",
      [](const std::string& out_dir, int64_t subjects, int64_t views,
         int64_t seqs_per_view, int64_t frames, uint64_t seed,
         bool motion_only, bool raw, bool packed) {
        data::CorpusOptions opts;
        opts.subjects = subjects;
        opts.views = views;
        opts.seqs_per_view = seqs_per_view;
        opts.frames = frames;
        opts.seed = seed;
        opts.motion_only = motion_only;
        opts.raw_canvas = raw;
        data::Dataset ds = data::make_synthetic_corpus(opts);
        data::save_dataset(ds, out_dir, packed);
        return int64_t(ds.sequences.size());
      },
      py::arg("out_dir"), py::arg("subjects") = 40, py::arg("views") = 2,
      py::arg("seqs_per_view") = 4, py::arg("frames") = 30,
      py::arg("seed") = 1234, py::arg("motion_only") = false,
      py::arg("raw") = false, py::arg("packed") = true,
      "Write a synthetic walker corpus to disk; returns the sequence count.");

  m.def(
      "dumb_patch_fraction",
      [](const MaskArray& frames, int64_t patch) {
        const auto fr = frames_from_array(frames);
        double total = 0;
        for (const auto& f : fr) total += data::dumb_patch_fraction(f, patch);
        return total / double(fr.size());
      },
      py::arg("frames"), py::arg("patch"),
      "Fraction of patch x patch tiles that are entirely foreground or "
      "entirely background, averaged over frames.");

  m.def(
      "inspect",
      [](const std::string& family, int64_t channels,
         const std::vector<int64_t>& blocks) {
        auto cfg = config_from_args(family, channels, blocks);
        Rng rng(0);
        auto model = backbone::build_backbone<float>(cfg, rng);
        py::dict d;
        d["family"] = backbone::family_name(cfg.family);
        d["base_channels"] = cfg.base_channels;
        d["depth"] = backbone::depth_of(cfg.block_counts);
        d["parts"] = cfg.parts();
        d["params"] = backbone::count_params(model);
        d["flops_per_frame"] = backbone::count_flops(cfg);
        py::list stages;
        for (const auto& s : backbone::plan_shapes(cfg, 1, 30)) {
          py::list shape;
          for (int64_t e : s.shape) shape.append(e);
          stages.append(py::make_tuple(s.name, shape));
        }
        d["stages"] = stages;
        return d;
      },
      py::arg("family"), py::arg("channels") = 0,
      py::arg("blocks") = std::vector<int64_t>{},
      "Depth, part count, parameter total, FLOPs/frame, and stage shapes.");

  py::class_<PyModel>(m, "Model")
      .def_static("build", &build_model_py, py::arg("family"),
                  py::arg("channels") = 0,
                  py::arg("blocks") = std::vector<int64_t>{},
                  py::arg("embed_dim") = 256, py::arg("num_classes") = 2,
                  py::arg("seed") = 0)
      .def_static("load", &load_model_py, py::arg("path"))
      .def("save", &PyModel::save, py::arg("path"))
      .def("embed", &PyModel::embed, py::arg("frames"),
           "Embed a [T, 64, 44] uint8 silhouette sequence to [parts, dim].")
      .def("info", &PyModel::info);

  m.def(
      "train",
      [](const std::string& config_text, const std::string& data_dir,
         const std::string& out_dir, uint64_t seed) {
        train::TrainConfig cfg = train::parse_train_config(config_text);
        data::Dataset ds = data::load_dataset(data_dir);
        const int64_t classes = int64_t(ds.subjects().size());
        Rng root(seed);
        Rng init_rng = root.fork(0);
        auto model = train::build_model<float>(cfg, classes, init_rng);
        if (!cfg.warm_start.empty()) {
          NamedTensors<float> donor = load_checkpoint<float>(cfg.warm_start);
          backbone::warm_start_from(model.backbone, donor);
          cfg.optimizer.overrides.push_back(
              {model.backbone.warm_names, cfg.warm_lr});
        }
        train::TrainResult result;
        {
          py::gil_scoped_release release;
          result = train::train(model, ds, cfg, seed, out_dir);
        }
        py::dict d;
        d["steps"] = result.steps;
        d["checkpoints"] = result.checkpoints;
        if (!result.log.empty()) {
          d["final_triplet_loss"] = result.log.back().l_tri;
          d["final_ce_loss"] = result.log.back().l_ce;
        }
        return d;
      },
      py::arg("config_text"), py::arg("data_dir"), py::arg("out_dir"),
      py::arg("seed") = 0,
      "Train per a key=value config string; returns steps and checkpoints.");

  m.def(
      "evaluate",
      [](const std::string& ckpt, const std::string& gallery_dir,
         const std::string& probe_dir, bool exclude_identical_view) {
        auto model = train::load_model<float>(ckpt);
        eval::EvalReport rep;
        {
          py::gil_scoped_release release;
          auto gallery = eval::extract_embeddings(
              model, data::load_dataset(gallery_dir));
          auto probe =
              eval::extract_embeddings(model, data::load_dataset(probe_dir));
          eval::EvalOptions opts;
          opts.exclude_identical_view = exclude_identical_view;
          rep = eval::evaluate(gallery, probe, opts);
        }
        return report_to_dict(rep);
      },
      py::arg("ckpt"), py::arg("gallery_dir"), py::arg("probe_dir"),
      py::arg("exclude_identical_view") = false,
      "Rank-k / mAP retrieval evaluation of a checkpoint.");

  m.def(
      "shuffle_ablation",
      [](const std::string& ckpt, const std::string& data_dir,
         uint64_t seed) {
        auto model = train::load_model<float>(ckpt);
        eval::ShuffleReport rep;
        {
          py::gil_scoped_release release;
          data::Dataset ds = data::load_dataset(data_dir);
          Rng rng(seed);
          rep = eval::shuffled_eval(model, ds, rng);
        }
        py::dict d;
        d["accuracy"] = rep.accuracy;
        d["shuffled_accuracy"] = rep.shuffled_accuracy;
        d["delta"] = rep.delta;
        return d;
      },
      py::arg("ckpt"), py::arg("data_dir"), py::arg("seed") = 0,
      "Rank-1 on intact vs frame-shuffled sequences; delta = intact - "
      "shuffled.");
}
