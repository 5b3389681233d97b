#pragma once
// Silhouette ingestion: alignment to 64x44, spatial augmentation,
// (q,k)-structured batch sampling, frame shuffling, the dumb-patch analyzer,
// a procedural synthetic walker, and PGM/.gsq dataset IO.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gaitforge/tensor.hpp"

namespace gaitforge::data {

// One binary silhouette frame; mask is row-major, {0, 255} once binarized.
struct Frame {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<uint8_t> mask;

  uint8_t at(int64_t y, int64_t x) const {
    return mask[static_cast<size_t>(y * width + x)];
  }
  uint8_t& at(int64_t y, int64_t x) {
    return mask[static_cast<size_t>(y * width + x)];
  }
};

Frame make_frame(int64_t height, int64_t width, uint8_t value = 0);

struct Sequence {
  std::vector<Frame> frames;
  std::string subject;
  std::string condition;
  std::string view;
};

struct Dataset {
  std::vector<Sequence> sequences;

  // Subjects in sorted order; the position is the integer class label.
  std::vector<std::string> subjects() const;
  // Sequence indices per subject, keyed like subjects().
  std::map<std::string, std::vector<size_t>> by_subject() const;
  int64_t label_of(const std::string& subject) const;
};

// ----- alignment -----

// Crop to the foreground rows, scale to height 64 preserving aspect ratio,
// center a 44-pixel window on the foreground centroid column, re-binarize.
// Exactly invariant to integer translations of the figure.
Frame normalize_silhouette(const Frame& raw);

// ----- augmentation -----

struct AugmentPolicy {
  double flip_p = 0.5;
  double rotate_p = 0.3;
  double rotate_max_deg = 10.0;
  double affine_p = 0.3;      // small corner-jitter warp
  double affine_jitter = 0.06;  // corner displacement, fraction of size
  double erase_p = 0.3;
  double erase_frac = 0.33;   // max erased side, fraction of size

  static AugmentPolicy off() {
    AugmentPolicy p;
    p.flip_p = p.rotate_p = p.affine_p = p.erase_p = 0.0;
    return p;
  }
};

// One transform draw applies to every frame of the sequence.
Sequence spatial_augment(const Sequence& seq, Rng& rng,
                         const AugmentPolicy& policy);

// ----- batching -----

struct BatchSpec {
  int64_t q = 8;          // subjects per batch
  int64_t k = 4;          // sequences per subject
  int64_t frames = 30;    // T
  bool ordered = true;    // contiguous window vs unordered resampling
};

void validate_batch_spec(const BatchSpec& spec);

struct Batch {
  Tensor<float> clips;               // [q*k, T, 1, 64, 44], values {0, 1}
  std::vector<int64_t> labels;       // subject class label per clip
  std::vector<std::string> subjects; // subject id per clip
};

// Draws q subjects x k of their sequences; ordered sampling takes a random
// contiguous window of `frames` frames with cyclic wrap, unordered draws
// frames uniformly with replacement. Augmentation, when given, is applied
// per clip before tensorization.
Batch sample_batch(const Dataset& dataset, const BatchSpec& spec, Rng& rng,
                   const AugmentPolicy* augment = nullptr);

// Stacks one whole sequence as a [1, T, 1, 64, 44] clip (evaluation path).
Tensor<float> sequence_to_clip(const Sequence& seq);

// ----- shuffling (ablation input) -----

Sequence shuffle_frames(const Sequence& seq, Rng& rng);

// ----- dumb-patch analyzer -----

// Fraction of non-overlapping patch x patch tiles that are uniformly
// background or uniformly foreground; frames pad with background.
double dumb_patch_fraction(const Frame& frame, int64_t patch);
double dumb_patch_fraction(const Dataset& dataset, int64_t patch);

// ----- synthetic walker -----

struct WalkerIdentity {
  double leg_len = 24.0;        // pixels, hip to ground at standing
  double thigh_ratio = 0.5;     // thigh share of leg length
  double torso_len = 17.0;
  double torso_width = 7.0;
  double head_radius = 4.5;
  double arm_len = 15.0;
  double limb_width = 2.6;
  double frequency = 0.06;      // gait cycles per frame
  double stride_amp = 0.55;     // hip swing amplitude, radians
  double phase = 0.0;           // initial gait phase, radians
  double view = 0.0;            // viewing azimuth, radians
};

void validate_identity(const WalkerIdentity& id);

// Deterministic articulated walker: every joint trajectory is a function of
// the gait phase alone. Returns raw 64x64 canvases when `raw_canvas`,
// normalized 64x44 frames otherwise.
Sequence synth_walker(const WalkerIdentity& id, int64_t frames, uint64_t seed,
                      bool raw_canvas = false);

struct CorpusOptions {
  int64_t subjects = 40;
  int64_t views = 2;
  int64_t seqs_per_view = 4;
  int64_t frames = 30;
  uint64_t seed = 1234;
  // Identical body shapes; identities differ only in gait frequency.
  bool motion_only = false;
  bool raw_canvas = false;
};

// Paired corpus: subjects 2i and 2i+1 share a body shape and differ in gait
// frequency, so temporal cues carry half the identity information. The
// motion-only variant gives every subject the same shape and a geometric
// frequency ladder.
Dataset make_synthetic_corpus(const CorpusOptions& opts);

// ----- dataset IO -----

// Layout: root/<subject>/<condition>/<view>/<index>.pgm (binary P5) or the
// packed root/<subject>/<condition>/<view>.gsq ("GSEQ1\0", then
// little-endian u16 frame count, u16 height, u16 width, raw frames).
Dataset load_dataset(const std::string& root);
void save_dataset(const Dataset& dataset, const std::string& root,
                  bool packed = true);

Frame load_pgm(const std::string& path);
void save_pgm(const Frame& frame, const std::string& path);
std::vector<Frame> load_gsq(const std::string& path);
void save_gsq(const std::vector<Frame>& frames, const std::string& path);

}  // namespace gaitforge::data
