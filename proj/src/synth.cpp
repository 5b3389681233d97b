#include <algorithm>
#include <cmath>
#include <cstdio>

#include "gaitforge/data.hpp"

namespace gaitforge::data {

namespace {

constexpr int64_t kCanvas = 64;
constexpr double kTwoPi = 2.0 * M_PI;

struct Pt {
  double x = 0, y = 0;
};

// Paint every pixel whose center lies within `r` of segment p0-p1.
void capsule(Frame& f, Pt p0, Pt p1, double r) {
  const int64_t y0 =
      std::max<int64_t>(0, int64_t(std::floor(std::min(p0.y, p1.y) - r)));
  const int64_t y1 = std::min<int64_t>(
      f.height - 1, int64_t(std::ceil(std::max(p0.y, p1.y) + r)));
  const int64_t x0 =
      std::max<int64_t>(0, int64_t(std::floor(std::min(p0.x, p1.x) - r)));
  const int64_t x1 = std::min<int64_t>(
      f.width - 1, int64_t(std::ceil(std::max(p0.x, p1.x) + r)));
  const double dx = p1.x - p0.x, dy = p1.y - p0.y;
  const double len2 = dx * dx + dy * dy;
  for (int64_t y = y0; y <= y1; ++y)
    for (int64_t x = x0; x <= x1; ++x) {
      double t = 0;
      if (len2 > 0) {
        t = ((x - p0.x) * dx + (y - p0.y) * dy) / len2;
        t = std::clamp(t, 0.0, 1.0);
      }
      const double ex = x - (p0.x + t * dx), ey = y - (p0.y + t * dy);
      if (ex * ex + ey * ey <= r * r) f.at(y, x) = 255;
    }
}

struct Pose {
  // View foreshortening applied to the horizontal axis only.
  double cx, sx;

  Pt place(double x, double y) const { return {cx + (x - cx) * sx, y}; }
};

}  // namespace

void validate_identity(const WalkerIdentity& id) {
  check(id.leg_len >= 10 && id.leg_len <= 30, "leg_len outside [10, 30]");
  check(id.thigh_ratio >= 0.3 && id.thigh_ratio <= 0.7,
        "thigh_ratio outside [0.3, 0.7]");
  check(id.torso_len >= 8 && id.torso_len <= 25, "torso_len outside [8, 25]");
  check(id.torso_width >= 3 && id.torso_width <= 14,
        "torso_width outside [3, 14]");
  check(id.head_radius >= 2 && id.head_radius <= 8,
        "head_radius outside [2, 8]");
  check(id.arm_len >= 6 && id.arm_len <= 22, "arm_len outside [6, 22]");
  check(id.limb_width >= 1 && id.limb_width <= 5,
        "limb_width outside [1, 5]");
  check(id.frequency > 0 && id.frequency <= 0.25,
        "frequency outside (0, 0.25]");
  check(id.stride_amp >= 0.1 && id.stride_amp <= 1.0,
        "stride_amp outside [0.1, 1.0]");
  check(std::isfinite(id.phase), "phase must be finite");
  check(id.view >= -1.2 && id.view <= 1.2, "view outside [-1.2, 1.2]");
}

Sequence synth_walker(const WalkerIdentity& id, int64_t frames, uint64_t seed,
                      bool raw_canvas) {
  validate_identity(id);
  check(frames >= 1, "walker needs at least one frame");

  // Per-sequence variation: a random start phase and a hair of amplitude
  // spread, both fixed for the whole sequence.
  Rng rng(seed);
  const double phase_jitter = rng.uniform();  // cycles
  const double amp = id.stride_amp * (1.0 + 0.06 * (rng.uniform() - 0.5));

  Pose pose;
  pose.cx = kCanvas / 2.0;
  pose.sx = 0.55 + 0.45 * std::cos(id.view);
  const double ground = kCanvas - 6.0;
  const double thigh = id.leg_len * id.thigh_ratio;
  const double shin = id.leg_len - thigh;
  const double upper_arm = id.arm_len * 0.55;
  const double forearm = id.arm_len - upper_arm;
  const double limb_r = id.limb_width;
  // Frontal views present a wider trunk.
  const double torso_r =
      0.5 * id.torso_width * (1.0 + 0.35 * (1.0 - std::cos(id.view)));

  Sequence seq;
  seq.frames.reserve(static_cast<size_t>(frames));
  for (int64_t t = 0; t < frames; ++t) {
    // Every joint below is a function of the gait phase alone, so a phase
    // shift of pi reproduces the exact half-cycle-later frame.
    const double cycles = id.frequency * t + id.phase / kTwoPi + phase_jitter;
    const double phi = kTwoPi * cycles;

    Frame canvas = make_frame(kCanvas, kCanvas);
    const double bob = 0.6 - 0.6 * std::cos(2.0 * phi);
    const Pt hip = {pose.cx, ground - id.leg_len + bob};

    for (int side = 0; side < 2; ++side) {
      const double leg_phi = phi + M_PI * side;
      const double hip_angle = amp * std::sin(leg_phi);
      const double knee_bend = 0.9 * amp * 0.5 * (1.0 - std::cos(leg_phi));
      const double kx = hip.x + thigh * std::sin(hip_angle);
      const double ky = hip.y + thigh * std::cos(hip_angle);
      const double ax = kx + shin * std::sin(hip_angle - knee_bend);
      const double ay = ky + shin * std::cos(hip_angle - knee_bend);
      capsule(canvas, pose.place(hip.x, hip.y), pose.place(kx, ky), limb_r);
      capsule(canvas, pose.place(kx, ky), pose.place(ax, ay), limb_r);
    }

    const Pt neck = {hip.x, hip.y - id.torso_len};
    capsule(canvas, pose.place(hip.x, hip.y), pose.place(neck.x, neck.y),
            torso_r);
    const Pt head = {neck.x, neck.y - id.head_radius - 1.5};
    capsule(canvas, pose.place(head.x, head.y), pose.place(head.x, head.y),
            id.head_radius);

    for (int side = 0; side < 2; ++side) {
      // Arms swing in counter-phase with the same-side leg.
      const double arm_phi = phi + M_PI * (side + 1);
      const double arm_angle = 0.55 * amp * std::sin(arm_phi);
      const double ex = neck.x + upper_arm * std::sin(arm_angle);
      const double ey = neck.y + upper_arm * std::cos(arm_angle);
      const double wx = ex + forearm * std::sin(arm_angle + 0.35);
      const double wy = ey + forearm * std::cos(arm_angle + 0.35);
      capsule(canvas, pose.place(neck.x, neck.y), pose.place(ex, ey),
              limb_r * 0.85);
      capsule(canvas, pose.place(ex, ey), pose.place(wx, wy), limb_r * 0.85);
    }

    seq.frames.push_back(raw_canvas ? std::move(canvas)
                                    : normalize_silhouette(canvas));
  }
  return seq;
}

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
  uint64_t h = seed;
  for (uint64_t v : {a, b, c}) {
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    h *= 0xff51afd7ed558ccdull;
  }
  return h;
}

}  // namespace

Dataset make_synthetic_corpus(const CorpusOptions& opts) {
  check(opts.subjects >= 1, "corpus needs at least one subject");
  check(opts.views >= 1, "corpus needs at least one view");
  check(opts.seqs_per_view >= 1, "corpus needs at least one sequence");
  check(opts.frames >= 1, "corpus needs at least one frame");

  Rng master(opts.seed);
  std::vector<WalkerIdentity> identities;
  identities.reserve(static_cast<size_t>(opts.subjects));
  const int64_t pairs = (opts.subjects + 1) / 2;
  for (int64_t p = 0; p < pairs; ++p) {
    WalkerIdentity base;
    double base_freq = 0.06;
    if (!opts.motion_only) {
      Rng shape = master.fork(static_cast<uint64_t>(p));
      base.leg_len = shape.uniform(20.0, 27.0);
      base.thigh_ratio = shape.uniform(0.42, 0.58);
      base.torso_len = shape.uniform(14.0, 20.0);
      base.torso_width = shape.uniform(5.0, 10.0);
      base.head_radius = shape.uniform(3.5, 5.5);
      base.arm_len = shape.uniform(12.0, 18.0);
      base.limb_width = shape.uniform(2.2, 3.2);
      base.stride_amp = shape.uniform(0.45, 0.70);
      base_freq = shape.uniform(0.045, 0.075);
    }
    for (int64_t m = 0; m < 2; ++m) {
      const int64_t s = 2 * p + m;
      if (s >= opts.subjects) break;
      WalkerIdentity id = base;
      if (opts.motion_only) {
        // Identical bodies; identity lives in cadence alone, spread on a
        // geometric ladder across the valid frequency range.
        const double lo = 0.035, hi = 0.22;
        id.frequency =
            opts.subjects == 1
                ? lo
                : lo * std::pow(hi / lo,
                                double(s) / double(opts.subjects - 1));
      } else {
        // Pair members share a body and differ in cadence by x1.45.
        id.frequency = m == 0 ? base_freq : base_freq * 1.45;
      }
      identities.push_back(id);
    }
  }

  Dataset ds;
  char label[32];
  for (int64_t s = 0; s < opts.subjects; ++s) {
    for (int64_t v = 0; v < opts.views; ++v) {
      const double angle =
          opts.views == 1
              ? 0.15
              : 0.15 + (0.85 - 0.15) * double(v) / double(opts.views - 1);
      WalkerIdentity id = identities[static_cast<size_t>(s)];
      id.view = angle;
      for (int64_t q = 0; q < opts.seqs_per_view; ++q) {
        const uint64_t seed = mix_seed(opts.seed, uint64_t(s) + 1,
                                       uint64_t(v) + 1, uint64_t(q) + 1);
        Sequence seq = synth_walker(id, opts.frames, seed, opts.raw_canvas);
        std::snprintf(label, sizeof(label), "s%03lld",
                      static_cast<long long>(s));
        seq.subject = label;
        std::snprintf(label, sizeof(label), "seq%lld",
                      static_cast<long long>(q));
        seq.condition = label;
        std::snprintf(label, sizeof(label), "v%lld",
                      static_cast<long long>(v));
        seq.view = label;
        ds.sequences.push_back(std::move(seq));
      }
    }
  }
  return ds;
}

}  // namespace gaitforge::data
