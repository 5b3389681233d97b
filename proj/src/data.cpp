#include "gaitforge/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

namespace gaitforge::data {

namespace fs = std::filesystem;

Frame make_frame(int64_t height, int64_t width, uint8_t value) {
  check(height >= 1 && width >= 1, "frame dimensions must be positive");
  Frame f;
  f.height = height;
  f.width = width;
  f.mask.assign(static_cast<size_t>(height * width), value);
  return f;
}

std::vector<std::string> Dataset::subjects() const {
  std::set<std::string> s;
  for (const auto& seq : sequences) s.insert(seq.subject);
  return {s.begin(), s.end()};
}

std::map<std::string, std::vector<size_t>> Dataset::by_subject() const {
  std::map<std::string, std::vector<size_t>> m;
  for (size_t i = 0; i < sequences.size(); ++i)
    m[sequences[i].subject].push_back(i);
  return m;
}

int64_t Dataset::label_of(const std::string& subject) const {
  auto list = subjects();
  auto it = std::lower_bound(list.begin(), list.end(), subject);
  check(it != list.end() && *it == subject, "unknown subject: " + subject);
  return it - list.begin();
}

// ---------------------------------------------------------------------------
// alignment
// ---------------------------------------------------------------------------

namespace {

constexpr int64_t kOutH = 64;
constexpr int64_t kOutW = 44;
constexpr uint8_t kFg = 255;

inline bool fg(uint8_t v) { return v >= 128; }

// Bilinear sample of a {0,255} grid at a fractional point, zero outside.
double sample_gray(const Frame& f, double y, double x) {
  int64_t y0 = static_cast<int64_t>(std::floor(y));
  int64_t x0 = static_cast<int64_t>(std::floor(x));
  double wy = y - y0, wx = x - x0;
  double acc = 0;
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx) {
      int64_t yy = y0 + dy, xx = x0 + dx;
      if (yy < 0 || yy >= f.height || xx < 0 || xx >= f.width) continue;
      double w = (dy ? wy : 1 - wy) * (dx ? wx : 1 - wx);
      acc += w * f.at(yy, xx);
    }
  return acc;
}

}  // namespace

Frame normalize_silhouette(const Frame& raw) {
  check(raw.height >= 1 && raw.width >= 1, "empty frame");
  int64_t r0 = raw.height, r1 = -1, c0 = raw.width, c1 = -1;
  for (int64_t y = 0; y < raw.height; ++y)
    for (int64_t x = 0; x < raw.width; ++x)
      if (fg(raw.at(y, x))) {
        r0 = std::min(r0, y);
        r1 = std::max(r1, y);
        c0 = std::min(c0, x);
        c1 = std::max(c1, x);
      }
  check(r1 >= 0, "empty silhouette: no foreground pixels");

  // Work on the foreground bounding box: its content does not depend on the
  // figure's position, which makes the whole procedure exactly
  // translation-invariant.
  const int64_t ch = r1 - r0 + 1, cw = c1 - c0 + 1;
  const double scale = static_cast<double>(kOutH) / ch;
  const int64_t nw = std::max<int64_t>(1, std::llround(cw * scale));

  Frame crop = make_frame(ch, cw);
  for (int64_t y = 0; y < ch; ++y)
    for (int64_t x = 0; x < cw; ++x)
      crop.at(y, x) = fg(raw.at(r0 + y, c0 + x)) ? kFg : 0;

  Frame scaled = make_frame(kOutH, nw);
  for (int64_t y = 0; y < kOutH; ++y)
    for (int64_t x = 0; x < nw; ++x) {
      double sy = (y + 0.5) * ch / kOutH - 0.5;
      double sx = (x + 0.5) * cw / nw - 0.5;
      scaled.at(y, x) = sample_gray(crop, sy, sx) >= 128.0 ? kFg : 0;
    }

  // Center the 44-pixel window on the foreground centroid column.
  double cx = 0, total = 0;
  for (int64_t y = 0; y < kOutH; ++y)
    for (int64_t x = 0; x < nw; ++x)
      if (scaled.at(y, x)) {
        cx += x;
        total += 1;
      }
  check(total > 0, "empty silhouette after resampling");
  cx /= total;
  const int64_t offset = std::llround(cx - (kOutW - 1) / 2.0);

  Frame out = make_frame(kOutH, kOutW);
  for (int64_t y = 0; y < kOutH; ++y)
    for (int64_t x = 0; x < kOutW; ++x) {
      int64_t sx = x + offset;
      out.at(y, x) = (sx >= 0 && sx < nw) ? scaled.at(y, sx) : 0;
    }
  return out;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

namespace {

struct Affine {
  // x' = a x + b y + c ; y' = d x + e y + f
  double a = 1, b = 0, c = 0, d = 0, e = 1, f = 0;

  Affine inverse() const {
    double det = a * e - b * d;
    check(std::abs(det) > 1e-9, "degenerate augmentation transform");
    Affine inv;
    inv.a = e / det;
    inv.b = -b / det;
    inv.d = -d / det;
    inv.e = a / det;
    inv.c = -(inv.a * c + inv.b * f);
    inv.f = -(inv.d * c + inv.e * f);
    return inv;
  }
};

Frame warp(const Frame& in, const Affine& fwd) {
  Affine inv = fwd.inverse();
  Frame out = make_frame(in.height, in.width);
  for (int64_t y = 0; y < in.height; ++y)
    for (int64_t x = 0; x < in.width; ++x) {
      double sx = inv.a * x + inv.b * y + inv.c;
      double sy = inv.d * x + inv.e * y + inv.f;
      out.at(y, x) = sample_gray(in, sy, sx) >= 128.0 ? kFg : 0;
    }
  return out;
}

}  // namespace

Sequence spatial_augment(const Sequence& seq, Rng& rng,
                         const AugmentPolicy& policy) {
  check(!seq.frames.empty(), "cannot augment an empty sequence");
  const int64_t h = seq.frames[0].height, w = seq.frames[0].width;

  // Draw every transform parameter once; all frames share them.
  const bool do_flip = policy.flip_p > 0 && rng.bernoulli(policy.flip_p);
  const bool do_rot = policy.rotate_p > 0 && rng.bernoulli(policy.rotate_p);
  double angle = 0;
  if (do_rot)
    angle = rng.uniform(-policy.rotate_max_deg, policy.rotate_max_deg) *
            (M_PI / 180.0);
  const bool do_aff = policy.affine_p > 0 && rng.bernoulli(policy.affine_p);
  double jx0 = 0, jy0 = 0, jx1 = 0, jy1 = 0, jx2 = 0, jy2 = 0;
  if (do_aff) {
    const double jw = policy.affine_jitter * w, jh = policy.affine_jitter * h;
    jx0 = rng.uniform(-jw, jw);
    jy0 = rng.uniform(-jh, jh);
    jx1 = rng.uniform(-jw, jw);
    jy1 = rng.uniform(-jh, jh);
    jx2 = rng.uniform(-jw, jw);
    jy2 = rng.uniform(-jh, jh);
  }
  const bool do_erase = policy.erase_p > 0 && rng.bernoulli(policy.erase_p);
  int64_t ex = 0, ey = 0, ew = 0, eh = 0;
  if (do_erase) {
    int64_t mw = std::max<int64_t>(3, std::llround(w * policy.erase_frac));
    int64_t mh = std::max<int64_t>(3, std::llround(h * policy.erase_frac));
    ew = rng.randint(3, mw + 1);
    eh = rng.randint(3, mh + 1);
    ex = rng.randint(0, w - ew + 1);
    ey = rng.randint(0, h - eh + 1);
  }

  Affine rot;
  if (do_rot) {
    const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
    const double cs = std::cos(angle), sn = std::sin(angle);
    rot.a = cs;
    rot.b = -sn;
    rot.d = sn;
    rot.e = cs;
    rot.c = cx - cs * cx + sn * cy;
    rot.f = cy - sn * cx - cs * cy;
  }
  Affine aff;
  if (do_aff) {
    // Affine fixed by three jittered corners.
    aff.c = jx0;
    aff.f = jy0;
    aff.a = (w - 1 + jx1 - aff.c) / (w - 1);
    aff.d = (jy1 - aff.f) / (w - 1);
    aff.b = (jx2 - aff.c) / (h - 1);
    aff.e = (h - 1 + jy2 - aff.f) / (h - 1);
  }

  Sequence out = seq;
  for (auto& frame : out.frames) {
    check(frame.height == h && frame.width == w,
          "augmentation requires uniform frame sizes");
    if (do_flip) {
      Frame flipped = frame;
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          flipped.at(y, x) = frame.at(y, w - 1 - x);
      frame = flipped;
    }
    if (do_rot) frame = warp(frame, rot);
    if (do_aff) frame = warp(frame, aff);
    if (do_erase)
      for (int64_t y = ey; y < ey + eh; ++y)
        for (int64_t x = ex; x < ex + ew; ++x) frame.at(y, x) = 0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

void validate_batch_spec(const BatchSpec& spec) {
  check(spec.q >= 2, "batch needs q >= 2 subjects for valid triplets");
  check(spec.k >= 2, "batch needs k >= 2 sequences per subject");
  check(spec.frames >= 1, "batch needs at least one frame per clip");
}

namespace {

// Draw `count` distinct values from [0, n) via partial Fisher-Yates.
std::vector<size_t> draw_distinct(size_t n, size_t count, Rng& rng) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  for (size_t i = 0; i < count; ++i) {
    size_t j = static_cast<size_t>(
        rng.randint(static_cast<int64_t>(i), static_cast<int64_t>(n)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  return idx;
}

}  // namespace

Batch sample_batch(const Dataset& dataset, const BatchSpec& spec, Rng& rng,
                   const AugmentPolicy* augment) {
  validate_batch_spec(spec);
  auto groups = dataset.by_subject();
  std::vector<const std::pair<const std::string, std::vector<size_t>>*>
      eligible;
  for (const auto& g : groups)
    if (static_cast<int64_t>(g.second.size()) >= spec.k)
      eligible.push_back(&g);
  check(static_cast<int64_t>(eligible.size()) >= spec.q,
        "dataset has fewer than q subjects with k sequences each");

  const int64_t t = spec.frames;
  Batch batch;
  batch.clips = Tensor<float>::zeros({spec.q * spec.k, t, 1, kOutH, kOutW});
  float* out = batch.clips.data();

  auto subject_pick = draw_distinct(eligible.size(), size_t(spec.q), rng);
  int64_t clip_at = 0;
  for (size_t si : subject_pick) {
    const auto& [subject, seq_ids] = *eligible[si];
    const int64_t label = dataset.label_of(subject);
    auto seq_pick = draw_distinct(seq_ids.size(), size_t(spec.k), rng);
    for (size_t qi : seq_pick) {
      const Sequence& seq = dataset.sequences[seq_ids[qi]];
      const int64_t len = static_cast<int64_t>(seq.frames.size());
      check(len >= 1, "sequence with no frames");

      Sequence clip;
      clip.subject = seq.subject;
      clip.frames.reserve(size_t(t));
      if (spec.ordered) {
        int64_t start = rng.randint(0, len);
        for (int64_t i = 0; i < t; ++i)
          clip.frames.push_back(seq.frames[size_t((start + i) % len)]);
      } else {
        for (int64_t i = 0; i < t; ++i)
          clip.frames.push_back(seq.frames[size_t(rng.randint(0, len))]);
      }
      if (augment) clip = spatial_augment(clip, rng, *augment);

      for (int64_t i = 0; i < t; ++i) {
        const Frame& f = clip.frames[size_t(i)];
        check(f.height == kOutH && f.width == kOutW,
              "batch frames must be normalized to 64x44");
        float* dst = out + (clip_at * t + i) * kOutH * kOutW;
        for (int64_t px = 0; px < kOutH * kOutW; ++px)
          dst[px] = f.mask[size_t(px)] >= 128 ? 1.0f : 0.0f;
      }
      batch.labels.push_back(label);
      batch.subjects.push_back(subject);
      ++clip_at;
    }
  }
  return batch;
}

Tensor<float> sequence_to_clip(const Sequence& seq) {
  const int64_t t = static_cast<int64_t>(seq.frames.size());
  check(t >= 1, "cannot tensorize an empty sequence");
  Tensor<float> clip = Tensor<float>::zeros({1, t, 1, kOutH, kOutW});
  float* out = clip.data();
  for (int64_t i = 0; i < t; ++i) {
    const Frame& f = seq.frames[size_t(i)];
    check(f.height == kOutH && f.width == kOutW,
          "clip frames must be normalized to 64x44");
    for (int64_t px = 0; px < kOutH * kOutW; ++px)
      out[i * kOutH * kOutW + px] = f.mask[size_t(px)] >= 128 ? 1.0f : 0.0f;
  }
  return clip;
}

// ---------------------------------------------------------------------------
// shuffling
// ---------------------------------------------------------------------------

Sequence shuffle_frames(const Sequence& seq, Rng& rng) {
  check(seq.frames.size() >= 2, "shuffling needs at least two frames");
  Sequence out = seq;
  for (int64_t i = static_cast<int64_t>(out.frames.size()) - 1; i > 0; --i) {
    int64_t j = rng.randint(0, i + 1);
    std::swap(out.frames[size_t(i)], out.frames[size_t(j)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// dumb-patch analyzer
// ---------------------------------------------------------------------------

double dumb_patch_fraction(const Frame& frame, int64_t patch) {
  check(patch >= 1, "patch size must be positive");
  const int64_t ph = (frame.height + patch - 1) / patch;
  const int64_t pw = (frame.width + patch - 1) / patch;
  int64_t dumb = 0;
  for (int64_t py = 0; py < ph; ++py)
    for (int64_t px = 0; px < pw; ++px) {
      bool any_fg = false, any_bg = false;
      for (int64_t y = py * patch; y < (py + 1) * patch; ++y)
        for (int64_t x = px * patch; x < (px + 1) * patch; ++x) {
          // Out-of-frame pixels pad with background.
          bool v = y < frame.height && x < frame.width && fg(frame.at(y, x));
          (v ? any_fg : any_bg) = true;
        }
      if (!any_fg || !any_bg) ++dumb;
    }
  return static_cast<double>(dumb) / static_cast<double>(ph * pw);
}

double dumb_patch_fraction(const Dataset& dataset, int64_t patch) {
  check(patch >= 1, "patch size must be positive");
  double acc = 0;
  int64_t frames = 0;
  for (const auto& seq : dataset.sequences)
    for (const auto& f : seq.frames) {
      acc += dumb_patch_fraction(f, patch);
      ++frames;
    }
  check(frames > 0, "dataset has no frames");
  return acc / frames;
}

// ---------------------------------------------------------------------------
// dataset IO
// ---------------------------------------------------------------------------

namespace {

void write_u16(std::ofstream& os, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

uint16_t read_u16(std::ifstream& is, const std::string& what) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  check(bool(is), "truncated " + what);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

int pgm_token(std::ifstream& is) {
  // Next integer token, skipping whitespace and '#' comments.
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (!std::isspace(c)) {
      break;
    } else {
      c = is.get();
    }
  }
  check(c != EOF && std::isdigit(c), "malformed PGM header");
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = is.get();
  }
  return v;
}

}  // namespace

void save_pgm(const Frame& frame, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  check(bool(os), "cannot open for writing: " + path);
  os << "P5\n" << frame.width << " " << frame.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(frame.mask.data()),
           static_cast<std::streamsize>(frame.mask.size()));
  check(bool(os), "failed to write: " + path);
}

Frame load_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(bool(is), "cannot open: " + path);
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  check(m0 == 'P' && m1 == '5', "not a binary PGM (P5): " + path);
  int w = pgm_token(is);
  int h = pgm_token(is);
  int maxval = pgm_token(is);
  check(w >= 1 && h >= 1, "malformed PGM size: " + path);
  check(maxval > 0 && maxval <= 255, "unsupported PGM maxval: " + path);
  Frame f = make_frame(h, w);
  is.read(reinterpret_cast<char*>(f.mask.data()),
          static_cast<std::streamsize>(f.mask.size()));
  check(bool(is), "truncated PGM payload: " + path);
  return f;
}

void save_gsq(const std::vector<Frame>& frames, const std::string& path) {
  check(!frames.empty(), "cannot save an empty sequence");
  const int64_t h = frames[0].height, w = frames[0].width;
  check(h <= 0xffff && w <= 0xffff && frames.size() <= 0xffff,
        "sequence exceeds the packed-format range");
  std::ofstream os(path, std::ios::binary);
  check(bool(os), "cannot open for writing: " + path);
  os.write("GSEQ1\0", 6);
  write_u16(os, static_cast<uint16_t>(frames.size()));
  write_u16(os, static_cast<uint16_t>(h));
  write_u16(os, static_cast<uint16_t>(w));
  for (const auto& f : frames) {
    check(f.height == h && f.width == w,
          "inconsistent frame sizes in sequence");
    os.write(reinterpret_cast<const char*>(f.mask.data()),
             static_cast<std::streamsize>(f.mask.size()));
  }
  check(bool(os), "failed to write: " + path);
}

std::vector<Frame> load_gsq(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(bool(is), "cannot open: " + path);
  char magic[6];
  is.read(magic, 6);
  check(bool(is) && std::memcmp(magic, "GSEQ1\0", 6) == 0,
        "bad sequence magic: " + path);
  const uint16_t count = read_u16(is, "frame count: " + path);
  const uint16_t h = read_u16(is, "height: " + path);
  const uint16_t w = read_u16(is, "width: " + path);
  check(count >= 1 && h >= 1 && w >= 1, "malformed header: " + path);
  std::vector<Frame> frames;
  frames.reserve(count);
  for (uint16_t i = 0; i < count; ++i) {
    Frame f = make_frame(h, w);
    is.read(reinterpret_cast<char*>(f.mask.data()),
            static_cast<std::streamsize>(f.mask.size()));
    check(bool(is), "truncated frames: " + path);
    frames.push_back(std::move(f));
  }
  return frames;
}

void save_dataset(const Dataset& dataset, const std::string& root,
                  bool packed) {
  for (const auto& seq : dataset.sequences) {
    check(!seq.subject.empty() && !seq.condition.empty() && !seq.view.empty(),
          "sequence is missing its subject/condition/view labels");
    fs::path dir = fs::path(root) / seq.subject / seq.condition;
    fs::create_directories(dir);
    if (packed) {
      save_gsq(seq.frames, (dir / (seq.view + ".gsq")).string());
    } else {
      fs::path vdir = dir / seq.view;
      fs::create_directories(vdir);
      char name[16];
      for (size_t i = 0; i < seq.frames.size(); ++i) {
        std::snprintf(name, sizeof(name), "%04zu.pgm", i);
        save_pgm(seq.frames[i], (vdir / name).string());
      }
    }
  }
}

namespace {

std::vector<fs::path> sorted_entries(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

Dataset load_dataset(const std::string& root) {
  check(fs::exists(root), "dataset root does not exist: " + root);
  check(fs::is_directory(root), "dataset root is not a directory: " + root);
  Dataset ds;
  for (const auto& subject : sorted_entries(root)) {
    if (!fs::is_directory(subject)) continue;
    for (const auto& condition : sorted_entries(subject)) {
      if (!fs::is_directory(condition)) continue;
      for (const auto& entry : sorted_entries(condition)) {
        Sequence seq;
        seq.subject = subject.filename().string();
        seq.condition = condition.filename().string();
        if (fs::is_directory(entry)) {
          seq.view = entry.filename().string();
          for (const auto& frame : sorted_entries(entry))
            if (frame.extension() == ".pgm")
              seq.frames.push_back(load_pgm(frame.string()));
        } else if (entry.extension() == ".gsq") {
          seq.view = entry.stem().string();
          seq.frames = load_gsq(entry.string());
        } else {
          continue;
        }
        if (!seq.frames.empty()) ds.sequences.push_back(std::move(seq));
      }
    }
  }
  return ds;
}

}  // namespace gaitforge::data
