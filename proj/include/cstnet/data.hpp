#pragma once

// Video re-identification datasets: the in-memory form, a seeded synthetic
// generator with controllable nuisances, and the on-disk layout
//
//   <dir>/index.txt      one line per sequence: "<identity> <camera> <split> <file>"
//   <dir>/<file>         frames as a CSTT float32 array of shape L×3×H×W
//
// Pixel values are intensities on a 0..255 scale.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cstnet/errors.hpp"
#include "cstnet/tensor_io.hpp"

namespace cstnet {

enum class Split { train, query, gallery };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "query") return Split::query;
  if (s == "gallery") return Split::gallery;
  throw ContractError("unknown split '" + s + "'");
}

struct Sequence {
  int identity = 0;
  int camera = 0;
  Split split = Split::train;
  DenseArray<float> frames;  // L×C×H×W

  std::size_t length() const { return frames.shape.empty() ? 0 : frames.shape[0]; }
  std::size_t frame_size() const { return frames.values.size() / std::max<std::size_t>(1, length()); }
  const float* frame(std::size_t i) const { return frames.values.data() + i * frame_size(); }

  bool operator==(const Sequence&) const = default;
};

struct VideoDataset {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Sequence> sequences;

  bool operator==(const VideoDataset&) const = default;

  std::size_t num_identities() const {
    int mx = -1;
    for (const auto& s : sequences) mx = std::max(mx, s.identity);
    return static_cast<std::size_t>(mx + 1);
  }

  std::vector<std::size_t> indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < sequences.size(); ++i)
      if (sequences[i].split == split) out.push_back(i);
    return out;
  }

  // Dense training labels in [0, #train identities).
  std::map<int, int> train_label_map() const {
    std::set<int> ids;
    for (const auto& s : sequences)
      if (s.split == Split::train) ids.insert(s.identity);
    std::map<int, int> m;
    int next = 0;
    for (int id : ids) m[id] = next++;
    return m;
  }

  void validate() const {
    std::set<int> ids;
    for (const auto& s : sequences) {
      if (s.identity < 0) throw ContractError("dataset: negative identity");
      const auto& sh = s.frames.shape;
      if (sh.size() != 4 || sh[0] < 1 || sh[1] != channels || sh[2] != height || sh[3] != width)
        throw ContractError("dataset: sequence frames " + shape_str(sh) + " do not match frame size " +
                            std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width));
      ids.insert(s.identity);
    }
    if (!ids.empty() && (*ids.begin() != 0 || static_cast<std::size_t>(*ids.rbegin()) + 1 != ids.size()))
      throw ContractError("dataset: identity ids are not dense in [0, n)");
    for (const auto& q : sequences) {
      if (q.split != Split::query) continue;
      bool ok = false;
      for (const auto& g : sequences)
        ok = ok || (g.split == Split::gallery && g.identity == q.identity && g.camera != q.camera);
      if (!ok)
        throw ContractError("dataset: query identity " + std::to_string(q.identity) +
                            " has no gallery sequence under another camera");
    }
  }
};

// Nuisance-controlled synthetic pedestrians. Every (identity, camera) pair
// receives train_seqs_per_cam training sequences and test_seqs_per_cam test
// sequences; test sequences from camera 0 are queries, the rest gallery.
struct SynthSpec {
  std::size_t num_identities = 16;
  std::size_t cams = 2;
  std::size_t train_seqs_per_cam = 1;
  std::size_t test_seqs_per_cam = 1;
  std::size_t seq_len_min = 8;
  std::size_t seq_len_max = 12;
  std::size_t height = 32;
  std::size_t width = 16;
  double background_clutter = 0.0;  // σ_b: per-patch intensity amplitude of clutter
  std::size_t clutter_patches = 6;
  double illum_gain_lo = 1.0;
  double illum_gain_hi = 1.0;
  double illum_bias_lo = 0.0;
  double illum_bias_hi = 0.0;
  double occlusion_prob = 0.0;
  std::size_t placement_jitter = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_identities == 0) throw ContractError("synth: need at least one identity");
    if (cams == 0) throw ContractError("synth: need at least one camera");
    if (seq_len_min == 0 || seq_len_max < seq_len_min) throw ContractError("synth: invalid sequence length range");
    if (height < 8 || width < 4) throw ContractError("synth: frame size too small");
    if (!(occlusion_prob >= 0.0 && occlusion_prob <= 1.0)) throw ContractError("synth: occlusion_prob outside [0,1]");
    if (!(illum_gain_lo > 0.0) || illum_gain_hi < illum_gain_lo) throw ContractError("synth: invalid gain range");
    if (illum_bias_hi < illum_bias_lo) throw ContractError("synth: invalid bias range");
    if (background_clutter < 0.0) throw ContractError("synth: negative clutter level");
    if (test_seqs_per_cam > 0 && cams < 2) throw ContractError("synth: query/gallery split needs two cameras");
  }
};

namespace synth_detail {

using Rgb = std::array<double, 3>;

struct Appearance {
  Rgb head, upper, lower, accent;
  double accent_row = 0;     // position of the accent band in the upper body, in [0,1)
  double accent_height = 0;  // as fraction of upper body height
  bool vertical_split = false;
};

struct Rect {
  long r0, c0, r1, c1;  // half-open
};

inline Rgb random_color(std::mt19937_64& rng, double lo = 30, double hi = 225) {
  std::uniform_real_distribution<double> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

inline void paint(std::vector<float>& img, std::size_t h, std::size_t w, const Rect& r, const Rgb& c) {
  for (long i = std::max(0L, r.r0); i < std::min(static_cast<long>(h), r.r1); ++i)
    for (long j = std::max(0L, r.c0); j < std::min(static_cast<long>(w), r.c1); ++j)
      for (std::size_t ch = 0; ch < 3; ++ch) img[(ch * h + i) * w + j] = static_cast<float>(c[ch]);
}

inline void shift(std::vector<float>& img, std::size_t h, std::size_t w, const Rect& r, const Rgb& delta) {
  for (long i = std::max(0L, r.r0); i < std::min(static_cast<long>(h), r.r1); ++i)
    for (long j = std::max(0L, r.c0); j < std::min(static_cast<long>(w), r.c1); ++j)
      for (std::size_t ch = 0; ch < 3; ++ch) img[(ch * h + i) * w + j] += static_cast<float>(delta[ch]);
}

inline Rect random_rect(std::mt19937_64& rng, std::size_t h, std::size_t w, double min_frac, double max_frac) {
  std::uniform_real_distribution<double> frac(min_frac, max_frac);
  const long rh = std::max(1L, std::lround(frac(rng) * static_cast<double>(h)));
  const long rw = std::max(1L, std::lround(frac(rng) * static_cast<double>(w)));
  std::uniform_int_distribution<long> r0(0, static_cast<long>(h) - rh), c0(0, static_cast<long>(w) - rw);
  const long r = r0(rng), c = c0(rng);
  return {r, c, r + rh, c + rw};
}

}  // namespace synth_detail

// Frames compose: a per-camera background, per-frame clutter patches, the
// identity's body pattern at a jittered placement, an optional occluder and a
// per-frame affine illumination change a·x + b, clamped to [0, 255].
inline VideoDataset generate_synthetic(const SynthSpec& spec) {
  using namespace synth_detail;
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::size_t h = spec.height, w = spec.width, plane = h * w;

  std::vector<Appearance> people(spec.num_identities);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& p : people) {
    p.head = random_color(rng, 120, 220);
    p.upper = random_color(rng);
    p.lower = random_color(rng);
    p.accent = random_color(rng);
    p.accent_row = unit(rng) * 0.6;
    p.accent_height = 0.2 + 0.2 * unit(rng);
    p.vertical_split = unit(rng) < 0.5;
  }
  std::vector<Rgb> cam_bg(spec.cams);
  for (auto& c : cam_bg) c = random_color(rng, 60, 190);

  VideoDataset ds;
  ds.channels = 3;
  ds.height = h;
  ds.width = w;
  std::uniform_int_distribution<std::size_t> len_dist(spec.seq_len_min, spec.seq_len_max);
  std::uniform_int_distribution<long> jitter(-static_cast<long>(spec.placement_jitter),
                                             static_cast<long>(spec.placement_jitter));
  std::normal_distribution<double> clutter(0.0, spec.background_clutter);
  std::uniform_real_distribution<double> gain(spec.illum_gain_lo, spec.illum_gain_hi);
  std::uniform_real_distribution<double> bias(spec.illum_bias_lo, spec.illum_bias_hi);

  // body box: rows [0.1h, 0.95h), cols [0.25w, 0.75w)
  const long body_r0 = std::lround(0.10 * h), body_r1 = std::lround(0.95 * h);
  const long body_c0 = std::lround(0.25 * w), body_c1 = std::lround(0.75 * w);
  const long head_r1 = body_r0 + std::lround(0.15 * (body_r1 - body_r0));
  const long waist = head_r1 + std::lround(0.45 * (body_r1 - body_r0));

  const std::size_t per_cam = spec.train_seqs_per_cam + spec.test_seqs_per_cam;
  for (std::size_t id = 0; id < spec.num_identities; ++id) {
    const auto& p = people[id];
    for (std::size_t cam = 0; cam < spec.cams; ++cam) {
      for (std::size_t s = 0; s < per_cam; ++s) {
        Sequence seq;
        seq.identity = static_cast<int>(id);
        seq.camera = static_cast<int>(cam);
        seq.split = s < spec.train_seqs_per_cam ? Split::train : (cam == 0 ? Split::query : Split::gallery);
        const std::size_t len = len_dist(rng);
        seq.frames.shape = {len, 3, h, w};
        seq.frames.values.reserve(len * 3 * plane);
        for (std::size_t f = 0; f < len; ++f) {
          std::vector<float> img(3 * plane);
          for (std::size_t ch = 0; ch < 3; ++ch)
            std::fill(img.begin() + ch * plane, img.begin() + (ch + 1) * plane, static_cast<float>(cam_bg[cam][ch]));
          // camera-specific horizon stripe
          paint(img, h, w, {static_cast<long>(h) * 2 / 3, 0, static_cast<long>(h) * 2 / 3 + 2, static_cast<long>(w)},
                {cam_bg[cam][1], cam_bg[cam][2], cam_bg[cam][0]});

          const long dy = jitter(rng), dx = jitter(rng);
          paint(img, h, w, {body_r0 + dy, body_c0 + dx + 1, head_r1 + dy, body_c1 + dx - 1}, p.head);
          if (p.vertical_split) {
            const long mid = (body_c0 + body_c1) / 2;
            paint(img, h, w, {head_r1 + dy, body_c0 + dx, waist + dy, mid + dx}, p.upper);
            paint(img, h, w, {head_r1 + dy, mid + dx, waist + dy, body_c1 + dx}, p.accent);
          } else {
            paint(img, h, w, {head_r1 + dy, body_c0 + dx, waist + dy, body_c1 + dx}, p.upper);
            const long band0 = head_r1 + std::lround(p.accent_row * (waist - head_r1));
            const long band1 = band0 + std::max(1L, std::lround(p.accent_height * (waist - head_r1)));
            paint(img, h, w, {band0 + dy, body_c0 + dx, band1 + dy, body_c1 + dx}, p.accent);
          }
          paint(img, h, w, {waist + dy, body_c0 + dx, body_r1 + dy, body_c1 + dx}, p.lower);

          if (spec.background_clutter > 0) {
            for (std::size_t k = 0; k < spec.clutter_patches; ++k) {
              const Rect r = random_rect(rng, h, w, 0.15, 0.45);
              shift(img, h, w, r, {clutter(rng), clutter(rng), clutter(rng)});
            }
          }
          if (spec.occlusion_prob > 0 && unit(rng) < spec.occlusion_prob) {
            paint(img, h, w, random_rect(rng, h, w, 0.25, 0.5), random_color(rng));
          }
          const double a = gain(rng), b = bias(rng);
          for (auto& v : img) v = static_cast<float>(std::clamp(a * v + b, 0.0, 255.0));
          seq.frames.values.insert(seq.frames.values.end(), img.begin(), img.end());
        }
        ds.sequences.push_back(std::move(seq));
      }
    }
  }
  return ds;
}

inline void save_dataset(const VideoDataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string index_path = (fs::path(dir) / "index.txt").string();
  std::ofstream index(index_path, std::ios::trunc);
  if (!index) throw FormatError(index_path, 0, "cannot open for writing");
  for (std::size_t i = 0; i < ds.sequences.size(); ++i) {
    const auto& s = ds.sequences[i];
    std::ostringstream name;
    name << "seq_" << std::setw(5) << std::setfill('0') << i << ".cstt";
    index << s.identity << ' ' << s.camera << ' ' << split_name(s.split) << ' ' << name.str() << '\n';
    write_array_file((fs::path(dir) / name.str()).string(), s.frames);
  }
  if (!index) throw FormatError(index_path, 0, "write failed");
}

inline VideoDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string index_path = (fs::path(dir) / "index.txt").string();
  std::ifstream index(index_path);
  if (!index) throw FormatError(index_path, 0, "cannot open dataset index");
  VideoDataset ds;
  std::string line;
  std::size_t offset = 0;
  bool first = true;
  while (std::getline(index, line)) {
    const std::size_t line_offset = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Sequence s;
    std::string split, file, extra;
    if (!(ls >> s.identity >> s.camera >> split >> file) || (ls >> extra))
      throw FormatError(index_path, line_offset, "malformed index line '" + line + "'");
    try {
      s.split = parse_split(split);
    } catch (const ContractError&) {
      throw FormatError(index_path, line_offset, "unknown split '" + split + "'");
    }
    const std::string path = (fs::path(dir) / file).string();
    s.frames = read_array_file<float>(path);
    const auto& sh = s.frames.shape;
    if (sh.size() != 4) throw FormatError(path, 0, "frames must have rank 4, got " + shape_str(sh));
    if (first) {
      ds.channels = sh[1];
      ds.height = sh[2];
      ds.width = sh[3];
      first = false;
    } else if (sh[1] != ds.channels || sh[2] != ds.height || sh[3] != ds.width) {
      throw FormatError(path, 0, "frame size " + shape_str(sh) + " disagrees with earlier sequences");
    }
    ds.sequences.push_back(std::move(s));
  }
  return ds;
}

// T frame indices spread evenly over a sequence of length len; shorter
// sequences repeat frames.
inline std::vector<std::size_t> evenly_spaced_frames(std::size_t len, std::size_t t) {
  std::vector<std::size_t> idx(t);
  for (std::size_t i = 0; i < t; ++i) idx[i] = i * len / t;
  return idx;
}

// Raw-pixel difficulty probe: each identity's centroid is the mean of all
// frames of its training sequences; every frame of every query sequence is
// assigned to the nearest centroid. Returns the fraction of query frames
// assigned to their own identity.
inline double nearest_centroid_rank1(const VideoDataset& ds) {
  const std::size_t fsz = ds.channels * ds.height * ds.width;
  std::map<int, std::vector<double>> centroid;
  std::map<int, std::size_t> count;
  for (const auto& s : ds.sequences) {
    if (s.split != Split::train) continue;
    auto& c = centroid[s.identity];
    if (c.empty()) c.assign(fsz, 0.0);
    for (std::size_t f = 0; f < s.length(); ++f)
      for (std::size_t i = 0; i < fsz; ++i) c[i] += s.frame(f)[i];
    count[s.identity] += s.length();
  }
  for (auto& [id, c] : centroid)
    for (auto& v : c) v /= static_cast<double>(count[id]);
  std::size_t total = 0, hits = 0;
  for (const auto& s : ds.sequences) {
    if (s.split != Split::query) continue;
    for (std::size_t f = 0; f < s.length(); ++f) {
      const float* x = s.frame(f);
      int best = -1;
      double best_d = std::numeric_limits<double>::infinity();
      for (const auto& [id, c] : centroid) {
        double d = 0;
        for (std::size_t i = 0; i < fsz; ++i) d += (x[i] - c[i]) * (x[i] - c[i]);
        if (d < best_d) {
          best_d = d;
          best = id;
        }
      }
      ++total;
      hits += best == s.identity;
    }
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

}  // namespace cstnet
