#pragma once

// Slow reference implementations written directly from the defining formulas
// with plain loops over std::vector<double>. They share no code with the
// library kernels and exist only to check them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <vector>

namespace cstnet::oracle {

using Vec = std::vector<double>;

// a: m×k, b: k×n
inline Vec matmul(const Vec& a, std::size_t m, std::size_t k, const Vec& b, std::size_t n) {
  Vec c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

struct ConvShape {
  std::size_t n, c_in, h, w, c_out, k, stride, pad;
  std::size_t out_h() const { return (h + 2 * pad - k) / stride + 1; }
  std::size_t out_w() const { return (w + 2 * pad - k) / stride + 1; }
};

// Cross-correlation, zero padding.
inline Vec conv2d(const Vec& x, const Vec& kernel, const std::optional<Vec>& bias, const ConvShape& s) {
  const std::size_t oh = s.out_h(), ow = s.out_w();
  Vec y(s.n * s.c_out * oh * ow, 0.0);
  for (std::size_t b = 0; b < s.n; ++b)
    for (std::size_t o = 0; o < s.c_out; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = bias ? (*bias)[o] : 0.0;
          for (std::size_t c = 0; c < s.c_in; ++c)
            for (std::size_t u = 0; u < s.k; ++u)
              for (std::size_t v = 0; v < s.k; ++v) {
                const long r = static_cast<long>(i * s.stride + u) - static_cast<long>(s.pad);
                const long q = static_cast<long>(j * s.stride + v) - static_cast<long>(s.pad);
                if (r < 0 || q < 0 || r >= static_cast<long>(s.h) || q >= static_cast<long>(s.w)) continue;
                acc += x[((b * s.c_in + c) * s.h + r) * s.w + q] * kernel[((o * s.c_in + c) * s.k + u) * s.k + v];
              }
          y[((b * s.c_out + o) * oh + i) * ow + j] = acc;
        }
  return y;
}

inline Vec softmax(const Vec& x) {
  Vec e(x.size());
  double total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) total += e[i] = std::exp(x[i]);
  for (auto& v : e) v /= total;
  return e;
}

// planes: count of H×W planes stacked contiguously
inline Vec adaptive_avg_pool(const Vec& x, std::size_t planes, std::size_t h, std::size_t w, std::size_t oh,
                             std::size_t ow) {
  Vec y(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t r0 = i * h / oh, r1 = ((i + 1) * h + oh - 1) / oh;
        const std::size_t c0 = j * w / ow, c1 = ((j + 1) * w + ow - 1) / ow;
        double acc = 0;
        for (std::size_t r = r0; r < r1; ++r)
          for (std::size_t c = c0; c < c1; ++c) acc += x[(p * h + r) * w + c];
        y[(p * oh + i) * ow + j] = acc / static_cast<double>((r1 - r0) * (c1 - c0));
      }
  return y;
}

inline double ncc(const Vec& p, const Vec& q, double eps) {
  const double d = static_cast<double>(p.size());
  double mp = 0, mq = 0;
  for (std::size_t g = 0; g < p.size(); ++g) {
    mp += p[g] / d;
    mq += q[g] / d;
  }
  double vp = 0, vq = 0, acc = 0;
  for (std::size_t g = 0; g < p.size(); ++g) {
    vp += (p[g] - mp) * (p[g] - mp) / d;
    vq += (q[g] - mq) * (q[g] - mq) / d;
  }
  const double sp = std::sqrt(vp) + eps, sq = std::sqrt(vq) + eps;
  for (std::size_t g = 0; g < p.size(); ++g) acc += (p[g] - mp) / sp * ((q[g] - mq) / sq);
  return acc / d;
}

// desc: frames×C×H×W (frames = clips·t). Result frames×((t−1)·H·W)×H×W.
inline Vec spatial_volume(const Vec& desc, std::size_t frames, std::size_t c, std::size_t h, std::size_t w,
                          std::size_t t, double eps) {
  const std::size_t hw = h * w, slots = (t - 1) * hw;
  auto at = [&](std::size_t f, std::size_t pos) {
    Vec v(c);
    for (std::size_t ch = 0; ch < c; ++ch) v[ch] = desc[(f * c + ch) * hw + pos];
    return v;
  };
  Vec vol(frames * slots * hw);
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t clip = f / t, self = f % t;
    std::size_t slot = 0;
    for (std::size_t k = 0; k < t; ++k) {
      if (k == self) continue;
      for (std::size_t hh = 0; hh < h; ++hh)
        for (std::size_t ww = 0; ww < w; ++ww, ++slot)
          for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
              vol[(f * slots + slot) * hw + i * w + j] = ncc(at(f, i * w + j), at(clip * t + k, hh * w + ww), eps);
    }
  }
  return vol;
}

// desc: frames×C×HL×WL. Result frames×((t−1)·C)×C: entry (slot(k,c'), c).
inline Vec channel_volume(const Vec& desc, std::size_t frames, std::size_t c, std::size_t cells, std::size_t t,
                          double eps) {
  const std::size_t slots = (t - 1) * c;
  auto chan = [&](std::size_t f, std::size_t ch) {
    return Vec(desc.begin() + static_cast<long>((f * c + ch) * cells),
               desc.begin() + static_cast<long>((f * c + ch + 1) * cells));
  };
  Vec vol(frames * slots * c);
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t clip = f / t, self = f % t;
    std::size_t slot = 0;
    for (std::size_t k = 0; k < t; ++k) {
      if (k == self) continue;
      for (std::size_t cp = 0; cp < c; ++cp, ++slot)
        for (std::size_t ch = 0; ch < c; ++ch)
          vol[(f * slots + slot) * c + ch] = ncc(chan(f, ch), chan(clip * t + k, cp), eps);
    }
  }
  return vol;
}

inline double euclidean(const Vec& f, std::size_t d, std::size_t i, std::size_t j) {
  double acc = 0;
  for (std::size_t k = 0; k < d; ++k) acc += (f[i * d + k] - f[j * d + k]) * (f[i * d + k] - f[j * d + k]);
  return std::sqrt(acc);
}

inline Vec pairwise_distances(const Vec& f, std::size_t n, std::size_t d) {
  Vec out(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = euclidean(f, d, i, j);
  return out;
}

// Mean over anchors of the worst hinge over every (positive, negative) pair.
inline double batch_hard_triplet(const Vec& f, std::size_t n, std::size_t d, const std::vector<int>& labels,
                                 double margin) {
  double total = 0;
  for (std::size_t a = 0; a < n; ++a) {
    double worst = 0;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (std::size_t q = 0; q < n; ++q) {
        if (labels[q] == labels[a]) continue;
        worst = std::max(worst, margin + euclidean(f, d, a, p) - euclidean(f, d, a, q));
      }
    }
    total += worst;
  }
  return total / static_cast<double>(n);
}

inline double label_smooth_ce(const Vec& logits, std::size_t n, std::size_t k, const std::vector<int>& labels,
                              double eps) {
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Vec row(logits.begin() + static_cast<long>(i * k), logits.begin() + static_cast<long>((i + 1) * k));
    const auto p = softmax(row);
    for (std::size_t c = 0; c < k; ++c) {
      const double q = (static_cast<int>(c) == labels[i] ? 1.0 - eps : 0.0) + eps / static_cast<double>(k);
      total -= q * std::log(p[c]);
    }
  }
  return total / static_cast<double>(n);
}

struct RankingInstance {
  std::size_t queries = 0, gallery = 0;
  Vec dist;  // queries×gallery
  std::vector<int> qid, gid, qcam, gcam;
};

// Position (1-based) of gallery item g in query q's ranking, found by
// counting the admissible items that precede it under (distance, index)
// order rather than by sorting.
inline std::size_t rank_position(const RankingInstance& r, std::size_t q, std::size_t g) {
  std::size_t before = 0;
  const double dg = r.dist[q * r.gallery + g];
  for (std::size_t o = 0; o < r.gallery; ++o) {
    if (r.gid[o] == r.qid[q] && r.gcam[o] == r.qcam[q]) continue;
    const double d = r.dist[q * r.gallery + o];
    if (d < dg || (d == dg && o < g)) ++before;
  }
  return before + 1;
}

inline bool admissible_match(const RankingInstance& r, std::size_t q, std::size_t g) {
  return r.gid[g] == r.qid[q] && r.gcam[g] != r.qcam[q];
}

struct RankingOracle {
  Vec cmc;
  double map = 0;
  Vec per_query_ap;
  std::size_t valid = 0, skipped = 0;
};

inline RankingOracle ranking(const RankingInstance& r, std::size_t max_rank) {
  RankingOracle out;
  out.cmc.assign(max_rank, 0.0);
  for (std::size_t q = 0; q < r.queries; ++q) {
    std::vector<std::size_t> positions;
    for (std::size_t g = 0; g < r.gallery; ++g)
      if (admissible_match(r, q, g)) positions.push_back(rank_position(r, q, g));
    if (positions.empty()) {
      ++out.skipped;
      continue;
    }
    ++out.valid;
    const std::size_t best = *std::min_element(positions.begin(), positions.end());
    for (std::size_t k = 1; k <= max_rank; ++k)
      if (best <= k) out.cmc[k - 1] += 1;
    double ap = 0;
    for (auto pos : positions) {
      const auto hits = static_cast<double>(std::count_if(positions.begin(), positions.end(),
                                                          [pos](std::size_t o) { return o <= pos; }));
      ap += hits / static_cast<double>(pos);
    }
    out.per_query_ap.push_back(ap / static_cast<double>(positions.size()));
  }
  if (out.valid) {
    for (auto& v : out.cmc) v /= static_cast<double>(out.valid);
    for (auto v : out.per_query_ap) out.map += v;
    out.map /= static_cast<double>(out.valid);
  }
  return out;
}

// 1×1 convolution parameters as plain arrays: weight out×in, bias out.
struct Projection {
  Vec weight, bias;
  std::size_t in = 0, out = 0;

  Vec apply(const Vec& x) const {
    Vec y(out);
    for (std::size_t o = 0; o < out; ++o) {
      y[o] = bias.empty() ? 0.0 : bias[o];
      for (std::size_t i = 0; i < in; ++i) y[o] += weight[o * in + i] * x[i];
    }
    return y;
  }
};

struct RelationOracle {
  Vec feature;  // frames×C×H×W
  Vec maps;     // temporal: (clips·HW)×T×T as [key][query]; spatial: frames×keys×HW
};

// Attention across the frames of each clip, computed one spatial position at a
// time: m[key][query] = softmax over key of <q_key, q_query>.
inline RelationOracle temporal_relation(const Vec& f, std::size_t frames, std::size_t c, std::size_t h, std::size_t w,
                                        std::size_t t, const Projection& qk, const Projection& v,
                                        const Projection& out) {
  const std::size_t hw = h * w, clips = frames / t;
  RelationOracle r;
  r.feature.assign(frames * c * hw, 0.0);
  r.maps.assign(clips * hw * t * t, 0.0);
  for (std::size_t clip = 0; clip < clips; ++clip)
    for (std::size_t pos = 0; pos < hw; ++pos) {
      std::vector<Vec> q(t), val(t);
      for (std::size_t s = 0; s < t; ++s) {
        Vec x(c);
        for (std::size_t ch = 0; ch < c; ++ch) x[ch] = f[((clip * t + s) * c + ch) * hw + pos];
        q[s] = qk.apply(x);
        val[s] = v.apply(x);
      }
      for (std::size_t query = 0; query < t; ++query) {
        Vec logits(t);
        for (std::size_t key = 0; key < t; ++key) {
          double dot = 0;
          for (std::size_t i = 0; i < qk.out; ++i) dot += q[key][i] * q[query][i];
          logits[key] = dot;
        }
        const auto m = softmax(logits);
        Vec agg(v.out, 0.0);
        for (std::size_t key = 0; key < t; ++key) {
          r.maps[((clip * hw + pos) * t + key) * t + query] = m[key];
          for (std::size_t i = 0; i < v.out; ++i) agg[i] += val[key][i] * m[key];
        }
        const auto y = out.apply(agg);
        for (std::size_t ch = 0; ch < c; ++ch)
          r.feature[((clip * t + query) * c + ch) * hw + pos] = std::max(0.0, y[ch]);
      }
    }
  return r;
}

// Pooled non-local attention inside each frame; keys and values are pooled to
// kh×kw after projection.
inline RelationOracle spatial_relation(const Vec& f, std::size_t frames, std::size_t c, std::size_t h, std::size_t w,
                                       std::size_t kh, std::size_t kw, const Projection& qk, const Projection& v,
                                       const Projection& out) {
  const std::size_t hw = h * w, keys = kh * kw, c1 = qk.out;
  RelationOracle r;
  r.feature.assign(frames * c * hw, 0.0);
  r.maps.assign(frames * keys * hw, 0.0);
  for (std::size_t fr = 0; fr < frames; ++fr) {
    Vec qmap(c1 * hw), vmap(c1 * hw);
    for (std::size_t pos = 0; pos < hw; ++pos) {
      Vec x(c);
      for (std::size_t ch = 0; ch < c; ++ch) x[ch] = f[(fr * c + ch) * hw + pos];
      const auto a = qk.apply(x), b = v.apply(x);
      for (std::size_t i = 0; i < c1; ++i) {
        qmap[i * hw + pos] = a[i];
        vmap[i * hw + pos] = b[i];
      }
    }
    const auto kpool = adaptive_avg_pool(qmap, c1, h, w, kh, kw);
    const auto vpool = adaptive_avg_pool(vmap, c1, h, w, kh, kw);
    for (std::size_t pos = 0; pos < hw; ++pos) {
      Vec logits(keys);
      for (std::size_t key = 0; key < keys; ++key) {
        double dot = 0;
        for (std::size_t i = 0; i < c1; ++i) dot += kpool[i * keys + key] * qmap[i * hw + pos];
        logits[key] = dot;
      }
      const auto m = softmax(logits);
      Vec agg(c1, 0.0);
      for (std::size_t key = 0; key < keys; ++key) {
        r.maps[(fr * keys + key) * hw + pos] = m[key];
        for (std::size_t i = 0; i < c1; ++i) agg[i] += vpool[i * keys + key] * m[key];
      }
      const auto y = out.apply(agg);
      for (std::size_t ch = 0; ch < c; ++ch) r.feature[(fr * c + ch) * hw + pos] = std::max(0.0, y[ch]);
    }
  }
  return r;
}

inline double max_abs_diff(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace cstnet::oracle
