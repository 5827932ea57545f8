#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cstnet/data.hpp"
#include "cstnet/errors.hpp"
#include "cstnet/layers.hpp"
#include "cstnet/model.hpp"
#include "cstnet/ops.hpp"
#include "cstnet/tensor.hpp"

namespace cstnet {

// Frames enter the network scaled by 1/256.
inline constexpr double kPixelScale = 1.0 / 256.0;
inline constexpr double kDefaultMargin = 0.3;
inline constexpr double kDefaultLabelSmoothing = 0.1;

// ---------------------------------------------------------------- losses

template <typename T>
struct LossParts {
  Tensor<T> total;
  Tensor<T> triplet;
  Tensor<T> identification;
};

template <typename T>
Tensor<T> triplet_loss(const Tensor<T>& features, std::span<const int> labels, T margin) {
  return batch_hard_triplet(pairwise_distances(features), labels, margin);
}

template <typename T>
LossParts<T> total_loss(const Tensor<T>& features, const Tensor<T>& logits, std::span<const int> labels, T margin,
                        T epsilon) {
  LossParts<T> p;
  p.triplet = triplet_loss(features, labels, margin);
  p.identification = label_smooth_ce(logits, labels, epsilon);
  p.total = add(p.triplet, p.identification);
  return p;
}

// ---------------------------------------------------------------- optimizer

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
  std::size_t lr_step_epochs = 200;  // lr *= lr_gamma every this many epochs
  double lr_gamma = 0.1;

  double lr_at(std::size_t epoch) const {
    if (lr_step_epochs == 0) return lr;
    return lr * std::pow(lr_gamma, static_cast<double>(epoch / lr_step_epochs));
  }
};

template <typename T>
struct OptimState {
  std::size_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

// One Adam update over the trainable entries of params, with L2 weight decay
// folded into the gradient. Parameters that received no gradient are treated
// as having a zero gradient.
template <typename T>
void adam_step(ParamList<T>& params, OptimState<T>& state, const AdamConfig& cfg, double lr) {
  std::vector<NamedTensor<T>*> trainable;
  for (auto& p : params)
    if (p.trainable) trainable.push_back(&p);
  if (state.first_moment.empty()) {
    for (auto* p : trainable) {
      state.first_moment.emplace_back(p->tensor.numel(), T(0));
      state.second_moment.emplace_back(p->tensor.numel(), T(0));
    }
  }
  if (state.first_moment.size() != trainable.size()) throw DimensionError("adam_step: optimizer state/parameter mismatch");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T wd = static_cast<T>(cfg.weight_decay);
  for (std::size_t i = 0; i < trainable.size(); ++i) {
    auto& t = trainable[i]->tensor;
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != t.numel()) throw DimensionError("adam_step: moment buffer shape mismatch for " + trainable[i]->name);
    auto values = t.mutable_data();
    const bool has = t.has_grad();
    auto grad = t.grad();
    for (std::size_t j = 0; j < values.size(); ++j) {
      T g = has ? grad[j] : T(0);
      if (!std::isfinite(g))
        throw NumericError("adam_step: non-finite gradient in " + trainable[i]->name + " at step " +
                           std::to_string(state.step));
      g += wd * values[j];
      m[j] = b1 * m[j] + (T(1) - b1) * g;
      v[j] = b2 * v[j] + (T(1) - b2) * g * g;
      const double mhat = static_cast<double>(m[j]) / c1;
      const double vhat = static_cast<double>(v[j]) / c2;
      values[j] = static_cast<T>(static_cast<double>(values[j]) - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template <typename T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

// ---------------------------------------------------------------- sampling

struct ClipRef {
  std::size_t sequence = 0;
  std::vector<std::size_t> frames;
};

struct PkBatch {
  std::vector<ClipRef> clips;  // P·K clips, grouped by identity
  std::vector<int> labels;     // dense training label per clip
  std::vector<int> identities; // dataset identity per clip
};

// T frames at a common stride with a random start; shorter sequences loop.
template <typename Rng>
std::vector<std::size_t> sample_clip_frames(std::size_t len, std::size_t t, Rng& rng) {
  std::vector<std::size_t> idx(t);
  if (len < t) {
    for (std::size_t i = 0; i < t; ++i) idx[i] = i % len;
    return idx;
  }
  const std::size_t stride = len / t;
  const std::size_t span = (t - 1) * stride + 1;
  std::uniform_int_distribution<std::size_t> start(0, len - span);
  const std::size_t s = start(rng);
  for (std::size_t i = 0; i < t; ++i) idx[i] = s + i * stride;
  return idx;
}

template <typename Rng>
PkBatch pk_sample(const VideoDataset& ds, std::size_t p, std::size_t k, std::size_t t, Rng& rng) {
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < ds.sequences.size(); ++i)
    if (ds.sequences[i].split == Split::train) by_id[ds.sequences[i].identity].push_back(i);
  if (by_id.size() < p)
    throw ContractError("pk_sample: need " + std::to_string(p) + " training identities, dataset has " +
                        std::to_string(by_id.size()));
  if (p == 0 || k == 0 || t == 0) throw ContractError("pk_sample: P, K and T must be positive");
  const auto labels = ds.train_label_map();
  std::vector<int> ids;
  for (const auto& [id, _] : by_id) ids.push_back(id);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(p);

  PkBatch b;
  for (int id : ids) {
    auto seqs = by_id[id];
    std::vector<std::size_t> chosen;
    if (seqs.size() >= k) {
      std::shuffle(seqs.begin(), seqs.end(), rng);
      chosen.assign(seqs.begin(), seqs.begin() + static_cast<long>(k));
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, seqs.size() - 1);
      for (std::size_t i = 0; i < k; ++i) chosen.push_back(seqs[pick(rng)]);
    }
    for (auto si : chosen) {
      b.clips.push_back({si, sample_clip_frames(ds.sequences[si].length(), t, rng)});
      b.labels.push_back(labels.at(id));
      b.identities.push_back(id);
    }
  }
  return b;
}

// ---------------------------------------------------------------- augmentation

struct AugmentConfig {
  double flip_prob = 0.5;
  double erase_prob = 0.3;
  double erase_area_lo = 0.02;
  double erase_area_hi = 0.33;
  double erase_aspect_lo = 0.3;
};

// Per-channel mean pixel of the training split, used to fill erased regions.
inline std::vector<double> channel_means(const VideoDataset& ds) {
  std::vector<double> mean(ds.channels, 0.0);
  double count = 0;
  const std::size_t plane = ds.height * ds.width;
  for (const auto& s : ds.sequences) {
    if (s.split != Split::train) continue;
    for (std::size_t f = 0; f < s.length(); ++f)
      for (std::size_t c = 0; c < ds.channels; ++c)
        for (std::size_t i = 0; i < plane; ++i) mean[c] += s.frame(f)[c * plane + i];
    count += static_cast<double>(s.length() * plane);
  }
  if (count > 0)
    for (auto& m : mean) m /= count;
  return mean;
}

// Random erasing on one C×H×W frame (values already on the network scale).
template <typename T, typename Rng>
void random_erase(T* frame, std::size_t c, std::size_t h, std::size_t w, const std::vector<double>& fill,
                  const AugmentConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> area(cfg.erase_area_lo, cfg.erase_area_hi);
  std::uniform_real_distribution<double> log_aspect(std::log(cfg.erase_aspect_lo), -std::log(cfg.erase_aspect_lo));
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double a = area(rng) * static_cast<double>(h * w);
    const double r = std::exp(log_aspect(rng));
    const auto eh = static_cast<std::size_t>(std::lround(std::sqrt(a * r)));
    const auto ew = static_cast<std::size_t>(std::lround(std::sqrt(a / r)));
    if (eh == 0 || ew == 0 || eh >= h || ew >= w) continue;
    std::uniform_int_distribution<std::size_t> r0(0, h - eh), c0(0, w - ew);
    const std::size_t top = r0(rng), left = c0(rng);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = top; i < top + eh; ++i)
        for (std::size_t j = left; j < left + ew; ++j) frame[(ch * h + i) * w + j] = static_cast<T>(fill[ch]);
    return;
  }
}

// Stacks clips into a (clips·T)×C×H×W tensor on the network scale. With an
// augmentation config, each clip is flipped as a whole and each frame is
// erased independently.
template <typename T, typename Rng = std::mt19937_64>
Tensor<T> assemble_clips(const VideoDataset& ds, const std::vector<ClipRef>& clips,
                         const AugmentConfig* augment = nullptr, const std::vector<double>* fill = nullptr,
                         Rng* rng = nullptr) {
  if (clips.empty()) throw ContractError("assemble_clips: no clips");
  const std::size_t t = clips.front().frames.size();
  const std::size_t c = ds.channels, h = ds.height, w = ds.width, fsz = c * h * w;
  std::vector<T> data(clips.size() * t * fsz);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> fill_scaled;
  if (fill)
    for (auto v : *fill) fill_scaled.push_back(v * kPixelScale);
  for (std::size_t ci = 0; ci < clips.size(); ++ci) {
    const auto& ref = clips[ci];
    if (ref.frames.size() != t) throw ContractError("assemble_clips: clips differ in length");
    const auto& seq = ds.sequences.at(ref.sequence);
    const bool flip = augment && unit(*rng) < augment->flip_prob;
    for (std::size_t fi = 0; fi < t; ++fi) {
      const float* src = seq.frame(ref.frames[fi]);
      T* dst = data.data() + (ci * t + fi) * fsz;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            const std::size_t sj = flip ? w - 1 - j : j;
            dst[(ch * h + i) * w + j] = static_cast<T>(src[(ch * h + i) * w + sj] * kPixelScale);
          }
      if (augment && unit(*rng) < augment->erase_prob) random_erase(dst, c, h, w, fill_scaled, *augment, *rng);
    }
  }
  return Tensor<T>({clips.size() * t, c, h, w}, std::move(data));
}

// ---------------------------------------------------------------- training loop

struct TrainConfig {
  std::size_t p = 8;
  std::size_t k = 2;
  std::size_t epochs = 50;
  std::size_t iters_per_epoch = 0;  // 0: max(1, #train sequences / (P·K))
  AdamConfig adam;
  double margin = kDefaultMargin;
  double label_smoothing = kDefaultLabelSmoothing;
  AugmentConfig augment;
  bool augment_enabled = true;
  std::uint64_t seed = 0;

  std::size_t batches_per_epoch(const VideoDataset& ds) const {
    if (iters_per_epoch) return iters_per_epoch;
    const std::size_t n = ds.indices(Split::train).size();
    return std::max<std::size_t>(1, n / (p * k));
  }
};

struct BatchRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double triplet = 0;
  double identification = 0;
  double lr = 0;
  double grad_norm = 0;
  double wall_ms = 0;
};

// Wall time is kept out of the epoch summary so summaries reproduce exactly.
struct EpochReport {
  std::size_t epoch = 0;
  std::size_t batches = 0;
  double triplet = 0;
  double identification = 0;
  double total = 0;
  double grad_norm = 0;
  double lr = 0;
  double wall_ms = 0;
};

template <typename T>
double grad_norm(const ParamList<T>& params) {
  double acc = 0;
  for (const auto& p : params) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    for (auto g : p.tensor.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(acc);
}

template <typename T>
class Trainer {
 public:
  using BatchSink = std::function<void(const BatchRecord&)>;

  Trainer(Cstnet<T>& model, const VideoDataset& ds, TrainConfig cfg)
      : model_(model), ds_(ds), cfg_(std::move(cfg)), rng_(cfg_.seed), params_(model.parameters()),
        fill_(channel_means(ds)) {
    if (ds.train_label_map().size() != model.config().num_identities)
      throw ConfigError("trainer: model has " + std::to_string(model.config().num_identities) +
                        " identity outputs but the training split has " +
                        std::to_string(ds.train_label_map().size()) + " identities");
  }

  EpochReport train_epoch(std::size_t epoch, const BatchSink& sink = {}) {
    using clock = std::chrono::steady_clock;
    const auto epoch_start = clock::now();
    EpochReport rep;
    rep.epoch = epoch;
    rep.lr = cfg_.adam.lr_at(epoch);
    const std::size_t batches = cfg_.batches_per_epoch(ds_);
    const T margin = static_cast<T>(cfg_.margin), eps = static_cast<T>(cfg_.label_smoothing);
    for (std::size_t b = 0; b < batches; ++b) {
      const auto start = clock::now();
      auto batch = pk_sample(ds_, cfg_.p, cfg_.k, model_.config().clip_len, rng_);
      auto input = cfg_.augment_enabled ? assemble_clips<T>(ds_, batch.clips, &cfg_.augment, &fill_, &rng_)
                                        : assemble_clips<T>(ds_, batch.clips);
      zero_grads(params_);
      const auto where = [&] {
        return "epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + " (" + provenance(batch) + ")";
      };
      std::optional<LossParts<T>> parts;
      try {
        auto emb = model_.forward(input, true);
        parts = total_loss(emb.feature, emb.logits, std::span<const int>(batch.labels), margin, eps);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at " + where());
      }
      auto& loss = *parts;
      const double total = loss.total.item();
      if (!std::isfinite(total)) throw NumericError("train: non-finite loss at " + where());
      loss.total.backward();
      BatchRecord rec;
      rec.epoch = epoch;
      rec.step = step_++;
      rec.triplet = loss.triplet.item();
      rec.identification = loss.identification.item();
      rec.lr = rep.lr;
      rec.grad_norm = grad_norm(params_);
      adam_step(params_, optim_, cfg_.adam, rep.lr);
      rec.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - start).count();
      if (sink) sink(rec);
      rep.triplet += rec.triplet;
      rep.identification += rec.identification;
      rep.grad_norm += rec.grad_norm;
      ++rep.batches;
    }
    const double n = static_cast<double>(rep.batches);
    rep.triplet /= n;
    rep.identification /= n;
    rep.grad_norm /= n;
    rep.total = rep.triplet + rep.identification;
    rep.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - epoch_start).count();
    zero_grads(params_);
    return rep;
  }

  const OptimState<T>& optimizer() const { return optim_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  std::string provenance(const PkBatch& b) const {
    std::string s;
    for (std::size_t i = 0; i < b.clips.size(); ++i) {
      if (i) s += "; ";
      s += "id " + std::to_string(b.identities[i]) + " seq " + std::to_string(b.clips[i].sequence) + " frames";
      for (auto f : b.clips[i].frames) s += " " + std::to_string(f);
    }
    return s;
  }

  Cstnet<T>& model_;
  const VideoDataset& ds_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  ParamList<T> params_;
  OptimState<T> optim_;
  std::vector<double> fill_;
  std::size_t step_ = 0;
};

}  // namespace cstnet
