#pragma once

// Co-saliency learning: each frame's features are compared against every other
// frame of the clip with normalized cross-correlation, and the resulting
// correlation volumes are summarized into a spatial-channel gate.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>

#include "cstnet/errors.hpp"
#include "cstnet/layers.hpp"
#include "cstnet/ops.hpp"
#include "cstnet/tensor.hpp"

namespace cstnet {

#ifdef CSTNET_INJECT_NCC_SIGN_FAULT
inline constexpr double kNccSign = -1.0;  // mutation build used to prove the checks bite
#else
inline constexpr double kNccSign = 1.0;
#endif

inline constexpr double kDefaultNccEps = 1e-5;

struct CslConfig {
  std::size_t c_in = 0;
  std::size_t c_l = 0;
  std::size_t h_l = 0;
  std::size_t w_l = 0;
  double ncc_eps = kDefaultNccEps;
  // Geometry of the stage the module is attached to.
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t clip_len = 1;

  void validate() const {
    if (c_l == 0 || c_l >= c_in)
      throw ConfigError("csl: reduced channels " + std::to_string(c_l) + " must be in (0, " + std::to_string(c_in) + ")");
    if (h_l == 0 || w_l == 0 || h_l > height || w_l > width)
      throw ConfigError("csl: reduced extent " + std::to_string(h_l) + "x" + std::to_string(w_l) +
                        " does not fit stage extent " + std::to_string(height) + "x" + std::to_string(width));
    if (h_l * w_l >= height * width)
      throw ConfigError("csl: reduced extent must have fewer cells than the stage extent");
    if (h_l * w_l < 2) throw ConfigError("csl: channel descriptors need at least two cells");
    if (!(ncc_eps > 0.0)) throw ConfigError("csl: ncc_eps must be positive");
    if (clip_len == 0) throw ConfigError("csl: clip length must be positive");
  }
};

// (1/d)·Σ(p−μp)(q−μq) / ((σp+eps)(σq+eps)), population standard deviations.
inline double ncc(std::span<const double> p, std::span<const double> q, double eps = kDefaultNccEps) {
  if (p.size() != q.size()) throw DimensionError("ncc: descriptor lengths differ");
  if (p.size() < 2) throw ContractError("ncc: descriptors need at least two entries");
  const double d = static_cast<double>(p.size());
  double mp = 0, mq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    mp += p[i];
    mq += q[i];
  }
  mp /= d;
  mq /= d;
  double vp = 0, vq = 0, cov = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    vp += (p[i] - mp) * (p[i] - mp);
    vq += (q[i] - mq) * (q[i] - mq);
    cov += (p[i] - mp) * (q[i] - mq);
  }
  const double sp = std::sqrt(vp / d), sq = std::sqrt(vq / d);
  return kNccSign * (cov / d) / ((sp + eps) * (sq + eps));
}

template <typename T>
struct CoSaliencyAttention {
  Tensor<T> z_s;  // frames×1×H×W spatial logits
  Tensor<T> z_c;  // frames×C×1×1 channel logits
  Tensor<T> z;    // frames×C×H×W gate in (0, 1)
};

// spatial_desc: frames×C_L×H×W. Frame t's slice holds, at channel
// slot(k,h,w) and position (i,j), ncc(desc_t(i,j), desc_k(h,w)) for k ≠ t in
// ascending order. nullopt when the clip has a single frame.
template <typename T>
std::optional<Tensor<T>> build_spatial_volume(const Tensor<T>& spatial_desc, std::size_t clip_len, double eps) {
  const auto& s = spatial_desc.shape();
  if (s.size() != 4 || s[0] % clip_len != 0)
    throw DimensionError("build_spatial_volume: " + shape_str(s) + " vs clip length " + std::to_string(clip_len));
  if (clip_len < 2) return std::nullopt;
  const std::size_t frames = s[0], d = s[1], h = s[2], w = s[3];
  auto desc = standardize(reshape(spatial_desc, {frames, d, h * w}), 1, eps);
  auto vol = ncc_volume(desc, clip_len, static_cast<T>(kNccSign / static_cast<double>(d)));
  return reshape(vol, {frames, (clip_len - 1) * h * w, h, w});
}

// channel_desc: frames×C×H_L×W_L. Each channel's H_L·W_L cells form a
// descriptor; the result is frames×((T−1)·C)×C×1 with slot(k, c') at channel
// index and frame t's channel c along the height axis.
template <typename T>
std::optional<Tensor<T>> build_channel_volume(const Tensor<T>& channel_desc, std::size_t clip_len, double eps) {
  const auto& s = channel_desc.shape();
  if (s.size() != 4 || s[0] % clip_len != 0)
    throw DimensionError("build_channel_volume: " + shape_str(s) + " vs clip length " + std::to_string(clip_len));
  if (clip_len < 2) return std::nullopt;
  const std::size_t frames = s[0], c = s[1], cells = s[2] * s[3];
  if (cells < 2) throw DimensionError("build_channel_volume: need at least two cells per channel");
  auto desc = permute(reshape(channel_desc, {frames, c, cells}), {0, 2, 1});
  desc = standardize(desc, 1, eps);
  auto vol = ncc_volume(desc, clip_len, static_cast<T>(kNccSign / static_cast<double>(cells)));
  return reshape(vol, {frames, (clip_len - 1) * c, c, 1});
}

template <typename T>
class CoSaliencyModule {
 public:
  CoSaliencyModule() = default;
  CoSaliencyModule(const CslConfig& cfg, InitRng& rng) : cfg_(cfg) {
    cfg_.validate();
    reduce_spatial_ = Conv2dLayer<T>(cfg.c_in, cfg.c_l, 1, 1, 0, false, rng);
    reduce_spatial_bn_ = BatchNormLayer<T>(cfg.c_l);
    reduce_channel_ = Conv2dLayer<T>(cfg.c_in, cfg.c_in, 1, 1, 0, false, rng);
    reduce_channel_bn_ = BatchNormLayer<T>(cfg.c_in);
    if (cfg.clip_len > 1) {
      const std::size_t slots = cfg.clip_len - 1;
      summarize_spatial_ = Conv2dLayer<T>(slots * cfg.height * cfg.width, 1, 1, 1, 0, true, rng, 3.0);
      summarize_channel_ = Conv2dLayer<T>(slots * cfg.c_in, 1, 1, 1, 0, true, rng, 3.0);
    }
  }

  const CslConfig& config() const { return cfg_; }

  // {spatial descriptors frames×C_L×H×W, channel descriptors frames×C×H_L×W_L}
  std::pair<Tensor<T>, Tensor<T>> reduce_dims(const Tensor<T>& f, bool training) const {
    check_input(f);
    auto spatial = relu(reduce_spatial_bn_(reduce_spatial_(f), training));
    auto pooled = adaptive_avg_pool2d(f, cfg_.h_l, cfg_.w_l);
    auto channel = relu(reduce_channel_bn_(reduce_channel_(pooled), training));
    return {spatial, channel};
  }

  CoSaliencyAttention<T> attention(const Tensor<T>& f, bool training) const {
    auto [spatial, channel] = reduce_dims(f, training);
    return summarize(build_spatial_volume(spatial, cfg_.clip_len, cfg_.ncc_eps),
                     build_channel_volume(channel, cfg_.clip_len, cfg_.ncc_eps), f.dim(0));
  }

  // Empty volumes (single-frame clips) contribute zero logits.
  CoSaliencyAttention<T> summarize(const std::optional<Tensor<T>>& spatial_vol,
                                   const std::optional<Tensor<T>>& channel_vol, std::size_t frames) const {
    const std::size_t c = cfg_.c_in, h = cfg_.height, w = cfg_.width;
    CoSaliencyAttention<T> att;
    if (spatial_vol) {
      if (spatial_vol->dim(0) != frames || spatial_vol->dim(1) != (cfg_.clip_len - 1) * h * w)
        throw DimensionError("summarize_attention: spatial volume " + shape_str(spatial_vol->shape()) +
                             " does not match the configured clip");
      att.z_s = summarize_spatial_(*spatial_vol);
    } else {
      att.z_s = Tensor<T>::zeros({frames, 1, h, w});
    }
    if (channel_vol) {
      if (channel_vol->dim(0) != frames || channel_vol->dim(1) != (cfg_.clip_len - 1) * c)
        throw DimensionError("summarize_attention: channel volume " + shape_str(channel_vol->shape()) +
                             " does not match the configured clip");
      att.z_c = reshape(summarize_channel_(*channel_vol), {frames, c, 1, 1});
    } else {
      att.z_c = Tensor<T>::zeros({frames, c, 1, 1});
    }
    att.z = sigmoid(mul(att.z_s, att.z_c));
    return att;
  }

  Tensor<T> forward(const Tensor<T>& f, bool training) const {
    return apply_cosaliency(f, attention(f, training));
  }

  static Tensor<T> apply_cosaliency(const Tensor<T>& f, const CoSaliencyAttention<T>& att) {
    if (f.shape() != att.z.shape())
      throw DimensionError("apply_cosaliency: features " + shape_str(f.shape()) + " vs gate " +
                           shape_str(att.z.shape()));
    return mul(f, att.z);
  }

  Conv2dLayer<T>& summarize_spatial() { return summarize_spatial_; }
  Conv2dLayer<T>& summarize_channel() { return summarize_channel_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    reduce_spatial_.collect(out, prefix + ".reduce_spatial");
    reduce_spatial_bn_.collect(out, prefix + ".reduce_spatial_bn");
    reduce_channel_.collect(out, prefix + ".reduce_channel");
    reduce_channel_bn_.collect(out, prefix + ".reduce_channel_bn");
    if (cfg_.clip_len > 1) {
      summarize_spatial_.collect(out, prefix + ".summarize_spatial");
      summarize_channel_.collect(out, prefix + ".summarize_channel");
    }
  }

 private:
  void check_input(const Tensor<T>& f) const {
    const auto& s = f.shape();
    if (s.size() != 4 || s[1] != cfg_.c_in || s[2] != cfg_.height || s[3] != cfg_.width ||
        s[0] % cfg_.clip_len != 0)
      throw DimensionError("csl: input " + shape_str(s) + " does not match configured stage (C=" +
                           std::to_string(cfg_.c_in) + ", " + std::to_string(cfg_.height) + "x" +
                           std::to_string(cfg_.width) + ", T=" + std::to_string(cfg_.clip_len) + ")");
  }

  CslConfig cfg_;
  Conv2dLayer<T> reduce_spatial_;
  BatchNormLayer<T> reduce_spatial_bn_;
  Conv2dLayer<T> reduce_channel_;
  BatchNormLayer<T> reduce_channel_bn_;
  Conv2dLayer<T> summarize_spatial_;
  Conv2dLayer<T> summarize_channel_;
};

}  // namespace cstnet
