#pragma once

// Spatial-temporal interaction: a pooled non-local relation within each frame,
// a relation across frames at each position, and cross-gated fusion of the
// two, added back onto the input stream.

#include <cstddef>
#include <string>

#include "cstnet/errors.hpp"
#include "cstnet/layers.hpp"
#include "cstnet/ops.hpp"
#include "cstnet/tensor.hpp"

namespace cstnet {

struct StiConfig {
  std::size_t c_in = 0;
  std::size_t c_1 = 0;
  std::size_t h_1 = 0;
  std::size_t w_1 = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  void validate() const {
    if (c_1 == 0 || c_1 > c_in)
      throw ConfigError("sti: inner channels " + std::to_string(c_1) + " must be in (0, " + std::to_string(c_in) + "]");
    if (h_1 == 0 || w_1 == 0 || h_1 > height || w_1 > width)
      throw ConfigError("sti: pooled extent " + std::to_string(h_1) + "x" + std::to_string(w_1) +
                        " does not fit stage extent " + std::to_string(height) + "x" + std::to_string(width));
  }
};

// Scale applied to the default init of the output projections. A zero init
// would sit exactly on the ReLU kink and never receive gradient, so they
// start small instead; the block is then close to the identity.
inline constexpr double kRelationOutputInitGain = 0.01;

inline const StiConfig& checked(const StiConfig& cfg) {
  cfg.validate();
  return cfg;
}

template <typename T>
struct RelationOutput {
  Tensor<T> feature;  // frames×C×H×W
  Tensor<T> map;      // spatial: frames×(H1·W1)×(H·W); temporal: (clips·H·W)×T×T
};

template <typename T>
class SpatialRelation {
 public:
  SpatialRelation() = default;
  SpatialRelation(const StiConfig& cfg, InitRng& rng)
      : cfg_(checked(cfg)),
        query_key_(cfg.c_in, cfg.c_1, 1, 1, 0, true, rng, 3.0),
        value_(cfg.c_in, cfg.c_1, 1, 1, 0, true, rng, 3.0),
        output_(cfg.c_1, cfg.c_in, 1, 1, 0, true, rng, 3.0 * kRelationOutputInitGain) {}

  RelationOutput<T> operator()(const Tensor<T>& f) const {
    const std::size_t frames = f.dim(0), c1 = cfg_.c_1, hw = cfg_.height * cfg_.width;
    const std::size_t keys = cfg_.h_1 * cfg_.w_1;
    auto q_full = query_key_(f);
    auto q = reshape(q_full, {frames, c1, hw});
    auto k = reshape(adaptive_avg_pool2d(q_full, cfg_.h_1, cfg_.w_1), {frames, c1, keys});
    auto v = reshape(adaptive_avg_pool2d(value_(f), cfg_.h_1, cfg_.w_1), {frames, c1, keys});
    // keys×positions, normalized over the key axis
    auto m = softmax(matmul(permute(k, {0, 2, 1}), q), 1);
    auto agg = reshape(matmul(v, m), {frames, c1, cfg_.height, cfg_.width});
    return {relu(output_(agg)), m};
  }

  const Conv2dLayer<T>& query_key() const { return query_key_; }
  const Conv2dLayer<T>& value() const { return value_; }
  const Conv2dLayer<T>& output() const { return output_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    query_key_.collect(out, prefix + ".query_key");
    value_.collect(out, prefix + ".value");
    output_.collect(out, prefix + ".output");
  }

 private:
  StiConfig cfg_;
  Conv2dLayer<T> query_key_;
  Conv2dLayer<T> value_;
  Conv2dLayer<T> output_;
};

template <typename T>
class TemporalRelation {
 public:
  TemporalRelation() = default;
  TemporalRelation(const StiConfig& cfg, InitRng& rng)
      : cfg_(checked(cfg)),
        query_key_(cfg.c_in, cfg.c_1, 1, 1, 0, true, rng, 3.0),
        value_(cfg.c_in, cfg.c_1, 1, 1, 0, true, rng, 3.0),
        output_(cfg.c_1, cfg.c_in, 1, 1, 0, true, rng, 3.0 * kRelationOutputInitGain) {}

  RelationOutput<T> operator()(const Tensor<T>& f, std::size_t clip_len) const {
    const std::size_t frames = f.dim(0), clips = frames / clip_len;
    const std::size_t c1 = cfg_.c_1, hw = cfg_.height * cfg_.width;
    // frames×C1×H×W → (clips·HW)×C1×T
    auto to_positions = [&](const Tensor<T>& x) {
      return reshape(permute(reshape(x, {clips, clip_len, c1, hw}), {0, 3, 2, 1}), {clips * hw, c1, clip_len});
    };
    auto q = to_positions(query_key_(f));
    auto v = to_positions(value_(f));
    auto m = softmax(matmul(permute(q, {0, 2, 1}), q), 1);  // key frames × query frames
    auto agg = reshape(matmul(v, m), {clips, hw, c1, clip_len});
    agg = reshape(permute(agg, {0, 3, 2, 1}), {frames, c1, cfg_.height, cfg_.width});
    return {relu(output_(agg)), m};
  }

  const Conv2dLayer<T>& query_key() const { return query_key_; }
  const Conv2dLayer<T>& value() const { return value_; }
  const Conv2dLayer<T>& output() const { return output_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    query_key_.collect(out, prefix + ".query_key");
    value_.collect(out, prefix + ".value");
    output_.collect(out, prefix + ".output");
  }

 private:
  StiConfig cfg_;
  Conv2dLayer<T> query_key_;
  Conv2dLayer<T> value_;
  Conv2dLayer<T> output_;
};

template <typename T>
struct FusionOutput {
  Tensor<T> fused;           // frames×C×H×W
  Tensor<T> spatial_gate;    // clips×C, weight on the spatial feature
  Tensor<T> temporal_gate;   // clips×C, weight on the temporal feature
};

// Channel gates from clip-level global pooling; each feature's gate is driven
// by the other feature.
template <typename T>
class RelationFusion {
 public:
  RelationFusion() = default;
  RelationFusion(std::size_t channels, InitRng& rng)
      : spatial_fc_(channels, channels, rng), temporal_fc_(channels, channels, rng) {}

  FusionOutput<T> operator()(const Tensor<T>& f_s, const Tensor<T>& f_t, std::size_t clip_len) const {
    if (f_s.shape() != f_t.shape() || f_s.rank() != 4)
      throw DimensionError("fuse_relations: " + shape_str(f_s.shape()) + " vs " + shape_str(f_t.shape()));
    const std::size_t frames = f_s.dim(0), c = f_s.dim(1), hw = f_s.dim(2) * f_s.dim(3);
    const std::size_t clips = frames / clip_len;
    auto pool = [&](const Tensor<T>& x) {  // clips×C, mean over T, H, W
      auto per_channel = permute(reshape(x, {clips, clip_len, c, hw}), {0, 2, 1, 3});
      return mean_axis(reshape(per_channel, {clips, c, clip_len * hw}), 2);
    };
    FusionOutput<T> out;
    out.spatial_gate = sigmoid(spatial_fc_(pool(f_t)));
    out.temporal_gate = sigmoid(temporal_fc_(pool(f_s)));
    auto as = reshape(out.spatial_gate, {clips, 1, c, 1});
    auto at = reshape(out.temporal_gate, {clips, 1, c, 1});
    auto fused = add(mul(reshape(f_s, {clips, clip_len, c, hw}), as), mul(reshape(f_t, {clips, clip_len, c, hw}), at));
    out.fused = reshape(fused, f_s.shape());
    return out;
  }

  const LinearLayer<T>& spatial_fc() const { return spatial_fc_; }
  const LinearLayer<T>& temporal_fc() const { return temporal_fc_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    spatial_fc_.collect(out, prefix + ".spatial_gate");
    temporal_fc_.collect(out, prefix + ".temporal_gate");
  }

 private:
  LinearLayer<T> spatial_fc_;
  LinearLayer<T> temporal_fc_;
};

template <typename T>
struct StiTrace {
  RelationOutput<T> spatial;
  RelationOutput<T> temporal;
  FusionOutput<T> fusion;
  Tensor<T> output;
};

template <typename T>
class StiModule {
 public:
  StiModule() = default;
  StiModule(const StiConfig& cfg, InitRng& rng)
      : cfg_(checked(cfg)), spatial_(cfg, rng), temporal_(cfg, rng), fusion_(cfg.c_in, rng) {}

  const StiConfig& config() const { return cfg_; }

  StiTrace<T> trace(const Tensor<T>& f, std::size_t clip_len) const {
    const auto& s = f.shape();
    if (s.size() != 4 || s[1] != cfg_.c_in || s[2] != cfg_.height || s[3] != cfg_.width || clip_len == 0 ||
        s[0] % clip_len != 0)
      throw DimensionError("sti: input " + shape_str(s) + " does not match configured stage");
    StiTrace<T> tr;
    tr.spatial = spatial_(f);
    tr.temporal = temporal_(f, clip_len);
    tr.fusion = fusion_(tr.spatial.feature, tr.temporal.feature, clip_len);
    tr.output = add(f, tr.fusion.fused);
    return tr;
  }

  Tensor<T> forward(const Tensor<T>& f, std::size_t clip_len) const { return trace(f, clip_len).output; }

  const SpatialRelation<T>& spatial() const { return spatial_; }
  const TemporalRelation<T>& temporal() const { return temporal_; }
  const RelationFusion<T>& fusion() const { return fusion_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    spatial_.collect(out, prefix + ".spatial");
    temporal_.collect(out, prefix + ".temporal");
    fusion_.collect(out, prefix + ".fusion");
  }

 private:
  StiConfig cfg_;
  SpatialRelation<T> spatial_;
  TemporalRelation<T> temporal_;
  RelationFusion<T> fusion_;
};

}  // namespace cstnet
