#pragma once

// The full network: a five-stage residual backbone with co-saliency and
// spatial-temporal interaction modules inserted after selected stages,
// clip-level average pooling, an embedding layer and an identity classifier.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cstnet/csl.hpp"
#include "cstnet/errors.hpp"
#include "cstnet/layers.hpp"
#include "cstnet/ops.hpp"
#include "cstnet/sti.hpp"
#include "cstnet/tensor.hpp"

namespace cstnet {

inline constexpr std::size_t kNumStages = 5;

struct CstnetConfig {
  std::size_t input_channels = 3;
  std::size_t input_height = 32;
  std::size_t input_width = 16;
  std::array<std::size_t, kNumStages> stage_channels{8, 16, 32, 64, 128};
  std::array<std::size_t, kNumStages> stage_strides{1, 2, 2, 2, 2};
  std::size_t num_identities = 16;
  std::size_t clip_len = 4;
  // Reduced sizes requested for every insertion; each is clamped to fit the
  // stage it lands on (see csl_config / sti_config).
  std::size_t c_l = 16;
  std::size_t h_l = 4;
  std::size_t w_l = 2;
  double ncc_eps = kDefaultNccEps;
  std::size_t c_1 = 16;
  std::size_t h_1 = 4;
  std::size_t w_1 = 2;
  std::size_t embedding_dim = 64;
  std::vector<std::size_t> insertion_points{2, 3, 4};  // 1-based stage indices
  bool use_csl = true;
  bool use_sti = true;

  static CstnetConfig desk() { return {}; }

  // Published channel/extent settings on a ResNet-50-sized channel plan.
  static CstnetConfig paper() {
    CstnetConfig c;
    c.input_height = 256;
    c.input_width = 128;
    c.stage_channels = {64, 256, 512, 1024, 2048};
    c.stage_strides = {4, 1, 2, 2, 2};
    c.clip_len = 8;
    c.c_l = 256;
    c.h_l = 16;
    c.w_l = 8;
    c.c_1 = 128;
    c.h_1 = 16;
    c.w_1 = 8;
    c.embedding_dim = 2048;
    c.num_identities = 625;
    return c;
  }

  bool has_csl() const { return use_csl && !insertion_points.empty(); }
  bool has_sti() const { return use_sti && !insertion_points.empty(); }

  // Spatial extent after stage i (1-based); stride s maps n to ceil(n / s).
  std::pair<std::size_t, std::size_t> stage_extent(std::size_t stage) const {
    std::size_t h = input_height, w = input_width;
    for (std::size_t i = 0; i < stage; ++i) {
      h = (h + stage_strides[i] - 1) / stage_strides[i];
      w = (w + stage_strides[i] - 1) / stage_strides[i];
    }
    return {h, w};
  }

  CslConfig csl_config(std::size_t stage) const {
    auto [h, w] = stage_extent(stage);
    CslConfig c;
    c.c_in = stage_channels[stage - 1];
    c.c_l = std::min(c_l, std::max<std::size_t>(1, c.c_in / 2));
    c.h_l = std::min(h_l, h);
    c.w_l = std::min(w_l, w);
    while (c.h_l * c.w_l >= h * w && c.h_l * c.w_l > 2) {
      if (c.h_l >= c.w_l && c.h_l > 1) {
        c.h_l = (c.h_l + 1) / 2;
      } else {
        c.w_l = (c.w_l + 1) / 2;
      }
    }
    c.ncc_eps = ncc_eps;
    c.height = h;
    c.width = w;
    c.clip_len = clip_len;
    return c;
  }

  StiConfig sti_config(std::size_t stage) const {
    auto [h, w] = stage_extent(stage);
    StiConfig c;
    c.c_in = stage_channels[stage - 1];
    c.c_1 = std::min(c_1, c.c_in);
    c.h_1 = std::min(h_1, h);
    c.w_1 = std::min(w_1, w);
    c.height = h;
    c.width = w;
    return c;
  }

  void validate() const {
    if (clip_len == 0) throw ConfigError("clip_len must be positive");
    if (embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
    if (num_identities == 0) throw ConfigError("num_identities must be positive");
    if (input_channels == 0 || input_height == 0 || input_width == 0) throw ConfigError("input extent must be positive");
    for (std::size_t i = 0; i < kNumStages; ++i)
      if (stage_channels[i] == 0 || stage_strides[i] == 0) throw ConfigError("stage channels/strides must be positive");
    for (std::size_t i = 0; i < insertion_points.size(); ++i) {
      const auto p = insertion_points[i];
      if (p < 1 || p > kNumStages) throw ConfigError("insertion point " + std::to_string(p) + " outside 1..5");
      if (std::count(insertion_points.begin(), insertion_points.end(), p) > 1)
        throw ConfigError("duplicate insertion point " + std::to_string(p));
    }
    for (auto p : insertion_points) {
      if (use_csl) csl_config(p).validate();
      if (use_sti) sti_config(p).validate();
    }
  }

  // Flat key=value text; the checkpoint stores this echo.
  std::string to_text() const {
    std::ostringstream os;
    auto list = [&](const auto& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    os << "input_channels=" << input_channels << '\n'
       << "input_height=" << input_height << '\n'
       << "input_width=" << input_width << '\n'
       << "stage_channels=" << list(stage_channels) << '\n'
       << "stage_strides=" << list(stage_strides) << '\n'
       << "num_identities=" << num_identities << '\n'
       << "clip_len=" << clip_len << '\n'
       << "c_l=" << c_l << '\n'
       << "h_l=" << h_l << '\n'
       << "w_l=" << w_l << '\n';
    os.precision(17);
    os << "ncc_eps=" << ncc_eps << '\n'
       << "c_1=" << c_1 << '\n'
       << "h_1=" << h_1 << '\n'
       << "w_1=" << w_1 << '\n'
       << "embedding_dim=" << embedding_dim << '\n'
       << "insertion_points=" << list(insertion_points) << '\n'
       << "use_csl=" << (use_csl ? 1 : 0) << '\n'
       << "use_sti=" << (use_sti ? 1 : 0) << '\n';
    return os.str();
  }

  static CstnetConfig from_text(const std::string& text) {
    CstnetConfig c;
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config echo: malformed line '" + line + "'");
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto take = [&](const std::string& key) {
      auto it = kv.find(key);
      if (it == kv.end()) throw ConfigError("config echo: missing key " + key);
      std::string v = it->second;
      kv.erase(it);
      return v;
    };
    auto num = [&](const std::string& key) { return static_cast<std::size_t>(std::stoull(take(key))); };
    auto nums = [&](const std::string& key) {
      std::vector<std::size_t> out;
      std::istringstream ls(take(key));
      std::string item;
      while (std::getline(ls, item, ','))
        if (!item.empty()) out.push_back(static_cast<std::size_t>(std::stoull(item)));
      return out;
    };
    auto arr = [&](const std::string& key) {
      auto v = nums(key);
      if (v.size() != kNumStages) throw ConfigError("config echo: " + key + " needs 5 entries");
      std::array<std::size_t, kNumStages> a{};
      std::copy(v.begin(), v.end(), a.begin());
      return a;
    };
    c.input_channels = num("input_channels");
    c.input_height = num("input_height");
    c.input_width = num("input_width");
    c.stage_channels = arr("stage_channels");
    c.stage_strides = arr("stage_strides");
    c.num_identities = num("num_identities");
    c.clip_len = num("clip_len");
    c.c_l = num("c_l");
    c.h_l = num("h_l");
    c.w_l = num("w_l");
    c.ncc_eps = std::stod(take("ncc_eps"));
    c.c_1 = num("c_1");
    c.h_1 = num("h_1");
    c.w_1 = num("w_1");
    c.embedding_dim = num("embedding_dim");
    c.insertion_points = nums("insertion_points");
    c.use_csl = num("use_csl") != 0;
    c.use_sti = num("use_sti") != 0;
    if (!kv.empty()) throw ConfigError("config echo: unknown key " + kv.begin()->first);
    return c;
  }
};

// Two 3×3 conv + BN layers with a ReLU between, plus a projection shortcut
// (1×1 conv + BN) whenever the channel count or stride changes.
template <typename T>
class ResidualStage {
 public:
  ResidualStage() = default;
  ResidualStage(std::size_t c_in, std::size_t c_out, std::size_t stride, InitRng& rng)
      : c_in_(c_in),
        conv1_(c_in, c_out, 3, stride, 1, false, rng),
        bn1_(c_out),
        conv2_(c_out, c_out, 3, 1, 1, false, rng),
        bn2_(c_out) {
    if (c_in != c_out || stride != 1) {
      shortcut_.emplace(c_in, c_out, 1, stride, 0, false, rng);
      shortcut_bn_.emplace(c_out);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    if (x.rank() != 4 || x.dim(1) != c_in_)
      throw ConfigError("backbone stage expects " + std::to_string(c_in_) + " channels, got " + shape_str(x.shape()));
    auto y = relu(bn1_(conv1_(x), training));
    y = bn2_(conv2_(y), training);
    auto skip = shortcut_ ? (*shortcut_bn_)((*shortcut_)(x), training) : x;
    return relu(add(y, skip));
  }

  Conv2dLayer<T>& conv2() { return conv2_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    conv1_.collect(out, prefix + ".conv1");
    bn1_.collect(out, prefix + ".bn1");
    conv2_.collect(out, prefix + ".conv2");
    bn2_.collect(out, prefix + ".bn2");
    if (shortcut_) {
      shortcut_->collect(out, prefix + ".shortcut");
      shortcut_bn_->collect(out, prefix + ".shortcut_bn");
    }
  }

 private:
  std::size_t c_in_ = 0;
  Conv2dLayer<T> conv1_;
  BatchNormLayer<T> bn1_;
  Conv2dLayer<T> conv2_;
  BatchNormLayer<T> bn2_;
  std::optional<Conv2dLayer<T>> shortcut_;
  std::optional<BatchNormLayer<T>> shortcut_bn_;
};

template <typename T>
struct ClipEmbedding {
  Tensor<T> feature;  // clips×embedding_dim, used for retrieval
  Tensor<T> logits;   // clips×num_identities
};

// Intermediate values a forward pass can expose for inspection.
template <typename T>
struct ForwardTrace {
  std::vector<CoSaliencyAttention<T>> attention;
  std::vector<StiTrace<T>> interaction;
};

struct ParameterCensus {
  std::size_t total = 0;
  std::size_t backbone = 0;
  std::size_t csl = 0;
  std::size_t sti = 0;
  std::size_t head = 0;
};

template <typename T>
class Cstnet {
 public:
  Cstnet(const CstnetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    InitRng rng(seed);
    std::size_t c_prev = cfg.input_channels;
    for (std::size_t i = 0; i < kNumStages; ++i) {
      stages_.emplace_back(c_prev, cfg.stage_channels[i], cfg.stage_strides[i], rng);
      c_prev = cfg.stage_channels[i];
      const std::size_t stage = i + 1;
      if (std::find(cfg.insertion_points.begin(), cfg.insertion_points.end(), stage) == cfg.insertion_points.end())
        continue;
      Insertion ins;
      ins.stage = stage;
      if (cfg.use_csl) ins.csl.emplace(cfg.csl_config(stage), rng);
      if (cfg.use_sti) ins.sti.emplace(cfg.sti_config(stage), rng);
      insertions_.push_back(std::move(ins));
    }
    embedding_ = LinearLayer<T>(c_prev, cfg.embedding_dim, rng);
    classifier_ = LinearLayer<T>(cfg.embedding_dim, cfg.num_identities, rng);
  }

  const CstnetConfig& config() const { return cfg_; }

  // clips: (num_clips·T)×C×H×W, frames of each clip contiguous.
  ClipEmbedding<T> forward(const Tensor<T>& clips, bool training, ForwardTrace<T>* trace = nullptr) const {
    const auto& s = clips.shape();
    const std::size_t t = cfg_.clip_len;
    if (s.size() != 4 || s[0] == 0 || s[0] % t != 0 || s[1] != cfg_.input_channels || s[2] != cfg_.input_height ||
        s[3] != cfg_.input_width)
      throw ContractError("cstnet_forward: clip batch " + shape_str(s) + " does not match T=" + std::to_string(t) +
                          " frames of " + std::to_string(cfg_.input_channels) + "x" +
                          std::to_string(cfg_.input_height) + "x" + std::to_string(cfg_.input_width));
    const std::size_t num_clips = s[0] / t;
    Tensor<T> x = clips;
    auto ins = insertions_.begin();
    for (std::size_t i = 0; i < kNumStages; ++i) {
      x = stages_[i].forward(x, training);
      if (ins != insertions_.end() && ins->stage == i + 1) {
        if (ins->csl) {
          auto att = ins->csl->attention(x, training);
          x = CoSaliencyModule<T>::apply_cosaliency(x, att);
          if (trace) trace->attention.push_back(att);
        }
        if (ins->sti) {
          auto tr = ins->sti->trace(x, t);
          x = tr.output;
          if (trace) trace->interaction.push_back(std::move(tr));
        }
        ++ins;
      }
    }
    // per-frame global pool, then mean over the clip's frames
    const std::size_t c = x.dim(1);
    auto frame_desc = reshape(adaptive_avg_pool2d(x, 1, 1), {num_clips, t, c});
    auto clip_desc = mean_axis(frame_desc, 1);
    ClipEmbedding<T> out;
    out.feature = embedding_(clip_desc);
    out.logits = classifier_(out.feature);
    return out;
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    for (std::size_t i = 0; i < stages_.size(); ++i) stages_[i].collect(out, "stage" + std::to_string(i + 1));
    for (const auto& ins : insertions_) {
      const std::string p = "insert" + std::to_string(ins.stage);
      if (ins.csl) ins.csl->collect(out, p + ".csl");
      if (ins.sti) ins.sti->collect(out, p + ".sti");
    }
    embedding_.collect(out, "embedding");
    classifier_.collect(out, "classifier");
    return out;
  }

  // Trainable scalar counts, grouped by component.
  ParameterCensus census() const {
    ParameterCensus c;
    for (const auto& p : parameters()) {
      if (!p.trainable) continue;
      const std::size_t n = p.tensor.numel();
      c.total += n;
      if (p.name.rfind("stage", 0) == 0) {
        c.backbone += n;
      } else if (p.name.find(".csl.") != std::string::npos) {
        c.csl += n;
      } else if (p.name.find(".sti.") != std::string::npos) {
        c.sti += n;
      } else {
        c.head += n;
      }
    }
    return c;
  }

  ResidualStage<T>& stage(std::size_t i) { return stages_.at(i - 1); }

 private:
  struct Insertion {
    std::size_t stage = 0;
    std::optional<CoSaliencyModule<T>> csl;
    std::optional<StiModule<T>> sti;
  };

  CstnetConfig cfg_;
  std::vector<ResidualStage<T>> stages_;
  std::vector<Insertion> insertions_;
  LinearLayer<T> embedding_;
  LinearLayer<T> classifier_;
};

}  // namespace cstnet
