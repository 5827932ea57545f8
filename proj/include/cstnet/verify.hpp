#pragma once

// Property suite behind the `verify` command and the acceptance binary:
// finite-difference gradient checks, NCC invariances, oracle equivalence and
// structural invariants. Everything runs in double precision.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cstnet/csl.hpp"
#include "cstnet/gradcheck.hpp"
#include "cstnet/metrics.hpp"
#include "cstnet/model.hpp"
#include "cstnet/ops.hpp"
#include "cstnet/sti.hpp"
#include "cstnet/testing/oracles.hpp"
#include "cstnet/training.hpp"

namespace cstnet {

struct PropertyResult {
  std::string name;
  bool passed = false;
  double measured = 0;
  double tolerance = 0;
  std::string detail;
};

struct VerifyReport {
  std::vector<PropertyResult> results;

  bool all_passed() const {
    return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
  }
  void append(const VerifyReport& o) { results.insert(results.end(), o.results.begin(), o.results.end()); }
  const PropertyResult* find(const std::string& name) const {
    for (const auto& r : results)
      if (r.name == name) return &r;
    return nullptr;
  }
  // Largest relative error over every gradient check in the report.
  double max_gradient_error() const {
    double m = 0;
    for (const auto& r : results)
      if (r.name.rfind("grad.", 0) == 0 && r.name != "grad.suite_runtime_s") m = std::max(m, r.measured);
    return m;
  }
};

inline void print_report(std::ostream& os, const VerifyReport& rep) {
  for (const auto& r : rep.results) {
    os << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(40) << r.name << " measured=" << std::scientific
       << std::setprecision(3) << r.measured << " tol=" << r.tolerance << std::defaultfloat;
    if (!r.detail.empty()) os << "  " << r.detail;
    os << '\n';
  }
}

namespace verify_detail {

using Rng = std::mt19937_64;

inline Tensord rand_t(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensord::uniform(s, lo, hi, rng, true);
}

inline PropertyResult at_most(std::string name, double measured, double tol, std::string detail = {}) {
  return {std::move(name), measured <= tol && std::isfinite(measured), measured, tol, std::move(detail)};
}

inline oracle::Vec vec(const Tensord& t) { return {t.values().begin(), t.values().end()}; }

inline oracle::Projection projection(const Conv2dLayer<double>& conv) {
  oracle::Projection p;
  p.in = conv.in_channels();
  p.out = conv.out_channels();
  p.weight = vec(conv.weight());
  if (conv.bias()) p.bias = vec(*conv.bias());
  return p;
}

template <typename Collect>
std::vector<Tensord> trainable(const Collect& module) {
  ParamList<double> ps;
  module.collect(ps, "m");
  std::vector<Tensord> out;
  for (auto& p : ps)
    if (p.trainable) out.push_back(p.tensor);
  return out;
}

inline std::vector<Tensord> with(std::vector<Tensord> a, const std::vector<Tensord>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace verify_detail

// Micro configuration used for whole-model gradient checks.
inline CstnetConfig micro_config() {
  CstnetConfig c;
  c.input_height = 16;
  c.input_width = 8;
  c.stage_channels = {4, 8, 8, 8, 8};
  c.stage_strides = {1, 2, 1, 1, 1};
  c.clip_len = 2;
  c.c_l = 4;
  c.h_l = 2;
  c.w_l = 2;
  c.c_1 = 4;
  c.h_1 = 2;
  c.w_1 = 2;
  c.embedding_dim = 8;
  c.num_identities = 3;
  return c;
}

inline CslConfig small_csl_config() {
  CslConfig c;
  c.c_in = 8;
  c.c_l = 4;
  c.h_l = 2;
  c.w_l = 2;
  c.height = 4;
  c.width = 4;
  c.clip_len = 3;
  return c;
}

inline StiConfig small_sti_config() {
  StiConfig c;
  c.c_in = 8;
  c.c_1 = 4;
  c.h_1 = 2;
  c.w_1 = 2;
  c.height = 4;
  c.width = 4;
  return c;
}

inline VerifyReport verify_gradients(double tol = 1e-4) {
  using namespace verify_detail;
  VerifyReport rep;
  const auto start = std::chrono::steady_clock::now();
  Rng rng(20240601);
  std::uint64_t proj_seed = 100;
  auto check = [&](const std::string& name, std::vector<Tensord> inputs, std::function<Tensord()> out,
                   GradCheckOptions opt = {}) {
    const std::uint64_t seed = proj_seed++;
    auto res = gradcheck([&] { return random_projection(out(), seed); }, std::move(inputs), opt);
    rep.results.push_back(at_most("grad." + name, res.max_rel_error, tol,
                                  std::to_string(res.probes) + " probes, worst " + res.worst));
  };

  {
    auto a = rand_t({2, 3, 4}, rng), b = rand_t({1, 3, 1}, rng);
    check("add", {a, b}, [=] { return add(a, b); });
  }
  {
    auto a = rand_t({3, 4}, rng), b = rand_t({3, 1}, rng);
    check("sub", {a, b}, [=] { return sub(a, b); });
  }
  {
    auto a = rand_t({2, 1, 4, 3}, rng), b = rand_t({1, 5, 1, 3}, rng);
    check("mul", {a, b}, [=] { return mul(a, b); });
  }
  {
    auto a = rand_t({3, 5}, rng);
    check("scale", {a}, [=] { return scale(a, 1.7); });
    check("sigmoid", {a}, [=] { return sigmoid(scale(a, 3.0)); });
    check("relu", {a}, [=] { return relu(a); });
  }
  {
    auto a = rand_t({2, 3, 4}, rng);
    check("reshape", {a}, [=] { return reshape(a, {4, 6}); });
    check("permute", {a}, [=] { return permute(a, {2, 0, 1}); });
    check("softmax", {a}, [=] { return softmax(scale(a, 2.0), 1); });
    check("mean_axis", {a}, [=] { return mean_axis(a, 2); });
    check("sum", {a}, [=] { return scale(sum(a), 0.3); });
    check("mean", {a}, [=] { return mean(a); });
    check("standardize", {a}, [=] { return standardize(a, 1, kDefaultNccEps); });
  }
  {
    auto a = rand_t({3, 4}, rng), b = rand_t({4, 5}, rng);
    check("matmul", {a, b}, [=] { return matmul(a, b); });
    auto c = rand_t({2, 3, 4}, rng), d = rand_t({2, 4, 2}, rng);
    check("matmul_batched", {c, d}, [=] { return matmul(c, d); });
  }
  {
    auto x = rand_t({2, 2, 5, 4}, rng), k3 = rand_t({3, 2, 3, 3}, rng), b = rand_t({3}, rng);
    auto k1 = rand_t({3, 2, 1, 1}, rng);
    check("conv2d_3x3", {x, k3, b}, [=] { return conv2d(x, k3, std::optional<Tensord>(b), 1, 1); });
    check("conv2d_3x3_stride2", {x, k3}, [=] { return conv2d(x, k3, std::optional<Tensord>(), 2, 1); });
    check("conv2d_1x1", {x, k1, b}, [=] { return conv2d(x, k1, std::optional<Tensord>(b), 1, 0); });
    check("adaptive_avg_pool2d", {x}, [=] { return adaptive_avg_pool2d(x, 2, 3); });
  }
  {
    auto x = rand_t({4, 3, 2, 2}, rng), g = rand_t({3}, rng, 0.5, 1.5), b = rand_t({3}, rng);
    auto rm = Tensord::zeros({3}), rv = Tensord::ones({3});
    check("batch_norm_train", {x, g, b}, [=]() mutable { return batch_norm(x, g, b, rm, rv, true); });
    auto em = Tensord::uniform({3}, -0.5, 0.5, rng), ev = Tensord::uniform({3}, 0.5, 2.0, rng);
    check("batch_norm_eval", {x, g, b}, [=]() mutable { return batch_norm(x, g, b, em, ev, false); });
  }
  {
    auto d = rand_t({4, 3, 4}, rng);
    check("ncc_volume", {d}, [=] { return ncc_volume(d, 2, 1.0 / 3.0); });
  }
  {
    auto f = rand_t({5, 3}, rng);
    check("pairwise_distances", {f}, [=] { return pairwise_distances(f); });
    auto g = rand_t({8, 4}, rng);
    const std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3};
    check("batch_hard_triplet", {g}, [=] { return batch_hard_triplet(pairwise_distances(g), labels, 0.3); });
    auto logits = rand_t({4, 5}, rng, -2.0, 2.0);
    const std::vector<int> y{0, 3, 4, 1};
    check("label_smooth_ce", {logits}, [=] { return label_smooth_ce(logits, y, 0.1); });
    auto x = rand_t({3, 4}, rng), w = rand_t({2, 4}, rng), b = rand_t({2}, rng);
    check("linear", {x, w, b}, [=] { return linear(x, w, b); });
  }
  {
    // conv → relu → pool → matmul → softmax → sum
    auto x = rand_t({1, 2, 4, 4}, rng), k = rand_t({3, 2, 3, 3}, rng), m = rand_t({4, 5}, rng);
    check("composite", {x, k, m}, [=] {
      auto y = adaptive_avg_pool2d(relu(conv2d(x, k, std::optional<Tensord>(), 1, 1)), 2, 2);
      return softmax(matmul(reshape(y, {3, 4}), m), 1);
    });
  }
  {
    InitRng init(3);
    CoSaliencyModule<double> csl(small_csl_config(), init);
    auto f = rand_t({3, 8, 4, 4}, rng);
    check("csl_forward", with({f}, trainable(csl)), [=] { return csl.forward(f, true); });
    auto sv = rand_t({3, 32, 4, 4}, rng), cv = rand_t({3, 16, 8, 1}, rng);
    check("csl_summarize", with({sv, cv}, trainable(csl)), [=] {
      return csl.summarize(std::optional<Tensord>(sv), std::optional<Tensord>(cv), 3).z;
    });
  }
  {
    InitRng init(4);
    StiModule<double> sti(small_sti_config(), init);
    // Lift the output projections off their near-zero init so the relation
    // branches carry real signal through the check.
    ParamList<double> ps;
    sti.collect(ps, "sti");
    for (auto& p : ps)
      if (p.name.find(".output.weight") != std::string::npos)
        for (auto& v : p.tensor.mutable_data()) v *= 30.0;
    auto f = rand_t({4, 8, 4, 4}, rng);
    check("sti_spatial", with({f}, trainable(sti.spatial())), [=] { return sti.spatial()(f).feature; });
    check("sti_temporal", with({f}, trainable(sti.temporal())), [=] { return sti.temporal()(f, 2).feature; });
    auto fs = rand_t({4, 8, 4, 4}, rng), ft = rand_t({4, 8, 4, 4}, rng);
    check("sti_fusion", with({fs, ft}, trainable(sti.fusion())), [=] { return sti.fusion()(fs, ft, 2).fused; });
    check("sti_forward", with({f}, trainable(sti)), [=] { return sti.forward(f, 2); });
  }
  {
    InitRng init(5);
    ResidualStage<double> stage(3, 4, 2, init);
    auto x = rand_t({2, 3, 6, 4}, rng);
    check("residual_stage", with({x}, trainable(stage)), [=] { return stage.forward(x, true); });
  }
  {
    Cstnet<double> model(micro_config(), 6);
    auto clips = rand_t({4, 3, 16, 8}, rng, 0.0, 1.0);
    std::vector<Tensord> inputs{clips};
    for (auto& p : model.parameters())
      if (p.trainable) inputs.push_back(p.tensor);
    // At step 1e-5 some probes straddle ReLU kinks or NCC descriptors whose
    // spread is on the eps scale, so the whole network is probed at 1e-6.
    GradCheckOptions opt;
    opt.step = 1e-6;
    opt.max_probes_per_tensor = 16;
    check("cstnet_micro", inputs, [=] {
      auto e = model.forward(clips, true);
      return add(sum(mul(e.feature, e.feature)), reshape(sum(e.logits), {1}));
    }, opt);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  rep.results.push_back(at_most("grad.suite_runtime_s", secs, 300.0));
  return rep;
}

inline VerifyReport verify_ncc() {
  using namespace verify_detail;
  VerifyReport rep;
  Rng rng(77);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> dim(8, 64);
  std::uniform_real_distribution<double> log_a(std::log(0.1), std::log(10.0)), b_dist(-5.0, 5.0);
  auto rand_desc = [&](std::size_t d) {
    std::vector<double> v(d);
    for (auto& x : v) x = normal(rng);
    return v;
  };

  std::size_t asym = 0;
  double affine_err = 0, bound = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = dim(rng);
    auto p = rand_desc(d), q = rand_desc(d);
    if (ncc(p, q) != ncc(q, p)) ++asym;
    const double a = std::exp(log_a(rng)), b = b_dist(rng);
    std::vector<double> t(d);
    for (std::size_t i = 0; i < d; ++i) t[i] = a * p[i] + b;
    affine_err = std::max(affine_err, std::abs(ncc(p, t) - 1.0));
    bound = std::max({bound, std::abs(ncc(p, q)), std::abs(ncc(p, t))});
  }
  // constant and degenerate descriptors
  for (std::size_t d : {2u, 3u, 16u}) {
    std::vector<double> c(d, 4.2), z(d, 0.0), p = rand_desc(d), neg(d);
    for (std::size_t i = 0; i < d; ++i) neg[i] = -3.0 * p[i] + 1.0;
    for (const auto* x : {&c, &z, &p, &neg})
      for (const auto* y : {&c, &z, &p, &neg}) bound = std::max(bound, std::abs(ncc(*x, *y)));
  }
  rep.results.push_back({"ncc.symmetry", asym == 0, static_cast<double>(asym), 0.0, "asymmetric pairs of 1000"});
  rep.results.push_back(at_most("ncc.affine_invariance", affine_err, 1e-3, "1000 descriptors, a in [0.1,10]"));
  rep.results.push_back(at_most("ncc.bounds", bound - 1.0, 1e-3, "max |ncc| - 1"));

  // A positive affine change of one frame's descriptors leaves the spatial
  // volume unchanged up to the eps slack.
  {
    auto desc = Tensord::randn({3, 8, 4, 4}, rng);
    auto moved = Tensord(desc.shape(), desc.values());
    auto m = moved.mutable_data();
    for (std::size_t i = 128; i < 256; ++i) m[i] = 2.5 * m[i] - 1.0;
    NoGradGuard ng;
    auto v0 = build_spatial_volume(desc, 3, kDefaultNccEps), v1 = build_spatial_volume(moved, 3, kDefaultNccEps);
    rep.results.push_back(at_most("ncc.volume_affine_invariance", oracle::max_abs_diff(vec(*v0), vec(*v1)), 1e-3));
  }
  return rep;
}

inline VerifyReport verify_oracles() {
  using namespace verify_detail;
  VerifyReport rep;
  Rng rng(4242);
  NoGradGuard ng;

  // correlation volumes against quadruple loops, every shape with T ≤ 3,
  // C ≤ 8, H, W ≤ 4 (two clips each)
  double spatial_err = 0, channel_err = 0;
  std::size_t instances = 0;
  for (std::size_t t = 2; t <= 3; ++t)
    for (std::size_t c = 1; c <= 8; ++c)
      for (std::size_t h = 1; h <= 4; ++h)
        for (std::size_t w = 1; w <= 4; ++w) {
          const std::size_t frames = 2 * t;
          auto d = Tensord::randn({frames, c, h, w}, rng);
          auto sv = build_spatial_volume(d, t, kDefaultNccEps);
          spatial_err = std::max(spatial_err, oracle::max_abs_diff(
                                                  vec(*sv), oracle::spatial_volume(vec(d), frames, c, h, w, t,
                                                                                   kDefaultNccEps)));
          if (h * w >= 2) {
            auto cv = build_channel_volume(d, t, kDefaultNccEps);
            channel_err = std::max(channel_err, oracle::max_abs_diff(vec(*cv), oracle::channel_volume(
                                                                                  vec(d), frames, c, h * w, t,
                                                                                  kDefaultNccEps)));
          }
          ++instances;
        }
  const auto n_inst = std::to_string(instances) + " shapes";
  rep.results.push_back(at_most("oracle.spatial_volume", spatial_err, 1e-10, n_inst));
  rep.results.push_back(at_most("oracle.channel_volume", channel_err, 1e-10, n_inst));

  // ranking metrics: every size Q ≤ 8, G ≤ 12, then larger random instances
  std::size_t cmc_mismatch = 0, count_mismatch = 0, checked = 0;
  double map_err = 0;
  auto run = [&](std::size_t q, std::size_t g, int ids, int cams, int levels) {
    std::uniform_int_distribution<int> id(0, ids - 1), cam(0, cams - 1), lev(0, levels - 1);
    oracle::RankingInstance inst;
    inst.queries = q;
    inst.gallery = g;
    for (std::size_t i = 0; i < q; ++i) {
      inst.qid.push_back(id(rng));
      inst.qcam.push_back(cam(rng));
    }
    for (std::size_t i = 0; i < g; ++i) {
      inst.gid.push_back(id(rng));
      inst.gcam.push_back(cam(rng));
    }
    for (std::size_t i = 0; i < q * g; ++i) inst.dist.push_back(static_cast<double>(lev(rng)) * 0.25);
    DistanceMatrix d{q, g, inst.dist};
    RankingLabels l{inst.qid, inst.gid, inst.qcam, inst.gcam};
    const std::size_t max_rank = std::max<std::size_t>(g, 1);
    auto got = compute_ranking(d, l, max_rank);
    auto want = oracle::ranking(inst, max_rank);
    if (got.cmc != want.cmc) ++cmc_mismatch;
    if (got.valid_queries != want.valid || got.skipped_queries != want.skipped ||
        got.per_query_ap.size() != want.per_query_ap.size())
      ++count_mismatch;
    map_err = std::max(map_err, std::abs(got.map - want.map));
    map_err = std::max(map_err, oracle::max_abs_diff(got.per_query_ap, want.per_query_ap));
    ++checked;
  };
  for (std::size_t q = 1; q <= 8; ++q)
    for (std::size_t g = 1; g <= 12; ++g)
      for (int rep_i = 0; rep_i < 8; ++rep_i) run(q, g, 3, 2, rep_i % 2 ? 4 : 50);
  std::uniform_int_distribution<std::size_t> big_q(9, 30), big_g(13, 60);
  for (int i = 0; i < 100; ++i) run(big_q(rng), big_g(rng), 8, 3, i % 2 ? 6 : 1000);
  rep.results.push_back({"oracle.cmc_exact", cmc_mismatch == 0 && count_mismatch == 0,
                         static_cast<double>(cmc_mismatch + count_mismatch), 0.0,
                         std::to_string(checked) + " instances"});
  rep.results.push_back(at_most("oracle.map", map_err, 1e-9, std::to_string(checked) + " instances"));

  // dense kernels
  {
    auto a = Tensord::randn({3, 3}, rng), b = Tensord::randn({3, 3}, rng);
    rep.results.push_back(at_most("oracle.matmul",
                                  oracle::max_abs_diff(vec(matmul(a, b)), oracle::matmul(vec(a), 3, 3, vec(b), 3)),
                                  1e-12));
  }
  {
    auto x = Tensord::randn({1, 2, 4, 4}, rng), k = Tensord::randn({3, 2, 3, 3}, rng);
    double err = oracle::max_abs_diff(vec(conv2d(x, k, std::optional<Tensord>(), 1, 1)),
                                      oracle::conv2d(vec(x), vec(k), std::nullopt, {1, 2, 4, 4, 3, 3, 1, 1}));
    auto x2 = Tensord::randn({2, 3, 7, 5}, rng), k2 = Tensord::randn({4, 3, 3, 3}, rng), b2 = Tensord::randn({4}, rng);
    err = std::max(err, oracle::max_abs_diff(vec(conv2d(x2, k2, std::optional<Tensord>(b2), 2, 1)),
                                             oracle::conv2d(vec(x2), vec(k2), vec(b2), {2, 3, 7, 5, 4, 3, 2, 1})));
    rep.results.push_back(at_most("oracle.conv2d", err, 1e-10));
  }
  {
    auto x = Tensord::randn({2, 3, 5, 7}, rng);
    rep.results.push_back(at_most(
        "oracle.adaptive_avg_pool2d",
        oracle::max_abs_diff(vec(adaptive_avg_pool2d(x, 3, 4)), oracle::adaptive_avg_pool(vec(x), 6, 5, 7, 3, 4)),
        1e-12));
    auto s = Tensord({3}, {1.0, 2.0, 3.0});
    rep.results.push_back(
        at_most("oracle.softmax", oracle::max_abs_diff(vec(softmax(s, 0)), oracle::softmax({1, 2, 3})), 1e-12));
  }
  {
    auto f = Tensord::randn({5, 3}, rng);
    rep.results.push_back(at_most("oracle.pairwise_distances",
                                  oracle::max_abs_diff(vec(pairwise_distances(f)),
                                                       oracle::pairwise_distances(vec(f), 5, 3)),
                                  1e-10));
  }
  {
    double err = 0;
    std::uniform_int_distribution<std::size_t> classes(2, 6), dims(1, 6);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t k = classes(rng), d = dims(rng);
      std::vector<int> labels;
      for (std::size_t c = 0; c < k; ++c) labels.insert(labels.end(), 2, static_cast<int>(c));
      std::uniform_int_distribution<std::size_t> extra(0, 12 - labels.size());
      for (std::size_t e = extra(rng); e > 0; --e) labels.push_back(static_cast<int>(e % k));
      std::shuffle(labels.begin(), labels.end(), rng);
      const std::size_t n = labels.size();
      auto f = Tensord::randn({n, d}, rng, 0.5);
      const double got = batch_hard_triplet(pairwise_distances(f), labels, 0.3).item();
      err = std::max(err, std::abs(got - oracle::batch_hard_triplet(vec(f), n, d, labels, 0.3)));
    }
    rep.results.push_back(at_most("oracle.batch_hard_triplet", err, 1e-9, "200 batches, n <= 12"));
  }
  {
    auto logits = Tensord({1, 3}, {2.0, 0.0, 0.0});
    const std::vector<int> y{0};
    double err = std::abs(label_smooth_ce(logits, y, 0.1).item() - oracle::label_smooth_ce(vec(logits), 1, 3, y, 0.1));
    auto l2 = Tensord::randn({6, 7}, rng, 2.0);
    const std::vector<int> y2{0, 6, 3, 3, 1, 5};
    err = std::max(err, std::abs(label_smooth_ce(l2, y2, 0.1).item() - oracle::label_smooth_ce(vec(l2), 6, 7, y2, 0.1)));
    rep.results.push_back(at_most("oracle.label_smooth_ce", err, 1e-9));
  }
  {
    InitRng init(9);
    auto cfg = small_sti_config();
    TemporalRelation<double> tr(cfg, init);
    SpatialRelation<double> sr(cfg, init);
    auto f = Tensord::randn({6, 8, 4, 4}, rng);
    // larger output weights so the ReLU is not trivially near zero
    for (Tensord w : {tr.output().weight(), sr.output().weight()})
      for (auto& v : w.mutable_data()) v *= 50.0;
    auto got_t = tr(f, 3);
    auto want_t = oracle::temporal_relation(vec(f), 6, 8, 4, 4, 3, projection(tr.query_key()), projection(tr.value()),
                                            projection(tr.output()));
    rep.results.push_back(at_most(
        "oracle.temporal_relation",
        std::max(oracle::max_abs_diff(vec(got_t.feature), want_t.feature), oracle::max_abs_diff(vec(got_t.map), want_t.maps)),
        1e-10));
    auto got_s = sr(f);
    auto want_s = oracle::spatial_relation(vec(f), 6, 8, 4, 4, 2, 2, projection(sr.query_key()), projection(sr.value()),
                                           projection(sr.output()));
    rep.results.push_back(at_most(
        "oracle.spatial_relation",
        std::max(oracle::max_abs_diff(vec(got_s.feature), want_s.feature), oracle::max_abs_diff(vec(got_s.map), want_s.maps)),
        1e-10));
  }
  return rep;
}

inline VerifyReport verify_structure() {
  using namespace verify_detail;
  VerifyReport rep;
  Rng rng(99);
  NoGradGuard ng;

  {
    InitRng init(10);
    StiModule<double> sti(small_sti_config(), init);
    ParamList<double> ps;
    sti.collect(ps, "sti");
    for (auto& p : ps) fill(p.tensor, 0.0);
    auto f = Tensord::randn({4, 8, 4, 4}, rng, 3.0);
    auto out = sti.forward(f, 2);
    rep.results.push_back(at_most("structure.sti_zero_identity", oracle::max_abs_diff(vec(out), vec(f)), 1e-12));
  }

  // attention normalization and gate ranges, on standalone modules and
  // through every insertion of a full forward pass
  double norm_err = 0;
  double gate_lo = 1.0, gate_hi = 0.0;
  auto slices = [&](const Tensord& m) {  // softmax over axis 1 of a 3D map
    const std::size_t a = m.dim(0), k = m.dim(1), q = m.dim(2);
    const auto& v = m.values();
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < q; ++j) {
        double s = 0;
        for (std::size_t r = 0; r < k; ++r) s += v[(i * k + r) * q + j];
        norm_err = std::max(norm_err, std::abs(s - 1.0));
      }
  };
  auto gates = [&](const Tensord& z) {
    for (auto v : z.values()) {
      gate_lo = std::min(gate_lo, v);
      gate_hi = std::max(gate_hi, v);
    }
  };
  for (int trial = 0; trial < 5; ++trial) {
    InitRng init(20 + trial);
    StiModule<double> sti(small_sti_config(), init);
    auto f = Tensord::randn({6, 8, 4, 4}, rng, 1.0 + trial);
    auto tr = sti.trace(f, 3);
    slices(tr.spatial.map);
    slices(tr.temporal.map);
    gates(tr.fusion.spatial_gate);
    gates(tr.fusion.temporal_gate);
    CoSaliencyModule<double> csl(small_csl_config(), init);
    gates(csl.attention(Tensord::randn({6, 8, 4, 4}, rng, 1.0 + trial), true).z);
  }
  {
    auto cfg = CstnetConfig::desk();
    Cstnet<double> model(cfg, 11);
    ForwardTrace<double> trace;
    model.forward(Tensord::uniform({8, 3, 32, 16}, 0.0, 1.0, rng), false, &trace);
    for (const auto& a : trace.attention) gates(a.z);
    for (const auto& t : trace.interaction) {
      slices(t.spatial.map);
      slices(t.temporal.map);
      gates(t.fusion.spatial_gate);
      gates(t.fusion.temporal_gate);
    }
  }
  rep.results.push_back(at_most("structure.attention_normalized", norm_err, 1e-6));
  rep.results.push_back({"structure.gates_open_interval", gate_lo > 0.0 && gate_hi < 1.0, gate_hi, 1.0,
                         "min " + std::to_string(gate_lo) + " max " + std::to_string(gate_hi)});

  // single-frame clips give the neutral 0.5 gate
  {
    auto cfg = small_csl_config();
    cfg.clip_len = 1;
    InitRng init(12);
    CoSaliencyModule<double> csl(cfg, init);
    auto z = csl.attention(Tensord::randn({2, 8, 4, 4}, rng), true).z;
    double dev = 0;
    for (auto v : z.values()) dev = std::max(dev, std::abs(v - 0.5));
    rep.results.push_back(at_most("structure.single_frame_gate", dev, 0.0));
  }

  // permuting frames permutes the temporal relation output
  {
    InitRng init(13);
    TemporalRelation<double> tr(small_sti_config(), init);
    auto f = Tensord::randn({4, 8, 4, 4}, rng);
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    const std::size_t fsz = 8 * 16;
    std::vector<double> pv(f.numel());
    for (std::size_t i = 0; i < 4; ++i)
      std::copy_n(f.values().begin() + static_cast<long>(perm[i] * fsz), fsz, pv.begin() + static_cast<long>(i * fsz));
    auto a = tr(f, 4).feature, b = tr(Tensord(f.shape(), pv), 4).feature;
    double err = 0;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < fsz; ++j)
        err = std::max(err, std::abs(b.values()[i * fsz + j] - a.values()[perm[i] * fsz + j]));
    rep.results.push_back(at_most("structure.temporal_permutation", err, 1e-12));
  }

  // CMC monotone on random instances, including ties and skipped queries
  {
    std::size_t violations = 0;
    std::uniform_int_distribution<int> id(0, 4), cam(0, 2), lev(0, 5);
    std::uniform_int_distribution<std::size_t> qn(1, 10), gn(1, 20);
    for (int trial = 0; trial < 500; ++trial) {
      const std::size_t q = qn(rng), g = gn(rng);
      DistanceMatrix d{q, g, {}};
      RankingLabels l;
      for (std::size_t i = 0; i < q * g; ++i) d.values.push_back(lev(rng));
      for (std::size_t i = 0; i < q; ++i) {
        l.query_ids.push_back(id(rng));
        l.query_cams.push_back(cam(rng));
      }
      for (std::size_t i = 0; i < g; ++i) {
        l.gallery_ids.push_back(id(rng));
        l.gallery_cams.push_back(cam(rng));
      }
      auto cmc = compute_cmc(d, l, g).cmc;
      for (std::size_t k = 1; k < cmc.size(); ++k)
        if (cmc[k] < cmc[k - 1]) ++violations;
      for (auto v : cmc)
        if (v < 0.0 || v > 1.0) ++violations;
    }
    rep.results.push_back({"structure.cmc_monotone", violations == 0, static_cast<double>(violations), 0.0,
                           "500 instances"});
  }
  return rep;
}

inline VerifyReport verify_all() {
  VerifyReport rep;
  rep.append(verify_gradients());
  rep.append(verify_ncc());
  rep.append(verify_oracles());
  rep.append(verify_structure());
  return rep;
}

}  // namespace cstnet
