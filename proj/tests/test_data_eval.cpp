#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "cstnet/checkpoint.hpp"
#include "cstnet/data.hpp"
#include "cstnet/evaluate.hpp"
#include "cstnet/metrics.hpp"
#include "cstnet/testing/oracles.hpp"
#include "cstnet/verify.hpp"

using namespace cstnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("cstnet_test_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

SynthSpec spec(std::size_t ids, std::uint64_t seed) {
  SynthSpec s;
  s.num_identities = ids;
  s.seed = seed;
  return s;
}

RankingLabels labels_of(const oracle::RankingInstance& r) { return {r.qid, r.gid, r.qcam, r.gcam}; }

DistanceMatrix matrix_of(const oracle::RankingInstance& r) { return {r.queries, r.gallery, r.dist}; }

oracle::RankingInstance random_instance(std::size_t q, std::size_t g, std::mt19937_64& rng) {
  oracle::RankingInstance r;
  r.queries = q;
  r.gallery = g;
  std::uniform_int_distribution<int> id(0, 3), cam(0, 2), coarse(0, 4);
  for (std::size_t i = 0; i < q * g; ++i) r.dist.push_back(coarse(rng) * 0.5);  // coarse values force ties
  for (std::size_t i = 0; i < q; ++i) {
    r.qid.push_back(id(rng));
    r.qcam.push_back(cam(rng));
  }
  for (std::size_t i = 0; i < g; ++i) {
    r.gid.push_back(id(rng));
    r.gcam.push_back(cam(rng));
  }
  return r;
}

}  // namespace

// ---------------------------------------------------------------- synthesis

TEST(Synth, SameSeedSameDataset) { EXPECT_EQ(generate_synthetic(spec(5, 3)), generate_synthetic(spec(5, 3))); }

TEST(Synth, ZeroIdentitiesRejected) { EXPECT_THROW(generate_synthetic(spec(0, 1)), ContractError); }

TEST(Synth, NuisanceFreeFramesDifferOnlyByPlacement) {
  auto s = spec(3, 4);
  s.placement_jitter = 0;
  auto still = generate_synthetic(s);
  for (const auto& seq : still.sequences)
    for (std::size_t f = 1; f < seq.length(); ++f)
      ASSERT_TRUE(std::equal(seq.frame(0), seq.frame(0) + seq.frame_size(), seq.frame(f)));
  s.placement_jitter = 1;
  auto moving = generate_synthetic(s);
  for (const auto& seq : moving.sequences) {
    std::set<std::vector<float>> distinct;
    for (std::size_t f = 0; f < seq.length(); ++f) distinct.emplace(seq.frame(f), seq.frame(f) + seq.frame_size());
    EXPECT_LE(distinct.size(), 9u);  // one rendering per offset in {-1,0,1}²
  }
}

TEST(Synth, SplitProtocol) {
  auto ds = generate_synthetic(spec(16, 1));
  EXPECT_NO_THROW(ds.validate());
  EXPECT_EQ(ds.num_identities(), 16u);
  EXPECT_EQ(ds.indices(Split::train).size(), 32u);
  EXPECT_EQ(ds.indices(Split::query).size(), 16u);
  EXPECT_EQ(ds.indices(Split::gallery).size(), 16u);
  for (auto q : ds.indices(Split::query)) {
    bool cross = false;
    for (auto g : ds.indices(Split::gallery))
      cross |= ds.sequences[g].identity == ds.sequences[q].identity && ds.sequences[g].camera != ds.sequences[q].camera;
    EXPECT_TRUE(cross);
  }
}

TEST(Synth, InvalidSpecs) {
  auto s = spec(4, 1);
  s.occlusion_prob = 1.5;
  EXPECT_THROW(generate_synthetic(s), ContractError);
  s = spec(4, 1);
  s.illum_gain_lo = 0.0;
  EXPECT_THROW(generate_synthetic(s), ContractError);
}

TEST(Synth, NearestCentroidCalibration) {
  auto clean = spec(16, 11);
  EXPECT_GT(nearest_centroid_rank1(generate_synthetic(clean)), 0.95);
  auto cluttered = clean;
  cluttered.background_clutter = 160.0;
  EXPECT_LT(nearest_centroid_rank1(generate_synthetic(cluttered)), 0.6);
}

// ---------------------------------------------------------------- storage

TEST(DatasetIo, OneSequenceRoundTrip) {
  auto s = spec(1, 2);
  s.cams = 1;
  s.test_seqs_per_cam = 0;
  auto ds = generate_synthetic(s);
  ASSERT_EQ(ds.sequences.size(), 1u);
  auto dir = scratch("one");
  save_dataset(ds, dir.string());
  EXPECT_EQ(load_dataset(dir.string()), ds);
}

TEST(DatasetIo, EmptyRoundTrip) {
  auto dir = scratch("empty");
  save_dataset(VideoDataset{}, dir.string());
  EXPECT_EQ(slurp(dir / "index.txt"), "");
  EXPECT_EQ(load_dataset(dir.string()), VideoDataset{});
}

TEST(DatasetIo, SaveLoadSaveIsByteIdentical) {
  auto ds = generate_synthetic(spec(3, 5));
  auto a = scratch("bytes_a"), b = scratch("bytes_b");
  save_dataset(ds, a.string());
  save_dataset(load_dataset(a.string()), b.string());
  for (const auto& e : fs::directory_iterator(a)) EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename()));
}

TEST(DatasetIo, CorruptedMagic) {
  auto ds = generate_synthetic(spec(2, 6));
  auto dir = scratch("magic");
  save_dataset(ds, dir.string());
  auto file = dir / "seq_00000.cstt";
  {
    std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  try {
    load_dataset(dir.string());
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(e.file().find("seq_00000.cstt"), std::string::npos);
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(DatasetIo, TruncatedFileAndMissingFile) {
  auto ds = generate_synthetic(spec(2, 7));
  auto dir = scratch("trunc");
  save_dataset(ds, dir.string());
  auto file = dir / "seq_00001.cstt";
  fs::resize_file(file, fs::file_size(file) - 10);
  EXPECT_THROW(load_dataset(dir.string()), FormatError);
  fs::remove(file);
  EXPECT_THROW(load_dataset(dir.string()), FormatError);
}

// ---------------------------------------------------------------- metrics

TEST(Cmc, ForcedRanks) {
  RankingLabels l{{0}, {0, 1, 2}, {0}, {1, 1, 1}};
  auto first = compute_cmc({1, 3, {0.1, 0.5, 0.9}}, l, 3);
  EXPECT_EQ(first.cmc, (std::vector<double>{1, 1, 1}));
  auto last = compute_cmc({1, 3, {0.9, 0.5, 0.1}}, l, 3);
  EXPECT_EQ(last.cmc, (std::vector<double>{0, 0, 1}));
}

TEST(Cmc, SameCameraMatchesExcludedAndTiesByIndex) {
  // gallery 0 is the same identity on the query's camera: ignored
  RankingLabels l{{5}, {5, 7, 5}, {0}, {0, 1, 1}};
  auto r = compute_cmc({1, 3, {0.0, 0.4, 0.4}}, l, 2);
  EXPECT_EQ(r.cmc, (std::vector<double>{0, 1}));
  RankingLabels none{{5}, {5, 7}, {0}, {0, 1}};
  auto skipped = compute_cmc({1, 2, {0.1, 0.2}}, none, 2);
  EXPECT_EQ(skipped.skipped_queries, 1u);
  EXPECT_EQ(skipped.valid_queries, 0u);
}

TEST(Map, HandExamples) {
  RankingLabels l{{0}, {1, 0, 2}, {0}, {1, 1, 1}};
  EXPECT_DOUBLE_EQ(compute_map({1, 3, {0.1, 0.2, 0.3}}, l).map, 0.5);
  RankingLabels two{{0}, {0, 0, 1}, {0}, {1, 2, 1}};
  EXPECT_DOUBLE_EQ(compute_map({1, 3, {0.1, 0.2, 0.3}}, two).map, 1.0);
}

TEST(Ranking, RandomInstancesMatchOracle) {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 100; ++i) {
    auto inst = random_instance(6, 10, rng);
    auto want = oracle::ranking(inst, 10);
    auto got = compute_ranking(matrix_of(inst), labels_of(inst), 10);
    EXPECT_EQ(got.cmc, want.cmc);
    EXPECT_NEAR(got.map, want.map, 1e-9);
    EXPECT_EQ(got.skipped_queries, want.skipped);
  }
}

TEST(Ranking, ScaleInvariantAndMonotone) {
  std::mt19937_64 rng(13);
  for (int i = 0; i < 50; ++i) {
    auto inst = random_instance(5, 9, rng);
    auto base = compute_ranking(matrix_of(inst), labels_of(inst), 9);
    auto scaled = matrix_of(inst);
    for (auto& v : scaled.values) v *= 7.25;
    auto other = compute_ranking(scaled, labels_of(inst), 9);
    EXPECT_EQ(base.cmc, other.cmc);
    EXPECT_EQ(base.map, other.map);
    EXPECT_TRUE(std::is_sorted(base.cmc.begin(), base.cmc.end()));
    for (double v : base.cmc) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Ranking, PairwiseEuclidean) {
  const std::vector<double> a{0, 0, 1, 1}, b{3, 4};
  auto d = euclidean_distances(a, 2, b, 1, 2);
  EXPECT_DOUBLE_EQ(d(0, 0), 5.0);
  EXPECT_NEAR(d(1, 0), std::sqrt(4.0 + 9.0), 1e-12);
}

// ---------------------------------------------------------------- evaluate

TEST(Evaluate, PerfectEmbeddingsRankFirst) {
  // gallery is the query set relabeled to another camera
  Embeddings q, g;
  q.dim = g.dim = 4;
  for (int id = 0; id < 4; ++id) {
    std::vector<double> v(4, 0.0);
    v[id] = 1.0;
    for (auto* e : {&q, &g}) {
      e->values.insert(e->values.end(), v.begin(), v.end());
      e->ids.push_back(id);
      ++e->count;
    }
    q.cams.push_back(0);
    g.cams.push_back(1);
  }
  auto m = evaluate_embeddings(q, g, 4);
  EXPECT_EQ(m.rank(1), 1.0);
  EXPECT_EQ(m.map, 1.0);
}

TEST(Evaluate, RandomEmbeddingsAreNearChance) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    Embeddings q, g;
    q.dim = g.dim = 16;
    for (int id = 0; id < 10; ++id)
      for (int rep = 0; rep < 3; ++rep) {
        for (auto* e : {&q, &g}) {
          for (int k = 0; k < 16; ++k) e->values.push_back(nd(rng));
          e->ids.push_back(id);
          ++e->count;
        }
        q.cams.push_back(0);
        g.cams.push_back(1);
      }
    EXPECT_LT(evaluate_embeddings(q, g, 20).map, 0.35);
  }
}

TEST(Evaluate, SameCheckpointSameMetrics) {
  SynthSpec s = spec(4, 8);
  s.height = 16;
  s.width = 8;
  auto ds = generate_synthetic(s);
  auto cfg = micro_config();
  cfg.num_identities = 4;
  Cstnet<float> model(cfg, 2);
  auto dir = scratch("ckpt_eval");
  fs::create_directories(dir);
  save_checkpoint(model, (dir / "m.cstk").string());
  auto a = evaluate(load_checkpoint<float>((dir / "m.cstk").string()), ds);
  auto b = evaluate(load_checkpoint<float>((dir / "m.cstk").string()), ds);
  EXPECT_EQ(a.cmc, b.cmc);
  EXPECT_EQ(a.map, b.map);
  auto direct = evaluate(model, ds);
  EXPECT_EQ(a.cmc, direct.cmc);
}

// ---------------------------------------------------------------- checkpoints

TEST(Checkpoint, RoundTripIsExact) {
  auto cfg = CstnetConfig::desk();
  cfg.use_sti = false;
  Cstnet<float> model(cfg, 7);
  auto dir = scratch("ckpt");
  fs::create_directories(dir);
  save_checkpoint(model, (dir / "a.cstk").string());
  auto back = load_checkpoint<float>((dir / "a.cstk").string());
  EXPECT_EQ(back.config().to_text(), model.config().to_text());
  auto pa = model.parameters(), pb = back.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_EQ(pa[i].tensor.values(), pb[i].tensor.values());
  }
  save_checkpoint(back, (dir / "b.cstk").string());
  EXPECT_EQ(slurp(dir / "a.cstk"), slurp(dir / "b.cstk"));
}

TEST(Checkpoint, CorruptionDetected) {
  Cstnet<float> model(micro_config(), 1);
  auto dir = scratch("ckpt_bad");
  fs::create_directories(dir);
  const auto path = (dir / "m.cstk").string();
  save_checkpoint(model, path);
  const auto bytes = slurp(path);
  auto write = [&](const std::string& b) { std::ofstream(path, std::ios::binary | std::ios::trunc) << b; };
  write("XSTK" + bytes.substr(4));
  EXPECT_THROW(load_checkpoint<float>(path), FormatError);
  write(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_checkpoint<float>(path), FormatError);
  write(bytes + "junk");
  EXPECT_THROW(load_checkpoint<float>(path), FormatError);
}
