#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cstnet/cli.hpp"

using namespace cstnet;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("cstnet_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// Compares every file except the resolved-config echo, which names its own directory.
bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    if (e.path().filename() == cli::kResolvedConfigName) continue;
    if (slurp(e.path()) != slurp(b / e.path().filename())) return false;
    ++n;
  }
  return n + 1 == static_cast<std::size_t>(std::distance(fs::directory_iterator(b), fs::directory_iterator{}));
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// Small 4-identity dataset shared by the train/eval tests.
const fs::path& tiny_dataset() {
  static const fs::path dir = [] {
    auto d = scratch("tiny") / "ds";
    auto r = run_cli({"synth", "--out", d.string(), "--identities", "4", "--seed", "3"});
    EXPECT_EQ(r.code, 0) << r.err;
    return d;
  }();
  return dir;
}

}  // namespace

TEST(CliSynth, SameArgumentsSameBytes) {
  auto root = scratch("synth_det");
  for (const char* name : {"a", "b"})
    ASSERT_EQ(run_cli({"synth", "--identities", "16", "--seed", "7", "--out", (root / name).string()}).code, 0);
  EXPECT_TRUE(same_tree(root / "a", root / "b"));
}

TEST(CliSynth, ZeroIdentitiesFails) {
  auto r = run_cli({"synth", "--identities", "0", "--out", (scratch("synth_zero") / "d").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("identity"), std::string::npos);
}

TEST(CliSynth, CensusCountsSequences) {
  auto r = run_cli({"synth", "--identities", "16", "--cams", "2", "--train-seqs", "1", "--test-seqs", "0", "--out",
                (scratch("census") / "d").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("sequences=32 identities=16 cameras=2"), std::string::npos) << r.out;
}

TEST(CliConfig, FileValuesAndOverrides) {
  auto root = scratch("config");
  write(root / "run.ini", "[synth]\nidentities = 3\nseed = 9\nclutter = 12.5\n");
  auto r = run_cli({"--config", (root / "run.ini").string(), "synth", "--seed", "4", "--out", (root / "d").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("identities=3"), std::string::npos);
  const auto echo = slurp(root / "d" / cli::kResolvedConfigName);
  EXPECT_NE(echo.find("seed = 4"), std::string::npos) << echo;
  EXPECT_NE(echo.find("clutter = 12.5"), std::string::npos) << echo;
}

TEST(CliConfig, ResolvedEchoReproducesRun) {
  auto root = scratch("echo");
  ASSERT_EQ(run_cli({"synth", "--identities", "3", "--clutter", "20", "--seed", "5", "--out", (root / "a").string()}).code,
            0);
  fs::copy_file(root / "a" / cli::kResolvedConfigName, root / "echo.ini");
  // the echo names its own output directory; point the rerun elsewhere
  auto r = run_cli({"--config", (root / "echo.ini").string(), "synth", "--out", (root / "b").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const auto& e : fs::directory_iterator(root / "a"))
    if (e.path().filename() != cli::kResolvedConfigName)
      EXPECT_EQ(slurp(e.path()), slurp(root / "b" / e.path().filename())) << e.path();
}

TEST(CliConfig, UnknownKeysAndSectionsRejected) {
  auto root = scratch("config_bad");
  write(root / "key.ini", "[synth]\nidentites = 3\n");
  write(root / "section.ini", "[synthesis]\nidentities = 3\n");
  write(root / "other.ini", "[train]\nbogus = 1\n");
  for (const char* f : {"key.ini", "section.ini", "other.ini"}) {
    auto r = run_cli({"--config", (root / f).string(), "synth", "--out", (root / "d").string()});
    EXPECT_EQ(r.code, 1) << f;
    EXPECT_FALSE(r.err.empty());
  }
  EXPECT_EQ(run_cli({"--config", (root / "missing.ini").string(), "synth"}).code, 1);
  EXPECT_EQ(run_cli({"synth", "--no-such-flag"}).code, 1);
  EXPECT_EQ(run_cli({}).code, 1);
}

TEST(CliConfig, OutputDirectoryFromEnvironment) {
  auto root = scratch("env");
  ::setenv(cli::kOutDirEnv, root.string().c_str(), 1);
  auto r = run_cli({"synth", "--identities", "2"});
  ::unsetenv(cli::kOutDirEnv);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(root / "dataset" / "index.txt"));
  EXPECT_EQ(cli::resolve_out_dir("x", "train"), "x");
}

TEST(CliTrain, BaseAblationHasNoInsertedParameters) {
  auto root = scratch("train_base");
  auto r = run_cli({"train", "--data", tiny_dataset().string(), "--out", (root / "run").string(), "--ablation", "base",
                "--epochs", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("csl=0 sti=0"), std::string::npos) << r.out;
}

TEST(CliTrain, ZeroEpochsSavesInitialization) {
  auto root = scratch("train_zero");
  ASSERT_EQ(run_cli({"train", "--data", tiny_dataset().string(), "--out", (root / "run").string(), "--epochs", "0",
                 "--seed", "11"})
                .code,
            0);
  cli::TrainOptions o;
  auto cfg = cli::model_config(o, load_dataset(tiny_dataset().string()));
  save_checkpoint(Cstnet<float>(cfg, 11), (root / "init.cstk").string());
  EXPECT_EQ(slurp(root / "run" / "model.cstk"), slurp(root / "init.cstk"));
}

TEST(CliTrain, FixedSeedReproducesLogsAndCheckpoints) {
  auto root = scratch("train_det");
  for (const char* name : {"a", "b"}) {
    auto r = run_cli({"train", "--data", tiny_dataset().string(), "--out", (root / name).string(), "--epochs", "2",
                  "--p", "4", "--iters-per-epoch", "2", "--checkpoint-every", "1", "--seed", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  for (const char* f : {"epochs.jsonl", "checkpoint_epoch_0001.cstk", "checkpoint_epoch_0002.cstk", "model.cstk"})
    EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f)) << f;
  std::ifstream batches(root / "a" / "batches.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(batches, line)) {
    auto j = nlohmann::json::parse(line);
    for (const char* k : {"epoch", "step", "triplet", "id", "lr", "wall_ms"}) EXPECT_TRUE(j.contains(k)) << k;
    ++n;
  }
  EXPECT_EQ(n, 4u);
}

TEST(CliTrain, MissingDatasetFails) {
  auto r = run_cli({"train", "--data", (scratch("nodata") / "absent").string(), "--out", (scratch("nodata_out")).string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("index.txt"), std::string::npos);
  EXPECT_EQ(run_cli({"train", "--data", tiny_dataset().string(), "--ablation", "half", "--out", scratch("half").string()}).code, 1);
}

TEST(CliEval, TableAndRecords) {
  auto root = scratch("eval");
  ASSERT_EQ(
      run_cli({"train", "--data", tiny_dataset().string(), "--out", (root / "run").string(), "--epochs", "0"}).code, 0);
  std::string tables[2];
  for (int i = 0; i < 2; ++i) {
    auto r = run_cli({"eval", "--checkpoint", (root / "run" / "model.cstk").string(), "--data", tiny_dataset().string(),
                  "--out", (root / ("ev" + std::to_string(i))).string()});
    ASSERT_EQ(r.code, 0) << r.err;
    tables[i] = r.out;
  }
  EXPECT_EQ(tables[0], tables[1]);
  for (const char* col : {"Rank-1", "Rank-5", "Rank-20", "mAP"}) EXPECT_NE(tables[0].find(col), std::string::npos);
  EXPECT_EQ(slurp(root / "ev0" / "metrics.jsonl"), slurp(root / "ev1" / "metrics.jsonl"));
  std::ifstream records(root / "ev0" / "metrics.jsonl");
  std::string line;
  bool saw_map = false;
  while (std::getline(records, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("metric") && j.contains("k") && j.contains("value"));
    saw_map |= j["metric"] == "mAP";
  }
  EXPECT_TRUE(saw_map);
}

TEST(CliEval, OracleEmbeddingsRankFirst) {
  auto r = run_cli({"eval", "--data", tiny_dataset().string(), "--oracle-embeddings", "true", "--out",
                (scratch("eval_oracle")).string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream is(r.out);
  std::string header, rank1;
  std::getline(is, header);
  is >> rank1;
  EXPECT_EQ(rank1, "100.0%");
}

TEST(CliEval, IncompatibleCheckpointFails) {
  auto root = scratch("eval_bad");
  ASSERT_EQ(run_cli({"synth", "--identities", "4", "--height", "40", "--out", (root / "tall").string()}).code, 0);
  ASSERT_EQ(
      run_cli({"train", "--data", tiny_dataset().string(), "--out", (root / "run").string(), "--epochs", "0"}).code, 0);
  auto r = run_cli({"eval", "--checkpoint", (root / "run" / "model.cstk").string(), "--data", (root / "tall").string(),
                "--out", (root / "ev").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("checkpoint expects"), std::string::npos) << r.err;
  EXPECT_EQ(run_cli({"eval", "--checkpoint", (root / "none.cstk").string(), "--data", tiny_dataset().string(), "--out",
                 (root / "ev2").string()})
                .code,
            1);
}
