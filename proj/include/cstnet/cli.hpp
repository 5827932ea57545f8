#pragma once

// Command-line front end: synth, train, eval, verify, gradcheck.
//
// Options come from three places, later ones winning: the section of a
// `--config` file named after the command, then the command line. Keys in the
// file are the long option names without dashes ("lr = 1e-3" under [train]).
// Unknown sections or keys are rejected. The output directory is `--out`
// when given, else $CSTNET_OUT_DIR/<command>, else runs/<command>. Every
// command writes its resolved options to <out>/resolved_config.ini, which can
// be fed back through --config.
//
// Exit codes: 0 success, 1 contract/config/format/numeric error, 2 failed
// verification.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cstnet/checkpoint.hpp"
#include "cstnet/data.hpp"
#include "cstnet/errors.hpp"
#include "cstnet/evaluate.hpp"
#include "cstnet/model.hpp"
#include "cstnet/training.hpp"
#include "cstnet/verify.hpp"
#include "json.hpp"

namespace cstnet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitVerifyFailed = 2;
inline constexpr const char* kOutDirEnv = "CSTNET_OUT_DIR";
inline constexpr const char* kResolvedConfigName = "resolved_config.ini";

struct SynthOptions {
  SynthSpec spec;
  std::string out;
};

struct TrainOptions {
  std::string data;
  std::string out;
  std::string preset = "desk";
  std::string ablation = "full";
  std::size_t clip_len = 0;       // 0: preset value
  std::size_t embedding_dim = 0;  // 0: preset value
  TrainConfig train;
  std::size_t checkpoint_every = 0;
  std::size_t eval_every = 0;
};

struct EvalOptions {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::size_t max_rank = 20;
  bool oracle_embeddings = false;
};

struct VerifyOptions {
  std::string out;
};

inline std::string resolve_out_dir(const std::string& flag, const std::string& command) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return (std::filesystem::path(env) / command).string();
  return (std::filesystem::path("runs") / command).string();
}

inline void apply_ablation(CstnetConfig& cfg, const std::string& ablation) {
  if (ablation == "base") {
    cfg.use_csl = cfg.use_sti = false;
  } else if (ablation == "csl") {
    cfg.use_csl = true;
    cfg.use_sti = false;
  } else if (ablation == "sti") {
    cfg.use_csl = false;
    cfg.use_sti = true;
  } else if (ablation == "full") {
    cfg.use_csl = cfg.use_sti = true;
  } else {
    throw ConfigError("unknown ablation '" + ablation + "' (base|csl|sti|full)");
  }
}

inline CstnetConfig model_config(const TrainOptions& o, const VideoDataset& ds) {
  CstnetConfig cfg;
  if (o.preset == "desk") {
    cfg = CstnetConfig::desk();
  } else if (o.preset == "paper") {
    cfg = CstnetConfig::paper();
  } else {
    throw ConfigError("unknown preset '" + o.preset + "' (desk|paper)");
  }
  cfg.input_channels = ds.channels;
  cfg.input_height = ds.height;
  cfg.input_width = ds.width;
  if (o.clip_len) cfg.clip_len = o.clip_len;
  if (o.embedding_dim) cfg.embedding_dim = o.embedding_dim;
  cfg.num_identities = ds.train_label_map().size();
  apply_ablation(cfg, o.ablation);
  cfg.validate();
  return cfg;
}

namespace detail {

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError(dir, 0, "cannot create directory: " + ec.message());
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError(path, 0, "cannot open for writing");
  return os;
}

inline std::string option_key(const CLI::Option* opt) {
  const auto& l = opt->get_lnames();
  return l.empty() ? std::string() : l.front();
}

// Writes "[command]" followed by key = value for every option of the command.
inline void write_resolved_config(const CLI::App& sub, const std::string& out_dir) {
  auto os = open_out((std::filesystem::path(out_dir) / kResolvedConfigName).string());
  os << "[" << sub.get_name() << "]\n";
  for (const CLI::Option* opt : sub.get_options()) {
    const auto key = option_key(opt);
    if (key.empty() || key == "help") continue;
    std::string value = opt->count() ? opt->as<std::string>() : opt->get_default_str();
    if (opt->get_expected_min() == 0 && value.empty()) value = "false";
    os << key << " = " << value << '\n';
  }
}

// Config-file items become "--key=value" arguments placed ahead of the
// command-line arguments of the same command.
inline std::vector<std::string> config_arguments(const std::string& path, CLI::App& app, const std::string& command) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  CLI::ConfigINI ini;
  std::vector<std::string> args;
  for (const auto& item : ini.from_config(is)) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    if (item.parents.size() != 1)
      throw ConfigError(path + ": key '" + item.name + "' must sit in a [synth], [train], [eval], [verify] or [gradcheck] section");
    const auto& section = item.parents.front();
    CLI::App* sub = nullptr;
    try {
      sub = app.get_subcommand(section);
    } catch (const CLI::OptionNotFound&) {
      throw ConfigError(path + ": unknown section [" + section + "]");
    }
    if (!sub->get_option_no_throw("--" + item.name) || item.name == "help")
      throw ConfigError(path + ": unknown key '" + item.name + "' in [" + section + "]");
    if (section != command) continue;
    std::string value;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) value += (i ? " " : "") + item.inputs[i];
    args.push_back("--" + item.name + "=" + value);
  }
  return args;
}

inline nlohmann::json epoch_record(const EpochReport& r) {
  return {{"epoch", r.epoch},           {"batches", r.batches}, {"triplet", r.triplet},
          {"id", r.identification},     {"total", r.total},     {"grad_norm", r.grad_norm},
          {"lr", r.lr}};
}

inline nlohmann::json batch_record(const BatchRecord& r) {
  return {{"epoch", r.epoch},  {"step", r.step},           {"triplet", r.triplet}, {"id", r.identification},
          {"lr", r.lr},        {"grad_norm", r.grad_norm}, {"wall_ms", r.wall_ms}};
}

inline std::string percent(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * v << "%";
  return os.str();
}

}  // namespace detail

inline int run_synth(const SynthOptions& o, std::ostream& out) {
  auto ds = generate_synthetic(o.spec);
  save_dataset(ds, o.out);
  std::size_t frames = 0;
  for (const auto& s : ds.sequences) frames += s.length();
  out << "dataset " << o.out << ": sequences=" << ds.sequences.size() << " identities=" << ds.num_identities()
      << " cameras=" << o.spec.cams << " train=" << ds.indices(Split::train).size()
      << " query=" << ds.indices(Split::query).size() << " gallery=" << ds.indices(Split::gallery).size()
      << " frames=" << frames << " size=" << ds.height << "x" << ds.width << '\n';
  return kExitOk;
}

inline int run_train(const TrainOptions& o, std::ostream& out) {
  auto ds = load_dataset(o.data);
  ds.validate();
  if (ds.indices(Split::train).empty()) throw ContractError("train: dataset " + o.data + " has no training sequences");
  const auto cfg = model_config(o, ds);
  Cstnet<float> model(cfg, o.train.seed);
  const auto census = model.census();
  out << "model: ablation=" << o.ablation << " parameters=" << census.total << " backbone=" << census.backbone
      << " csl=" << census.csl << " sti=" << census.sti << " head=" << census.head << '\n';

  namespace fs = std::filesystem;
  auto batches = detail::open_out((fs::path(o.out) / "batches.jsonl").string());
  auto epochs = detail::open_out((fs::path(o.out) / "epochs.jsonl").string());
  Trainer<float> trainer(model, ds, o.train);
  for (std::size_t e = 0; e < o.train.epochs; ++e) {
    auto rep = trainer.train_epoch(e, [&](const BatchRecord& b) { batches << detail::batch_record(b).dump() << '\n'; });
    auto rec = detail::epoch_record(rep);
    if (o.eval_every && (e + 1) % o.eval_every == 0 && !ds.indices(Split::query).empty()) {
      auto m = evaluate(model, ds, 20);
      rec["rank1"] = m.rank(1);
      rec["mAP"] = m.map;
    }
    epochs << rec.dump() << '\n';
    out << "epoch " << e + 1 << "/" << o.train.epochs << " triplet=" << rep.triplet << " id=" << rep.identification
        << " lr=" << rep.lr;
    if (rec.contains("rank1")) out << " rank1=" << rec["rank1"].get<double>();
    out << '\n';
    if (o.checkpoint_every && (e + 1) % o.checkpoint_every == 0) {
      std::ostringstream name;
      name << "checkpoint_epoch_" << std::setw(4) << std::setfill('0') << e + 1 << ".cstk";
      save_checkpoint(model, (fs::path(o.out) / name.str()).string());
    }
  }
  const auto final_path = (fs::path(o.out) / "model.cstk").string();
  save_checkpoint(model, final_path);
  out << "checkpoint " << final_path << '\n';
  return kExitOk;
}

inline RankingMetrics oracle_metrics(const VideoDataset& ds, std::size_t max_rank) {
  int top = 0;
  for (const auto& s : ds.sequences) top = std::max(top, s.identity);
  auto embed = [&](Split split) {
    Embeddings e;
    e.dim = static_cast<std::size_t>(top) + 1;
    for (auto i : ds.indices(split)) {
      std::vector<double> v(e.dim, 0.0);
      v[static_cast<std::size_t>(ds.sequences[i].identity)] = 1.0;
      e.values.insert(e.values.end(), v.begin(), v.end());
      e.ids.push_back(ds.sequences[i].identity);
      e.cams.push_back(ds.sequences[i].camera);
      ++e.count;
    }
    return e;
  };
  return evaluate_embeddings(embed(Split::query), embed(Split::gallery), max_rank);
}

inline int run_eval(const EvalOptions& o, std::ostream& out) {
  auto ds = load_dataset(o.data);
  ds.validate();
  if (ds.indices(Split::query).empty() || ds.indices(Split::gallery).empty())
    throw ContractError("eval: dataset " + o.data + " has no query/gallery split");
  RankingMetrics m;
  if (o.oracle_embeddings) {
    m = oracle_metrics(ds, o.max_rank);
  } else {
    if (o.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
    auto model = load_checkpoint<float>(o.checkpoint);
    const auto& cfg = model.config();
    if (cfg.input_channels != ds.channels || cfg.input_height != ds.height || cfg.input_width != ds.width)
      throw ConfigError("eval: checkpoint expects " + std::to_string(cfg.input_channels) + "x" +
                        std::to_string(cfg.input_height) + "x" + std::to_string(cfg.input_width) +
                        " frames, dataset has " + std::to_string(ds.channels) + "x" + std::to_string(ds.height) +
                        "x" + std::to_string(ds.width));
    m = evaluate(model, ds, o.max_rank);
  }
  out << std::left << std::setw(9) << "Rank-1" << std::setw(9) << "Rank-5" << std::setw(9) << "Rank-20"
      << "mAP" << '\n'
      << std::setw(9) << detail::percent(m.rank(1)) << std::setw(9) << detail::percent(m.rank(5)) << std::setw(9)
      << detail::percent(m.rank(20)) << detail::percent(m.map) << '\n';
  out << "queries=" << m.valid_queries << " skipped=" << m.skipped_queries << '\n';
  auto records = detail::open_out((std::filesystem::path(o.out) / "metrics.jsonl").string());
  for (std::size_t k = 1; k <= m.cmc.size(); ++k)
    records << nlohmann::json{{"metric", "cmc"}, {"k", k}, {"value", m.cmc[k - 1]}}.dump() << '\n';
  records << nlohmann::json{{"metric", "mAP"}, {"k", nullptr}, {"value", m.map}}.dump() << '\n';
  records << nlohmann::json{{"metric", "valid_queries"}, {"k", nullptr}, {"value", m.valid_queries}}.dump() << '\n';
  records << nlohmann::json{{"metric", "skipped_queries"}, {"k", nullptr}, {"value", m.skipped_queries}}.dump() << '\n';
  return kExitOk;
}

inline int run_verify(const VerifyOptions& o, bool gradients_only, std::ostream& out) {
  const auto rep = gradients_only ? verify_gradients() : verify_all();
  print_report(out, rep);
  std::size_t failed = 0;
  for (const auto& r : rep.results) failed += !r.passed;
  out << "max gradient-check relative error: " << std::scientific << std::setprecision(3) << rep.max_gradient_error()
      << std::defaultfloat << '\n';
  out << (failed ? "FAILED " : "OK ") << rep.results.size() - failed << "/" << rep.results.size()
      << " properties passed\n";
  auto report = detail::open_out((std::filesystem::path(o.out) / "verify_report.txt").string());
  print_report(report, rep);
  return failed ? kExitVerifyFailed : kExitOk;
}

// Parses and runs one command; args excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"CSTNet video re-identification toolkit", "cstnet"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "INI file with [synth]/[train]/[eval]/[verify] sections");

  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "generate a synthetic video re-ID dataset");
  auto& s = so.spec;
  synth->add_option("--out", so.out, "dataset directory");
  synth->add_option("--identities", s.num_identities);
  synth->add_option("--cams", s.cams);
  synth->add_option("--train-seqs", s.train_seqs_per_cam, "training sequences per identity and camera");
  synth->add_option("--test-seqs", s.test_seqs_per_cam, "test sequences per identity and camera");
  synth->add_option("--len-min", s.seq_len_min);
  synth->add_option("--len-max", s.seq_len_max);
  synth->add_option("--height", s.height);
  synth->add_option("--width", s.width);
  synth->add_option("--clutter", s.background_clutter, "clutter amplitude sigma_b (pixel units)");
  synth->add_option("--clutter-patches", s.clutter_patches);
  synth->add_option("--gain-lo", s.illum_gain_lo);
  synth->add_option("--gain-hi", s.illum_gain_hi);
  synth->add_option("--bias-lo", s.illum_bias_lo);
  synth->add_option("--bias-hi", s.illum_bias_hi);
  synth->add_option("--occlusion", s.occlusion_prob);
  synth->add_option("--jitter", s.placement_jitter);
  synth->add_option("--seed", s.seed);

  TrainOptions to;
  auto& tc = to.train;
  auto* train = app.add_subcommand("train", "train a model on a dataset directory");
  train->add_option("--data", to.data, "dataset directory")->required();
  train->add_option("--out", to.out, "run directory");
  train->add_option("--preset", to.preset, "desk|paper");
  train->add_option("--ablation", to.ablation, "base|csl|sti|full");
  train->add_option("--clip-len", to.clip_len, "frames per clip (0: preset)");
  train->add_option("--embedding-dim", to.embedding_dim, "(0: preset)");
  train->add_option("--epochs", tc.epochs);
  train->add_option("--iters-per-epoch", tc.iters_per_epoch, "(0: training sequences / (P*K))");
  train->add_option("--p", tc.p, "identities per batch");
  train->add_option("--k", tc.k, "clips per identity");
  train->add_option("--lr", tc.adam.lr);
  train->add_option("--lr-step", tc.adam.lr_step_epochs, "epochs between lr decays (0: constant)");
  train->add_option("--lr-gamma", tc.adam.lr_gamma);
  train->add_option("--beta1", tc.adam.beta1);
  train->add_option("--beta2", tc.adam.beta2);
  train->add_option("--adam-eps", tc.adam.eps);
  train->add_option("--weight-decay", tc.adam.weight_decay);
  train->add_option("--margin", tc.margin);
  train->add_option("--label-smoothing", tc.label_smoothing);
  train->add_option("--augment", tc.augment_enabled, "flip + random erasing");
  train->add_option("--flip-prob", tc.augment.flip_prob);
  train->add_option("--erase-prob", tc.augment.erase_prob);
  train->add_option("--seed", tc.seed);
  train->add_option("--checkpoint-every", to.checkpoint_every, "epochs between checkpoints (0: final only)");
  train->add_option("--eval-every", to.eval_every, "epochs between evaluations (0: never)");

  EvalOptions eo;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset's query/gallery split");
  eval->add_option("--checkpoint", eo.checkpoint);
  eval->add_option("--data", eo.data, "dataset directory")->required();
  eval->add_option("--out", eo.out, "output directory");
  eval->add_option("--max-rank", eo.max_rank)->check(CLI::PositiveNumber);
  eval->add_option("--oracle-embeddings", eo.oracle_embeddings)->group("");  // test fixture

  VerifyOptions vo, go;
  auto* verify = app.add_subcommand("verify", "run the property suite");
  verify->add_option("--out", vo.out);
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "run the finite-difference gradient checks");
  gradcheck_cmd->add_option("--out", go.out);

  try {
    // First pass only locates --config and the command.
    std::vector<std::string> argv(args.rbegin(), args.rend());
    std::string command;
    for (std::size_t i = 0; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
      if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
      if (command.empty() && (args[i] == "synth" || args[i] == "train" || args[i] == "eval" || args[i] == "verify" ||
                              args[i] == "gradcheck"))
        command = args[i];
    }
    if (!config_path.empty() && !command.empty()) {
      auto extra = detail::config_arguments(config_path, app, command);
      std::vector<std::string> merged;
      bool placed = false;
      for (const auto& a : args) {
        merged.push_back(a);
        if (!placed && a == command) {
          merged.insert(merged.end(), extra.begin(), extra.end());
          placed = true;
        }
      }
      argv.assign(merged.rbegin(), merged.rend());
    }
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    std::string* out_flag = name == "synth" ? &so.out
                            : name == "train" ? &to.out
                            : name == "eval" ? &eo.out
                            : name == "verify" ? &vo.out
                                               : &go.out;
    *out_flag = resolve_out_dir(*out_flag, name == "synth" ? "dataset" : name);
    detail::ensure_dir(*out_flag);
    detail::write_resolved_config(*sub, *out_flag);
    if (name == "synth") return run_synth(so, out);
    if (name == "train") return run_train(to, out);
    if (name == "eval") return run_eval(eo, out);
    if (name == "verify") return run_verify(vo, false, out);
    return run_verify(go, true, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
}

inline int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args);
}

}  // namespace cstnet::cli
