// affect: command-line driver (synth, train, eval, score, gradcheck, ablate).
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <ranges>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

#include "affect/data.hpp"
#include "affect/error.hpp"
#include "affect/model.hpp"
#include "affect/objectives.hpp"
#include "affect/suite.hpp"
#include "affect/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace affect;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

// --- configuration -------------------------------------------------------

struct RunConfig {
  model::ModelConfig model;
  train::TrainConfig train;
  bool streams_given = false;
};

json defaults_json() { return {{"model", model::ModelConfig{}}, {"train", train::TrainConfig{}}}; }

// Rejects keys the configuration does not know, so typos never pass silently.
void check_keys(const json& j, const json& reference, const std::string& prefix) {
  if (!j.is_object()) throw ConfigError("config: '" + prefix + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!reference.contains(key)) throw ConfigError("config: unknown key '" + path + "'");
    if (prefix.empty()) check_keys(value, reference.at(key), path);
  }
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const auto keys = split(assignment.substr(0, eq), '.');
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &j;
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) node = &(*node)[keys[i]];
  (*node)[keys.back()] = value;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  check_keys(j, defaults_json(), "");
  RunConfig rc;
  try {
    if (j.contains("model")) {
      rc.model = j.at("model").get<model::ModelConfig>();
      rc.streams_given = j.at("model").contains("streams");
    }
    if (j.contains("train")) rc.train = j.at("train").get<train::TrainConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return rc;
}

// Streams default to every stream in the bank; given streams must match it.
void resolve_streams(RunConfig& rc, const data::FeatureBank& bank) {
  if (!rc.streams_given) {
    rc.model.streams = bank.streams();
    return;
  }
  for (const auto& s : rc.model.streams) {
    if (!bank.has_stream(s.name)) throw ConfigError("stream '" + s.name + "' is not in the bank");
    if (bank.stream(s.name).dim != s.dim) {
      throw ConfigError(fmt::format("stream '{}' has dim {} in the config but {} in the bank", s.name, s.dim,
                                    bank.stream(s.name).dim));
    }
  }
}

std::vector<std::string> stream_names(const model::ModelConfig& c) {
  std::vector<std::string> names;
  for (const auto& s : c.streams) names.push_back(s.name);
  return names;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// --- subcommands ---------------------------------------------------------

struct SynthArgs {
  std::uint64_t seed = 0;
  std::size_t frames = 2000;
  std::string streams = "fau:17,resnet18:512";
  std::string signal;
  std::string out;
  std::string format = "text";
  double noise = 0.1;
  std::size_t latent_dim = 12;
  bool force = false;
};

int cmd_synth(const SynthArgs& a) {
  if (a.frames == 0) throw ConfigError("--frames must be >= 1");
  data::SynthSpec spec;
  spec.seed = a.seed;
  spec.frames = a.frames;
  spec.noise = a.noise;
  spec.latent_dim = a.latent_dim;
  const auto signal = split(a.signal, ',');
  for (const auto& item : split(a.streams, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("--streams entry '" + item + "' is not name:dim");
    data::SynthStream s;
    s.spec.name = item.substr(0, colon);
    try {
      s.spec.dim = std::stoul(item.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("--streams entry '" + item + "' has a bad dimension");
    }
    s.carries_signal = signal.empty() || std::find(signal.begin(), signal.end(), s.spec.name) != signal.end();
    spec.streams.push_back(s);
  }
  for (const auto& name : signal) {
    if (std::none_of(spec.streams.begin(), spec.streams.end(), [&](const auto& s) { return s.spec.name == name; })) {
      throw ConfigError("--signal names unknown stream '" + name + "'");
    }
  }
  const auto format = a.format == "binary" ? data::FeatureFormat::kBinary : data::FeatureFormat::kText;
  const auto synth = data::synth_generate(spec);
  const auto files = data::write_dataset(a.out, synth.bank, synth.labels, format, a.force);
  for (const auto& f : files) std::cout << f.string() << '\n';
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string data;
  std::string out;
  std::string task;
};

int cmd_train(const TrainArgs& a) {
  auto overrides = a.overrides;
  if (!a.task.empty()) overrides.push_back("train.task=" + a.task);
  RunConfig rc = load_config(a.config, overrides);
  const data::FeatureBank bank = data::load_bank(a.data);
  const data::LabelSet labels = data::load_manifest_labels(a.data);
  resolve_streams(rc, bank);
  rc.model.validate();
  fs::create_directories(a.out);
  rc.train.checkpoint_path = (fs::path(a.out) / "best.ckpt").string();
  rc.train.runlog_path = (fs::path(a.out) / "runlog.jsonl").string();
  rc.train.validate();

  const json effective{{"model", rc.model}, {"train", rc.train}, {"data", a.data}};
  std::cout << effective.dump(2) << '\n';
  write_text(fs::path(a.out) / "config.json", effective.dump(2) + "\n");

  const auto names = stream_names(rc.model);
  const auto split = train::split_dataset(bank, labels, names, rc.model.window, rc.train.stride, rc.train.val_fraction);
  const auto result = train::train(model::FusionModel(rc.model), split.train, split.val, rc.train);
  const auto& log = result.log;
  write_text(fs::path(a.out) / "report.txt", log.best_report.to_kv());
  std::cout << fmt::format("best epoch {}: {}\n", log.best_epoch, log.best_report.to_line());
  std::cout << fmt::format("train loss {} -> {}\n", obj::format_metric(log.initial_loss),
                           obj::format_metric(log.final_loss));
  if (!log.converged) {
    std::cerr << fmt::format("not converged: final loss {} is above {} of the initial loss {}\n",
                             obj::format_metric(log.final_loss), obj::format_metric(1.0 - rc.train.min_loss_drop),
                             obj::format_metric(log.initial_loss));
    return kFailure;
  }
  return kOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "val";
  std::string format = "table";
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  const auto ckpt = model::load_checkpoint(a.checkpoint);
  const auto& mc = ckpt.model.config();
  train::TrainConfig tc;
  if (ckpt.metadata.contains("train")) tc = ckpt.metadata.at("train").get<train::TrainConfig>();
  const data::FeatureBank bank = data::load_bank(a.data);
  const data::LabelSet labels = data::load_manifest_labels(a.data);
  for (const auto& s : mc.streams) {
    if (!bank.has_stream(s.name) || bank.stream(s.name).dim != s.dim) {
      throw ConfigError(fmt::format("checkpoint stream {}:{} does not match the bank ({})", s.name, s.dim,
                                    fmt::join(bank.streams() | std::views::transform([](const auto& b) {
                                                return fmt::format("{}:{}", b.name, b.dim);
                                              }),
                                              ",")));
    }
  }
  const auto names = stream_names(mc);
  train::Dataset ds;
  if (a.split == "all") {
    const auto frames = bank.aligned_frames(names);
    ds = {&bank, data::windows(frames, labels, mc.window, mc.window, "all")};
  } else {
    auto sp = train::split_dataset(bank, labels, names, mc.window, tc.stride, tc.val_fraction);
    ds = a.split == "train" ? std::move(sp.train) : std::move(sp.val);
  }
  const auto report = train::evaluate(ckpt.model, ds, tc.au_threshold);
  if (a.format == "kv") {
    std::cout << report.to_kv();
  } else {
    const train::AblationRow row{fmt::format("{}", fmt::join(names, "+")), names, report};
    std::cout << train::render_table(std::span(&row, 1));
  }
  if (!a.out.empty()) write_text(a.out, report.to_kv());
  return kOk;
}

int cmd_score(const std::vector<double>& m) {
  std::cout << obj::format_metric(obj::challenge_score(m[0], m[1], m[2], m[3])) << '\n';
  return kOk;
}

struct GradcheckArgs {
  std::vector<std::string> ops;
  double tol = 1e-4;
  double step = 1e-5;
  std::size_t seeds = 100;
  std::uint64_t base_seed = 0;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  verify::SuiteOptions o;
  o.ops = a.ops;
  o.tol = a.tol;
  o.step = a.step;
  o.seeds = a.seeds;
  o.base_seed = a.base_seed;
  bool ok = true;
  for (const auto& r : verify::run_gradcheck_suite(o)) {
    std::cout << fmt::format("{:<12} seeds={} failed={} max_rel_error={:.3e} worst_seed={} worst_param={} {}\n", r.op,
                             r.seeds_run, r.seeds_failed, r.max_rel_error, r.worst_seed, r.worst_param,
                             r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
  }
  std::cout << (ok ? "gradcheck: all ops pass" : "gradcheck: failures") << fmt::format(" at tol {:g}\n", a.tol);
  return ok ? kOk : kFailure;
}

struct AblateArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string data;
  std::string subsets;
  std::string out;
};

int cmd_ablate(const AblateArgs& a) {
  RunConfig rc = load_config(a.config, a.overrides);
  const data::FeatureBank bank = data::load_bank(a.data);
  const data::LabelSet labels = data::load_manifest_labels(a.data);
  std::vector<std::vector<std::string>> subsets;
  for (const auto& group : split(a.subsets, ';')) subsets.push_back(split(group, ','));
  rc.model.streams = bank.streams();
  rc.model.validate();
  rc.train.validate();
  const json effective{{"model", rc.model}, {"train", rc.train}, {"data", a.data}, {"subsets", subsets}};
  std::cout << effective.dump(2) << '\n';
  const auto rows = train::ablation_run(bank, labels, subsets, rc.model, rc.train);
  const std::string table = train::render_table(rows);
  std::cout << table;
  if (!a.out.empty()) write_text(a.out, table);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"affect: multi-stream affect recognition toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write a planted-signal synthetic dataset");
  s->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  s->add_option("--frames", synth.frames, "Number of frames")->capture_default_str();
  s->add_option("--streams", synth.streams, "Comma-separated name:dim list")->capture_default_str();
  s->add_option("--signal", synth.signal, "Comma-separated streams carrying the signal (default: all)");
  s->add_option("--noise", synth.noise, "Gaussian noise sd on features")->capture_default_str();
  s->add_option("--latent-dim", synth.latent_dim, "Latent dimension (>= 8)")->capture_default_str();
  s->add_option("--format", synth.format, "Feature file format")
      ->check(CLI::IsMember({"text", "binary"}))
      ->capture_default_str();
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_flag("--force", synth.force, "Overwrite existing files");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a fusion model and keep the best checkpoint");
  t->add_option("--config", tr.config, "JSON config file {\"model\": {...}, \"train\": {...}}");
  t->add_option("--set", tr.overrides, "Dotted override, e.g. train.lr=0.001 (repeatable)");
  t->add_option("--task", tr.task, "Shortcut for --set train.task=...")->check(CLI::IsMember({"va", "expr", "au", "all"}));
  t->add_option("--data", tr.data, "Dataset manifest")->required();
  t->add_option("--out", tr.out, "Output directory for checkpoint, run log and report")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Dataset manifest")->required();
  e->add_option("--split", ev.split, "Frames to evaluate")
      ->check(CLI::IsMember({"val", "train", "all"}))
      ->capture_default_str();
  e->add_option("--format", ev.format, "Output format")->check(CLI::IsMember({"table", "kv"}))->capture_default_str();
  e->add_option("--out", ev.out, "Also write a key=value report here");

  std::vector<double> metrics;
  auto* sc = app.add_subcommand("score", "Challenge score (V + A) / 2 + FER + AU");
  sc->add_option("metrics", metrics, "VALENCE AROUSAL FER AU")->expected(4)->required();

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  g->add_option("--op", gc.ops, "Restrict to these cases (repeatable)");
  g->add_option("--tol", gc.tol, "Relative error tolerance")->capture_default_str();
  g->add_option("--step", gc.step, "Central-difference step")->capture_default_str();
  g->add_option("--seeds", gc.seeds, "Random instances per case")->capture_default_str();
  g->add_option("--base-seed", gc.base_seed, "First seed")->capture_default_str();
  g->add_flag_callback("--list", [] {
    for (const auto& op : verify::suite_ops()) std::cout << op << '\n';
    std::exit(kOk);
  }, "List case names and exit");

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "Train and rank one model per feature subset");
  a->add_option("--config", ab.config, "JSON config file");
  a->add_option("--set", ab.overrides, "Dotted override (repeatable)");
  a->add_option("--data", ab.data, "Dataset manifest")->required();
  a->add_option("--subsets", ab.subsets, "Subsets separated by ';', streams by ',' (e.g. \"a;a,b;b\")")->required();
  a->add_option("--out", ab.out, "Also write the table here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }

  try {
    if (s->parsed()) return cmd_synth(synth);
    if (t->parsed()) return cmd_train(tr);
    if (e->parsed()) return cmd_eval(ev);
    if (sc->parsed()) return cmd_score(metrics);
    if (g->parsed()) return cmd_gradcheck(gc);
    if (a->parsed()) return cmd_ablate(ab);
  } catch (const DataError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsage;
  } catch (const std::invalid_argument& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
