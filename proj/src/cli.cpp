#include "semg/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "semg/bench.hpp"
#include "semg/dataset.hpp"
#include "semg/dsp.hpp"
#include "semg/features.hpp"
#include "semg/io.hpp"
#include "semg/nn.hpp"
#include "semg/rng.hpp"
#include "semg/train.hpp"

namespace semg::cli {

int exit_code_for(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidBand:
    case ErrorCode::TooFewLayers:
    case ErrorCode::WindowTooShort:
    case ErrorCode::DegenerateBand:
      return kExitUsage;
    case ErrorCode::StaleCache:
    case ErrorCode::IoError:
    case ErrorCode::ZeroBaseline:
      return kExitRuntime;
    default:
      return kExitData;
  }
}

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using io::file_fnv1a_hex;
using io::format_double;
using io::read_file;
using io::write_text;
using train::ModelKind;
using train::RetrainScope;
using train::Samples;

// Seed tags shared with the LOSO driver so a standalone pretrain reproduces a fold.
constexpr std::uint64_t kPrepareTag = 1;
constexpr std::uint64_t kInitTag = 2;
constexpr std::uint64_t kPretrainTag = 3;
constexpr std::uint64_t kSubjectTag = 4;
constexpr std::uint64_t kFinetuneTag = 5;

[[noreturn]] void usage(const std::string& msg) { throw Error(ErrorCode::InvalidConfig, msg); }

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  const auto bytes = read_file(path);
  json j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object()) usage("config " + path + " is not a JSON object");
  return j;
}

/// Flags win over the config, except that a disagreeing model kind is refused.
train::PipelineConfig resolve_pipeline(json cfg, const std::optional<std::string>& model_flag) {
  if (model_flag) {
    if (cfg.contains("model") && cfg["model"] != *model_flag) {
      usage("--model " + *model_flag + " conflicts with config model " + cfg["model"].dump());
    }
    cfg["model"] = *model_flag;
  }
  train::PipelineConfig p;
  p = cfg.get<train::PipelineConfig>();
  p.preprocess.validate();
  p.features.validate();
  return p;
}

struct TrainOverrides {
  std::optional<int> max_epochs;
  std::optional<int> patience;
  std::optional<double> lr;

  void add_to(CLI::App* app) {
    app->add_option("--max-epochs", max_epochs, "Epoch cap")->check(CLI::NonNegativeNumber);
    app->add_option("--patience", patience, "Early-stopping patience")->check(CLI::PositiveNumber);
    app->add_option("--lr", lr, "Adam learning rate")->check(CLI::PositiveNumber);
  }
  void apply(train::TrainConfig& t) const {
    if (max_epochs) t.max_epochs = *max_epochs;
    if (patience) t.patience = *patience;
    if (lr) t.adam.learning_rate = *lr;
    t.validate();
  }
};

void require_input(const std::string& path) {
  if (!fs::is_regular_file(path)) throw Error(ErrorCode::MissingFile, "no such file: " + path);
}

void prepare_output_file(const fs::path& path) {
  if (fs::is_directory(path)) usage("output " + path.string() + " is a directory");
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + path.parent_path().string() + ": " + ec.message());
}

void prepare_output_dir(const fs::path& path) {
  if (fs::exists(path) && !fs::is_directory(path)) usage("output " + path.string() + " is not a directory");
  std::error_code ec;
  fs::create_directories(path, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + path.string() + ": " + ec.message());
}

fs::path companion(const fs::path& file, const std::string& suffix) {
  return file.parent_path() / (file.stem().string() + suffix);
}

std::set<int> to_set(const std::vector<int>& v) { return {v.begin(), v.end()}; }

void check_training_reps(const std::set<int>& reps, int repetition_count) {
  if (reps.empty()) usage("--reps must name at least one repetition");
  for (int r : reps) {
    if (r == train::kTestRepetition) {
      usage("repetition " + std::to_string(train::kTestRepetition) + " is reserved for testing");
    }
    if (r < 1 || r > repetition_count) {
      usage("repetition " + std::to_string(r) + " outside 1.." + std::to_string(repetition_count));
    }
  }
}

std::size_t find_subject(const Dataset& d, int id) {
  for (std::size_t i = 0; i < d.recordings.size(); ++i) {
    if (d.recordings[i].subject_id == id) return i;
  }
  throw Error(ErrorCode::UnknownSubject, "subject " + std::to_string(id) + " is not in the dataset");
}

Samples subject_samples(const Dataset& d, std::size_t i, const train::PipelineConfig& p, std::uint64_t seed) {
  std::set<int> all;
  for (int r = 1; r <= d.manifest.repetition_count; ++r) all.insert(r);
  const Recording& rec = d.recordings[i];
  return train::prepare_samples(rec, all, p, d.manifest.rest_is_class,
                                derive_seed(seed, {kPrepareTag, static_cast<std::uint64_t>(rec.subject_id)}));
}

Samples scaled(Samples s, const train::Scaler& scaler) {
  if (!scaler.empty()) scaler.apply(s);
  return s;
}

std::string join(const auto& values) {
  std::string s;
  for (const auto& v : values) {
    if (!s.empty()) s += ',';
    s += std::to_string(v);
  }
  return s;
}

/// Resolved parameters, seeds and content hashes of every input and output.
struct RunManifest {
  json j;

  explicit RunManifest(std::string command) {
    j = {{"command", std::move(command)}, {"parameters", json::object()}, {"seeds", json::object()},
         {"inputs", json::object()}, {"outputs", json::object()}};
  }
  void input(const std::string& role, const fs::path& p) {
    j["inputs"][role] = json{{"file", p.filename().string()}, {"fnv1a", file_fnv1a_hex(p)}};
  }
  void output(const fs::path& p, const fs::path& base) {
    j["outputs"][fs::relative(p, base).generic_string()] = file_fnv1a_hex(p);
  }
  void write(const fs::path& p) const { write_text(p, j.dump(2) + "\n"); }
};

void input_dataset(RunManifest& m, const std::string& manifest_path, const Dataset& d) {
  m.input("manifest", manifest_path);
  const fs::path dir = fs::path(manifest_path).parent_path();
  for (const auto& s : d.manifest.subjects) m.input("subject_" + std::to_string(s.id), dir / s.file);
}

json checkpoint_extra(const train::PipelineConfig& p, const train::Scaler& scaler, const Dataset& d) {
  return {{"model", train::to_string(p.model)},
          {"pipeline", p},
          {"scaler", scaler},
          {"rest_is_class", d.manifest.rest_is_class},
          {"dataset", d.manifest.name}};
}

void write_history(const fs::path& path, const train::TrainHistory& h) {
  std::ostringstream os;
  write_history_csv(os, h);
  write_text(path, os.str());
}

void print_history(std::ostream& out, const train::TrainHistory& h) {
  out << "epochs: " << h.records.size() << "\n";
  if (h.best_epoch >= 0) {
    const auto& best = h.records[static_cast<std::size_t>(h.best_epoch)];
    out << "best epoch: " << h.best_epoch << " val_loss " << format_double(best.val_loss) << " val_acc "
        << format_double(best.val_accuracy) << "\n";
  }
}

// ---- synth ---------------------------------------------------------------------------------

struct SynthArgs {
  SynthConfig cfg;
  std::string out;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  a.cfg.validate();
  const fs::path dir = a.out;
  prepare_output_dir(dir);
  const auto manifest_path = write_dataset(dir, synthetic_manifest(a.cfg), synthesize_dataset(a.cfg));

  RunManifest m("synth");
  m.j["parameters"] = {{"subjects", a.cfg.subjects},     {"classes", a.cfg.classes},
                       {"repetitions", a.cfg.repetitions}, {"channels", a.cfg.channels},
                       {"fs_hz", a.cfg.fs_hz},           {"movement_s", a.cfg.movement_s},
                       {"rest_s", a.cfg.rest_s},         {"subject_variability", a.cfg.subject_variability}};
  m.j["seeds"]["master"] = a.cfg.seed;
  const DatasetManifest written = load_manifest(manifest_path);
  m.output(manifest_path, dir);
  for (const auto& s : written.subjects) m.output(dir / s.file, dir);
  m.write(dir / "run_manifest.json");
  out << manifest_to_json(written) << "\n";
  return kExitSuccess;
}

// ---- pretrain / train-subject --------------------------------------------------------------

struct PretrainArgs {
  std::string manifest;
  std::optional<int> exclude;
  std::optional<std::string> model;
  std::string config;
  std::string out_ckpt;
  std::optional<std::uint64_t> seed;
  TrainOverrides overrides;
};

int cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
  require_input(a.manifest);
  const fs::path ckpt_path = a.out_ckpt;
  prepare_output_file(ckpt_path);
  train::PipelineConfig p = resolve_pipeline(read_config(a.config), a.model);
  a.overrides.apply(p.train);
  const std::uint64_t seed = a.seed.value_or(p.train.seed);

  const Dataset d = load_dataset(a.manifest);
  std::optional<std::size_t> held;
  if (a.exclude) held = find_subject(d, *a.exclude);
  if (held && d.recordings.size() < 2) {
    throw Error(ErrorCode::InsufficientData, "excluding the only subject leaves nothing to pretrain on");
  }
  const auto h = static_cast<std::uint64_t>(a.exclude.value_or(0));

  Samples pre;
  const auto reps = bench::pretrain_repetitions(d.manifest.repetition_count);
  for (std::size_t i = 0; i < d.recordings.size(); ++i) {
    if (held && i == *held) continue;
    const Samples s = subject_samples(d, i, p, seed);
    pre.append(s.subset(train::select_repetitions(s, reps)));
  }
  train::Scaler scaler;
  if (p.model == ModelKind::Features) scaler = train::Scaler::fit(pre);
  pre = scaled(std::move(pre), scaler);

  const auto spec =
      train::default_spec(p.model, pre.shape, static_cast<std::size_t>(d.manifest.output_classes()));
  train::TrainConfig tc = p.train;
  tc.scope = RetrainScope::All;
  tc.seed = derive_seed(seed, {kPretrainTag, h});
  const auto init_seed = derive_seed(seed, {kInitTag, h, 0});
  auto result = train::train(nn::build_network(spec, init_seed), pre, tc);

  nn::CheckpointMetadata meta;
  meta.seed = seed;
  meta.epochs = static_cast<int>(result.history.records.size());
  meta.source_tag = a.exclude ? "pretrain-exclude-" + std::to_string(*a.exclude) : "pretrain-all";
  meta.extra = checkpoint_extra(p, scaler, d);
  nn::save_checkpoint(nn::make_checkpoint(result.net, meta), ckpt_path);
  const fs::path history_path = companion(ckpt_path, ".history.csv");
  result.history.source_tag = meta.source_tag;
  write_history(history_path, result.history);

  RunManifest m("pretrain");
  m.j["parameters"] = {{"pipeline", p}, {"network", spec}, {"pretrain_repetitions", reps}};
  m.j["parameters"]["exclude_subject"] = a.exclude ? json(*a.exclude) : json(nullptr);
  m.j["seeds"] = {{"master", seed}, {"init", init_seed}, {"train", tc.seed}};
  input_dataset(m, a.manifest, d);
  m.j["samples"] = pre.size();
  m.output(ckpt_path, ckpt_path.parent_path());
  m.output(history_path, ckpt_path.parent_path());
  m.write(companion(ckpt_path, ".run_manifest.json"));

  out << "pretrained " << meta.source_tag << " on " << pre.size() << " samples\n";
  print_history(out, result.history);
  return kExitSuccess;
}

struct SubjectArgs {
  std::string manifest;
  int subject = 0;
  std::vector<int> reps;
  std::optional<std::string> model;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  TrainOverrides overrides;
};

int cmd_train_subject(const SubjectArgs& a, std::ostream& out) {
  require_input(a.manifest);
  const fs::path ckpt_path = a.out;
  prepare_output_file(ckpt_path);
  train::PipelineConfig p = resolve_pipeline(read_config(a.config), a.model);
  a.overrides.apply(p.train);
  const std::uint64_t seed = a.seed.value_or(p.train.seed);

  const Dataset d = load_dataset(a.manifest);
  const std::size_t i = find_subject(d, a.subject);
  const std::set<int> reps =
      a.reps.empty() ? bench::pretrain_repetitions(d.manifest.repetition_count) : to_set(a.reps);
  check_training_reps(reps, d.manifest.repetition_count);

  const Samples all = subject_samples(d, i, p, seed);
  const auto idx = train::select_repetitions(all, reps);
  if (idx.empty()) throw Error(ErrorCode::EmptySplit, "no samples in repetitions " + join(reps));
  Samples data = all.subset(idx);
  train::Scaler scaler;
  if (p.model == ModelKind::Features) scaler = train::Scaler::fit(data);
  data = scaled(std::move(data), scaler);

  const auto h = static_cast<std::uint64_t>(a.subject);
  const auto k = static_cast<std::uint64_t>(reps.size());
  const auto spec =
      train::default_spec(p.model, data.shape, static_cast<std::size_t>(d.manifest.output_classes()));
  train::TrainConfig tc = p.train;
  tc.scope = RetrainScope::All;
  tc.seed = derive_seed(seed, {kSubjectTag, h, k});
  const auto init_seed = derive_seed(seed, {kInitTag, h, k});
  auto result = train::train(nn::build_network(spec, init_seed), data, tc);

  nn::CheckpointMetadata meta;
  meta.seed = seed;
  meta.epochs = static_cast<int>(result.history.records.size());
  meta.source_tag = "subject-" + std::to_string(a.subject);
  meta.extra = checkpoint_extra(p, scaler, d);
  nn::save_checkpoint(nn::make_checkpoint(result.net, meta), ckpt_path);
  const fs::path history_path = companion(ckpt_path, ".history.csv");
  result.history.source_tag = meta.source_tag;
  write_history(history_path, result.history);

  RunManifest m("train-subject");
  m.j["parameters"] = {{"pipeline", p}, {"network", spec}, {"subject", a.subject}, {"repetitions", reps}};
  m.j["seeds"] = {{"master", seed}, {"init", init_seed}, {"train", tc.seed}};
  input_dataset(m, a.manifest, d);
  m.j["samples"] = data.size();
  m.output(ckpt_path, ckpt_path.parent_path());
  m.output(history_path, ckpt_path.parent_path());
  m.write(companion(ckpt_path, ".run_manifest.json"));

  out << "trained subject " << a.subject << " on repetitions " << join(reps) << " (" << data.size()
      << " samples)\n";
  print_history(out, result.history);
  return kExitSuccess;
}

// ---- finetune / evaluate -------------------------------------------------------------------

struct LoadedModel {
  nn::NetworkCheckpoint ckpt;
  train::PipelineConfig pipeline;
  train::Scaler scaler;
};

LoadedModel load_model(const std::string& path) {
  require_input(path);
  LoadedModel lm{nn::load_checkpoint(path), {}, {}};
  const json& extra = lm.ckpt.metadata.extra;
  try {
    if (extra.contains("pipeline")) {
      lm.pipeline = extra.at("pipeline").get<train::PipelineConfig>();
    } else if (extra.contains("model")) {
      lm.pipeline.model = train::parse_model_kind(extra.at("model").get<std::string>());
    }
    if (extra.contains("scaler")) lm.scaler = extra.at("scaler").get<train::Scaler>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, path + ": " + e.what());
  }
  return lm;
}

void check_fits(const LoadedModel& lm, const Dataset& d, const Samples& s) {
  if (lm.ckpt.spec.input != s.shape ||
      lm.ckpt.spec.classes() != static_cast<std::size_t>(d.manifest.output_classes())) {
    throw Error(ErrorCode::ShapeMismatch, "checkpoint network does not fit this dataset");
  }
  const json& extra = lm.ckpt.metadata.extra;
  if (extra.contains("rest_is_class") && extra["rest_is_class"] != d.manifest.rest_is_class) {
    throw Error(ErrorCode::ShapeMismatch, "checkpoint and dataset disagree on whether rest is a class");
  }
}

struct FinetuneArgs {
  std::string ckpt;
  std::string manifest;
  int subject = 0;
  std::vector<int> reps;
  std::string scope = "all";
  std::string out;
  std::optional<std::uint64_t> seed;
  TrainOverrides overrides;
};

int cmd_finetune(const FinetuneArgs& a, std::ostream& out) {
  require_input(a.manifest);
  const fs::path out_path = a.out;
  prepare_output_file(out_path);
  const RetrainScope scope = train::parse_scope(a.scope);
  LoadedModel lm = load_model(a.ckpt);
  train::TrainConfig tc = lm.pipeline.train;
  a.overrides.apply(tc);
  const std::uint64_t seed = a.seed.value_or(lm.ckpt.metadata.seed);

  const Dataset d = load_dataset(a.manifest);
  const std::size_t i = find_subject(d, a.subject);
  const std::set<int> reps = to_set(a.reps);
  check_training_reps(reps, d.manifest.repetition_count);
  const Samples data = scaled(subject_samples(d, i, lm.pipeline, seed), lm.scaler);
  check_fits(lm, d, data);

  tc.scope = scope;
  tc.seed = derive_seed(seed, {kFinetuneTag, static_cast<std::uint64_t>(a.subject),
                               static_cast<std::uint64_t>(reps.size()), static_cast<std::uint64_t>(scope)});
  auto result = train::fine_tune(lm.ckpt, data, reps, tc);

  nn::CheckpointMetadata meta = lm.ckpt.metadata;
  meta.seed = seed;
  meta.epochs = static_cast<int>(result.history.records.size());
  meta.source_tag = "finetune-subject-" + std::to_string(a.subject) + "-from-" + lm.ckpt.metadata.source_tag;
  nn::save_checkpoint(nn::make_checkpoint(result.net, meta), out_path);
  const fs::path history_path = companion(out_path, ".history.csv");
  write_history(history_path, result.history);

  RunManifest m("finetune");
  m.j["parameters"] = {{"train", tc},
                       {"subject", a.subject},
                       {"repetitions", reps},
                       {"scope", train::to_string(scope)},
                       {"source_tag", lm.ckpt.metadata.source_tag},
                       {"frozen_layers", result.history.frozen_layers}};
  m.j["seeds"] = {{"master", seed}, {"train", tc.seed}};
  m.input("checkpoint", a.ckpt);
  input_dataset(m, a.manifest, d);
  m.output(out_path, out_path.parent_path());
  m.output(history_path, out_path.parent_path());
  m.write(companion(out_path, ".run_manifest.json"));

  out << "fine-tuned " << lm.ckpt.metadata.source_tag << " on subject " << a.subject << " repetitions "
      << join(reps) << " scope " << train::to_string(scope) << "\n";
  out << "frozen layers: " << (result.history.frozen_layers.empty() ? "none" : join(result.history.frozen_layers))
      << "\n";
  print_history(out, result.history);
  return kExitSuccess;
}

struct EvaluateArgs {
  std::string ckpt;
  std::string manifest;
  int subject = 0;
  std::vector<int> reps{train::kTestRepetition};
  std::string out;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  require_input(a.manifest);
  if (!a.out.empty()) prepare_output_file(a.out);
  LoadedModel lm = load_model(a.ckpt);
  const Dataset d = load_dataset(a.manifest);
  const std::size_t i = find_subject(d, a.subject);
  const std::set<int> reps = to_set(a.reps);
  if (reps.empty()) usage("--reps must name at least one repetition");
  const Samples all = scaled(subject_samples(d, i, lm.pipeline, lm.ckpt.metadata.seed), lm.scaler);
  check_fits(lm, d, all);
  const Samples test = all.subset(train::select_repetitions(all, reps));
  nn::Network net = nn::restore_network(lm.ckpt);
  const auto ev = bench::evaluate(net, test);

  out << "accuracy: " << format_double(ev.accuracy) << " (" << ev.total << " samples)\n";
  out << "confusion (rows true, columns predicted):\n";
  for (const auto& row : ev.confusion) out << join(row) << "\n";
  if (!a.out.empty()) {
    const fs::path path = a.out;
    const json result = {{"subject", a.subject},
                         {"repetitions", reps},
                         {"source_tag", lm.ckpt.metadata.source_tag},
                         {"accuracy", ev.accuracy},
                         {"total", ev.total},
                         {"confusion", ev.confusion}};
    write_text(path, result.dump(2) + "\n");
    RunManifest m("evaluate");
    m.j["parameters"] = {{"subject", a.subject}, {"repetitions", reps}};
    m.input("checkpoint", a.ckpt);
    input_dataset(m, a.manifest, d);
    m.output(path, path.parent_path());
    m.write(companion(path, ".run_manifest.json"));
  }
  return kExitSuccess;
}

// ---- loso ----------------------------------------------------------------------------------

struct LosoArgs {
  std::string manifest;
  std::optional<std::string> model;
  std::string config;
  std::vector<int> reps_sweep;
  std::vector<std::string> scope_sweep;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> jobs;
  std::vector<int> folds;
  std::string out_dir;
  TrainOverrides overrides;
};

json audit_summary(const bench::Audit& audit, const std::vector<std::string>& violations) {
  json entries = json::array();
  for (const auto& e : audit.entries) {
    std::set<int> subjects, repetitions;
    for (const auto& p : e.samples) {
      subjects.insert(p.subject);
      repetitions.insert(p.owner_repetition);
    }
    entries.push_back({{"fold_subject", e.fold_subject},
                       {"stage", e.stage},
                       {"reps_used", e.reps_used},
                       {"scope", train::to_string(e.scope)},
                       {"samples", e.samples.size()},
                       {"subjects", subjects},
                       {"owner_repetitions", repetitions}});
  }
  return {{"entries", entries}, {"violations", violations}};
}

int cmd_loso(const LosoArgs& a, std::ostream& out, std::ostream& err) {
  require_input(a.manifest);
  const fs::path dir = a.out_dir;
  prepare_output_dir(dir);
  const json cfg = read_config(a.config);
  json pipeline_json = cfg;
  for (const char* key : {"reps_sweep", "scope_sweep", "seed", "jobs", "folds"}) pipeline_json.erase(key);

  bench::LosoConfig lc;
  lc.pipeline = resolve_pipeline(pipeline_json, a.model);
  a.overrides.apply(lc.pipeline.train);
  try {
    if (cfg.contains("reps_sweep")) lc.reps_sweep = cfg.at("reps_sweep").get<std::vector<int>>();
    if (cfg.contains("scope_sweep")) {
      lc.scope_sweep.clear();
      for (const auto& s : cfg.at("scope_sweep")) lc.scope_sweep.push_back(train::parse_scope(s.get<std::string>()));
    }
    lc.seed = cfg.value("seed", lc.pipeline.train.seed);
    lc.jobs = cfg.value("jobs", lc.jobs);
    if (cfg.contains("folds")) lc.folds = cfg.at("folds").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    usage(std::string("loso config: ") + e.what());
  }
  if (!a.reps_sweep.empty()) lc.reps_sweep = a.reps_sweep;
  if (!a.scope_sweep.empty()) {
    lc.scope_sweep.clear();
    for (const auto& s : a.scope_sweep) lc.scope_sweep.push_back(train::parse_scope(s));
  }
  if (a.seed) lc.seed = *a.seed;
  if (a.jobs) lc.jobs = *a.jobs;
  if (!a.folds.empty()) lc.folds = a.folds;

  const Dataset d = load_dataset(a.manifest);
  const bench::LosoRun run = bench::run_loso(d, lc);
  const auto files = bench::export_report(run.report, dir);
  const auto violations = bench::audit_violations(run.audit);
  const fs::path audit_path = dir / "audit.json";
  write_text(audit_path, audit_summary(run.audit, violations).dump(2) + "\n");

  RunManifest m("loso");
  std::vector<std::string> scopes;
  for (auto s : lc.scope_sweep) scopes.push_back(train::to_string(s));
  m.j["parameters"] = {{"pipeline", lc.pipeline},
                       {"reps_sweep", lc.reps_sweep},
                       {"scope_sweep", scopes},
                       {"folds", lc.folds},
                       {"jobs", lc.jobs}};
  m.j["seeds"]["master"] = lc.seed;
  input_dataset(m, a.manifest, d);
  for (const auto& f : files) m.output(f, dir);
  m.output(audit_path, dir);
  m.write(dir / "run_manifest.json");

  out << "model,repetitions,scope,subject_specific,before_retraining,after_retraining,change_accuracy\n";
  for (const auto& ag : run.report.aggregates) {
    out << train::to_string(run.report.model_kind) << ',' << ag.reps_used << ',' << train::to_string(ag.scope) << ','
        << format_double(ag.mean_subject_specific) << ',' << format_double(ag.mean_pretrained_before) << ','
        << format_double(ag.mean_finetuned_after) << ','
        << (ag.change_accuracy ? format_double(*ag.change_accuracy) : std::string("")) << "\n";
  }
  if (!violations.empty()) {
    for (const auto& v : violations) err << "audit: " << v << "\n";
    return kExitRuntime;
  }
  return kExitSuccess;
}

// ---- features ------------------------------------------------------------------------------

struct FeaturesArgs {
  std::string manifest;
  std::optional<int> subject;
  std::string config;
  std::string out;
};

int cmd_features(const FeaturesArgs& a, std::ostream& out) {
  require_input(a.manifest);
  const fs::path path = a.out;
  prepare_output_file(path);
  const train::PipelineConfig p = resolve_pipeline(read_config(a.config), std::nullopt);
  const Dataset d = load_dataset(a.manifest);
  std::vector<std::size_t> which;
  if (a.subject) {
    which.push_back(find_subject(d, *a.subject));
  } else {
    for (std::size_t i = 0; i < d.recordings.size(); ++i) which.push_back(i);
  }

  std::string csv;
  std::size_t rows = 0;
  for (std::size_t i : which) {
    const auto fm = features::extract_features(dsp::preprocess(d.recordings[i], p.preprocess), p.features);
    std::ostringstream os;
    features::write_feature_csv(os, fm, d.manifest.channels, p.features);
    std::string text = os.str();
    if (!csv.empty()) text.erase(0, text.find('\n') + 1);
    csv += text;
    rows += fm.rows;
  }
  write_text(path, csv);

  RunManifest m("features");
  m.j["parameters"] = {{"preprocess", p.preprocess}, {"features", p.features}};
  m.j["parameters"]["subject"] = a.subject ? json(*a.subject) : json(nullptr);
  input_dataset(m, a.manifest, d);
  m.output(path, path.parent_path());
  m.write(companion(path, ".run_manifest.json"));
  out << "wrote " << rows << " feature rows to " << path.string() << "\n";
  return kExitSuccess;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"sEMG transfer-learning workbench", "semg"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset");
  synth_cmd->add_option("--subjects", synth.cfg.subjects)->check(CLI::Range(1, 100000));
  synth_cmd->add_option("--classes", synth.cfg.classes, "Movement classes")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--reps", synth.cfg.repetitions, "Repetitions per class")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--channels", synth.cfg.channels)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--fs", synth.cfg.fs_hz, "Sampling rate in Hz")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--seed", synth.cfg.seed);
  synth_cmd->add_option("--movement-s", synth.cfg.movement_s)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--rest-s", synth.cfg.rest_s)->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--variability", synth.cfg.subject_variability)->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();

  const auto model_check = CLI::IsMember({"features", "raw"});

  PretrainArgs pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "Train on every subject but one");
  pre_cmd->add_option("--manifest", pre.manifest)->required();
  pre_cmd->add_option("--exclude-subject", pre.exclude, "Held-out subject id");
  pre_cmd->add_option("--model", pre.model)->check(model_check);
  pre_cmd->add_option("--config", pre.config, "Pipeline config JSON");
  pre_cmd->add_option("--out-ckpt", pre.out_ckpt)->required();
  pre_cmd->add_option("--seed", pre.seed);
  pre.overrides.add_to(pre_cmd);

  SubjectArgs subj;
  auto* subj_cmd = app.add_subcommand("train-subject", "Train a subject-specific model from scratch");
  subj_cmd->add_option("--manifest", subj.manifest)->required();
  subj_cmd->add_option("--subject", subj.subject)->required();
  subj_cmd->add_option("--reps", subj.reps, "Training repetitions, e.g. 1,2,4")->delimiter(',');
  subj_cmd->add_option("--model", subj.model)->check(model_check);
  subj_cmd->add_option("--config", subj.config);
  subj_cmd->add_option("--out", subj.out, "Checkpoint path")->required();
  subj_cmd->add_option("--seed", subj.seed);
  subj.overrides.add_to(subj_cmd);

  FinetuneArgs ft;
  auto* ft_cmd = app.add_subcommand("finetune", "Fine-tune a pretrained checkpoint on one subject");
  ft_cmd->add_option("--ckpt", ft.ckpt)->required();
  ft_cmd->add_option("--manifest", ft.manifest)->required();
  ft_cmd->add_option("--subject", ft.subject)->required();
  ft_cmd->add_option("--reps", ft.reps, "Fine-tuning repetitions, e.g. 1,2,4")->required()->delimiter(',');
  ft_cmd->add_option("--scope", ft.scope, "all, first or last");
  ft_cmd->add_option("--out", ft.out, "Checkpoint path")->required();
  ft_cmd->add_option("--seed", ft.seed);
  ft.overrides.add_to(ft_cmd);

  EvaluateArgs ev;
  auto* ev_cmd = app.add_subcommand("evaluate", "Score a checkpoint on one subject");
  ev_cmd->add_option("--ckpt", ev.ckpt)->required();
  ev_cmd->add_option("--manifest", ev.manifest)->required();
  ev_cmd->add_option("--subject", ev.subject)->required();
  ev_cmd->add_option("--reps", ev.reps, "Test repetitions (default 3)")->delimiter(',');
  ev_cmd->add_option("--out", ev.out, "Optional result JSON");

  LosoArgs loso;
  auto* loso_cmd = app.add_subcommand("loso", "Leave-one-subject-out experiment");
  loso_cmd->add_option("--manifest", loso.manifest)->required();
  loso_cmd->add_option("--model", loso.model)->check(model_check);
  loso_cmd->add_option("--config", loso.config);
  loso_cmd->add_option("--reps-sweep", loso.reps_sweep)->delimiter(',');
  loso_cmd->add_option("--scope-sweep", loso.scope_sweep)->delimiter(',');
  loso_cmd->add_option("--seed", loso.seed);
  loso_cmd->add_option("--jobs", loso.jobs, "Worker threads, 0 for one per core");
  loso_cmd->add_option("--folds", loso.folds, "Held-out subjects (default all)")->delimiter(',');
  loso_cmd->add_option("--out-dir", loso.out_dir)->required();
  loso.overrides.add_to(loso_cmd);

  FeaturesArgs feat;
  auto* feat_cmd = app.add_subcommand("features", "Dump the feature matrix as CSV");
  feat_cmd->add_option("--manifest", feat.manifest)->required();
  feat_cmd->add_option("--subject", feat.subject, "Only this subject");
  feat_cmd->add_option("--config", feat.config);
  feat_cmd->add_option("--out", feat.out, "CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == static_cast<int>(CLI::ExitCodes::Success) ? kExitSuccess : kExitUsage;
  }

  try {
    if (synth_cmd->parsed()) return cmd_synth(synth, out);
    if (pre_cmd->parsed()) return cmd_pretrain(pre, out);
    if (subj_cmd->parsed()) return cmd_train_subject(subj, out);
    if (ft_cmd->parsed()) return cmd_finetune(ft, out);
    if (ev_cmd->parsed()) return cmd_evaluate(ev, out);
    if (loso_cmd->parsed()) return cmd_loso(loso, out, err);
    if (feat_cmd->parsed()) return cmd_features(feat, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace semg::cli
