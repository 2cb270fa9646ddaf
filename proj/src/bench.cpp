#include "semg/bench.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <map>
#include <sstream>
#include <thread>
#include <tuple>

#include "semg/error.hpp"
#include "semg/io.hpp"
#include "semg/rng.hpp"

namespace semg::bench {

using train::ModelKind;
using train::RetrainScope;
using train::Samples;

namespace {

constexpr std::uint64_t kPrepareTag = 1;
constexpr std::uint64_t kInitTag = 2;
constexpr std::uint64_t kPretrainTag = 3;
constexpr std::uint64_t kSubjectTag = 4;
constexpr std::uint64_t kFinetuneTag = 5;

/// Runs fn(0..n-1) on up to `jobs` threads. Exceptions are rethrown in index
/// order after every task has finished.
template <class Fn>
void parallel_for(std::size_t n, unsigned jobs, Fn&& fn) {
  if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
  jobs = static_cast<unsigned>(std::min<std::size_t>(jobs, n));
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::jthread> threads;
    for (unsigned t = 0; t < jobs; ++t) threads.emplace_back(worker);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string provenance_fingerprint(const std::vector<train::Provenance>& prov) {
  std::vector<std::uint8_t> bytes;
  auto put = [&](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  };
  for (const auto& p : prov) {
    put(static_cast<std::uint64_t>(p.subject));
    put(static_cast<std::uint64_t>(p.class_label));
    put(static_cast<std::uint64_t>(p.repetition));
    put(p.start);
  }
  return io::fnv1a_hex(bytes);
}

Samples scaled(Samples s, const train::Scaler& scaler) {
  if (!scaler.empty()) scaler.apply(s);
  return s;
}

}  // namespace

// ---- metrics ---------------------------------------------------------------------

Evaluation evaluate(nn::Network& net, const Samples& test) {
  if (test.size() == 0) throw Error(ErrorCode::EmptyTestSet, "no test samples");
  const std::size_t classes = net.classes();
  Evaluation ev;
  ev.total = test.size();
  ev.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 1024;
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < test.size(); begin += kChunk) {
    idx.clear();
    for (std::size_t i = begin; i < std::min(test.size(), begin + kChunk); ++i) idx.push_back(i);
    const nn::Batch logits = net.forward(test.gather(idx), nn::Mode::Eval);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto row = logits.row(b);
      const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      const int truth = test.targets[idx[b]];
      if (truth < 0 || static_cast<std::size_t>(truth) >= classes) {
        throw Error(ErrorCode::InvalidTarget, "test target " + std::to_string(truth) + " outside the classifier range");
      }
      ev.confusion[static_cast<std::size_t>(truth)][pred]++;
      if (pred == static_cast<std::size_t>(truth)) ++correct;
    }
  }
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(ev.total);
  return ev;
}

double percentage_change(double before, double after, ChangeBasis basis) {
  if (basis == ChangeBasis::Accuracy) {
    if (before == 0.0) throw Error(ErrorCode::ZeroBaseline, "accuracy before retraining is zero");
    return 100.0 * (after - before) / before;
  }
  const double err_before = 1.0 - before;
  if (err_before == 0.0) throw Error(ErrorCode::ZeroBaseline, "error before retraining is zero");
  return 100.0 * (err_before - (1.0 - after)) / err_before;
}

std::vector<Aggregate> aggregate(const std::vector<FoldResult>& folds, const std::vector<int>& reps_sweep,
                                 const std::vector<RetrainScope>& scope_sweep) {
  std::vector<Aggregate> out;
  for (int k : reps_sweep) {
    for (RetrainScope scope : scope_sweep) {
      Aggregate a;
      a.reps_used = k;
      a.scope = scope;
      for (const auto& f : folds) {
        if (f.reps_used != k || f.scope != scope) continue;
        ++a.folds;
        a.mean_subject_specific += f.acc_subject_specific;
        a.mean_pretrained_before += f.acc_pretrained_before;
        a.mean_finetuned_after += f.acc_finetuned_after;
      }
      if (a.folds > 0) {
        const double n = static_cast<double>(a.folds);
        a.mean_subject_specific /= n;
        a.mean_pretrained_before /= n;
        a.mean_finetuned_after /= n;
      }
      if (a.mean_pretrained_before != 0.0) {
        a.change_accuracy = percentage_change(a.mean_pretrained_before, a.mean_finetuned_after, ChangeBasis::Accuracy);
      }
      if (a.mean_pretrained_before != 1.0) {
        a.change_error = percentage_change(a.mean_pretrained_before, a.mean_finetuned_after, ChangeBasis::Error);
      }
      out.push_back(a);
    }
  }
  return out;
}

// ---- report JSON -----------------------------------------------------------------------

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::optional<double> optional_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

void to_json(nlohmann::json& j, const ExperimentReport& r) {
  nlohmann::json scopes = nlohmann::json::array();
  for (auto s : r.scope_sweep) scopes.push_back(train::to_string(s));
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds) {
    folds.push_back({{"held_out_subject", f.held_out_subject},
                     {"model_kind", train::to_string(f.model_kind)},
                     {"reps_used", f.reps_used},
                     {"scope", train::to_string(f.scope)},
                     {"acc_subject_specific", f.acc_subject_specific},
                     {"acc_pretrained_before", f.acc_pretrained_before},
                     {"acc_finetuned_after", f.acc_finetuned_after},
                     {"test_windows", f.test_windows},
                     {"test_fingerprint", f.test_fingerprint},
                     {"histories",
                      {{"subject_specific", f.history_subject_specific},
                       {"pretrained", f.history_pretrained},
                       {"finetuned", f.history_finetuned}}}});
  }
  nlohmann::json aggs = nlohmann::json::array();
  for (const auto& a : r.aggregates) {
    aggs.push_back({{"reps_used", a.reps_used},
                    {"scope", train::to_string(a.scope)},
                    {"folds", a.folds},
                    {"mean_subject_specific", a.mean_subject_specific},
                    {"mean_pretrained_before", a.mean_pretrained_before},
                    {"mean_finetuned_after", a.mean_finetuned_after},
                    {"percentage_change_accuracy", optional_json(a.change_accuracy)},
                    {"percentage_change_error", optional_json(a.change_error)}});
  }
  j = {{"dataset", r.dataset},
       {"model_kind", train::to_string(r.model_kind)},
       {"seed", r.seed},
       {"reps_sweep", r.reps_sweep},
       {"scope_sweep", scopes},
       {"folds", folds},
       {"aggregates", aggs}};
}

void from_json(const nlohmann::json& j, ExperimentReport& r) {
  r = {};
  r.dataset = j.at("dataset").get<std::string>();
  r.model_kind = train::parse_model_kind(j.at("model_kind").get<std::string>());
  r.seed = j.at("seed").get<std::uint64_t>();
  r.reps_sweep = j.at("reps_sweep").get<std::vector<int>>();
  for (const auto& s : j.at("scope_sweep")) r.scope_sweep.push_back(train::parse_scope(s.get<std::string>()));
  for (const auto& f : j.at("folds")) {
    FoldResult fr;
    fr.held_out_subject = f.at("held_out_subject").get<int>();
    fr.model_kind = train::parse_model_kind(f.at("model_kind").get<std::string>());
    fr.reps_used = f.at("reps_used").get<int>();
    fr.scope = train::parse_scope(f.at("scope").get<std::string>());
    fr.acc_subject_specific = f.at("acc_subject_specific").get<double>();
    fr.acc_pretrained_before = f.at("acc_pretrained_before").get<double>();
    fr.acc_finetuned_after = f.at("acc_finetuned_after").get<double>();
    fr.test_windows = f.at("test_windows").get<std::size_t>();
    fr.test_fingerprint = f.at("test_fingerprint").get<std::string>();
    const auto& h = f.at("histories");
    fr.history_subject_specific = h.at("subject_specific").get<train::TrainHistory>();
    fr.history_pretrained = h.at("pretrained").get<train::TrainHistory>();
    fr.history_finetuned = h.at("finetuned").get<train::TrainHistory>();
    r.folds.push_back(std::move(fr));
  }
  for (const auto& a : j.at("aggregates")) {
    Aggregate ag;
    ag.reps_used = a.at("reps_used").get<int>();
    ag.scope = train::parse_scope(a.at("scope").get<std::string>());
    ag.folds = a.at("folds").get<std::size_t>();
    ag.mean_subject_specific = a.at("mean_subject_specific").get<double>();
    ag.mean_pretrained_before = a.at("mean_pretrained_before").get<double>();
    ag.mean_finetuned_after = a.at("mean_finetuned_after").get<double>();
    ag.change_accuracy = optional_from(a.at("percentage_change_accuracy"));
    ag.change_error = optional_from(a.at("percentage_change_error"));
    r.aggregates.push_back(ag);
  }
}

std::string report_to_json(const ExperimentReport& r) { return nlohmann::json(r).dump(2) + "\n"; }

ExperimentReport report_from_json(const std::string& text) {
  try {
    return nlohmann::json::parse(text).get<ExperimentReport>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("report JSON: ") + e.what());
  }
}

// ---- audit ---------------------------------------------------------------------------------

std::vector<std::string> audit_violations(const Audit& audit) {
  std::vector<std::string> out;
  auto where = [](const AuditEntry& e) {
    return "fold " + std::to_string(e.fold_subject) + " " + e.stage + " (reps " + std::to_string(e.reps_used) + ", " +
           train::to_string(e.scope) + ")";
  };
  using Key = std::tuple<int, int, std::size_t>;  // fold, subject, start
  std::map<std::pair<int, int>, std::set<Key>> trained;  // (fold, reps) -> windows of the held-out subject
  for (const auto& e : audit.entries) {
    const bool training = e.stage != "test";
    for (const auto& p : e.samples) {
      if (e.stage == "pretrain" && p.subject == e.fold_subject) {
        out.push_back(where(e) + ": held-out subject window at " + std::to_string(p.start));
      }
      if (training && (p.owner_repetition == train::kTestRepetition || p.repetition == train::kTestRepetition)) {
        out.push_back(where(e) + ": test-repetition window of subject " + std::to_string(p.subject) + " at " +
                      std::to_string(p.start));
      }
      if (e.stage != "pretrain" && p.subject != e.fold_subject) {
        out.push_back(where(e) + ": window of foreign subject " + std::to_string(p.subject));
      }
      if (e.stage == "subject_specific" || e.stage == "finetune") {
        trained[{e.fold_subject, e.reps_used}].insert({e.fold_subject, p.subject, p.start});
      }
    }
  }
  for (const auto& e : audit.entries) {
    if (e.stage != "test") continue;
    const auto it = trained.find({e.fold_subject, e.reps_used});
    if (it == trained.end()) continue;
    for (const auto& p : e.samples) {
      if (it->second.count({e.fold_subject, p.subject, p.start})) {
        out.push_back(where(e) + ": test window at " + std::to_string(p.start) + " was also trained on");
      }
    }
  }
  return out;
}

// ---- protocol --------------------------------------------------------------------------------

std::set<int> finetune_repetitions(int k, int repetition_count) {
  std::set<int> out;
  for (int r : {1, 2, 4, 5, 6}) {
    if (static_cast<int>(out.size()) == k) break;
    if (r <= repetition_count) out.insert(r);
  }
  if (k < 1 || static_cast<int>(out.size()) != k) {
    throw Error(ErrorCode::InvalidConfig, "cannot pick " + std::to_string(k) + " fine-tuning repetitions from " +
                                              std::to_string(repetition_count));
  }
  return out;
}

std::set<int> pretrain_repetitions(int repetition_count) {
  std::set<int> out;
  for (int r = 1; r <= repetition_count; ++r) {
    if (r != train::kTestRepetition) out.insert(r);
  }
  return out;
}

namespace {

struct FoldOutput {
  std::vector<FoldResult> results;
  std::vector<AuditEntry> audit;
};

FoldOutput run_fold(const Dataset& dataset, const std::vector<Samples>& per_subject, std::size_t held,
                    const LosoConfig& cfg) {
  const auto& manifest = dataset.manifest;
  const int subject = dataset.recordings[held].subject_id;
  const auto h = static_cast<std::uint64_t>(subject);
  const int reps = manifest.repetition_count;
  const std::size_t classes = static_cast<std::size_t>(manifest.output_classes());
  const ModelKind kind = cfg.pipeline.model;
  FoldOutput out;

  Samples pre;
  const auto pre_reps = pretrain_repetitions(reps);
  for (std::size_t i = 0; i < per_subject.size(); ++i) {
    if (i == held) continue;
    pre.append(per_subject[i].subset(train::select_repetitions(per_subject[i], pre_reps)));
  }
  out.audit.push_back({subject, "pretrain", 0, RetrainScope::All, pre.provenance});
  train::Scaler pre_scaler;
  if (kind == ModelKind::Features) pre_scaler = train::Scaler::fit(pre);
  pre = scaled(std::move(pre), pre_scaler);

  const nn::NetworkSpec spec = cfg.network ? *cfg.network : train::default_spec(kind, pre.shape, classes);
  if (spec.input != pre.shape || spec.classes() != classes) {
    throw Error(ErrorCode::ShapeMismatch, "network does not fit inputs of this dataset");
  }
  train::TrainConfig tc = cfg.pipeline.train;
  tc.scope = RetrainScope::All;
  tc.seed = derive_seed(cfg.seed, {kPretrainTag, h});
  const auto pretrained = train::train(nn::build_network(spec, derive_seed(cfg.seed, {kInitTag, h, 0})), pre, tc);
  nn::CheckpointMetadata meta;
  meta.seed = cfg.seed;
  meta.epochs = static_cast<int>(pretrained.history.records.size());
  meta.source_tag = "pretrain-exclude-" + std::to_string(subject);
  meta.extra = {{"model", train::to_string(kind)}, {"scaler", pre_scaler}};
  const nn::NetworkCheckpoint ckpt = nn::make_checkpoint(pretrained.net, meta);

  const Samples& own = per_subject[held];
  const Samples own_pre = scaled(own, pre_scaler);
  for (int k : cfg.reps_sweep) {
    const auto ft_reps = finetune_repetitions(k, reps);
    std::set<int> test_reps;
    for (int r = 1; r <= reps; ++r) {
      if (!ft_reps.count(r)) test_reps.insert(r);
    }
    const auto test_idx = train::select_repetitions(own, test_reps);
    const auto train_idx = train::select_repetitions(own, ft_reps);
    const Samples test_raw = own.subset(test_idx);
    const Samples ss_raw = own.subset(train_idx);
    out.audit.push_back({subject, "test", k, RetrainScope::All, test_raw.provenance});
    out.audit.push_back({subject, "subject_specific", k, RetrainScope::All, ss_raw.provenance});

    train::Scaler ss_scaler;
    if (kind == ModelKind::Features) ss_scaler = train::Scaler::fit(ss_raw);
    train::TrainConfig ss_cfg = tc;
    ss_cfg.seed = derive_seed(cfg.seed, {kSubjectTag, h, static_cast<std::uint64_t>(k)});
    auto ss = train::train(nn::build_network(spec, derive_seed(cfg.seed, {kInitTag, h, static_cast<std::uint64_t>(k)})),
                           scaled(ss_raw, ss_scaler), ss_cfg);
    const double acc_ss = evaluate(ss.net, scaled(test_raw, ss_scaler)).accuracy;

    const Samples test_pre = scaled(test_raw, pre_scaler);
    nn::Network before = nn::restore_network(ckpt);
    const double acc_before = evaluate(before, test_pre).accuracy;

    for (RetrainScope scope : cfg.scope_sweep) {
      train::TrainConfig ft_cfg = tc;
      ft_cfg.scope = scope;
      ft_cfg.seed =
          derive_seed(cfg.seed, {kFinetuneTag, h, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(scope)});
      auto ft = train::fine_tune(ckpt, own_pre, ft_reps, ft_cfg);
      out.audit.push_back({subject, "finetune", k, scope, ss_raw.provenance});
      FoldResult fr;
      fr.held_out_subject = subject;
      fr.model_kind = kind;
      fr.reps_used = k;
      fr.scope = scope;
      fr.acc_subject_specific = acc_ss;
      fr.acc_pretrained_before = acc_before;
      fr.acc_finetuned_after = evaluate(ft.net, test_pre).accuracy;
      fr.test_windows = test_raw.size();
      fr.test_fingerprint = provenance_fingerprint(test_raw.provenance);
      fr.history_subject_specific = ss.history;
      fr.history_pretrained = pretrained.history;
      fr.history_finetuned = ft.history;
      out.results.push_back(std::move(fr));
    }
  }
  return out;
}

}  // namespace

LosoRun run_loso(const Dataset& dataset, const LosoConfig& cfg) {
  if (dataset.recordings.size() < 2) {
    throw Error(ErrorCode::InsufficientData, "leave-one-subject-out needs at least 2 subjects, dataset has " +
                                                 std::to_string(dataset.recordings.size()));
  }
  if (cfg.reps_sweep.empty() || cfg.scope_sweep.empty()) {
    throw Error(ErrorCode::InvalidConfig, "repetition and scope sweeps must be non-empty");
  }
  cfg.pipeline.train.validate();
  const int reps = dataset.manifest.repetition_count;
  for (int k : cfg.reps_sweep) finetune_repetitions(k, reps);

  std::vector<std::size_t> fold_index;
  if (cfg.folds.empty()) {
    for (std::size_t i = 0; i < dataset.recordings.size(); ++i) fold_index.push_back(i);
  } else {
    for (int id : cfg.folds) {
      const auto it = std::find_if(dataset.recordings.begin(), dataset.recordings.end(),
                                   [&](const Recording& r) { return r.subject_id == id; });
      if (it == dataset.recordings.end()) {
        throw Error(ErrorCode::UnknownSubject, "subject " + std::to_string(id) + " is not in the dataset");
      }
      fold_index.push_back(static_cast<std::size_t>(it - dataset.recordings.begin()));
    }
  }

  std::set<int> all_reps;
  for (int r = 1; r <= reps; ++r) all_reps.insert(r);
  std::vector<Samples> per_subject(dataset.recordings.size());
  parallel_for(per_subject.size(), cfg.jobs, [&](std::size_t i) {
    const Recording& rec = dataset.recordings[i];
    per_subject[i] = train::prepare_samples(rec, all_reps, cfg.pipeline, dataset.manifest.rest_is_class,
                                            derive_seed(cfg.seed, {kPrepareTag, static_cast<std::uint64_t>(rec.subject_id)}));
  });

  std::vector<FoldOutput> outputs(fold_index.size());
  parallel_for(fold_index.size(), cfg.jobs,
               [&](std::size_t f) { outputs[f] = run_fold(dataset, per_subject, fold_index[f], cfg); });

  LosoRun run;
  run.report.dataset = dataset.manifest.name;
  run.report.model_kind = cfg.pipeline.model;
  run.report.seed = cfg.seed;
  run.report.reps_sweep = cfg.reps_sweep;
  run.report.scope_sweep = cfg.scope_sweep;
  for (auto& o : outputs) {
    for (auto& r : o.results) run.report.folds.push_back(std::move(r));
    for (auto& a : o.audit) run.audit.entries.push_back(std::move(a));
  }
  run.report.aggregates = aggregate(run.report.folds, cfg.reps_sweep, cfg.scope_sweep);
  return run;
}

// ---- export ------------------------------------------------------------------------------------

std::vector<std::filesystem::path> export_report(const ExperimentReport& report, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "curves", ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + (out_dir / "curves").string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  const std::string model = train::to_string(report.model_kind);

  std::ostringstream table;
  table << "model,repetitions,scope,subject_specific,before_retraining,after_retraining\n";
  std::ostringstream change;
  change << "model,repetitions,scope,percentage_change_accuracy,percentage_change_error\n";
  auto opt = [](const std::optional<double>& v) { return v ? io::format_double(*v) : std::string(); };
  for (const auto& a : report.aggregates) {
    const std::string prefix = model + "," + std::to_string(a.reps_used) + "," + train::to_string(a.scope) + ",";
    table << prefix << io::format_double(a.mean_subject_specific) << ',' << io::format_double(a.mean_pretrained_before)
          << ',' << io::format_double(a.mean_finetuned_after) << '\n';
    change << prefix << opt(a.change_accuracy) << ',' << opt(a.change_error) << '\n';
  }
  written.push_back(out_dir / "accuracy_table.csv");
  io::write_text(written.back(), table.str());
  written.push_back(out_dir / "percentage_change.csv");
  io::write_text(written.back(), change.str());

  for (const auto& f : report.folds) {
    const std::string stem = "subject" + std::to_string(f.held_out_subject) + "_reps" + std::to_string(f.reps_used) +
                             "_" + train::to_string(f.scope) + "_";
    const std::pair<const char*, const train::TrainHistory*> curves[] = {
        {"subject_specific", &f.history_subject_specific},
        {"pretrained", &f.history_pretrained},
        {"finetuned", &f.history_finetuned}};
    for (const auto& [name, hist] : curves) {
      std::ostringstream csv;
      train::write_history_csv(csv, *hist);
      written.push_back(out_dir / "curves" / (stem + name + ".csv"));
      io::write_text(written.back(), csv.str());
    }
  }
  written.push_back(out_dir / "report.json");
  io::write_text(written.back(), report_to_json(report));
  return written;
}

}  // namespace semg::bench
