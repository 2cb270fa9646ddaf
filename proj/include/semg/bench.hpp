#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "semg/dataset.hpp"
#include "semg/nn.hpp"
#include "semg/train.hpp"

namespace semg::bench {

struct Evaluation {
  double accuracy = 0;
  /// confusion[true][predicted]
  std::vector<std::vector<std::size_t>> confusion;
  std::size_t total = 0;
};

/// Argmax accuracy over every sample; ties go to the lowest class index.
/// Throws EmptyTestSet.
Evaluation evaluate(nn::Network& net, const train::Samples& test);

enum class ChangeBasis { Accuracy, Error };

/// Accuracy basis: 100 (after - before) / before.
/// Error basis: 100 (err_before - err_after) / err_before with err = 1 - acc.
/// Throws ZeroBaseline when the denominator is zero.
double percentage_change(double before, double after, ChangeBasis basis = ChangeBasis::Accuracy);

struct FoldResult {
  int held_out_subject = 0;
  train::ModelKind model_kind = train::ModelKind::Features;
  int reps_used = 0;
  train::RetrainScope scope = train::RetrainScope::All;
  double acc_subject_specific = 0;
  double acc_pretrained_before = 0;
  double acc_finetuned_after = 0;
  std::size_t test_windows = 0;
  /// FNV-1a over the provenance of the test windows shared by all three models.
  std::string test_fingerprint;
  train::TrainHistory history_subject_specific;
  train::TrainHistory history_pretrained;
  train::TrainHistory history_finetuned;

  bool operator==(const FoldResult&) const = default;
};

/// Mean over held-out subjects for one (repetitions, scope) setting.
struct Aggregate {
  int reps_used = 0;
  train::RetrainScope scope = train::RetrainScope::All;
  std::size_t folds = 0;
  double mean_subject_specific = 0;
  double mean_pretrained_before = 0;
  double mean_finetuned_after = 0;
  /// Absent when the baseline is zero.
  std::optional<double> change_accuracy;
  std::optional<double> change_error;

  bool operator==(const Aggregate&) const = default;
};

struct ExperimentReport {
  std::string dataset;
  train::ModelKind model_kind = train::ModelKind::Features;
  std::uint64_t seed = 0;
  std::vector<int> reps_sweep;
  std::vector<train::RetrainScope> scope_sweep;
  std::vector<FoldResult> folds;
  std::vector<Aggregate> aggregates;

  bool operator==(const ExperimentReport&) const = default;
};

/// Aggregates in sweep order (repetitions outer, scope inner).
std::vector<Aggregate> aggregate(const std::vector<FoldResult>& folds, const std::vector<int>& reps_sweep,
                                 const std::vector<train::RetrainScope>& scope_sweep);

void to_json(nlohmann::json& j, const ExperimentReport& r);
void from_json(const nlohmann::json& j, ExperimentReport& r);
/// Pretty-printed JSON with a trailing newline; stable byte-for-byte.
std::string report_to_json(const ExperimentReport& r);
ExperimentReport report_from_json(const std::string& text);

/// Training or test set as seen by one stage of one fold.
struct AuditEntry {
  int fold_subject = 0;
  std::string stage;  // pretrain, subject_specific, finetune, test
  int reps_used = 0;
  train::RetrainScope scope = train::RetrainScope::All;
  std::vector<train::Provenance> samples;
};

struct Audit {
  std::vector<AuditEntry> entries;
};

/// Every protocol breach found: held-out data in pretraining, test-repetition
/// data in any training set, foreign subjects in fine-tuning or test sets, and
/// test windows that also appear in training. Empty means clean.
std::vector<std::string> audit_violations(const Audit& audit);

struct LosoConfig {
  train::PipelineConfig pipeline;
  std::vector<int> reps_sweep{1, 2, 4, 5};
  std::vector<train::RetrainScope> scope_sweep{train::RetrainScope::All};
  std::uint64_t seed = 0;
  /// Worker threads for folds; 0 means one per hardware thread.
  unsigned jobs = 1;
  /// Overrides the default architecture; input and classes must match.
  std::optional<nn::NetworkSpec> network;
  /// Subjects to hold out; empty means every subject.
  std::vector<int> folds;
};

/// Fine-tuning repetitions for a k-repetition setting: the first k of
/// {1, 2, 4, 5, 6} that exist. Throws InvalidConfig when fewer than k exist.
std::set<int> finetune_repetitions(int k, int repetition_count);
/// Every repetition except the test repetition.
std::set<int> pretrain_repetitions(int repetition_count);

struct LosoRun {
  ExperimentReport report;
  Audit audit;
};

/// Leave-one-subject-out protocol. Per held-out subject: pretrain once on the
/// other subjects' pretraining repetitions; then per k the subject-specific
/// baseline is trained once and, per scope, the pretrained model is fine-tuned.
/// All three are scored on the held-out subject's repetitions outside the
/// fine-tuning set. Throws InsufficientData for fewer than two subjects.
LosoRun run_loso(const Dataset& dataset, const LosoConfig& cfg);

/// Writes accuracy_table.csv, percentage_change.csv, curves/ and report.json.
/// Returns the written paths. Throws IoError.
std::vector<std::filesystem::path> export_report(const ExperimentReport& report, const std::filesystem::path& out_dir);

}  // namespace semg::bench
