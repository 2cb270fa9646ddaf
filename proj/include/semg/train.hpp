#pragma once

#include <cstdint>
#include <iosfwd>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "semg/dataset.hpp"
#include "semg/dsp.hpp"
#include "semg/features.hpp"
#include "semg/nn.hpp"

namespace semg::train {

/// The repetition never used for training anywhere in the protocol.
inline constexpr int kTestRepetition = 3;

/// Which layers keep learning during fine-tuning.
enum class RetrainScope { All, First, Last };

std::string to_string(RetrainScope scope);
/// Accepts all/first/last and the long forms none, all_trainable, first_only,
/// last_only. Throws InvalidConfig otherwise.
RetrainScope parse_scope(std::string_view text);

enum class ModelKind { Features, Raw };

std::string to_string(ModelKind kind);
/// Throws InvalidConfig for anything but "features" or "raw".
ModelKind parse_model_kind(std::string_view text);

struct TrainConfig {
  nn::AdamConfig adam = nn::AdamConfig::features_preset();
  int max_epochs = 150;
  /// Epochs without validation-loss improvement before stopping.
  int patience = 10;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
  RetrainScope scope = RetrainScope::All;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_accuracy = 0;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainHistory {
  std::vector<EpochRecord> records;
  /// Both -1 when no epoch ran.
  int stopped_epoch = -1;
  int best_epoch = -1;
  std::string source_tag;
  std::vector<std::size_t> frozen_layers;

  bool operator==(const TrainHistory&) const = default;
};

void to_json(nlohmann::json& j, const TrainHistory& h);
void from_json(const nlohmann::json& j, TrainHistory& h);

/// Columns epoch,train_loss,val_loss,val_acc.
void write_history_csv(std::ostream& out, const TrainHistory& h);

/// Where a sample came from. `owner_repetition` is the repetition a rest
/// window is attributed to (its own repetition for movement windows).
struct Provenance {
  int subject = 0;
  int class_label = 0;
  int repetition = 0;
  int owner_repetition = 0;
  std::size_t start = 0;

  bool operator==(const Provenance&) const = default;
};

/// Classifier inputs with integer targets in [0, classes).
struct Samples {
  nn::Shape shape;
  std::vector<double> data;  // row-major, shape.size() values per sample
  std::vector<int> targets;
  std::vector<Provenance> provenance;

  std::size_t size() const noexcept { return targets.size(); }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * shape.size(), shape.size()}; }
  nn::Batch gather(std::span<const std::size_t> indices) const;
  Samples subset(std::span<const std::size_t> indices) const;
  /// Throws ShapeMismatch when shapes differ (an empty target adopts the shape).
  void append(const Samples& other);
};

/// Classifier target for a raw class label: the label itself when rest is a
/// class, label - 1 otherwise, and -1 for rest windows that are dropped.
int target_of(int class_label, bool rest_is_class) noexcept;

/// Per-column z-score fitted on training inputs. Columns with zero spread get
/// scale 1 so they pass through centred.
struct Scaler {
  std::vector<double> mean;
  std::vector<double> scale;

  static Scaler fit(const Samples& s);
  void apply(Samples& s) const;
  bool empty() const noexcept { return mean.empty(); }
};

void to_json(nlohmann::json& j, const Scaler& s);
void from_json(const nlohmann::json& j, Scaler& s);

/// Preprocessing and feature settings shared by every stage of a run.
struct PipelineConfig {
  ModelKind model = ModelKind::Features;
  dsp::PreprocessConfig preprocess;
  features::FeatureConfig features;
  TrainConfig train;
};

void to_json(nlohmann::json& j, const PipelineConfig& cfg);
/// Missing keys keep their defaults. The adam block defaults to the preset
/// matching the model kind.
void from_json(const nlohmann::json& j, PipelineConfig& cfg);

/// Repetition each sample belongs to for split purposes (see split_indices).
/// Leading rest maps to 0.
std::vector<int> owner_repetitions(const Recording& rec);

/// Windows (raw) or feature vectors (features) of `rec` restricted to the given
/// repetitions. Rest samples follow their owning repetition. Throws EmptySplit
/// when nothing classifiable remains.
Samples prepare_samples(const Recording& rec, const std::set<int>& repetitions, const PipelineConfig& cfg,
                        bool rest_is_class, std::uint64_t shuffle_seed);

/// Untrained network of the default architecture for this input.
nn::NetworkSpec default_spec(ModelKind kind, nn::Shape input, std::size_t classes);

struct TrainResult {
  nn::Network net;
  TrainHistory history;
  /// Rows of the training data on each side of the validation split.
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> validation_indices;
};

/// Stratified seeded validation split, shuffled mini-batch Adam (fresh state),
/// early stopping on validation loss. Returns the parameters of the best
/// epoch. Respects the network's freeze mask.
/// Throws DegenerateLabels for fewer than two classes and InsufficientData
/// when either side of the validation split would be empty.
TrainResult train(nn::Network net, const Samples& data, const TrainConfig& cfg);

/// Restores a checkpoint for further training; ShapeMismatch if `expected`
/// is given and differs.
nn::Network transfer_init(const nn::NetworkCheckpoint& ckpt,
                          const std::optional<nn::NetworkSpec>& expected = std::nullopt);

/// Freezes every parameterized layer outside the scope. A batch-norm layer
/// shares the fate of the weight layer before it. Throws TooFewLayers when
/// first/last is requested on a network with fewer than two weight layers.
void apply_freeze(nn::Network& net, RetrainScope scope);

/// transfer_init -> apply_freeze(cfg.scope) -> train on the samples of the
/// given repetitions. `subject_data` must already be scaled like the
/// pretraining inputs. Throws EmptySplit for an empty repetition set or no
/// matching samples and InvalidConfig when the test repetition is requested.
TrainResult fine_tune(const nn::NetworkCheckpoint& ckpt, const Samples& subject_data,
                      const std::set<int>& repetitions, const TrainConfig& cfg);

/// Indices of samples whose owning repetition is in `repetitions`.
std::vector<std::size_t> select_repetitions(const Samples& s, const std::set<int>& repetitions);

}  // namespace semg::train
