#include "semg/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>

#include "semg/error.hpp"
#include "semg/io.hpp"
#include "semg/rng.hpp"

namespace semg::train {

namespace {

constexpr std::uint64_t kValidationTag = 1;
constexpr std::uint64_t kShuffleTag = 2;
constexpr std::uint64_t kDropoutTag = 3;
constexpr std::size_t kEvalChunk = 1024;

/// Fisher-Yates driven by Rng::below so orders match across standard libraries.
void shuffle_indices(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

[[noreturn]] void config_error(const std::string& what) { throw Error(ErrorCode::InvalidConfig, what); }

}  // namespace

std::string to_string(RetrainScope scope) {
  switch (scope) {
    case RetrainScope::All: return "all";
    case RetrainScope::First: return "first";
    case RetrainScope::Last: return "last";
  }
  return "all";
}

RetrainScope parse_scope(std::string_view text) {
  if (text == "all" || text == "none" || text == "all_trainable") return RetrainScope::All;
  if (text == "first" || text == "first_only") return RetrainScope::First;
  if (text == "last" || text == "last_only") return RetrainScope::Last;
  config_error("unknown retrain scope '" + std::string(text) + "' (expected all, first or last)");
}

std::string to_string(ModelKind kind) { return kind == ModelKind::Raw ? "raw" : "features"; }

ModelKind parse_model_kind(std::string_view text) {
  if (text == "features") return ModelKind::Features;
  if (text == "raw") return ModelKind::Raw;
  config_error("unknown model kind '" + std::string(text) + "' (expected features or raw)");
}

// ---- config -------------------------------------------------------------------

void TrainConfig::validate() const {
  adam.validate();
  if (max_epochs < 0) config_error("max_epochs must be >= 0");
  if (patience < 1) config_error("patience must be >= 1");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    config_error("validation_fraction must be in (0, 1)");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& cfg) {
  j = {{"adam", cfg.adam},
       {"max_epochs", cfg.max_epochs},
       {"patience", cfg.patience},
       {"validation_fraction", cfg.validation_fraction},
       {"seed", cfg.seed},
       {"scope", to_string(cfg.scope)}};
}

void from_json(const nlohmann::json& j, TrainConfig& cfg) {
  try {
    if (j.contains("adam")) from_json(j.at("adam"), cfg.adam);
    cfg.max_epochs = j.value("max_epochs", cfg.max_epochs);
    cfg.patience = j.value("patience", cfg.patience);
    cfg.validation_fraction = j.value("validation_fraction", cfg.validation_fraction);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("scope")) cfg.scope = parse_scope(j.at("scope").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    config_error(std::string("train config: ") + e.what());
  }
}

void to_json(nlohmann::json& j, const PipelineConfig& cfg) {
  j = {{"model", to_string(cfg.model)},
       {"preprocess", cfg.preprocess},
       {"features", cfg.features},
       {"train", cfg.train}};
}

void from_json(const nlohmann::json& j, PipelineConfig& cfg) {
  try {
    if (j.contains("model")) cfg.model = parse_model_kind(j.at("model").get<std::string>());
    cfg.train.adam =
        cfg.model == ModelKind::Raw ? nn::AdamConfig::raw_preset() : nn::AdamConfig::features_preset();
    if (j.contains("preprocess")) cfg.preprocess = j.at("preprocess").get<dsp::PreprocessConfig>();
    if (j.contains("features")) cfg.features = j.at("features").get<features::FeatureConfig>();
    if (j.contains("train")) from_json(j.at("train"), cfg.train);
  } catch (const nlohmann::json::exception& e) {
    config_error(std::string("pipeline config: ") + e.what());
  }
}

// ---- history ------------------------------------------------------------------

void to_json(nlohmann::json& j, const TrainHistory& h) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : h.records) {
    records.push_back(
        {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}, {"val_accuracy", r.val_accuracy}});
  }
  j = {{"records", records},
       {"stopped_epoch", h.stopped_epoch},
       {"best_epoch", h.best_epoch},
       {"source_tag", h.source_tag},
       {"frozen_layers", h.frozen_layers}};
}

void from_json(const nlohmann::json& j, TrainHistory& h) {
  h = {};
  for (const auto& r : j.at("records")) {
    h.records.push_back({r.at("epoch").get<int>(), r.at("train_loss").get<double>(), r.at("val_loss").get<double>(),
                         r.at("val_accuracy").get<double>()});
  }
  h.stopped_epoch = j.at("stopped_epoch").get<int>();
  h.best_epoch = j.at("best_epoch").get<int>();
  h.source_tag = j.value("source_tag", std::string{});
  h.frozen_layers = j.value("frozen_layers", std::vector<std::size_t>{});
}

void write_history_csv(std::ostream& out, const TrainHistory& h) {
  out << "epoch,train_loss,val_loss,val_acc\n";
  for (const auto& r : h.records) {
    out << r.epoch << ',' << io::format_double(r.train_loss) << ',' << io::format_double(r.val_loss) << ','
        << io::format_double(r.val_accuracy) << '\n';
  }
}

// ---- samples --------------------------------------------------------------------

nn::Batch Samples::gather(std::span<const std::size_t> indices) const {
  nn::Batch b(indices.size(), shape);
  const std::size_t w = shape.size();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(indices[k] * w), w, b.data.begin() + static_cast<std::ptrdiff_t>(k * w));
  }
  return b;
}

Samples Samples::subset(std::span<const std::size_t> indices) const {
  Samples out;
  out.shape = shape;
  out.data = gather(indices).data;
  out.targets.reserve(indices.size());
  out.provenance.reserve(indices.size());
  for (std::size_t i : indices) {
    out.targets.push_back(targets[i]);
    out.provenance.push_back(provenance[i]);
  }
  return out;
}

void Samples::append(const Samples& other) {
  if (size() == 0 && data.empty()) {
    shape = other.shape;
  } else if (other.size() > 0 && other.shape != shape) {
    throw Error(ErrorCode::ShapeMismatch, "cannot append samples of a different shape");
  }
  data.insert(data.end(), other.data.begin(), other.data.end());
  targets.insert(targets.end(), other.targets.begin(), other.targets.end());
  provenance.insert(provenance.end(), other.provenance.begin(), other.provenance.end());
}

int target_of(int class_label, bool rest_is_class) noexcept {
  if (rest_is_class) return class_label;
  return class_label == 0 ? -1 : class_label - 1;
}

Scaler Scaler::fit(const Samples& s) {
  const std::size_t w = s.shape.size();
  Scaler sc;
  sc.mean.assign(w, 0.0);
  sc.scale.assign(w, 1.0);
  const std::size_t n = s.size();
  if (n == 0) return sc;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = s.row(i);
    for (std::size_t k = 0; k < w; ++k) sc.mean[k] += r[k];
  }
  for (double& m : sc.mean) m /= static_cast<double>(n);
  std::vector<double> ss(w, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = s.row(i);
    for (std::size_t k = 0; k < w; ++k) ss[k] += (r[k] - sc.mean[k]) * (r[k] - sc.mean[k]);
  }
  for (std::size_t k = 0; k < w; ++k) {
    const double sd = std::sqrt(ss[k] / static_cast<double>(n));
    sc.scale[k] = sd > 0.0 ? sd : 1.0;
  }
  return sc;
}

void Scaler::apply(Samples& s) const {
  const std::size_t w = s.shape.size();
  if (w != mean.size()) {
    throw Error(ErrorCode::ShapeMismatch, "scaler fitted on " + std::to_string(mean.size()) + " columns, input has " +
                                              std::to_string(w));
  }
  for (std::size_t i = 0; i < s.data.size(); ++i) {
    const std::size_t k = i % w;
    s.data[i] = (s.data[i] - mean[k]) / scale[k];
  }
}

void to_json(nlohmann::json& j, const Scaler& s) { j = {{"mean", s.mean}, {"scale", s.scale}}; }

void from_json(const nlohmann::json& j, Scaler& s) {
  s.mean = j.at("mean").get<std::vector<double>>();
  s.scale = j.at("scale").get<std::vector<double>>();
  if (s.mean.size() != s.scale.size()) throw Error(ErrorCode::CorruptCheckpoint, "scaler arrays differ in length");
}

// ---- sample preparation --------------------------------------------------------------

std::vector<int> owner_repetitions(const Recording& rec) {
  std::vector<int> owner(rec.length(), 0);
  int current = 0;
  for (std::size_t i = 0; i < rec.length(); ++i) {
    if (rec.class_labels[i] != 0 && rec.repetition_labels[i] != 0) current = rec.repetition_labels[i];
    owner[i] = current;
  }
  return owner;
}

Samples prepare_samples(const Recording& rec, const std::set<int>& repetitions, const PipelineConfig& cfg,
                        bool rest_is_class, std::uint64_t shuffle_seed) {
  const std::vector<int> owner = owner_repetitions(rec);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < rec.length(); ++i) {
    if (repetitions.count(owner[i])) keep.push_back(i);
  }
  auto empty_error = [&] {
    return Error(ErrorCode::EmptySplit, "subject " + std::to_string(rec.subject_id) +
                                            " has no classifiable samples in the requested repetitions");
  };
  if (keep.empty()) throw empty_error();
  const Recording part = select_samples(rec, keep);
  dsp::PreprocessConfig pre = cfg.preprocess;
  pre.seed = shuffle_seed;
  const dsp::WindowSet ws = dsp::preprocess(part, pre);

  Samples out;
  if (cfg.model == ModelKind::Raw) {
    out.shape = {ws.channels, ws.length};
  } else {
    out.shape = {1, ws.channels * cfg.features.per_channel()};
  }
  for (const auto& w : ws.windows) {
    const int target = target_of(w.class_label, rest_is_class);
    if (target < 0) continue;
    if (cfg.model == ModelKind::Raw) {
      out.data.insert(out.data.end(), w.data.begin(), w.data.end());
    } else {
      const auto f = features::extract_feature_vector(w, ws.channels, ws.fs_hz, cfg.features);
      out.data.insert(out.data.end(), f.begin(), f.end());
    }
    out.targets.push_back(target);
    out.provenance.push_back({w.subject_id, w.class_label, w.repetition_label, owner[w.start], w.start});
  }
  if (out.size() == 0) throw empty_error();
  return out;
}

nn::NetworkSpec default_spec(ModelKind kind, nn::Shape input, std::size_t classes) {
  if (kind == ModelKind::Raw) return nn::default_cnn(input.channels, input.length, classes);
  return nn::default_mlp(input.size(), classes);
}

std::vector<std::size_t> select_repetitions(const Samples& s, const std::set<int>& repetitions) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (repetitions.count(s.provenance[i].owner_repetition)) out.push_back(i);
  }
  return out;
}

// ---- training ----------------------------------------------------------------------------

namespace {

struct EvalTotals {
  double loss = 0;
  double accuracy = 0;
};

EvalTotals evaluate_loss(nn::Network& net, const Samples& data, std::span<const std::size_t> idx) {
  double loss_sum = 0;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < idx.size(); begin += kEvalChunk) {
    const auto chunk = idx.subspan(begin, std::min(kEvalChunk, idx.size() - begin));
    const nn::Batch logits = net.forward(data.gather(chunk), nn::Mode::Eval);
    std::vector<int> y;
    for (std::size_t i : chunk) y.push_back(data.targets[i]);
    loss_sum += nn::softmax_cross_entropy(logits, y).loss * static_cast<double>(chunk.size());
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const auto row = logits.row(b);
      const auto pred = std::max_element(row.begin(), row.end()) - row.begin();
      if (pred == y[b]) ++correct;
    }
  }
  const double n = static_cast<double>(idx.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

}  // namespace

TrainResult train(nn::Network net, const Samples& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.shape != net.spec().input) {
    throw Error(ErrorCode::ShapeMismatch, "training inputs do not match the network input shape");
  }
  const int classes = static_cast<int>(net.classes());
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int t = data.targets[i];
    if (t < 0 || t >= classes) {
      throw Error(ErrorCode::InvalidTarget, "target " + std::to_string(t) + " outside [0, " + std::to_string(classes) + ")");
    }
    by_class[t].push_back(i);
  }
  if (by_class.size() < 2) {
    throw Error(ErrorCode::DegenerateLabels, "training data holds " + std::to_string(by_class.size()) +
                                                 " distinct class(es); at least 2 are needed");
  }

  std::vector<std::size_t> train_idx, val_idx;
  Rng split_rng(derive_seed(cfg.seed, {kValidationTag}));
  for (auto& [label, members] : by_class) {
    shuffle_indices(members, split_rng);
    const auto n_val = static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<double>(members.size())));
    val_idx.insert(val_idx.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_idx.insert(train_idx.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val), members.end());
  }
  if (val_idx.empty() || train_idx.empty()) {
    throw Error(ErrorCode::InsufficientData, std::to_string(data.size()) + " samples cannot be split with validation fraction " +
                                                 io::format_double(cfg.validation_fraction));
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());

  TrainResult result{net, {}, train_idx, val_idx};
  result.history.frozen_layers = net.frozen_layers();
  nn::AdamState state = nn::AdamState::for_network(net);
  double best_loss = std::numeric_limits<double>::infinity();
  const std::size_t batch_size = cfg.adam.batch_size;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    Rng shuffle_rng(derive_seed(cfg.seed, {kShuffleTag, static_cast<std::uint64_t>(epoch)}));
    shuffle_indices(order, shuffle_rng);

    double train_loss = 0;
    std::size_t batch_no = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += batch_size, ++batch_no) {
      const auto idx = std::span(order).subspan(begin, std::min(batch_size, order.size() - begin));
      std::vector<int> y;
      y.reserve(idx.size());
      for (std::size_t i : idx) y.push_back(data.targets[i]);
      const auto dropout_seed = derive_seed(cfg.seed, {kDropoutTag, static_cast<std::uint64_t>(epoch), batch_no});
      const nn::Batch logits = net.forward(data.gather(idx), nn::Mode::Train, dropout_seed);
      const nn::LossResult loss = nn::softmax_cross_entropy(logits, y);
      nn::adam_step(net, net.backward(loss.grad), state, cfg.adam);
      train_loss += loss.loss * static_cast<double>(idx.size());
    }
    train_loss /= static_cast<double>(order.size());

    const EvalTotals val = evaluate_loss(net, data, val_idx);
    result.history.records.push_back({epoch, train_loss, val.loss, val.accuracy});
    result.history.stopped_epoch = epoch;
    if (val.loss < best_loss) {
      best_loss = val.loss;
      result.history.best_epoch = epoch;
      result.net = net;
    } else if (epoch - result.history.best_epoch >= cfg.patience) {
      break;
    }
  }
  result.net.invalidate_cache();
  return result;
}

nn::Network transfer_init(const nn::NetworkCheckpoint& ckpt, const std::optional<nn::NetworkSpec>& expected) {
  if (expected && !(*expected == ckpt.spec)) {
    throw Error(ErrorCode::ShapeMismatch, "checkpoint architecture differs from the expected one");
  }
  return nn::restore_network(ckpt);
}

void apply_freeze(nn::Network& net, RetrainScope scope) {
  const std::vector<std::size_t> weights = net.weight_layers();
  if (scope != RetrainScope::All && weights.size() < 2) {
    throw Error(ErrorCode::TooFewLayers, "scope " + to_string(scope) + " needs at least 2 weight layers, network has " +
                                             std::to_string(weights.size()));
  }
  for (std::size_t i = 0; i < net.layer_count(); ++i) net.set_frozen(i, false);
  if (scope == RetrainScope::All) return;
  const std::size_t keep = scope == RetrainScope::First ? weights.front() : weights.back();
  std::size_t owner = 0;
  bool has_owner = false;
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    if (net.layer(i).is_weight_layer()) {
      owner = i;
      has_owner = true;
    }
    if (net.layer(i).params().empty()) continue;
    const bool trainable = has_owner && owner == keep;
    net.set_frozen(i, !trainable);
  }
}

TrainResult fine_tune(const nn::NetworkCheckpoint& ckpt, const Samples& subject_data, const std::set<int>& repetitions,
                      const TrainConfig& cfg) {
  if (repetitions.empty()) throw Error(ErrorCode::EmptySplit, "no repetitions selected for fine-tuning");
  if (repetitions.count(kTestRepetition)) {
    throw Error(ErrorCode::InvalidConfig,
                "repetition " + std::to_string(kTestRepetition) + " is reserved for testing");
  }
  nn::Network net = transfer_init(ckpt);
  apply_freeze(net, cfg.scope);
  const auto idx = select_repetitions(subject_data, repetitions);
  if (idx.empty()) throw Error(ErrorCode::EmptySplit, "no samples in the selected repetitions");
  TrainResult r = train(std::move(net), subject_data.subset(idx), cfg);
  r.history.source_tag = ckpt.metadata.source_tag;
  return r;
}

}  // namespace semg::train
