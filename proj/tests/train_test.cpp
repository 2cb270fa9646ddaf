#include "semg/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "semg/error.hpp"
#include "semg/rng.hpp"

namespace semg::train {
namespace {

void expect_error(ErrorCode code, auto&& fn) {
  try {
    fn();
    FAIL() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

SynthConfig small_synth() {
  SynthConfig s;
  s.subjects = 2;
  s.classes = 3;
  s.repetitions = 6;
  s.channels = 4;
  s.fs_hz = 1000;
  s.movement_s = 2.0;
  s.rest_s = 1.0;
  s.seed = 5;
  return s;
}

const std::vector<Recording>& small_dataset() {
  static const std::vector<Recording> recs = synthesize_dataset(small_synth());
  return recs;
}

const std::set<int> kPretrainReps{1, 2, 4, 5, 6};

Samples scaled_features(const std::set<int>& reps, int subject_index = 0) {
  Samples s = prepare_samples(small_dataset()[subject_index], reps, PipelineConfig{}, false, 3);
  Scaler::fit(s).apply(s);
  return s;
}

TrainConfig quick_config(std::uint64_t seed = 1) {
  TrainConfig c;
  c.adam = {0.003, 0.9, 0.999, 1e-7, 32};
  c.max_epochs = 50;
  c.patience = 10;
  c.seed = seed;
  return c;
}

nn::NetworkSpec three_dense(std::size_t in, std::size_t classes) {
  return {{1, in}, {nn::DenseSpec{in, 16}, nn::ReluSpec{}, nn::DenseSpec{16, 8}, nn::ReluSpec{},
                    nn::DenseSpec{8, classes}}};
}

TEST(Scope, ParsesNamesAndAliases) {
  EXPECT_EQ(parse_scope("all"), RetrainScope::All);
  EXPECT_EQ(parse_scope("none"), RetrainScope::All);
  EXPECT_EQ(parse_scope("all_trainable"), RetrainScope::All);
  EXPECT_EQ(parse_scope("first_only"), RetrainScope::First);
  EXPECT_EQ(parse_scope("last"), RetrainScope::Last);
  expect_error(ErrorCode::InvalidConfig, [] { parse_scope("middle"); });
  EXPECT_EQ(parse_model_kind("raw"), ModelKind::Raw);
  expect_error(ErrorCode::InvalidConfig, [] { parse_model_kind("lstm"); });
}

TEST(Config, ValidationAndJson) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.validation_fraction = 1.0;
  expect_error(ErrorCode::InvalidConfig, [&] { c.validate(); });
  c.validation_fraction = 0.0;
  expect_error(ErrorCode::InvalidConfig, [&] { c.validate(); });
  c = {};
  c.patience = 0;
  expect_error(ErrorCode::InvalidConfig, [&] { c.validate(); });

  TrainConfig d = quick_config(77);
  d.scope = RetrainScope::Last;
  const nlohmann::json j = d;
  TrainConfig back;
  from_json(j, back);
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(Config, PipelineDefaultsFollowModelKind) {
  PipelineConfig raw;
  from_json(nlohmann::json{{"model", "raw"}}, raw);
  EXPECT_EQ(raw.model, ModelKind::Raw);
  EXPECT_EQ(raw.train.adam.batch_size, 512u);
  EXPECT_EQ(raw.train.adam.learning_rate, 0.0002);
  PipelineConfig feat;
  from_json(nlohmann::json{{"train", {{"max_epochs", 7}, {"adam", {{"batch_size", 64}}}}}}, feat);
  EXPECT_EQ(feat.train.max_epochs, 7);
  EXPECT_EQ(feat.train.adam.batch_size, 64u);
  EXPECT_EQ(feat.train.adam.epsilon, 0.38);
  PipelineConfig bad;
  expect_error(ErrorCode::InvalidConfig, [&] { from_json(nlohmann::json{{"train", {{"patience", "x"}}}}, bad); });
}

TEST(Samples, TargetMapping) {
  EXPECT_EQ(target_of(0, false), -1);
  EXPECT_EQ(target_of(1, false), 0);
  EXPECT_EQ(target_of(0, true), 0);
  EXPECT_EQ(target_of(4, true), 4);
}

TEST(Samples, ScalerStandardizesColumns) {
  Samples s;
  s.shape = {1, 2};
  s.data = {1, 5, 3, 5, 5, 5};
  s.targets = {0, 0, 0};
  s.provenance.resize(3);
  const Scaler sc = Scaler::fit(s);
  EXPECT_DOUBLE_EQ(sc.mean[0], 3.0);
  EXPECT_EQ(sc.scale[1], 1.0);
  sc.apply(s);
  EXPECT_NEAR(s.data[0], -std::sqrt(1.5), 1e-12);
  EXPECT_EQ(s.data[1], 0.0);
  const nlohmann::json j = sc;
  EXPECT_EQ(j.get<Scaler>().mean, sc.mean);
  Samples wrong;
  wrong.shape = {1, 3};
  expect_error(ErrorCode::ShapeMismatch, [&] { sc.apply(wrong); });
}

TEST(Samples, OwnerRepetitions) {
  Recording r;
  r.channels = 1;
  r.fs_hz = 1000;
  r.class_labels = {0, 1, 1, 0, 0, 1, 0};
  r.repetition_labels = {0, 1, 1, 0, 0, 2, 0};
  r.samples.assign(7, 0.0);
  EXPECT_EQ(owner_repetitions(r), (std::vector<int>{0, 1, 1, 1, 1, 2, 2}));
}

TEST(Samples, FeatureSamplesRespectRepetitions) {
  const Samples s = prepare_samples(small_dataset()[0], {1, 4}, PipelineConfig{}, false, 3);
  EXPECT_EQ(s.shape, (nn::Shape{1, 4 * 18}));
  EXPECT_GT(s.size(), 0u);
  std::set<int> classes;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& p = s.provenance[i];
    EXPECT_TRUE(p.repetition == 1 || p.repetition == 4);
    EXPECT_NE(p.class_label, 0);
    EXPECT_EQ(s.targets[i], p.class_label - 1);
    EXPECT_EQ(p.subject, 1);
    classes.insert(s.targets[i]);
  }
  EXPECT_EQ(classes, (std::set<int>{0, 1, 2}));
}

TEST(Samples, RawSamplesAndRestAsClass) {
  PipelineConfig cfg;
  cfg.model = ModelKind::Raw;
  const Samples s = prepare_samples(small_dataset()[1], {2}, cfg, true, 3);
  EXPECT_EQ(s.shape, (nn::Shape{4, 200}));
  bool saw_rest = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_EQ(s.provenance[i].owner_repetition, 2);
    saw_rest = saw_rest || s.targets[i] == 0;
  }
  EXPECT_TRUE(saw_rest);
  expect_error(ErrorCode::EmptySplit, [] { prepare_samples(small_dataset()[0], {9}, PipelineConfig{}, false, 1); });
}

TEST(Train, SeparableDataReachesHighAccuracy) {
  const Samples s = scaled_features(kPretrainReps);
  const auto r = train(nn::build_network(nn::default_mlp(s.shape.size(), 3), 1), s, quick_config());
  ASSERT_FALSE(r.history.records.empty());
  EXPECT_LE(r.history.records.size(), 50u);
  double best_acc = 0;
  for (const auto& rec : r.history.records) best_acc = std::max(best_acc, rec.val_accuracy);
  EXPECT_GT(best_acc, 0.9);
}

// Random labels: the network can only memorize, so validation loss turns up.
Samples noise_samples(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Samples s;
  s.shape = {1, dim};
  Rng rng(seed);
  for (std::size_t i = 0; i < n * dim; ++i) s.data.push_back(rng.normal());
  for (std::size_t i = 0; i < n; ++i) s.targets.push_back(static_cast<int>(rng.below(3)));
  s.provenance.resize(n);
  return s;
}

TEST(Train, HistoryIsContiguousAndEarlyStoppingHolds) {
  const Samples s = noise_samples(300, 10, 4);
  TrainConfig c = quick_config();
  c.adam.learning_rate = 0.01;
  c.patience = 4;
  c.max_epochs = 100;
  const auto r = train(nn::build_network(three_dense(10, 3), 2), s, c);
  const auto& h = r.history;
  for (std::size_t i = 0; i < h.records.size(); ++i) EXPECT_EQ(h.records[i].epoch, static_cast<int>(i));
  EXPECT_EQ(h.stopped_epoch, static_cast<int>(h.records.size()) - 1);
  EXPECT_LE(h.best_epoch, h.stopped_epoch);
  const double best = h.records[h.best_epoch].val_loss;
  for (const auto& rec : h.records) EXPECT_GE(rec.val_loss, best);
  ASSERT_LT(h.stopped_epoch + 1, c.max_epochs);
  EXPECT_EQ(h.stopped_epoch, h.best_epoch + c.patience);
}

TEST(Train, ReturnsBestEpochParameters) {
  const Samples s = noise_samples(300, 10, 4);
  TrainConfig c = quick_config();
  c.adam.learning_rate = 0.01;
  c.patience = 4;
  auto r = train(nn::build_network(three_dense(s.shape.size(), 3), 2), s, c);
  ASSERT_LT(r.history.best_epoch, r.history.stopped_epoch);
  const nn::Batch logits = r.net.forward(s.gather(r.validation_indices), nn::Mode::Eval);
  std::vector<int> y;
  for (std::size_t i : r.validation_indices) y.push_back(s.targets[i]);
  EXPECT_EQ(nn::softmax_cross_entropy(logits, y).loss, r.history.records[r.history.best_epoch].val_loss);
}

TEST(Train, ValidationSplitIsStratifiedAndDisjoint) {
  const Samples s = scaled_features(kPretrainReps);
  TrainConfig c = quick_config();
  c.max_epochs = 1;
  const auto r = train(nn::build_network(three_dense(s.shape.size(), 3), 2), s, c);
  std::set<std::size_t> all(r.train_indices.begin(), r.train_indices.end());
  for (std::size_t i : r.validation_indices) EXPECT_TRUE(all.insert(i).second);
  EXPECT_EQ(all.size(), s.size());
  std::map<int, std::size_t> total, val;
  for (int t : s.targets) total[t]++;
  for (std::size_t i : r.validation_indices) val[s.targets[i]]++;
  for (const auto& [label, n] : total) {
    EXPECT_EQ(val[label], static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n))));
  }
  c.seed = 2;
  EXPECT_NE(train(nn::build_network(three_dense(s.shape.size(), 3), 2), s, c).validation_indices,
            r.validation_indices);
}

TEST(Train, DeterministicPerSeed) {
  const Samples s = scaled_features(kPretrainReps);
  TrainConfig c = quick_config();
  c.max_epochs = 8;
  const auto spec = nn::default_mlp(s.shape.size(), 3);
  const auto a = train(nn::build_network(spec, 4), s, c);
  const auto b = train(nn::build_network(spec, 4), s, c);
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(a.net.flat_parameters(), b.net.flat_parameters());
}

TEST(Train, ZeroEpochsReturnsInitialNetwork) {
  const Samples s = scaled_features(kPretrainReps);
  TrainConfig c = quick_config();
  c.max_epochs = 0;
  const nn::Network init = nn::build_network(three_dense(s.shape.size(), 3), 2);
  const auto r = train(init, s, c);
  EXPECT_TRUE(r.history.records.empty());
  EXPECT_EQ(r.history.best_epoch, -1);
  EXPECT_EQ(r.history.stopped_epoch, -1);
  EXPECT_EQ(r.net.flat_parameters(), init.flat_parameters());
}

TEST(Train, DataErrors) {
  Samples s = scaled_features({1});
  const auto net = nn::build_network(three_dense(s.shape.size(), 3), 2);
  Samples one_class = s.subset(std::vector<std::size_t>{0});
  one_class.append(s.subset(std::vector<std::size_t>{0}));
  expect_error(ErrorCode::DegenerateLabels, [&] { train(net, one_class, quick_config()); });

  std::vector<std::size_t> two;
  for (std::size_t i = 0; i < s.size() && two.size() < 2; ++i) {
    if (two.empty() || s.targets[i] != s.targets[two[0]]) two.push_back(i);
  }
  expect_error(ErrorCode::InsufficientData, [&] { train(net, s.subset(two), quick_config()); });

  Samples wrong = s;
  wrong.targets[0] = 7;
  expect_error(ErrorCode::InvalidTarget, [&] { train(net, wrong, quick_config()); });
}

TEST(Freeze, ScopesOnThreeDenseNetwork) {
  nn::Network net = nn::build_network(three_dense(5, 3), 1);
  apply_freeze(net, RetrainScope::Last);
  EXPECT_EQ(net.frozen_layers(), (std::vector<std::size_t>{0, 2}));
  apply_freeze(net, RetrainScope::First);
  EXPECT_EQ(net.frozen_layers(), (std::vector<std::size_t>{2, 4}));
  apply_freeze(net, RetrainScope::All);
  EXPECT_TRUE(net.frozen_layers().empty());

  nn::Network plain = nn::build_network({{1, 5}, {nn::DenseSpec{5, 4}, nn::DenseSpec{4, 4}, nn::DenseSpec{4, 2}}}, 1);
  apply_freeze(plain, RetrainScope::Last);
  EXPECT_EQ(plain.frozen_layers(), (std::vector<std::size_t>{0, 1}));
}

TEST(Freeze, BatchNormFollowsItsWeightLayer) {
  nn::Network net = nn::build_network(nn::default_cnn(2, 60, 3), 1);
  apply_freeze(net, RetrainScope::First);
  // Conv0, BN1 train; Conv3, BN4, Dense7, Dense10 frozen.
  EXPECT_EQ(net.frozen_layers(), (std::vector<std::size_t>{3, 4, 7, 10}));
  apply_freeze(net, RetrainScope::Last);
  EXPECT_EQ(net.frozen_layers(), (std::vector<std::size_t>{0, 1, 3, 4, 7}));
}

TEST(Freeze, TooFewLayers) {
  nn::Network net = nn::build_network({{1, 4}, {nn::DenseSpec{4, 2}}}, 1);
  expect_error(ErrorCode::TooFewLayers, [&] { apply_freeze(net, RetrainScope::First); });
  EXPECT_NO_THROW(apply_freeze(net, RetrainScope::All));
}

nn::NetworkCheckpoint pretrained_checkpoint() {
  Samples pre = prepare_samples(small_dataset()[1], kPretrainReps, PipelineConfig{}, false, 3);
  Scaler::fit(pre).apply(pre);
  TrainConfig c = quick_config();
  c.max_epochs = 10;
  const auto r = train(nn::build_network(nn::default_mlp(pre.shape.size(), 3), 8), pre, c);
  return nn::make_checkpoint(r.net, {8, 10, "pretrain-s1", {}});
}

TEST(Transfer, InitReproducesOutputs) {
  const auto ckpt = pretrained_checkpoint();
  nn::Network original = nn::restore_network(ckpt);
  nn::Network copy = transfer_init(ckpt, ckpt.spec);
  const Samples s = scaled_features({1});
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  EXPECT_EQ(copy.forward(s.gather(idx), nn::Mode::Eval).data, original.forward(s.gather(idx), nn::Mode::Eval).data);
  expect_error(ErrorCode::ShapeMismatch, [&] { transfer_init(ckpt, three_dense(72, 3)); });
}

TEST(Transfer, FineTuneGuards) {
  const auto ckpt = pretrained_checkpoint();
  const Samples s = scaled_features({1, 2, 3, 4, 5, 6});
  expect_error(ErrorCode::InvalidConfig, [&] { fine_tune(ckpt, s, {1, 3}, quick_config()); });
  expect_error(ErrorCode::EmptySplit, [&] { fine_tune(ckpt, s, {}, quick_config()); });
  expect_error(ErrorCode::EmptySplit, [&] { fine_tune(ckpt, scaled_features({1}), {2}, quick_config()); });
}

TEST(Transfer, FineTuneUsesOnlySelectedRepetitions) {
  const Samples s = scaled_features({1, 2, 3, 4, 5, 6});
  for (std::size_t i : select_repetitions(s, kPretrainReps)) EXPECT_NE(s.provenance[i].owner_repetition, 3);
  const auto ckpt = pretrained_checkpoint();
  TrainConfig c = quick_config();
  c.max_epochs = 3;
  const auto r = fine_tune(ckpt, s, {1}, c);
  EXPECT_FALSE(r.history.records.empty());
  EXPECT_EQ(r.history.source_tag, "pretrain-s1");
  EXPECT_EQ(r.train_indices.size() + r.validation_indices.size(), select_repetitions(s, {1}).size());
}

TEST(Transfer, LastScopeChangesOnlyLastLayer) {
  const auto ckpt = pretrained_checkpoint();
  const nn::Network before = nn::restore_network(ckpt);
  TrainConfig c = quick_config();
  c.max_epochs = 5;
  c.scope = RetrainScope::Last;
  const auto r = fine_tune(ckpt, scaled_features({1, 2}), {1, 2}, c);
  const std::size_t last = before.weight_layers().back();
  EXPECT_EQ(r.history.frozen_layers, (std::vector<std::size_t>{0, 3}));
  for (std::size_t i = 0; i < before.layer_count(); ++i) {
    const auto a = before.layer(i).params();
    const auto b = r.net.layer(i).params();
    const bool same = std::equal(a.begin(), a.end(), b.begin(), b.end());
    EXPECT_EQ(same, i != last) << "layer " << i;
  }
}

TEST(History, CsvAndJson) {
  TrainHistory h;
  h.records = {{0, 1.5, 1.25, 0.5}, {1, 1.0, 1.125, 0.75}};
  h.best_epoch = 1;
  h.stopped_epoch = 1;
  h.source_tag = "x";
  h.frozen_layers = {0, 2};
  std::ostringstream csv;
  write_history_csv(csv, h);
  EXPECT_EQ(csv.str(), "epoch,train_loss,val_loss,val_acc\n0,1.5,1.25,0.5\n1,1,1.125,0.75\n");
  const nlohmann::json j = h;
  EXPECT_EQ(j.get<TrainHistory>(), h);
}

}  // namespace
}  // namespace semg::train
