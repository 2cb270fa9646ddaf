#include "semg/nn.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "grad_check.hpp"
#include "semg/error.hpp"
#include "semg/io.hpp"
#include "semg/rng.hpp"
#include "test_util.hpp"

namespace semg::nn {
namespace {

Batch random_batch(std::size_t rows, Shape shape, std::uint64_t seed) {
  Batch b(rows, shape);
  Rng rng(seed);
  for (double& v : b.data) v = rng.normal();
  return b;
}

std::vector<int> random_targets(std::size_t rows, int classes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> y(rows);
  for (int& t : y) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
  return y;
}

NetworkSpec mixed_spec() {
  NetworkSpec s;
  s.input = {2, 11};
  s.layers = {Conv1DSpec{2, 3, 3, 2}, BatchNormSpec{3}, ReluSpec{},   FlattenSpec{},     DenseSpec{15, 6},
              BatchNormSpec{6},       ReluSpec{},       DropoutSpec{0.25}, DenseSpec{6, 4}, SoftmaxOutputSpec{4}};
  return s;
}

void expect_error(ErrorCode code, auto&& fn) {
  try {
    fn();
    FAIL() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

TEST(NetworkSpec, DenseParameterCount) {
  NetworkSpec s{{1, 4}, {DenseSpec{4, 3}}};
  EXPECT_EQ(build_network(s, 1).parameter_count(), 15u);
}

TEST(NetworkSpec, ShapesCompose) {
  const auto shapes = mixed_spec().layer_shapes();
  EXPECT_EQ(shapes[0], (Shape{3, 5}));
  EXPECT_EQ(shapes[3], (Shape{1, 15}));
  EXPECT_EQ(mixed_spec().classes(), 4u);
}

TEST(NetworkSpec, MismatchedLayersThrow) {
  expect_error(ErrorCode::ShapeMismatch, [] { NetworkSpec{{1, 4}, {DenseSpec{5, 3}}}.layer_shapes(); });
  expect_error(ErrorCode::ShapeMismatch, [] { NetworkSpec{{2, 4}, {Conv1DSpec{2, 3, 5, 1}}}.layer_shapes(); });
  expect_error(ErrorCode::ShapeMismatch, [] { NetworkSpec{{2, 4}, {Conv1DSpec{2, 3, 2, 1}}}.layer_shapes(); });
  expect_error(ErrorCode::ShapeMismatch, [] { NetworkSpec{{1, 4}, {BatchNormSpec{3}}}.layer_shapes(); });
  expect_error(ErrorCode::ShapeMismatch,
               [] { NetworkSpec{{1, 4}, {SoftmaxOutputSpec{4}, DenseSpec{4, 2}}}.layer_shapes(); });
  expect_error(ErrorCode::ShapeMismatch, [] { NetworkSpec{{1, 4}, {}}.layer_shapes(); });
}

TEST(NetworkSpec, JsonRoundTrip) {
  const NetworkSpec s = mixed_spec();
  const nlohmann::json j = s;
  EXPECT_EQ(j.get<NetworkSpec>(), s);
  expect_error(ErrorCode::InvalidConfig,
               [] { nlohmann::json{{"input", {{"channels", 1}, {"length", 2}}}, {"layers", {{{"type", "lstm"}}}}}
                        .get<NetworkSpec>(); });
}

TEST(NetworkSpec, DefaultArchitecturesBuild) {
  EXPECT_EQ(default_mlp(216, 7).classes(), 7u);
  EXPECT_EQ(default_cnn(12, 400, 7).classes(), 7u);
  EXPECT_NO_THROW(build_network(default_cnn(12, 400, 7), 3));
}

TEST(Network, InitIsDeterministicPerSeed) {
  const auto a = build_network(mixed_spec(), 9).flat_parameters();
  EXPECT_EQ(a, build_network(mixed_spec(), 9).flat_parameters());
  EXPECT_NE(a, build_network(mixed_spec(), 10).flat_parameters());
}

TEST(Network, HeUniformBoundsAndZeroBias) {
  Network net = build_network(NetworkSpec{{1, 50}, {DenseSpec{50, 40}}}, 4);
  const auto p = net.layer(0).params();
  const double limit = std::sqrt(6.0 / 50.0);
  for (std::size_t i = 0; i < 2000; ++i) EXPECT_LE(std::abs(p[i]), limit);
  for (std::size_t i = 2000; i < p.size(); ++i) EXPECT_EQ(p[i], 0.0);
}

TEST(Network, WrongInputShapeThrows) {
  Network net = build_network(mixed_spec(), 1);
  expect_error(ErrorCode::ShapeMismatch, [&] { net.forward(Batch(2, {2, 12}), Mode::Eval); });
}

TEST(Layers, DenseIdentity) {
  Network net = build_network(NetworkSpec{{1, 3}, {DenseSpec{3, 3}}}, 1);
  std::vector<double> p(12, 0.0);
  p[0] = p[4] = p[8] = 1.0;
  net.set_flat_parameters(p);
  Batch x(1, {1, 3});
  x.data = {1.5, -2.0, 0.25};
  EXPECT_EQ(net.forward(x, Mode::Eval).data, x.data);
}

TEST(Layers, ConvUnitKernelIsIdentity) {
  Network net = build_network(NetworkSpec{{1, 5}, {Conv1DSpec{1, 1, 1, 1}, FlattenSpec{}}}, 1);
  net.set_flat_parameters(std::vector<double>{1.0, 0.0});
  Batch x(1, {1, 5});
  x.data = {3, 1, 4, 1, 5};
  EXPECT_EQ(net.forward(x, Mode::Eval).data, x.data);
}

TEST(Layers, ConvDifferenceKernel) {
  Network net = build_network(NetworkSpec{{1, 4}, {Conv1DSpec{1, 1, 2, 1}, FlattenSpec{}}}, 1);
  net.set_flat_parameters(std::vector<double>{1.0, -1.0, 0.0});
  Batch x(1, {1, 4});
  x.data = {0, 1, 0, 1};
  EXPECT_EQ(net.forward(x, Mode::Eval).data, (std::vector<double>{-1, 1, -1}));
}

TEST(Layers, ConvStride) {
  Network net = build_network(NetworkSpec{{1, 7}, {Conv1DSpec{1, 1, 3, 2}, FlattenSpec{}}}, 1);
  net.set_flat_parameters(std::vector<double>{1.0, 1.0, 1.0, 0.5});
  Batch x(1, {1, 7});
  x.data = {1, 2, 3, 4, 5, 6, 7};
  EXPECT_EQ(net.forward(x, Mode::Eval).data, (std::vector<double>{6.5, 12.5, 18.5}));
}

TEST(Layers, BatchNormEvalIndependentOfBatchComposition) {
  NetworkSpec s{{1, 4}, {BatchNormSpec{4}}};
  Network net = build_network(s, 1);
  for (int i = 0; i < 5; ++i) net.forward(random_batch(16, {1, 4}, 100 + i), Mode::Train);
  const Batch a = random_batch(8, {1, 4}, 7);
  const Batch full = net.forward(a, Mode::Eval);
  for (std::size_t r = 0; r < a.rows; ++r) {
    Batch one(1, {1, 4});
    std::copy(a.row(r).begin(), a.row(r).end(), one.data.begin());
    const Batch out = net.forward(one, Mode::Eval);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(out.data[k], full.row(r)[k]);
  }
}

TEST(Layers, BatchNormTrainNormalizes) {
  Network net = build_network(NetworkSpec{{3, 6}, {BatchNormSpec{3}, FlattenSpec{}}}, 1);
  Batch x = random_batch(5, {3, 6}, 2);
  for (double& v : x.data) v = 4.0 + 3.0 * v;
  const Batch y = net.forward(x, Mode::Train);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    for (std::size_t b = 0; b < 5; ++b) {
      for (std::size_t t = 0; t < 6; ++t) {
        const double v = y.data[b * 18 + c * 6 + t];
        s += v;
        ss += v * v;
      }
    }
    EXPECT_NEAR(s / 30.0, 0.0, 1e-12);
    EXPECT_NEAR(ss / 30.0, 1.0, 1e-3);
  }
  const auto buf = net.flat_buffers();
  EXPECT_EQ(buf.size(), 6u);
}

TEST(Layers, DropoutKeepsExpectationAndIsIdentityInEval) {
  Network net = build_network(NetworkSpec{{1, 1000}, {DropoutSpec{0.3}}}, 1);
  Batch x(100, {1, 1000});
  std::fill(x.data.begin(), x.data.end(), 1.0);
  const Batch y = net.forward(x, Mode::Train, 42);
  double mean = 0;
  for (double v : y.data) mean += v;
  mean /= static_cast<double>(y.data.size());
  EXPECT_NEAR(mean, 1.0, 0.01);
  EXPECT_EQ(net.forward(x, Mode::Eval).data, x.data);
  EXPECT_EQ(y.data, net.forward(x, Mode::Train, 42).data);
  EXPECT_NE(y.data, net.forward(x, Mode::Train, 43).data);
}

TEST(Loss, ZeroLogitsGiveLogC) {
  Batch z(3, {1, 17});
  const std::vector<int> y{0, 5, 16};
  const auto r = softmax_cross_entropy(z, y);
  EXPECT_NEAR(r.loss, std::log(17.0), 1e-12);
  EXPECT_NEAR(r.loss, 2.8332, 1e-4);
}

TEST(Loss, GradientRowsSumToZero) {
  const Batch z = random_batch(6, {1, 5}, 3);
  const auto r = softmax_cross_entropy(z, random_targets(6, 5, 4));
  for (std::size_t b = 0; b < 6; ++b) {
    double s = 0;
    for (double v : r.grad.row(b)) s += v;
    EXPECT_NEAR(s, 0.0, 1e-15);
  }
}

TEST(Loss, LargeLogitsStayFinite) {
  Batch z(1, {1, 3});
  z.data = {1000.0, -1000.0, 999.0};
  const auto r = softmax_cross_entropy(z, std::vector<int>{1});
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_NEAR(r.loss, 2000.0 + std::log1p(std::exp(-1.0)), 1e-9);
}

TEST(Loss, InvalidTargetThrows) {
  Batch z(2, {1, 3});
  expect_error(ErrorCode::InvalidTarget, [&] { softmax_cross_entropy(z, std::vector<int>{0, 3}); });
  expect_error(ErrorCode::InvalidTarget, [&] { softmax_cross_entropy(z, std::vector<int>{-1, 0}); });
}

TEST(Loss, SoftmaxRowsSumToOne) {
  Batch z = random_batch(50, {1, 9}, 8);
  for (double& v : z.data) v *= 20.0;
  const Batch p = softmax(z);
  for (std::size_t b = 0; b < 50; ++b) {
    double s = 0;
    for (double v : p.row(b)) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Gradients, FiniteDifferenceAllLayerTypes) {
  Network net = build_network(mixed_spec(), 5);
  const Batch x = random_batch(7, {2, 11}, 6);
  const auto r = test::gradient_check(net, x, random_targets(7, 4, 7), 99);
  EXPECT_EQ(r.checked, net.parameter_count());
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(Gradients, FiniteDifferenceWithFrozenBatchNorm) {
  Network net = build_network(mixed_spec(), 5);
  for (int i = 0; i < 3; ++i) net.forward(random_batch(7, {2, 11}, 20 + i), Mode::Train, 1);
  net.set_frozen(0, true);
  net.set_frozen(1, true);
  net.set_frozen(5, true);
  const auto r = test::gradient_check(net, random_batch(7, {2, 11}, 6), random_targets(7, 4, 7), 99);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(Gradients, FrozenLayersGetZero) {
  Network net = build_network(mixed_spec(), 5);
  net.set_frozen(4, true);
  const Batch x = random_batch(4, {2, 11}, 1);
  const auto loss = softmax_cross_entropy(net.forward(x, Mode::Train, 3), random_targets(4, 4, 2));
  const auto g = net.backward(loss.grad);
  for (double v : g[4]) EXPECT_EQ(v, 0.0);
  bool any = false;
  for (double v : g[0]) any = any || v != 0.0;
  EXPECT_TRUE(any);
}

TEST(Gradients, StaleCache) {
  Network net = build_network(mixed_spec(), 5);
  const Batch x = random_batch(4, {2, 11}, 1);
  Batch dz(4, {1, 4});
  expect_error(ErrorCode::StaleCache, [&] { net.backward(dz); });
  net.forward(x, Mode::Eval);
  expect_error(ErrorCode::StaleCache, [&] { net.backward(dz); });
  net.forward(x, Mode::Train);
  const auto g = net.backward(dz);
  AdamState st = AdamState::for_network(net);
  adam_step(net, g, st, AdamConfig{});
  expect_error(ErrorCode::StaleCache, [&] { net.backward(dz); });
}

TEST(Adam, SingleStepMatchesClosedForm) {
  Network net = build_network(NetworkSpec{{1, 1}, {DenseSpec{1, 1}}}, 1);
  net.set_flat_parameters(std::vector<double>{0.0, 0.0});
  AdamState st = AdamState::for_network(net);
  adam_step(net, Gradients{{1.0, 1.0}}, st, AdamConfig::features_preset());
  for (double p : net.flat_parameters()) EXPECT_NEAR(p, -0.001 / 1.38, 1e-12);
}

TEST(Adam, ZeroGradientIsNoOp) {
  Network net = build_network(mixed_spec(), 2);
  const auto before = net.flat_parameters();
  AdamState st = AdamState::for_network(net);
  Gradients g;
  for (std::size_t i = 0; i < net.layer_count(); ++i) g.emplace_back(net.layer(i).params().size(), 0.0);
  adam_step(net, g, st, AdamConfig::raw_preset());
  EXPECT_EQ(net.flat_parameters(), before);
}

TEST(Adam, PresetsValidateAndRoundTrip) {
  EXPECT_NO_THROW(AdamConfig::features_preset().validate());
  EXPECT_NO_THROW(AdamConfig::raw_preset().validate());
  const AdamConfig f = AdamConfig::features_preset();
  EXPECT_EQ(f.batch_size, 256u);
  EXPECT_EQ(AdamConfig::raw_preset().batch_size, 512u);
  const nlohmann::json j = f;
  const auto back = j.get<AdamConfig>();
  EXPECT_EQ(back.learning_rate, f.learning_rate);
  EXPECT_EQ(back.epsilon, f.epsilon);
  AdamConfig bad = f;
  bad.beta1 = 1.0;
  expect_error(ErrorCode::InvalidConfig, [&] { bad.validate(); });
  bad = f;
  bad.learning_rate = 0.0;
  expect_error(ErrorCode::InvalidConfig, [&] { bad.validate(); });
}

TEST(Adam, FrozenLayersStayBitwiseStable) {
  Network net = build_network(mixed_spec(), 3);
  net.set_frozen(0, true);
  net.set_frozen(1, true);
  const std::vector<double> w0(net.layer(0).params().begin(), net.layer(0).params().end());
  const std::vector<double> bn_buf(net.layer(1).buffers().begin(), net.layer(1).buffers().end());
  AdamState st = AdamState::for_network(net);
  const AdamConfig cfg = AdamConfig::features_preset();
  for (int step = 0; step < 100; ++step) {
    const Batch x = random_batch(8, {2, 11}, 500 + step);
    const auto loss = softmax_cross_entropy(net.forward(x, Mode::Train, step), random_targets(8, 4, step));
    adam_step(net, net.backward(loss.grad), st, cfg);
  }
  EXPECT_EQ(std::vector<double>(net.layer(0).params().begin(), net.layer(0).params().end()), w0);
  EXPECT_EQ(std::vector<double>(net.layer(1).buffers().begin(), net.layer(1).buffers().end()), bn_buf);
}

TEST(Adam, TrainingReducesLoss) {
  Network net = build_network(NetworkSpec{{1, 4}, {DenseSpec{4, 16}, ReluSpec{}, DenseSpec{16, 2}}}, 1);
  Batch x = random_batch(64, {1, 4}, 11);
  std::vector<int> y(64);
  for (std::size_t b = 0; b < 64; ++b) y[b] = x.row(b)[0] + x.row(b)[1] > 0 ? 1 : 0;
  AdamState st = AdamState::for_network(net);
  const AdamConfig cfg{0.01, 0.9, 0.999, 1e-7, 64};
  const double first = softmax_cross_entropy(net.forward(x, Mode::Eval), y).loss;
  for (int i = 0; i < 200; ++i) {
    const auto loss = softmax_cross_entropy(net.forward(x, Mode::Train), y);
    adam_step(net, net.backward(loss.grad), st, cfg);
  }
  EXPECT_LT(softmax_cross_entropy(net.forward(x, Mode::Eval), y).loss, 0.3 * first);
}

TEST(Network, CopyIsDeep) {
  Network a = build_network(mixed_spec(), 3);
  Network b = a;
  b.layer(0).params()[0] += 1.0;
  EXPECT_NE(a.flat_parameters(), b.flat_parameters());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  test::TempDir dir;
  Network net = build_network(mixed_spec(), 12);
  net.forward(random_batch(6, {2, 11}, 1), Mode::Train);
  net.set_frozen(4, true);
  CheckpointMetadata meta{12, 37, "pretrain", {{"scaler", {1.5, 2.0}}}};
  save_checkpoint(make_checkpoint(net, meta), dir.path() / "m.json");
  Network back = load_network(dir.path() / "m.json", mixed_spec());
  EXPECT_EQ(back.spec(), net.spec());
  EXPECT_EQ(back.flat_parameters(), net.flat_parameters());
  EXPECT_EQ(back.flat_buffers(), net.flat_buffers());
  EXPECT_EQ(back.freeze_mask(), net.freeze_mask());
  const Batch x = random_batch(3, {2, 11}, 5);
  EXPECT_EQ(back.forward(x, Mode::Eval).data, net.forward(x, Mode::Eval).data);
  const auto ck = load_checkpoint(dir.path() / "m.json");
  EXPECT_EQ(ck.metadata.seed, 12u);
  EXPECT_EQ(ck.metadata.epochs, 37);
  EXPECT_EQ(ck.metadata.source_tag, "pretrain");
  EXPECT_EQ(ck.metadata.extra, meta.extra);
}

TEST(Checkpoint, SpecialValuesSurvive) {
  Network net = build_network(NetworkSpec{{1, 1}, {DenseSpec{1, 2}}}, 1);
  net.set_flat_parameters(std::vector<double>{-0.0, 5e-324, 1.0 / 3.0, -1e308});
  const auto back = restore_network(checkpoint_from_json(checkpoint_to_json(make_checkpoint(net, {}))));
  const auto p = back.flat_parameters();
  EXPECT_TRUE(std::signbit(p[0]));
  EXPECT_EQ(p[1], 5e-324);
  EXPECT_EQ(p[2], 1.0 / 3.0);
  EXPECT_EQ(p[3], -1e308);
}

TEST(Checkpoint, TruncatedFileIsCorrupt) {
  test::TempDir dir;
  const std::string text = checkpoint_to_json(make_checkpoint(build_network(mixed_spec(), 1), {}));
  io::write_text(dir.path() / "t.json", text.substr(0, text.size() / 2));
  expect_error(ErrorCode::CorruptCheckpoint, [&] { load_checkpoint(dir.path() / "t.json"); });
}

TEST(Checkpoint, TamperedPayloadIsCorrupt) {
  auto j = nlohmann::json::parse(checkpoint_to_json(make_checkpoint(build_network(mixed_spec(), 1), {})));
  j["parameters"] = io::base64_encode(std::vector<std::uint8_t>(16, 0));
  expect_error(ErrorCode::CorruptCheckpoint, [&] { checkpoint_from_json(j.dump()); });
  j["parameters"] = "not base64!";
  expect_error(ErrorCode::CorruptCheckpoint, [&] { checkpoint_from_json(j.dump()); });
}

TEST(Checkpoint, WrongVersionRejected) {
  auto j = nlohmann::json::parse(checkpoint_to_json(make_checkpoint(build_network(mixed_spec(), 1), {})));
  j["format_version"] = 2;
  expect_error(ErrorCode::VersionMismatch, [&] { checkpoint_from_json(j.dump()); });
}

TEST(Checkpoint, ExpectedSpecMismatch) {
  test::TempDir dir;
  save_checkpoint(make_checkpoint(build_network(mixed_spec(), 1), {}), dir.path() / "m.json");
  expect_error(ErrorCode::ShapeMismatch, [&] { load_network(dir.path() / "m.json", default_mlp(22, 4)); });
  expect_error(ErrorCode::MissingFile, [&] { load_network(dir.path() / "nope.json"); });
}

}  // namespace
}  // namespace semg::nn
