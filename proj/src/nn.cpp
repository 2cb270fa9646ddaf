#include "semg/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "semg/error.hpp"
#include "semg/io.hpp"
#include "semg/rng.hpp"

namespace semg::nn {

// ---- Network ------------------------------------------------------------------

Network::Network(const Network& other)
    : spec_(other.spec_), frozen_(other.frozen_), activations_(other.activations_),
      cache_valid_(other.cache_valid_) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Network& Network::operator=(const Network& other) {
  if (this != &other) {
    Network copy(other);
    *this = std::move(copy);
  }
  return *this;
}

Network build_network(const NetworkSpec& spec, std::uint64_t seed) {
  const std::vector<Shape> shapes = spec.layer_shapes();
  Network net;
  net.spec_ = spec;
  Shape in = spec.input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    net.layers_.push_back(make_layer(spec.layers[i], in, derive_seed(seed, {i})));
    in = shapes[i];
  }
  net.frozen_.assign(spec.layers.size(), false);
  return net;
}

Batch Network::forward(const Batch& input, Mode mode, std::uint64_t dropout_seed) {
  if (input.shape != spec_.input || input.data.size() != input.rows * input.shape.size()) {
    throw Error(ErrorCode::ShapeMismatch, "input shape (" + std::to_string(input.shape.channels) + "x" +
                                              std::to_string(input.shape.length) + ") does not match network input");
  }
  cache_valid_ = false;
  activations_.resize(layers_.size() + 1);
  activations_[0] = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Batch& out = activations_[i + 1];
    out = Batch(input.rows, layers_[i]->output_shape);
    const ForwardContext ctx{mode, static_cast<bool>(frozen_[i]), derive_seed(dropout_seed, {i})};
    layers_[i]->forward(activations_[i], out, ctx);
  }
  Batch logits = activations_.back();
  if (mode == Mode::Train) {
    cache_valid_ = true;
  } else {
    activations_.clear();
  }
  return logits;
}

Gradients Network::backward(const Batch& dlogits) {
  if (!cache_valid_) throw Error(ErrorCode::StaleCache, "backward without a current train-mode forward");
  const Batch& out = activations_.back();
  if (dlogits.rows != out.rows || dlogits.shape != out.shape || dlogits.data.size() != out.data.size()) {
    throw Error(ErrorCode::ShapeMismatch, "gradient shape does not match the cached output");
  }
  Gradients grads(layers_.size());
  Batch dout = dlogits;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    Layer& l = *layers_[i];
    grads[i].assign(l.params().size(), 0.0);
    Batch din;
    Batch* din_ptr = nullptr;
    if (i > 0) {
      din = Batch(dout.rows, l.input_shape);
      din_ptr = &din;
    }
    l.backward(activations_[i], activations_[i + 1], dout, din_ptr, grads[i]);
    if (frozen_[i]) std::fill(grads[i].begin(), grads[i].end(), 0.0);
    if (i > 0) dout = std::move(din);
  }
  return grads;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += std::as_const(*l).params().size();
  return n;
}

std::vector<double> Network::flat_parameters() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& l : layers_) {
    const auto p = std::as_const(*l).params();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

void Network::set_flat_parameters(std::span<const double> values) {
  if (values.size() != parameter_count()) {
    throw Error(ErrorCode::ShapeMismatch, "expected " + std::to_string(parameter_count()) + " parameters, got " +
                                              std::to_string(values.size()));
  }
  std::size_t offset = 0;
  for (auto& l : layers_) {
    auto p = l->params();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), p.size(), p.begin());
    offset += p.size();
  }
  invalidate_cache();
}

std::vector<double> Network::flat_buffers() const {
  std::vector<double> out;
  for (const auto& l : layers_) {
    const auto b = std::as_const(*l).buffers();
    out.insert(out.end(), b.begin(), b.end());
  }
  return out;
}

void Network::set_flat_buffers(std::span<const double> values) {
  std::size_t total = 0;
  for (const auto& l : layers_) total += l->buffers().size();
  if (values.size() != total) {
    throw Error(ErrorCode::ShapeMismatch, "expected " + std::to_string(total) + " buffer values");
  }
  std::size_t offset = 0;
  for (auto& l : layers_) {
    auto b = l->buffers();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), b.size(), b.begin());
    offset += b.size();
  }
  invalidate_cache();
}

std::vector<std::size_t> Network::frozen_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < frozen_.size(); ++i) {
    if (frozen_[i]) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> Network::weight_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i]->is_weight_layer()) out.push_back(i);
  }
  return out;
}

// ---- loss -----------------------------------------------------------------------

Batch softmax(const Batch& logits) {
  Batch out(logits.rows, logits.shape);
  const std::size_t c = logits.shape.size();
  for (std::size_t b = 0; b < logits.rows; ++b) {
    const auto z = logits.row(b);
    auto p = out.row(b);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0;
    for (std::size_t k = 0; k < c; ++k) sum += (p[k] = std::exp(z[k] - mx));
    for (double& v : p) v /= sum;
  }
  return out;
}

LossResult softmax_cross_entropy(const Batch& logits, std::span<const int> targets) {
  if (targets.size() != logits.rows || logits.rows == 0) {
    throw Error(ErrorCode::ShapeMismatch, "need one target per logits row");
  }
  const std::size_t c = logits.shape.size();
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= c) {
      throw Error(ErrorCode::InvalidTarget, "target " + std::to_string(t) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  LossResult r;
  r.grad = softmax(logits);
  const double inv_b = 1.0 / static_cast<double>(logits.rows);
  double total = 0;
  for (std::size_t b = 0; b < logits.rows; ++b) {
    const auto z = logits.row(b);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0;
    for (double v : z) sum += std::exp(v - mx);
    const auto t = static_cast<std::size_t>(targets[b]);
    total += mx + std::log(sum) - z[t];
    auto g = r.grad.row(b);
    g[t] -= 1.0;
    for (double& v : g) v *= inv_b;
  }
  r.loss = total * inv_b;
  return r;
}

// ---- Adam -------------------------------------------------------------------------

void AdamConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorCode::InvalidConfig, "learning_rate must be positive");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw Error(ErrorCode::InvalidConfig, "beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw Error(ErrorCode::InvalidConfig, "beta2 must be in [0, 1)");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw Error(ErrorCode::InvalidConfig, "epsilon must be positive");
  if (batch_size == 0) throw Error(ErrorCode::InvalidConfig, "batch_size must be positive");
}

AdamConfig AdamConfig::features_preset() { return {0.001, 0.4, 0.1, 0.38, 256}; }
AdamConfig AdamConfig::raw_preset() { return {0.0002, 0.2, 0.9, 0.0001, 512}; }

void to_json(nlohmann::json& j, const AdamConfig& cfg) {
  j = {{"learning_rate", cfg.learning_rate},
       {"beta1", cfg.beta1},
       {"beta2", cfg.beta2},
       {"epsilon", cfg.epsilon},
       {"batch_size", cfg.batch_size}};
}

void from_json(const nlohmann::json& j, AdamConfig& cfg) {
  try {
    AdamConfig d = cfg;
    d.learning_rate = j.value("learning_rate", d.learning_rate);
    d.beta1 = j.value("beta1", d.beta1);
    d.beta2 = j.value("beta2", d.beta2);
    d.epsilon = j.value("epsilon", d.epsilon);
    d.batch_size = j.value("batch_size", d.batch_size);
    cfg = d;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("adam config: ") + e.what());
  }
}

AdamState AdamState::for_network(const Network& net) {
  AdamState s;
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    const std::size_t n = net.layer(i).params().size();
    s.m.emplace_back(n, 0.0);
    s.v.emplace_back(n, 0.0);
  }
  return s;
}

void adam_step(Network& net, const Gradients& grads, AdamState& state, const AdamConfig& cfg) {
  if (grads.size() != net.layer_count() || state.m.size() != net.layer_count()) {
    throw Error(ErrorCode::ShapeMismatch, "gradient/optimizer state does not match the network");
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    if (net.is_frozen(i)) continue;
    auto p = net.layer(i).params();
    const auto& g = grads[i];
    if (g.size() != p.size()) throw Error(ErrorCode::ShapeMismatch, "gradient size mismatch");
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      p[k] -= cfg.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.epsilon);
    }
  }
  net.invalidate_cache();
}

// ---- checkpoints --------------------------------------------------------------------

namespace {

std::string encode_doubles(std::span<const double> values) {
  std::vector<std::uint8_t> bytes(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return io::base64_encode(bytes);
}

std::vector<double> decode_doubles(const std::string& text) {
  const std::vector<std::uint8_t> bytes = io::base64_decode(text);
  if (bytes.size() % 8 != 0) throw Error(ErrorCode::CorruptCheckpoint, "payload is not a whole number of f64");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t{bytes[i * 8 + b]} << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

}  // namespace

NetworkCheckpoint make_checkpoint(const Network& net, CheckpointMetadata metadata) {
  NetworkCheckpoint c;
  c.spec = net.spec();
  c.parameters = net.flat_parameters();
  c.buffers = net.flat_buffers();
  c.freeze_mask = net.freeze_mask();
  c.metadata = std::move(metadata);
  return c;
}

Network restore_network(const NetworkCheckpoint& ckpt) {
  Network net;
  try {
    net = build_network(ckpt.spec, 0);
  } catch (const Error& e) {
    throw Error(ErrorCode::CorruptCheckpoint, std::string("stored spec is invalid: ") + e.what());
  }
  if (ckpt.parameters.size() != net.parameter_count() || ckpt.buffers.size() != net.flat_buffers().size() ||
      ckpt.freeze_mask.size() != net.layer_count()) {
    throw Error(ErrorCode::CorruptCheckpoint, "stored tensors do not match the stored spec");
  }
  net.set_flat_parameters(ckpt.parameters);
  net.set_flat_buffers(ckpt.buffers);
  for (std::size_t i = 0; i < net.layer_count(); ++i) net.set_frozen(i, ckpt.freeze_mask[i]);
  return net;
}

std::string checkpoint_to_json(const NetworkCheckpoint& ckpt) {
  nlohmann::json j;
  j["format_version"] = ckpt.format_version;
  j["spec"] = ckpt.spec;
  j["freeze_mask"] = ckpt.freeze_mask;
  j["metadata"] = {{"seed", ckpt.metadata.seed},
                   {"epochs", ckpt.metadata.epochs},
                   {"source_tag", ckpt.metadata.source_tag},
                   {"extra", ckpt.metadata.extra}};
  j["parameter_count"] = ckpt.parameters.size();
  j["parameters"] = encode_doubles(ckpt.parameters);
  j["buffers"] = encode_doubles(ckpt.buffers);
  return j.dump(2) + "\n";
}

NetworkCheckpoint checkpoint_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, std::string("unparsable checkpoint: ") + e.what());
  }
  if (!j.is_object() || !j.contains("format_version") || !j["format_version"].is_number_integer()) {
    throw Error(ErrorCode::CorruptCheckpoint, "checkpoint lacks format_version");
  }
  const int version = j["format_version"].get<int>();
  if (version != kCheckpointFormatVersion) {
    throw Error(ErrorCode::VersionMismatch, "checkpoint format " + std::to_string(version) + ", expected " +
                                                std::to_string(kCheckpointFormatVersion));
  }
  NetworkCheckpoint c;
  try {
    c.spec = j.at("spec").get<NetworkSpec>();
    c.freeze_mask = j.at("freeze_mask").get<std::vector<bool>>();
    const auto& m = j.at("metadata");
    c.metadata.seed = m.at("seed").get<std::uint64_t>();
    c.metadata.epochs = m.at("epochs").get<int>();
    c.metadata.source_tag = m.at("source_tag").get<std::string>();
    c.metadata.extra = m.value("extra", nlohmann::json::object());
    c.parameters = decode_doubles(j.at("parameters").get<std::string>());
    c.buffers = decode_doubles(j.at("buffers").get<std::string>());
    if (j.at("parameter_count").get<std::size_t>() != c.parameters.size()) {
      throw Error(ErrorCode::CorruptCheckpoint, "parameter_count disagrees with payload");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, std::string("malformed checkpoint: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::CorruptCheckpoint) throw;
    throw Error(ErrorCode::CorruptCheckpoint, e.what());
  }
  return c;
}

void save_checkpoint(const NetworkCheckpoint& ckpt, const std::filesystem::path& path) {
  io::write_text(path, checkpoint_to_json(ckpt));
}

NetworkCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return checkpoint_from_json(std::string(bytes.begin(), bytes.end()));
}

Network load_network(const std::filesystem::path& path, const std::optional<NetworkSpec>& expected) {
  const NetworkCheckpoint c = load_checkpoint(path);
  if (expected && !(*expected == c.spec)) {
    throw Error(ErrorCode::ShapeMismatch, "checkpoint " + path.string() + " holds a different architecture");
  }
  Network net = restore_network(c);
  return net;
}

}  // namespace semg::nn
