#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

namespace semg::nn {

/// Per-sample tensor shape. Flat vectors use channels == 1.
struct Shape {
  std::size_t channels = 1;
  std::size_t length = 1;

  std::size_t size() const noexcept { return channels * length; }
  bool operator==(const Shape&) const = default;
};

struct DenseSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  bool operator==(const DenseSpec&) const = default;
};

/// Cross-correlation with valid padding: out_len = (len - kernel) / stride + 1.
struct Conv1DSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  bool operator==(const Conv1DSpec&) const = default;
};

/// Normalizes per feature on flat input (dim == length) and per channel on
/// channelled input (dim == channels, statistics pooled over batch and time).
struct BatchNormSpec {
  std::size_t dim = 0;
  bool operator==(const BatchNormSpec&) const = default;
};

struct DropoutSpec {
  double rate = 0.0;
  bool operator==(const DropoutSpec&) const = default;
};

struct ReluSpec {
  bool operator==(const ReluSpec&) const = default;
};

struct FlattenSpec {
  bool operator==(const FlattenSpec&) const = default;
};

/// Terminal marker: logits pass through unchanged; the loss applies softmax.
struct SoftmaxOutputSpec {
  std::size_t dim = 0;
  bool operator==(const SoftmaxOutputSpec&) const = default;
};

using LayerSpec = std::variant<DenseSpec, Conv1DSpec, BatchNormSpec, DropoutSpec, ReluSpec,
                               FlattenSpec, SoftmaxOutputSpec>;

struct NetworkSpec {
  Shape input;
  std::vector<LayerSpec> layers;

  /// Output shape of every layer (element i is the output of layer i).
  /// Throws ShapeMismatch when adjacent layers do not compose or the output
  /// is not a flat vector.
  std::vector<Shape> layer_shapes() const;
  std::size_t classes() const;

  bool operator==(const NetworkSpec&) const = default;
};

void to_json(nlohmann::json& j, const NetworkSpec& spec);
void from_json(const nlohmann::json& j, NetworkSpec& spec);

/// Stand-in architectures (the tuned ones are not published):
/// Dense(in, 512), ReLU, Dropout(0.3), Dense(512, 128), ReLU, Dense(128, classes).
NetworkSpec default_mlp(std::size_t input_dim, std::size_t classes);
/// Conv1D(C, 32, 9, 2), BN, ReLU, Conv1D(32, 64, 9, 2), BN, ReLU, Flatten,
/// Dense(., 128), ReLU, Dropout(0.3), Dense(128, classes).
NetworkSpec default_cnn(std::size_t channels, std::size_t length, std::size_t classes);

/// A batch of samples stored row-major: row b holds one sample in
/// channel-major order.
struct Batch {
  std::size_t rows = 0;
  Shape shape;
  std::vector<double> data;

  Batch() = default;
  Batch(std::size_t rows_, Shape shape_) : rows(rows_), shape(shape_), data(rows_ * shape_.size(), 0.0) {}

  std::span<double> row(std::size_t b) { return {data.data() + b * shape.size(), shape.size()}; }
  std::span<const double> row(std::size_t b) const { return {data.data() + b * shape.size(), shape.size()}; }
};

enum class Mode { Train, Eval };

struct ForwardContext {
  Mode mode = Mode::Eval;
  bool frozen = false;
  std::uint64_t seed = 0;
};

class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerSpec spec() const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;

  /// Writes `out` (already sized by the caller).
  virtual void forward(const Batch& in, Batch& out, const ForwardContext& ctx) = 0;
  /// Given dLoss/dout, writes parameter gradients into `grad` (sized like
  /// params()) and, when `din` is non-null, dLoss/din.
  virtual void backward(const Batch& in, const Batch& out, const Batch& dout, Batch* din,
                        std::span<double> grad) = 0;

  virtual std::span<double> params() { return {}; }
  virtual std::span<const double> params() const { return {}; }
  /// Non-trainable state that still travels with checkpoints (BN running stats).
  virtual std::span<double> buffers() { return {}; }
  virtual std::span<const double> buffers() const { return {}; }

  /// Dense and Conv1D; these define the first/last retraining scopes.
  virtual bool is_weight_layer() const { return false; }

  Shape input_shape;
  Shape output_shape;
};

std::unique_ptr<Layer> make_layer(const LayerSpec& spec, Shape input, std::uint64_t init_seed);

using Gradients = std::vector<std::vector<double>>;

class Network {
 public:
  Network() = default;
  Network(const Network& other);
  Network& operator=(const Network& other);
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const NetworkSpec& spec() const noexcept { return spec_; }
  std::size_t layer_count() const noexcept { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }
  const Layer& layer(std::size_t i) const { return *layers_[i]; }
  std::size_t classes() const { return spec_.classes(); }

  /// Logits [rows x classes]. Train mode caches activations for backward and
  /// draws dropout masks from `dropout_seed`.
  Batch forward(const Batch& input, Mode mode, std::uint64_t dropout_seed = 0);

  /// Exact reverse-mode gradients for the batch cached by the last train-mode
  /// forward. Frozen layers get all-zero gradients. Throws StaleCache when no
  /// matching forward is cached (none yet, eval-mode only, or parameters
  /// changed since).
  Gradients backward(const Batch& dlogits);

  void invalidate_cache() noexcept { cache_valid_ = false; }

  std::size_t parameter_count() const;
  std::vector<double> flat_parameters() const;
  void set_flat_parameters(std::span<const double> values);
  std::vector<double> flat_buffers() const;
  void set_flat_buffers(std::span<const double> values);

  bool is_frozen(std::size_t layer) const { return frozen_[layer]; }
  void set_frozen(std::size_t layer, bool frozen) { frozen_[layer] = frozen; }
  std::vector<bool> freeze_mask() const { return frozen_; }
  std::vector<std::size_t> frozen_layers() const;
  std::vector<std::size_t> weight_layers() const;

  friend Network build_network(const NetworkSpec& spec, std::uint64_t seed);

 private:
  NetworkSpec spec_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<bool> frozen_;
  std::vector<Batch> activations_;  // activations_[0] = input, [i+1] = output of layer i
  bool cache_valid_ = false;
};

/// Dense/Conv weights He-uniform in fan-in, biases 0, BN scale 1 shift 0.
/// Layer i draws from derive_seed(seed, {i}).
Network build_network(const NetworkSpec& spec, std::uint64_t seed);

struct LossResult {
  double loss = 0;
  Batch grad;  // dLoss/dlogits
};

/// Mean softmax cross-entropy with log-sum-exp; gradient (softmax - onehot)/B.
/// Throws InvalidTarget for targets outside [0, C).
LossResult softmax_cross_entropy(const Batch& logits, std::span<const int> targets);

Batch softmax(const Batch& logits);

// ---- Adam -------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  std::size_t batch_size = 32;

  void validate() const;

  /// Tuned settings for the feature MLP: 0.001 / 0.4 / 0.1 / 0.38 / 256.
  static AdamConfig features_preset();
  /// Tuned settings for the raw-signal CNN: 0.0002 / 0.2 / 0.9 / 0.0001 / 512.
  static AdamConfig raw_preset();
};

void to_json(nlohmann::json& j, const AdamConfig& cfg);
/// Keys absent from `j` keep the value already in `cfg`.
void from_json(const nlohmann::json& j, AdamConfig& cfg);

struct AdamState {
  Gradients m;
  Gradients v;
  std::uint64_t t = 0;

  static AdamState for_network(const Network& net);
};

/// One bias-corrected Adam update. Frozen layers are left untouched.
void adam_step(Network& net, const Gradients& grads, AdamState& state, const AdamConfig& cfg);

// ---- checkpoints --------------------------------------------------------------

inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointMetadata {
  std::uint64_t seed = 0;
  int epochs = 0;
  std::string source_tag;
  /// Free-form pipeline settings (model kind, input scaler, configs).
  nlohmann::json extra = nlohmann::json::object();
};

struct NetworkCheckpoint {
  int format_version = kCheckpointFormatVersion;
  NetworkSpec spec;
  std::vector<double> parameters;
  std::vector<double> buffers;
  std::vector<bool> freeze_mask;
  CheckpointMetadata metadata;
};

NetworkCheckpoint make_checkpoint(const Network& net, CheckpointMetadata metadata);
/// Throws CorruptCheckpoint when parameter/buffer counts disagree with the spec.
Network restore_network(const NetworkCheckpoint& ckpt);

/// JSON envelope; parameters and buffers are base64 of little-endian f64.
std::string checkpoint_to_json(const NetworkCheckpoint& ckpt);
/// Throws VersionMismatch for other format versions and CorruptCheckpoint
/// for unparsable or inconsistent content.
NetworkCheckpoint checkpoint_from_json(const std::string& text);

void save_checkpoint(const NetworkCheckpoint& ckpt, const std::filesystem::path& path);
NetworkCheckpoint load_checkpoint(const std::filesystem::path& path);
/// Loads and restores; throws ShapeMismatch when `expected` is given and the
/// stored spec differs.
Network load_network(const std::filesystem::path& path,
                     const std::optional<NetworkSpec>& expected = std::nullopt);

}  // namespace semg::nn
