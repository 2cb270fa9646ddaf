#include <algorithm>
#include <cmath>

#include "semg/error.hpp"
#include "semg/nn.hpp"
#include "semg/rng.hpp"

namespace semg::nn {

namespace {

constexpr double kBatchNormEpsilon = 1e-5;
constexpr double kBatchNormMomentum = 0.9;

[[noreturn]] void shape_error(std::size_t index, const std::string& what) {
  throw Error(ErrorCode::ShapeMismatch, "layer " + std::to_string(index) + ": " + what);
}

std::string shape_text(Shape s) {
  return "(" + std::to_string(s.channels) + "x" + std::to_string(s.length) + ")";
}

void he_uniform(std::span<double> weights, std::size_t fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& w : weights) w = rng.uniform(-limit, limit);
}

class Dense final : public Layer {
 public:
  explicit Dense(DenseSpec s) : spec_(s), params_(s.in * s.out + s.out, 0.0) {}

  LayerSpec spec() const override { return spec_; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }
  bool is_weight_layer() const override { return true; }
  std::span<double> params() override { return params_; }
  std::span<const double> params() const override { return params_; }

  void init(Rng& rng) { he_uniform(std::span(params_).first(spec_.in * spec_.out), spec_.in, rng); }

  // Rows are processed kRowBlock at a time so each weight row is read once per
  // block. Every output still accumulates in the same order as a row-by-row loop.
  void forward(const Batch& in, Batch& out, const ForwardContext&) override {
    const std::size_t n_in = spec_.in, n_out = spec_.out;
    const double* w = params_.data();
    const double* bias = w + n_in * n_out;
    std::size_t b = 0;
    for (; b + kRowBlock <= in.rows; b += kRowBlock) {
      const double* x0 = in.data.data() + b * n_in;
      const double* x1 = x0 + n_in;
      const double* x2 = x1 + n_in;
      const double* x3 = x2 + n_in;
      double* y = out.data.data() + b * n_out;
      for (std::size_t o = 0; o < n_out; ++o) {
        const double* wo = w + o * n_in;
        double a0 = bias[o], a1 = bias[o], a2 = bias[o], a3 = bias[o];
        for (std::size_t i = 0; i < n_in; ++i) {
          a0 += wo[i] * x0[i];
          a1 += wo[i] * x1[i];
          a2 += wo[i] * x2[i];
          a3 += wo[i] * x3[i];
        }
        y[o] = a0;
        y[n_out + o] = a1;
        y[2 * n_out + o] = a2;
        y[3 * n_out + o] = a3;
      }
    }
    for (; b < in.rows; ++b) {
      const double* x = in.data.data() + b * n_in;
      double* y = out.data.data() + b * n_out;
      for (std::size_t o = 0; o < n_out; ++o) {
        const double* wo = w + o * n_in;
        double acc = bias[o];
        for (std::size_t i = 0; i < n_in; ++i) acc += wo[i] * x[i];
        y[o] = acc;
      }
    }
  }

  void backward(const Batch& in, const Batch&, const Batch& dout, Batch* din,
                std::span<double> grad) override {
    const std::size_t n_in = spec_.in, n_out = spec_.out;
    std::fill(grad.begin(), grad.end(), 0.0);
    double* gw = grad.data();
    double* gb = gw + n_in * n_out;
    const double* w = params_.data();
    if (din) std::fill(din->data.begin(), din->data.end(), 0.0);
    std::size_t b = 0;
    for (; b + kRowBlock <= in.rows; b += kRowBlock) {
      const double* x0 = in.data.data() + b * n_in;
      const double* x1 = x0 + n_in;
      const double* x2 = x1 + n_in;
      const double* x3 = x2 + n_in;
      const double* dy = dout.data.data() + b * n_out;
      for (std::size_t o = 0; o < n_out; ++o) {
        const double g0 = dy[o], g1 = dy[n_out + o], g2 = dy[2 * n_out + o], g3 = dy[3 * n_out + o];
        gb[o] = gb[o] + g0 + g1 + g2 + g3;
        double* gwo = gw + o * n_in;
        for (std::size_t i = 0; i < n_in; ++i) gwo[i] = gwo[i] + g0 * x0[i] + g1 * x1[i] + g2 * x2[i] + g3 * x3[i];
        if (din) {
          double* dx0 = din->data.data() + b * n_in;
          double* dx1 = dx0 + n_in;
          double* dx2 = dx1 + n_in;
          double* dx3 = dx2 + n_in;
          const double* wo = w + o * n_in;
          for (std::size_t i = 0; i < n_in; ++i) {
            dx0[i] += g0 * wo[i];
            dx1[i] += g1 * wo[i];
            dx2[i] += g2 * wo[i];
            dx3[i] += g3 * wo[i];
          }
        }
      }
    }
    for (; b < in.rows; ++b) {
      const double* x = in.data.data() + b * n_in;
      const double* dy = dout.data.data() + b * n_out;
      double* dx = din ? din->data.data() + b * n_in : nullptr;
      for (std::size_t o = 0; o < n_out; ++o) {
        const double g = dy[o];
        gb[o] += g;
        double* gwo = gw + o * n_in;
        for (std::size_t i = 0; i < n_in; ++i) gwo[i] += g * x[i];
        if (dx) {
          const double* wo = w + o * n_in;
          for (std::size_t i = 0; i < n_in; ++i) dx[i] += g * wo[i];
        }
      }
    }
  }

 private:
  static constexpr std::size_t kRowBlock = 4;
  DenseSpec spec_;
  std::vector<double> params_;  // W [out x in] then bias [out]
};

class Conv1D final : public Layer {
 public:
  explicit Conv1D(Conv1DSpec s)
      : spec_(s), params_(s.out_channels * s.in_channels * s.kernel + s.out_channels, 0.0) {}

  LayerSpec spec() const override { return spec_; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv1D>(*this); }
  bool is_weight_layer() const override { return true; }
  std::span<double> params() override { return params_; }
  std::span<const double> params() const override { return params_; }

  void init(Rng& rng) {
    const std::size_t fan_in = spec_.in_channels * spec_.kernel;
    he_uniform(std::span(params_).first(spec_.out_channels * fan_in), fan_in, rng);
  }

  void forward(const Batch& in, Batch& out, const ForwardContext&) override {
    const std::size_t ci = spec_.in_channels, co = spec_.out_channels, k = spec_.kernel, s = spec_.stride;
    const std::size_t len_in = input_shape.length, len_out = output_shape.length;
    const double* bias = params_.data() + co * ci * k;
    for (std::size_t b = 0; b < in.rows; ++b) {
      const double* x = in.data.data() + b * ci * len_in;
      double* y = out.data.data() + b * co * len_out;
      for (std::size_t o = 0; o < co; ++o) {
        double* yo = y + o * len_out;
        std::fill(yo, yo + len_out, bias[o]);
        for (std::size_t c = 0; c < ci; ++c) {
          const double* xc = x + c * len_in;
          const double* w = params_.data() + (o * ci + c) * k;
          for (std::size_t j = 0; j < k; ++j) {
            const double wj = w[j];
            const double* xs = xc + j;
            for (std::size_t t = 0; t < len_out; ++t) yo[t] += wj * xs[t * s];
          }
        }
      }
    }
  }

  void backward(const Batch& in, const Batch&, const Batch& dout, Batch* din,
                std::span<double> grad) override {
    const std::size_t ci = spec_.in_channels, co = spec_.out_channels, k = spec_.kernel, s = spec_.stride;
    const std::size_t len_in = input_shape.length, len_out = output_shape.length;
    std::fill(grad.begin(), grad.end(), 0.0);
    double* gbias = grad.data() + co * ci * k;
    if (din) std::fill(din->data.begin(), din->data.end(), 0.0);
    for (std::size_t b = 0; b < in.rows; ++b) {
      const double* x = in.data.data() + b * ci * len_in;
      const double* dy = dout.data.data() + b * co * len_out;
      double* dx = din ? din->data.data() + b * ci * len_in : nullptr;
      for (std::size_t o = 0; o < co; ++o) {
        const double* dyo = dy + o * len_out;
        double sum = 0;
        for (std::size_t t = 0; t < len_out; ++t) sum += dyo[t];
        gbias[o] += sum;
        for (std::size_t c = 0; c < ci; ++c) {
          const double* xc = x + c * len_in;
          const double* w = params_.data() + (o * ci + c) * k;
          double* gw = grad.data() + (o * ci + c) * k;
          for (std::size_t j = 0; j < k; ++j) {
            const double* xs = xc + j;
            double acc = 0;
            for (std::size_t t = 0; t < len_out; ++t) acc += dyo[t] * xs[t * s];
            gw[j] += acc;
            if (dx) {
              double* dxs = dx + c * len_in + j;
              const double wj = w[j];
              for (std::size_t t = 0; t < len_out; ++t) dxs[t * s] += wj * dyo[t];
            }
          }
        }
      }
    }
  }

 private:
  Conv1DSpec spec_;
  std::vector<double> params_;  // W [out x in x kernel] then bias [out]
};

class BatchNorm final : public Layer {
 public:
  BatchNorm(BatchNormSpec s, Shape input) : spec_(s), params_(2 * s.dim), buffers_(2 * s.dim) {
    std::fill(params_.begin(), params_.begin() + static_cast<std::ptrdiff_t>(s.dim), 1.0);
    std::fill(params_.begin() + static_cast<std::ptrdiff_t>(s.dim), params_.end(), 0.0);
    std::fill(buffers_.begin(), buffers_.begin() + static_cast<std::ptrdiff_t>(s.dim), 0.0);
    std::fill(buffers_.begin() + static_cast<std::ptrdiff_t>(s.dim), buffers_.end(), 1.0);
    inner_ = input.channels == 1 ? 1 : input.length;
  }

  LayerSpec spec() const override { return spec_; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm>(*this); }
  std::span<double> params() override { return params_; }
  std::span<const double> params() const override { return params_; }
  std::span<double> buffers() override { return buffers_; }
  std::span<const double> buffers() const override { return buffers_; }

  void forward(const Batch& in, Batch& out, const ForwardContext& ctx) override {
    const std::size_t g_count = spec_.dim, inner = inner_, rows = in.rows;
    const double* gamma = params_.data();
    const double* beta = gamma + g_count;
    double* run_mean = buffers_.data();
    double* run_var = run_mean + g_count;
    used_batch_stats_ = ctx.mode == Mode::Train && !ctx.frozen;
    mean_.assign(g_count, 0.0);
    inv_std_.assign(g_count, 0.0);
    const double m = static_cast<double>(rows * inner);
    for (std::size_t g = 0; g < g_count; ++g) {
      double mu, var;
      if (used_batch_stats_) {
        double s = 0;
        for (std::size_t b = 0; b < rows; ++b) {
          const double* x = in.data.data() + (b * g_count + g) * inner;
          for (std::size_t t = 0; t < inner; ++t) s += x[t];
        }
        mu = s / m;
        double ss = 0;
        for (std::size_t b = 0; b < rows; ++b) {
          const double* x = in.data.data() + (b * g_count + g) * inner;
          for (std::size_t t = 0; t < inner; ++t) ss += (x[t] - mu) * (x[t] - mu);
        }
        var = ss / m;
        run_mean[g] = kBatchNormMomentum * run_mean[g] + (1.0 - kBatchNormMomentum) * mu;
        run_var[g] = kBatchNormMomentum * run_var[g] + (1.0 - kBatchNormMomentum) * var;
      } else {
        mu = run_mean[g];
        var = run_var[g];
      }
      mean_[g] = mu;
      inv_std_[g] = 1.0 / std::sqrt(var + kBatchNormEpsilon);
      for (std::size_t b = 0; b < rows; ++b) {
        const std::size_t base = (b * g_count + g) * inner;
        for (std::size_t t = 0; t < inner; ++t) {
          out.data[base + t] = gamma[g] * (in.data[base + t] - mu) * inv_std_[g] + beta[g];
        }
      }
    }
  }

  void backward(const Batch& in, const Batch&, const Batch& dout, Batch* din,
                std::span<double> grad) override {
    const std::size_t g_count = spec_.dim, inner = inner_, rows = in.rows;
    const double* gamma = params_.data();
    const double m = static_cast<double>(rows * inner);
    for (std::size_t g = 0; g < g_count; ++g) {
      double sum_dy = 0, sum_dy_xhat = 0;
      for (std::size_t b = 0; b < rows; ++b) {
        const std::size_t base = (b * g_count + g) * inner;
        for (std::size_t t = 0; t < inner; ++t) {
          const double xhat = (in.data[base + t] - mean_[g]) * inv_std_[g];
          sum_dy += dout.data[base + t];
          sum_dy_xhat += dout.data[base + t] * xhat;
        }
      }
      grad[g] = sum_dy_xhat;
      grad[g_count + g] = sum_dy;
      if (!din) continue;
      const double scale = gamma[g] * inv_std_[g];
      for (std::size_t b = 0; b < rows; ++b) {
        const std::size_t base = (b * g_count + g) * inner;
        for (std::size_t t = 0; t < inner; ++t) {
          if (used_batch_stats_) {
            const double xhat = (in.data[base + t] - mean_[g]) * inv_std_[g];
            din->data[base + t] = scale / m * (m * dout.data[base + t] - sum_dy - xhat * sum_dy_xhat);
          } else {
            din->data[base + t] = scale * dout.data[base + t];
          }
        }
      }
    }
  }

 private:
  BatchNormSpec spec_;
  std::vector<double> params_;   // gamma [dim] then beta [dim]
  std::vector<double> buffers_;  // running mean [dim] then running variance [dim]
  std::size_t inner_ = 1;
  std::vector<double> mean_, inv_std_;
  bool used_batch_stats_ = false;
};

class Dropout final : public Layer {
 public:
  explicit Dropout(DropoutSpec s) : spec_(s) {}

  LayerSpec spec() const override { return spec_; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dropout>(*this); }

  void forward(const Batch& in, Batch& out, const ForwardContext& ctx) override {
    if (ctx.mode == Mode::Eval || spec_.rate == 0.0) {
      mask_.assign(in.data.size(), 1.0);
      out.data = in.data;
      return;
    }
    Rng rng(ctx.seed);
    const double keep = 1.0 - spec_.rate;
    mask_.resize(in.data.size());
    for (std::size_t i = 0; i < in.data.size(); ++i) {
      mask_[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
      out.data[i] = in.data[i] * mask_[i];
    }
  }

  void backward(const Batch&, const Batch&, const Batch& dout, Batch* din, std::span<double>) override {
    if (!din) return;
    for (std::size_t i = 0; i < dout.data.size(); ++i) din->data[i] = dout.data[i] * mask_[i];
  }

 private:
  DropoutSpec spec_;
  std::vector<double> mask_;
};

class Relu final : public Layer {
 public:
  LayerSpec spec() const override { return ReluSpec{}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(*this); }

  void forward(const Batch& in, Batch& out, const ForwardContext&) override {
    for (std::size_t i = 0; i < in.data.size(); ++i) out.data[i] = in.data[i] > 0.0 ? in.data[i] : 0.0;
  }

  void backward(const Batch& in, const Batch&, const Batch& dout, Batch* din, std::span<double>) override {
    if (!din) return;
    for (std::size_t i = 0; i < in.data.size(); ++i) din->data[i] = in.data[i] > 0.0 ? dout.data[i] : 0.0;
  }
};

/// Flatten and the softmax-output marker share the identity data path.
class Identity final : public Layer {
 public:
  explicit Identity(LayerSpec s) : spec_(std::move(s)) {}

  LayerSpec spec() const override { return spec_; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Identity>(*this); }

  void forward(const Batch& in, Batch& out, const ForwardContext&) override { out.data = in.data; }
  void backward(const Batch&, const Batch&, const Batch& dout, Batch* din, std::span<double>) override {
    if (din) din->data = dout.data;
  }

 private:
  LayerSpec spec_;
};

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

Shape output_shape_of(const LayerSpec& spec, Shape in, std::size_t index) {
  return std::visit(
      overloaded{
          [&](const DenseSpec& s) {
            if (in.channels != 1 || in.length != s.in || s.out == 0) {
              shape_error(index, "Dense(" + std::to_string(s.in) + ") cannot take " + shape_text(in));
            }
            return Shape{1, s.out};
          },
          [&](const Conv1DSpec& s) {
            if (s.kernel == 0 || s.stride == 0 || s.out_channels == 0 || in.channels != s.in_channels ||
                in.length < s.kernel) {
              shape_error(index, "Conv1D(" + std::to_string(s.in_channels) + ") cannot take " + shape_text(in));
            }
            return Shape{s.out_channels, (in.length - s.kernel) / s.stride + 1};
          },
          [&](const BatchNormSpec& s) {
            const std::size_t expected = in.channels == 1 ? in.length : in.channels;
            if (s.dim != expected) {
              shape_error(index, "BatchNorm(" + std::to_string(s.dim) + ") cannot take " + shape_text(in));
            }
            return in;
          },
          [&](const DropoutSpec& s) {
            if (!(s.rate >= 0.0 && s.rate < 1.0)) shape_error(index, "dropout rate must be in [0, 1)");
            return in;
          },
          [&](const ReluSpec&) { return in; },
          [&](const FlattenSpec&) { return Shape{1, in.size()}; },
          [&](const SoftmaxOutputSpec& s) {
            if (in.channels != 1 || in.length != s.dim) {
              shape_error(index, "softmax output dim " + std::to_string(s.dim) + " vs " + shape_text(in));
            }
            return in;
          },
      },
      spec);
}

}  // namespace

std::vector<Shape> NetworkSpec::layer_shapes() const {
  if (layers.empty()) throw Error(ErrorCode::ShapeMismatch, "network has no layers");
  if (input.size() == 0) throw Error(ErrorCode::ShapeMismatch, "empty input shape");
  std::vector<Shape> shapes;
  Shape current = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (std::holds_alternative<SoftmaxOutputSpec>(layers[i]) && i + 1 != layers.size()) {
      shape_error(i, "softmax output must be the final layer");
    }
    current = output_shape_of(layers[i], current, i);
    shapes.push_back(current);
  }
  if (current.channels != 1) throw Error(ErrorCode::ShapeMismatch, "network output must be flat");
  return shapes;
}

std::size_t NetworkSpec::classes() const { return layer_shapes().back().length; }

std::unique_ptr<Layer> make_layer(const LayerSpec& spec, Shape input, std::uint64_t init_seed) {
  Rng rng(init_seed);
  std::unique_ptr<Layer> layer = std::visit(
      overloaded{
          [&](const DenseSpec& s) -> std::unique_ptr<Layer> {
            auto l = std::make_unique<Dense>(s);
            l->init(rng);
            return l;
          },
          [&](const Conv1DSpec& s) -> std::unique_ptr<Layer> {
            auto l = std::make_unique<Conv1D>(s);
            l->init(rng);
            return l;
          },
          [&](const BatchNormSpec& s) -> std::unique_ptr<Layer> { return std::make_unique<BatchNorm>(s, input); },
          [&](const DropoutSpec& s) -> std::unique_ptr<Layer> { return std::make_unique<Dropout>(s); },
          [&](const ReluSpec&) -> std::unique_ptr<Layer> { return std::make_unique<Relu>(); },
          [&](const FlattenSpec& s) -> std::unique_ptr<Layer> { return std::make_unique<Identity>(s); },
          [&](const SoftmaxOutputSpec& s) -> std::unique_ptr<Layer> { return std::make_unique<Identity>(s); },
      },
      spec);
  layer->input_shape = input;
  layer->output_shape = output_shape_of(spec, input, 0);
  return layer;
}

// ---- spec JSON --------------------------------------------------------------

void to_json(nlohmann::json& j, const NetworkSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : spec.layers) {
    layers.push_back(std::visit(
        overloaded{
            [](const DenseSpec& s) { return nlohmann::json{{"type", "dense"}, {"in", s.in}, {"out", s.out}}; },
            [](const Conv1DSpec& s) {
              return nlohmann::json{{"type", "conv1d"},
                                    {"in_channels", s.in_channels},
                                    {"out_channels", s.out_channels},
                                    {"kernel", s.kernel},
                                    {"stride", s.stride}};
            },
            [](const BatchNormSpec& s) { return nlohmann::json{{"type", "batchnorm"}, {"dim", s.dim}}; },
            [](const DropoutSpec& s) { return nlohmann::json{{"type", "dropout"}, {"rate", s.rate}}; },
            [](const ReluSpec&) { return nlohmann::json{{"type", "relu"}}; },
            [](const FlattenSpec&) { return nlohmann::json{{"type", "flatten"}}; },
            [](const SoftmaxOutputSpec& s) { return nlohmann::json{{"type", "softmax_output"}, {"dim", s.dim}}; },
        },
        l));
  }
  j = {{"input", {{"channels", spec.input.channels}, {"length", spec.input.length}}}, {"layers", layers}};
}

void from_json(const nlohmann::json& j, NetworkSpec& spec) {
  try {
    spec.input = {j.at("input").at("channels").get<std::size_t>(), j.at("input").at("length").get<std::size_t>()};
    spec.layers.clear();
    for (const auto& l : j.at("layers")) {
      const std::string type = l.at("type").get<std::string>();
      if (type == "dense") {
        spec.layers.emplace_back(DenseSpec{l.at("in").get<std::size_t>(), l.at("out").get<std::size_t>()});
      } else if (type == "conv1d") {
        spec.layers.emplace_back(Conv1DSpec{l.at("in_channels").get<std::size_t>(),
                                            l.at("out_channels").get<std::size_t>(),
                                            l.at("kernel").get<std::size_t>(), l.value("stride", std::size_t{1})});
      } else if (type == "batchnorm") {
        spec.layers.emplace_back(BatchNormSpec{l.at("dim").get<std::size_t>()});
      } else if (type == "dropout") {
        spec.layers.emplace_back(DropoutSpec{l.at("rate").get<double>()});
      } else if (type == "relu") {
        spec.layers.emplace_back(ReluSpec{});
      } else if (type == "flatten") {
        spec.layers.emplace_back(FlattenSpec{});
      } else if (type == "softmax_output") {
        spec.layers.emplace_back(SoftmaxOutputSpec{l.at("dim").get<std::size_t>()});
      } else {
        throw Error(ErrorCode::InvalidConfig, "unknown layer type '" + type + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("network spec: ") + e.what());
  }
}

NetworkSpec default_mlp(std::size_t input_dim, std::size_t classes) {
  NetworkSpec spec;
  spec.input = {1, input_dim};
  spec.layers = {DenseSpec{input_dim, 512}, ReluSpec{}, DropoutSpec{0.3},
                 DenseSpec{512, 128},       ReluSpec{}, DenseSpec{128, classes}};
  return spec;
}

NetworkSpec default_cnn(std::size_t channels, std::size_t length, std::size_t classes) {
  NetworkSpec spec;
  spec.input = {channels, length};
  const std::size_t l1 = length >= 9 ? (length - 9) / 2 + 1 : 0;
  const std::size_t l2 = l1 >= 9 ? (l1 - 9) / 2 + 1 : 0;
  spec.layers = {Conv1DSpec{channels, 32, 9, 2}, BatchNormSpec{32}, ReluSpec{},
                 Conv1DSpec{32, 64, 9, 2},       BatchNormSpec{64}, ReluSpec{},
                 FlattenSpec{},                  DenseSpec{64 * l2, 128}, ReluSpec{},
                 DropoutSpec{0.3},               DenseSpec{128, classes}};
  return spec;
}

}  // namespace semg::nn
