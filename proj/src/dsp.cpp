#include "semg/dsp.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "semg/error.hpp"
#include "semg/rng.hpp"

namespace semg::dsp {

namespace {

using cplx = std::complex<double>;

cplx stage_response(const Biquad& s, cplx zinv) {
  const cplx num = s.b0 + zinv * (s.b1 + zinv * s.b2);
  const cplx den = 1.0 + zinv * (s.a1 + zinv * s.a2);
  return num / den;
}

}  // namespace

bool Biquad::stable() const noexcept {
  return std::abs(a2) < 1.0 && std::abs(a1) < 1.0 + a2;
}

FilterCoefficients design_bandpass(int order, double low_hz, double high_hz, double fs_hz) {
  if (order < 2 || order % 2 != 0) {
    throw Error(ErrorCode::InvalidBand, "order must be even and >= 2, got " + std::to_string(order));
  }
  if (!(fs_hz > 0.0) || !(low_hz > 0.0) || !(low_hz < high_hz) || !(high_hz < fs_hz / 2.0)) {
    throw Error(ErrorCode::InvalidBand, "need 0 < low_hz < high_hz < fs_hz/2");
  }
  const double pi = std::numbers::pi;
  const double fs2 = 2.0 * fs_hz;
  // Pre-warped analog band edges.
  const double w_lo = fs2 * std::tan(pi * low_hz / fs_hz);
  const double w_hi = fs2 * std::tan(pi * high_hz / fs_hz);
  const double bw = w_hi - w_lo;
  const double w0_sq = w_lo * w_hi;

  FilterCoefficients fc;
  fc.order = order;
  fc.low_hz = low_hz;
  fc.high_hz = high_hz;
  fc.fs_hz = fs_hz;

  // Prototype poles in the upper-left quadrant; their conjugates produce the
  // conjugate bandpass poles that complete each biquad.
  for (int k = 0; k < order / 2; ++k) {
    const double theta = pi * (2.0 * k + order + 1) / (2.0 * order);
    const cplx p = std::polar(1.0, theta);
    const cplx a = p * (bw / 2.0);
    const cplx disc = std::sqrt(a * a - w0_sq);
    for (const cplx s : {a + disc, a - disc}) {
      const cplx z = (fs2 + s) / (fs2 - s);
      Biquad b;
      b.a1 = -2.0 * z.real();
      b.a2 = std::norm(z);
      b.b0 = 1.0;
      b.b1 = 0.0;
      b.b2 = -1.0;
      fc.stages.push_back(b);
    }
  }

  // Unit gain at the digital image of the geometric centre frequency, which
  // is where the analog Butterworth bandpass has |H| = 1.
  const double w0_digital = 2.0 * std::atan(std::sqrt(w0_sq) / fs2);
  const cplx zinv = std::polar(1.0, -w0_digital);
  cplx total = 1.0;
  for (auto& st : fc.stages) {
    const double g = 1.0 / std::abs(stage_response(st, zinv));
    st.b0 *= g;
    st.b2 *= g;
    total *= stage_response(st, zinv);
  }
  if (total.real() < 0.0) {
    fc.stages.front().b0 = -fc.stages.front().b0;
    fc.stages.front().b2 = -fc.stages.front().b2;
  }
  return fc;
}

std::complex<double> frequency_response(const FilterCoefficients& coeffs, double freq_hz) {
  const double w = 2.0 * std::numbers::pi * freq_hz / coeffs.fs_hz;
  const cplx zinv = std::polar(1.0, -w);
  cplx h = 1.0;
  for (const auto& st : coeffs.stages) h *= stage_response(st, zinv);
  return h;
}

std::vector<double> apply_filter(const FilterCoefficients& coeffs, std::span<const double> signal) {
  std::vector<double> y(signal.begin(), signal.end());
  for (const auto& st : coeffs.stages) {
    double s1 = 0.0, s2 = 0.0;
    for (double& v : y) {
      const double x = v;
      const double out = st.b0 * x + s1;
      s1 = st.b1 * x - st.a1 * out + s2;
      s2 = st.b2 * x - st.a2 * out;
      v = out;
    }
  }
  return y;
}

std::vector<double> standardize(std::span<const double> signal) {
  if (signal.size() < 2) throw Error(ErrorCode::InvalidConfig, "standardize needs >= 2 samples");
  const double n = static_cast<double>(signal.size());
  const double mean = std::accumulate(signal.begin(), signal.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : signal) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / n);
  if (sd < 1e-12) throw Error(ErrorCode::ConstantSignal, "population standard deviation below 1e-12");
  std::vector<double> out(signal.size());
  for (std::size_t i = 0; i < signal.size(); ++i) out[i] = (signal[i] - mean) / sd;
  return out;
}

std::vector<double> rectify(std::span<const double> signal) {
  std::vector<double> out(signal.size());
  for (std::size_t i = 0; i < signal.size(); ++i) out[i] = std::abs(signal[i]);
  return out;
}

std::size_t window_samples(double ms, int fs_hz) {
  return static_cast<std::size_t>(std::llround(ms * fs_hz / 1000.0));
}

WindowSet segment_windows(const Recording& rec, double window_ms, double step_ms) {
  rec.check_shape();
  const std::size_t len = window_samples(window_ms, rec.fs_hz);
  const std::size_t step = window_samples(step_ms, rec.fs_hz);
  if (len == 0 || step == 0) {
    throw Error(ErrorCode::InvalidConfig, "window and step must each span at least one sample");
  }
  WindowSet ws;
  ws.window_ms = window_ms;
  ws.step_ms = step_ms;
  ws.fs_hz = rec.fs_hz;
  ws.channels = rec.channels;
  ws.length = len;

  const std::size_t t_total = rec.length();
  bool any_fit = false;
  std::size_t run_start = 0;
  for (std::size_t i = 1; i <= t_total; ++i) {
    // A run ends at a label change or where the split left a gap in the source.
    const bool boundary = i == t_total || rec.class_labels[i] != rec.class_labels[run_start] ||
                          rec.repetition_labels[i] != rec.repetition_labels[run_start] ||
                          rec.origin_of(i) != rec.origin_of(i - 1) + 1;
    if (!boundary) continue;
    const std::size_t run_len = i - run_start;
    if (run_len >= len) {
      any_fit = true;
      for (std::size_t off = run_start; off + len <= i; off += step) {
        Window w;
        w.subject_id = rec.subject_id;
        w.class_label = rec.class_labels[run_start];
        w.repetition_label = rec.repetition_labels[run_start];
        w.start = rec.origin_of(off);
        w.data.resize(rec.channels * len);
        for (std::size_t c = 0; c < rec.channels; ++c) {
          const auto ch = rec.channel(c);
          std::copy(ch.begin() + static_cast<std::ptrdiff_t>(off),
                    ch.begin() + static_cast<std::ptrdiff_t>(off + len), w.data.begin() + c * len);
        }
        ws.windows.push_back(std::move(w));
      }
    }
    run_start = i;
  }
  if (!any_fit) {
    throw Error(ErrorCode::WindowTooLong,
                "no labelled segment holds a " + std::to_string(len) + "-sample window");
  }
  return ws;
}

WindowSet shuffle_windows(WindowSet ws, std::uint64_t seed) {
  Rng rng(seed);
  auto& w = ws.windows;
  for (std::size_t i = w.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(w[i - 1], w[j]);
  }
  return ws;
}

void PreprocessConfig::validate() const {
  if (!(window_ms > 0.0) || !(overlap_ms >= 0.0) || !(overlap_ms < window_ms)) {
    throw Error(ErrorCode::InvalidConfig, "need window_ms > 0 and 0 <= overlap_ms < window_ms");
  }
}

void to_json(nlohmann::json& j, const PreprocessConfig& cfg) {
  j = {{"window_ms", cfg.window_ms},
       {"overlap_ms", cfg.overlap_ms},
       {"filter", {{"order", cfg.filter.order}, {"low_hz", cfg.filter.low_hz}, {"high_hz", cfg.filter.high_hz}}},
       {"seed", cfg.seed}};
}

void from_json(const nlohmann::json& j, PreprocessConfig& cfg) {
  const PreprocessConfig d;
  cfg.window_ms = j.value("window_ms", d.window_ms);
  cfg.overlap_ms = j.value("overlap_ms", d.overlap_ms);
  cfg.seed = j.value("seed", d.seed);
  if (j.contains("filter")) {
    const auto& f = j.at("filter");
    cfg.filter.order = f.value("order", d.filter.order);
    cfg.filter.low_hz = f.value("low_hz", d.filter.low_hz);
    cfg.filter.high_hz = f.value("high_hz", d.filter.high_hz);
  } else {
    cfg.filter = d.filter;
  }
}

Recording condition(const Recording& rec, const PreprocessConfig& cfg) {
  cfg.validate();
  rec.check_shape();
  const FilterCoefficients fc =
      design_bandpass(cfg.filter.order, cfg.filter.low_hz, cfg.filter.high_hz, rec.fs_hz);
  Recording out = rec;
  for (std::size_t c = 0; c < rec.channels; ++c) {
    try {
      const auto filtered = rectify(apply_filter(fc, standardize(rec.channel(c))));
      std::copy(filtered.begin(), filtered.end(), out.channel(c).begin());
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ConstantSignal) throw;
      throw Error(ErrorCode::ConstantSignal, "subject " + std::to_string(rec.subject_id) +
                                                 " channel " + std::to_string(c) + " is constant");
    }
  }
  return out;
}

WindowSet preprocess(const Recording& rec, const PreprocessConfig& cfg) {
  const Recording conditioned = condition(rec, cfg);
  return shuffle_windows(segment_windows(conditioned, cfg.window_ms, cfg.step_ms()), cfg.seed);
}

}  // namespace semg::dsp
