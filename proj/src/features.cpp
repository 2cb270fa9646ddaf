#include "semg/features.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>

#include <fftw3.h>

#include "semg/error.hpp"
#include "semg/io.hpp"

namespace semg::features {

namespace {

// FFTW planning is not thread-safe; execution with fresh arrays is. Plans
// are created once per length under a lock and reused for the process.
class PlanCache {
 public:
  fftw_plan get(std::size_t n) {
    std::lock_guard lock(mu_);
    auto it = plans_.find(n);
    if (it != plans_.end()) return it->second.get();
    auto* in = fftw_alloc_real(n);
    auto* out = fftw_alloc_complex(n / 2 + 1);
    fftw_plan p = fftw_plan_dft_r2c_1d(static_cast<int>(n), in, out, FFTW_ESTIMATE);
    fftw_free(in);
    fftw_free(out);
    plans_.emplace(n, std::unique_ptr<fftw_plan_s, PlanDeleter>(p));
    return p;
  }

 private:
  struct PlanDeleter {
    void operator()(fftw_plan p) const { fftw_destroy_plan(p); }
  };
  std::mutex mu_;
  std::map<std::size_t, std::unique_ptr<fftw_plan_s, PlanDeleter>> plans_;
};

PlanCache& plan_cache() {
  static PlanCache cache;
  return cache;
}

struct FftwReal {
  explicit FftwReal(std::size_t n) : p(fftw_alloc_real(n)) {}
  ~FftwReal() { fftw_free(p); }
  FftwReal(const FftwReal&) = delete;
  FftwReal& operator=(const FftwReal&) = delete;
  double* p;
};

struct FftwComplex {
  explicit FftwComplex(std::size_t n) : p(fftw_alloc_complex(n)) {}
  ~FftwComplex() { fftw_free(p); }
  FftwComplex(const FftwComplex&) = delete;
  FftwComplex& operator=(const FftwComplex&) = delete;
  fftw_complex* p;
};

}  // namespace

std::array<double, kTimeDomainCount> TimeDomainFeatures::values() const {
  return {variance,        rms,
          integral,        mav,
          log_detector,    waveform_length,
          average_amplitude_change, dasdv,
          zero_crossings,  willison_amplitude,
          myopulse_rate};
}

std::array<double, kFrequencyDomainCount> FrequencyDomainFeatures::values() const {
  return {frequency_ratio, mean_frequency, median_frequency, peak_frequency, mean_power, total_power};
}

TimeDomainFeatures extract_time_domain(std::span<const double> x, const TimeDomainThresholds& th) {
  const std::size_t n = x.size();
  if (n < 2) throw Error(ErrorCode::WindowTooShort, "time-domain features need >= 2 samples");
  const double nd = static_cast<double>(n);

  double sum = 0, sum_sq = 0, sum_abs = 0, sum_log = 0;
  std::size_t myop = 0;
  for (double v : x) {
    sum += v;
    sum_sq += v * v;
    sum_abs += std::abs(v);
    sum_log += std::log(std::abs(v) + kLogDetectorEpsilon);
    if (std::abs(v) >= th.myopulse) ++myop;
  }
  const double mean = sum / nd;
  double centered = 0;
  for (double v : x) centered += (v - mean) * (v - mean);

  double wl = 0, diff_sq = 0;
  std::size_t zc = 0, wamp = 0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double d = x[i + 1] - x[i];
    wl += std::abs(d);
    diff_sq += d * d;
    if (x[i] * x[i + 1] < 0.0 && std::abs(d) >= th.zero_crossing) ++zc;
    if (std::abs(d) >= th.willison) ++wamp;
  }

  TimeDomainFeatures f;
  f.variance = centered / (nd - 1.0);
  f.rms = std::sqrt(sum_sq / nd);
  f.integral = sum_abs;
  f.mav = sum_abs / nd;
  f.log_detector = std::exp(sum_log / nd);
  f.waveform_length = wl;
  f.average_amplitude_change = wl / (nd - 1.0);
  f.dasdv = std::sqrt(diff_sq / (nd - 1.0));
  f.zero_crossings = static_cast<double>(zc);
  f.willison_amplitude = static_cast<double>(wamp);
  f.myopulse_rate = static_cast<double>(myop) / nd;
  return f;
}

PowerSpectrum power_spectrum(std::span<const double> x, double fs_hz) {
  const std::size_t n = x.size();
  if (n < 4) throw Error(ErrorCode::WindowTooShort, "power spectrum needs >= 4 samples");
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const std::size_t bins = n / 2 + 1;

  FftwReal in(n);
  FftwComplex out(bins);
  for (std::size_t i = 0; i < n; ++i) in.p[i] = x[i] - mean;
  fftw_execute_dft_r2c(plan_cache().get(n), in.p, out.p);

  PowerSpectrum ps;
  ps.freqs_hz.resize(bins);
  ps.power.resize(bins);
  const double scale = 1.0 / (static_cast<double>(n) * fs_hz);
  for (std::size_t k = 0; k < bins; ++k) {
    ps.freqs_hz[k] = static_cast<double>(k) * fs_hz / static_cast<double>(n);
    const double mag_sq = out.p[k][0] * out.p[k][0] + out.p[k][1] * out.p[k][1];
    const bool interior = k != 0 && !(n % 2 == 0 && k == n / 2);
    ps.power[k] = mag_sq * scale * (interior ? 2.0 : 1.0);
  }
  // The DC bin of a mean-removed window is zero up to rounding.
  ps.power[0] = 0.0;
  ps.total_power = std::accumulate(ps.power.begin(), ps.power.end(), 0.0);
  return ps;
}

FrequencyDomainFeatures extract_frequency_domain(const PowerSpectrum& ps, double band_split_hz) {
  const std::size_t bins = ps.power.size();
  const double total = std::accumulate(ps.power.begin(), ps.power.end(), 0.0);
  if (bins == 0 || !(total > 0.0)) throw Error(ErrorCode::ZeroSpectrum, "spectrum has no power");

  double low = 0, high = 0, weighted = 0;
  std::size_t peak = 0;
  for (std::size_t k = 0; k < bins; ++k) {
    const double p = ps.power[k];
    (ps.freqs_hz[k] < band_split_hz ? low : high) += p;
    weighted += ps.freqs_hz[k] * p;
    if (p > ps.power[peak]) peak = k;
  }
  if (!(high > 0.0)) {
    throw Error(ErrorCode::DegenerateBand, "no power at or above the frequency-ratio split");
  }

  const double half = total / 2.0;
  double cumulative = 0;
  double median = ps.freqs_hz.back();
  for (std::size_t k = 0; k < bins; ++k) {
    const double before = cumulative;
    cumulative += ps.power[k];
    if (cumulative >= half) {
      if (k == 0) {
        median = ps.freqs_hz[0];
      } else {
        const double frac = (half - before) / ps.power[k];
        median = ps.freqs_hz[k - 1] + frac * (ps.freqs_hz[k] - ps.freqs_hz[k - 1]);
      }
      break;
    }
  }

  FrequencyDomainFeatures f;
  f.frequency_ratio = low / high;
  f.mean_frequency = weighted / total;
  f.median_frequency = median;
  f.peak_frequency = ps.freqs_hz[peak];
  f.mean_power = total / static_cast<double>(bins);
  f.total_power = total;
  return f;
}

std::vector<double> haar_details(std::span<const double> x, int levels) {
  std::vector<double> approx(x.begin(), x.end());
  std::vector<double> details;
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (int level = 0; level < levels && approx.size() >= 2; ++level) {
    const std::size_t half = approx.size() / 2;
    std::vector<double> next(half);
    for (std::size_t i = 0; i < half; ++i) {
      next[i] = (approx[2 * i] + approx[2 * i + 1]) * inv_sqrt2;
      details.push_back((approx[2 * i] - approx[2 * i + 1]) * inv_sqrt2);
    }
    approx = std::move(next);
  }
  return details;
}

std::vector<double> wavelet_histogram(std::span<const double> x, int levels, int bins, double lo,
                                      double hi) {
  if (levels < 1 || bins < 1 || !(lo < hi)) {
    throw Error(ErrorCode::InvalidConfig, "wavelet histogram needs levels >= 1, bins >= 1, lo < hi");
  }
  if (x.size() < (std::size_t{1} << levels)) {
    throw Error(ErrorCode::WindowTooShort, "window shorter than 2^levels");
  }
  const auto details = haar_details(x, levels);
  std::vector<double> hist(static_cast<std::size_t>(bins), 0.0);
  const double width = (hi - lo) / bins;
  for (double d : details) {
    auto b = static_cast<long long>(std::floor((d - lo) / width));
    b = std::clamp<long long>(b, 0, bins - 1);
    hist[static_cast<std::size_t>(b)] += 1.0;
  }
  for (double& h : hist) h /= static_cast<double>(details.size());
  return hist;
}

double histogram_entropy(std::span<const double> hist) {
  double h = 0;
  for (double p : hist) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

std::size_t FeatureConfig::per_channel() const noexcept {
  return wavelet.scalar_mode == WaveletScalarMode::Entropy
             ? kFeatureCount
             : kTimeDomainCount + kFrequencyDomainCount + static_cast<std::size_t>(wavelet.bins);
}

void FeatureConfig::validate() const {
  if (theta_zc < 0 || theta_w_rel < 0 || theta_m < 0 || !(band_split_hz > 0)) {
    throw Error(ErrorCode::InvalidConfig, "feature thresholds must be non-negative");
  }
  if (wavelet.levels < 1 || wavelet.bins < 1 || !(wavelet.lo < wavelet.hi)) {
    throw Error(ErrorCode::InvalidConfig, "invalid wavelet histogram settings");
  }
}

void to_json(nlohmann::json& j, const FeatureConfig& cfg) {
  j = {{"theta_zc", cfg.theta_zc},
       {"theta_w_rel", cfg.theta_w_rel},
       {"theta_m", cfg.theta_m},
       {"band_split_hz", cfg.band_split_hz},
       {"wavelet",
        {{"levels", cfg.wavelet.levels},
         {"bins", cfg.wavelet.bins},
         {"lo", cfg.wavelet.lo},
         {"hi", cfg.wavelet.hi},
         {"scalar_mode", cfg.wavelet.scalar_mode == WaveletScalarMode::Entropy ? "entropy" : "histogram"}}}};
}

void from_json(const nlohmann::json& j, FeatureConfig& cfg) {
  const FeatureConfig d;
  cfg.theta_zc = j.value("theta_zc", d.theta_zc);
  cfg.theta_w_rel = j.value("theta_w_rel", d.theta_w_rel);
  cfg.theta_m = j.value("theta_m", d.theta_m);
  cfg.band_split_hz = j.value("band_split_hz", d.band_split_hz);
  cfg.wavelet = d.wavelet;
  if (j.contains("wavelet")) {
    const auto& w = j.at("wavelet");
    cfg.wavelet.levels = w.value("levels", d.wavelet.levels);
    cfg.wavelet.bins = w.value("bins", d.wavelet.bins);
    cfg.wavelet.lo = w.value("lo", d.wavelet.lo);
    cfg.wavelet.hi = w.value("hi", d.wavelet.hi);
    const std::string mode = w.value("scalar_mode", std::string("entropy"));
    if (mode == "entropy") {
      cfg.wavelet.scalar_mode = WaveletScalarMode::Entropy;
    } else if (mode == "histogram") {
      cfg.wavelet.scalar_mode = WaveletScalarMode::Histogram;
    } else {
      throw Error(ErrorCode::InvalidConfig, "unknown wavelet scalar_mode '" + mode + "'");
    }
  }
}

std::vector<double> extract_feature_vector(const dsp::Window& w, std::size_t channels, int fs_hz,
                                           const FeatureConfig& cfg) {
  if (channels == 0 || w.data.size() % channels != 0) {
    throw Error(ErrorCode::ShapeMismatch, "window data does not split into the channel count");
  }
  const std::size_t len = w.data.size() / channels;
  std::vector<double> out;
  out.reserve(channels * cfg.per_channel());
  for (std::size_t c = 0; c < channels; ++c) {
    const std::span<const double> x(w.data.data() + c * len, len);
    const double rms = std::sqrt(std::inner_product(x.begin(), x.end(), x.begin(), 0.0) /
                                 static_cast<double>(len));
    const TimeDomainThresholds th{cfg.theta_zc, cfg.theta_w_rel * rms, cfg.theta_m};
    for (double v : extract_time_domain(x, th).values()) out.push_back(v);
    for (double v : extract_frequency_domain(power_spectrum(x, fs_hz), cfg.band_split_hz).values()) {
      out.push_back(v);
    }
    const auto hist = wavelet_histogram(x, cfg.wavelet.levels, cfg.wavelet.bins, cfg.wavelet.lo,
                                        cfg.wavelet.hi);
    if (cfg.wavelet.scalar_mode == WaveletScalarMode::Entropy) {
      out.push_back(histogram_entropy(hist));
    } else {
      out.insert(out.end(), hist.begin(), hist.end());
    }
  }
  return out;
}

std::vector<std::string> feature_column_names(std::size_t channels, const FeatureConfig& cfg) {
  std::vector<std::string> names;
  for (std::size_t c = 0; c < channels; ++c) {
    const std::string prefix = "ch" + std::to_string(c) + "_";
    for (std::size_t f = 0; f + 1 < kFeatureCount; ++f) names.push_back(prefix + std::string(kFeatureNames[f]));
    if (cfg.wavelet.scalar_mode == WaveletScalarMode::Entropy) {
      names.push_back(prefix + "WHIST_ENTROPY");
    } else {
      for (int b = 0; b < cfg.wavelet.bins; ++b) names.push_back(prefix + "WHIST_" + std::to_string(b));
    }
  }
  return names;
}

FeatureMatrix extract_features(const dsp::WindowSet& ws, const FeatureConfig& cfg) {
  cfg.validate();
  FeatureMatrix fm;
  fm.rows = ws.windows.size();
  fm.cols = ws.channels * cfg.per_channel();
  fm.values.reserve(fm.rows * fm.cols);
  for (const auto& w : ws.windows) {
    const auto v = extract_feature_vector(w, ws.channels, ws.fs_hz, cfg);
    fm.values.insert(fm.values.end(), v.begin(), v.end());
    fm.subject_ids.push_back(w.subject_id);
    fm.class_labels.push_back(w.class_label);
    fm.repetition_labels.push_back(w.repetition_label);
  }
  return fm;
}

void write_feature_csv(std::ostream& out, const FeatureMatrix& fm, std::size_t channels,
                       const FeatureConfig& cfg) {
  out << "subject,class,repetition";
  for (const auto& name : feature_column_names(channels, cfg)) out << ',' << io::csv_field(name);
  out << '\n';
  for (std::size_t r = 0; r < fm.rows; ++r) {
    out << fm.subject_ids[r] << ',' << fm.class_labels[r] << ',' << fm.repetition_labels[r];
    for (std::size_t c = 0; c < fm.cols; ++c) out << ',' << io::format_double(fm.values[r * fm.cols + c]);
    out << '\n';
  }
}

}  // namespace semg::features
