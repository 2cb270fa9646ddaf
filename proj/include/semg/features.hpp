#pragma once

#include <array>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "semg/dsp.hpp"

namespace semg::features {

inline constexpr std::size_t kTimeDomainCount = 11;
inline constexpr std::size_t kFrequencyDomainCount = 6;
inline constexpr std::size_t kFeatureCount = 18;

/// Column order of one channel's block in a FeatureVector.
inline constexpr std::array<std::string_view, kFeatureCount> kFeatureNames = {
    "VAR", "RMS", "IEMG", "MAV", "LOG", "WL",  "AAC", "DASDV", "ZC",
    "WAMP", "MYOP", "FR",  "MNF", "MDF", "PKF", "MNP", "TTP",  "WHIST"};

/// Absolute thresholds used by the counting features.
struct TimeDomainThresholds {
  double zero_crossing = 0.0;
  double willison = 0.0;
  double myopulse = 0.016;
};

struct TimeDomainFeatures {
  double variance = 0;
  double rms = 0;
  double integral = 0;
  double mav = 0;
  double log_detector = 0;
  double waveform_length = 0;
  double average_amplitude_change = 0;
  double dasdv = 0;
  double zero_crossings = 0;
  double willison_amplitude = 0;
  double myopulse_rate = 0;

  std::array<double, kTimeDomainCount> values() const;
};

inline constexpr double kLogDetectorEpsilon = 1e-12;

/// Throws WindowTooShort for fewer than two samples.
TimeDomainFeatures extract_time_domain(std::span<const double> x, const TimeDomainThresholds& th);

struct PowerSpectrum {
  std::vector<double> freqs_hz;
  std::vector<double> power;
  double total_power = 0;

  double bin_width() const noexcept {
    return freqs_hz.size() > 1 ? freqs_hz[1] - freqs_hz[0] : 0.0;
  }
};

/// One-sided periodogram of the mean-removed window, |X_k|^2 / (N fs), with
/// interior bins doubled so that sum(power) * df equals the mean square.
/// Throws WindowTooShort for N < 4.
PowerSpectrum power_spectrum(std::span<const double> x, double fs_hz);

struct FrequencyDomainFeatures {
  double frequency_ratio = 0;
  double mean_frequency = 0;
  double median_frequency = 0;
  double peak_frequency = 0;
  double mean_power = 0;
  double total_power = 0;

  std::array<double, kFrequencyDomainCount> values() const;
};

/// Throws ZeroSpectrum when the spectrum carries no power and DegenerateBand
/// when nothing lies at or above `band_split_hz` (ratio denominator).
FrequencyDomainFeatures extract_frequency_domain(const PowerSpectrum& ps, double band_split_hz);

/// Multi-level Haar DWT (detail coefficient d = (x[2i] - x[2i+1]) / sqrt(2)).
/// Odd-length approximations drop their last sample before the next level.
std::vector<double> haar_details(std::span<const double> x, int levels);

/// Normalized histogram of all pooled detail coefficients over `bins` equal
/// bins spanning [lo, hi]; values outside the range land in the edge bins.
/// Throws WindowTooShort when N < 2^levels.
std::vector<double> wavelet_histogram(std::span<const double> x, int levels, int bins, double lo,
                                      double hi);

/// Shannon entropy (nats) of a normalized histogram.
double histogram_entropy(std::span<const double> hist);

enum class WaveletScalarMode { Entropy, Histogram };

struct WaveletConfig {
  int levels = 3;
  int bins = 10;
  double lo = -3.0;
  double hi = 3.0;
  WaveletScalarMode scalar_mode = WaveletScalarMode::Entropy;
};

struct FeatureConfig {
  double theta_zc = 0.0;
  /// Willison threshold relative to the channel's RMS within the window.
  double theta_w_rel = 0.05;
  double theta_m = 0.016;
  double band_split_hz = 80.0;
  WaveletConfig wavelet;

  /// Features per channel: 18, or 17 + bins in histogram mode.
  std::size_t per_channel() const noexcept;
  void validate() const;
};

void to_json(nlohmann::json& j, const FeatureConfig& cfg);
void from_json(const nlohmann::json& j, FeatureConfig& cfg);

/// Channel-major concatenation of each channel's feature block.
std::vector<double> extract_feature_vector(const dsp::Window& w, std::size_t channels, int fs_hz,
                                           const FeatureConfig& cfg);

/// Column names "ch<c>_<FEATURE>" in FeatureVector order.
std::vector<std::string> feature_column_names(std::size_t channels, const FeatureConfig& cfg);

struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;  // row-major
  std::vector<int> subject_ids;
  std::vector<int> class_labels;
  std::vector<int> repetition_labels;
};

FeatureMatrix extract_features(const dsp::WindowSet& ws, const FeatureConfig& cfg);

/// CSV with columns subject,class,repetition followed by one column per
/// (channel, feature).
void write_feature_csv(std::ostream& out, const FeatureMatrix& fm, std::size_t channels,
                       const FeatureConfig& cfg);

}  // namespace semg::features
