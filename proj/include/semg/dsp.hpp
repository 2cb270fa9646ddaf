#pragma once

#include <complex>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "semg/dataset.hpp"

namespace semg::dsp {

/// One second-order section, normalized so a0 = 1:
///   H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0;
  double a1 = 0, a2 = 0;

  /// Poles strictly inside the unit circle (stability triangle).
  bool stable() const noexcept;
};

struct FilterCoefficients {
  std::vector<Biquad> stages;
  int order = 0;
  double low_hz = 0;
  double high_hz = 0;
  double fs_hz = 0;
};

/// Butterworth bandpass: analog prototype of `order`, lowpass-to-bandpass
/// transform (2*order poles), bilinear transform with pre-warped band edges,
/// factored into `order` biquads each with zeros at z = +1 and z = -1.
/// Throws InvalidBand unless 0 < low < high < fs/2 and order is even and >= 2.
FilterCoefficients design_bandpass(int order, double low_hz, double high_hz, double fs_hz);

/// Complex frequency response of the cascade at `freq_hz`.
std::complex<double> frequency_response(const FilterCoefficients& coeffs, double freq_hz);

/// Cascaded direct-form-II-transposed filtering with zero initial state.
std::vector<double> apply_filter(const FilterCoefficients& coeffs, std::span<const double> signal);

/// Zero mean, unit population variance. Throws ConstantSignal when the
/// population standard deviation is below 1e-12, InvalidConfig for fewer
/// than two samples.
std::vector<double> standardize(std::span<const double> signal);

std::vector<double> rectify(std::span<const double> signal);

/// Fixed-length slice of a preprocessed recording.
struct Window {
  std::vector<double> data;  // [channels x length], channel-major
  int subject_id = 0;
  int class_label = 0;
  int repetition_label = 0;
  /// Index, in the unsplit source recording, of the window's first sample.
  std::size_t start = 0;
};

struct WindowSet {
  std::vector<Window> windows;
  double window_ms = 0;
  double step_ms = 0;
  int fs_hz = 0;
  std::size_t channels = 0;
  std::size_t length = 0;  // samples per window
};

std::size_t window_samples(double ms, int fs_hz);

/// Cuts windows independently inside every contiguous run of identical
/// (class, repetition) labels. A run of T_s samples yields
/// floor((T_s - L) / step) + 1 windows when T_s >= L, none otherwise.
/// Throws WindowTooLong when no run fits a single window.
WindowSet segment_windows(const Recording& rec, double window_ms, double step_ms);

/// Fisher-Yates shuffle driven by the portable PRNG.
WindowSet shuffle_windows(WindowSet ws, std::uint64_t seed);

struct FilterConfig {
  int order = 4;
  double low_hz = 20.0;
  double high_hz = 400.0;
};

struct PreprocessConfig {
  double window_ms = 200.0;
  /// Consecutive windows share this much signal; step = window - overlap.
  double overlap_ms = 10.0;
  FilterConfig filter;
  std::uint64_t seed = 0;

  double step_ms() const noexcept { return window_ms - overlap_ms; }
  void validate() const;
};

void to_json(nlohmann::json& j, const PreprocessConfig& cfg);
void from_json(const nlohmann::json& j, PreprocessConfig& cfg);

/// Per channel over the whole recording: standardize, bandpass, rectify.
/// Labels and origin pass through untouched.
Recording condition(const Recording& rec, const PreprocessConfig& cfg);

/// condition -> segment_windows -> shuffle_windows.
WindowSet preprocess(const Recording& rec, const PreprocessConfig& cfg);

}  // namespace semg::dsp
