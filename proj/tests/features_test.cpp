#include "semg/features.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "feature_oracle.hpp"
#include "semg/error.hpp"
#include "semg/rng.hpp"

namespace semg::features {
namespace {

constexpr double kPi = std::numbers::pi;

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::IoError;
}

::testing::AssertionResult rel_close(double a, double b, double tol) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-300});
  if (std::abs(a - b) <= tol * scale) return ::testing::AssertionSuccess();
  return ::testing::AssertionFailure() << a << " vs " << b << " (rel " << std::abs(a - b) / scale << ")";
}

std::vector<double> random_window(Rng& rng, std::size_t n, double fs) {
  std::vector<double> x(n);
  const double f1 = rng.uniform(20, 400), f2 = rng.uniform(20, 400);
  const double a1 = rng.uniform(0, 2), a2 = rng.uniform(0, 2), noise = rng.uniform(0.05, 1.0);
  const bool rectified = rng.below(2) == 0;
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = a1 * std::sin(2 * kPi * f1 * i / fs) + a2 * std::sin(2 * kPi * f2 * i / fs + 1.0) +
           noise * rng.normal();
    if (rectified) x[i] = std::abs(x[i]);
  }
  return x;
}

std::vector<double> library_features(const std::vector<double>& x, double fs) {
  dsp::Window w;
  w.data = x;
  return extract_feature_vector(w, 1, static_cast<int>(fs), FeatureConfig{});
}

TEST(TimeDomain, AlternatingUnitSignal) {
  const std::vector<double> x{1, -1, 1, -1};
  const auto f = extract_time_domain(x, {0.0, 0.0, 0.016});
  EXPECT_EQ(f.zero_crossings, 3);
  EXPECT_DOUBLE_EQ(f.mav, 1.0);
  EXPECT_DOUBLE_EQ(f.rms, 1.0);
}

TEST(TimeDomain, SuccessiveDifferences) {
  const std::vector<double> x{0, 1, 0, 1};
  const auto f = extract_time_domain(x, {0.0, 0.5, 0.016});
  EXPECT_DOUBLE_EQ(f.waveform_length, 3.0);
  EXPECT_DOUBLE_EQ(f.average_amplitude_change, 1.0);
  EXPECT_EQ(f.willison_amplitude, 3);
  EXPECT_DOUBLE_EQ(f.dasdv, 1.0);
}

TEST(TimeDomain, ConstantSignal) {
  const std::vector<double> x(50, 0.5);
  const auto low = extract_time_domain(x, {0.0, 0.0, 0.016});
  EXPECT_EQ(low.variance, 0.0);
  EXPECT_EQ(low.waveform_length, 0.0);
  EXPECT_EQ(low.zero_crossings, 0.0);
  EXPECT_EQ(low.myopulse_rate, 1.0);
  EXPECT_EQ(extract_time_domain(x, {0.0, 0.0, 1.0}).myopulse_rate, 0.0);
}

TEST(TimeDomain, TooShort) {
  const std::vector<double> x{1.0};
  EXPECT_EQ(code_of([&] { extract_time_domain(x, {}); }), ErrorCode::WindowTooShort);
}

TEST(Spectrum, SinusoidPeaksAtItsFrequency) {
  std::vector<double> x(400);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(2 * kPi * 50 * i / 2000.0);
  const auto ps = power_spectrum(x, 2000);
  ASSERT_EQ(ps.power.size(), 201u);
  const auto peak = std::max_element(ps.power.begin(), ps.power.end()) - ps.power.begin();
  EXPECT_DOUBLE_EQ(ps.freqs_hz[static_cast<std::size_t>(peak)], 50.0);
}

TEST(Spectrum, ZeroSignalHasNoPower) {
  const std::vector<double> x(64, 0.0);
  const auto ps = power_spectrum(x, 1000);
  for (double p : ps.power) EXPECT_EQ(p, 0.0);
  EXPECT_EQ(ps.total_power, 0.0);
}

TEST(Spectrum, ParsevalAgainstTimeDomainEnergy) {
  Rng rng(12);
  for (std::size_t n : {400u, 401u, 256u, 37u}) {
    const auto x = random_window(rng, n, 2000);
    const auto ps = power_spectrum(x, 2000);
    const double m = oracle::mean_of(x);
    double ms = 0;
    for (double v : x) ms += (v - m) * (v - m);
    ms /= static_cast<double>(n);
    EXPECT_TRUE(rel_close(ps.total_power * ps.bin_width(), ms, 1e-6)) << "n=" << n;
    for (double p : ps.power) EXPECT_GE(p, 0.0);
  }
}

TEST(FrequencyDomain, PureSinusoid) {
  std::vector<double> x(400);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(2 * kPi * 50 * i / 2000.0);
  const auto f = extract_frequency_domain(power_spectrum(x, 2000), 80.0);
  EXPECT_GE(f.mean_frequency, 45.0);
  EXPECT_LE(f.mean_frequency, 55.0);
  EXPECT_NEAR(f.peak_frequency, 50.0, 5.0);
}

TEST(FrequencyDomain, FlatSpectrumMedianIsQuarterRate) {
  PowerSpectrum ps;
  const double fs = 2000;
  for (int k = 0; k <= 200; ++k) {
    ps.freqs_hz.push_back(k * fs / 400);
    ps.power.push_back(1.0);
  }
  ps.total_power = 201;
  const auto f = extract_frequency_domain(ps, 80.0);
  EXPECT_NEAR(f.median_frequency, fs / 4, ps.bin_width());
}

TEST(FrequencyDomain, DegenerateCases) {
  PowerSpectrum low;
  low.freqs_hz = {0, 10, 20, 30};
  low.power = {0, 1, 2, 0};
  low.total_power = 3;
  EXPECT_EQ(code_of([&] { extract_frequency_domain(low, 25.0); }), ErrorCode::DegenerateBand);
  PowerSpectrum zero = low;
  zero.power = {0, 0, 0, 0};
  EXPECT_EQ(code_of([&] { extract_frequency_domain(zero, 25.0); }), ErrorCode::ZeroSpectrum);
}

TEST(FrequencyDomain, PeakTieBreaksToLowestFrequency) {
  PowerSpectrum ps;
  ps.freqs_hz = {0, 10, 20, 30};
  ps.power = {0, 2, 1, 2};
  EXPECT_EQ(extract_frequency_domain(ps, 15.0).peak_frequency, 10.0);
}

TEST(Wavelet, ConstantSignalLandsInZeroBin) {
  const std::vector<double> x(64, 3.3);
  const auto h = wavelet_histogram(x, 3, 10, -3, 3);
  EXPECT_DOUBLE_EQ(h[5], 1.0);  // bin [0, 0.6)
}

TEST(Wavelet, HistogramSumsToOne) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = random_window(rng, 64 + rng.below(400), 2000);
    const auto h = wavelet_histogram(x, 3, 10, -3, 3);
    double s = 0;
    for (double v : h) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Wavelet, AlternatingSignalFillsTwoBins) {
  std::vector<double> x(16);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = i % 2 == 0 ? 1.0 : -1.0;
  // Direct transform: 8 level-1 details of sqrt(2), then 4 + 2 zero details.
  std::vector<double> details;
  oracle::haar(x, 3, details);
  ASSERT_EQ(details.size(), 14u);
  const auto h = wavelet_histogram(x, 3, 10, -3, 3);
  int nonzero = 0;
  for (double v : h) nonzero += v > 0;
  EXPECT_EQ(nonzero, 2);
  EXPECT_DOUBLE_EQ(h[5], 6.0 / 14.0);  // zeros
  EXPECT_DOUBLE_EQ(h[7], 8.0 / 14.0);  // sqrt(2) in [1.2, 1.8)
}

TEST(Wavelet, TooShort) {
  const std::vector<double> x(7, 1.0);
  EXPECT_EQ(code_of([&] { wavelet_histogram(x, 3, 10, -3, 3); }), ErrorCode::WindowTooShort);
}

TEST(FeatureVector, LengthIsEighteenPerChannel) {
  Rng rng(3);
  dsp::Window w;
  for (int c = 0; c < 12; ++c) {
    const auto x = random_window(rng, 400, 2000);
    w.data.insert(w.data.end(), x.begin(), x.end());
  }
  const auto v = extract_feature_vector(w, 12, 2000, FeatureConfig{});
  EXPECT_EQ(v.size(), 216u);
  EXPECT_EQ(feature_column_names(12, FeatureConfig{}).size(), 216u);
  FeatureConfig hist;
  hist.wavelet.scalar_mode = WaveletScalarMode::Histogram;
  EXPECT_EQ(extract_feature_vector(w, 12, 2000, hist).size(), 12u * 27u);
}

TEST(FeatureVector, ZeroWindowHasNoSpectrum) {
  dsp::Window w;
  w.data.assign(2 * 400, 0.0);
  EXPECT_EQ(code_of([&] { extract_feature_vector(w, 2, 2000, FeatureConfig{}); }),
            ErrorCode::ZeroSpectrum);
}

TEST(FeatureVector, GoldenValues) {
  // x[i] = |sin(2 pi 60 i / 1000)| + 0.25 sin(2 pi 210 i / 1000 + 0.5), N = 128.
  // Expected values computed with the naive oracle and frozen.
  std::vector<double> x(128);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = std::abs(std::sin(2 * kPi * 60 * i / 1000.0)) + 0.25 * std::sin(2 * kPi * 210 * i / 1000.0 + 0.5);
  }
  const std::vector<double> golden = {
#include "golden_features.inc"
  };
  const auto v = library_features(x, 1000);
  ASSERT_EQ(v.size(), golden.size());
  for (std::size_t k = 0; k < v.size(); ++k) {
    EXPECT_TRUE(rel_close(v[k], golden[k], 1e-9)) << kFeatureNames[k];
  }
}

TEST(FeatureVector, MatchesNaiveOracle) {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const auto x = random_window(rng, 400, 2000);
    const auto lib = library_features(x, 2000);
    const auto ref = oracle::all_features(x, 2000);
    ASSERT_EQ(lib.size(), ref.size());
    for (std::size_t k = 0; k < lib.size(); ++k) {
      EXPECT_TRUE(rel_close(lib[k], ref[k], 1e-9)) << kFeatureNames[k] << " trial " << trial;
    }
  }
}

TEST(FeatureVector, ScaleBehaviour) {
  Rng rng(5);
  const FeatureConfig cfg;
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_window(rng, 400, 2000);
    const double a = rng.uniform(0.1, 10);
    std::vector<double> ax(x);
    for (double& v : ax) v *= a;
    const auto f = library_features(x, 2000), g = library_features(ax, 2000);
    for (int k : {1, 2, 3, 5, 7}) EXPECT_TRUE(rel_close(g[k], a * f[k], 1e-9)) << kFeatureNames[k];
    EXPECT_EQ(g[8], f[8]);  // ZC with theta 0
    for (int k : {12, 13, 14}) EXPECT_TRUE(rel_close(g[k], f[k], 1e-9)) << kFeatureNames[k];
  }
}

TEST(FeatureVector, FrequencyFeaturesIgnoreDcShift) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_window(rng, 400, 2000);
    std::vector<double> shifted(x);
    const double dc = rng.uniform(-5, 5);
    for (double& v : shifted) v += dc;
    const auto f = extract_frequency_domain(power_spectrum(x, 2000), 80);
    const auto g = extract_frequency_domain(power_spectrum(shifted, 2000), 80);
    const auto fv = f.values(), gv = g.values();
    for (std::size_t k = 0; k < fv.size(); ++k) EXPECT_TRUE(rel_close(fv[k], gv[k], 1e-9)) << k;
  }
}

TEST(FeatureVector, FiniteForRandomWindows) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    for (double v : library_features(random_window(rng, 100 + rng.below(400), 2000), 2000)) {
      EXPECT_TRUE(std::isfinite(v));
    }
  }
}

TEST(FeatureConfig, JsonRoundTripAndCsvHeader) {
  FeatureConfig cfg;
  cfg.band_split_hz = 100;
  cfg.wavelet.scalar_mode = WaveletScalarMode::Histogram;
  cfg.wavelet.bins = 4;
  const nlohmann::json j = cfg;
  const auto back = j.get<FeatureConfig>();
  EXPECT_EQ(back.band_split_hz, 100);
  EXPECT_EQ(back.wavelet.bins, 4);
  EXPECT_EQ(back.wavelet.scalar_mode, WaveletScalarMode::Histogram);

  FeatureMatrix fm;
  fm.rows = 1;
  fm.cols = 21;
  fm.values.assign(21, 0.5);
  fm.subject_ids = {3};
  fm.class_labels = {2};
  fm.repetition_labels = {4};
  std::ostringstream out;
  write_feature_csv(out, fm, 1, back);
  const std::string text = out.str();
  EXPECT_EQ(text.rfind("subject,class,repetition,ch0_VAR,ch0_RMS,", 0), 0u);
  EXPECT_NE(text.find("ch0_WHIST_3\n3,2,4,0.5"), std::string::npos);
}

}  // namespace
}  // namespace semg::features
