#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace semg {

enum class ErrorCode {
  // dataset
  MissingFile,
  FormatVersionMismatch,
  HeaderShapeMismatch,
  InvalidManifest,
  EmptySplit,
  UnknownSubject,
  // dsp
  ConstantSignal,
  InvalidBand,
  WindowTooLong,
  // features
  WindowTooShort,
  ZeroSpectrum,
  DegenerateBand,
  // nn
  ShapeMismatch,
  InvalidTarget,
  StaleCache,
  VersionMismatch,
  CorruptCheckpoint,
  InvalidConfig,
  // train
  InsufficientData,
  DegenerateLabels,
  TooFewLayers,
  // bench
  EmptyTestSet,
  ZeroBaseline,
  IoError,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure raised by the library carries one of the codes above so
/// callers (notably the CLI exit-code mapping) can dispatch on the class of
/// error without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace semg
