#include "semg/error.hpp"

namespace semg {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::FormatVersionMismatch: return "FormatVersionMismatch";
    case ErrorCode::HeaderShapeMismatch: return "HeaderShapeMismatch";
    case ErrorCode::InvalidManifest: return "InvalidManifest";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::UnknownSubject: return "UnknownSubject";
    case ErrorCode::ConstantSignal: return "ConstantSignal";
    case ErrorCode::InvalidBand: return "InvalidBand";
    case ErrorCode::WindowTooLong: return "WindowTooLong";
    case ErrorCode::WindowTooShort: return "WindowTooShort";
    case ErrorCode::ZeroSpectrum: return "ZeroSpectrum";
    case ErrorCode::DegenerateBand: return "DegenerateBand";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidTarget: return "InvalidTarget";
    case ErrorCode::StaleCache: return "StaleCache";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::DegenerateLabels: return "DegenerateLabels";
    case ErrorCode::TooFewLayers: return "TooFewLayers";
    case ErrorCode::EmptyTestSet: return "EmptyTestSet";
    case ErrorCode::ZeroBaseline: return "ZeroBaseline";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace semg
