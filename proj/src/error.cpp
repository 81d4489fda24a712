#include "tvproxy/error.hpp"

namespace tvproxy {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::ZeroVector: return "ZeroVector";
    case ErrorKind::InvalidShape: return "InvalidShape";
    case ErrorKind::DegenerateDirector: return "DegenerateDirector";
    case ErrorKind::NonSquareBatch: return "NonSquareBatch";
    case ErrorKind::NonPositiveTemperature: return "NonPositiveTemperature";
    case ErrorKind::NonFiniteData: return "NonFiniteData";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::BatchTooSmall: return "BatchTooSmall";
    case ErrorKind::MissingGroundTruth: return "MissingGroundTruth";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorKind::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorKind::TruncatedPayload: return "TruncatedPayload";
    case ErrorKind::TrailingData: return "TrailingData";
  }
  return "Unknown";
}

}  // namespace tvproxy
