#include "fusekd/error.hpp"

namespace fkd {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::Io: return "IoError";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::BadHeader: return "BadHeader";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::NaNPayload: return "NaNPayload";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::DomainError: return "DomainError";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::ZeroNormFeature: return "ZeroNormFeature";
    case ErrorCode::InvalidArchitecture: return "InvalidArchitecture";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::TotalMismatch: return "TotalMismatch";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::UnknownKind: return "UnknownKind";
    case ErrorCode::UnrealizableSpec: return "UnrealizableSpec";
    case ErrorCode::StageFailure: return "StageFailure";
  }
  return "UnknownError";
}

}  // namespace fkd
