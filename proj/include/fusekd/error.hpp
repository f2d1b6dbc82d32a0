#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fkd {

enum class ErrorCode {
  Io,
  InvariantViolation,
  BadMagic,
  UnsupportedVersion,
  BadHeader,
  TruncatedPayload,
  NaNPayload,
  ShapeMismatch,
  MissingFile,
  ChecksumMismatch,
  ParseError,
  DomainError,
  LabelOutOfRange,
  ZeroNormFeature,
  InvalidArchitecture,
  DivergenceDetected,
  TotalMismatch,
  InsufficientSamples,
  UnknownKind,
  UnrealizableSpec,
  StageFailure,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace fkd
