// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace layerfuse {

enum class ErrorCode {
  // numerical
  ZeroNormVector,
  NumericalFailure,
  DimensionMismatch,
  EmptyNeighborhood,
  ZeroVariance,
  // data
  BadMagic,
  UnsupportedVersion,
  Truncated,
  NonFiniteValue,
  InvalidRecord,
  IoFailure,
  OrphanContinuation,
  EmptySentence,
  MalformedLine,
  EmptyFile,
  EmptyCorpus,
  OffsetOutOfRange,
  PairCountMismatch,
  // usage
  InvalidConfig,
};

enum class ErrorCategory { Usage, Data, Numerical };

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::ZeroNormVector: return "ZeroNormVector";
    case ErrorCode::NumericalFailure: return "NumericalFailure";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyNeighborhood: return "EmptyNeighborhood";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::InvalidRecord: return "InvalidRecord";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::OrphanContinuation: return "OrphanContinuation";
    case ErrorCode::EmptySentence: return "EmptySentence";
    case ErrorCode::MalformedLine: return "MalformedLine";
    case ErrorCode::EmptyFile: return "EmptyFile";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::OffsetOutOfRange: return "OffsetOutOfRange";
    case ErrorCode::PairCountMismatch: return "PairCountMismatch";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

constexpr ErrorCategory category(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::ZeroNormVector:
    case ErrorCode::NumericalFailure:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::EmptyNeighborhood:
    case ErrorCode::ZeroVariance:
      return ErrorCategory::Numerical;
    case ErrorCode::InvalidConfig:
      return ErrorCategory::Usage;
    default:
      return ErrorCategory::Data;
  }
}

/// Process exit status for an error code: 2 usage, 3 data, 4 numerical.
constexpr int exit_status(ErrorCode code) noexcept {
  switch (category(code)) {
    case ErrorCategory::Usage: return 2;
    case ErrorCategory::Data: return 3;
    case ErrorCategory::Numerical: return 4;
  }
  return 1;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        message_(message) {}

  ErrorCode code() const noexcept { return code_; }
  /// The message without the code prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

}  // namespace layerfuse
