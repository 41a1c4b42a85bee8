// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lmleak {

enum class ErrorCode {
  InvalidConfig,
  AllocationTooLarge,
  OutOfGlobalMemory,
  UnknownHandle,
  OwnershipViolation,
  NothingToRun,
  GlobalOutOfBounds,
  LocalOutOfBounds,
  ValidationError,
  FormatError,
  InsufficientData,
  ShapeError,
};

const char* error_code_name(ErrorCode code);

// Typed failure used across the library. `code()` identifies the condition so
// callers can branch without parsing the message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::AllocationTooLarge: return "AllocationTooLarge";
    case ErrorCode::OutOfGlobalMemory: return "OutOfGlobalMemory";
    case ErrorCode::UnknownHandle: return "UnknownHandle";
    case ErrorCode::OwnershipViolation: return "OwnershipViolation";
    case ErrorCode::NothingToRun: return "NothingToRun";
    case ErrorCode::GlobalOutOfBounds: return "GlobalOutOfBounds";
    case ErrorCode::LocalOutOfBounds: return "LocalOutOfBounds";
    case ErrorCode::ValidationError: return "ValidationError";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::ShapeError: return "ShapeError";
  }
  return "UnknownError";
}

}  // namespace lmleak
