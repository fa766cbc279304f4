// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace moebqa {

// Failure classes map onto CLI exit codes: everything configuration- or
// input-shaped exits 2, numerical failures exit 3. Verification failures
// (gradient check) are not exceptions; the CLI returns 4 directly.
enum class ErrorKind {
  kConfig,
  kDimension,
  kSpan,
  kInput,
  kNumerical,
  kRouting,
  kContract,
  kParse,
  kValidation,
  kCheckpointVersion,
  kCheckpointTruncated,
  kCheckpointChecksum,
  kCheckpointMismatch,
  kInternal,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string msg)
      : std::runtime_error(std::move(msg)), kind_(kind) {}
  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(std::string m) : Error(ErrorKind::kConfig, std::move(m)) {}
};
struct DimensionError : Error {
  explicit DimensionError(std::string m) : Error(ErrorKind::kDimension, std::move(m)) {}
};
struct SpanError : Error {
  explicit SpanError(std::string m) : Error(ErrorKind::kSpan, std::move(m)) {}
};
struct InputError : Error {
  explicit InputError(std::string m) : Error(ErrorKind::kInput, std::move(m)) {}
};
struct NumericalError : Error {
  explicit NumericalError(std::string m) : Error(ErrorKind::kNumerical, std::move(m)) {}
};
struct RoutingError : Error {
  explicit RoutingError(std::string m) : Error(ErrorKind::kRouting, std::move(m)) {}
};
struct ContractError : Error {
  explicit ContractError(std::string m) : Error(ErrorKind::kContract, std::move(m)) {}
};
struct ParseError : Error {
  explicit ParseError(std::string m) : Error(ErrorKind::kParse, std::move(m)) {}
};
struct ValidationError : Error {
  explicit ValidationError(std::string m) : Error(ErrorKind::kValidation, std::move(m)) {}
};
struct CheckpointError : Error {
  CheckpointError(ErrorKind kind, std::string m) : Error(kind, std::move(m)) {}
};
struct InternalError : Error {
  explicit InternalError(std::string m) : Error(ErrorKind::kInternal, std::move(m)) {}
};

// Exit code contract: 0 success, 2 configuration/input, 3 numerical,
// 4 verification failure.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kNumerical:
      return 3;
    default:
      return 2;
  }
}

}  // namespace moebqa
