#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hashsdf {

enum class ErrorCode {
  InvalidInput,
  Io,
  NonFinite,
  Config,
  Checkpoint,
  Locked,
};

/// Stable machine-readable name for an error code ("invalid_input", ...).
std::string_view error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(ErrorCode::InvalidInput, message);
}

}  // namespace hashsdf
