#include "hashsdf/error.hpp"

namespace hashsdf {

std::string_view error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidInput: return "invalid_input";
    case ErrorCode::Io: return "io_error";
    case ErrorCode::NonFinite: return "non_finite";
    case ErrorCode::Config: return "config_error";
    case ErrorCode::Checkpoint: return "checkpoint_error";
    case ErrorCode::Locked: return "run_locked";
  }
  return "unknown";
}

}  // namespace hashsdf
