#pragma once

#include <stdexcept>
#include <string>

namespace tta {

enum class ErrorCode {
    shape_mismatch,
    non_finite,
    invalid_argument,
    io,
    format,
    config,
};

// Single exception type for the whole engine. `code()` lets callers map
// failures onto CLI exit codes without string matching.
class Error : public std::runtime_error {
  public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const { return code_; }

  private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::shape_mismatch: return "shape_mismatch";
        case ErrorCode::non_finite: return "non_finite";
        case ErrorCode::invalid_argument: return "invalid_argument";
        case ErrorCode::io: return "io";
        case ErrorCode::format: return "format";
        case ErrorCode::config: return "config";
    }
    return "unknown";
}

}  // namespace tta
