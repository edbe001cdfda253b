#pragma once

#include <stdexcept>
#include <string>

namespace dinet {

// Error classes surface unchanged through the C API as status codes.
enum class ErrorCode {
  invalid_argument,
  shape_mismatch,
  io,
  corrupt_file,
  version_mismatch,
  detached,
  non_finite,
  diverged,
  already_exists,
  grad_check_failed,
};

const char* error_code_name(ErrorCode code) noexcept;

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

}  // namespace dinet
