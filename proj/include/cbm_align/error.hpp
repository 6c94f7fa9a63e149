#pragma once

#include <stdexcept>
#include <string>

namespace cbm_align {

/// Coarse error categories; the CLI reports them in its error JSON.
enum class ErrorKind {
  kInvalidArgument,
  kShapeMismatch,
  kIo,
  kFormat,
  kValidation,
  kInfeasible,
  kNumeric,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid_argument";
    case ErrorKind::kShapeMismatch: return "shape_mismatch";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kValidation: return "validation";
    case ErrorKind::kInfeasible: return "infeasible";
    case ErrorKind::kNumeric: return "numeric";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define CBM_ALIGN_CHECK(cond, kind, msg)                 \
  do {                                                   \
    if (!(cond)) throw ::cbm_align::Error((kind), (msg)); \
  } while (0)

}  // namespace cbm_align
