#pragma once

#include <stdexcept>
#include <string>

namespace segvec3d {

enum class ErrorKind {
  kInvalidArgument,
  kInvalidData,
  kInvalidState,
  kDegenerateSupervision,
  kDegenerateInstance,
  kDegenerateEmbedding,
  kPlacementFailure,
  kDimensionalityTooSmall,
  kInsufficientPairing,
  kTrainingDiverged,
  kParse,
  kUnsupportedVersion,
  kIo,
};

const char* to_string(ErrorKind kind);

// Single exception type for the library; the kind drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace segvec3d
