#include <cmath>
#include <numbers>

#include "segvec3d/error.hpp"
#include "segvec3d/random.hpp"

namespace segvec3d {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid-argument";
    case ErrorKind::kInvalidData: return "invalid-data";
    case ErrorKind::kInvalidState: return "invalid-state";
    case ErrorKind::kDegenerateSupervision: return "degenerate-supervision";
    case ErrorKind::kDegenerateInstance: return "degenerate-instance";
    case ErrorKind::kDegenerateEmbedding: return "degenerate-embedding";
    case ErrorKind::kPlacementFailure: return "placement-failure";
    case ErrorKind::kDimensionalityTooSmall: return "dimensionality-too-small";
    case ErrorKind::kInsufficientPairing: return "insufficient-pairing";
    case ErrorKind::kTrainingDiverged: return "training-diverged";
    case ErrorKind::kParse: return "parse-error";
    case ErrorKind::kUnsupportedVersion: return "unsupported-version";
    case ErrorKind::kIo: return "io-error";
  }
  return "unknown";
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace segvec3d
