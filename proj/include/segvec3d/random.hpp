#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace segvec3d {

// std::mt19937_64 is bit-specified by the standard; the distributions are not,
// so draws are done here to keep outputs identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n) by rejection; n > 0.
  std::uint64_t index(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t draw = engine_();
    while (draw >= limit) draw = engine_();
    return draw % n;
  }

  // Box-Muller, one value per call.
  double normal();

 private:
  std::mt19937_64 engine_;
};

// Mixes several integers into one seed (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace segvec3d
