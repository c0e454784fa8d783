#pragma once

// Central finite-difference checks of every backward pass in the library.

#include <cstdint>
#include <string>
#include <vector>

#include "segvec3d/nn.hpp"

namespace segvec3d::gradcheck {

struct SuiteEntry {
  std::string name;
  nn::GradCheckReport report;
};

// Each MLP of a small network, one attention layer, the pull-push loss,
// InfoNCE, and forward_full + loss end to end on a 12-point, 2-instance scene.
std::vector<SuiteEntry> run_gradient_suite(std::uint64_t seed, const nn::GradCheckOptions& options = {});

}  // namespace segvec3d::gradcheck
