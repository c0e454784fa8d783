#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "segvec3d/nn.hpp"

namespace segvec3d::losses {

using IndexPair = std::pair<std::size_t, std::size_t>;

// Positive (same instance) and negative (different instance) point pairs.
struct PairSet {
  std::vector<IndexPair> positives;
  std::vector<IndexPair> negatives;
  double margin = 1.0;

  std::size_t size() const noexcept { return positives.size() + negatives.size(); }
  bool operator==(const PairSet&) const = default;
};

// Up to `budget` positives and `budget` negatives drawn uniformly without
// replacement from labeled points (label >= 0). Pairs are stored (i < j), sorted.
PairSet sample_pairs(std::span<const int> weak_groups, std::size_t budget, std::uint64_t seed, double margin = 1.0);

struct ContrastiveResult {
  double sum = 0.0;       // pull-push loss as a plain sum over pairs
  double mean = 0.0;      // sum / |pairs|
  nn::Matrix gradient;    // d mean / d embeddings
};

ContrastiveResult contrastive_loss(const nn::Matrix& embeddings, const PairSet& pairs);

// Keeps ceil(fraction * labeled) labeled points chosen by a seeded shuffle; the rest become -1.
std::vector<int> subsample_labels(std::span<const int> labels, double fraction, std::uint64_t seed);

}  // namespace segvec3d::losses
