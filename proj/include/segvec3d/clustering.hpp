#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "segvec3d/nn.hpp"

namespace segvec3d::clustering {

// labels[i] in 0..num_instances-1, or -1 for noise; ids ordered by smallest member index.
struct InstanceSegmentation {
  std::vector<int> labels;
  std::size_t num_instances = 0;

  bool operator==(const InstanceSegmentation&) const = default;
};

// Renumbers arbitrary ids (negative = noise) to the contiguous convention.
InstanceSegmentation make_contiguous(std::span<const int> raw);

// Core point: at least min_pts points (self included) within distance <= eps.
InstanceSegmentation dbscan(const nn::Matrix& embeddings, double eps, std::size_t min_pts);

struct MeanShiftOptions {
  double tolerance = 1e-4;  // relative to the bandwidth
  std::size_t max_iterations = 300;
};

// Flat kernel. `modes`, if given, receives one merged mode per instance (row = instance id).
InstanceSegmentation mean_shift(const nn::Matrix& embeddings, double bandwidth, const MeanShiftOptions& options = {},
                                nn::Matrix* modes = nullptr);

// Connected components of the graph joining points at distance <= radius.
InstanceSegmentation radius_linkage(const nn::Matrix& embeddings, double radius);

// Noise points in either labeling count as singleton clusters.
double adjusted_rand_index(const InstanceSegmentation& pred, std::span<const int> truth);
double adjusted_rand_index(std::span<const int> pred, std::span<const int> truth);

}  // namespace segvec3d::clustering
