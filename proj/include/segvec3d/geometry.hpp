#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "segvec3d/nn.hpp"

namespace segvec3d::geometry {

using Vec3 = std::array<double, 3>;

struct PointCloud {
  std::vector<Vec3> positions;
  // RGB in [0, 1].
  std::optional<std::vector<Vec3>> colors;
  // Instance id >= 0, or -1 for unlabeled.
  std::optional<std::vector<int>> instance_labels;
  std::map<int, std::string> category_names;

  std::size_t size() const noexcept { return positions.size(); }
  bool has_colors() const noexcept { return colors.has_value(); }
  bool has_labels() const noexcept { return instance_labels.has_value(); }

  // Throws invalid-data on any broken invariant.
  void validate() const;

  // N x 3 copy of the positions.
  nn::Matrix position_matrix() const;

  bool operator==(const PointCloud&) const = default;
};

struct NeighborGraph {
  std::size_t k = 0;
  // Row-major N x k.
  std::vector<std::size_t> neighbors;
  std::vector<double> distances;

  std::size_t size() const noexcept { return k == 0 ? 0 : neighbors.size() / k; }
  std::span<const std::size_t> neighbors_of(std::size_t i) const { return {neighbors.data() + i * k, k}; }
  std::span<const double> distances_of(std::size_t i) const { return {distances.data() + i * k, k}; }

  bool operator==(const NeighborGraph&) const = default;
};

struct Neighbor {
  std::size_t index;
  double distance;
};

// Exact kd-tree over the rows of a matrix, median split on the widest axis.
// Immutable after construction; const queries are safe from multiple threads.
class KdTree {
 public:
  explicit KdTree(nn::Matrix points, std::size_t leaf_size = 8);

  std::size_t size() const noexcept { return points_.rows(); }
  std::size_t dim() const noexcept { return points_.cols(); }
  const nn::Matrix& points() const noexcept { return points_; }

  // k nearest to `query` sorted by (distance, index); `exclude` is skipped if set.
  std::vector<Neighbor> knn(std::span<const double> query, std::size_t k,
                            std::optional<std::size_t> exclude = std::nullopt) const;

  // Indices with distance <= radius, ascending index order.
  std::vector<std::size_t> radius_search(std::span<const double> query, double radius) const;

 private:
  struct Node {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t split_dim = 0;
    double split_value = 0.0;
    int left = -1;
    int right = -1;
  };

  int build(std::size_t begin, std::size_t end);
  double squared_distance(std::span<const double> q, std::size_t point) const;

  nn::Matrix points_;
  std::size_t leaf_size_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

// Squared Euclidean distance, summed in dimension order.
double squared_distance(std::span<const double> a, std::span<const double> b);

NeighborGraph build_knn_graph(const PointCloud& cloud, std::size_t k);
NeighborGraph build_feature_knn(const nn::Matrix& features, std::size_t k);

PointCloud voxel_downsample(const PointCloud& cloud, double voxel_size);

}  // namespace segvec3d::geometry
