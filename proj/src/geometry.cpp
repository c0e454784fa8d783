#include "segvec3d/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>
#include <set>
#include <unordered_map>

#include "segvec3d/error.hpp"

namespace segvec3d::geometry {

void PointCloud::validate() const {
  require(!positions.empty(), ErrorKind::kInvalidData, "point cloud is empty");
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (double v : positions[i]) {
      require(std::isfinite(v), ErrorKind::kInvalidData, "non-finite coordinate at point " + std::to_string(i));
    }
  }
  if (colors) {
    require(colors->size() == positions.size(), ErrorKind::kInvalidData, "color count does not match point count");
    for (const auto& c : *colors)
      for (double v : c) require(std::isfinite(v), ErrorKind::kInvalidData, "non-finite color");
  }
  if (instance_labels) {
    require(instance_labels->size() == positions.size(), ErrorKind::kInvalidData,
            "instance label count does not match point count");
    for (int l : *instance_labels) require(l >= -1, ErrorKind::kInvalidData, "instance label below -1");
  }
  if (!category_names.empty()) {
    require(instance_labels.has_value(), ErrorKind::kInvalidData, "category names without instance labels");
    std::set<int> present(instance_labels->begin(), instance_labels->end());
    for (const auto& [id, name] : category_names) {
      require(present.count(id) == 1, ErrorKind::kInvalidData,
              "category for instance " + std::to_string(id) + " which has no points");
    }
  }
}

nn::Matrix PointCloud::position_matrix() const {
  nn::Matrix m(positions.size(), 3);
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (std::size_t d = 0; d < 3; ++d) m(i, d) = positions[i][d];
  return m;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    const double diff = a[d] - b[d];
    s += diff * diff;
  }
  return s;
}

KdTree::KdTree(nn::Matrix points, std::size_t leaf_size)
    : points_(std::move(points)), leaf_size_(std::max<std::size_t>(leaf_size, 1)), order_(points_.rows()) {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (!order_.empty()) {
    nodes_.reserve(2 * (order_.size() / leaf_size_ + 1));
    build(0, order_.size());
  }
}

int KdTree::build(std::size_t begin, std::size_t end) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{begin, end});
  if (end - begin <= leaf_size_) return id;

  std::size_t best_dim = 0;
  double best_spread = -1.0;
  for (std::size_t d = 0; d < dim(); ++d) {
    double lo = points_(order_[begin], d);
    double hi = lo;
    for (std::size_t i = begin + 1; i < end; ++i) {
      lo = std::min(lo, points_(order_[i], d));
      hi = std::max(hi, points_(order_[i], d));
    }
    if (hi - lo > best_spread) {
      best_spread = hi - lo;
      best_dim = d;
    }
  }
  const std::size_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](std::size_t a, std::size_t b) {
                     const double va = points_(a, best_dim);
                     const double vb = points_(b, best_dim);
                     return va < vb || (va == vb && a < b);
                   });
  nodes_[id].split_dim = best_dim;
  nodes_[id].split_value = points_(order_[mid], best_dim);
  const int left = build(begin, mid);
  const int right = build(mid, end);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

double KdTree::squared_distance(std::span<const double> q, std::size_t point) const {
  return geometry::squared_distance(q, points_.row(point));
}

namespace {

struct Candidate {
  double dist2;
  std::size_t index;
  bool operator<(const Candidate& o) const { return dist2 < o.dist2 || (dist2 == o.dist2 && index < o.index); }
};

}  // namespace

std::vector<Neighbor> KdTree::knn(std::span<const double> query, std::size_t k,
                                  std::optional<std::size_t> exclude) const {
  require(query.size() == dim(), ErrorKind::kInvalidArgument, "kNN query dimension mismatch");
  std::priority_queue<Candidate> heap;  // max-heap: worst candidate on top
  if (k == 0 || nodes_.empty()) return {};

  // Subtree pruning is inclusive (<=) so equal-distance points with lower
  // indices are never skipped.
  auto visit = [&](auto&& self, int node_id) -> void {
    const Node& node = nodes_[node_id];
    if (node.left < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        const std::size_t p = order_[i];
        if (exclude && *exclude == p) continue;
        const Candidate c{squared_distance(query, p), p};
        if (heap.size() < k) {
          heap.push(c);
        } else if (c < heap.top()) {
          heap.pop();
          heap.push(c);
        }
      }
      return;
    }
    const double diff = query[node.split_dim] - node.split_value;
    const int near = diff < 0.0 ? node.left : node.right;
    const int far = diff < 0.0 ? node.right : node.left;
    self(self, near);
    if (heap.size() < k || diff * diff <= heap.top().dist2) self(self, far);
  };
  visit(visit, 0);

  std::vector<Neighbor> out(heap.size());
  for (std::size_t i = out.size(); i-- > 0;) {
    out[i] = Neighbor{heap.top().index, std::sqrt(heap.top().dist2)};
    heap.pop();
  }
  return out;
}

std::vector<std::size_t> KdTree::radius_search(std::span<const double> query, double radius) const {
  require(query.size() == dim(), ErrorKind::kInvalidArgument, "radius query dimension mismatch");
  std::vector<std::size_t> out;
  if (nodes_.empty()) return out;
  const double r2 = radius * radius;
  auto visit = [&](auto&& self, int node_id) -> void {
    const Node& node = nodes_[node_id];
    if (node.left < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        if (squared_distance(query, order_[i]) <= r2) out.push_back(order_[i]);
      }
      return;
    }
    const double diff = query[node.split_dim] - node.split_value;
    const int near = diff < 0.0 ? node.left : node.right;
    const int far = diff < 0.0 ? node.right : node.left;
    self(self, near);
    if (diff * diff <= r2) self(self, far);
  };
  visit(visit, 0);
  std::sort(out.begin(), out.end());
  return out;
}

NeighborGraph build_feature_knn(const nn::Matrix& features, std::size_t k) {
  const std::size_t n = features.rows();
  require(k > 0, ErrorKind::kInvalidArgument, "k must be positive");
  require(k < n, ErrorKind::kInvalidArgument,
          "k = " + std::to_string(k) + " must be smaller than the point count " + std::to_string(n));
  nn::validate_finite(features, "kNN input");

  const KdTree tree(features);
  NeighborGraph graph;
  graph.k = k;
  graph.neighbors.resize(n * k);
  graph.distances.resize(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto found = tree.knn(features.row(i), k, i);
    for (std::size_t j = 0; j < k; ++j) {
      graph.neighbors[i * k + j] = found[j].index;
      graph.distances[i * k + j] = found[j].distance;
    }
  }
  return graph;
}

NeighborGraph build_knn_graph(const PointCloud& cloud, std::size_t k) {
  require(!cloud.positions.empty(), ErrorKind::kInvalidData, "point cloud is empty");
  return build_feature_knn(cloud.position_matrix(), k);
}

namespace {

struct VoxelKey {
  long long x, y, z;
  bool operator==(const VoxelKey&) const = default;
};

struct VoxelKeyHash {
  std::size_t operator()(const VoxelKey& k) const noexcept {
    std::size_t h = static_cast<std::size_t>(k.x) * 73856093u;
    h ^= static_cast<std::size_t>(k.y) * 19349663u;
    h ^= static_cast<std::size_t>(k.z) * 83492791u;
    return h;
  }
};

}  // namespace

PointCloud voxel_downsample(const PointCloud& cloud, double voxel_size) {
  require(voxel_size > 0.0 && std::isfinite(voxel_size), ErrorKind::kInvalidArgument, "voxel size must be positive");
  cloud.validate();

  // Voxels are emitted in order of first occupancy.
  std::unordered_map<VoxelKey, std::size_t, VoxelKeyHash> slot_of;
  std::vector<std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.positions[i];
    const VoxelKey key{static_cast<long long>(std::floor(p[0] / voxel_size)),
                       static_cast<long long>(std::floor(p[1] / voxel_size)),
                       static_cast<long long>(std::floor(p[2] / voxel_size))};
    auto [it, inserted] = slot_of.try_emplace(key, members.size());
    if (inserted) members.emplace_back();
    members[it->second].push_back(i);
  }

  PointCloud out;
  out.positions.reserve(members.size());
  if (cloud.colors) out.colors.emplace();
  if (cloud.instance_labels) out.instance_labels.emplace();
  for (const auto& group : members) {
    const double inv = 1.0 / static_cast<double>(group.size());
    Vec3 centroid{0.0, 0.0, 0.0};
    Vec3 color{0.0, 0.0, 0.0};
    for (std::size_t i : group) {
      for (std::size_t d = 0; d < 3; ++d) {
        centroid[d] += cloud.positions[i][d];
        if (cloud.colors) color[d] += (*cloud.colors)[i][d];
      }
    }
    for (std::size_t d = 0; d < 3; ++d) {
      centroid[d] *= inv;
      color[d] *= inv;
    }
    out.positions.push_back(centroid);
    if (cloud.colors) out.colors->push_back(color);
    if (cloud.instance_labels) {
      // Majority over labeled members, ties to the smallest id; -1 only if nothing is labeled.
      std::map<int, std::size_t> votes;
      for (std::size_t i : group) {
        const int l = (*cloud.instance_labels)[i];
        if (l >= 0) votes[l] += 1;
      }
      int best = -1;
      std::size_t best_count = 0;
      for (const auto& [label, count] : votes) {
        if (count > best_count) {
          best = label;
          best_count = count;
        }
      }
      out.instance_labels->push_back(best);
    }
  }
  if (out.instance_labels) {
    std::set<int> present(out.instance_labels->begin(), out.instance_labels->end());
    for (const auto& [id, name] : cloud.category_names) {
      if (present.count(id)) out.category_names.emplace(id, name);
    }
  }
  return out;
}

}  // namespace segvec3d::geometry
