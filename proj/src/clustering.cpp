#include "segvec3d/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <numeric>
#include <unordered_map>

#include "segvec3d/error.hpp"
#include "segvec3d/geometry.hpp"

namespace segvec3d::clustering {

InstanceSegmentation make_contiguous(std::span<const int> raw) {
  InstanceSegmentation out;
  out.labels.assign(raw.size(), -1);
  std::unordered_map<int, int> remap;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] < 0) continue;
    auto [it, inserted] = remap.try_emplace(raw[i], static_cast<int>(remap.size()));
    out.labels[i] = it->second;
  }
  out.num_instances = remap.size();
  return out;
}

namespace {

void validate_embeddings(const nn::Matrix& e) {
  require(e.rows() >= 1, ErrorKind::kInvalidArgument, "no embeddings to cluster");
  nn::validate_finite(e, "embeddings");
}

}  // namespace

InstanceSegmentation dbscan(const nn::Matrix& embeddings, double eps, std::size_t min_pts) {
  require(eps > 0.0, ErrorKind::kInvalidArgument, "eps must be positive");
  require(min_pts >= 1, ErrorKind::kInvalidArgument, "min_pts must be at least 1");
  validate_embeddings(embeddings);
  const std::size_t n = embeddings.rows();
  const geometry::KdTree tree(embeddings);

  std::vector<std::vector<std::size_t>> region(n);
  for (std::size_t i = 0; i < n; ++i) region[i] = tree.radius_search(embeddings.row(i), eps);

  constexpr int kUnvisited = -2;
  constexpr int kNoise = -1;
  std::vector<int> labels(n, kUnvisited);
  int cluster = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != kUnvisited) continue;
    if (region[i].size() < min_pts) {
      labels[i] = kNoise;
      continue;
    }
    labels[i] = cluster;
    std::deque<std::size_t> frontier{i};
    while (!frontier.empty()) {
      const std::size_t p = frontier.front();
      frontier.pop_front();
      if (region[p].size() < min_pts) continue;  // border point: not expanded
      for (std::size_t q : region[p]) {
        if (labels[q] == kUnvisited || labels[q] == kNoise) {
          const bool fresh = labels[q] == kUnvisited;
          labels[q] = cluster;
          if (fresh || region[q].size() >= min_pts) frontier.push_back(q);
        }
      }
    }
    ++cluster;
  }
  return make_contiguous(labels);
}

InstanceSegmentation mean_shift(const nn::Matrix& embeddings, double bandwidth, const MeanShiftOptions& options,
                                nn::Matrix* modes) {
  require(bandwidth > 0.0, ErrorKind::kInvalidArgument, "bandwidth must be positive");
  validate_embeddings(embeddings);
  const std::size_t n = embeddings.rows();
  const std::size_t d = embeddings.cols();
  const geometry::KdTree tree(embeddings);
  const double stop = options.tolerance * bandwidth;

  nn::Matrix converged(n, d);
  std::vector<double> x(d);
  std::vector<double> next(d);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(embeddings.row(i).begin(), embeddings.row(i).end(), x.begin());
    for (std::size_t it = 0; it < options.max_iterations; ++it) {
      const auto members = tree.radius_search(x, bandwidth);
      if (members.empty()) break;
      std::fill(next.begin(), next.end(), 0.0);
      for (std::size_t m : members) {
        const auto row = embeddings.row(m);
        for (std::size_t c = 0; c < d; ++c) next[c] += row[c];
      }
      for (double& v : next) v /= static_cast<double>(members.size());
      const double shift = std::sqrt(geometry::squared_distance(x, next));
      x.swap(next);
      if (shift < stop) break;
    }
    std::copy(x.begin(), x.end(), converged.row(i).begin());
  }

  // Greedy first-fit merge of modes closer than half a bandwidth.
  std::vector<std::vector<double>> centers;
  const double merge2 = 0.25 * bandwidth * bandwidth;
  for (std::size_t i = 0; i < n; ++i) {
    const auto mode = converged.row(i);
    const bool merged = std::any_of(centers.begin(), centers.end(), [&](const std::vector<double>& c) {
      return geometry::squared_distance(mode, c) < merge2;
    });
    if (!merged) centers.emplace_back(mode.begin(), mode.end());
  }

  std::vector<int> raw(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centers.size(); ++c) {
      const double dist = geometry::squared_distance(embeddings.row(i), centers[c]);
      if (dist < best) {
        best = dist;
        raw[i] = static_cast<int>(c);
      }
    }
  }
  InstanceSegmentation seg = make_contiguous(raw);
  if (modes != nullptr) {
    *modes = nn::Matrix(seg.num_instances, d);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& c = centers[static_cast<std::size_t>(raw[i])];
      std::copy(c.begin(), c.end(), modes->row(static_cast<std::size_t>(seg.labels[i])).begin());
    }
  }
  return seg;
}

InstanceSegmentation radius_linkage(const nn::Matrix& embeddings, double radius) {
  require(radius > 0.0, ErrorKind::kInvalidArgument, "radius must be positive");
  validate_embeddings(embeddings);
  const std::size_t n = embeddings.rows();
  const geometry::KdTree tree(embeddings);

  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&parent](std::size_t a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j : tree.radius_search(embeddings.row(i), radius)) {
      const std::size_t a = find(i);
      const std::size_t b = find(j);
      if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
  }
  std::vector<int> raw(n);
  for (std::size_t i = 0; i < n; ++i) raw[i] = static_cast<int>(find(i));
  return make_contiguous(raw);
}

namespace {

double choose2(double x) { return x * (x - 1.0) / 2.0; }

}  // namespace

double adjusted_rand_index(std::span<const int> pred, std::span<const int> truth) {
  require(pred.size() == truth.size(), ErrorKind::kInvalidArgument, "ARI: labelings differ in length");
  const std::size_t n = pred.size();
  if (n < 2) return 1.0;

  // Noise becomes a fresh singleton id.
  auto canonical = [n](std::span<const int> labels) {
    std::vector<long long> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = labels[i] >= 0 ? labels[i] : -1 - static_cast<long long>(i);
    }
    return out;
  };
  const auto a = canonical(pred);
  const auto b = canonical(truth);

  std::map<std::pair<long long, long long>, double> table;
  std::map<long long, double> rows;
  std::map<long long, double> cols;
  for (std::size_t i = 0; i < n; ++i) {
    table[{a[i], b[i]}] += 1.0;
    rows[a[i]] += 1.0;
    cols[b[i]] += 1.0;
  }
  double index = 0.0;
  for (const auto& [key, count] : table) index += choose2(count);
  double sum_rows = 0.0;
  for (const auto& [key, count] : rows) sum_rows += choose2(count);
  double sum_cols = 0.0;
  for (const auto& [key, count] : cols) sum_cols += choose2(count);
  const double expected = sum_rows * sum_cols / choose2(static_cast<double>(n));
  const double max_index = 0.5 * (sum_rows + sum_cols);
  if (max_index == expected) return 1.0;  // both partitions trivial
  return (index - expected) / (max_index - expected);
}

double adjusted_rand_index(const InstanceSegmentation& pred, std::span<const int> truth) {
  return adjusted_rand_index(std::span<const int>(pred.labels), truth);
}

}  // namespace segvec3d::clustering
