#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <tuple>

#include "doctest.h"
#include "segvec3d/geometry.hpp"
#include "test_util.hpp"

using namespace segvec3d;
using namespace segvec3d::geometry;
using testutil::error_kind;

namespace {

PointCloud cloud_of(std::vector<Vec3> pts) {
  PointCloud c;
  c.positions = std::move(pts);
  return c;
}

// O(N^2) scan: sort all others by (distance, index), keep k.
NeighborGraph brute_force(const nn::Matrix& x, std::size_t k) {
  NeighborGraph g;
  g.k = k;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t j = 0; j < x.rows(); ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t d = 0; d < x.cols(); ++d) s += (x(i, d) - x(j, d)) * (x(i, d) - x(j, d));
      all.emplace_back(s, j);
    }
    std::sort(all.begin(), all.end());
    for (std::size_t t = 0; t < k; ++t) {
      g.neighbors.push_back(all[t].second);
      g.distances.push_back(std::sqrt(all[t].first));
    }
  }
  return g;
}

}  // namespace

TEST_CASE("build_knn_graph: collinear points with k = 1") {
  const auto g = build_knn_graph(cloud_of({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {4, 0, 0}}), 1);
  CHECK(g.neighbors == std::vector<std::size_t>{1, 0, 1, 2});
  CHECK(g.distances == std::vector<double>{1, 1, 1, 2});
}

TEST_CASE("build_knn_graph: k = N - 1 lists every other point") {
  Rng rng(11);
  const auto cloud = testutil::random_cloud(9, rng, false);
  const auto g = build_knn_graph(cloud, 8);
  for (std::size_t i = 0; i < 9; ++i) {
    std::set<std::size_t> row(g.neighbors_of(i).begin(), g.neighbors_of(i).end());
    CHECK(row.size() == 8);
    CHECK(row.count(i) == 0);
  }
}

TEST_CASE("build_knn_graph: 200 random points match brute force exactly") {
  Rng rng(12);
  const auto cloud = testutil::random_cloud(200, rng, false);
  const auto g = build_knn_graph(cloud, 8);
  const auto oracle = brute_force(cloud.position_matrix(), 8);
  CHECK(g.neighbors == oracle.neighbors);
  CHECK(g.distances == oracle.distances);
}

TEST_CASE("build_feature_knn: positions as features reproduce the spatial graph") {
  Rng rng(13);
  const auto cloud = testutil::random_cloud(60, rng, false);
  CHECK(build_feature_knn(cloud.position_matrix(), 5) == build_knn_graph(cloud, 5));
}

TEST_CASE("build_feature_knn: one-hot features tie, lowest index wins") {
  nn::Matrix onehot(4, 4);
  for (std::size_t i = 0; i < 4; ++i) onehot(i, i) = 1.0;
  const auto g = build_feature_knn(onehot, 1);
  CHECK(g.neighbors == std::vector<std::size_t>{1, 0, 0, 0});
}

TEST_CASE("build_feature_knn: 100 random 16-d features match brute force") {
  Rng rng(14);
  const auto x = testutil::random_matrix(100, 16, rng);
  const auto g = build_feature_knn(x, 4);
  const auto oracle = brute_force(x, 4);
  CHECK(g.neighbors == oracle.neighbors);
  CHECK(g.distances == oracle.distances);
}

TEST_CASE("build_knn_graph: k >= N and non-finite input are rejected") {
  Rng rng(15);
  auto cloud = testutil::random_cloud(5, rng, false);
  CHECK(error_kind([&] { build_knn_graph(cloud, 5); }) == ErrorKind::kInvalidArgument);
  CHECK(error_kind([&] { build_knn_graph(cloud, 0); }) == ErrorKind::kInvalidArgument);
  cloud.positions[2][1] = std::numeric_limits<double>::quiet_NaN();
  CHECK(error_kind([&] { build_knn_graph(cloud, 2); }) == ErrorKind::kInvalidData);
  nn::Matrix f(5, 2, 0.5);
  f(0, 0) = std::numeric_limits<double>::infinity();
  CHECK(error_kind([&] { build_feature_knn(f, 2); }) == ErrorKind::kInvalidData);
}

TEST_CASE("build_knn_graph: duplicates may be neighbors at distance zero") {
  const auto g = build_knn_graph(cloud_of({{0, 0, 0}, {0, 0, 0}, {3, 0, 0}}), 1);
  CHECK(g.neighbors_of(0)[0] == 1);
  CHECK(g.distances_of(0)[0] == 0.0);
}

TEST_CASE("build_knn_graph: permuting the input permutes the neighbor sets") {
  Rng rng(16);
  const auto cloud = testutil::random_cloud(120, rng, false);
  std::vector<std::size_t> perm(cloud.size());
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.index(i + 1)]);
  // permuted[p] = cloud[perm[p]]
  PointCloud permuted;
  for (std::size_t p : perm) permuted.positions.push_back(cloud.positions[p]);
  const auto g = build_knn_graph(cloud, 6);
  const auto h = build_knn_graph(permuted, 6);
  for (std::size_t p = 0; p < perm.size(); ++p) {
    std::vector<std::size_t> mapped;
    for (std::size_t q : h.neighbors_of(p)) mapped.push_back(perm[q]);
    const auto expect = g.neighbors_of(perm[p]);
    CHECK(std::equal(mapped.begin(), mapped.end(), expect.begin(), expect.end()));
  }
}

TEST_CASE("build_knn_graph: rows are valid, sorted, and distances recompute") {
  Rng rng(17);
  const auto cloud = testutil::random_cloud(300, rng, false);
  const auto g = build_knn_graph(cloud, 10);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto nb = g.neighbors_of(i);
    const auto ds = g.distances_of(i);
    CHECK(std::set<std::size_t>(nb.begin(), nb.end()).size() == nb.size());
    CHECK(std::is_sorted(ds.begin(), ds.end()));
    for (std::size_t j = 0; j < nb.size(); ++j) {
      CHECK(nb[j] != i);
      const auto& a = cloud.positions[i];
      const auto& b = cloud.positions[nb[j]];
      const double d = std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) +
                                 (a[2] - b[2]) * (a[2] - b[2]));
      CHECK(std::abs(ds[j] - d) <= 1e-12 * std::max(d, 1e-300));
    }
  }
}

TEST_CASE("KdTree: radius search matches a linear scan") {
  Rng rng(18);
  const auto x = testutil::random_matrix(250, 3, rng);
  const KdTree tree(x);
  for (int q = 0; q < 20; ++q) {
    const std::vector<double> query{rng.normal(), rng.normal(), rng.normal()};
    const double r = 0.2 + rng.uniform();
    std::vector<std::size_t> expect;
    for (std::size_t i = 0; i < x.rows(); ++i)
      if (squared_distance(query, x.row(i)) <= r * r) expect.push_back(i);
    CHECK(tree.radius_search(query, r) == expect);
  }
}

TEST_CASE("voxel_downsample: two points in one voxel become their midpoint") {
  PointCloud c = cloud_of({{0.1, 0.2, 0.3}, {0.3, 0.4, 0.5}});
  c.colors = std::vector<Vec3>{{0, 0, 0}, {1, 0.5, 0}};
  const auto out = voxel_downsample(c, 1.0);
  REQUIRE(out.size() == 1);
  CHECK(out.positions[0][0] == doctest::Approx(0.2));
  CHECK(out.positions[0][1] == doctest::Approx(0.3));
  CHECK(out.positions[0][2] == doctest::Approx(0.4));
  CHECK((*out.colors)[0][0] == doctest::Approx(0.5));
  CHECK((*out.colors)[0][1] == doctest::Approx(0.25));
}

TEST_CASE("voxel_downsample: voxels smaller than the point spacing keep every point") {
  Rng rng(19);
  const auto cloud = testutil::random_cloud(80, rng, false);
  double min_d = 1e9;
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (std::size_t j = i + 1; j < cloud.size(); ++j)
      min_d = std::min(min_d, std::sqrt(squared_distance(cloud.positions[i], cloud.positions[j])));
  const auto out = voxel_downsample(cloud, min_d / 2.0);
  auto a = cloud.positions;
  auto b = out.positions;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);
}

TEST_CASE("voxel_downsample: output size equals occupied voxels from a hashing oracle") {
  Rng rng(20);
  const auto cloud = testutil::random_cloud(1000, rng, false);
  std::set<std::tuple<long, long, long>> occupied;
  for (const auto& p : cloud.positions)
    occupied.emplace(std::lround(std::floor(p[0] / 0.1)), std::lround(std::floor(p[1] / 0.1)),
                     std::lround(std::floor(p[2] / 0.1)));
  CHECK(voxel_downsample(cloud, 0.1).size() == occupied.size());
}

TEST_CASE("voxel_downsample: idempotent when centroids stay inside their voxels") {
  // Clusters of points around voxel centres on a 0.5 grid.
  Rng rng(21);
  PointCloud c;
  for (int gx = 0; gx < 4; ++gx)
    for (int gy = 0; gy < 3; ++gy)
      for (int s = 0; s < 5; ++s)
        c.positions.push_back({0.5 * gx + 0.25 + 0.1 * (rng.uniform() - 0.5),
                               0.5 * gy + 0.25 + 0.1 * (rng.uniform() - 0.5), 0.25 + 0.1 * (rng.uniform() - 0.5)});
  const auto once = voxel_downsample(c, 0.5);
  CHECK(once.size() == 12);
  CHECK(voxel_downsample(once, 0.5) == once);
}

TEST_CASE("voxel_downsample: labels take the majority, ties to the smaller id") {
  PointCloud c = cloud_of({{0.1, 0.1, 0.1}, {0.2, 0.1, 0.1}, {0.3, 0.1, 0.1}, {5.1, 0, 0}, {5.2, 0, 0}});
  c.instance_labels = std::vector<int>{3, 1, 3, 7, 2};
  const auto out = voxel_downsample(c, 1.0);
  REQUIRE(out.size() == 2);
  CHECK(*out.instance_labels == std::vector<int>{3, 2});
}

TEST_CASE("voxel_downsample: non-positive voxel size is rejected") {
  const auto c = cloud_of({{0, 0, 0}});
  CHECK(error_kind([&] { voxel_downsample(c, 0.0); }) == ErrorKind::kInvalidArgument);
  CHECK(error_kind([&] { voxel_downsample(c, -1.0); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("PointCloud::validate: broken invariants are invalid data") {
  PointCloud c = cloud_of({{0, 0, 0}, {1, 1, 1}});
  CHECK_FALSE(error_kind([&] { c.validate(); }).has_value());
  c.instance_labels = std::vector<int>{0};
  CHECK(error_kind([&] { c.validate(); }) == ErrorKind::kInvalidData);
  c.instance_labels = std::vector<int>{0, -1};
  c.category_names[4] = "lamp";
  CHECK(error_kind([&] { c.validate(); }) == ErrorKind::kInvalidData);
  CHECK(error_kind([] { PointCloud{}.validate(); }) == ErrorKind::kInvalidData);
}
