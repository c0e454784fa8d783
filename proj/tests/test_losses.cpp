#include <cmath>
#include <set>

#include "doctest.h"
#include "segvec3d/losses.hpp"
#include "test_util.hpp"

using namespace segvec3d;
using namespace segvec3d::losses;
using testutil::error_kind;
using testutil::random_matrix;

namespace {

double pair_distance(const nn::Matrix& e, std::size_t i, std::size_t j) {
  double s = 0.0;
  for (std::size_t d = 0; d < e.cols(); ++d) s += (e(i, d) - e(j, d)) * (e(i, d) - e(j, d));
  return std::sqrt(s);
}

// Direct pull-push sum over pairs.
double direct_sum(const nn::Matrix& e, const PairSet& p) {
  double s = 0.0;
  for (auto [i, j] : p.positives) s += std::pow(pair_distance(e, i, j), 2);
  for (auto [i, j] : p.negatives) s += std::pow(std::max(0.0, p.margin - pair_distance(e, i, j)), 2);
  return s;
}

PairSet random_pairs(std::size_t n, Rng& rng, double margin) {
  std::vector<int> groups(n);
  for (auto& g : groups) g = static_cast<int>(rng.index(4));
  return sample_pairs(groups, 40, rng.next_u64(), margin);
}

}  // namespace

TEST_CASE("sample_pairs: exhaustive small case") {
  const std::vector<int> labels{0, 0, 1, 1};
  const PairSet p = sample_pairs(labels, 100, 7);
  CHECK(p.positives == std::vector<IndexPair>{{0, 1}, {2, 3}});
  CHECK(p.negatives == std::vector<IndexPair>{{0, 2}, {0, 3}, {1, 2}, {1, 3}});
}

TEST_CASE("sample_pairs: no supervision or a single group is degenerate") {
  CHECK(error_kind([] { sample_pairs(std::vector<int>{-1, -1, -1}, 10, 1); }) ==
        ErrorKind::kDegenerateSupervision);
  CHECK(error_kind([] { sample_pairs(std::vector<int>{2, 2, 2, -1}, 10, 1); }) ==
        ErrorKind::kDegenerateSupervision);
  CHECK(error_kind([] { sample_pairs(std::vector<int>{0, 1, 2}, 10, 1); }) == ErrorKind::kDegenerateSupervision);
}

TEST_CASE("sample_pairs: 500 labeled points, every pair passes a validity scan") {
  Rng rng(3);
  std::vector<int> labels(700);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i < 500 ? static_cast<int>(rng.index(6)) : -1;
  const PairSet p = sample_pairs(labels, 1000, 42);
  CHECK(p.positives.size() == 1000);
  CHECK(p.negatives.size() == 1000);
  std::set<IndexPair> seen;
  for (const auto& [i, j] : p.positives) {
    CHECK(i < j);
    CHECK(labels[i] >= 0);
    CHECK(labels[i] == labels[j]);
    CHECK(seen.insert({i, j}).second);
  }
  for (const auto& [i, j] : p.negatives) {
    CHECK(i < j);
    CHECK(labels[i] >= 0);
    CHECK(labels[j] >= 0);
    CHECK(labels[i] != labels[j]);
    CHECK(seen.insert({i, j}).second);
  }
  CHECK(sample_pairs(labels, 1000, 42) == p);
  CHECK_FALSE(sample_pairs(labels, 1000, 43) == p);
}

TEST_CASE("contrastive_loss: coincident positive pair gives zero loss and zero gradient") {
  nn::Matrix e = nn::Matrix::from_rows({{0.3, -0.2}, {0.3, -0.2}});
  PairSet p;
  p.positives = {{0, 1}};
  const auto r = contrastive_loss(e, p);
  CHECK(r.sum == 0.0);
  for (double g : r.gradient.values()) CHECK(g == 0.0);
}

TEST_CASE("contrastive_loss: negative pair beyond the margin contributes nothing") {
  PairSet p;
  p.negatives = {{0, 1}};
  const auto r = contrastive_loss(nn::Matrix::from_rows({{0.0, 0.0}, {1.5, 0.0}}), p);
  CHECK(r.sum == 0.0);
  const auto at = contrastive_loss(nn::Matrix::from_rows({{0.0, 0.0}, {1.0, 0.0}}), p);
  CHECK(at.sum == 0.0);
}

TEST_CASE("contrastive_loss: negative pair at distance 0.4 with m = 1 gives 0.36") {
  PairSet p;
  p.negatives = {{0, 1}};
  p.margin = 1.0;
  const auto r = contrastive_loss(nn::Matrix::from_rows({{0.0, 0.0, 0.0}, {0.4, 0.0, 0.0}}), p);
  CHECK(r.sum == doctest::Approx(0.36).epsilon(1e-15));
  CHECK(r.mean == doctest::Approx(0.36).epsilon(1e-15));
}

TEST_CASE("contrastive_loss: sum and mean match a direct evaluation") {
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const auto e = random_matrix(20, 5, rng, 0.4);
    const PairSet p = random_pairs(20, rng, 1.0);
    const auto r = contrastive_loss(e, p);
    CHECK(std::abs(r.sum - direct_sum(e, p)) <= 1e-12);
    CHECK(std::abs(r.mean - r.sum / static_cast<double>(p.size())) <= 1e-15);
  }
}

TEST_CASE("contrastive_loss: gradient agrees with central differences") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    auto e = random_matrix(15, 4, rng, 0.3);
    const PairSet p = random_pairs(15, rng, 1.0);
    auto g = contrastive_loss(e, p).gradient;
    const auto report = nn::check_gradients([&] { return contrastive_loss(e, p).mean; }, {e.values()}, {g.values()});
    CHECK(report.passed());
  }
}

TEST_CASE("contrastive_loss: out-of-range indices are rejected") {
  PairSet p;
  p.positives = {{0, 5}};
  CHECK(error_kind([&] { contrastive_loss(nn::Matrix(3, 2), p); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("contrastive_loss: invariant under rotation and translation of the embedding space") {
  Rng rng(6);
  const auto e = random_matrix(25, 3, rng, 0.5);
  const PairSet p = random_pairs(25, rng, 1.0);
  // Rotation about z followed by a shift.
  const double c = std::cos(0.7), s = std::sin(0.7);
  nn::Matrix moved(25, 3);
  for (std::size_t i = 0; i < 25; ++i) {
    moved(i, 0) = c * e(i, 0) - s * e(i, 1) + 4.0;
    moved(i, 1) = s * e(i, 0) + c * e(i, 1) - 2.0;
    moved(i, 2) = e(i, 2) + 0.5;
  }
  CHECK(std::abs(contrastive_loss(e, p).sum - contrastive_loss(moved, p).sum) <= 1e-12);
}

TEST_CASE("contrastive_loss: nonnegative, and doubling the margin never lowers it") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto e = random_matrix(12, 3, rng, 0.5);
    PairSet p = random_pairs(12, rng, 0.3 + rng.uniform());
    const double base = contrastive_loss(e, p).sum;
    CHECK(base >= 0.0);
    p.margin *= 2.0;
    CHECK(contrastive_loss(e, p).sum >= base);
  }
}

TEST_CASE("subsample_labels: keeps ceil(fraction * labeled) labels unchanged") {
  Rng rng(8);
  std::vector<int> labels(333);
  for (auto& l : labels) l = rng.uniform() < 0.1 ? -1 : static_cast<int>(rng.index(5));
  std::size_t labeled = 0;
  for (int l : labels) labeled += l >= 0;
  const auto kept = subsample_labels(labels, 0.05, 9);
  std::size_t count = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (kept[i] < 0) continue;
    ++count;
    CHECK(kept[i] == labels[i]);
  }
  CHECK(count == static_cast<std::size_t>(std::ceil(0.05 * static_cast<double>(labeled))));
  CHECK(subsample_labels(labels, 0.05, 9) == kept);
  CHECK(subsample_labels(labels, 1.0, 9) == labels);
  CHECK(error_kind([&] { subsample_labels(labels, 0.0, 1); }) == ErrorKind::kInvalidArgument);
  CHECK(error_kind([&] { subsample_labels(labels, 1.5, 1); }) == ErrorKind::kInvalidArgument);
}
