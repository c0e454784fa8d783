#include "segvec3d/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>

#include "segvec3d/error.hpp"
#include "segvec3d/random.hpp"

namespace segvec3d::losses {

namespace {

// Above this many candidates the pairs are drawn by rejection instead of enumeration.
constexpr std::size_t kEnumerationLimit = 1u << 21;

std::vector<IndexPair> choose(std::vector<IndexPair> all, std::size_t budget, Rng& rng) {
  if (all.size() > budget) {
    for (std::size_t i = 0; i < budget; ++i) {
      const std::size_t j = i + rng.index(all.size() - i);
      std::swap(all[i], all[j]);
    }
    all.resize(budget);
  }
  std::sort(all.begin(), all.end());
  return all;
}

IndexPair ordered(std::size_t a, std::size_t b) { return a < b ? IndexPair{a, b} : IndexPair{b, a}; }

}  // namespace

PairSet sample_pairs(std::span<const int> weak_groups, std::size_t budget, std::uint64_t seed, double margin) {
  require(budget > 0, ErrorKind::kInvalidArgument, "pair budget must be positive");
  require(margin > 0.0, ErrorKind::kInvalidArgument, "margin must be positive");

  std::map<int, std::vector<std::size_t>> groups;
  std::vector<std::size_t> labeled;
  for (std::size_t i = 0; i < weak_groups.size(); ++i) {
    if (weak_groups[i] >= 0) {
      groups[weak_groups[i]].push_back(i);
      labeled.push_back(i);
    }
  }
  std::size_t positive_total = 0;
  for (const auto& [label, members] : groups) positive_total += members.size() * (members.size() - 1) / 2;
  const std::size_t all_total = labeled.size() * (labeled.size() - (labeled.empty() ? 0 : 1)) / 2;
  const std::size_t negative_total = all_total - positive_total;
  if (positive_total == 0) fail(ErrorKind::kDegenerateSupervision, "no labeled group has two members");
  if (negative_total == 0) fail(ErrorKind::kDegenerateSupervision, "fewer than two distinct labels present");

  Rng rng(seed);
  PairSet out;
  out.margin = margin;

  if (positive_total <= kEnumerationLimit) {
    std::vector<IndexPair> all;
    all.reserve(positive_total);
    for (const auto& [label, members] : groups)
      for (std::size_t a = 0; a < members.size(); ++a)
        for (std::size_t b = a + 1; b < members.size(); ++b) all.emplace_back(members[a], members[b]);
    out.positives = choose(std::move(all), budget, rng);
  } else {
    // Group chosen proportionally to its pair count, then a uniform pair inside it.
    std::vector<const std::vector<std::size_t>*> members;
    std::vector<std::size_t> cumulative;
    std::size_t acc = 0;
    for (const auto& [label, m] : groups) {
      acc += m.size() * (m.size() - 1) / 2;
      members.push_back(&m);
      cumulative.push_back(acc);
    }
    std::set<IndexPair> picked;
    while (picked.size() < budget) {
      const std::size_t r = rng.index(acc);
      const std::size_t g = static_cast<std::size_t>(
          std::upper_bound(cumulative.begin(), cumulative.end(), r) - cumulative.begin());
      const auto& m = *members[g];
      const std::size_t a = rng.index(m.size());
      std::size_t b = rng.index(m.size() - 1);
      if (b >= a) ++b;
      picked.insert(ordered(m[a], m[b]));
    }
    out.positives.assign(picked.begin(), picked.end());
  }

  if (negative_total <= kEnumerationLimit) {
    std::vector<IndexPair> all;
    all.reserve(negative_total);
    for (std::size_t a = 0; a < labeled.size(); ++a)
      for (std::size_t b = a + 1; b < labeled.size(); ++b)
        if (weak_groups[labeled[a]] != weak_groups[labeled[b]]) all.emplace_back(labeled[a], labeled[b]);
    out.negatives = choose(std::move(all), budget, rng);
  } else {
    std::set<IndexPair> picked;
    while (picked.size() < budget) {
      const std::size_t a = labeled[rng.index(labeled.size())];
      const std::size_t b = labeled[rng.index(labeled.size())];
      if (weak_groups[a] == weak_groups[b]) continue;
      picked.insert(ordered(a, b));
    }
    out.negatives.assign(picked.begin(), picked.end());
  }
  return out;
}

ContrastiveResult contrastive_loss(const nn::Matrix& embeddings, const PairSet& pairs) {
  const std::size_t n = embeddings.rows();
  const std::size_t d = embeddings.cols();
  auto valid = [n](const IndexPair& p) { return p.first < n && p.second < n && p.first != p.second; };
  for (const auto& p : pairs.positives) require(valid(p), ErrorKind::kInvalidArgument, "invalid positive pair");
  for (const auto& p : pairs.negatives) require(valid(p), ErrorKind::kInvalidArgument, "invalid negative pair");

  ContrastiveResult result;
  result.gradient = nn::Matrix(n, d);
  const double scale = pairs.size() == 0 ? 0.0 : 1.0 / static_cast<double>(pairs.size());
  std::vector<double> diff(d);

  for (const auto& [i, j] : pairs.positives) {
    const auto ei = embeddings.row(i);
    const auto ej = embeddings.row(j);
    double dist2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      diff[c] = ei[c] - ej[c];
      dist2 += diff[c] * diff[c];
    }
    result.sum += dist2;
    auto gi = result.gradient.row(i);
    auto gj = result.gradient.row(j);
    for (std::size_t c = 0; c < d; ++c) {
      gi[c] += 2.0 * diff[c] * scale;
      gj[c] -= 2.0 * diff[c] * scale;
    }
  }

  for (const auto& [i, j] : pairs.negatives) {
    const auto ei = embeddings.row(i);
    const auto ej = embeddings.row(j);
    double dist2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      diff[c] = ei[c] - ej[c];
      dist2 += diff[c] * diff[c];
    }
    const double dist = std::sqrt(dist2);
    const double gap = pairs.margin - dist;
    if (gap <= 0.0) continue;
    result.sum += gap * gap;
    // Coincident points: direction undefined, subgradient taken as zero.
    if (dist == 0.0) continue;
    const double coeff = -2.0 * gap / dist * scale;
    auto gi = result.gradient.row(i);
    auto gj = result.gradient.row(j);
    for (std::size_t c = 0; c < d; ++c) {
      gi[c] += coeff * diff[c];
      gj[c] -= coeff * diff[c];
    }
  }
  result.mean = result.sum * scale;
  return result;
}

std::vector<int> subsample_labels(std::span<const int> labels, double fraction, std::uint64_t seed) {
  require(fraction > 0.0 && fraction <= 1.0, ErrorKind::kInvalidArgument, "label fraction must be in (0, 1]");
  std::vector<std::size_t> labeled;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= 0) labeled.push_back(i);
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(labeled.size())));
  Rng rng(seed);
  for (std::size_t i = 0; i < keep && i < labeled.size(); ++i) {
    std::swap(labeled[i], labeled[i + rng.index(labeled.size() - i)]);
  }
  std::vector<int> out(labels.size(), -1);
  for (std::size_t i = 0; i < keep && i < labeled.size(); ++i) out[labeled[i]] = labels[labeled[i]];
  return out;
}

}  // namespace segvec3d::losses
