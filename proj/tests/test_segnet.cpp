#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "segvec3d/segnet.hpp"
#include "test_util.hpp"

using namespace segvec3d;
using namespace segvec3d::segnet;
using testutil::error_kind;
using testutil::max_abs_diff;
using testutil::random_matrix;
using Vec = std::vector<double>;

namespace {

// Independent straight-line evaluation helpers over plain vectors.
Vec run_mlp(const Mlp& mlp, Vec x) {
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const auto& d = mlp.layers[l];
    Vec y(d.bias);
    for (std::size_t o = 0; o < y.size(); ++o)
      for (std::size_t i = 0; i < x.size(); ++i) y[o] += d.weight(o, i) * x[i];
    if (l + 1 < mlp.layers.size())
      for (double& v : y) v = std::max(v, 0.0);
    x = y;
  }
  return x;
}

Vec row_of(const Matrix& m, std::size_t r) { return {m.row(r).begin(), m.row(r).end()}; }

double vdot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Attention weights and aggregation for a single point, written out directly.
Vec attend_point(const std::vector<Vec>& f, const std::vector<std::size_t>& nbrs, std::size_t i,
                 const AttentionLayerParams& p, Vec* alpha_out = nullptr) {
  const Vec q = run_mlp(p.phi, f[i]);
  Vec logits;
  for (std::size_t j : nbrs) logits.push_back(vdot(q, run_mlp(p.psi, f[j])));
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& l : logits) z += (l = std::exp(l - mx));
  for (double& l : logits) l /= z;
  Vec out(p.gamma.output_dim(), 0.0);
  for (std::size_t t = 0; t < nbrs.size(); ++t) {
    const Vec g = run_mlp(p.gamma, f[nbrs[t]]);
    for (std::size_t d = 0; d < out.size(); ++d) out[d] += logits[t] * g[d];
  }
  if (alpha_out) *alpha_out = logits;
  return out;
}

SegNetConfig tiny_config() {
  SegNetConfig c;
  c.k = 3;
  c.num_layers = 2;
  c.width = 6;
  c.attention_dim = 4;
  c.gamma_hidden = 5;
  c.fused_dim = 8;
  c.global_dim = 4;
  c.head_hidden = 6;
  c.embed_dim = 3;
  return c;
}

// Random biases so the oracle exercises every term.
void jitter_biases(SegNetParams& p, Rng& rng) {
  auto touch = [&](Mlp& m) {
    for (auto& l : m.layers)
      for (double& b : l.bias) b = 0.1 * rng.normal();
  };
  touch(p.input_proj);
  for (auto& l : p.layers) {
    touch(l.phi);
    touch(l.psi);
    touch(l.gamma);
  }
  touch(p.fusion_mlp);
  touch(p.global_mlp);
  touch(p.fuse_mlp);
  touch(p.embed_mlp);
}

geometry::PointCloud permute(const geometry::PointCloud& c, const std::vector<std::size_t>& perm) {
  geometry::PointCloud out;
  out.colors.emplace();
  for (std::size_t p : perm) {
    out.positions.push_back(c.positions[p]);
    out.colors->push_back((*c.colors)[p]);
  }
  return out;
}

}  // namespace

TEST_CASE("attention_weights: identical neighbors give uniform weights") {
  Rng rng(1);
  const auto net = init_segnet(tiny_config(), 1);
  const Vec center = row_of(random_matrix(1, 6, rng), 0);
  Matrix nbrs(5, 6);
  const Vec same = row_of(random_matrix(1, 6, rng), 0);
  for (std::size_t r = 0; r < 5; ++r) std::copy(same.begin(), same.end(), nbrs.row(r).begin());
  for (double a : attention_weights(center, nbrs, net.layers[0])) CHECK(a == doctest::Approx(0.2).epsilon(1e-14));
}

TEST_CASE("attention_weights: a single neighbor gets weight one") {
  Rng rng(2);
  const auto net = init_segnet(tiny_config(), 2);
  const auto a = attention_weights(row_of(random_matrix(1, 6, rng), 0), random_matrix(1, 6, rng), net.layers[0]);
  CHECK(a == Vec{1.0});
}

TEST_CASE("attention_weights: random features match a direct dot-product softmax") {
  Rng rng(3);
  auto net = init_segnet(tiny_config(), 3);
  jitter_biases(net, rng);
  const auto& p = net.layers[1];
  for (int trial = 0; trial < 10; ++trial) {
    const Vec c = row_of(random_matrix(1, 6, rng), 0);
    const Matrix n = random_matrix(7, 6, rng);
    const Vec q = run_mlp(p.phi, c);
    Vec expect;
    double z = 0.0;
    for (std::size_t j = 0; j < 7; ++j) z += std::exp(vdot(q, run_mlp(p.psi, row_of(n, j))));
    for (std::size_t j = 0; j < 7; ++j) expect.push_back(std::exp(vdot(q, run_mlp(p.psi, row_of(n, j)))) / z);
    const auto got = attention_weights(c, n, p);
    for (std::size_t j = 0; j < 7; ++j) CHECK(std::abs(got[j] - expect[j]) <= 1e-12);
  }
}

TEST_CASE("attention_weights: dimension mismatch is rejected") {
  const auto net = init_segnet(tiny_config(), 4);
  CHECK(error_kind([&] { attention_weights(Vec(5, 0.0), Matrix(3, 6), net.layers[0]); }) ==
        ErrorKind::kInvalidArgument);
  CHECK(error_kind([&] { attention_weights(Vec(6, 0.0), Matrix(3, 4), net.layers[0]); }) ==
        ErrorKind::kInvalidArgument);
}

TEST_CASE("attention_layer: identity gamma with uniform weights averages the neighbors") {
  Rng rng(5);
  AttentionLayerParams p{nn::identity_mlp(4), nn::identity_mlp(4), nn::identity_mlp(4)};
  nn::set_zero(p.phi);  // zero queries make every logit 0
  const Matrix f = random_matrix(12, 4, rng);
  const auto g = geometry::build_feature_knn(f, 3);
  const Matrix h = attention_layer(f, g, p);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t d = 0; d < 4; ++d) {
      double mean = 0.0;
      for (std::size_t j : g.neighbors_of(i)) mean += f(j, d) / 3.0;
      CHECK(h(i, d) == doctest::Approx(mean).epsilon(1e-14));
    }
}

TEST_CASE("attention_layer: zero features and zero biases give zero output") {
  const auto net = init_segnet(tiny_config(), 6);
  Rng rng(6);
  const Matrix f(10, 6);
  const auto g = geometry::build_feature_knn(random_matrix(10, 3, rng), 3);
  const Matrix h = attention_layer(f, g, net.layers[0]);
  for (double v : h.values()) CHECK(v == 0.0);
}

TEST_CASE("attention_layer: 50 random points match a per-point loop oracle") {
  Rng rng(7);
  auto net = init_segnet(tiny_config(), 7);
  jitter_biases(net, rng);
  const Matrix f = random_matrix(50, 6, rng);
  const auto g = geometry::build_feature_knn(random_matrix(50, 3, rng), 5);
  AttentionCache cache;
  const Matrix h = attention_layer(f, g, net.layers[0], &cache);
  std::vector<Vec> rows;
  for (std::size_t i = 0; i < 50; ++i) rows.push_back(row_of(f, i));
  for (std::size_t i = 0; i < 50; ++i) {
    const auto nb = g.neighbors_of(i);
    Vec alpha;
    const Vec expect = attend_point(rows, {nb.begin(), nb.end()}, i, net.layers[0], &alpha);
    for (std::size_t d = 0; d < expect.size(); ++d) CHECK(std::abs(h(i, d) - expect[d]) <= 1e-12);
    double sum = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      CHECK(std::abs(cache.weights(i, j) - alpha[j]) <= 1e-12);
      sum += cache.weights(i, j);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("attention_layer: graph and feature sizes must agree") {
  Rng rng(8);
  const auto net = init_segnet(tiny_config(), 8);
  const auto g = geometry::build_feature_knn(random_matrix(10, 3, rng), 3);
  CHECK(error_kind([&] { attention_layer(Matrix(9, 6), g, net.layers[0]); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("residual_combine: pass-through, cancellation and elementwise sum") {
  Rng rng(9);
  const Matrix a = random_matrix(4, 5, rng);
  const Matrix b = random_matrix(4, 5, rng);
  CHECK(residual_combine(Matrix(4, 5), a) == a);
  Matrix neg = a;
  for (double& v : neg.values()) v = -v;
  const Matrix cancelled = residual_combine(neg, a);
  for (double v : cancelled.values()) CHECK(v == 0.0);
  const Matrix s = residual_combine(a, b);
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(s.values()[i] == a.values()[i] + b.values()[i]);
  CHECK(error_kind([&] { residual_combine(a, Matrix(4, 4)); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("multiscale_fuse: single scale with identity fusion returns its input") {
  Rng rng(10);
  const std::vector<Matrix> layers{random_matrix(6, 4, rng)};
  CHECK(multiscale_fuse(layers, nn::identity_mlp(4)) == layers[0]);
}

TEST_CASE("multiscale_fuse: zero inputs and zero biases give zero output") {
  Rng rng(11);
  const auto net = init_segnet(tiny_config(), 11);
  const std::vector<Matrix> layers{Matrix(5, 6), Matrix(5, 6)};
  const Matrix h = multiscale_fuse(layers, net.fusion_mlp);
  for (double v : h.values()) CHECK(v == 0.0);
}

TEST_CASE("multiscale_fuse: matches concatenate-then-forward with three scales") {
  Rng rng(12);
  Mlp fusion = nn::make_mlp({12, 7, 5}, rng);
  for (auto& l : fusion.layers)
    for (double& b : l.bias) b = rng.normal();
  const std::vector<Matrix> layers{random_matrix(8, 4, rng), random_matrix(8, 4, rng), random_matrix(8, 4, rng)};
  const Matrix got = multiscale_fuse(layers, fusion);
  for (std::size_t i = 0; i < 8; ++i) {
    Vec cat;
    for (const auto& m : layers) cat.insert(cat.end(), m.row(i).begin(), m.row(i).end());
    const Vec expect = run_mlp(fusion, cat);
    for (std::size_t d = 0; d < 5; ++d) CHECK(std::abs(got(i, d) - expect[d]) <= 1e-12);
  }
  CHECK(error_kind([&] { multiscale_fuse(std::vector<Matrix>{}, fusion); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("global_context: one point, permutations, and a column-max scan") {
  Rng rng(13);
  auto net = init_segnet(tiny_config(), 13);
  jitter_biases(net, rng);
  const Matrix one = random_matrix(1, 8, rng);
  CHECK(global_context(one, net.global_mlp) == run_mlp(net.global_mlp, row_of(one, 0)));

  const Matrix h = random_matrix(40, 8, rng);
  Vec colmax(8, -1e300);
  for (std::size_t r = 0; r < 40; ++r)
    for (std::size_t c = 0; c < 8; ++c) colmax[c] = std::max(colmax[c], h(r, c));
  const Vec z = global_context(h, net.global_mlp);
  CHECK(z == run_mlp(net.global_mlp, colmax));

  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::size_t> perm(40);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = 39; i > 0; --i) std::swap(perm[i], perm[rng.index(i + 1)]);
    Matrix p(40, 8);
    for (std::size_t r = 0; r < 40; ++r) std::copy(h.row(perm[r]).begin(), h.row(perm[r]).end(), p.row(r).begin());
    CHECK(global_context(p, net.global_mlp) == z);
  }
}

TEST_CASE("global_fuse: zero fuse MLP is the identity, and matches the direct formula") {
  Rng rng(14);
  auto net = init_segnet(tiny_config(), 14);
  const Matrix h = random_matrix(6, 8, rng);
  const Vec z = row_of(random_matrix(1, 4, rng), 0);
  Mlp zero = net.fuse_mlp;
  nn::set_zero(zero);
  CHECK(global_fuse(h, z, zero) == h);

  jitter_biases(net, rng);
  Matrix twin = h;
  std::copy(h.row(0).begin(), h.row(0).end(), twin.row(3).begin());
  const Matrix f = global_fuse(twin, z, net.fuse_mlp);
  for (std::size_t i = 0; i < 6; ++i) {
    Vec joined = row_of(twin, i);
    joined.insert(joined.end(), z.begin(), z.end());
    const Vec delta = run_mlp(net.fuse_mlp, joined);
    for (std::size_t d = 0; d < 8; ++d) CHECK(std::abs(f(i, d) - (twin(i, d) + delta[d])) <= 1e-12);
  }
  CHECK(row_of(f, 0) == row_of(f, 3));
  CHECK(error_kind([&] { global_fuse(h, Vec(3, 0.0), net.fuse_mlp); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("embed_points: identity head, duplicated rows, and plain forward agreement") {
  Rng rng(15);
  const Matrix f = random_matrix(5, 8, rng);
  CHECK(embed_points(f, nn::identity_mlp(8)) == f);
  const auto net = init_segnet(tiny_config(), 15);
  Matrix dup = f;
  std::copy(f.row(1).begin(), f.row(1).end(), dup.row(4).begin());
  const Matrix e = embed_points(dup, net.embed_mlp);
  CHECK(row_of(e, 1) == row_of(e, 4));
  CHECK(e == nn::mlp_forward(net.embed_mlp, dup));
  CHECK(error_kind([&] { embed_points(Matrix(5, 7), net.embed_mlp); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("forward_full: cube corners match an independent end-to-end script") {
  SegNetConfig cfg = tiny_config();
  cfg.num_layers = 1;
  Rng rng(16);
  auto net = init_segnet(cfg, 16);
  jitter_biases(net, rng);

  geometry::PointCloud cube;
  cube.colors.emplace();
  for (int i = 0; i < 8; ++i) {
    cube.positions.push_back({double(i & 1), double((i >> 1) & 1), double((i >> 2) & 1)});
    cube.colors->push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  }
  const auto out = forward_full(cube, net);

  // Each corner's 3 nearest are the corners differing in exactly one bit.
  std::vector<std::vector<std::size_t>> nbrs(8);
  for (std::size_t i = 0; i < 8; ++i) nbrs[i] = {i ^ 1u, i ^ 2u, i ^ 4u};
  for (auto& n : nbrs) std::sort(n.begin(), n.end());

  std::vector<Vec> f0(8), f1(8), h1(8), hf(8);
  for (std::size_t i = 0; i < 8; ++i) {
    Vec c(3, 0.0);
    for (std::size_t j : nbrs[i])
      for (int d = 0; d < 3; ++d) c[d] += cube.positions[j][d] / 3.0;
    Vec in{cube.positions[i][0] - c[0], cube.positions[i][1] - c[1], cube.positions[i][2] - c[2],
           cube.positions[i][2]};
    for (int d = 0; d < 3; ++d) in.push_back((*cube.colors)[i][d]);
    f0[i] = run_mlp(net.input_proj, in);
  }
  for (std::size_t i = 0; i < 8; ++i) h1[i] = attend_point(f0, nbrs[i], i, net.layers[0]);
  for (std::size_t i = 0; i < 8; ++i) hf[i] = run_mlp(net.fusion_mlp, h1[i]);
  Vec pooled(cfg.fused_dim, -1e300);
  for (const auto& r : hf)
    for (std::size_t d = 0; d < r.size(); ++d) pooled[d] = std::max(pooled[d], r[d]);
  const Vec z = run_mlp(net.global_mlp, pooled);
  for (std::size_t i = 0; i < 8; ++i) {
    Vec joined = hf[i];
    joined.insert(joined.end(), z.begin(), z.end());
    const Vec delta = run_mlp(net.fuse_mlp, joined);
    Vec F = hf[i];
    for (std::size_t d = 0; d < F.size(); ++d) F[d] += delta[d];
    const Vec e = run_mlp(net.embed_mlp, F);
    for (std::size_t d = 0; d < F.size(); ++d) CHECK(std::abs(out.features.features(i, d) - F[d]) <= 1e-12);
    for (std::size_t d = 0; d < e.size(); ++d) CHECK(std::abs(out.embeddings(i, d) - e[d]) <= 1e-12);
  }
  for (std::size_t d = 0; d < z.size(); ++d) CHECK(std::abs(out.features.global[d] - z[d]) <= 1e-12);
}

TEST_CASE("forward_full: rigid translation leaves embeddings unchanged") {
  Rng rng(17);
  const auto cloud = testutil::random_cloud(60, rng);
  auto moved = cloud;
  for (auto& p : moved.positions) {
    p[0] += 3.25;
    p[1] -= 1.5;
    p[2] += 0.75;
  }
  const auto net = init_segnet(tiny_config(), 17);
  CHECK(max_abs_diff(forward_full(cloud, net).embeddings, forward_full(moved, net).embeddings) <= 1e-9);
}

TEST_CASE("forward_full: permuting the cloud permutes the embeddings") {
  for (bool recompute : {false, true}) {
    Rng rng(18);
    const auto cloud = testutil::random_cloud(80, rng);
    SegNetConfig cfg = tiny_config();
    cfg.recompute_neighbors = recompute;
    const auto net = init_segnet(cfg, 18);
    std::vector<std::size_t> perm(80);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = 79; i > 0; --i) std::swap(perm[i], perm[rng.index(i + 1)]);
    const auto a = forward_full(cloud, net).embeddings;
    const auto b = forward_full(permute(cloud, perm), net).embeddings;
    double worst = 0.0;
    for (std::size_t p = 0; p < 80; ++p)
      for (std::size_t d = 0; d < a.cols(); ++d) worst = std::max(worst, std::abs(b(p, d) - a(perm[p], d)));
    CHECK(worst <= 1e-9);
  }
}

TEST_CASE("forward_full: attention rows sum to one at every layer") {
  Rng rng(19);
  const auto cloud = testutil::random_cloud(100, rng);
  SegNetConfig cfg;
  cfg.recompute_neighbors = true;
  const auto net = init_segnet(cfg, 19);
  ForwardCache cache;
  forward_full(cloud, net, &cache);
  REQUIRE(cache.attention.size() == cfg.num_layers);
  for (const auto& a : cache.attention)
    for (std::size_t i = 0; i < a.weights.rows(); ++i) {
      double s = 0.0;
      for (double w : a.weights.row(i)) s += w;
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("forward_full: clouds with N <= k are rejected") {
  Rng rng(20);
  const auto net = init_segnet(tiny_config(), 20);
  CHECK(error_kind([&] { forward_full(testutil::random_cloud(3, rng), net); }) == ErrorKind::kInvalidArgument);
  CHECK_FALSE(error_kind([&] { forward_full(testutil::random_cloud(4, rng), net); }).has_value());
}

TEST_CASE("forward_full: colorless clouds need use_color = false") {
  Rng rng(21);
  const auto cloud = testutil::random_cloud(20, rng, false);
  CHECK(error_kind([&] { forward_full(cloud, init_segnet(tiny_config(), 21)); }) == ErrorKind::kInvalidArgument);
  SegNetConfig cfg = tiny_config();
  cfg.use_color = false;
  CHECK(forward_full(cloud, init_segnet(cfg, 21)).embeddings.rows() == 20);
}

TEST_CASE("identical point features everywhere give identical outputs") {
  Rng rng(22);
  auto net = init_segnet(tiny_config(), 22);
  jitter_biases(net, rng);
  const Vec row = row_of(random_matrix(1, 6, rng), 0);
  Matrix f(15, 6);
  for (std::size_t r = 0; r < 15; ++r) std::copy(row.begin(), row.end(), f.row(r).begin());
  const auto g = geometry::build_feature_knn(random_matrix(15, 3, rng), 3);
  const Matrix h1 = attention_layer(f, g, net.layers[0]);
  const Matrix h2 = attention_layer(residual_combine(h1, f), g, net.layers[1]);
  const std::vector<Matrix> layers{h1, h2};
  const Matrix H = multiscale_fuse(layers, net.fusion_mlp);
  const Matrix F = global_fuse(H, global_context(H, net.global_mlp), net.fuse_mlp);
  const Matrix e = embed_points(F, net.embed_mlp);
  for (std::size_t r = 1; r < 15; ++r) {
    CHECK(row_of(e, r) == row_of(e, 0));
    CHECK(row_of(F, r) == row_of(F, 0));
  }
}

TEST_CASE("init_segnet: deterministic, and inconsistent configs are rejected") {
  CHECK(init_segnet(tiny_config(), 5) == init_segnet(tiny_config(), 5));
  CHECK_FALSE(init_segnet(tiny_config(), 5) == init_segnet(tiny_config(), 6));
  SegNetConfig bad = tiny_config();
  bad.num_layers = 0;
  CHECK(error_kind([&] { init_segnet(bad, 1); }) == ErrorKind::kInvalidArgument);
  auto net = init_segnet(tiny_config(), 5);
  net.fuse_mlp = nn::identity_mlp(3);
  CHECK(error_kind([&] { net.validate(); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("backward_full: a cache from other parameters is rejected") {
  Rng rng(23);
  const auto cloud = testutil::random_cloud(20, rng);
  auto net = init_segnet(tiny_config(), 23);
  ForwardCache cache;
  const auto out = forward_full(cloud, net, &cache);
  net.embed_mlp.layers[0].bias[0] += 1.0;
  CHECK(error_kind([&] { backward_full(net, cache, out.embeddings); }) == ErrorKind::kInvalidState);
}
