#include <cmath>
#include <limits>

#include "doctest.h"
#include "segvec3d/nn.hpp"
#include "test_util.hpp"

using namespace segvec3d;
using namespace segvec3d::nn;
using testutil::error_kind;
using testutil::random_matrix;

namespace {

// Straight-line re-implementation of a ReLU MLP, written independently of mlp_forward.
Matrix naive_mlp(const Mlp& mlp, const Matrix& x) {
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < x.rows(); ++r) rows.emplace_back(x.row(r).begin(), x.row(r).end());
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const Dense& d = mlp.layers[l];
    for (auto& v : rows) {
      std::vector<double> y(d.weight.rows());
      for (std::size_t o = 0; o < y.size(); ++o) {
        double acc = d.bias[o];
        for (std::size_t i = 0; i < v.size(); ++i) acc += d.weight(o, i) * v[i];
        y[o] = (l + 1 < mlp.layers.size() && acc < 0.0) ? 0.0 : acc;
      }
      v = y;
    }
  }
  Matrix out(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) out(r, c) = rows[r][c];
  return out;
}

}  // namespace

TEST_CASE("mlp_forward: identity layer returns the input") {
  Rng rng(1);
  const Matrix x = random_matrix(4, 3, rng);
  CHECK(mlp_forward(identity_mlp(3), x) == x);
}

TEST_CASE("mlp_forward: all-zero weights and biases give zero output") {
  Rng rng(2);
  Mlp mlp = make_mlp({3, 5, 2}, rng);
  set_zero(mlp);
  const Matrix y = mlp_forward(mlp, random_matrix(4, 3, rng));
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("mlp_forward: random two-layer net matches a straight-line oracle") {
  Rng rng(3);
  Mlp mlp = make_mlp({6, 9, 4}, rng);
  for (auto& l : mlp.layers)
    for (double& b : l.bias) b = rng.normal();
  const Matrix x = random_matrix(7, 6, rng);
  CHECK(testutil::max_abs_diff(mlp_forward(mlp, x), naive_mlp(mlp, x)) <= 1e-12);
}

TEST_CASE("mlp_forward: input width mismatch is rejected") {
  Rng rng(4);
  const Mlp mlp = make_mlp({3, 2}, rng);
  CHECK(error_kind([&] { mlp_forward(mlp, Matrix(2, 4)); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("make_mlp: weights within the fan-based bound, zero biases") {
  Rng rng(5);
  const Mlp mlp = make_mlp({10, 6}, rng);
  const double bound = std::sqrt(6.0 / 16.0);
  for (double w : mlp.layers[0].weight.values()) CHECK(std::abs(w) <= bound);
  for (double b : mlp.layers[0].bias) CHECK(b == 0.0);
}

TEST_CASE("mlp_backward: linear layer, scalar output, unit upstream gives dW = input") {
  Mlp mlp;
  mlp.layers.push_back({Matrix::from_rows({{0.5, -1.0, 2.0}}), {0.25}});
  const Matrix x = Matrix::from_rows({{3.0, -2.0, 7.0}});
  MlpCache cache;
  mlp_forward(mlp, x, &cache);
  Mlp grads = zeros_like(mlp);
  const Matrix dx = mlp_backward(mlp, cache, Matrix::from_rows({{1.0}}), grads);
  CHECK(grads.layers[0].weight == x);
  CHECK(grads.layers[0].bias[0] == 1.0);
  CHECK(dx == mlp.layers[0].weight);
}

TEST_CASE("mlp_backward: a unit with negative pre-activation passes no gradient") {
  Mlp mlp;
  // Hidden unit 0 sees +x, unit 1 sees -x; with x > 0 unit 1 is dead.
  mlp.layers.push_back({Matrix::from_rows({{1.0}, {-1.0}}), {0.0, 0.0}});
  mlp.layers.push_back({Matrix::from_rows({{2.0, 3.0}}), {0.0}});
  MlpCache cache;
  mlp_forward(mlp, Matrix::from_rows({{1.5}}), &cache);
  Mlp grads = zeros_like(mlp);
  const Matrix dx = mlp_backward(mlp, cache, Matrix::from_rows({{1.0}}), grads);
  CHECK(grads.layers[0].weight(1, 0) == 0.0);
  CHECK(grads.layers[0].bias[1] == 0.0);
  CHECK(grads.layers[1].weight(0, 1) == 0.0);
  CHECK(dx(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("mlp_backward: random nets agree with central differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    Mlp mlp = make_mlp({4, 7, 5, 3}, rng);
    for (auto& l : mlp.layers)
      for (double& b : l.bias) b = 0.1 * rng.normal();
    Matrix x = random_matrix(6, 4, rng);
    const Matrix r = random_matrix(6, 3, rng);
    MlpCache cache;
    mlp_forward(mlp, x, &cache);
    Mlp grads = zeros_like(mlp);
    Matrix dx = mlp_backward(mlp, cache, r, grads);
    ParamList params{x.values()};
    ParamList analytic{dx.values()};
    append_params(mlp, params);
    append_params(grads, analytic);
    const auto report =
        check_gradients([&] { return dot(mlp_forward(mlp, x).values(), r.values()); }, params, analytic);
    CHECK(report.passed());
    CHECK(report.checked == x.size() + mlp.parameter_count());
  }
}

TEST_CASE("mlp_backward: a cache from different parameters is rejected") {
  Rng rng(6);
  Mlp mlp = make_mlp({3, 4, 2}, rng);
  MlpCache cache;
  mlp_forward(mlp, random_matrix(2, 3, rng), &cache);
  mlp.layers[0].weight(0, 0) += 1.0;
  Mlp grads = zeros_like(mlp);
  CHECK(error_kind([&] { mlp_backward(mlp, cache, Matrix(2, 2, 1.0), grads); }) == ErrorKind::kInvalidState);

  Mlp other = make_mlp({3, 4, 2}, rng);
  MlpCache fresh;
  mlp_forward(mlp, random_matrix(2, 3, rng), &fresh);
  CHECK(error_kind([&] { mlp_backward(other, fresh, Matrix(2, 2, 1.0), grads); }) == ErrorKind::kInvalidState);
}

TEST_CASE("check_gradients: a wrong analytic gradient is reported") {
  std::vector<double> x{1.0, 2.0};
  std::vector<double> wrong{2.0, 5.0};  // true gradient of x0^2 + x1^2 is {2, 4}
  const auto report = check_gradients([&] { return x[0] * x[0] + x[1] * x[1]; }, {x}, {wrong});
  CHECK(report.failures == 1);
  CHECK_FALSE(report.passed());
}

TEST_CASE("softmax: uniform, stable and exact cases") {
  const auto u = softmax(std::vector<double>{0.0, 0.0, 0.0});
  for (double v : u) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const auto big = softmax(std::vector<double>{1000.0, 0.0});
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] >= 0.0);
  CHECK(big[1] < 1e-300);

  const auto e = softmax(std::vector<double>{std::log(1.0), std::log(2.0), std::log(3.0)});
  CHECK(std::abs(e[0] - 1.0 / 6.0) < 1e-15);
  CHECK(std::abs(e[1] - 2.0 / 6.0) < 1e-15);
  CHECK(std::abs(e[2] - 3.0 / 6.0) < 1e-15);
}

TEST_CASE("softmax: empty input is rejected") {
  CHECK(error_kind([] { softmax(std::vector<double>{}); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("softmax: probability vector and shift invariance on random logits") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> logits(1 + rng.index(12));
    for (double& v : logits) v = 10.0 * rng.normal();
    const double shift = 50.0 * rng.normal();
    std::vector<double> shifted = logits;
    for (double& v : shifted) v += shift;
    const auto p = softmax(logits);
    const auto q = softmax(shifted);
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(p[i] >= 0.0);
      CHECK(std::abs(p[i] - q[i]) <= 1e-12);
      sum += p[i];
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("adam_step: zero gradient leaves parameters unchanged and counts the step") {
  std::vector<double> p{1.0, -2.0, 3.0};
  std::vector<double> g(3, 0.0);
  OptimizerState state = make_optimizer({p}, AdamConfig{});
  adam_step({p}, {g}, state);
  CHECK(p == std::vector<double>{1.0, -2.0, 3.0});
  CHECK(state.step == 1);
}

TEST_CASE("adam_step: first step moves each parameter by the learning rate against the gradient sign") {
  std::vector<double> p{0.0, 0.0};
  std::vector<double> g{0.3, -7.0};
  AdamConfig config;
  config.learning_rate = 0.01;
  OptimizerState state = make_optimizer({p}, config);
  adam_step({p}, {g}, state);
  CHECK(p[0] == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("adam_step: 100 steps on x^2 from x = 1 end below 0.5") {
  std::vector<double> x{1.0};
  std::vector<double> g{0.0};
  AdamConfig config;
  config.learning_rate = 0.1;
  OptimizerState state = make_optimizer({x}, config);
  for (int i = 0; i < 100; ++i) {
    g[0] = 2.0 * x[0];
    adam_step({x}, {g}, state);
  }
  CHECK(std::abs(x[0]) < 0.5);
}

TEST_CASE("adam_step: mismatched shapes are rejected") {
  std::vector<double> p{1.0, 2.0};
  std::vector<double> g{1.0};
  OptimizerState state = make_optimizer({p}, AdamConfig{});
  CHECK(error_kind([&] { adam_step({p}, {g}, state); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("clip_global_norm: rescales only above the threshold") {
  std::vector<double> a{3.0, 4.0};
  CHECK(clip_global_norm({a}, 10.0) == doctest::Approx(5.0));
  CHECK(a == std::vector<double>{3.0, 4.0});
  CHECK(clip_global_norm({a}, 1.0) == doctest::Approx(5.0));
  CHECK(a[0] == doctest::Approx(0.6));
  CHECK(a[1] == doctest::Approx(0.8));
}

TEST_CASE("validate_finite: NaN and infinity are invalid data") {
  Matrix m(2, 2, 1.0);
  CHECK_FALSE(error_kind([&] { validate_finite(m, "m"); }).has_value());
  m(1, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK(error_kind([&] { validate_finite(m, "m"); }) == ErrorKind::kInvalidData);
  m(1, 0) = std::numeric_limits<double>::infinity();
  CHECK_FALSE(m.all_finite());
}
