#pragma once

// Dense double-precision matrices, small ReLU MLPs with explicit backward
// passes, softmax, Adam, and the finite-difference gradient harness that every
// trainable path in the library is checked against.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "segvec3d/random.hpp"

namespace segvec3d::nn {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool all_finite() const;
  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Throws invalid-data naming `what` if any entry is NaN or infinite.
void validate_finite(const Matrix& m, const char* what);

Matrix concat_cols(std::span<const Matrix* const> blocks);
Matrix add(const Matrix& a, const Matrix& b);
void add_in_place(Matrix& target, const Matrix& addend);
Matrix select_cols(const Matrix& m, std::size_t begin, std::size_t count);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

// y = W x + b, W stored d_out x d_in.
struct Dense {
  Matrix weight;
  std::vector<double> bias;

  std::size_t input_dim() const noexcept { return weight.cols(); }
  std::size_t output_dim() const noexcept { return weight.rows(); }
  bool operator==(const Dense&) const = default;
};

// ReLU between layers, linear output layer.
struct Mlp {
  std::vector<Dense> layers;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t parameter_count() const;
  bool operator==(const Mlp&) const = default;
};

// dims = {d_in, hidden..., d_out}; weights uniform in +-sqrt(6/(d_in+d_out)), zero biases.
Mlp make_mlp(std::span<const std::size_t> dims, Rng& rng);
Mlp make_mlp(std::initializer_list<std::size_t> dims, Rng& rng);
Mlp identity_mlp(std::size_t dim);
Mlp zeros_like(const Mlp& mlp);
void set_zero(Mlp& mlp);

struct MlpCache {
  const Mlp* params = nullptr;
  std::uint64_t fingerprint = 0;
  // inputs[l] is the input of layer l (post-activation of layer l-1).
  std::vector<Matrix> inputs;
};

std::uint64_t fingerprint(const Mlp& mlp);

Matrix mlp_forward(const Mlp& mlp, const Matrix& input, MlpCache* cache = nullptr);

// Accumulates parameter gradients into `grads` and returns dL/dinput.
// Throws invalid-state if the cache was produced by different parameter values.
Matrix mlp_backward(const Mlp& mlp, const MlpCache& cache, const Matrix& upstream, Mlp& grads);

std::vector<double> softmax(std::span<const double> logits);

// Flat views over trainable storage, in a fixed traversal order.
using ParamList = std::vector<std::span<double>>;

void append_params(Mlp& mlp, ParamList& out);
double global_norm(const ParamList& grads);
// Rescales grads so the global norm is at most max_norm; returns the norm before clipping.
double clip_global_norm(const ParamList& grads, double max_norm);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

OptimizerState make_optimizer(const ParamList& params, const AdamConfig& config);
void adam_step(const ParamList& params, const ParamList& grads, OptimizerState& state);

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Gradients with magnitude below this are compared in absolute terms.
  double floor = 1e-5;
  // 0 checks every entry; otherwise a strided subset per span.
  std::size_t max_entries_per_span = 0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  bool passed() const noexcept { return failures == 0; }
};

// Central differences of `objective` against `analytic`, perturbing `params` in place
// (restored afterwards).
GradCheckReport check_gradients(const std::function<double()>& objective, const ParamList& params,
                                const ParamList& analytic, const GradCheckOptions& options = {});

double relative_error(double analytic, double numeric, double floor);

}  // namespace segvec3d::nn
