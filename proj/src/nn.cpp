#include "segvec3d/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include "segvec3d/error.hpp"

namespace segvec3d::nn {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  require(data_.size() == rows_ * cols_, ErrorKind::kInvalidArgument, "matrix value count does not match shape");
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Matrix m(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    require(row.size() == c, ErrorKind::kInvalidArgument, "ragged matrix rows");
    std::copy(row.begin(), row.end(), m.row(i++).begin());
  }
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void validate_finite(const Matrix& m, const char* what) {
  if (!m.all_finite()) fail(ErrorKind::kInvalidData, std::string(what) + " contains non-finite values");
}

Matrix concat_cols(std::span<const Matrix* const> blocks) {
  require(!blocks.empty(), ErrorKind::kInvalidArgument, "concat_cols: no blocks");
  const std::size_t rows = blocks.front()->rows();
  std::size_t cols = 0;
  for (const Matrix* b : blocks) {
    require(b->rows() == rows, ErrorKind::kInvalidArgument, "concat_cols: row count mismatch");
    cols += b->cols();
  }
  Matrix out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double* dst = out.row(r).data();
    for (const Matrix* b : blocks) {
      auto src = b->row(r);
      std::copy(src.begin(), src.end(), dst);
      dst += src.size();
    }
  }
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  add_in_place(out, b);
  return out;
}

void add_in_place(Matrix& target, const Matrix& addend) {
  require(target.rows() == addend.rows() && target.cols() == addend.cols(), ErrorKind::kInvalidArgument,
          "matrix shape mismatch in addition");
  auto t = target.values();
  auto a = addend.values();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] += a[i];
}

Matrix select_cols(const Matrix& m, std::size_t begin, std::size_t count) {
  require(begin + count <= m.cols(), ErrorKind::kInvalidArgument, "select_cols out of range");
  Matrix out(m.rows(), count);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto src = m.row(r);
    std::copy(src.begin() + begin, src.begin() + begin + count, out.row(r).begin());
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

std::size_t Mlp::input_dim() const { return layers.empty() ? 0 : layers.front().input_dim(); }
std::size_t Mlp::output_dim() const { return layers.empty() ? 0 : layers.back().output_dim(); }

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

Mlp make_mlp(std::span<const std::size_t> dims, Rng& rng) {
  require(dims.size() >= 2, ErrorKind::kInvalidArgument, "an MLP needs at least input and output dims");
  Mlp mlp;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::size_t d_in = dims[l];
    const std::size_t d_out = dims[l + 1];
    require(d_in > 0 && d_out > 0, ErrorKind::kInvalidArgument, "MLP dims must be positive");
    const double limit = std::sqrt(6.0 / static_cast<double>(d_in + d_out));
    Dense layer{Matrix(d_out, d_in), std::vector<double>(d_out, 0.0)};
    for (double& w : layer.weight.values()) w = rng.uniform(-limit, limit);
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

Mlp make_mlp(std::initializer_list<std::size_t> dims, Rng& rng) {
  return make_mlp(std::span<const std::size_t>(dims.begin(), dims.size()), rng);
}

Mlp identity_mlp(std::size_t dim) {
  Mlp mlp;
  mlp.layers.push_back(Dense{Matrix::identity(dim), std::vector<double>(dim, 0.0)});
  return mlp;
}

Mlp zeros_like(const Mlp& mlp) {
  Mlp z;
  for (const auto& l : mlp.layers) {
    z.layers.push_back(Dense{Matrix(l.weight.rows(), l.weight.cols()), std::vector<double>(l.bias.size(), 0.0)});
  }
  return z;
}

void set_zero(Mlp& mlp) {
  for (auto& l : mlp.layers) {
    std::fill(l.weight.values().begin(), l.weight.values().end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
}

std::uint64_t fingerprint(const Mlp& mlp) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::span<const double> values) {
    for (double v : values) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      h = (h ^ bits) * 0x100000001b3ULL;
      h ^= h >> 29;
    }
  };
  for (const auto& l : mlp.layers) {
    h = (h ^ l.weight.rows() ^ (l.weight.cols() << 20)) * 0x100000001b3ULL;
    mix(l.weight.values());
    mix(l.bias);
  }
  return h;
}

namespace {

// out[n][o] = b[o] + sum_i W[o][i] x[n][i]
Matrix dense_forward(const Dense& layer, const Matrix& x) {
  const std::size_t d_in = layer.input_dim();
  const std::size_t d_out = layer.output_dim();
  Matrix out(x.rows(), d_out);
  for (std::size_t n = 0; n < x.rows(); ++n) {
    const double* xr = x.row(n).data();
    double* yr = out.row(n).data();
    for (std::size_t o = 0; o < d_out; ++o) {
      const double* wr = layer.weight.row(o).data();
      double s = layer.bias[o];
      for (std::size_t i = 0; i < d_in; ++i) s += wr[i] * xr[i];
      yr[o] = s;
    }
  }
  return out;
}

}  // namespace

Matrix mlp_forward(const Mlp& mlp, const Matrix& input, MlpCache* cache) {
  require(!mlp.layers.empty(), ErrorKind::kInvalidArgument, "empty MLP");
  require(input.cols() == mlp.input_dim(), ErrorKind::kInvalidArgument,
          "MLP input has " + std::to_string(input.cols()) + " columns, expected " + std::to_string(mlp.input_dim()));
  if (cache != nullptr) {
    cache->params = &mlp;
    cache->fingerprint = fingerprint(mlp);
    cache->inputs.clear();
    cache->inputs.reserve(mlp.layers.size());
  }
  Matrix x = input;
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    Matrix y = dense_forward(mlp.layers[l], x);
    if (l + 1 < mlp.layers.size()) {
      for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
    }
    if (cache != nullptr) cache->inputs.push_back(std::move(x));
    x = std::move(y);
  }
  return x;
}

Matrix mlp_backward(const Mlp& mlp, const MlpCache& cache, const Matrix& upstream, Mlp& grads) {
  if (cache.params != &mlp || cache.inputs.size() != mlp.layers.size() || cache.fingerprint != fingerprint(mlp)) {
    fail(ErrorKind::kInvalidState, "MLP cache does not match the current parameters");
  }
  require(grads.layers.size() == mlp.layers.size(), ErrorKind::kInvalidArgument, "gradient MLP shape mismatch");
  const std::size_t batch = cache.inputs.front().rows();
  require(upstream.rows() == batch && upstream.cols() == mlp.output_dim(), ErrorKind::kInvalidArgument,
          "upstream gradient shape mismatch");

  Matrix delta = upstream;
  for (std::size_t l = mlp.layers.size(); l-- > 0;) {
    const Dense& layer = mlp.layers[l];
    Dense& g = grads.layers[l];
    const Matrix& x = cache.inputs[l];
    const std::size_t d_in = layer.input_dim();
    const std::size_t d_out = layer.output_dim();
    Matrix dx(batch, d_in);
    for (std::size_t n = 0; n < batch; ++n) {
      const double* dr = delta.row(n).data();
      const double* xr = x.row(n).data();
      double* dxr = dx.row(n).data();
      for (std::size_t o = 0; o < d_out; ++o) {
        const double d = dr[o];
        if (d == 0.0) continue;
        g.bias[o] += d;
        double* gw = g.weight.row(o).data();
        const double* wr = layer.weight.row(o).data();
        for (std::size_t i = 0; i < d_in; ++i) {
          gw[i] += d * xr[i];
          dxr[i] += d * wr[i];
        }
      }
    }
    if (l > 0) {
      // x is relu(pre-activation); the unit is dead iff x == 0.
      auto xv = x.values();
      auto dv = dx.values();
      for (std::size_t i = 0; i < dv.size(); ++i) {
        if (!(xv[i] > 0.0)) dv[i] = 0.0;
      }
    }
    delta = std::move(dx);
  }
  return delta;
}

std::vector<double> softmax(std::span<const double> logits) {
  require(!logits.empty(), ErrorKind::kInvalidArgument, "softmax of an empty vector");
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

void append_params(Mlp& mlp, ParamList& out) {
  for (auto& l : mlp.layers) {
    out.push_back(l.weight.values());
    out.push_back(l.bias);
  }
}

double global_norm(const ParamList& grads) {
  double s = 0.0;
  for (auto g : grads)
    for (double v : g) s += v * v;
  return std::sqrt(s);
}

double clip_global_norm(const ParamList& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (auto g : grads)
      for (double& v : g) v *= scale;
  }
  return norm;
}

OptimizerState make_optimizer(const ParamList& params, const AdamConfig& config) {
  OptimizerState state;
  state.config = config;
  for (auto p : params) {
    state.first_moment.emplace_back(p.size(), 0.0);
    state.second_moment.emplace_back(p.size(), 0.0);
  }
  return state;
}

void adam_step(const ParamList& params, const ParamList& grads, OptimizerState& state) {
  require(params.size() == grads.size(), ErrorKind::kInvalidArgument, "adam: parameter/gradient count mismatch");
  if (state.first_moment.empty() && !params.empty()) {
    state = make_optimizer(params, state.config);
  }
  require(state.first_moment.size() == params.size(), ErrorKind::kInvalidArgument,
          "adam: optimizer state does not match parameters");
  for (std::size_t s = 0; s < params.size(); ++s) {
    require(params[s].size() == grads[s].size() && state.first_moment[s].size() == params[s].size(),
            ErrorKind::kInvalidArgument, "adam: shape mismatch");
  }
  const auto& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t s = 0; s < params.size(); ++s) {
    auto p = params[s];
    auto g = grads[s];
    auto& m = state.first_moment[s];
    auto& v = state.second_moment[s];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p[i] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

GradCheckReport check_gradients(const std::function<double()>& objective, const ParamList& params,
                                const ParamList& analytic, const GradCheckOptions& options) {
  require(params.size() == analytic.size(), ErrorKind::kInvalidArgument, "gradcheck: span count mismatch");
  GradCheckReport report;
  for (std::size_t s = 0; s < params.size(); ++s) {
    auto p = params[s];
    auto a = analytic[s];
    require(p.size() == a.size(), ErrorKind::kInvalidArgument, "gradcheck: span size mismatch");
    std::size_t stride = 1;
    if (options.max_entries_per_span > 0 && p.size() > options.max_entries_per_span) {
      stride = (p.size() + options.max_entries_per_span - 1) / options.max_entries_per_span;
    }
    for (std::size_t i = 0; i < p.size(); i += stride) {
      const double saved = p[i];
      p[i] = saved + options.step;
      const double plus = objective();
      p[i] = saved - options.step;
      const double minus = objective();
      p[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double err = relative_error(a[i], numeric, options.floor);
      report.checked += 1;
      report.max_rel_error = std::max(report.max_rel_error, err);
      if (!(err < options.tolerance)) report.failures += 1;
    }
  }
  return report;
}

}  // namespace segvec3d::nn
