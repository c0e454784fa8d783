#include "segvec3d/segnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "segvec3d/error.hpp"

namespace segvec3d::segnet {

namespace {

void check(bool condition, const std::string& message) { require(condition, ErrorKind::kInvalidArgument, message); }

std::vector<std::size_t> head_dims(std::size_t in, std::size_t hidden, std::size_t out) {
  if (hidden == 0) return {in, out};
  return {in, hidden, out};
}

}  // namespace

void SegNetConfig::validate() const {
  check(k >= 1, "k must be positive");
  check(num_layers >= 1, "at least one attention layer is required");
  check(width >= 1 && attention_dim >= 1 && fused_dim >= 1 && global_dim >= 1 && embed_dim >= 1,
        "network dimensions must be positive");
}

void SegNetParams::validate() const {
  config.validate();
  const std::size_t d = config.width;
  check(input_proj.input_dim() == config.input_dim() && input_proj.output_dim() == d,
        "input projection must map input_dim -> width");
  check(layers.size() == config.num_layers, "layer count does not match config");
  for (const auto& layer : layers) {
    check(layer.phi.input_dim() == d && layer.psi.input_dim() == d, "phi/psi must consume the layer width");
    check(layer.phi.output_dim() == layer.psi.output_dim(), "phi and psi must share an output dimension");
    // Equal widths make the residual an identity projection.
    check(layer.gamma.input_dim() == d && layer.gamma.output_dim() == d, "gamma must map width -> width");
  }
  check(fusion_mlp.input_dim() == config.num_layers * d && fusion_mlp.output_dim() == config.fused_dim,
        "fusion MLP dims");
  check(global_mlp.input_dim() == config.fused_dim && global_mlp.output_dim() == config.global_dim,
        "global MLP dims");
  check(fuse_mlp.input_dim() == config.fused_dim + config.global_dim && fuse_mlp.output_dim() == config.fused_dim,
        "fuse MLP dims");
  check(embed_mlp.input_dim() == config.fused_dim && embed_mlp.output_dim() == config.embed_dim, "embed MLP dims");
}

nn::ParamList SegNetParams::parameters() {
  nn::ParamList out;
  nn::append_params(input_proj, out);
  for (auto& layer : layers) {
    nn::append_params(layer.phi, out);
    nn::append_params(layer.psi, out);
    nn::append_params(layer.gamma, out);
  }
  nn::append_params(fusion_mlp, out);
  nn::append_params(global_mlp, out);
  nn::append_params(fuse_mlp, out);
  nn::append_params(embed_mlp, out);
  return out;
}

std::size_t SegNetParams::parameter_count() const {
  std::size_t n = input_proj.parameter_count();
  for (const auto& l : layers) n += l.phi.parameter_count() + l.psi.parameter_count() + l.gamma.parameter_count();
  return n + fusion_mlp.parameter_count() + global_mlp.parameter_count() + fuse_mlp.parameter_count() +
         embed_mlp.parameter_count();
}

SegNetParams init_segnet(const SegNetConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  SegNetParams p;
  p.config = config;
  const std::size_t d = config.width;
  p.input_proj = nn::make_mlp({config.input_dim(), d}, rng);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    AttentionLayerParams layer;
    layer.phi = nn::make_mlp({d, config.attention_dim}, rng);
    layer.psi = nn::make_mlp({d, config.attention_dim}, rng);
    layer.gamma = nn::make_mlp(head_dims(d, config.gamma_hidden, d), rng);
    p.layers.push_back(std::move(layer));
  }
  p.fusion_mlp = nn::make_mlp(head_dims(config.num_layers * d, config.head_hidden, config.fused_dim), rng);
  p.global_mlp = nn::make_mlp(head_dims(config.fused_dim, config.head_hidden, config.global_dim), rng);
  p.fuse_mlp =
      nn::make_mlp(head_dims(config.fused_dim + config.global_dim, config.head_hidden, config.fused_dim), rng);
  p.embed_mlp = nn::make_mlp(head_dims(config.fused_dim, config.head_hidden, config.embed_dim), rng);
  return p;
}

SegNetParams zeros_like(const SegNetParams& params) {
  SegNetParams z;
  z.config = params.config;
  z.input_proj = nn::zeros_like(params.input_proj);
  for (const auto& l : params.layers) {
    z.layers.push_back({nn::zeros_like(l.phi), nn::zeros_like(l.psi), nn::zeros_like(l.gamma)});
  }
  z.fusion_mlp = nn::zeros_like(params.fusion_mlp);
  z.global_mlp = nn::zeros_like(params.global_mlp);
  z.fuse_mlp = nn::zeros_like(params.fuse_mlp);
  z.embed_mlp = nn::zeros_like(params.embed_mlp);
  return z;
}

std::uint64_t fingerprint(const SegNetParams& params) {
  std::uint64_t h = nn::fingerprint(params.input_proj);
  auto fold = [&h](const Mlp& m) { h = mix_seed(h, nn::fingerprint(m)); };
  for (const auto& l : params.layers) {
    fold(l.phi);
    fold(l.psi);
    fold(l.gamma);
  }
  fold(params.fusion_mlp);
  fold(params.global_mlp);
  fold(params.fuse_mlp);
  fold(params.embed_mlp);
  return h;
}

Matrix input_features(const geometry::PointCloud& cloud, const geometry::NeighborGraph& graph, bool use_color) {
  const std::size_t n = cloud.size();
  check(graph.size() == n, "neighbor graph does not match the cloud");
  if (use_color) {
    require(cloud.has_colors(), ErrorKind::kInvalidArgument, "network expects colors but the cloud has none");
  }
  double min_z = std::numeric_limits<double>::infinity();
  for (const auto& p : cloud.positions) min_z = std::min(min_z, p[2]);

  Matrix out(n, use_color ? 7 : 4);
  const double inv_k = 1.0 / static_cast<double>(graph.k);
  for (std::size_t i = 0; i < n; ++i) {
    geometry::Vec3 centroid{0.0, 0.0, 0.0};
    for (std::size_t j : graph.neighbors_of(i)) {
      for (std::size_t d = 0; d < 3; ++d) centroid[d] += cloud.positions[j][d];
    }
    for (std::size_t d = 0; d < 3; ++d) out(i, d) = cloud.positions[i][d] - centroid[d] * inv_k;
    out(i, 3) = cloud.positions[i][2] - min_z;
    if (use_color) {
      for (std::size_t d = 0; d < 3; ++d) out(i, 4 + d) = (*cloud.colors)[i][d];
    }
  }
  return out;
}

std::vector<double> attention_weights(std::span<const double> center, const Matrix& neighbors,
                                      const AttentionLayerParams& params) {
  check(center.size() == params.phi.input_dim(), "center feature dimension mismatch");
  check(neighbors.cols() == params.psi.input_dim(), "neighbor feature dimension mismatch");
  check(neighbors.rows() >= 1, "at least one neighbor is required");
  Matrix c(1, center.size(), std::vector<double>(center.begin(), center.end()));
  const Matrix q = nn::mlp_forward(params.phi, c);
  const Matrix keys = nn::mlp_forward(params.psi, neighbors);
  std::vector<double> logits(neighbors.rows());
  for (std::size_t j = 0; j < neighbors.rows(); ++j) logits[j] = nn::dot(q.row(0), keys.row(j));
  return nn::softmax(logits);
}

Matrix attention_layer(const Matrix& features, const geometry::NeighborGraph& graph,
                       const AttentionLayerParams& params, AttentionCache* cache) {
  const std::size_t n = features.rows();
  check(graph.size() == n, "neighbor graph covers " + std::to_string(graph.size()) + " points, features have " +
                               std::to_string(n));
  check(params.phi.output_dim() == params.psi.output_dim(), "phi and psi output dims differ");
  AttentionCache local;
  AttentionCache& c = cache != nullptr ? *cache : local;
  c.query = nn::mlp_forward(params.phi, features, &c.phi);
  c.key = nn::mlp_forward(params.psi, features, &c.psi);
  c.value = nn::mlp_forward(params.gamma, features, &c.gamma);

  const std::size_t k = graph.k;
  const std::size_t d_out = c.value.cols();
  c.weights = Matrix(n, k);
  Matrix out(n, d_out);
  std::vector<double> logits(k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto nbrs = graph.neighbors_of(i);
    for (std::size_t j = 0; j < k; ++j) logits[j] = nn::dot(c.query.row(i), c.key.row(nbrs[j]));
    const auto alpha = nn::softmax(logits);
    double* o = out.row(i).data();
    for (std::size_t j = 0; j < k; ++j) {
      c.weights(i, j) = alpha[j];
      const double* v = c.value.row(nbrs[j]).data();
      for (std::size_t d = 0; d < d_out; ++d) o[d] += alpha[j] * v[d];
    }
  }
  return out;
}

Matrix attention_layer_backward(const AttentionLayerParams& params, const AttentionCache& cache,
                                const geometry::NeighborGraph& graph, const Matrix& upstream,
                                AttentionLayerParams& grads) {
  const std::size_t n = upstream.rows();
  const std::size_t k = graph.k;
  const std::size_t d_attn = cache.query.cols();
  const std::size_t d_out = cache.value.cols();
  check(graph.size() == n && cache.weights.rows() == n && upstream.cols() == d_out,
        "attention backward shape mismatch");

  Matrix d_query(n, d_attn);
  Matrix d_key(n, d_attn);
  Matrix d_value(n, d_out);
  std::vector<double> d_alpha(k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto nbrs = graph.neighbors_of(i);
    const auto dh = upstream.row(i);
    double weighted = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double a = cache.weights(i, j);
      d_alpha[j] = nn::dot(dh, cache.value.row(nbrs[j]));
      weighted += a * d_alpha[j];
      double* dv = d_value.row(nbrs[j]).data();
      for (std::size_t d = 0; d < d_out; ++d) dv[d] += a * dh[d];
    }
    // Softmax Jacobian: dlogit_j = alpha_j (dalpha_j - sum_j' alpha_j' dalpha_j').
    double* dq = d_query.row(i).data();
    const double* q = cache.query.row(i).data();
    for (std::size_t j = 0; j < k; ++j) {
      const double dl = cache.weights(i, j) * (d_alpha[j] - weighted);
      const double* key = cache.key.row(nbrs[j]).data();
      double* dk = d_key.row(nbrs[j]).data();
      for (std::size_t d = 0; d < d_attn; ++d) {
        dq[d] += dl * key[d];
        dk[d] += dl * q[d];
      }
    }
  }
  Matrix d_features = nn::mlp_backward(params.phi, cache.phi, d_query, grads.phi);
  nn::add_in_place(d_features, nn::mlp_backward(params.psi, cache.psi, d_key, grads.psi));
  nn::add_in_place(d_features, nn::mlp_backward(params.gamma, cache.gamma, d_value, grads.gamma));
  return d_features;
}

Matrix residual_combine(const Matrix& layer_out, const Matrix& layer_in) {
  check(layer_out.rows() == layer_in.rows() && layer_out.cols() == layer_in.cols(),
        "residual requires equal shapes");
  return nn::add(layer_out, layer_in);
}

Matrix multiscale_fuse(std::span<const Matrix> layer_outputs, const Mlp& fusion, nn::MlpCache* cache) {
  check(!layer_outputs.empty(), "multiscale fusion needs at least one layer output");
  std::vector<const Matrix*> blocks;
  for (const auto& m : layer_outputs) blocks.push_back(&m);
  return nn::mlp_forward(fusion, nn::concat_cols(blocks), cache);
}

std::vector<double> global_context(const Matrix& fused, const Mlp& global_mlp, GlobalCache* cache) {
  check(fused.rows() >= 1, "global context needs at least one point");
  Matrix pooled(1, fused.cols());
  std::vector<std::size_t> argmax(fused.cols(), 0);
  for (std::size_t c = 0; c < fused.cols(); ++c) pooled(0, c) = fused(0, c);
  for (std::size_t r = 1; r < fused.rows(); ++r) {
    for (std::size_t c = 0; c < fused.cols(); ++c) {
      if (fused(r, c) > pooled(0, c)) {
        pooled(0, c) = fused(r, c);
        argmax[c] = r;
      }
    }
  }
  const Matrix z = nn::mlp_forward(global_mlp, pooled, cache != nullptr ? &cache->mlp : nullptr);
  if (cache != nullptr) cache->argmax = std::move(argmax);
  return {z.values().begin(), z.values().end()};
}

Matrix global_fuse(const Matrix& fused, std::span<const double> global, const Mlp& fuse_mlp, nn::MlpCache* cache) {
  check(fuse_mlp.input_dim() == fused.cols() + global.size(), "fuse MLP input must be [H; z]");
  check(fuse_mlp.output_dim() == fused.cols(), "fuse MLP must preserve the fused width");
  Matrix joined(fused.rows(), fused.cols() + global.size());
  for (std::size_t r = 0; r < fused.rows(); ++r) {
    auto dst = joined.row(r);
    auto src = fused.row(r);
    std::copy(src.begin(), src.end(), dst.begin());
    std::copy(global.begin(), global.end(), dst.begin() + static_cast<std::ptrdiff_t>(src.size()));
  }
  Matrix out = nn::mlp_forward(fuse_mlp, joined, cache);
  nn::add_in_place(out, fused);
  return out;
}

EmbeddingField embed_points(const Matrix& features, const Mlp& embed_mlp, nn::MlpCache* cache) {
  check(features.cols() == embed_mlp.input_dim(), "embedding head input dimension mismatch");
  return nn::mlp_forward(embed_mlp, features, cache);
}

ForwardResult forward_full(const geometry::PointCloud& cloud, const SegNetParams& params, ForwardCache* cache) {
  params.validate();
  cloud.validate();
  const auto& cfg = params.config;
  check(cloud.size() > cfg.k, "the cloud has " + std::to_string(cloud.size()) + " points; need more than k = " +
                                  std::to_string(cfg.k));

  ForwardCache local;
  ForwardCache& c = cache != nullptr ? *cache : local;
  c.params = &params;
  c.fingerprint = fingerprint(params);
  c.graphs.clear();
  c.attention.assign(cfg.num_layers, AttentionCache{});

  ForwardResult result;
  const auto spatial = geometry::build_knn_graph(cloud, cfg.k);
  c.inputs = input_features(cloud, spatial, cfg.use_color);
  Matrix f = nn::mlp_forward(params.input_proj, c.inputs, &c.input_proj);

  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    if (l == 0 || !cfg.recompute_neighbors) {
      c.graphs.push_back(spatial);
    } else {
      c.graphs.push_back(geometry::build_feature_knn(f, cfg.k));
    }
    Matrix h = attention_layer(f, c.graphs.back(), params.layers[l], &c.attention[l]);
    f = residual_combine(h, f);
    result.features.layer_outputs.push_back(std::move(h));
  }

  result.features.fused = multiscale_fuse(result.features.layer_outputs, params.fusion_mlp, &c.fusion);
  result.features.global = global_context(result.features.fused, params.global_mlp, &c.global);
  result.features.features =
      global_fuse(result.features.fused, result.features.global, params.fuse_mlp, &c.fuse);
  result.embeddings = embed_points(result.features.features, params.embed_mlp, &c.embed);
  nn::validate_finite(result.embeddings, "embeddings");
  return result;
}

SegNetParams backward_full(const SegNetParams& params, const ForwardCache& cache, const Matrix& d_embeddings,
                           const Matrix* d_features) {
  if (cache.params != &params || cache.fingerprint != fingerprint(params)) {
    fail(ErrorKind::kInvalidState, "forward cache does not match the current parameters");
  }
  const auto& cfg = params.config;
  SegNetParams grads = zeros_like(params);

  Matrix dF = nn::mlp_backward(params.embed_mlp, cache.embed, d_embeddings, grads.embed_mlp);
  if (d_features != nullptr) nn::add_in_place(dF, *d_features);

  // F = H + fuse([H; z])
  const std::size_t d_f = cfg.fused_dim;
  const Matrix d_joined = nn::mlp_backward(params.fuse_mlp, cache.fuse, dF, grads.fuse_mlp);
  const std::size_t n = dF.rows();
  Matrix dH = dF;
  Matrix dz(1, cfg.global_dim);
  for (std::size_t r = 0; r < n; ++r) {
    auto src = d_joined.row(r);
    double* dh = dH.row(r).data();
    for (std::size_t c = 0; c < d_f; ++c) dh[c] += src[c];
    for (std::size_t c = 0; c < cfg.global_dim; ++c) dz(0, c) += src[d_f + c];
  }

  // z = global(max_i H_i): the gradient routes to the winning row of each column.
  const Matrix d_pooled = nn::mlp_backward(params.global_mlp, cache.global.mlp, dz, grads.global_mlp);
  for (std::size_t c = 0; c < d_f; ++c) dH(cache.global.argmax[c], c) += d_pooled(0, c);

  const Matrix d_concat = nn::mlp_backward(params.fusion_mlp, cache.fusion, dH, grads.fusion_mlp);

  const std::size_t d = cfg.width;
  Matrix d_f_out(n, d);  // gradient w.r.t. the residual output of the current layer
  for (std::size_t l = cfg.num_layers; l-- > 0;) {
    Matrix dh = nn::select_cols(d_concat, l * d, d);
    nn::add_in_place(dh, d_f_out);
    Matrix d_in = attention_layer_backward(params.layers[l], cache.attention[l], cache.graphs[l], dh,
                                           grads.layers[l]);
    nn::add_in_place(d_in, d_f_out);
    d_f_out = std::move(d_in);
  }
  nn::mlp_backward(params.input_proj, cache.input_proj, d_f_out, grads.input_proj);
  return grads;
}

}  // namespace segvec3d::segnet
