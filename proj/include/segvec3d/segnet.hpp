#pragma once

// Point segmentation network: a lifted per-point input feature, L stacked kNN
// attention layers with residual connections, multi-scale concatenation,
// max-pooled global context fused back into every point, and a per-point
// embedding head. Every stage has an explicit backward pass.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "segvec3d/geometry.hpp"
#include "segvec3d/nn.hpp"

namespace segvec3d::segnet {

using nn::Matrix;
using nn::Mlp;

struct SegNetConfig {
  std::size_t k = 16;
  std::size_t num_layers = 3;
  std::size_t width = 32;
  std::size_t attention_dim = 16;
  // Hidden width of gamma; 0 makes gamma a single linear map.
  std::size_t gamma_hidden = 32;
  std::size_t fused_dim = 64;
  std::size_t global_dim = 32;
  std::size_t head_hidden = 64;
  std::size_t embed_dim = 16;
  bool use_color = true;
  bool recompute_neighbors = false;

  // [centroid offset (3), height above floor (1), rgb (3)?]
  std::size_t input_dim() const noexcept { return use_color ? 7 : 4; }
  void validate() const;
  bool operator==(const SegNetConfig&) const = default;
};

struct AttentionLayerParams {
  Mlp phi;    // width -> attention_dim
  Mlp psi;    // width -> attention_dim
  Mlp gamma;  // width -> width

  bool operator==(const AttentionLayerParams&) const = default;
};

struct SegNetParams {
  SegNetConfig config;
  Mlp input_proj;  // input_dim -> width
  std::vector<AttentionLayerParams> layers;
  Mlp fusion_mlp;  // num_layers * width -> fused_dim
  Mlp global_mlp;  // fused_dim -> global_dim
  Mlp fuse_mlp;    // fused_dim + global_dim -> fused_dim
  Mlp embed_mlp;   // fused_dim -> embed_dim

  // Throws invalid-argument if any dimension chain is inconsistent.
  void validate() const;
  nn::ParamList parameters();
  std::size_t parameter_count() const;
  bool operator==(const SegNetParams&) const = default;
};

SegNetParams init_segnet(const SegNetConfig& config, std::uint64_t seed);
SegNetParams zeros_like(const SegNetParams& params);

// Per-point outputs of each stage.
struct PointFeatureField {
  std::vector<Matrix> layer_outputs;  // h^(l), N x width
  Matrix fused;                       // H, N x fused_dim
  std::vector<double> global;         // z, global_dim
  Matrix features;                    // F, N x fused_dim
};

// N x embed_dim.
using EmbeddingField = Matrix;

Matrix input_features(const geometry::PointCloud& cloud, const geometry::NeighborGraph& graph, bool use_color);

std::vector<double> attention_weights(std::span<const double> center, const Matrix& neighbors,
                                      const AttentionLayerParams& params);

struct AttentionCache {
  nn::MlpCache phi, psi, gamma;
  Matrix query;     // phi(f)
  Matrix key;       // psi(f)
  Matrix value;     // gamma(f)
  Matrix weights;   // N x k attention coefficients
};

Matrix attention_layer(const Matrix& features, const geometry::NeighborGraph& graph,
                       const AttentionLayerParams& params, AttentionCache* cache = nullptr);

// Returns dL/dfeatures and accumulates parameter gradients.
Matrix attention_layer_backward(const AttentionLayerParams& params, const AttentionCache& cache,
                                const geometry::NeighborGraph& graph, const Matrix& upstream,
                                AttentionLayerParams& grads);

Matrix residual_combine(const Matrix& layer_out, const Matrix& layer_in);

Matrix multiscale_fuse(std::span<const Matrix> layer_outputs, const Mlp& fusion, nn::MlpCache* cache = nullptr);

struct GlobalCache {
  std::vector<std::size_t> argmax;  // winning row per column, first on ties
  nn::MlpCache mlp;
};

std::vector<double> global_context(const Matrix& fused, const Mlp& global_mlp, GlobalCache* cache = nullptr);

Matrix global_fuse(const Matrix& fused, std::span<const double> global, const Mlp& fuse_mlp,
                   nn::MlpCache* cache = nullptr);

EmbeddingField embed_points(const Matrix& features, const Mlp& embed_mlp, nn::MlpCache* cache = nullptr);

struct ForwardCache {
  const SegNetParams* params = nullptr;
  std::uint64_t fingerprint = 0;
  Matrix inputs;
  nn::MlpCache input_proj;
  std::vector<geometry::NeighborGraph> graphs;
  std::vector<AttentionCache> attention;
  nn::MlpCache fusion;
  GlobalCache global;
  nn::MlpCache fuse;
  nn::MlpCache embed;
};

struct ForwardResult {
  PointFeatureField features;
  EmbeddingField embeddings;
};

ForwardResult forward_full(const geometry::PointCloud& cloud, const SegNetParams& params,
                           ForwardCache* cache = nullptr);

// Parameter gradients given dL/dembeddings and, optionally, an extra dL/dF
// (used when the fused features feed another objective).
SegNetParams backward_full(const SegNetParams& params, const ForwardCache& cache, const Matrix& d_embeddings,
                           const Matrix* d_features = nullptr);

std::uint64_t fingerprint(const SegNetParams& params);

}  // namespace segvec3d::segnet
