#include "segvec3d/gradcheck.hpp"

#include "segvec3d/geometry.hpp"
#include "segvec3d/losses.hpp"
#include "segvec3d/multimodal.hpp"
#include "segvec3d/random.hpp"
#include "segvec3d/segnet.hpp"

namespace segvec3d::gradcheck {

namespace {

using nn::Matrix;

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = scale * rng.normal();
  return m;
}

// <R, Y> with a fixed random R gives every output entry a distinct upstream weight.
double weighted_sum(const Matrix& y, const Matrix& r) { return nn::dot(y.values(), r.values()); }

nn::GradCheckReport check_mlp(nn::Mlp mlp, std::size_t batch, Rng& rng, const nn::GradCheckOptions& options) {
  const std::size_t in = mlp.layers.front().weight.cols();
  const std::size_t out = mlp.layers.back().weight.rows();
  Matrix x = random_matrix(batch, in, rng);
  const Matrix r = random_matrix(batch, out, rng);
  nn::MlpCache cache;
  nn::mlp_forward(mlp, x, &cache);
  nn::Mlp grads = nn::zeros_like(mlp);
  Matrix dx = nn::mlp_backward(mlp, cache, r, grads);

  nn::ParamList params{x.values()};
  nn::ParamList analytic{dx.values()};
  nn::append_params(mlp, params);
  nn::append_params(grads, analytic);
  return nn::check_gradients([&] { return weighted_sum(nn::mlp_forward(mlp, x), r); }, params, analytic, options);
}

segnet::SegNetConfig small_config() {
  segnet::SegNetConfig c;
  c.k = 4;
  c.num_layers = 2;
  c.width = 8;
  c.attention_dim = 4;
  c.gamma_hidden = 8;
  c.fused_dim = 8;
  c.global_dim = 4;
  c.head_hidden = 8;
  c.embed_dim = 4;
  return c;
}

geometry::PointCloud random_scene(std::size_t n, Rng& rng) {
  geometry::PointCloud cloud;
  cloud.colors.emplace();
  cloud.instance_labels.emplace();
  for (std::size_t i = 0; i < n; ++i) {
    cloud.positions.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    cloud.colors->push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    cloud.instance_labels->push_back(static_cast<int>(i % 2));
  }
  return cloud;
}

}  // namespace

std::vector<SuiteEntry> run_gradient_suite(std::uint64_t seed, const nn::GradCheckOptions& options) {
  std::vector<SuiteEntry> out;
  Rng rng(seed);
  const segnet::SegNetConfig config = small_config();

  {
    segnet::SegNetParams net = segnet::init_segnet(config, mix_seed(seed, 1));
    out.push_back({"mlp/input_proj", check_mlp(net.input_proj, 5, rng, options)});
    out.push_back({"mlp/phi", check_mlp(net.layers[0].phi, 5, rng, options)});
    out.push_back({"mlp/psi", check_mlp(net.layers[0].psi, 5, rng, options)});
    out.push_back({"mlp/gamma", check_mlp(net.layers[0].gamma, 5, rng, options)});
    out.push_back({"mlp/fusion", check_mlp(net.fusion_mlp, 5, rng, options)});
    out.push_back({"mlp/global", check_mlp(net.global_mlp, 5, rng, options)});
    out.push_back({"mlp/fuse", check_mlp(net.fuse_mlp, 5, rng, options)});
    out.push_back({"mlp/embed", check_mlp(net.embed_mlp, 5, rng, options)});
  }

  {
    segnet::SegNetParams net = segnet::init_segnet(config, mix_seed(seed, 2));
    segnet::AttentionLayerParams layer = net.layers[0];
    const std::size_t n = 10;
    Matrix f = random_matrix(n, config.width, rng);
    const geometry::NeighborGraph graph = geometry::build_feature_knn(random_matrix(n, 3, rng), 3);
    const Matrix r = random_matrix(n, config.width, rng);
    segnet::AttentionCache cache;
    segnet::attention_layer(f, graph, layer, &cache);
    segnet::AttentionLayerParams grads{nn::zeros_like(layer.phi), nn::zeros_like(layer.psi),
                                       nn::zeros_like(layer.gamma)};
    Matrix df = segnet::attention_layer_backward(layer, cache, graph, r, grads);
    nn::ParamList params{f.values()};
    nn::ParamList analytic{df.values()};
    for (auto* m : {&layer.phi, &layer.psi, &layer.gamma}) nn::append_params(*m, params);
    for (auto* m : {&grads.phi, &grads.psi, &grads.gamma}) nn::append_params(*m, analytic);
    out.push_back({"attention_layer", nn::check_gradients(
                                          [&] { return weighted_sum(segnet::attention_layer(f, graph, layer), r); },
                                          params, analytic, options)});
  }

  {
    const std::size_t n = 12;
    Matrix e = random_matrix(n, 4, rng, 0.3);
    std::vector<int> groups(n);
    for (std::size_t i = 0; i < n; ++i) groups[i] = static_cast<int>(i % 3);
    const losses::PairSet pairs = losses::sample_pairs(groups, 1000, mix_seed(seed, 3), 1.0);
    const auto result = losses::contrastive_loss(e, pairs);
    Matrix g = result.gradient;
    out.push_back({"contrastive_loss", nn::check_gradients([&] { return losses::contrastive_loss(e, pairs).mean; },
                                                           {e.values()}, {g.values()}, options)});
  }

  {
    const std::size_t b = 8;
    Matrix x = random_matrix(b, 6, rng);
    Matrix t = random_matrix(b, 6, rng);
    const double tau = 0.5;
    auto result = multimodal::infonce_loss(x, t, tau);
    out.push_back({"infonce", nn::check_gradients([&] { return multimodal::infonce_loss(x, t, tau).loss; },
                                                  {x.values(), t.values()},
                                                  {result.grad_3d.values(), result.grad_text.values()}, options)});
  }

  {
    const geometry::PointCloud cloud = random_scene(12, rng);
    segnet::SegNetParams net = segnet::init_segnet(config, mix_seed(seed, 4));
    const losses::PairSet pairs = losses::sample_pairs(*cloud.instance_labels, 1000, mix_seed(seed, 5), 1.0);
    segnet::ForwardCache cache;
    const auto fwd = segnet::forward_full(cloud, net, &cache);
    const auto loss = losses::contrastive_loss(fwd.embeddings, pairs);
    segnet::SegNetParams grads = segnet::backward_full(net, cache, loss.gradient);
    out.push_back({"end_to_end", nn::check_gradients(
                                     [&] {
                                       return losses::contrastive_loss(segnet::forward_full(cloud, net).embeddings, pairs)
                                           .mean;
                                     },
                                     net.parameters(), grads.parameters(), options)});
  }
  return out;
}

}  // namespace segvec3d::gradcheck
