#pragma once

// Graph-isomorphism-network layers over the causal adjacency:
// h'_v = MLP((1 + eps) * h_v + sum_{u in N(v)} h_u), plus mean readout.

#include <cstddef>
#include <string>
#include <vector>

#include "calonet/causal.hpp"
#include "calonet/common.hpp"
#include "calonet/tensor.hpp"

namespace calonet {

struct GinConfig {
  std::size_t n_layers = 2;
  std::size_t node_dim = 32;
  std::size_t mlp_hidden = 0;  // 0 resolves to node_dim
  bool eps_learnable = true;   // init 0 either way
};

inline std::size_t resolved_gin_hidden(const GinConfig& cfg) {
  return cfg.mlp_hidden == 0 ? cfg.node_dim : cfg.mlp_hidden;
}

struct GinLayer {
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  Tensor eps;  // scalar
};

// Which matrix entries define the neighborhood N(v):
//   in:  causes aggregate into effects ({u : M[u][v] > 0})
//   out: effects aggregate into causes ({u : M[v][u] > 0})
//   sym: union of both
enum class GnnDirection { in, out, sym };

inline GnnDirection gnn_direction_from_string(const std::string& s) {
  if (s == "in") return GnnDirection::in;
  if (s == "out") return GnnDirection::out;
  if (s == "sym") return GnnDirection::sym;
  throw ConfigError("unknown gnn direction '" + s + "' (expected in, out, or sym)");
}

inline std::string to_string(GnnDirection d) {
  switch (d) {
    case GnnDirection::in: return "in";
    case GnnDirection::out: return "out";
    default: return "sym";
  }
}

inline std::vector<GinLayer> make_gin(const GinConfig& cfg, Rng& rng) {
  if (cfg.n_layers < 1) throw ConfigError("gin: n_layers must be >= 1");
  if (cfg.node_dim < 1) throw ConfigError("gin: node_dim must be >= 1");
  const std::size_t d = cfg.node_dim, hidden = resolved_gin_hidden(cfg);
  std::vector<GinLayer> layers;
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    GinLayer layer;
    layer.mlp_w1 = detail::init_uniform({d, hidden}, d, rng);
    layer.mlp_b1 = detail::init_uniform({hidden}, d, rng);
    layer.mlp_w2 = detail::init_uniform({hidden, d}, hidden, rng);
    layer.mlp_b2 = detail::init_uniform({d}, hidden, rng);
    layer.eps = Tensor::scalar(0.0);
    layer.eps.set_requires_grad(cfg.eps_learnable);
    layers.push_back(std::move(layer));
  }
  return layers;
}

template <typename Fn>
void visit_params(std::vector<GinLayer>& layers, Fn&& fn) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "gin.layer" + std::to_string(i);
    fn(p + ".mlp.w1", layers[i].mlp_w1);
    fn(p + ".mlp.b1", layers[i].mlp_b1);
    fn(p + ".mlp.w2", layers[i].mlp_w2);
    fn(p + ".mlp.b2", layers[i].mlp_b2);
    fn(p + ".eps", layers[i].eps);
  }
}

// Aggregation matrix A with A[v][u] = 1 (or the edge weight) for u in N(v),
// so the neighbor sum is matmul(A, H).
inline Tensor aggregation_matrix(const CausalMatrix& adj, GnnDirection dir, bool weighted) {
  const std::size_t n = adj.n;
  Tensor a = Tensor::zeros({n, n});
  for (std::size_t v = 0; v < n; ++v)
    for (std::size_t u = 0; u < n; ++u) {
      double w = 0.0;
      if ((dir == GnnDirection::in || dir == GnnDirection::sym) && adj.at(u, v) != 0.0)
        w += weighted ? adj.at(u, v) : 1.0;
      if ((dir == GnnDirection::out || dir == GnnDirection::sym) && adj.at(v, u) != 0.0)
        w += weighted ? adj.at(v, u) : 1.0;
      a.data()[v * n + u] = w;
    }
  return a;
}

inline Tensor gin_layer(const Tensor& h, const CausalMatrix& adj, const GinLayer& layer,
                        GnnDirection dir = GnnDirection::in, bool weighted = false) {
  if (h.rank() != 2 || h.dim(0) != adj.n)
    throw ShapeError("gin_layer: node features " + shape_str(h.shape()) + " vs adjacency of " +
                     std::to_string(adj.n) + " nodes");
  Tensor self = mul(h, add(Tensor::scalar(1.0), layer.eps));
  Tensor agg = add(self, matmul(aggregation_matrix(adj, dir, weighted), h));
  Tensor hidden = relu(add(matmul(agg, layer.mlp_w1), layer.mlp_b1));
  return add(matmul(hidden, layer.mlp_w2), layer.mlp_b2);
}

inline Tensor gin_forward(const Tensor& h0, const CausalMatrix& adj,
                          const std::vector<GinLayer>& layers, GnnDirection dir = GnnDirection::in,
                          bool weighted = false) {
  Tensor h = h0;
  for (const auto& layer : layers) h = gin_layer(h, adj, layer, dir, weighted);
  return h;
}

// permutation-invariant graph-level representation: mean over nodes
inline Tensor readout(const Tensor& h_final) {
  if (h_final.rank() != 2 || h_final.dim(0) < 1)
    throw ShapeError("readout: non-empty rank-2 node matrix required, got " + shape_str(h_final.shape()));
  return mean_axis(h_final, 0);
}

}  // namespace calonet
