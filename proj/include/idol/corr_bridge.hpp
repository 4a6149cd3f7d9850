#pragma once

// Correlation-aware information bridge: a bipartite graph linking the four
// correlation factors (tcf, tcc, tce, tcw) to the four attributes (v, p, ri,
// ro), encoded by two graph convolutions into mixture logits, which weight a
// bank of Gaussian components to form the task-shared identity.

#include <algorithm>
#include <array>
#include <cmath>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "idol/autodiff/nn.hpp"

namespace idol::model {

using DkMatrix = std::array<std::array<int, 4>, 4>;

// Rows tcf, tcc, tce, tcw; columns v, p, ri, ro.
inline constexpr DkMatrix kDarkKnowledge{{{0, 0, 1, 1}, {1, 0, 1, 0}, {1, 1, 0, 0}, {0, 1, 0, 1}}};

inline constexpr std::size_t kGraphNodes = 8;  // 4 factor nodes, then 4 attribute nodes

// Same number of 1-entries at shuffled positions; never returns the input.
inline DkMatrix randomized_dark_knowledge(std::uint64_t seed) {
  std::array<int, 16> flat{};
  for (std::size_t i = 0; i < 16; ++i) flat[i] = kDarkKnowledge[i / 4][i % 4];
  Rng rng(hash_seed({seed, 0xD4C6ULL}));
  DkMatrix out = kDarkKnowledge;
  while (out == kDarkKnowledge) {
    shuffle(flat, rng);
    for (std::size_t i = 0; i < 16; ++i) out[i / 4][i % 4] = flat[i];
  }
  return out;
}

struct Edge {
  std::size_t a, b;  // node indices, a < b
};

struct DarkKnowledgeGraph {
  DkMatrix matrix = kDarkKnowledge;
  std::vector<Edge> edges;
  std::vector<double> norm_adjacency;  // (8, 8) with self-loops, symmetric normalization

  static DarkKnowledgeGraph from_matrix(const DkMatrix& m) {
    DarkKnowledgeGraph g;
    g.matrix = m;
    std::vector<std::vector<double>> adj(kGraphNodes, std::vector<double>(kGraphNodes, 0.0));
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        if (m[i][j]) {
          g.edges.push_back({i, 4 + j});
          adj[i][4 + j] = adj[4 + j][i] = 1.0;
        }
    std::vector<double> deg(kGraphNodes, 1.0);
    for (std::size_t i = 0; i < kGraphNodes; ++i)
      for (double v : adj[i]) deg[i] += v;
    g.norm_adjacency.assign(kGraphNodes * kGraphNodes, 0.0);
    for (std::size_t i = 0; i < kGraphNodes; ++i)
      for (std::size_t j = 0; j < kGraphNodes; ++j)
        g.norm_adjacency[i * kGraphNodes + j] = (adj[i][j] + (i == j ? 1.0 : 0.0)) / std::sqrt(deg[i] * deg[j]);
    return g;
  }

  nlohmann::json to_json() const {
    static constexpr std::array<const char*, 8> names{"tcf", "tcc", "tce", "tcw", "v", "p", "ri", "ro"};
    nlohmann::json j;
    j["rows"] = {"tcf", "tcc", "tce", "tcw"};
    j["columns"] = {"v", "p", "ri", "ro"};
    j["matrix"] = matrix;
    j["edges"] = nlohmann::json::array();
    for (const auto& e : edges) j["edges"].push_back({names[e.a], names[e.b]});
    return j;
  }
};

template <typename T>
struct NodeFeatures {
  ad::Tensor<T> values;  // (B, 8, d)
};

template <typename T>
struct CorrBridge {
  DarkKnowledgeGraph graph = DarkKnowledgeGraph::from_matrix(kDarkKnowledge);
  ad::Tensor<T> factor_weight, factor_bias;  // (4, d) each: per-factor scalar embedding
  ad::Tensor<T> attribute_embedding;         // (4, d)
  ad::Linear<T> conv1, conv2;
  ad::Linear<T> head;                        // d -> k+1
  ad::Tensor<T> mix_mu, mix_sigma_raw;       // (k+1, n)

  CorrBridge() = default;
  CorrBridge(std::size_t d, std::size_t n, std::size_t k, const DkMatrix& m, Rng& rng)
      : graph(DarkKnowledgeGraph::from_matrix(m)),
        factor_weight(ad::normal_param<T>({4, d}, 1.0, rng)),
        factor_bias(ad::zero_param<T>({4, d})),
        attribute_embedding(ad::normal_param<T>({4, d}, 1.0, rng)),
        conv1(d, d, rng),
        conv2(d, d, rng),
        head(d, k + 1, rng),
        mix_mu(ad::normal_param<T>({k + 1, n}, 0.1, rng)),
        mix_sigma_raw(ad::Tensor<T>::parameter({k + 1, n}, std::vector<T>((k + 1) * n, T(std::log(std::expm1(1.0)))))) {}

  std::size_t components() const { return mix_mu.dim(0); }

  // Node features for a (B, 4) batch of standardized correlation factors.
  NodeFeatures<T> build_graph(const ad::Tensor<T>& cor) const {
    if (cor.rank() != 2 || cor.dim(1) != 4) throw ShapeError("build_graph: expected (batch, 4) correlation factors");
    const std::size_t b = cor.dim(0), d = factor_weight.dim(1);
    auto factors = ad::reshape(cor, {b, 4, 1}) * factor_weight + factor_bias;
    auto attrs = ad::broadcast_to(ad::reshape(attribute_embedding, {1, 4, d}), {b, 4, d});
    return {ad::concat<T>({factors, attrs}, 1)};
  }

  ad::Tensor<T> encode_correlations(const NodeFeatures<T>& nodes) const {
    const std::size_t b = nodes.values.dim(0);
    const auto& a = graph.norm_adjacency;
    auto adj = ad::broadcast_to(
        ad::Tensor<T>::constant({1, kGraphNodes, kGraphNodes}, std::vector<T>(a.begin(), a.end())),
        {b, kGraphNodes, kGraphNodes});
    auto h = ad::relu(conv1(ad::bmm(adj, nodes.values)));
    h = ad::relu(conv2(ad::bmm(adj, h)));
    return head(ad::mean_axis(h, 1));
  }

  ad::Tensor<T> mixture_weights(const ad::Tensor<T>& z) const { return ad::softmax_last(z); }

  // d_j = mu_j + sigma_j * id for every component: (B, k+1, n).
  ad::Tensor<T> components_for(const ad::Tensor<T>& id) const {
    const std::size_t b = id.dim(0), n = id.dim(1), k1 = components();
    if (n != mix_mu.dim(1)) throw ShapeError("shared_identity: identity width mismatch");
    return ad::reshape(mix_mu, {1, k1, n}) + ad::reshape(ad::softplus(mix_sigma_raw), {1, k1, n}) * ad::reshape(id, {b, 1, n});
  }

  ad::Tensor<T> shared_identity(const ad::Tensor<T>& z, const ad::Tensor<T>& id) const {
    const std::size_t b = id.dim(0), k1 = components();
    auto alpha = ad::reshape(mixture_weights(z), {b, k1, 1});
    return ad::sum_axis(alpha * components_for(id), 1);
  }

  ad::Tensor<T> operator()(const ad::Tensor<T>& cor, const ad::Tensor<T>& id) const {
    return shared_identity(encode_correlations(build_graph(cor)), id);
  }

  void collect(const std::string& prefix, ad::ParamList<T>& out) const {
    out.push_back({ad::join_name(prefix, "factor_weight"), factor_weight});
    out.push_back({ad::join_name(prefix, "factor_bias"), factor_bias});
    out.push_back({ad::join_name(prefix, "attribute_embedding"), attribute_embedding});
    conv1.collect(ad::join_name(prefix, "conv1"), out);
    conv2.collect(ad::join_name(prefix, "conv2"), out);
    head.collect(ad::join_name(prefix, "head"), out);
    out.push_back({ad::join_name(prefix, "mix_mu"), mix_mu});
    out.push_back({ad::join_name(prefix, "mix_sigma_raw"), mix_sigma_raw});
  }
};

}  // namespace idol::model
