#pragma once

// Task dependency flow: the development encoder turns the initial identity
// into intensity identities (v, p), and a prior-aware approximator maps each
// intensity identity to a size identity (v -> ri, p -> ro). The approximator
// mirrors the Holland inversion r = gamma^(1/B): gamma is built from a log
// ratio of two learned positive maps, and the power is replaced by a gated
// fixed-point iteration conditioned on graph-refined node embeddings.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "idol/autodiff/nn.hpp"

namespace idol::model {

inline constexpr double kLogEps = 1e-6;
inline constexpr double kDenominatorFloor = 1e-4;
inline constexpr std::size_t kPriorNodes = 4;

// Adjacency over the prior nodes (v, p, ri, ro): a 4-cycle linking each pair
// of attributes that share a correlation factor.
inline std::vector<std::vector<double>> prior_node_edges() {
  return {{0, 1, 1, 0}, {1, 0, 0, 1}, {1, 0, 0, 1}, {0, 1, 1, 0}};
}

// D^-1/2 (E + I) D^-1/2 for a symmetric 0/1 adjacency.
inline std::vector<double> normalized_adjacency(const std::vector<std::vector<double>>& e) {
  const std::size_t m = e.size();
  std::vector<double> a(m * m), deg(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    if (e[i].size() != m) throw ShapeError("adjacency must be square");
    for (std::size_t j = 0; j < m; ++j) {
      if (e[i][j] != e[j][i]) throw ValidationError("adjacency must be symmetric");
      a[i * m + j] = e[i][j] + (i == j ? 1.0 : 0.0);
      deg[i] += a[i * m + j];
    }
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) a[i * m + j] /= std::sqrt(deg[i] * deg[j]);
  return a;
}

// One graph convolution, mean-pooled over nodes: (m, n) -> (n).
template <typename T>
ad::Tensor<T> graph_refine(const ad::Tensor<T>& u_raw, const std::vector<std::vector<double>>& edges,
                           const ad::Tensor<T>& weight, bool tanh_activation = true) {
  const std::size_t m = u_raw.dim(0), n = u_raw.dim(1);
  if (edges.size() != m) throw ShapeError("graph_refine: adjacency size does not match node count");
  const auto a = normalized_adjacency(edges);
  auto adj = ad::Tensor<T>::constant({1, m, m}, std::vector<T>(a.begin(), a.end()));
  auto mixed = ad::reshape(ad::bmm(adj, ad::reshape(u_raw, {1, m, n})), {m, n});
  auto out = ad::linear(mixed, weight);
  if (tanh_activation) out = ad::tanh(out);
  return ad::mean_axis(out, 0);
}

template <typename T>
struct DevEncoder {
  ad::Linear<T> hidden;
  ad::Linear<T> out;  // zero-initialized: mu = 0, sigma = 1 at the start

  DevEncoder() = default;
  DevEncoder(std::size_t dev_dim, std::size_t width, Rng& rng)
      : hidden(dev_dim, width, rng), out(width, 4 * width, rng) {
    out.zero_();
  }

  std::size_t width() const { return hidden.out_features(); }

  // Returns (id_sp_v, id_sp_p).
  std::array<ad::Tensor<T>, 2> operator()(const ad::Tensor<T>& x_dev, const ad::Tensor<T>& id) const {
    const std::size_t n = width();
    if (id.rank() != 2 || id.dim(1) != n) throw ShapeError("dev_encode: identity width mismatch");
    auto raw = out(ad::relu(hidden(x_dev)));
    // dividing by softplus(0) makes sigma exactly 1 for zero raw output
    const auto sp0 = ad::Tensor<T>::scalar(ad::softplus_value(T(0)));
    std::array<ad::Tensor<T>, 2> tokens;
    for (std::size_t t = 0; t < 2; ++t) {
      auto mu = ad::narrow(raw, 1, 2 * t * n, n);
      auto sigma = ad::softplus(ad::narrow(raw, 1, (2 * t + 1) * n, n)) / sp0;
      tokens[t] = mu + sigma * id;
    }
    return tokens;
  }

  void collect(const std::string& prefix, ad::ParamList<T>& out_params) const {
    hidden.collect(ad::join_name(prefix, "hidden"), out_params);
    out.collect(ad::join_name(prefix, "out"), out_params);
  }
};

template <typename T>
struct IterationResult {
  ad::Tensor<T> h;
  std::size_t iterations = 0;
};

template <typename T>
struct PriorApp {
  ad::Linear<T> f_n, f_r;
  ad::Tensor<T> alpha;  // (1)
  ad::Tensor<T> u_raw;  // (m, n)
  ad::Tensor<T> u_weight;
  ad::Linear<T> gate_fg, gate_in, gate_c, gate_ou;
  std::vector<std::vector<double>> edges = prior_node_edges();
  std::size_t max_iterations = 8;
  double tolerance = 1e-3;
  bool graph_tanh = true;

  PriorApp() = default;
  PriorApp(std::size_t n, std::size_t max_iter, double tol, Rng& rng)
      : f_n(n, n, rng),
        f_r(n, n, rng),
        alpha(ad::Tensor<T>::parameter({1}, {T(1)})),
        u_raw(ad::normal_param<T>({kPriorNodes, n}, 1.0 / std::sqrt(static_cast<double>(n)), rng)),
        u_weight(ad::uniform_param<T>({n, n}, 1.0 / std::sqrt(static_cast<double>(n)), rng)),
        gate_fg(3 * n, n, rng),
        gate_in(2 * n, n, rng),
        gate_c(2 * n, n, rng),
        gate_ou(3 * n, n, rng),
        max_iterations(max_iter),
        tolerance(tol) {
    if (max_iterations < 1) throw ValidationError("iteration cap R must be >= 1");
    if (!(tolerance > 0)) throw ValidationError("tolerance must be > 0");
  }

  // gamma = alpha / clamp(ln(softplus(F_n id) + eps) - ln(softplus(F_r id) + eps)).
  ad::Tensor<T> compute_gamma(const ad::Tensor<T>& id, std::size_t* clamped = nullptr) const {
    const T eps = static_cast<T>(kLogEps);
    auto den = ad::log(ad::softplus(f_n(id)) + eps) - ad::log(ad::softplus(f_r(id)) + eps);
    return alpha / ad::clamp_abs_min(den, static_cast<T>(kDenominatorFloor), clamped);
  }

  ad::Tensor<T> context() const { return graph_refine(u_raw, edges, u_weight, graph_tanh); }

  // Gated iteration from H_0 with C_0 = 0. Stops at the first step whose
  // max-abs change is below tolerance, or after max_iterations steps.
  IterationResult<T> iterate(const ad::Tensor<T>& h0, const ad::Tensor<T>& u, const ad::Tensor<T>& gamma) const {
    const std::size_t b = h0.dim(0), n = h0.dim(1);
    auto u_b = ad::broadcast_to(ad::reshape(u, {1, n}), {b, n});
    IterationResult<T> r;
    r.h = h0;
    auto c = ad::Tensor<T>::zeros({b, n});
    for (std::size_t t = 1; t <= max_iterations; ++t) {
      auto hg = ad::concat<T>({r.h, gamma}, 1);
      auto hgu = ad::concat<T>({r.h, gamma, u_b}, 1);
      auto f_fg = ad::sigmoid(gate_fg(hgu));
      auto f_in = ad::sigmoid(gate_in(hg)) * ad::tanh(gate_c(hg));
      auto f_ou = ad::sigmoid(gate_ou(hgu));
      c = c * f_fg + f_in;
      auto next = ad::tanh(c) * f_ou;
      T delta = 0;
      const auto nv = next.values();
      const auto pv = r.h.values();
      for (std::size_t i = 0; i < nv.size(); ++i) delta = std::max(delta, std::abs(nv[i] - pv[i]));
      r.h = next;
      r.iterations = t;
      if (static_cast<double>(delta) < tolerance) break;
    }
    return r;
  }

  IterationResult<T> operator()(const ad::Tensor<T>& source, std::size_t* clamped = nullptr) const {
    return iterate(source, context(), compute_gamma(source, clamped));
  }

  void collect(const std::string& prefix, ad::ParamList<T>& out) const {
    f_n.collect(ad::join_name(prefix, "f_n"), out);
    f_r.collect(ad::join_name(prefix, "f_r"), out);
    out.push_back({ad::join_name(prefix, "alpha"), alpha});
    out.push_back({ad::join_name(prefix, "u_raw"), u_raw});
    out.push_back({ad::join_name(prefix, "u_weight"), u_weight});
    gate_fg.collect(ad::join_name(prefix, "gate_fg"), out);
    gate_in.collect(ad::join_name(prefix, "gate_in"), out);
    gate_c.collect(ad::join_name(prefix, "gate_c"), out);
    gate_ou.collect(ad::join_name(prefix, "gate_ou"), out);
  }
};

enum class PriorMode { kHolland, kLinear, kNoisy };

struct FlowStats {
  std::size_t iterations_ri = 0;
  std::size_t iterations_ro = 0;
  std::size_t clamped = 0;
};

template <typename T>
struct FlowOutput {
  std::array<ad::Tensor<T>, 4> tokens;  // v, p, ri, ro
  FlowStats stats;
};

template <typename T>
struct DependencyFlow {
  PriorMode mode = PriorMode::kHolland;
  DevEncoder<T> dev;
  PriorApp<T> v_to_ri, p_to_ro, ri_to_ro;  // ri_to_ro only for the noisy variant
  ad::Linear<T> lin_ri, lin_ro;            // only for the linear variant

  DependencyFlow() = default;
  DependencyFlow(std::size_t dev_dim, std::size_t n, std::size_t max_iter, double tol, PriorMode m, Rng& rng)
      : mode(m), dev(dev_dim, n, rng) {
    if (mode == PriorMode::kLinear) {
      lin_ri = ad::Linear<T>(n, n, rng);
      lin_ro = ad::Linear<T>(n, n, rng);
    } else {
      v_to_ri = PriorApp<T>(n, max_iter, tol, rng);
      p_to_ro = PriorApp<T>(n, max_iter, tol, rng);
      if (mode == PriorMode::kNoisy) ri_to_ro = PriorApp<T>(n, max_iter, tol, rng);
    }
  }

  FlowOutput<T> operator()(const ad::Tensor<T>& x_dev, const ad::Tensor<T>& id) const {
    FlowOutput<T> out;
    auto [v, p] = dev(x_dev, id);
    out.tokens[0] = v;
    out.tokens[1] = p;
    if (mode == PriorMode::kLinear) {
      out.tokens[2] = lin_ri(v);
      out.tokens[3] = lin_ro(p);
      return out;
    }
    auto ri = v_to_ri(v, &out.stats.clamped);
    auto ro = p_to_ro(p, &out.stats.clamped);
    out.tokens[2] = ri.h;
    out.stats.iterations_ri = ri.iterations;
    out.stats.iterations_ro = ro.iterations;
    if (mode == PriorMode::kNoisy) {
      // artificial inner-core -> outer-core dependency, averaged with the physical path
      auto extra = ri_to_ro(ri.h, &out.stats.clamped);
      out.tokens[3] = (ro.h + extra.h) * T(0.5);
    } else {
      out.tokens[3] = ro.h;
    }
    return out;
  }

  void collect(const std::string& prefix, ad::ParamList<T>& out) const {
    dev.collect(ad::join_name(prefix, "dev"), out);
    if (mode == PriorMode::kLinear) {
      lin_ri.collect(ad::join_name(prefix, "lin_ri"), out);
      lin_ro.collect(ad::join_name(prefix, "lin_ro"), out);
      return;
    }
    v_to_ri.collect(ad::join_name(prefix, "v_to_ri"), out);
    p_to_ro.collect(ad::join_name(prefix, "p_to_ro"), out);
    if (mode == PriorMode::kNoisy) ri_to_ro.collect(ad::join_name(prefix, "ri_to_ro"), out);
  }
};

}  // namespace idol::model
