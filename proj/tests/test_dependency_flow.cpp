#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "idol/dependency_flow.hpp"

using namespace idol;
using idol::ad::Tensor;
using idol::testing::grad_check;
using idol::testing::random_tensor;

namespace {

double softplus_inverse(double y) { return std::log(std::expm1(y)); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double sp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// Dense row-major helpers for the scalar oracles.
using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor<double>& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t[i * t.dim(1) + j];
  return m;
}

// y = x W + b for one row.
std::vector<double> affine(const std::vector<double>& x, const ad::Linear<double>& l) {
  const std::size_t in = l.in_features(), out = l.out_features();
  std::vector<double> y(out, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    double acc = l.bias.defined() ? l.bias[o] : 0.0;
    for (std::size_t i = 0; i < in; ++i) acc += x[i] * l.weight[i * out + o];
    y[o] = acc;
  }
  return y;
}

std::vector<double> cat(std::initializer_list<std::vector<double>> parts) {
  std::vector<double> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

}  // namespace

TEST(DevEncoder, ZeroInitIsIdentityModulation) {
  Rng rng(1);
  model::DevEncoder<double> dev(2, 6, rng);
  auto x = random_tensor({3, 2}, rng);
  auto id = random_tensor({3, 6}, rng);
  const auto [v, p] = dev(x, id);
  EXPECT_EQ(ad::max_abs_diff(v, id), 0.0);
  EXPECT_EQ(ad::max_abs_diff(p, id), 0.0);
}

TEST(DevEncoder, ZeroIdentityGivesMu) {
  Rng rng(2);
  model::DevEncoder<double> dev(2, 4, rng);
  dev.out = ad::Linear<double>(4, 16, rng);
  auto x = random_tensor({2, 2}, rng);
  const auto [v, p] = dev(x, Tensor<double>::zeros({2, 4}));
  auto raw = dev.out(ad::relu(dev.hidden(x)));
  EXPECT_EQ(ad::max_abs_diff(v, ad::narrow(raw, 1, 0, 4)), 0.0);
  EXPECT_EQ(ad::max_abs_diff(p, ad::narrow(raw, 1, 8, 4)), 0.0);
}

TEST(DevEncoder, GradientWrtDevelopmentFactors) {
  Rng rng(3);
  model::DevEncoder<double> dev(2, 5, rng);
  dev.out = ad::Linear<double>(5, 20, rng);
  auto x = random_tensor({3, 2}, rng);
  auto id = random_tensor({3, 5}, rng);
  auto probe = random_tensor({3, 5}, rng);
  auto r = grad_check({x, id}, [&] {
    const auto [v, p] = dev(x, id);
    return ad::sum(v * probe) + ad::sum(ad::square(p));
  });
  EXPECT_LT(r.rel_error, 1e-4);
}

TEST(ComputeGamma, UnitDenominatorGivesAlpha) {
  Rng rng(4);
  model::PriorApp<double> pa(3, 8, 1e-3, rng);
  pa.f_n.zero_();
  pa.f_r.zero_();
  for (auto& b : pa.f_n.bias.mutable_values()) b = softplus_inverse(std::exp(2.0) - model::kLogEps);
  for (auto& b : pa.f_r.bias.mutable_values()) b = softplus_inverse(std::exp(1.0) - model::kLogEps);
  pa.alpha.mutable_values()[0] = 1.7;
  const auto g = pa.compute_gamma(random_tensor({2, 3}, rng));
  for (double v : g.values()) EXPECT_NEAR(v, 1.7, 1e-12);
  pa.alpha.mutable_values()[0] = 0.0;
  const auto zero = pa.compute_gamma(random_tensor({2, 3}, rng));
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);
}

TEST(ComputeGamma, MatchesScalarOracle) {
  Rng rng(5);
  model::PriorApp<double> pa(4, 8, 1e-3, rng);
  pa.alpha.mutable_values()[0] = 0.8;
  auto id = random_tensor({3, 4}, rng);
  std::size_t clamped = 0;
  const auto g = pa.compute_gamma(id, &clamped);
  const auto rows = to_mat(id);
  std::size_t expected_clamps = 0;
  for (std::size_t b = 0; b < 3; ++b) {
    const auto fn = affine(rows[b], pa.f_n), fr = affine(rows[b], pa.f_r);
    for (std::size_t j = 0; j < 4; ++j) {
      double den = std::log(sp(fn[j]) + 1e-6) - std::log(sp(fr[j]) + 1e-6);
      if (std::abs(den) < 1e-4) {
        den = den < 0 ? -1e-4 : 1e-4;
        ++expected_clamps;
      }
      EXPECT_NEAR(g[b * 4 + j], 0.8 / den, 1e-12 * std::max(1.0, std::abs(0.8 / den)));
    }
  }
  EXPECT_EQ(clamped, expected_clamps);
}

TEST(ComputeGamma, GuardCountsClampsInsteadOfThrowing) {
  Rng rng(6);
  model::PriorApp<double> pa(3, 8, 1e-3, rng);
  pa.f_r = pa.f_n;  // identical maps: every denominator is exactly 0
  std::size_t clamped = 0;
  const auto g = pa.compute_gamma(random_tensor({2, 3}, rng), &clamped);
  EXPECT_EQ(clamped, 6u);
  EXPECT_TRUE(ad::all_finite(g));
}

TEST(GraphRefine, NoEdgesIsSelfLoopOnly) {
  Rng rng(7);
  auto u = random_tensor({3, 4}, rng);
  auto w = random_tensor({4, 4}, rng);
  const std::vector<std::vector<double>> none(3, std::vector<double>(3, 0.0));
  const auto out = model::graph_refine(u, none, w, true);
  const auto expected = ad::mean_axis(ad::tanh(ad::linear(u, w)), 0);
  EXPECT_LT(ad::max_abs_diff(out, expected), 1e-15);
}

TEST(GraphRefine, TwoNodeClosedForm) {
  auto u = Tensor<double>::constant({2, 2}, {1.0, 2.0, 3.0, 5.0});
  auto w = Tensor<double>::constant({2, 2}, {1.0, 0.0, 0.0, 1.0});
  const auto a = model::normalized_adjacency({{0, 1}, {1, 0}});
  for (double v : a) EXPECT_DOUBLE_EQ(v, 0.5);
  const auto out = model::graph_refine(u, {{0, 1}, {1, 0}}, w, false);
  // both rows become the node average (2, 3.5); pooling keeps it
  EXPECT_DOUBLE_EQ(out[0], 2.0);
  EXPECT_DOUBLE_EQ(out[1], 3.5);
}

TEST(GraphRefine, MatchesDenseOracle) {
  Rng rng(8);
  auto u = random_tensor({4, 5}, rng);
  auto w = random_tensor({5, 5}, rng);
  const auto edges = model::prior_node_edges();
  const auto out = model::graph_refine(u, edges, w, true);
  std::vector<double> deg(4, 1.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) deg[i] += edges[i][j];
  const auto um = to_mat(u), wm = to_mat(w);
  std::vector<double> pooled(5, 0.0);
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<double> mixed(5, 0.0);
    for (std::size_t j = 0; j < 4; ++j) {
      const double a = (edges[i][j] + (i == j)) / std::sqrt(deg[i] * deg[j]);
      for (std::size_t c = 0; c < 5; ++c) mixed[c] += a * um[j][c];
    }
    for (std::size_t c = 0; c < 5; ++c) {
      double acc = 0;
      for (std::size_t r = 0; r < 5; ++r) acc += mixed[r] * wm[r][c];
      pooled[c] += std::tanh(acc) / 4.0;
    }
  }
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(out[c], pooled[c], 1e-12);
  // the prior-node graph is a symmetric 4-cycle without self edges
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(edges[i][i], 0.0);
    EXPECT_EQ(deg[i], 3.0);
  }
}

TEST(PriorIterate, CapOfOneRunsOneStep) {
  Rng rng(9);
  model::PriorApp<double> pa(4, 1, 1e9, rng);
  auto h0 = random_tensor({2, 4}, rng);
  const auto r = pa(h0);
  EXPECT_EQ(r.iterations, 1u);
  model::PriorApp<double> strict(4, 1, 1e-30, rng);
  EXPECT_EQ(strict(h0).iterations, 1u);
}

TEST(PriorIterate, ZeroWeightsConvergeToZeroAtStepTwo) {
  Rng rng(10);
  model::PriorApp<double> pa(4, 8, 1e-3, rng);
  for (auto* l : {&pa.gate_fg, &pa.gate_in, &pa.gate_c, &pa.gate_ou}) l->zero_();
  auto h0 = random_tensor({3, 4}, rng);
  const auto r = pa(h0);
  EXPECT_EQ(r.iterations, 2u);
  for (double v : r.h.values()) EXPECT_EQ(v, 0.0);
}

TEST(PriorIterate, MatchesScalarOracle) {
  Rng rng(11);
  const std::size_t n = 4;
  model::PriorApp<double> pa(n, 8, 1e-3, rng);
  auto h0 = random_tensor({2, n}, rng, 0.5);
  const auto u = pa.context();
  const auto gamma = pa.compute_gamma(h0);
  const auto r = pa.iterate(h0, u, gamma);
  const std::vector<double> uv(u.values().begin(), u.values().end());
  auto h = to_mat(h0);
  const auto g = to_mat(gamma);
  Mat c(2, std::vector<double>(n, 0.0));
  std::size_t steps = 0;
  for (std::size_t t = 1; t <= 8; ++t) {
    double delta = 0;
    Mat next = h;
    for (std::size_t b = 0; b < 2; ++b) {
      const auto hg = cat({h[b], g[b]}), hgu = cat({h[b], g[b], uv});
      const auto zf = affine(hgu, pa.gate_fg), zi = affine(hg, pa.gate_in), zc = affine(hg, pa.gate_c),
                 zo = affine(hgu, pa.gate_ou);
      for (std::size_t j = 0; j < n; ++j) {
        c[b][j] = c[b][j] * sigmoid(zf[j]) + sigmoid(zi[j]) * std::tanh(zc[j]);
        next[b][j] = std::tanh(c[b][j]) * sigmoid(zo[j]);
        delta = std::max(delta, std::abs(next[b][j] - h[b][j]));
      }
    }
    h = next;
    steps = t;
    if (delta < 1e-3) break;
  }
  EXPECT_EQ(r.iterations, steps);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(r.h[b * n + j], h[b][j], 1e-12);
}

TEST(PriorIterate, TerminatesAndStaysBoundedOverRandomParameters) {
  Rng rng(12);
  ad::NoGradGuard guard;
  std::size_t worst = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    model::PriorApp<double> pa(3, 8, 1e-3, rng);
    auto h0 = random_tensor({2, 3}, rng, 2.0);
    const auto r = pa(h0);
    worst = std::max(worst, r.iterations);
    ASSERT_GE(r.iterations, 1u);
    ASSERT_LE(r.iterations, 8u);
    for (double v : r.h.values()) {
      ASSERT_GT(v, -1.0);
      ASSERT_LT(v, 1.0);
    }
  }
  EXPECT_LE(worst, 8u);
}

TEST(PriorIterate, GradientThroughDynamicIterationCount) {
  Rng rng(13);
  model::PriorApp<double> pa(4, 8, 1e-3, rng);
  auto h0 = random_tensor({2, 4}, rng);
  auto probe = random_tensor({2, 4}, rng);
  const auto steps = pa(h0).iterations;
  EXPECT_GT(steps, 1u);
  auto r = grad_check({h0, pa.alpha, pa.u_raw, pa.gate_fg.weight, pa.f_n.weight},
                      [&] { return ad::sum(pa(h0).h * probe); });
  EXPECT_LT(r.rel_error, 1e-4);
}

TEST(DependencyFlow, ShapesAndModes) {
  Rng rng(14);
  auto x = random_tensor({2, 2}, rng);
  auto id = random_tensor({2, 8}, rng);
  for (auto mode : {model::PriorMode::kHolland, model::PriorMode::kLinear, model::PriorMode::kNoisy}) {
    model::DependencyFlow<double> flow(2, 8, 8, 1e-3, mode, rng);
    const auto out = flow(x, id);
    for (const auto& t : out.tokens) EXPECT_EQ(t.shape(), (ad::Shape{2, 8}));
    if (mode != model::PriorMode::kLinear) {
      EXPECT_GE(out.stats.iterations_ri, 1u);
      EXPECT_GE(out.stats.iterations_ro, 1u);
    }
  }
}

TEST(DependencyFlow, DetachedPressureTokenCutsDevGradient) {
  Rng rng(15);
  model::DependencyFlow<double> flow(2, 6, 8, 1e-3, model::PriorMode::kHolland, rng);
  flow.dev.out = ad::Linear<double>(6, 24, rng);
  auto x = random_tensor({2, 2}, rng);
  auto id = random_tensor({2, 6}, rng);
  const auto [v, p] = flow.dev(x, id);
  auto ro = flow.p_to_ro(ad::detach(p)).h;
  ad::sum(ro).backward();
  ad::ParamList<double> dev_params;
  flow.dev.collect("dev", dev_params);
  for (const auto& np : dev_params)
    for (double g : np.tensor.grad()) EXPECT_EQ(g, 0.0) << np.name;
  // without the detach the same path does reach the encoder
  for (auto& np : dev_params) np.tensor.zero_grad();
  const auto [v2, p2] = flow.dev(x, id);
  ad::sum(flow.p_to_ro(p2).h).backward();
  double total = 0;
  for (const auto& np : dev_params)
    for (double g : np.tensor.grad()) total += std::abs(g);
  EXPECT_GT(total, 0.0);
}

TEST(DependencyFlow, EndToEndGradient) {
  Rng rng(16);
  model::DependencyFlow<double> flow(2, 8, 8, 1e-3, model::PriorMode::kHolland, rng);
  flow.dev.out = ad::Linear<double>(8, 32, rng);
  auto x = random_tensor({2, 2}, rng);
  auto id = random_tensor({2, 8}, rng);
  auto probe = random_tensor({2, 8}, rng);
  auto r = grad_check({x, id, flow.dev.hidden.weight, flow.p_to_ro.gate_in.weight, flow.v_to_ri.f_r.weight}, [&] {
    const auto out = flow(x, id);
    auto loss = ad::sum(out.tokens[0] * probe);
    for (std::size_t t = 1; t < 4; ++t) loss = loss + ad::sum(out.tokens[t] * probe);
    return loss;
  });
  EXPECT_LT(r.rel_error, 1e-4);
}
