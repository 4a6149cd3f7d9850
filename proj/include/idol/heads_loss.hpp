#pragma once

// Identity-oriented estimation heads and the composite training loss.
//
// Each head reads the token sequence [id_sp_i; id_sh; F_emb], runs one
// pre-norm transformer block whose attention logits carry a learned additive
// token-pair bias, mean-pools, and regresses a scalar through three linear
// layers.

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "idol/autodiff/nn.hpp"

namespace idol::model {

inline constexpr double kDefaultLambda = 0.1;

template <typename T>
struct EstimationHead {
  std::size_t width = 0;
  std::size_t heads = 4;
  std::size_t tokens = 0;
  std::optional<ad::Linear<T>> proj_sp, proj_sh;  // present when the identity width differs
  ad::LayerNorm<T> norm1, norm2;
  ad::Linear<T> q, k, v, o;
  ad::Tensor<T> pair_bias;  // (tokens, tokens), shared across heads
  ad::Linear<T> ffn1, ffn2;
  ad::Linear<T> mlp1, mlp2, mlp3;

  EstimationHead() = default;
  // sp_width / sh_width = 0 when that identity is not fed to the head.
  EstimationHead(std::size_t d, std::size_t n_heads, std::size_t emb_tokens, std::size_t sp_width,
                 std::size_t sh_width, Rng& rng)
      : width(d), heads(n_heads) {
    if (d % n_heads != 0) throw ValidationError("head width must be divisible by the number of attention heads");
    tokens = emb_tokens + (sp_width ? 1 : 0) + (sh_width ? 1 : 0);
    if (sp_width && sp_width != d) proj_sp = ad::Linear<T>(sp_width, d, rng);
    if (sh_width && sh_width != d) proj_sh = ad::Linear<T>(sh_width, d, rng);
    norm1 = ad::LayerNorm<T>(d);
    norm2 = ad::LayerNorm<T>(d);
    q = ad::Linear<T>(d, d, rng);
    k = ad::Linear<T>(d, d, rng);
    v = ad::Linear<T>(d, d, rng);
    o = ad::Linear<T>(d, d, rng);
    pair_bias = ad::zero_param<T>({tokens, tokens});
    ffn1 = ad::Linear<T>(d, 2 * d, rng);
    ffn2 = ad::Linear<T>(2 * d, d, rng);
    mlp1 = ad::Linear<T>(d, d, rng);
    mlp2 = ad::Linear<T>(d, d / 2, rng);
    mlp3 = ad::Linear<T>(d / 2, 1, rng);
  }

  ad::Tensor<T> sequence(const ad::Tensor<T>* id_sp, const ad::Tensor<T>* id_sh, const ad::Tensor<T>& f_emb) const {
    const std::size_t b = f_emb.dim(0);
    std::vector<ad::Tensor<T>> parts;
    if (id_sp) parts.push_back(ad::reshape(proj_sp ? (*proj_sp)(*id_sp) : *id_sp, {b, 1, width}));
    if (id_sh) parts.push_back(ad::reshape(proj_sh ? (*proj_sh)(*id_sh) : *id_sh, {b, 1, width}));
    parts.push_back(f_emb);
    auto x = parts.size() == 1 ? f_emb : ad::concat<T>(parts, 1);
    if (x.dim(1) != tokens || x.dim(2) != width) {
      throw ShapeError("estimate: token sequence " + ad::shape_str(x.shape()) + " does not match head configuration");
    }
    return x;
  }

  ad::Tensor<T> attention(const ad::Tensor<T>& x) const {
    const std::size_t dh = width / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    auto qx = q(x), kx = k(x), vx = v(x);
    std::vector<ad::Tensor<T>> outs;
    for (std::size_t h = 0; h < heads; ++h) {
      auto logits = ad::bmm(ad::narrow(qx, 2, h * dh, dh), ad::narrow(kx, 2, h * dh, dh), false, true) * scale + pair_bias;
      outs.push_back(ad::bmm(ad::softmax_last(logits), ad::narrow(vx, 2, h * dh, dh)));
    }
    return o(heads == 1 ? outs[0] : ad::concat<T>(outs, 2));
  }

  // Returns (B,) standardized predictions.
  ad::Tensor<T> operator()(const ad::Tensor<T>* id_sp, const ad::Tensor<T>* id_sh, const ad::Tensor<T>& f_emb) const {
    auto x = sequence(id_sp, id_sh, f_emb);
    x = x + attention(norm1(x));
    x = x + ffn2(ad::relu(ffn1(norm2(x))));
    auto pooled = ad::mean_axis(x, 1);
    auto y = mlp3(ad::relu(mlp2(ad::relu(mlp1(pooled)))));
    return ad::reshape(y, {f_emb.dim(0)});
  }

  void collect(const std::string& prefix, ad::ParamList<T>& out) const {
    if (proj_sp) proj_sp->collect(ad::join_name(prefix, "proj_sp"), out);
    if (proj_sh) proj_sh->collect(ad::join_name(prefix, "proj_sh"), out);
    norm1.collect(ad::join_name(prefix, "norm1"), out);
    norm2.collect(ad::join_name(prefix, "norm2"), out);
    q.collect(ad::join_name(prefix, "q"), out);
    k.collect(ad::join_name(prefix, "k"), out);
    v.collect(ad::join_name(prefix, "v"), out);
    o.collect(ad::join_name(prefix, "o"), out);
    out.push_back({ad::join_name(prefix, "pair_bias"), pair_bias});
    ffn1.collect(ad::join_name(prefix, "ffn1"), out);
    ffn2.collect(ad::join_name(prefix, "ffn2"), out);
    mlp1.collect(ad::join_name(prefix, "mlp1"), out);
    mlp2.collect(ad::join_name(prefix, "mlp2"), out);
    mlp3.collect(ad::join_name(prefix, "mlp3"), out);
  }
};

// Rows scaled to unit L2 norm; all-zero rows stay zero.
template <typename T>
ad::Tensor<T> normalize_rows(const ad::Tensor<T>& x) {
  auto sq = ad::clamp_abs_min(ad::sum_axis(ad::square(x), 1, true), static_cast<T>(1e-24));
  return x / ad::sqrt(sq);
}

// (B, B) Gram of row-normalized x.
template <typename T>
ad::Tensor<T> normalized_gram(const ad::Tensor<T>& x) {
  const std::size_t b = x.dim(0), w = x.dim(1);
  auto u = ad::reshape(normalize_rows(x), {1, b, w});
  return ad::reshape(ad::bmm(u, u, false, true), {b, b});
}

// Mean absolute difference between the batch Grams of id (B, n) and y (B, m).
template <typename T>
ad::Tensor<T> loss_idc(const ad::Tensor<T>& id, const ad::Tensor<T>& y) {
  if (id.rank() != 2 || y.rank() != 2 || id.dim(0) != y.dim(0)) {
    throw ShapeError("loss_idc: expected (batch, n) and (batch, m) with equal batch");
  }
  return ad::mean(ad::abs(normalized_gram(id) - normalized_gram(y)));
}

inline constexpr std::array<const char*, 5> kIdentityNames{"sh", "v", "p", "ri", "ro"};

template <typename T>
struct LossBreakdown {
  ad::Tensor<T> total;
  std::array<double, 4> task{};      // standardized MAE per task (v, p, ri, ro)
  std::array<double, 5> identity{};  // sh, v, p, ri, ro; 0 when the identity is absent
  double lambda = kDefaultLambda;
  double total_value = 0.0;
};

// pred, y: (B, 4) standardized. identities: shared then per-task tokens; any
// undefined tensor is skipped.
template <typename T>
LossBreakdown<T> loss_total(const ad::Tensor<T>& pred, const ad::Tensor<T>& y, const std::array<ad::Tensor<T>, 5>& identities,
                            double lambda) {
  if (!(lambda >= 0)) throw ValidationError("lambda must be >= 0");
  if (pred.shape() != y.shape() || pred.rank() != 2 || pred.dim(1) != 4) throw ShapeError("loss_total: expected (batch, 4)");
  LossBreakdown<T> out;
  out.lambda = lambda;
  ad::Tensor<T> estimation, constraint;
  for (std::size_t t = 0; t < 4; ++t) {
    auto term = ad::mean(ad::abs(ad::narrow(pred, 1, t, 1) - ad::narrow(y, 1, t, 1)));
    out.task[t] = static_cast<double>(term.item());
    estimation = estimation.defined() ? estimation + term : term;
  }
  for (std::size_t i = 0; i < 5; ++i) {
    if (!identities[i].defined()) continue;
    auto target = i == 0 ? y : ad::narrow(y, 1, i - 1, 1);
    auto term = loss_idc(identities[i], target);
    out.identity[i] = static_cast<double>(term.item());
    constraint = constraint.defined() ? constraint + term : term;
  }
  out.total = constraint.defined() && lambda > 0 ? estimation + constraint * static_cast<T>(lambda) : estimation;
  out.total_value = static_cast<double>(out.total.item());
  return out;
}

}  // namespace idol::model
