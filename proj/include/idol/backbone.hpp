#pragma once

// Encoder backbone: per-frame compact CNNs, an attention-gated recurrent
// fusion over the two frames, and Gaussian sampling of the initial identity
// token from the fused token embedding.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "idol/autodiff/nn.hpp"

namespace idol::model {

namespace ad = idol::ad;

inline constexpr double kSigmaFloor = 1e-4;

struct BackboneConfig {
  std::size_t n = 64;                      // embedding width
  std::size_t channels = 2;                // input channels per frame
  std::size_t frames = 2;
  std::array<std::size_t, 4> widths{16, 32, 64, 64};
  std::size_t cor_dim = 4;
};

// Four blocks of two 3x3 convolutions; the first conv of each block halves
// the resolution. Output tokens are the final spatial positions.
template <typename T>
struct FrameEncoder {
  std::vector<ad::Conv2d<T>> convs;
  ad::Linear<T> to_tokens;

  FrameEncoder() = default;
  FrameEncoder(const BackboneConfig& cfg, Rng& rng) {
    std::size_t in = cfg.channels;
    for (std::size_t w : cfg.widths) {
      convs.emplace_back(in, w, 3, 2, rng);
      convs.emplace_back(w, w, 3, 1, rng);
      in = w;
    }
    to_tokens = ad::Linear<T>(in, cfg.n, rng);
  }

  // x: (B, C, H, W) -> (B, tokens, n)
  ad::Tensor<T> operator()(const ad::Tensor<T>& x) const {
    auto h = x;
    for (const auto& c : convs) h = ad::relu(c(h));
    const std::size_t b = h.dim(0), ch = h.dim(1), l = h.dim(2) * h.dim(3);
    return to_tokens(ad::transpose_last2(ad::reshape(h, {b, ch, l})));
  }

  void collect(const std::string& prefix, ad::ParamList<T>& out) const {
    for (std::size_t i = 0; i < convs.size(); ++i) convs[i].collect(ad::join_name(prefix, "conv" + std::to_string(i)), out);
    to_tokens.collect(ad::join_name(prefix, "to_tokens"), out);
  }
};

// Single-head scaled dot-product self-attention over tokens.
template <typename T>
struct SelfAttention {
  ad::Linear<T> q, k, v;

  SelfAttention() = default;
  SelfAttention(std::size_t n, Rng& rng) : q(n, n, rng, false), k(n, n, rng, false), v(n, n, rng, false) {}

  ad::Tensor<T> operator()(const ad::Tensor<T>& h) const {
    const T scale = T(1) / std::sqrt(static_cast<T>(h.dim(2)));
    auto scores = ad::bmm(q(h), k(h), false, true) * scale;
    return ad::bmm(ad::softmax_last(scores), v(h));
  }

  void collect(const std::string& prefix, ad::ParamList<T>& out) const {
    q.collect(ad::join_name(prefix, "q"), out);
    k.collect(ad::join_name(prefix, "k"), out);
    v.collect(ad::join_name(prefix, "v"), out);
  }
};

template <typename T>
struct RecurrentState {
  ad::Tensor<T> h;
  ad::Tensor<T> c;
};

// LSTM cell applied per token. Gate inputs are [x_t, SelfAttn(H), F_cor].
template <typename T>
struct AttentionLstm {
  SelfAttention<T> attention;
  ad::Linear<T> gates;  // 3n -> 4n (input, forget, output, candidate)

  AttentionLstm() = default;
  AttentionLstm(std::size_t n, Rng& rng) : attention(n, rng), gates(3 * n, 4 * n, rng) {}

  RecurrentState<T> step(const ad::Tensor<T>& x, const RecurrentState<T>& s, const ad::Tensor<T>& cor_tokens) const {
    const std::size_t n = x.dim(2);
    auto z = gates(ad::concat<T>({x, attention(s.h), cor_tokens}, 2));
    auto i = ad::sigmoid(ad::narrow(z, 2, 0, n));
    auto f = ad::sigmoid(ad::narrow(z, 2, n, n));
    auto o = ad::sigmoid(ad::narrow(z, 2, 2 * n, n));
    auto g = ad::tanh(ad::narrow(z, 2, 3 * n, n));
    RecurrentState<T> next;
    next.c = f * s.c + i * g;
    next.h = o * ad::tanh(next.c);
    return next;
  }

  void collect(const std::string& prefix, ad::ParamList<T>& out) const {
    attention.collect(ad::join_name(prefix, "attention"), out);
    gates.collect(ad::join_name(prefix, "gates"), out);
  }
};

template <typename T>
struct IdentitySample {
  ad::Tensor<T> id;     // (B, n)
  ad::Tensor<T> mu;     // (B, n)
  ad::Tensor<T> sigma;  // (B, n)
};

// mu and sigma over the token axis; sigma = sqrt(var + floor^2).
template <typename T>
IdentitySample<T> sample_identity(const ad::Tensor<T>& f_emb, bool train, Rng* rng) {
  if (f_emb.rank() != 3) throw ShapeError("sample_identity: expected (batch, tokens, n)");
  IdentitySample<T> s;
  s.mu = ad::mean_axis(f_emb, 1);
  auto var = ad::mean_axis(ad::square(f_emb - ad::mean_axis(f_emb, 1, true)), 1);
  s.sigma = ad::sqrt(var + static_cast<T>(kSigmaFloor * kSigmaFloor));
  if (!train) {
    s.id = s.mu;
    return s;
  }
  if (!rng) throw ValidationError("sample_identity: training mode needs an RNG");
  std::vector<T> eps(s.mu.size());
  for (auto& e : eps) e = static_cast<T>(rng->normal());
  s.id = s.mu + s.sigma * ad::Tensor<T>::constant(s.mu.shape(), std::move(eps));
  return s;
}

template <typename T>
struct Backbone {
  BackboneConfig cfg;
  std::vector<FrameEncoder<T>> encoders;  // separate weights per frame
  ad::Linear<T> cor_embed;
  AttentionLstm<T> fusion;

  Backbone() = default;
  Backbone(const BackboneConfig& c, Rng& rng) : cfg(c) {
    for (std::size_t f = 0; f < cfg.frames; ++f) encoders.emplace_back(cfg, rng);
    cor_embed = ad::Linear<T>(cfg.cor_dim, cfg.n, rng);
    fusion = AttentionLstm<T>(cfg.n, rng);
  }

  // ir: (B, frames, C, H, W) -> per-frame (B, tokens, n)
  std::vector<ad::Tensor<T>> encode_frames(const ad::Tensor<T>& ir) const {
    if (ir.rank() != 5 || ir.dim(1) != cfg.frames || ir.dim(2) != cfg.channels) {
      throw ShapeError("encode_frames: expected (batch, " + std::to_string(cfg.frames) + ", " +
                       std::to_string(cfg.channels) + ", h, w), got " + ad::shape_str(ir.shape()));
    }
    const std::size_t b = ir.dim(0), c = ir.dim(2), h = ir.dim(3), w = ir.dim(4);
    std::vector<ad::Tensor<T>> out;
    for (std::size_t f = 0; f < cfg.frames; ++f) out.push_back(encoders[f](ad::reshape(ad::narrow(ir, 1, f, 1), {b, c, h, w})));
    return out;
  }

  ad::Tensor<T> embed_cor(const ad::Tensor<T>& cor) const { return cor_embed(cor); }

  // cor_features: (B, n), concatenated into every recurrent update.
  ad::Tensor<T> fuse_spatiotemporal(const std::vector<ad::Tensor<T>>& frames, const ad::Tensor<T>& cor_features) const {
    const auto& first = frames.at(0);
    if (cor_features.rank() != 2 || cor_features.dim(1) != first.dim(2) || cor_features.dim(0) != first.dim(0)) {
      throw ShapeError("fuse_spatiotemporal: cor features " + ad::shape_str(cor_features.shape()) +
                       " do not match frame tokens " + ad::shape_str(first.shape()));
    }
    const std::size_t b = first.dim(0), l = first.dim(1), n = first.dim(2);
    auto cor_tokens = ad::broadcast_to(ad::reshape(cor_features, {b, 1, n}), {b, l, n});
    RecurrentState<T> s{ad::Tensor<T>::zeros({b, l, n}), ad::Tensor<T>::zeros({b, l, n})};
    for (const auto& x : frames) s = fusion.step(x, s, cor_tokens);
    return s.h;
  }

  void collect(const std::string& prefix, ad::ParamList<T>& out) const {
    for (std::size_t f = 0; f < encoders.size(); ++f) encoders[f].collect(ad::join_name(prefix, "frame" + std::to_string(f)), out);
    cor_embed.collect(ad::join_name(prefix, "cor_embed"), out);
    fusion.collect(ad::join_name(prefix, "fusion"), out);
  }
};

}  // namespace idol::model
