#pragma once

// Full estimator: backbone -> dependency flow (task-specific identities) and
// correlation bridge (shared identity) -> four estimation heads.

#include <array>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "idol/backbone.hpp"
#include "idol/corr_bridge.hpp"
#include "idol/dependency_flow.hpp"
#include "idol/heads_loss.hpp"

namespace idol::model {

struct AblationFlags {
  bool no_id_sp = false;
  bool no_id_sh = false;
  bool linear_id_sp = false;
  bool noisy_prior = false;
  bool random_dk_graph = false;

  bool operator==(const AblationFlags&) const = default;
};

struct IdRatio {
  std::size_t shared = 1;
  std::size_t specific = 1;

  static IdRatio parse(const std::string& s) {
    const auto colon = s.find(':');
    IdRatio r;
    try {
      if (colon == std::string::npos) throw std::invalid_argument(s);
      r.shared = std::stoul(s.substr(0, colon));
      r.specific = std::stoul(s.substr(colon + 1));
    } catch (const std::exception&) {
      throw ValidationError("id_ratio must look like 'shared:specific', got '" + s + "'");
    }
    if (r.shared == 0 || r.specific == 0) throw ValidationError("id_ratio parts must be positive");
    return r;
  }
  std::string str() const { return std::to_string(shared) + ":" + std::to_string(specific); }
};

struct ModelConfig {
  std::size_t n = 64;
  std::size_t k = 4;             // mixture has k+1 components
  std::size_t max_iterations = 8;
  double tolerance = 1e-3;
  std::size_t graph_width = 32;
  std::size_t attention_heads = 4;
  IdRatio id_ratio;
  AblationFlags flags;
  std::uint64_t graph_seed = 0;  // for the randomized graph
  std::size_t grid = 64;

  std::size_t specific_width() const { return n * id_ratio.specific / std::max(id_ratio.shared, id_ratio.specific); }
  std::size_t shared_width() const { return n * id_ratio.shared / std::max(id_ratio.shared, id_ratio.specific); }
  std::size_t tokens() const { return (grid / 16) * (grid / 16); }

  void validate() const {
    if (n < 4 || n % attention_heads) throw ValidationError("n must be >= 4 and divisible by the attention head count");
    if (grid < 16 || grid % 16) throw ValidationError("grid must be a positive multiple of 16");
    if (max_iterations < 1) throw ValidationError("R must be >= 1");
    if (!(tolerance > 0)) throw ValidationError("tau must be > 0");
    if (flags.linear_id_sp && flags.noisy_prior) throw ValidationError("linear_id_sp and noisy_prior are exclusive");
    if (specific_width() == 0 || shared_width() == 0) throw ValidationError("id_ratio leaves an empty identity");
  }

  PriorMode prior_mode() const {
    if (flags.linear_id_sp) return PriorMode::kLinear;
    if (flags.noisy_prior) return PriorMode::kNoisy;
    return PriorMode::kHolland;
  }
};

inline nlohmann::json to_json(const AblationFlags& f) {
  return {{"no_id_sp", f.no_id_sp},
          {"no_id_sh", f.no_id_sh},
          {"linear_id_sp", f.linear_id_sp},
          {"noisy_prior", f.noisy_prior},
          {"random_dk_graph", f.random_dk_graph}};
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"n", c.n},
          {"k", c.k},
          {"R", c.max_iterations},
          {"tau", c.tolerance},
          {"graph_width", c.graph_width},
          {"attention_heads", c.attention_heads},
          {"id_ratio", c.id_ratio.str()},
          {"flags", to_json(c.flags)},
          {"graph_seed", c.graph_seed},
          {"grid", c.grid},
          {"tokens", c.tokens()},
          {"block_widths", BackboneConfig{}.widths}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n = j.at("n");
  c.k = j.at("k");
  c.max_iterations = j.at("R");
  c.tolerance = j.at("tau");
  c.graph_width = j.at("graph_width");
  c.attention_heads = j.at("attention_heads");
  c.id_ratio = IdRatio::parse(j.at("id_ratio"));
  const auto& f = j.at("flags");
  c.flags = {f.at("no_id_sp"), f.at("no_id_sh"), f.at("linear_id_sp"), f.at("noisy_prior"), f.at("random_dk_graph")};
  c.graph_seed = j.at("graph_seed");
  c.grid = j.at("grid");
  return c;
}

template <typename T>
struct Batch {
  ad::Tensor<T> ir;      // (B, 2, 2, H, W)
  ad::Tensor<T> dev;     // (B, 2) standardized
  ad::Tensor<T> cor;     // (B, 4) standardized
  ad::Tensor<T> labels;  // (B, 4) standardized
  std::size_t size() const { return ir.dim(0); }
};

template <typename T>
struct ForwardOutput {
  ad::Tensor<T> pred;                       // (B, 4) standardized
  ad::Tensor<T> f_emb;                      // (B, tokens, n)
  IdentitySample<T> initial;
  std::array<ad::Tensor<T>, 4> specific;   // undefined when disabled
  ad::Tensor<T> shared;                     // undefined when disabled
  FlowStats flow;
};

template <typename T>
struct IdolModel {
  ModelConfig cfg;
  Backbone<T> backbone;
  std::optional<ad::Linear<T>> to_specific, to_shared;  // width adapters for uneven id ratios
  DependencyFlow<T> flow;
  CorrBridge<T> bridge;
  std::array<EstimationHead<T>, 4> heads;

  IdolModel() = default;
  IdolModel(const ModelConfig& c, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(hash_seed({seed, 0x1D01ULL}));
    BackboneConfig bc;
    bc.n = cfg.n;
    backbone = Backbone<T>(bc, rng);
    const std::size_t sp = cfg.specific_width(), sh = cfg.shared_width();
    if (!cfg.flags.no_id_sp) {
      if (sp != cfg.n) to_specific = ad::Linear<T>(cfg.n, sp, rng);
      flow = DependencyFlow<T>(2, sp, cfg.max_iterations, cfg.tolerance, cfg.prior_mode(), rng);
    }
    if (!cfg.flags.no_id_sh) {
      if (sh != cfg.n) to_shared = ad::Linear<T>(cfg.n, sh, rng);
      const auto m = cfg.flags.random_dk_graph ? randomized_dark_knowledge(cfg.graph_seed) : kDarkKnowledge;
      bridge = CorrBridge<T>(cfg.graph_width, sh, cfg.k, m, rng);
    }
    for (auto& h : heads)
      h = EstimationHead<T>(cfg.n, cfg.attention_heads, cfg.tokens(), cfg.flags.no_id_sp ? 0 : sp,
                            cfg.flags.no_id_sh ? 0 : sh, rng);
  }

  // One identity draw per forward pass, reused by every consumer.
  ForwardOutput<T> forward(const Batch<T>& batch, bool train, Rng* rng) const {
    ForwardOutput<T> out;
    auto frames = backbone.encode_frames(batch.ir);
    out.f_emb = backbone.fuse_spatiotemporal(frames, backbone.embed_cor(batch.cor));
    out.initial = sample_identity(out.f_emb, train, rng);
    const auto& id = out.initial.id;
    if (!cfg.flags.no_id_sp) {
      auto f = flow(batch.dev, to_specific ? (*to_specific)(id) : id);
      out.specific = f.tokens;
      out.flow = f.stats;
    }
    if (!cfg.flags.no_id_sh) out.shared = bridge(batch.cor, to_shared ? (*to_shared)(id) : id);
    std::vector<ad::Tensor<T>> cols;
    for (std::size_t t = 0; t < 4; ++t) {
      const ad::Tensor<T>* sp = out.specific[t].defined() ? &out.specific[t] : nullptr;
      const ad::Tensor<T>* sh = out.shared.defined() ? &out.shared : nullptr;
      cols.push_back(ad::reshape(heads[t](sp, sh, out.f_emb), {batch.size(), 1}));
    }
    out.pred = ad::concat<T>(cols, 1);
    return out;
  }

  LossBreakdown<T> loss(const ForwardOutput<T>& out, const Batch<T>& batch, double lambda) const {
    std::array<ad::Tensor<T>, 5> ids{out.shared, out.specific[0], out.specific[1], out.specific[2], out.specific[3]};
    return loss_total(out.pred, batch.labels, ids, lambda);
  }

  ad::ParamList<T> parameters() const {
    ad::ParamList<T> p;
    backbone.collect("backbone", p);
    if (to_specific) to_specific->collect("to_specific", p);
    if (to_shared) to_shared->collect("to_shared", p);
    if (!cfg.flags.no_id_sp) flow.collect("flow", p);
    if (!cfg.flags.no_id_sh) bridge.collect("bridge", p);
    for (std::size_t t = 0; t < 4; ++t) heads[t].collect("head_" + std::string(synth_task_name(t)), p);
    return p;
  }

  static const char* synth_task_name(std::size_t t) {
    static constexpr std::array<const char*, 4> names{"v", "p", "ri", "ro"};
    return names[t];
  }
};

}  // namespace idol::model
