#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "idol/autodiff/ops.hpp"
#include "idol/rng.hpp"

namespace idol::ad {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
Tensor<T> uniform_param(Shape shape, double bound, Rng& rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> normal_param(Shape shape, double stddev, Rng& rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> zero_param(Shape shape) {
  return Tensor<T>::parameter(shape, std::vector<T>(numel(shape), T(0)));
}

// y = x W + b with W stored (in, out).
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = uniform_param<T>({in, out}, bound, rng);
    if (with_bias) bias = uniform_param<T>({out}, bound, rng);
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void zero_() {
    for (auto& v : weight.mutable_values()) v = T(0);
    if (bias.defined())
      for (auto& v : bias.mutable_values()) v = T(0);
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({join_name(prefix, "weight"), weight});
    if (bias.defined()) out.push_back({join_name(prefix, "bias"), bias});
  }
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;
  std::size_t stride = 1;
  std::size_t pad = 1;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_, Rng& rng)
      : stride(stride_), pad(kernel / 2) {
    const double fan_in = static_cast<double>(in * kernel * kernel);
    weight = uniform_param<T>({out, in, kernel, kernel}, std::sqrt(6.0 / fan_in), rng);
    bias = zero_param<T>({out});
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({join_name(prefix, "weight"), weight});
    out.push_back({join_name(prefix, "bias"), bias});
  }
};

// Normalizes over the last axis with learned gain and offset.
template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> offset;
  T eps = T(1e-5);

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width)
      : gain(Tensor<T>::parameter({width}, std::vector<T>(width, T(1)))), offset(zero_param<T>({width})) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    const std::size_t axis = x.rank() - 1;
    auto centered = x - mean_axis(x, axis, true);
    auto var = mean_axis(square(centered), axis, true);
    return centered / sqrt(var + eps) * gain + offset;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({join_name(prefix, "gain"), gain});
    out.push_back({join_name(prefix, "offset"), offset});
  }
};

// Adam with bias correction.
template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(p.tensor.size(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k].tensor;
      if (!p.has_grad()) continue;
      auto values = p.mutable_values();
      const auto grad = p.grad();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g;
        v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g * g;
        const double update = lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
        values[i] = static_cast<T>(static_cast<double>(values[i]) - update);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  ParamList<T> params_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace idol::ad
