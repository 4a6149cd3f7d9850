#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "idol/autodiff/tensor.hpp"

namespace idol::ad {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// ---------------------------------------------------------------- elementwise

template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, F f, D dfdx) {
  const auto xs = x.values();
  Buffer<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  return make_result<T>(x.shape(), std::move(out), {x.node_ptr()}, [dfdx](Node<T>& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i)
      px.grad[i] += self.grad[i] * dfdx(px.value[i], self.value[i]);
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(x, [](T v) { return v > T(0) ? v : T(0); },
               [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
T sigmoid_value(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
T softplus_value(T v) {
  return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(x, [](T v) { return sigmoid_value(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary(x, [](T v) { return softplus_value(v); }, [](T v, T) { return sigmoid_value(v); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::abs(v); },
               [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> operator-(const Tensor<T>& x) {
  return unary(x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> operator*(const Tensor<T>& x, T s) {
  return unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}
template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& x) {
  return x * s;
}
template <typename T>
Tensor<T> operator+(const Tensor<T>& x, T s) {
  return unary(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

// Keeps |x| >= eps, preserving sign (x == 0 maps to +eps). Clamped entries
// receive no gradient. `clamped` (optional) counts how many entries moved.
template <typename T>
Tensor<T> clamp_abs_min(const Tensor<T>& x, T eps, std::size_t* clamped = nullptr) {
  if (clamped) {
    for (T v : x.values())
      if (std::abs(v) < eps) ++*clamped;
  }
  return unary(
      x, [eps](T v) { return std::abs(v) >= eps ? v : (v < T(0) ? -eps : eps); },
      [eps](T v, T) { return std::abs(v) >= eps ? T(1) : T(0); });
}

// ------------------------------------------------------------------ broadcast

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Flat offsets into `in` for every element of `out`, numpy broadcasting rules.
inline std::vector<std::size_t> broadcast_offsets(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t k = in.size() - 1 - i;
    const std::size_t o = r - 1 - i;
    stride[o] = in[k] == 1 ? 0 : s;
    s *= in[k];
  }
  const std::size_t total = numel(out);
  std::vector<std::size_t> offs(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t cur = 0;
  for (std::size_t n = 0; n < total; ++n) {
    offs[n] = cur;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      cur += stride[d];
      if (idx[d] < out[d]) break;
      cur -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return offs;
}

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, F f, DA dfa, DB dfb) {
  if (a.shape() == b.shape()) {
    const auto av = a.values();
    const auto bv = b.values();
    Buffer<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
    return make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                          [dfa, dfb](Node<T>& self) {
                            auto& pa = *self.parents[0];
                            auto& pb = *self.parents[1];
                            if (pa.requires_grad) {
                              pa.ensure_grad();
                              for (std::size_t i = 0; i < self.value.size(); ++i)
                                pa.grad[i] += self.grad[i] * dfa(pa.value[i], pb.value[i], self.value[i]);
                            }
                            if (pb.requires_grad) {
                              pb.ensure_grad();
                              for (std::size_t i = 0; i < self.value.size(); ++i)
                                pb.grad[i] += self.grad[i] * dfb(pa.value[i], pb.value[i], self.value[i]);
                            }
                          });
  }
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  auto ia = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(a.shape(), out_shape));
  auto ib = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(b.shape(), out_shape));
  const auto av = a.values();
  const auto bv = b.values();
  Buffer<T> out(ia->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[(*ia)[i]], bv[(*ib)[i]]);
  return make_result<T>(std::move(out_shape), std::move(out), {a.node_ptr(), b.node_ptr()},
                        [dfa, dfb, ia, ib](Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          if (pa.requires_grad) pa.ensure_grad();
                          if (pb.requires_grad) pb.ensure_grad();
                          for (std::size_t i = 0; i < self.value.size(); ++i) {
                            const T x = pa.value[(*ia)[i]];
                            const T y = pb.value[(*ib)[i]];
                            if (pa.requires_grad) pa.grad[(*ia)[i]] += self.grad[i] * dfa(x, y, self.value[i]);
                            if (pb.requires_grad) pb.grad[(*ib)[i]] += self.grad[i] * dfb(x, y, self.value[i]);
                          }
                        });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
                [](T, T, T) { return T(1); });
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
                [](T, T, T) { return T(-1); });
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
                [](T x, T, T) { return x; });
}
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
                [](T, T y, T z) { return -z / y; });
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (broadcast_shape(x.shape(), shape) != shape) {
    throw ShapeError("broadcast_to: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return x + Tensor<T>::zeros(shape);
}

// ---------------------------------------------------------------- shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return make_result<T>(std::move(shape), Buffer<T>(x.values().begin(), x.values().end()),
                        {x.node_ptr()}, [](Node<T>& self) {
                          auto& px = *self.parents[0];
                          px.ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
                        });
}

// Swaps the last two axes: (..., A, B) -> (..., B, A).
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  Shape s = x.shape();
  const std::size_t rows = s[s.size() - 2];
  const std::size_t cols = s[s.size() - 1];
  const std::size_t batch = x.size() / (rows * cols);
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  Buffer<T> out(x.size());
  const auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out[b * rows * cols + j * rows + i] = xv[b * rows * cols + i * cols + j];
  return make_result<T>(std::move(s), std::move(out), {x.node_ptr()}, [rows, cols, batch](Node<T>& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
          px.grad[b * rows * cols + i * cols + j] += self.grad[b * rows * cols + j * rows + i];
  });
}

namespace detail {
struct AxisSplit {
  std::size_t outer, extent, inner;
};
inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}
}  // namespace detail

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto sp = detail::split_axis(x.shape(), axis);
  if (start + length > sp.extent) throw ShapeError("narrow: range exceeds axis extent");
  Shape s = x.shape();
  s[axis] = length;
  Buffer<T> out(sp.outer * length * sp.inner);
  const auto xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xv.begin() + (o * sp.extent + start) * sp.inner, length * sp.inner,
                out.begin() + o * length * sp.inner);
  return make_result<T>(std::move(s), std::move(out), {x.node_ptr()}, [sp, start, length](Node<T>& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < length * sp.inner; ++k)
        px.grad[(o * sp.extent + start) * sp.inner + k] += self.grad[o * length * sp.inner + k];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape s = parts[0].shape();
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    Shape q = p.shape();
    if (q.size() != s.size()) throw ShapeError("concat: rank mismatch");
    q[axis] = s[axis];
    if (q != s) throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(s));
    extents.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  const auto sp0 = detail::split_axis(s, axis);
  s[axis] = total;
  Buffer<T> out(sp0.outer * total * sp0.inner);
  std::size_t offset = 0;
  std::vector<NodePtr<T>> parents;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].values();
    const std::size_t e = extents[k];
    for (std::size_t o = 0; o < sp0.outer; ++o)
      std::copy_n(pv.begin() + o * e * sp0.inner, e * sp0.inner, out.begin() + (o * total + offset) * sp0.inner);
    offset += e;
    parents.push_back(parts[k].node_ptr());
  }
  const std::size_t outer = sp0.outer, inner = sp0.inner;
  return make_result<T>(std::move(s), std::move(out), std::move(parents),
                        [extents, outer, inner, total](Node<T>& self) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < extents.size(); ++k) {
                            auto& pk = *self.parents[k];
                            const std::size_t e = extents[k];
                            if (pk.requires_grad) {
                              pk.ensure_grad();
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t j = 0; j < e * inner; ++j)
                                  pk.grad[o * e * inner + j] += self.grad[(o * total + off) * inner + j];
                            }
                            off += e;
                          }
                        });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  return make_result<T>({1}, {s}, {x.node_ptr()}, [](Node<T>& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    for (auto& g : px.grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return sum(x) * (T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis, bool keepdim = false) {
  const auto sp = detail::split_axis(x.shape(), axis);
  Shape s = x.shape();
  if (keepdim)
    s[axis] = 1;
  else
    s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  if (s.empty()) s = {1};
  Buffer<T> out(sp.outer * sp.inner, T(0));
  const auto xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t a = 0; a < sp.extent; ++a)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xv[(o * sp.extent + a) * sp.inner + i];
  return make_result<T>(std::move(s), std::move(out), {x.node_ptr()}, [sp](Node<T>& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t a = 0; a < sp.extent; ++a)
        for (std::size_t i = 0; i < sp.inner; ++i) px.grad[(o * sp.extent + a) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis, bool keepdim = false) {
  const T n = static_cast<T>(x.dim(axis));
  return sum_axis(x, axis, keepdim) * (T(1) / n);
}

// Softmax over the last axis.
template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  Buffer<T> out(x.size());
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = xv[r * cols];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xv[r * cols + c]);
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c) z += (out[r * cols + c] = std::exp(xv[r * cols + c] - mx));
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  return make_result<T>(x.shape(), std::move(out), {x.node_ptr()}, [rows, cols](Node<T>& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = T(0);
      for (std::size_t c = 0; c < cols; ++c) dot += self.grad[r * cols + c] * self.value[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        px.grad[r * cols + c] += self.value[r * cols + c] * (self.grad[r * cols + c] - dot);
    }
  });
}

// ------------------------------------------------------------------- linear

// x: (..., K), weight: (K, N), bias: (N) or undefined -> (..., N)
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  if (weight.rank() != 2) throw ShapeError("linear: weight must be 2-D");
  const std::size_t k = weight.dim(0), n = weight.dim(1);
  if (x.shape().back() != k) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  const std::size_t m = x.size() / k;
  Shape s = x.shape();
  s.back() = n;
  Buffer<T> out(m * n);
  MapMat<T> y(out.data(), m, n);
  y.noalias() = ConstMapMat<T>(x.values().data(), m, k) * ConstMapMat<T>(weight.values().data(), k, n);
  std::vector<NodePtr<T>> parents{x.node_ptr(), weight.node_ptr()};
  if (bias.defined()) {
    if (bias.size() != n) throw ShapeError("linear: bias size mismatch");
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.values().data(), n);
    parents.push_back(bias.node_ptr());
  }
  return make_result<T>(std::move(s), std::move(out), std::move(parents), [m, k, n](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    ConstMapMat<T> dy(self.grad.data(), m, n);
    if (px.requires_grad) {
      px.ensure_grad();
      MapMat<T>(px.grad.data(), m, k).noalias() += dy * ConstMapMat<T>(pw.value.data(), k, n).transpose();
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      MapMat<T>(pw.grad.data(), k, n).noalias() += ConstMapMat<T>(px.value.data(), m, k).transpose() * dy;
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& pb = *self.parents[2];
      pb.ensure_grad();
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(pb.grad.data(), n) += dy.colwise().sum();
    }
  });
}

// Batched matrix product. a: (B, M, K) [or (B, K, M) if trans_a],
// b: (B, K, N) [or (B, N, K) if trans_b] -> (B, M, N).
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) throw ShapeError("bmm: expects (B,.,.) operands");
  const std::size_t batch = a.dim(0);
  const std::size_t ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  const std::size_t m = trans_a ? ac : ar, ka = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br, n = trans_b ? br : bc;
  if (ka != kb) throw ShapeError("bmm: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Buffer<T> out(batch * m * n);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMapMat<T> am(av.data() + i * ar * ac, ar, ac);
    ConstMapMat<T> bm(bv.data() + i * br * bc, br, bc);
    MapMat<T> y(out.data() + i * m * n, m, n);
    if (trans_a && trans_b)
      y.noalias() = am.transpose() * bm.transpose();
    else if (trans_a)
      y.noalias() = am.transpose() * bm;
    else if (trans_b)
      y.noalias() = am * bm.transpose();
    else
      y.noalias() = am * bm;
  }
  return make_result<T>({batch, m, n}, std::move(out), {a.node_ptr(), b.node_ptr()},
                        [=](Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          if (pa.requires_grad) pa.ensure_grad();
                          if (pb.requires_grad) pb.ensure_grad();
                          for (std::size_t i = 0; i < batch; ++i) {
                            ConstMapMat<T> dy(self.grad.data() + i * m * n, m, n);
                            ConstMapMat<T> am(pa.value.data() + i * ar * ac, ar, ac);
                            ConstMapMat<T> bm(pb.value.data() + i * br * bc, br, bc);
                            // op(A) = A or A^T; dL/d op(A) = dY op(B)^T, dL/d op(B) = op(A)^T dY
                            if (pa.requires_grad) {
                              MapMat<T> ga(pa.grad.data() + i * ar * ac, ar, ac);
                              RowMat<T> dopa = trans_b ? RowMat<T>(dy * bm) : RowMat<T>(dy * bm.transpose());
                              if (trans_a)
                                ga += dopa.transpose();
                              else
                                ga += dopa;
                            }
                            if (pb.requires_grad) {
                              MapMat<T> gb(pb.grad.data() + i * br * bc, br, bc);
                              RowMat<T> dopb = trans_a ? RowMat<T>(am * dy) : RowMat<T>(am.transpose() * dy);
                              if (trans_b)
                                gb += dopb.transpose();
                              else
                                gb += dopb;
                            }
                          }
                        });
}

// --------------------------------------------------------------------- conv

namespace detail {
struct ConvGeom {
  std::size_t n, c, h, w, o, kh, kw, stride, pad, oh, ow;
  std::size_t col_rows() const { return c * kh * kw; }
  std::size_t col_cols() const { return oh * ow; }
};

template <typename T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((ch * g.kh + ki) * g.kw + kj) * g.oh * g.ow;
        for (std::size_t y = 0; y < g.oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t x = 0; x < g.ow; ++x) {
            const long ix = static_cast<long>(x * g.stride + kj) - static_cast<long>(g.pad);
            row[y * g.ow + x] = (iy >= 0 && iy < static_cast<long>(g.h) && ix >= 0 && ix < static_cast<long>(g.w))
                                    ? img[(ch * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)]
                                    : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* img) {
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((ch * g.kh + ki) * g.kw + kj) * g.oh * g.ow;
        for (std::size_t y = 0; y < g.oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t x = 0; x < g.ow; ++x) {
            const long ix = static_cast<long>(x * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(ch * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[y * g.ow + x];
          }
        }
      }
}
}  // namespace detail

// x: (N, C, H, W), weight: (O, C, KH, KW), bias: (O) -> (N, O, OH, OW)
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
  if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
  }
  detail::ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3),
                     stride, pad, 0, 0};
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw) throw ShapeError("conv2d: kernel larger than padded input");
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  const std::size_t cr = g.col_rows(), cc = g.col_cols();
  Buffer<T> out(g.n * g.o * cc);
  Buffer<T> col(cr * cc);
  ConstMapMat<T> wm(weight.values().data(), g.o, cr);
  const auto xv = x.values();
  for (std::size_t i = 0; i < g.n; ++i) {
    detail::im2col(xv.data() + i * g.c * g.h * g.w, g, col.data());
    MapMat<T> y(out.data() + i * g.o * cc, g.o, cc);
    y.noalias() = wm * ConstMapMat<T>(col.data(), cr, cc);
    if (bias.defined())
      y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.values().data(), g.o);
  }
  std::vector<NodePtr<T>> parents{x.node_ptr(), weight.node_ptr()};
  if (bias.defined()) parents.push_back(bias.node_ptr());
  return make_result<T>({g.n, g.o, g.oh, g.ow}, std::move(out), std::move(parents), [g](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    const std::size_t cr = g.col_rows(), cc = g.col_cols();
    Buffer<T> col(cr * cc);
    Buffer<T> dcol(px.requires_grad ? cr * cc : 0);
    if (px.requires_grad) px.ensure_grad();
    if (pw.requires_grad) pw.ensure_grad();
    ConstMapMat<T> wm(pw.value.data(), g.o, cr);
    for (std::size_t i = 0; i < g.n; ++i) {
      ConstMapMat<T> dy(self.grad.data() + i * g.o * cc, g.o, cc);
      if (pw.requires_grad) {
        detail::im2col(px.value.data() + i * g.c * g.h * g.w, g, col.data());
        MapMat<T>(pw.grad.data(), g.o, cr).noalias() += dy * ConstMapMat<T>(col.data(), cr, cc).transpose();
      }
      if (px.requires_grad) {
        MapMat<T>(dcol.data(), cr, cc).noalias() = wm.transpose() * dy;
        detail::col2im_add(dcol.data(), g, px.grad.data() + i * g.c * g.h * g.w);
      }
      if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
        auto& pb = *self.parents[2];
        pb.ensure_grad();
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(pb.grad.data(), g.o) += dy.rowwise().sum();
      }
    }
  });
}

// ------------------------------------------------------------------- helpers

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: size mismatch");
  T m = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
bool all_finite(const Tensor<T>& x) {
  for (T v : x.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace idol::ad
