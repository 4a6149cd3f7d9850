#pragma once

// Distribution-shift and representation diagnostics: histogram JSD, Gaussian
// KDE, binned mutual information, and cross-domain variance of token means.
// All quantities are in nats.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "idol/errors.hpp"

namespace idol::diag {

inline constexpr double kHistogramSmoothing = 1e-12;
inline constexpr std::size_t kMutualInfoBins = 32;
inline constexpr std::size_t kMutualInfoMinSamples = 32;

namespace detail {

inline std::size_t bin_of(double v, double lo, double hi, std::size_t bins) {
  const double t = (v - lo) / (hi - lo) * static_cast<double>(bins);
  if (!(t > 0.0)) return 0;
  return std::min(bins - 1, static_cast<std::size_t>(t));
}

inline std::vector<double> smoothed_histogram(std::span<const double> x, double lo, double hi, std::size_t bins) {
  std::vector<double> h(bins, 0.0);
  for (double v : x) h[bin_of(v, lo, hi, bins)] += 1.0;
  const double n = static_cast<double>(x.size());
  const double z = 1.0 + static_cast<double>(bins) * kHistogramSmoothing;
  for (auto& c : h) c = (c / n + kHistogramSmoothing) / z;
  return h;
}

}  // namespace detail

// Jensen-Shannon divergence of two sample sets on a shared histogram over the
// joint [min, max] range.
inline double jsd(std::span<const double> p_samples, std::span<const double> q_samples, std::size_t bins = 64) {
  if (p_samples.size() < 2 || q_samples.size() < 2) throw ValidationError("jsd needs >= 2 samples per set");
  if (bins < 2) throw ValidationError("jsd needs >= 2 bins");
  double lo = p_samples[0], hi = p_samples[0];
  for (auto s : {p_samples, q_samples})
    for (double v : s) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!(hi > lo)) return 0.0;
  const auto p = detail::smoothed_histogram(p_samples, lo, hi, bins);
  const auto q = detail::smoothed_histogram(q_samples, lo, hi, bins);
  double kl_p = 0.0, kl_q = 0.0;
  for (std::size_t i = 0; i < bins; ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    kl_p += p[i] * std::log(p[i] / m);
    kl_q += q[i] * std::log(q[i] / m);
  }
  return std::clamp(0.5 * kl_p + 0.5 * kl_q, 0.0, std::numbers::ln2);
}

inline double scott_bandwidth(std::span<const double> samples) {
  const double n = static_cast<double>(samples.size());
  double mean = 0.0;
  for (double v : samples) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : samples) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  if (sd > 0.0) return sd * std::pow(n, -0.2);
  return 1e-3 * std::max(1.0, std::abs(mean));  // degenerate sample: narrow peak
}

// Gaussian-kernel density estimate evaluated at each grid point.
inline std::vector<double> kde(std::span<const double> samples, std::span<const double> grid) {
  if (samples.size() < 2) throw ValidationError("kde needs >= 2 samples");
  const double h = scott_bandwidth(samples);
  const double norm = 1.0 / (static_cast<double>(samples.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  std::vector<double> out(grid.size(), 0.0);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double acc = 0.0;
    for (double s : samples) {
      const double z = (grid[g] - s) / h;
      acc += std::exp(-0.5 * z * z);
    }
    out[g] = acc * norm;
  }
  return out;
}

inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i)
    g[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return g;
}

inline double trapezoid(std::span<const double> x, std::span<const double> y) {
  double a = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) a += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
  return a;
}

// Row-major (n x d) samples projected onto their first principal component.
// Sign is fixed so the loading with the largest magnitude is positive.
inline std::vector<double> first_principal_component(std::span<const double> rows, std::size_t dim) {
  if (dim == 0 || rows.size() % dim != 0) throw ShapeError("first_principal_component: bad dimensions");
  const std::size_t n = rows.size() / dim;
  if (dim == 1) return {rows.begin(), rows.end()};
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(rows.data(), n, dim);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / std::max<double>(1.0, static_cast<double>(n) - 1.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  Eigen::VectorXd v = es.eigenvectors().col(dim - 1);
  Eigen::Index arg = 0;
  v.cwiseAbs().maxCoeff(&arg);
  if (v[arg] < 0) v = -v;
  const Eigen::VectorXd proj = centered * v;
  return {proj.data(), proj.data() + proj.size()};
}

inline std::vector<double> standardize(std::span<const double> x) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / n);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sd > 0 ? (x[i] - mean) / sd : 0.0;
  return out;
}

// Binned mutual information between paired samples. x is (n x x_dim) and y is
// (n x y_dim), row-major; multi-dimensional inputs are reduced to their first
// principal component, then standardized and binned 32 x 32.
inline double mutual_information(std::span<const double> x, std::size_t x_dim, std::span<const double> y,
                                 std::size_t y_dim) {
  if (x_dim == 0 || y_dim == 0 || x.size() % x_dim || y.size() % y_dim) throw ShapeError("mutual_information: bad dims");
  const std::size_t n = x.size() / x_dim;
  if (y.size() / y_dim != n) throw ShapeError("mutual_information: x and y have different sample counts");
  if (n < kMutualInfoMinSamples) {
    throw ValidationError("mutual_information needs >= " + std::to_string(kMutualInfoMinSamples) + " samples");
  }
  const auto xs = standardize(first_principal_component(x, x_dim));
  const auto ys = standardize(first_principal_component(y, y_dim));
  const auto [xlo, xhi] = std::minmax_element(xs.begin(), xs.end());
  const auto [ylo, yhi] = std::minmax_element(ys.begin(), ys.end());
  if (!(*xhi > *xlo) || !(*yhi > *ylo)) return 0.0;
  constexpr std::size_t B = kMutualInfoBins;
  std::vector<double> joint(B * B, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    joint[detail::bin_of(xs[i], *xlo, *xhi, B) * B + detail::bin_of(ys[i], *ylo, *yhi, B)] += 1.0;
  const double z = 1.0 + static_cast<double>(B * B) * kHistogramSmoothing;
  std::vector<double> px(B, 0.0), py(B, 0.0);
  for (std::size_t a = 0; a < B; ++a)
    for (std::size_t b = 0; b < B; ++b) {
      auto& p = joint[a * B + b];
      p = (p / static_cast<double>(n) + kHistogramSmoothing) / z;
      px[a] += p;
      py[b] += p;
    }
  double mi = 0.0;
  for (std::size_t a = 0; a < B; ++a)
    for (std::size_t b = 0; b < B; ++b) {
      const double p = joint[a * B + b];
      mi += p * std::log(p / (px[a] * py[b]));
    }
  return std::max(0.0, mi);
}

inline double mutual_information(std::span<const double> x, std::span<const double> y) {
  return mutual_information(x, 1, y, 1);
}

// Entropy of the 32-bin histogram of standardized x (the ceiling of the MI
// estimator when y = x).
inline double binned_entropy(std::span<const double> x) {
  const auto xs = standardize(x);
  const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
  if (!(*hi > *lo)) return 0.0;
  const auto h = detail::smoothed_histogram(xs, *lo, *hi, kMutualInfoBins);
  double e = 0.0;
  for (double p : h) e -= p * std::log(p);
  return e;
}

struct VarianceSummary {
  std::vector<double> per_dim;  // variance of domain means, per dimension
  double mean = 0.0;
  double max = 0.0;
};

// Each domain is a row-major (n_d x dim) token matrix. The variance is the
// population variance across domains of each dimension's domain mean.
inline VarianceSummary identity_variance(const std::vector<std::vector<double>>& domains, std::size_t dim) {
  if (domains.size() < 2) throw ValidationError("identity_variance needs >= 2 domains");
  if (dim == 0) throw ShapeError("identity_variance: zero dimension");
  std::vector<std::vector<double>> means;
  for (const auto& d : domains) {
    if (d.empty() || d.size() % dim) throw ShapeError("identity_variance: domain matrix does not match dim");
    const std::size_t n = d.size() / dim;
    std::vector<double> m(dim, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < dim; ++k) m[k] += d[i * dim + k];
    for (auto& v : m) v /= static_cast<double>(n);
    means.push_back(std::move(m));
  }
  VarianceSummary s;
  s.per_dim.assign(dim, 0.0);
  const double nd = static_cast<double>(means.size());
  for (std::size_t k = 0; k < dim; ++k) {
    double mu = 0.0;
    for (const auto& m : means) mu += m[k];
    mu /= nd;
    double v = 0.0;
    for (const auto& m : means) v += (m[k] - mu) * (m[k] - mu);
    s.per_dim[k] = v / nd;
  }
  for (double v : s.per_dim) {
    s.mean += v;
    s.max = std::max(s.max, v);
  }
  s.mean /= static_cast<double>(dim);
  return s;
}

}  // namespace idol::diag
