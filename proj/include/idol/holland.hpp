#pragma once

// Holland parametric pressure profile and its closed-form inversion.
//
//   r^B * ln[(p_n - p_c) / (p_r - p_c)] = A
//
// Units: radius km, pressure hPa. A and B are dimensionless shape parameters
// (A implicitly carries km^B).

#include <cmath>
#include <span>
#include <sstream>
#include <vector>

#include "idol/errors.hpp"

namespace idol::holland {

struct HollandParams {
  double a = 1.0;            // scale parameter A
  double b = 1.0;            // shape parameter B
  double ambient_hpa = 1010;  // p_n, pressure at infinite radius
  double central_hpa = 950;   // p_c

  double deficit() const { return ambient_hpa - central_hpa; }

  bool valid() const {
    return std::isfinite(a) && std::isfinite(b) && std::isfinite(ambient_hpa) &&
           std::isfinite(central_hpa) && a > 0.0 && b > 0.0 && ambient_hpa > central_hpa;
  }

  void validate() const {
    if (!valid()) {
      std::ostringstream os;
      os << "invalid Holland parameters (A=" << a << ", B=" << b << ", p_n=" << ambient_hpa
         << ", p_c=" << central_hpa << "): require A>0, B>0, p_n>p_c";
      throw DomainError(os.str());
    }
  }
};

struct RadialPoint {
  double radius_km;
  double pressure_hpa;
};

// Sampling ranges used by the synthetic generator.
struct SamplingRanges {
  static constexpr double kShapeMin = 1.0;
  static constexpr double kShapeMax = 2.5;
  static constexpr double kAmbientMin = 1005.0;
  static constexpr double kAmbientMax = 1015.0;
  static constexpr double kCentralMin = 900.0;
  static constexpr double kCentralMax = 1000.0;
  static constexpr double kOuterRadiusMin = 50.0;
  static constexpr double kOuterRadiusMax = 400.0;
};

inline constexpr double kKmPerNauticalMile = 1.852;

inline double km_to_nmi(double km) { return km / kKmPerNauticalMile; }

inline double pressure_at_radius(const HollandParams& params, double radius_km) {
  params.validate();
  if (!(radius_km > 0.0) || !std::isfinite(radius_km)) {
    throw DomainError("pressure_at_radius: radius must be finite and > 0");
  }
  return params.central_hpa + params.deficit() * std::exp(-params.a / std::pow(radius_km, params.b));
}

// ln[(p_n - p_c) / (p_r - p_c)], evaluated as -log1p((p_r - p_n)/(p_n - p_c))
// so that pressures close to ambient keep full precision.
inline double log_deficit_ratio(const HollandParams& params, double pressure_hpa) {
  params.validate();
  if (!(pressure_hpa > params.central_hpa && pressure_hpa < params.ambient_hpa)) {
    std::ostringstream os;
    os << "pressure " << pressure_hpa << " hPa outside (p_c, p_n) = (" << params.central_hpa
       << ", " << params.ambient_hpa << ")";
    throw DomainError(os.str());
  }
  return -std::log1p((pressure_hpa - params.ambient_hpa) / params.deficit());
}

// gamma = A / (ln(p_n - p_c) - ln(p_r - p_c)); the radius is gamma^(1/B).
inline double gamma_term(const HollandParams& params, double pressure_hpa) {
  return params.a / log_deficit_ratio(params, pressure_hpa);
}

inline double radius_from_pressure(const HollandParams& params, double pressure_hpa) {
  return std::pow(gamma_term(params, pressure_hpa), 1.0 / params.b);
}

// Radius at which the pressure deficit p_n - p_r has decayed to `fraction` of
// the central deficit p_n - p_c. fraction in (0, 1).
inline double radius_at_deficit_fraction(const HollandParams& params, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw DomainError("radius_at_deficit_fraction: fraction must lie in (0, 1)");
  }
  return radius_from_pressure(params, params.ambient_hpa - fraction * params.deficit());
}

inline std::vector<double> wind_profile(const HollandParams& params, std::span<const double> radii_km) {
  std::vector<double> out;
  out.reserve(radii_km.size());
  for (double r : radii_km) out.push_back(pressure_at_radius(params, r));
  return out;
}

}  // namespace idol::holland
