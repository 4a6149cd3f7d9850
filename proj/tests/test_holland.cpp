#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "idol/holland.hpp"
#include "idol/rng.hpp"

using namespace idol::holland;

namespace {

// Brute-force inverse: bisection on log(r) over [1e-6, 1e6].
double bisect_radius(const HollandParams& p, double target) {
  double lo = std::log(1e-6), hi = std::log(1e6);
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (pressure_at_radius(p, std::exp(mid)) < target)
      lo = mid;
    else
      hi = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

HollandParams random_params(idol::Rng& rng) {
  HollandParams p;
  p.b = rng.uniform(SamplingRanges::kShapeMin, SamplingRanges::kShapeMax);
  p.ambient_hpa = rng.uniform(SamplingRanges::kAmbientMin, SamplingRanges::kAmbientMax);
  p.central_hpa = rng.uniform(SamplingRanges::kCentralMin, SamplingRanges::kCentralMax);
  const double ro = rng.uniform(SamplingRanges::kOuterRadiusMin, SamplingRanges::kOuterRadiusMax);
  p.a = std::pow(ro, p.b) * -std::log1p(-0.1);
  return p;
}

const HollandParams kUnit{std::numbers::ln2, 1.0, 1010.0, 950.0};

}  // namespace

TEST(Holland, PressureAtUnitRadius) { EXPECT_NEAR(pressure_at_radius(kUnit, 1.0), 980.0, 1e-12); }

TEST(Holland, PressureApproachesAmbientFarOut) { EXPECT_NEAR(pressure_at_radius(kUnit, 1e9), 1010.0, 1e-6); }

TEST(Holland, PressureAgreesWithBisection) {
  const HollandParams p{1.5, 1.3, 1008.0, 940.0};
  const double pr = pressure_at_radius(p, 75.0);
  EXPECT_GT(pr, 940.0);
  EXPECT_LT(pr, 1008.0);
  EXPECT_NEAR(bisect_radius(p, pr) / 75.0, 1.0, 1e-9);
}

TEST(Holland, RadiusInvertsUnitCase) { EXPECT_NEAR(radius_from_pressure(kUnit, 980.0), 1.0, 1e-12); }

TEST(Holland, RadiusSquareRootCase) {
  const HollandParams p{9.0 * std::log(60.0 / 30.0), 2.0, 1010.0, 950.0};
  EXPECT_NEAR(gamma_term(p, 980.0), 9.0, 1e-12);
  EXPECT_NEAR(radius_from_pressure(p, 980.0), 3.0, 1e-12);
}

TEST(Holland, DomainErrors) {
  EXPECT_THROW(pressure_at_radius(kUnit, 0.0), idol::DomainError);
  EXPECT_THROW(pressure_at_radius(kUnit, -1.0), idol::DomainError);
  EXPECT_THROW(pressure_at_radius(HollandParams{1.0, 1.0, 950.0, 1010.0}, 1.0), idol::DomainError);
  EXPECT_THROW(pressure_at_radius(HollandParams{-1.0, 1.0, 1010.0, 950.0}, 1.0), idol::DomainError);
  EXPECT_THROW(radius_from_pressure(kUnit, 950.0), idol::DomainError);
  EXPECT_THROW(radius_from_pressure(kUnit, 1010.0), idol::DomainError);
  EXPECT_THROW(radius_from_pressure(kUnit, 1020.0), idol::DomainError);
}

TEST(Holland, RoundTripAndBisectionOverRandomTuples) {
  idol::Rng rng(2024);
  double worst_round = 0, worst_oracle = 0, worst_identity = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto p = random_params(rng);
    // stay away from the ends where p_r - p_c or p_n - p_r underflows
    const double pr = p.central_hpa + p.deficit() * rng.uniform(0.02, 0.98);
    const double r = radius_from_pressure(p, pr);
    worst_round = std::max(worst_round, std::abs(pressure_at_radius(p, r) - pr) / pr);
    worst_oracle = std::max(worst_oracle, std::abs(bisect_radius(p, pr) - r) / r);
    const double lhs = std::pow(r, p.b) * (std::log(p.deficit()) - std::log(pr - p.central_hpa));
    worst_identity = std::max(worst_identity, std::abs(lhs - p.a) / p.a);
  }
  EXPECT_LT(worst_round, 1e-9);
  EXPECT_LT(worst_oracle, 1e-9);
  EXPECT_LT(worst_identity, 1e-9);
}

TEST(Holland, StrictMonotonicity) {
  idol::Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto p = random_params(rng);
    // span where the deficit is resolvable in double precision
    const double ro = radius_at_deficit_fraction(p, 0.1);
    double prev = pressure_at_radius(p, 0.3 * ro);
    for (double r = 0.33 * ro; r < 20.0 * ro; r *= 1.1) {
      const double cur = pressure_at_radius(p, r);
      EXPECT_GT(cur, prev);
      prev = cur;
    }
  }
}

TEST(Holland, WindProfileMatchesScalarCalls) {
  const std::vector<double> small{1.0, 2.0, 3.0};
  const auto prof = wind_profile(kUnit, small);
  ASSERT_EQ(prof.size(), 3u);
  EXPECT_NEAR(prof[0], 980.0, 1e-12);
  EXPECT_LT(prof[0], prof[1]);
  EXPECT_LT(prof[1], prof[2]);
  EXPECT_TRUE(wind_profile(kUnit, std::vector<double>{}).empty());

  const HollandParams p{1.5, 1.3, 1008.0, 940.0};
  std::vector<double> radii(64);
  for (std::size_t i = 0; i < radii.size(); ++i) radii[i] = std::pow(10.0, -1.0 + 4.0 * i / 63.0);
  const auto vec = wind_profile(p, radii);
  for (std::size_t i = 0; i < radii.size(); ++i) EXPECT_EQ(vec[i], pressure_at_radius(p, radii[i]));
  EXPECT_THROW(wind_profile(p, std::vector<double>{1.0, 0.0}), idol::DomainError);
}

TEST(Holland, DeficitFractionRadius) {
  const HollandParams p{std::pow(120.0, 1.4) * -std::log1p(-0.1), 1.4, 1010.0, 950.0};
  EXPECT_NEAR(radius_at_deficit_fraction(p, 0.1), 120.0, 1e-9);
  EXPECT_LT(radius_at_deficit_fraction(p, 0.75), radius_at_deficit_fraction(p, 0.1));
  EXPECT_NEAR(km_to_nmi(1.852), 1.0, 1e-15);
}
