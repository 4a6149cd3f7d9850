#pragma once

// Holland-consistent synthetic tropical-cyclone samples.
//
// Each storm follows a smooth life cycle (intensify, peak, decay, slow
// growth). At every 6-hourly timestamp the storm's Holland parameters are
// rendered into a two-frame, two-channel field (pressure deficit and radial
// deficit gradient), and the four labels are closed-form functionals of
// those parameters:
//   p  = central pressure p_c
//   v  = k * sqrt(p_n - p_c)
//   ri = radius where the deficit has decayed to 75% of its central value
//   ro = radius where the deficit has decayed to 10% of its central value

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <numbers>
#include <string>
#include <vector>

#include "idol/errors.hpp"
#include "idol/holland.hpp"
#include "idol/rng.hpp"

namespace idol::synth {

enum class ShiftKind { kNone, kCovariate, kLabel, kConcept };

inline std::string to_string(ShiftKind k) {
  switch (k) {
    case ShiftKind::kNone: return "none";
    case ShiftKind::kCovariate: return "covariate";
    case ShiftKind::kLabel: return "label";
    case ShiftKind::kConcept: return "concept";
  }
  return "none";
}

inline ShiftKind shift_kind_from_string(const std::string& s) {
  if (s == "none") return ShiftKind::kNone;
  if (s == "covariate") return ShiftKind::kCovariate;
  if (s == "label") return ShiftKind::kLabel;
  if (s == "concept") return ShiftKind::kConcept;
  throw ValidationError("unknown shift kind '" + s + "' (expected none|covariate|label|concept)");
}

struct ShiftSpec {
  ShiftKind kind = ShiftKind::kNone;
  double magnitude = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(magnitude >= 0.0) || !std::isfinite(magnitude)) throw ValidationError("shift magnitude must be >= 0");
  }
  double label_magnitude() const { return kind == ShiftKind::kLabel ? magnitude : 0.0; }
  double covariate_magnitude() const { return kind == ShiftKind::kCovariate ? magnitude : 0.0; }
  double concept_magnitude() const { return kind == ShiftKind::kConcept ? magnitude : 0.0; }
};

inline constexpr double kWindCoefficient = 3.92;     // m/s per sqrt(hPa)
inline constexpr double kInnerDeficitFraction = 0.75;
inline constexpr double kOuterDeficitFraction = 0.10;
inline constexpr double kDeficitScaleHpa = 120.0;    // channel-0 normalization
inline constexpr double kGradientScale = 1.0;        // hPa/km, channel-1 saturation scale
inline constexpr double kHoursPerStep = 6.0;
inline constexpr std::size_t kFrames = 2;
inline constexpr std::size_t kChannels = 2;

enum Label : std::size_t { kV = 0, kP = 1, kRi = 2, kRo = 3 };
inline constexpr std::array<const char*, 4> kLabelNames{"v", "p", "ri", "ro"};
inline constexpr std::array<const char*, 4> kCorNames{"tcf", "tcc", "tce", "tcw"};

// Intensity category 0-5 (tropical storm, then grades 1-5) on the synthetic
// wind range.
inline int intensity_level(double v) {
  static constexpr std::array<double, 5> kThresholds{18.0, 24.0, 29.0, 34.0, 39.0};
  int level = 0;
  for (double t : kThresholds)
    if (v >= t) ++level;
  return level;
}

struct TCSample {
  std::vector<float> ir;           // (frames, channels, h, w), values in [0, 1]
  std::array<float, 2> dev{};      // prev_level, minutes_named
  std::array<float, 4> cor{};      // tcf, tcc, tce, tcw (km)
  std::array<float, 4> labels{};   // v (m/s), p (hPa), ri (km), ro (km)
  std::int64_t storm_id = 0;
  std::int64_t timestamp = 0;
  holland::HollandParams params;   // generating parameters at the label time
};

struct GeneratorConfig {
  std::uint64_t seed = 7;
  std::size_t grid = 64;
  double km_per_pixel = 0.0;  // 0 -> 768 km field of view
  std::size_t timestamps_per_storm = 8;
  double wind_coefficient = kWindCoefficient;

  double pixel_km() const { return km_per_pixel > 0 ? km_per_pixel : 768.0 / static_cast<double>(grid); }

  void validate() const {
    if (grid < 16) throw ValidationError("grid must be >= 16");
    if (timestamps_per_storm < 1) throw ValidationError("timestamps_per_storm must be >= 1");
    if (!(wind_coefficient > 0)) throw ValidationError("wind_coefficient must be > 0");
    if (km_per_pixel < 0) throw ValidationError("km_per_pixel must be >= 0");
  }
};

// Storm-level draws; the timestamp state is a deterministic function of these.
struct StormProfile {
  double ambient = 1010.0;
  double peak_deficit = 60.0;
  double base_outer_radius = 150.0;
  double base_shape = 1.6;
  double peak_time = 3.0;
  double width = 3.0;
  int minutes_offset_steps = 0;
  std::size_t life = 8;
};

struct RenderSettings {
  double noise_amplitude = 0.02;
  double noise_max_frequency = 3.0;
  double warp = 0.0;         // ellipticity
  double warp_angle = 0.0;   // radians
  double center_dx = 0.0;    // pixels
  double center_dy = 0.0;
};

inline StormProfile draw_storm(const GeneratorConfig& cfg, const ShiftSpec& shift, std::int64_t storm_id) {
  Rng rng(hash_seed({cfg.seed, static_cast<std::uint64_t>(storm_id), 0xA11CEULL}));
  const double m = shift.label_magnitude();
  StormProfile s;
  s.life = cfg.timestamps_per_storm;
  s.ambient = rng.uniform(holland::SamplingRanges::kAmbientMin, holland::SamplingRanges::kAmbientMax);
  // label shift skews intensity, size, and peakedness towards larger values
  const double u_int = std::pow(rng.uniform(), 1.0 / (1.0 + 1.5 * m));
  s.peak_deficit = 20.0 + 85.0 * u_int;
  const double u_size = std::pow(rng.uniform(), 1.0 / (1.0 + 1.5 * m));
  s.base_outer_radius = 80.0 * std::pow(250.0 / 80.0, u_size) * (1.0 + 0.15 * m);
  s.base_outer_radius = std::min(s.base_outer_radius, 330.0);
  const double u_shape = std::pow(rng.uniform(), 1.0 / (1.0 + m));
  s.base_shape = 1.05 + 1.3 * u_shape;
  const double life = static_cast<double>(s.life);
  s.peak_time = rng.uniform(0.3, 0.7) * life;
  s.width = std::max(1.5, life / 2.5);
  s.minutes_offset_steps = static_cast<int>(rng.uniform_index(4));
  return s;
}

inline double envelope(const StormProfile& s, double tau) {
  const double z = (tau - s.peak_time) / s.width;
  return std::exp(-z * z);
}

// Holland parameters at continuous time index tau (6-hourly steps).
inline holland::HollandParams storm_state(const StormProfile& s, double tau) {
  const double e = envelope(s, tau);
  double deficit = s.peak_deficit * (0.3 + 0.7 * e);
  deficit = std::clamp(deficit, s.ambient - holland::SamplingRanges::kCentralMax + 1.0,
                       s.ambient - holland::SamplingRanges::kCentralMin);
  const double life = static_cast<double>(std::max<std::size_t>(s.life, 1));
  double ro = s.base_outer_radius * (0.85 + 0.3 * std::clamp(tau, 0.0, life) / life);
  ro = std::clamp(ro, holland::SamplingRanges::kOuterRadiusMin, holland::SamplingRanges::kOuterRadiusMax);
  const double b = std::clamp(s.base_shape + 0.15 * (e - 0.5), holland::SamplingRanges::kShapeMin,
                              holland::SamplingRanges::kShapeMax);
  holland::HollandParams p;
  p.b = b;
  p.ambient_hpa = s.ambient;
  p.central_hpa = s.ambient - deficit;
  // choose A so the 10%-deficit radius lands exactly on ro
  p.a = std::pow(ro, b) * (-std::log1p(-kOuterDeficitFraction));
  return p;
}

struct Labels {
  double v, p, ri, ro;
};

inline Labels labels_for(const holland::HollandParams& params, double wind_coefficient) {
  Labels l;
  l.p = params.central_hpa;
  l.v = wind_coefficient * std::sqrt(params.deficit());
  l.ri = holland::radius_at_deficit_fraction(params, kInnerDeficitFraction);
  l.ro = holland::radius_at_deficit_fraction(params, kOuterDeficitFraction);
  return l;
}

inline RenderSettings draw_render(const ShiftSpec& shift, Rng& rng) {
  const double m = shift.covariate_magnitude();
  RenderSettings r;
  r.noise_amplitude = 0.02 + 0.06 * m;
  r.noise_max_frequency = 3.0 + 5.0 * m;
  r.warp = 0.4 * m * rng.uniform();
  r.warp_angle = rng.uniform(0.0, std::numbers::pi);
  r.center_dx = 2.0 * m * rng.uniform(-1.0, 1.0);
  r.center_dy = 2.0 * m * rng.uniform(-1.0, 1.0);
  return r;
}

// Noiseless deficit field (hPa) and its radial gradient magnitude (hPa/km).
struct RenderedField {
  std::vector<double> deficit;
  std::vector<double> gradient;
  std::vector<double> radius;  // effective (warped) radius per pixel, km
};

inline RenderedField render_field(const holland::HollandParams& p, const GeneratorConfig& cfg,
                                  const RenderSettings& rs) {
  const std::size_t g = cfg.grid;
  const double km = cfg.pixel_km();
  const double c = (static_cast<double>(g) - 1.0) / 2.0;
  const double ca = std::cos(rs.warp_angle), sa = std::sin(rs.warp_angle);
  const double stretch = 1.0 + rs.warp;
  RenderedField f;
  f.deficit.resize(g * g);
  f.gradient.resize(g * g);
  f.radius.resize(g * g);
  const double deficit = p.deficit();
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      const double x = (static_cast<double>(j) - c - rs.center_dx) * km;
      const double y = (static_cast<double>(i) - c - rs.center_dy) * km;
      const double xr = (ca * x + sa * y) * stretch;
      const double yr = (-sa * x + ca * y) / stretch;
      const double r = std::max(std::hypot(xr, yr), 0.25 * km);
      const double decay = std::exp(-p.a / std::pow(r, p.b));
      f.radius[i * g + j] = r;
      f.deficit[i * g + j] = deficit * (1.0 - decay);
      f.gradient[i * g + j] = deficit * decay * p.a * p.b * std::pow(r, -p.b - 1.0);
    }
  return f;
}

// Sum of random low-frequency plane waves, RMS amplitude ~ `amplitude`.
inline std::vector<double> band_limited_noise(std::size_t grid, double amplitude, double max_freq, Rng& rng) {
  constexpr int kWaves = 6;
  std::vector<double> out(grid * grid, 0.0);
  const double scale = amplitude * std::sqrt(2.0 / kWaves);
  for (int w = 0; w < kWaves; ++w) {
    const double fx = rng.uniform(-max_freq, max_freq);
    const double fy = rng.uniform(-max_freq, max_freq);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < grid; ++i)
      for (std::size_t j = 0; j < grid; ++j) {
        const double arg = 2.0 * std::numbers::pi *
                               (fx * static_cast<double>(j) + fy * static_cast<double>(i)) /
                               static_cast<double>(grid) +
                           phase;
        out[i * grid + j] += scale * std::sin(arg);
      }
  }
  return out;
}

// Correlation factors from the noiseless rendered field:
//   tcf = 1 - ri/ro                       (fullness)
//   tcc = sum_{r<ro/2} D / sum_{r<ro} D   (concentration ratio)
//   tce = sum_{r<ro} D^2 / sum_all D^2    (energy ratio)
//   tcw = equivalent radius of {D >= D_max/2}, km (width)
inline std::array<double, 4> correlation_factors(const RenderedField& f, const Labels& l, double pixel_km) {
  double inner = 0, outer = 0, energy_in = 0, energy_all = 0, dmax = 0;
  for (std::size_t k = 0; k < f.deficit.size(); ++k) dmax = std::max(dmax, f.deficit[k]);
  std::size_t half_count = 0;
  for (std::size_t k = 0; k < f.deficit.size(); ++k) {
    const double d = f.deficit[k];
    const double r = f.radius[k];
    if (r < l.ro) {
      outer += d;
      energy_in += d * d;
      if (r < 0.5 * l.ro) inner += d;
    }
    energy_all += d * d;
    if (d >= 0.5 * dmax) ++half_count;
  }
  std::array<double, 4> cor{};
  cor[0] = 1.0 - l.ri / l.ro;
  cor[1] = outer > 0 ? inner / outer : 1.0;
  cor[2] = energy_all > 0 ? energy_in / energy_all : 1.0;
  cor[3] = std::sqrt(static_cast<double>(std::max<std::size_t>(half_count, 1)) / std::numbers::pi) * pixel_km;
  return cor;
}

// One sample at integer timestamp `t` of `storm_id`. Deterministic in
// (cfg.seed, storm_id, t, shift).
inline TCSample generate_sample(const GeneratorConfig& cfg, const ShiftSpec& shift, std::int64_t storm_id,
                                std::int64_t t) {
  const StormProfile storm = draw_storm(cfg, shift, storm_id);
  Rng rng(hash_seed({cfg.seed, static_cast<std::uint64_t>(storm_id), static_cast<std::uint64_t>(t), shift.seed}));
  const double k = cfg.wind_coefficient * (1.0 + 0.3 * shift.concept_magnitude());
  const double tau = static_cast<double>(t);

  TCSample s;
  s.storm_id = storm_id;
  s.timestamp = t;
  s.params = storm_state(storm, tau);
  const Labels l = labels_for(s.params, k);
  s.labels = {static_cast<float>(l.v), static_cast<float>(l.p), static_cast<float>(l.ri), static_cast<float>(l.ro)};

  // developmental factors: level 12 h earlier, minutes since naming
  const auto prev = storm_state(storm, tau - 12.0 / kHoursPerStep);
  s.dev[0] = static_cast<float>(intensity_level(k * std::sqrt(prev.deficit())));
  s.dev[1] = static_cast<float>((tau + storm.minutes_offset_steps) * kHoursPerStep * 60.0);

  const RenderSettings rs = draw_render(shift, rng);
  const std::size_t g = cfg.grid;
  s.ir.assign(kFrames * kChannels * g * g, 0.0f);
  RenderedField current;
  for (std::size_t frame = 0; frame < kFrames; ++frame) {
    // frame 0 lags the label time by half a step
    const double when = tau - 0.5 * static_cast<double>(kFrames - 1 - frame);
    const auto params = frame + 1 == kFrames ? s.params : storm_state(storm, when);
    RenderedField f = render_field(params, cfg, rs);
    for (std::size_t ch = 0; ch < kChannels; ++ch) {
      const auto noise = band_limited_noise(g, rs.noise_amplitude, rs.noise_max_frequency, rng);
      float* dst = s.ir.data() + (frame * kChannels + ch) * g * g;
      for (std::size_t q = 0; q < g * g; ++q) {
        const double clean = ch == 0 ? f.deficit[q] / kDeficitScaleHpa : 1.0 - std::exp(-f.gradient[q] / kGradientScale);
        dst[q] = static_cast<float>(std::clamp(clean + noise[q], 0.0, 1.0));
      }
    }
    if (frame + 1 == kFrames) current = std::move(f);
  }
  const auto cor = correlation_factors(current, l, cfg.pixel_km());
  for (std::size_t i = 0; i < 4; ++i) s.cor[i] = static_cast<float>(cor[i]);
  return s;
}

}  // namespace idol::synth
