#pragma once

#include <cmath>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "dosefind/core.hpp"
#include "dosefind/numeric.hpp"

namespace dosefind::sa {

struct SaConfig {
  double b = 1.0;       // recursion constant
  double target = 0.0;  // alpha, p or t0 depending on the recursion
  double start = 1.0;
  int m = 1;

  void validate() const {
    if (!(b > 0.0)) throw ConfigError("b must be positive", {"design.b"});
    if (m < 1) throw ConfigError("cohort size must be positive", {"trial.cohort_size"});
  }
};

/// Robbins-Monro: x_{i+1} = x_i - (y - alpha) / (i b).
inline double rm_step(double x, double y, int i, double b, double alpha) {
  return x - (y - alpha) / (static_cast<double>(i) * b);
}

/// Discretized SA: the Robbins-Monro update of an integer level, rounded
/// back onto the grid.
inline Level dsa_step(Level x, double ybar, int i, double b, double p, int K) {
  return round_to_grid(rm_step(static_cast<double>(x), ybar, i, b, p), K);
}

/// First cohort index from which |(ybar - p) / (i b)| < 1/2 for every
/// ybar in [0, 1]; from there on dsa_step cannot move.
inline int dsa_freeze_index(double b, double p) {
  if (!(b > 0.0)) throw ConfigError("b must be positive", {"design.b"});
  const double worst = std::max(p, 1.0 - p);
  if (!std::isfinite(b)) return 1;
  const double guess = std::floor(2.0 * worst / b);
  int i = guess > 4.0 ? static_cast<int>(std::min(guess, 1e9)) - 2 : 1;
  while (!(worst / (static_cast<double>(i) * b) < 0.5)) ++i;
  return i;
}

// ---------------------------------------------------------------------------
// O-statistic

/// c4(m) = E(S / sigma) for m normal observations.
inline double normal_c4(int m) {
  if (m < 2) throw StateError("c4 needs m >= 2");
  return std::sqrt(2.0 / (m - 1)) * std::exp(std::lgamma(m / 2.0) - std::lgamma((m - 1) / 2.0));
}

struct Estimate {
  double value;
  double se;
};

/// E(S / sigma) under noise G. Exact for normal noise; otherwise a cached
/// Monte Carlo estimate from 10^7 samples.
inline Estimate expected_s_ratio(int m, Noise g) {
  if (m < 2) throw StateError("sample sd needs m >= 2");
  if (g == Noise::normal) return {normal_c4(m), 0.0};

  static std::mutex mu;
  static std::map<std::pair<int, int>, Estimate> cache;
  std::lock_guard lock(mu);
  const auto key = std::make_pair(m, static_cast<int>(g));
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  constexpr long kDraws = 10'000'000;
  Rng rng(0x5eed5eedULL, static_cast<std::uint64_t>(m));
  numeric::CompensatedSum sum;
  numeric::CompensatedSum sum_sq;
  std::vector<double> buf(static_cast<std::size_t>(m));
  for (long r = 0; r < kDraws; ++r) {
    for (auto& e : buf) e = noise::draw(g, rng);
    const double s = std::sqrt(numeric::sample_variance(buf));
    sum.add(s);
    sum_sq.add(s * s);
  }
  const double mean = sum.value() / kDraws;
  const double var = sum_sq.value() / kDraws - mean * mean;
  Estimate e{mean, std::sqrt(var / kDraws)};
  cache.emplace(key, e);
  return e;
}

/// O = ybar + z_p S / E(S / sigma): unbiased for f(x) = M(x) + z_p sigma(x).
inline double o_statistic(double ybar, double s, int m, double z_p, Noise g = Noise::normal) {
  if (m < 2) throw StateError("O-statistic needs m >= 2");
  if (s < 0.0) throw StateError("sample sd must be nonnegative");
  return ybar + z_p * s / expected_s_ratio(m, g).value;
}

inline double o_statistic(std::span<const double> ys, double z_p, Noise g = Noise::normal) {
  if (ys.size() < 2) throw StateError("O-statistic needs m >= 2");
  return o_statistic(numeric::mean(ys), std::sqrt(numeric::sample_variance(ys)),
                     static_cast<int>(ys.size()), z_p, g);
}

inline double osa_step(double x, double o, int i, double b, double t0) { return rm_step(x, o, i, b, t0); }

// ---------------------------------------------------------------------------
// Virtual observations

struct VirtualState {
  double x_star = 1.0;  // assigned dose on the conceptual scale
  Level x_given = 1;    // C(x_star), the dose actually administered

  bool operator==(const VirtualState&) const = default;
};

/// V = O + b (x* - x).
inline double virtual_observation(double o, double b, double x_star, Level x_given, int K) {
  if (round_to_grid(x_star, K) != x_given) {
    throw StateError("virtual observation: given dose is not C(x*)");
  }
  return o + b * (x_star - static_cast<double>(x_given));
}

inline VirtualState vo_step(const VirtualState& s, double v, int i, double b, double t0, int K) {
  VirtualState next;
  next.x_star = rm_step(s.x_star, v, i, b, t0);
  next.x_given = round_to_grid(next.x_star, K);
  return next;
}

/// Range of V that moves the administered dose at step i: any V <= up
/// escalates, any V > down de-escalates. A missing side means the grid edge.
struct MoveThresholds {
  std::optional<double> up;
  std::optional<double> down;
};

inline MoveThresholds vo_move_thresholds(const VirtualState& s, int i, double b, double t0, int K) {
  const double ib = static_cast<double>(i) * b;
  MoveThresholds t;
  if (s.x_given < K) t.up = t0 - ib * (s.x_given + 0.5 - s.x_star);
  if (s.x_given > 1) t.down = t0 + ib * (s.x_star - s.x_given + 0.5);
  return t;
}

// ---------------------------------------------------------------------------
// Asymptotic variances

/// lambda_m = (m-1) Gamma^2((m-1)/2) / (2 Gamma^2(m/2)) = 1 / c4(m)^2.
inline double lambda_m(int m) {
  if (m < 2) throw StateError("lambda_m needs m >= 2");
  return 0.5 * (m - 1) * std::exp(2.0 * (std::lgamma((m - 1) / 2.0) - std::lgamma(m / 2.0)));
}

struct AsymptoticInputs {
  double beta = 1.0;         // f'(theta)
  double sigma_theta = 1.0;  // sigma(theta)
  double zp = 0.0;
  int m = 1;
  double b = 1.0;
  double b_tilde = 1.0;
  Noise noise = Noise::normal;
};

/// sigma^2 / (b (2 beta - b)) for the plain recursion.
inline double rm_variance(double sigma2, double b, double beta) {
  if (!(b > 0.0 && b < 2.0 * beta)) throw ConfigError("variance formula needs 0 < b < 2 beta", {"asymptotics.b"});
  return sigma2 / (b * (2.0 * beta - b));
}

inline double v_O(double sigma_theta, int m, double zp, double b, double beta) {
  if (!(b > 0.0 && b < 2.0 * beta)) throw ConfigError("v_O needs 0 < b < 2 beta", {"asymptotics.b"});
  const double s2 = sigma_theta * sigma_theta;
  return s2 * (1.0 + m * zp * zp * (lambda_m(m) - 1.0)) / (m * b * (2.0 * beta - b));
}

/// beta~ = pi'(theta) = beta G'(z_p) / sigma(theta).
inline double beta_tilde(const AsymptoticInputs& in) {
  return in.beta * noise::pdf(in.noise, in.zp) / in.sigma_theta;
}

/// b_tilde is the slope of the working model at theta on the probability
/// scale.
inline double v_T(double p, int m, double b_tilde, double beta_tilde) {
  if (!(b_tilde > 0.0 && b_tilde < 2.0 * beta_tilde)) {
    throw ConfigError("v_T needs 0 < b_tilde < 2 beta_tilde", {"asymptotics.b_tilde"});
  }
  return p * (1.0 - p) / (m * b_tilde * (2.0 * beta_tilde - b_tilde));
}

/// v_T / v_O at the optimal constants b = beta and b_tilde = beta_tilde, for
/// normal noise.
inline double efficiency_ratio(double p, int m) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("p must lie in (0, 1)", {"asymptotics.p"});
  const double z = numeric::normal_upper_quantile(p);
  const double g = numeric::normal_pdf(z);
  return p * (1.0 - p) / (g * g * (1.0 + m * z * z * (lambda_m(m) - 1.0)));
}

struct CurvePoint {
  double p;
  double ratio;
};

/// Efficiency ratio on p = step, 2 step, ..., 1 - step.
inline std::vector<CurvePoint> efficiency_curve(int m, double step = 1e-3) {
  std::vector<CurvePoint> out;
  const int n = static_cast<int>(std::lround(1.0 / step));
  for (int k = 1; k < n; ++k) {
    const double p = k * step;
    out.push_back({p, efficiency_ratio(p, m)});
  }
  return out;
}

}  // namespace dosefind::sa
