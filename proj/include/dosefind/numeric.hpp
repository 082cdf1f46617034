#pragma once

#include <cmath>
#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/tools/minima.hpp>

#include "dosefind/error.hpp"

namespace dosefind::numeric {

/// Neumaier-compensated running sum. Summation in a fixed order yields a
/// result independent of how replicates were scheduled across threads.
class CompensatedSum {
 public:
  void add(double x) noexcept {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const noexcept { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

inline double normal_pdf(double z) {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * 3.14159265358979323846);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

/// Upper p-th percentile: P(Z > z) = p.
inline double normal_upper_quantile(double p) {
  return boost::math::quantile(boost::math::complement(boost::math::normal_distribution<>(), p));
}

/// Grid scan followed by Brent refinement around the best node. Suitable
/// for unimodal log-likelihoods whose mode may sit near a wall.
inline double maximize_1d(const std::function<double(double)>& f, double lo, double hi, int grid = 2001) {
  const double h = (hi - lo) / (grid - 1);
  int best = 0;
  double best_value = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < grid; ++k) {
    const double v = f(lo + k * h);
    if (v > best_value) {
      best_value = v;
      best = k;
    }
  }
  const double a = lo + std::max(best - 1, 0) * h;
  const double b = lo + std::min(best + 1, grid - 1) * h;
  std::uintmax_t iters = 200;
  const auto r = boost::math::tools::brent_find_minima([&](double x) { return -f(x); }, a, b,
                                                       std::numeric_limits<double>::digits / 2, iters);
  return r.second <= -best_value ? r.first : lo + best * h;
}

/// Bisection for an increasing function: returns x in [lo, hi] with
/// g(x) crossing zero, to interval width `xtol`.
inline double bisect_increasing(const std::function<double(double)>& g, double lo, double hi,
                                double xtol) {
  double glo = g(lo);
  double ghi = g(hi);
  if (glo > 0.0 || ghi < 0.0) {
    throw BracketError("bisection: no sign change on the bracket");
  }
  for (int it = 0; it < 400 && hi - lo > xtol; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double gm = g(mid);
    if (gm == 0.0) return mid;
    if (gm < 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

inline double mean(std::span<const double> xs) {
  CompensatedSum s;
  for (double x : xs) s.add(x);
  return xs.empty() ? 0.0 : s.value() / static_cast<double>(xs.size());
}

/// Sample variance with divisor n - 1 (two-pass).
inline double sample_variance(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double mu = mean(xs);
  CompensatedSum s;
  for (double x : xs) s.add((x - mu) * (x - mu));
  return s.value() / static_cast<double>(xs.size() - 1);
}

}  // namespace dosefind::numeric
