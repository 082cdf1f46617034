#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dosefind/error.hpp"
#include "dosefind/numeric.hpp"
#include "dosefind/rng.hpp"

namespace dosefind {

/// Dose level index, 1-based. The level index is the working dose scale.
using Level = int;

/// Cohort outcomes: 0/1 toxicity indicators or real biomarker values.
using Outcomes = std::vector<double>;

/// Marker stored in DoseDecision::mtd_declared when a trial stops because
/// even the lowest level is too toxic.
inline constexpr Level kNoMtd = 0;

/// Differences in |estimate - target| below this are treated as ties.
inline constexpr double kTieTolerance = 1e-12;

class DoseGrid {
 public:
  explicit DoseGrid(int levels, std::vector<double> tags = {})
      : levels_(levels), tags_(std::move(tags)) {
    if (levels_ < 2) throw ConfigError("dose grid needs at least 2 levels", {"trial.levels"});
    if (!tags_.empty()) {
      if (static_cast<int>(tags_.size()) != levels_) {
        throw ConfigError("dose tags must have one entry per level", {"trial.dose_tags"});
      }
      for (std::size_t k = 1; k < tags_.size(); ++k) {
        if (!(tags_[k] > tags_[k - 1])) {
          throw ConfigError("dose tags must be strictly increasing", {"trial.dose_tags"});
        }
      }
    }
  }

  int size() const noexcept { return levels_; }
  bool contains(Level k) const noexcept { return k >= 1 && k <= levels_; }
  // Display only; never used in dose arithmetic.
  const std::vector<double>& tags() const noexcept { return tags_; }

  bool operator==(const DoseGrid&) const = default;

 private:
  int levels_;
  std::vector<double> tags_;
};

/// Ground-truth toxicity probabilities per level.
///
/// Strictly increasing curves are the normal case; flat curves at 0 or 1
/// are accepted so degenerate fixtures can drive the engines, and
/// is_strict() reports which one this is.
class ToxScenario {
 public:
  explicit ToxScenario(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.size() < 2) throw ConfigError("scenario needs at least 2 levels", {"truth.probs"});
    for (std::size_t k = 0; k < probs_.size(); ++k) {
      if (!(probs_[k] >= 0.0 && probs_[k] <= 1.0)) {
        throw ConfigError("toxicity probabilities must lie in [0, 1]", {"truth.probs"});
      }
      if (k > 0 && probs_[k] < probs_[k - 1]) {
        throw ConfigError("toxicity probabilities must be nondecreasing", {"truth.probs"});
      }
    }
  }

  int levels() const noexcept { return static_cast<int>(probs_.size()); }
  double prob(Level k) const { return probs_.at(static_cast<std::size_t>(k - 1)); }
  const std::vector<double>& probs() const noexcept { return probs_; }

  bool is_strict() const noexcept {
    for (std::size_t k = 0; k < probs_.size(); ++k) {
      if (probs_[k] <= 0.0 || probs_[k] >= 1.0) return false;
      if (k > 0 && !(probs_[k] > probs_[k - 1])) return false;
    }
    return true;
  }

 private:
  std::vector<double> probs_;
};

enum class Noise { normal, logistic };

inline std::string_view to_string(Noise g) { return g == Noise::normal ? "normal" : "logistic"; }

namespace noise {

// Standardized logistic: scale chosen so the variance is 1.
inline constexpr double kLogisticScale = 0.55132889542179204;  // sqrt(3)/pi

inline double cdf(Noise g, double z) {
  if (g == Noise::normal) return numeric::normal_cdf(z);
  return 1.0 / (1.0 + std::exp(-z / kLogisticScale));
}

inline double pdf(Noise g, double z) {
  if (g == Noise::normal) return numeric::normal_pdf(z);
  const double e = std::exp(-std::abs(z) / kLogisticScale);
  return e / (kLogisticScale * (1.0 + e) * (1.0 + e));
}

/// z with P(eps > z) = p.
inline double upper_quantile(Noise g, double p) {
  if (g == Noise::normal) return numeric::normal_upper_quantile(p);
  return kLogisticScale * std::log((1.0 - p) / p);
}

inline double draw(Noise g, Rng& rng) {
  if (g == Noise::normal) return rng.normal();
  double u = rng.uniform();
  while (u == 0.0) u = rng.uniform();
  return kLogisticScale * std::log(u / (1.0 - u));
}

}  // namespace noise

/// Location-scale biomarker truth: Y = M(x) + sigma(x) * eps, eps ~ G.
/// Toxicity is the event Y > t0 and p is the targeted toxicity rate.
struct BiomarkerModel {
  std::function<double(double)> mean;
  std::function<double(double)> sd;
  Noise noise = Noise::normal;
  double t0 = 0.0;
  double p = 0.2;

  static BiomarkerModel linear(double mean_intercept, double mean_slope, double sd_intercept,
                               double sd_slope, double t0, double p,
                               Noise g = Noise::normal) {
    if (!(mean_slope > 0.0)) {
      throw ConfigError("biomarker mean must be strictly increasing", {"truth.mean.slope"});
    }
    if (sd_slope < 0.0) {
      throw ConfigError("biomarker sd must be nondecreasing", {"truth.sd.slope"});
    }
    BiomarkerModel m;
    m.mean = [=](double x) { return mean_intercept + mean_slope * x; };
    m.sd = [=](double x) { return std::max(0.0, sd_intercept + sd_slope * x); };
    m.noise = g;
    m.t0 = t0;
    m.p = p;
    return m;
  }

  double z_p() const { return noise::upper_quantile(noise, p); }

  /// f(x) = M(x) + z_p sigma(x); its root at t0 is the target dose.
  double objective(double x) const { return mean(x) + z_p() * sd(x); }

  /// P(Y > t0 | dose x).
  double tox_prob(double x) const {
    const double s = sd(x);
    if (s <= 0.0) return mean(x) > t0 ? 1.0 : 0.0;
    return 1.0 - noise::cdf(noise, (t0 - mean(x)) / s);
  }
};

struct Cohort {
  Level level = 1;
  // Dose on the continuous scale: equals `level` for discrete designs and
  // carries x* for the virtual-observation recursion.
  double assigned = 1.0;
  Outcomes outcomes;

  double mean() const { return numeric::mean(outcomes); }
  int toxicities() const {
    int z = 0;
    for (double y : outcomes) z += (y != 0.0);
    return z;
  }

  bool operator==(const Cohort&) const = default;
};

/// Observation history of one trial. Append-only; every cohort has exactly
/// `cohort_size` outcomes at a level inside the grid.
class TrialState {
 public:
  TrialState(DoseGrid grid, int cohort_size) : grid_(std::move(grid)), m_(cohort_size) {
    if (m_ < 1) throw ConfigError("cohort size must be positive", {"trial.cohort_size"});
  }

  void append(Cohort c) {
    if (!grid_.contains(c.level)) throw StateError("cohort level outside the dose grid");
    if (static_cast<int>(c.outcomes.size()) != m_) {
      throw StateError("cohort must have exactly m outcomes");
    }
    history_.push_back(std::move(c));
  }

  TrialState without_last() const {
    TrialState s = *this;
    if (!s.history_.empty()) s.history_.pop_back();
    return s;
  }

  const DoseGrid& grid() const noexcept { return grid_; }
  int levels() const noexcept { return grid_.size(); }
  int cohort_size() const noexcept { return m_; }
  const std::vector<Cohort>& history() const noexcept { return history_; }
  int cohorts() const noexcept { return static_cast<int>(history_.size()); }
  bool empty() const noexcept { return history_.empty(); }
  const Cohort& last() const { return history_.back(); }

  bool operator==(const TrialState&) const = default;

 private:
  DoseGrid grid_;
  int m_;
  std::vector<Cohort> history_;
};

enum class DecisionKind { escalate, stay, deescalate, stop };

inline std::string_view to_string(DecisionKind k) {
  switch (k) {
    case DecisionKind::escalate: return "escalate";
    case DecisionKind::stay: return "stay";
    case DecisionKind::deescalate: return "deescalate";
    case DecisionKind::stop: return "stop";
  }
  return "stay";
}

inline DecisionKind classify_move(Level current, Level next) {
  if (next > current) return DecisionKind::escalate;
  if (next < current) return DecisionKind::deescalate;
  return DecisionKind::stay;
}

struct DoseDecision {
  Level next_level = 1;
  double assigned = 1.0;  // continuous-scale assignment (x* for VO)
  DecisionKind kind = DecisionKind::stay;
  std::string rationale;
  std::optional<Level> mtd_declared;  // set iff kind == stop; kNoMtd if none
  bool clamped = false;               // a coherence guard overrode the raw move

  static DoseDecision move(Level current, Level next, std::string why) {
    DoseDecision d;
    d.next_level = next;
    d.assigned = next;
    d.kind = classify_move(current, next);
    d.rationale = std::move(why);
    return d;
  }

  static DoseDecision stop(Level current, Level mtd, std::string why) {
    DoseDecision d;
    d.next_level = current;
    d.assigned = current;
    d.kind = DecisionKind::stop;
    d.mtd_declared = mtd;
    d.rationale = std::move(why);
    return d;
  }
};

/// C(x): nearest level, half-up, clamped to [1, K].
inline Level round_to_grid(double x, int K) {
  if (!(x >= 0.5)) return 1;
  if (x >= K + 0.5) return K;
  return static_cast<Level>(std::floor(x + 0.5));
}

/// Index (1-based) of the value closest to `target`; ties to the lower index.
/// Entries that are nullopt are skipped. Returns 0 if nothing is eligible.
inline Level nearest_level(std::span<const std::optional<double>> values, double target) {
  Level best = 0;
  double best_gap = 0.0;
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (!values[k]) continue;
    const double gap = std::abs(*values[k] - target);
    if (best == 0 || gap < best_gap - kTieTolerance) {
      best = static_cast<Level>(k + 1);
      best_gap = gap;
    }
  }
  return best;
}

inline Level nearest_level(std::span<const double> values, double target) {
  std::vector<std::optional<double>> v(values.begin(), values.end());
  return nearest_level(std::span<const std::optional<double>>(v), target);
}

/// nu = argmin_k |p_k - p|.
inline Level true_mtd(const ToxScenario& scenario, double p) {
  return nearest_level(std::span<const double>(scenario.probs()), p);
}

/// Bisection root of an increasing function: |f(root) - target| <= tol.
inline double continuous_root(const std::function<double(double)>& f, double target, double lo,
                              double hi, double tol) {
  double flo = f(lo) - target;
  double fhi = f(hi) - target;
  if (flo > 0.0 || fhi < 0.0) {
    throw BracketError("continuous_root: f(lo) <= target <= f(hi) does not hold");
  }
  if (std::abs(flo) <= tol) return lo;
  if (std::abs(fhi) <= tol) return hi;
  double best = 0.5 * (lo + hi);
  for (int it = 0; it < 2000; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    const double fm = f(mid) - target;
    best = mid;
    if (std::abs(fm) <= tol) return mid;
    if (fm < 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  if (std::abs(f(best) - target) > tol) {
    throw NumericalError("continuous_root: tolerance unreachable in double precision");
  }
  return best;
}

inline Outcomes draw_binary_outcomes(const ToxScenario& scenario, Level level, int m, Rng& rng) {
  if (level < 1 || level > scenario.levels()) throw StateError("level outside scenario");
  if (m < 1) throw StateError("cohort size must be positive");
  const double p = scenario.prob(level);
  Outcomes out(static_cast<std::size_t>(m));
  for (auto& y : out) y = rng.bernoulli(p) ? 1.0 : 0.0;
  return out;
}

inline Outcomes draw_biomarker_outcomes(const BiomarkerModel& model, double dose, int m, Rng& rng) {
  if (m < 1) throw StateError("cohort size must be positive");
  const double mu = model.mean(dose);
  const double s = model.sd(dose);
  Outcomes out(static_cast<std::size_t>(m));
  for (auto& y : out) y = mu + s * noise::draw(model.noise, rng);
  return out;
}

}  // namespace dosefind
