#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "dosefind/core.hpp"
#include "dosefind/numeric.hpp"

namespace dosefind::designs {

enum class ModelForm {
  logistic,           // F(x, theta) = p e^{b(x-theta)} / (1 - p + p e^{b(x-theta)})
  empiric,            // F(d_k, phi) = s_k^{exp(phi)}
  logistic_skeleton,  // F(d_k, phi) = expit(a0 + exp(phi) (logit(s_k) - a0))
};

inline std::string_view to_string(ModelForm f) {
  switch (f) {
    case ModelForm::logistic: return "logistic";
    case ModelForm::empiric: return "empiric";
    case ModelForm::logistic_skeleton: return "logistic_skeleton";
  }
  return "empiric";
}

namespace detail {

inline double log_expit(double t) { return t >= 0 ? -std::log1p(std::exp(-t)) : t - std::log1p(std::exp(t)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace detail

/// One-parameter working dose-toxicity model. Every form is strictly
/// increasing in dose and strictly decreasing in its parameter.
struct WorkingModel {
  ModelForm form = ModelForm::empiric;
  double b_tilde = 1.0;  // slope of the logistic form, held fixed
  double target = 0.2;
  std::vector<double> skeleton;
  double intercept = 3.0;

  void validate(int K) const {
    if (!(target > 0.0 && target < 1.0)) throw ConfigError("target must lie in (0, 1)", {"design.target"});
    if (form == ModelForm::logistic) {
      if (!(b_tilde > 0.0)) throw ConfigError("b_tilde must be positive", {"design.model.b_tilde"});
      return;
    }
    if (static_cast<int>(skeleton.size()) != K) {
      throw ConfigError("skeleton needs one entry per level", {"design.model.skeleton"});
    }
    for (std::size_t k = 0; k < skeleton.size(); ++k) {
      if (!(skeleton[k] > 0.0 && skeleton[k] < 1.0) || (k > 0 && !(skeleton[k] > skeleton[k - 1]))) {
        throw ConfigError("skeleton must be strictly increasing in (0, 1)", {"design.model.skeleton"});
      }
      if (form == ModelForm::logistic_skeleton && !(detail::logit(skeleton[k]) < intercept)) {
        throw ConfigError("skeleton entries must lie below expit(intercept)",
                          {"design.model.skeleton", "design.model.intercept"});
      }
    }
  }

  // Linear predictor on the logit scale (logistic forms only).
  double eta(double dose, double param) const {
    if (form == ModelForm::logistic) return detail::logit(target) + b_tilde * (dose - param);
    const double s = skeleton.at(static_cast<std::size_t>(std::lround(dose) - 1));
    return intercept + std::exp(param) * (detail::logit(s) - intercept);
  }

  double log_tox(double dose, double param) const {
    if (form == ModelForm::empiric) {
      const double s = skeleton.at(static_cast<std::size_t>(std::lround(dose) - 1));
      return std::exp(param) * std::log(s);
    }
    return detail::log_expit(eta(dose, param));
  }

  double log_nontox(double dose, double param) const {
    if (form == ModelForm::empiric) {
      const double lf = log_tox(dose, param);
      return std::log(-std::expm1(lf));
    }
    return detail::log_expit(-eta(dose, param));
  }

  /// F(dose, param).
  double tox(double dose, double param) const { return std::exp(log_tox(dose, param)); }

  /// Search interval for the parameter (likelihood maximization).
  std::pair<double, double> param_range(int K) const {
    if (form == ModelForm::logistic) return {1.0 - 40.0 / b_tilde, K + 40.0 / b_tilde};
    return {-8.0, 8.0};
  }
};

struct CrmPrior {
  double mean = 0.0;
  double sd = 1.34;

  void validate() const {
    if (!(sd > 0.0)) throw ConfigError("prior sd must be positive", {"design.prior.sd"});
  }
};

struct LevelCounts {
  int n = 0;
  int z = 0;
  bool operator==(const LevelCounts&) const = default;
};

/// Cumulative (n_k, z_k) per level.
class DoseToxTable {
 public:
  explicit DoseToxTable(int K) : counts_(static_cast<std::size_t>(K)) {}

  static DoseToxTable from(const TrialState& state) {
    DoseToxTable t(state.levels());
    for (const auto& c : state.history()) {
      for (double y : c.outcomes) {
        if (y != 0.0 && y != 1.0) throw StateError("binary design received a non-binary outcome");
      }
      t.add(c.level, static_cast<int>(c.outcomes.size()), c.toxicities());
    }
    return t;
  }

  void add(Level k, int n, int z) {
    if (z < 0 || z > n) throw StateError("toxicity count outside [0, n]");
    auto& c = counts_.at(static_cast<std::size_t>(k - 1));
    c.n += n;
    c.z += z;
  }

  const LevelCounts& at(Level k) const { return counts_.at(static_cast<std::size_t>(k - 1)); }
  int levels() const noexcept { return static_cast<int>(counts_.size()); }

  int total_n() const {
    int s = 0;
    for (const auto& c : counts_) s += c.n;
    return s;
  }
  int total_z() const {
    int s = 0;
    for (const auto& c : counts_) s += c.z;
    return s;
  }

  bool operator==(const DoseToxTable&) const = default;

 private:
  std::vector<LevelCounts> counts_;
};

// ---------------------------------------------------------------------------
// 3+3

/// One decision of the 3+3 rule at the current level, after a full cohort
/// of three. Escalate if z/n < 0.33, repeat the level if z = 1 and n = 3,
/// otherwise de-escalate, which ends the trial with the next lower level as
/// MTD. Escalation at the top level stays at K; de-escalation from level 1
/// stops with no MTD.
inline DoseDecision three_plus_three_step(const DoseToxTable& table, Level current, int K, int m) {
  if (m != 3) throw StateError("3+3 requires cohorts of exactly 3");
  if (current < 1 || current > K) throw StateError("3+3: current level outside grid");
  const auto [n, z] = table.at(current);
  if (n <= 0 || n % 3 != 0) throw StateError("3+3: no complete cohort at the current level");

  std::ostringstream why;
  why << z << "/" << n << " toxicities at level " << current;
  // z/n < 0.33 in exact integer arithmetic.
  if (100 * z < 33 * n) {
    if (current == K) return DoseDecision::move(current, K, why.str() + "; escalation capped at top level");
    return DoseDecision::move(current, current + 1, why.str() + "; escalate");
  }
  if (z == 1 && n == 3) return DoseDecision::move(current, current, why.str() + "; enroll three more");
  if (current == 1) return DoseDecision::stop(current, kNoMtd, why.str() + "; lowest level too toxic, no MTD");
  return DoseDecision::stop(current, current - 1, why.str() + "; de-escalation ends the trial");
}

// ---------------------------------------------------------------------------
// Biased coin (up-and-down, one subject per step)

inline void check_biased_coin_target(double p) {
  if (!(p > 0.0 && p < 0.5)) throw ConfigError("biased coin requires 0 < p < 0.5", {"design.target"});
}

/// Moves the coin can make after `last_outcome` at `current`.
inline std::vector<Level> biased_coin_support(double last_outcome, Level current, int K) {
  if (last_outcome != 0.0) return {std::max(current - 1, 1)};
  if (current == K) return {K};
  return {current, current + 1};
}

inline DoseDecision biased_coin_step(double last_outcome, Level current, double p, Rng& rng, int K) {
  check_biased_coin_target(p);
  if (last_outcome != 0.0) {
    return DoseDecision::move(current, std::max(current - 1, 1), "toxicity; step down");
  }
  const double up = p / (1.0 - p);
  const bool heads = rng.uniform() < up;
  if (heads && current < K) return DoseDecision::move(current, current + 1, "no toxicity; coin says escalate");
  return DoseDecision::move(current, current, "no toxicity; coin says stay");
}

// ---------------------------------------------------------------------------
// CRM

inline double log_likelihood(const DoseToxTable& table, const WorkingModel& model, double param) {
  double ll = 0.0;
  for (Level k = 1; k <= table.levels(); ++k) {
    const auto [n, z] = table.at(k);
    if (n == 0) continue;
    if (z > 0) ll += z * model.log_tox(k, param);
    if (n - z > 0) ll += (n - z) * model.log_nontox(k, param);
  }
  return ll;
}

/// Posterior mean of a scalar parameter under a normal prior.
///
/// Integrates on [mean - 10 sd, mean + 10 sd] with the log-posterior shifted
/// by its maximum so the integrand never underflows wholesale.
inline double posterior_mean(const std::function<double(double)>& log_lik, const CrmPrior& prior) {
  prior.validate();
  const double lo = prior.mean - 10.0 * prior.sd;
  const double hi = prior.mean + 10.0 * prior.sd;
  auto log_post = [&](double t) {
    const double u = (t - prior.mean) / prior.sd;
    return log_lik(t) - 0.5 * u * u;
  };
  // Coarse scan for the mode and the region where the density exceeds
  // e^-45 of its peak; the log posterior is concave for the working models.
  constexpr int kScan = 257;
  const double h = (hi - lo) / (kScan - 1);
  std::vector<double> lp(kScan);
  double peak = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < kScan; ++k) {
    lp[k] = log_post(lo + h * k);
    peak = std::max(peak, lp[k]);
  }
  if (!std::isfinite(peak)) throw NumericalError("posterior: log-likelihood is not finite anywhere");
  int first = kScan - 1, last = 0;
  for (int k = 0; k < kScan; ++k) {
    if (lp[k] > peak - 45.0) {
      first = std::min(first, k);
      last = std::max(last, k);
    }
  }
  const double a = lo + h * std::max(0, first - 1);
  const double b = lo + h * std::min(kScan - 1, last + 1);

  auto dens = [&](double t) { return std::exp(log_post(t) - peak); };
  auto moment = [&](double t) { return (t - prior.mean) * dens(t); };
  using Quad = boost::math::quadrature::gauss_kronrod<double, 31>;
  const double z = Quad::integrate(dens, a, b, 20, 1e-13);
  if (!(z > 0.0) || !std::isfinite(z)) {
    throw NumericalError("posterior: normalizing integral underflowed");
  }
  return prior.mean + Quad::integrate(moment, a, b, 20, 1e-13) / z;
}

inline double crm_posterior_mean(const TrialState& state, const CrmPrior& prior, const WorkingModel& model) {
  if (state.empty()) return prior.mean;
  const auto table = DoseToxTable::from(state);
  return posterior_mean([&](double t) { return log_likelihood(table, model, t); }, prior);
}

/// Level whose working-model toxicity at `param` is closest to p.
inline Level crm_next_dose(double param, const WorkingModel& model, const DoseGrid& grid, double p) {
  std::vector<double> f(static_cast<std::size_t>(grid.size()));
  for (Level k = 1; k <= grid.size(); ++k) f[static_cast<std::size_t>(k - 1)] = model.tox(k, param);
  return nearest_level(std::span<const double>(f), p);
}

/// Maximum likelihood estimate of the working-model parameter; nullopt when
/// the data contain no toxicity or no non-toxicity (no finite maximizer).
inline std::optional<double> crm_mle(const TrialState& state, const WorkingModel& model) {
  const auto table = DoseToxTable::from(state);
  const int n = table.total_n();
  const int z = table.total_z();
  if (z == 0 || z == n) return std::nullopt;
  const auto [lo, hi] = model.param_range(state.levels());
  return numeric::maximize_1d([&](double t) { return log_likelihood(table, model, t); }, lo, hi, 4001);
}

inline std::optional<Level> likelihood_crm_update(const TrialState& state, const WorkingModel& model, double p) {
  const auto mle = crm_mle(state, model);
  if (!mle) return std::nullopt;
  return crm_next_dose(*mle, model, state.grid(), p);
}

// ---------------------------------------------------------------------------
// Logit-MLE on a continuous dose scale

struct DoseResponse {
  double dose;
  double tbar;  // cohort toxicity proportion
};

/// Root theta of sum_j {T_j - F(x_j, theta)} = 0 under the logistic form;
/// nullopt when every proportion is 0 or every proportion is 1.
inline std::optional<double> logit_mle_update(std::span<const DoseResponse> history, double b_tilde, double p) {
  if (history.empty()) return std::nullopt;
  if (!(b_tilde > 0.0)) throw ConfigError("b_tilde must be positive", {"design.model.b_tilde"});
  double sum_t = 0.0;
  double lo = history.front().dose;
  double hi = lo;
  for (const auto& r : history) {
    sum_t += r.tbar;
    lo = std::min(lo, r.dose);
    hi = std::max(hi, r.dose);
  }
  if (sum_t <= 0.0 || sum_t >= static_cast<double>(history.size())) return std::nullopt;

  WorkingModel model;
  model.form = ModelForm::logistic;
  model.b_tilde = b_tilde;
  model.target = p;
  // F is decreasing in theta, so the estimating function is increasing.
  auto g = [&](double theta) {
    double s = 0.0;
    for (const auto& r : history) s += r.tbar - model.tox(r.dose, theta);
    return s;
  };
  const double pad = 60.0 / b_tilde;
  lo -= pad;
  hi += pad;
  if (g(lo) > 0.0 || g(hi) < 0.0) return std::nullopt;
  return numeric::bisect_increasing(g, lo, hi, 1e-8);
}

// ---------------------------------------------------------------------------
// Isotonic (nonparametric) estimation

/// Weighted pool-adjacent-violators fit of z_k / n_k over the levels that
/// have data (weights n_k). Levels without data get nullopt.
inline std::vector<std::optional<double>> pava_isotonic(const DoseToxTable& table) {
  struct Block {
    double value;
    double weight;
    int count;
  };
  std::vector<Block> blocks;
  std::vector<Level> observed;
  for (Level k = 1; k <= table.levels(); ++k) {
    const auto [n, z] = table.at(k);
    if (n == 0) continue;
    observed.push_back(k);
    blocks.push_back({static_cast<double>(z) / n, static_cast<double>(n), 1});
    while (blocks.size() >= 2 && blocks[blocks.size() - 2].value > blocks.back().value) {
      const Block b = blocks.back();
      blocks.pop_back();
      Block& a = blocks.back();
      a.value = (a.weight * a.value + b.weight * b.value) / (a.weight + b.weight);
      a.weight += b.weight;
      a.count += b.count;
    }
  }
  if (observed.empty()) throw StateError("isotonic estimate needs at least one observed level");

  std::vector<std::optional<double>> out(static_cast<std::size_t>(table.levels()));
  std::size_t idx = 0;
  for (const auto& b : blocks) {
    for (int j = 0; j < b.count; ++j, ++idx) out[static_cast<std::size_t>(observed[idx] - 1)] = b.value;
  }
  return out;
}

/// argmin over estimated levels of |p_k - p|, ties to the lower level.
inline Level isotonic_next_dose(std::span<const std::optional<double>> estimates, double p) {
  const Level k = nearest_level(estimates, p);
  if (k == 0) throw StateError("no estimated level to choose from");
  return k;
}

}  // namespace dosefind::designs
