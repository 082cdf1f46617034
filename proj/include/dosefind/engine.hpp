#pragma once

#include <cstdint>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dosefind/core.hpp"
#include "dosefind/designs.hpp"
#include "dosefind/sa.hpp"

namespace dosefind {

enum class OutcomeType { binary, biomarker };

/// A sequential dose-assignment rule. Implementations are pure functions of
/// the trial history (plus a random stream for randomized rules); any
/// per-design carry lives in Cohort::assigned.
class Design {
 public:
  virtual ~Design() = default;

  virtual std::string kind() const = 0;
  virtual OutcomeType outcome_type() const { return OutcomeType::binary; }
  /// Targeted toxicity probability; also the coherence threshold.
  virtual double target() const = 0;
  virtual Level start_level() const = 0;
  virtual bool randomized() const { return false; }

  /// Throws ConfigError if the design cannot run on K levels with cohorts of m.
  virtual void check_compatible(int K, int m) const {
    if (start_level() < 1 || start_level() > K) {
      throw ConfigError("start level outside the dose grid", {"design.start_level"});
    }
    (void)m;
  }

  /// Decision for the next cohort. With an empty history this is the
  /// starting assignment.
  virtual DoseDecision recommend(const TrialState& state, Rng& rng) const = 0;

  /// Every decision the rule can make from `state`. Deterministic rules
  /// return exactly one.
  virtual std::vector<DoseDecision> support(const TrialState& state) const {
    Rng unused(0);
    return {recommend(state, unused)};
  }

 protected:
  DoseDecision start_decision() const {
    return DoseDecision::move(start_level(), start_level(), "starting dose");
  }
};

using DesignPtr = std::shared_ptr<const Design>;

/// The recommendation a design issues for `state`. Randomness comes from a
/// stream keyed by the number of cohorts observed, so a decision can be
/// recomputed from the history and the design seed alone.
inline DoseDecision decide(const Design& design, const TrialState& state, std::uint64_t design_seed) {
  Rng rng = Rng(design_seed).split(static_cast<std::uint64_t>(state.cohorts()));
  return design.recommend(state, rng);
}

namespace detail {

inline std::string fmt(double x, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << x;
  return os.str();
}

}  // namespace detail

class ThreePlusThree final : public Design {
 public:
  explicit ThreePlusThree(double target = 0.33, Level start = 1) : target_(target), start_(start) {}

  std::string kind() const override { return "three_plus_three"; }
  double target() const override { return target_; }
  Level start_level() const override { return start_; }

  void check_compatible(int K, int m) const override {
    Design::check_compatible(K, m);
    if (m != 3) throw ConfigError("3+3 requires cohort_size = 3", {"design.kind", "trial.cohort_size"});
  }

  DoseDecision recommend(const TrialState& s, Rng&) const override {
    if (s.empty()) return start_decision();
    return designs::three_plus_three_step(designs::DoseToxTable::from(s), s.last().level, s.levels(),
                                          s.cohort_size());
  }

 private:
  double target_;
  Level start_;
};

class BiasedCoin final : public Design {
 public:
  explicit BiasedCoin(double target, Level start = 1) : target_(target), start_(start) {
    designs::check_biased_coin_target(target);
  }

  std::string kind() const override { return "biased_coin"; }
  double target() const override { return target_; }
  Level start_level() const override { return start_; }
  bool randomized() const override { return true; }

  void check_compatible(int K, int m) const override {
    Design::check_compatible(K, m);
    if (m != 1) throw ConfigError("biased coin requires cohort_size = 1", {"design.kind", "trial.cohort_size"});
  }

  DoseDecision recommend(const TrialState& s, Rng& rng) const override {
    if (s.empty()) return start_decision();
    return designs::biased_coin_step(s.last().outcomes.front(), s.last().level, target_, rng, s.levels());
  }

  std::vector<DoseDecision> support(const TrialState& s) const override {
    if (s.empty()) return {start_decision()};
    const Level cur = s.last().level;
    std::vector<DoseDecision> out;
    for (Level k : designs::biased_coin_support(s.last().outcomes.front(), cur, s.levels())) {
      out.push_back(DoseDecision::move(cur, k, "biased coin support"));
    }
    return out;
  }

 private:
  double target_;
  Level start_;
};

/// One-stage Bayesian CRM: posterior mean of the model parameter, then the
/// level with working toxicity closest to the target.
class BayesianCrm final : public Design {
 public:
  BayesianCrm(designs::WorkingModel model, designs::CrmPrior prior, Level start = 1)
      : model_(std::move(model)), prior_(prior), start_(start) {
    prior_.validate();
  }

  std::string kind() const override { return "crm"; }
  double target() const override { return model_.target; }
  Level start_level() const override { return start_; }
  const designs::WorkingModel& model() const { return model_; }

  void check_compatible(int K, int m) const override {
    Design::check_compatible(K, m);
    model_.validate(K);
  }

  DoseDecision recommend(const TrialState& s, Rng&) const override {
    if (s.empty()) return start_decision();
    const double phi = designs::crm_posterior_mean(s, prior_, model_);
    const Level next = designs::crm_next_dose(phi, model_, s.grid(), model_.target);
    std::string why = "posterior mean " + detail::fmt(phi, 6) + "; F(d_k) =";
    for (Level k = 1; k <= s.levels(); ++k) why += " " + detail::fmt(model_.tox(k, phi), 3);
    return DoseDecision::move(s.last().level, next, why);
  }

 private:
  designs::WorkingModel model_;
  designs::CrmPrior prior_;
  Level start_;
};

/// Likelihood CRM. Until both a toxicity and a non-toxicity have been seen
/// the MLE does not exist; meanwhile it stays after any toxicity and moves
/// up one level after a toxicity-free cohort.
class LikelihoodCrm final : public Design {
 public:
  explicit LikelihoodCrm(designs::WorkingModel model, Level start = 1) : model_(std::move(model)), start_(start) {}

  std::string kind() const override { return "likelihood_crm"; }
  double target() const override { return model_.target; }
  Level start_level() const override { return start_; }

  void check_compatible(int K, int m) const override {
    Design::check_compatible(K, m);
    model_.validate(K);
  }

  DoseDecision recommend(const TrialState& s, Rng&) const override {
    if (s.empty()) return start_decision();
    const Level cur = s.last().level;
    if (const auto mle = designs::crm_mle(s, model_)) {
      const Level next = designs::crm_next_dose(*mle, model_, s.grid(), model_.target);
      return DoseDecision::move(cur, next, "MLE " + detail::fmt(*mle, 6));
    }
    if (s.last().toxicities() > 0) return DoseDecision::move(cur, cur, "MLE not estimable; toxicity, stay");
    return DoseDecision::move(cur, std::min(cur + 1, s.levels()), "MLE not estimable; no toxicity, escalate");
  }

 private:
  designs::WorkingModel model_;
  Level start_;
};

/// CRM-like rule on isotonic (PAVA) estimates. While every tried level is
/// estimated below target it opens the next untried level.
class IsotonicDesign final : public Design {
 public:
  explicit IsotonicDesign(double target, Level start = 1) : target_(target), start_(start) {}

  std::string kind() const override { return "isotonic"; }
  double target() const override { return target_; }
  Level start_level() const override { return start_; }

  DoseDecision recommend(const TrialState& s, Rng&) const override {
    if (s.empty()) return start_decision();
    const auto table = designs::DoseToxTable::from(s);
    const auto est = designs::pava_isotonic(table);
    const Level cur = s.last().level;
    Level highest = 0;
    for (Level k = 1; k <= s.levels(); ++k) {
      if (table.at(k).n > 0) highest = k;
    }
    if (*est[static_cast<std::size_t>(highest - 1)] < target_ && highest < s.levels()) {
      return DoseDecision::move(cur, highest + 1, "all tried levels estimated below target; open next level");
    }
    const Level next = designs::isotonic_next_dose(est, target_);
    std::string why = "isotonic estimates:";
    for (const auto& e : est) why += e ? " " + detail::fmt(*e, 3) : std::string(" -");
    return DoseDecision::move(cur, next, why);
  }

 private:
  double target_;
  Level start_;
};

/// Robbins-Monro on the cohort toxicity rate, rounded to the grid each step.
class DiscretizedSa final : public Design {
 public:
  DiscretizedSa(double b, double target, Level start = 1) : b_(b), target_(target), start_(start) {
    if (!(b > 0.0)) throw ConfigError("b must be positive", {"design.b"});
  }

  std::string kind() const override { return "dsa"; }
  double target() const override { return target_; }
  Level start_level() const override { return start_; }
  double b() const { return b_; }

  DoseDecision recommend(const TrialState& s, Rng&) const override {
    if (s.empty()) return start_decision();
    const int i = s.cohorts();
    const Level cur = s.last().level;
    const double ybar = s.last().mean();
    const double raw = sa::rm_step(cur, ybar, i, b_, target_);
    const Level next = round_to_grid(raw, s.levels());
    return DoseDecision::move(cur, next, "C(" + detail::fmt(raw, 6) + ") = " + std::to_string(next));
  }

 private:
  double b_;
  double target_;
  Level start_;
};

/// Stochastic approximation on virtual observations of the biomarker
/// O-statistic. The conceptual dose x* is carried in Cohort::assigned.
class VirtualObservationSa final : public Design {
 public:
  VirtualObservationSa(double b, double target, double t0, Noise noise = Noise::normal, Level start = 1)
      : b_(b), target_(target), t0_(t0), noise_(noise), start_(start) {
    if (!(b > 0.0)) throw ConfigError("b must be positive", {"design.b"});
    if (!(target > 0.0 && target < 1.0)) throw ConfigError("target must lie in (0, 1)", {"design.target"});
  }

  std::string kind() const override { return "vo"; }
  OutcomeType outcome_type() const override { return OutcomeType::biomarker; }
  double target() const override { return target_; }
  Level start_level() const override { return start_; }
  double b() const { return b_; }
  double t0() const { return t0_; }
  double z_p() const { return noise::upper_quantile(noise_, target_); }

  void check_compatible(int K, int m) const override {
    Design::check_compatible(K, m);
    if (m < 2) {
      throw ConfigError("O-statistic designs need cohort_size >= 2", {"design.kind", "trial.cohort_size"});
    }
  }

  DoseDecision recommend(const TrialState& s, Rng&) const override {
    if (s.empty()) return start_decision();
    const int K = s.levels();
    const auto& c = s.last();
    const double o = sa::o_statistic(c.outcomes, z_p(), noise_);
    const double v = sa::virtual_observation(o, b_, c.assigned, c.level, K);
    const auto next = sa::vo_step({c.assigned, c.level}, v, s.cohorts(), b_, t0_, K);
    DoseDecision d = DoseDecision::move(c.level, next.x_given,
                                        "O = " + detail::fmt(o, 6) + ", V = " + detail::fmt(v, 6) +
                                            ", x* = " + detail::fmt(next.x_star, 6));
    d.assigned = next.x_star;
    return d;
  }

 private:
  double b_;
  double target_;
  double t0_;
  Noise noise_;
  Level start_;
};

class ConstantDose final : public Design {
 public:
  ConstantDose(Level level, double target) : level_(level), target_(target) {}

  std::string kind() const override { return "constant"; }
  double target() const override { return target_; }
  Level start_level() const override { return level_; }

  DoseDecision recommend(const TrialState& s, Rng&) const override {
    if (s.empty()) return start_decision();
    return DoseDecision::move(s.last().level, level_, "fixed level");
  }

 private:
  Level level_;
  double target_;
};

/// Clamps incoherent moves to "stay": no escalation after a cohort with
/// toxicity rate >= p, no de-escalation after a rate <= p.
class CoherenceGuard final : public Design {
 public:
  explicit CoherenceGuard(DesignPtr inner) : inner_(std::move(inner)) {
    if (inner_->outcome_type() != OutcomeType::binary) {
      throw ConfigError("coherence guard applies to binary designs only", {"design.coherence_guard"});
    }
  }

  std::string kind() const override { return inner_->kind(); }
  OutcomeType outcome_type() const override { return inner_->outcome_type(); }
  double target() const override { return inner_->target(); }
  Level start_level() const override { return inner_->start_level(); }
  bool randomized() const override { return inner_->randomized(); }
  void check_compatible(int K, int m) const override { inner_->check_compatible(K, m); }
  const Design& inner() const { return *inner_; }

  DoseDecision recommend(const TrialState& s, Rng& rng) const override {
    return clamp(s, inner_->recommend(s, rng));
  }

  std::vector<DoseDecision> support(const TrialState& s) const override {
    auto raw = inner_->support(s);
    for (auto& d : raw) d = clamp(s, std::move(d));
    return raw;
  }

 private:
  DoseDecision clamp(const TrialState& s, DoseDecision d) const {
    if (s.empty() || d.kind == DecisionKind::stop) return d;
    const Level cur = s.last().level;
    const double ybar = s.last().mean();
    const double p = target();
    const bool bad_up = d.next_level > cur && ybar >= p;
    const bool bad_down = d.next_level < cur && ybar <= p;
    if (!bad_up && !bad_down) return d;
    d.rationale += bad_up ? "; escalation after toxicity rate >= p clamped"
                          : "; de-escalation after toxicity rate <= p clamped";
    d.next_level = cur;
    d.assigned = cur;
    d.kind = DecisionKind::stay;
    d.clamped = true;
    return d;
  }

  DesignPtr inner_;
};

}  // namespace dosefind
