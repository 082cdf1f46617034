#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include "dosefind/core.hpp"
#include "dosefind/designs.hpp"
#include "dosefind/engine.hpp"
#include "dosefind/numeric.hpp"
#include "dosefind/sa.hpp"

namespace dosefind::sim {

using Truth = std::variant<ToxScenario, BiomarkerModel>;

/// Runs body(0) ... body(count - 1) on up to `threads` workers (0 = all
/// hardware threads). Exceptions are rethrown on the calling thread.
inline void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& body) {
  unsigned workers = threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : threads;
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, std::max<std::size_t>(count, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      try {
        for (std::size_t i = next++; i < count; i = next++) body(i);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = count;
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

/// Toxicity probability of each level under the truth.
inline std::vector<double> level_tox_probs(const Truth& truth, int K) {
  if (const auto* s = std::get_if<ToxScenario>(&truth)) return s->probs();
  const auto& bm = std::get<BiomarkerModel>(truth);
  std::vector<double> out;
  for (Level k = 1; k <= K; ++k) out.push_back(bm.tox_prob(k));
  return out;
}

inline Level truth_mtd(const Truth& truth, int K, double p) {
  const auto probs = level_tox_probs(truth, K);
  return nearest_level(std::span<const double>(probs), p);
}

inline void check_pairing(const Design& design, const Truth& truth, int K, int m) {
  design.check_compatible(K, m);
  if (design.outcome_type() == OutcomeType::binary) {
    const auto* s = std::get_if<ToxScenario>(&truth);
    if (!s) throw ConfigError("binary designs need a toxicity scenario", {"design.kind", "truth.kind"});
    if (s->levels() != K) throw ConfigError("scenario length differs from the number of levels", {"truth.probs", "trial.levels"});
  } else if (!std::holds_alternative<BiomarkerModel>(truth)) {
    throw ConfigError("O-statistic designs need a biomarker truth", {"design.kind", "truth.kind"});
  }
}

struct CohortRecord {
  Level level;
  double assigned;
  Outcomes outcomes;
  DoseDecision decision;  // made after observing this cohort
};

struct TrialTrajectory {
  std::string design;
  std::uint64_t seed = 0;
  std::uint64_t replicate = 0;
  DoseDecision start;
  std::vector<CohortRecord> cohorts;
  std::optional<Level> recommendation;  // nullopt: stopped without an MTD
  bool stopped = false;

  int subjects() const {
    int n = 0;
    for (const auto& c : cohorts) n += static_cast<int>(c.outcomes.size());
    return n;
  }

  std::vector<Level> doses() const {
    std::vector<Level> d;
    for (const auto& c : cohorts) d.push_back(c.level);
    return d;
  }
};

/// Streams for one replicate: outcomes and design randomness are drawn from
/// separate children so that designs compared on one seed share outcomes.
inline Rng outcome_stream(std::uint64_t seed, std::uint64_t replicate) { return Rng(seed, replicate).split(1); }
inline std::uint64_t design_seed(std::uint64_t seed, std::uint64_t replicate) {
  return Rng(seed, replicate).split(2).next_u64();
}

inline Outcomes draw_outcomes(const Truth& truth, Level level, int m, Rng& rng) {
  if (const auto* s = std::get_if<ToxScenario>(&truth)) return draw_binary_outcomes(*s, level, m, rng);
  return draw_biomarker_outcomes(std::get<BiomarkerModel>(truth), level, m, rng);
}

/// Simulates up to N cohorts (fewer if the design stops).
inline TrialTrajectory run_trial(const Design& design, const Truth& truth, int K, int N, int m,
                                 std::uint64_t seed, std::uint64_t replicate = 0,
                                 const TrialState* prefix = nullptr) {
  check_pairing(design, truth, K, m);
  TrialTrajectory traj;
  traj.design = design.kind();
  traj.seed = seed;
  traj.replicate = replicate;
  Rng rng = outcome_stream(seed, replicate);
  const std::uint64_t dseed = design_seed(seed, replicate);

  TrialState state = prefix ? *prefix : TrialState(DoseGrid(K), m);
  for (const auto& c : state.history()) {
    traj.cohorts.push_back({c.level, c.assigned, c.outcomes, DoseDecision{}});
  }
  DoseDecision d = decide(design, state, dseed);
  if (traj.cohorts.empty()) {
    traj.start = d;
  } else {
    traj.cohorts.back().decision = d;
  }
  while (state.cohorts() < N && d.kind != DecisionKind::stop) {
    Cohort c{d.next_level, d.assigned, draw_outcomes(truth, d.next_level, m, rng)};
    state.append(c);
    d = decide(design, state, dseed);
    traj.cohorts.push_back({c.level, c.assigned, std::move(c.outcomes), d});
  }
  if (d.kind == DecisionKind::stop) {
    traj.stopped = true;
    if (d.mtd_declared && *d.mtd_declared != kNoMtd) traj.recommendation = d.mtd_declared;
  } else {
    traj.recommendation = d.next_level;
  }
  return traj;
}

/// C'_n = sum (x_i - nu)^2 in level units.
inline double design_cost(const TrialTrajectory& traj, Level nu) {
  double c = 0.0;
  for (const auto& r : traj.cohorts) c += static_cast<double>((r.level - nu) * (r.level - nu));
  return c;
}

inline double design_cost(std::span<const Level> doses, Level nu) {
  double c = 0.0;
  for (Level x : doses) c += static_cast<double>((x - nu) * (x - nu));
  return c;
}

/// C_n = sum (x_i - theta)^2 on the continuous dose scale.
inline double continuous_cost(std::span<const double> doses, double theta) {
  double c = 0.0;
  for (double x : doses) c += (x - theta) * (x - theta);
  return c;
}

struct ReplicateRecord {
  std::uint64_t replicate = 0;
  std::optional<Level> recommendation;
  bool correct = false;
  int subjects = 0;
  int toxicities = 0;
  double cost = 0.0;
  bool stopped = false;
  std::vector<int> allocation;  // subjects per level
};

struct SimReport {
  std::string design;
  int reps = 0;
  int cohorts = 0;
  int cohort_size = 0;
  std::uint64_t seed = 0;
  Level nu = 0;
  double pcs = 0.0;
  double pcs_se = 0.0;
  std::vector<double> selection;   // [0] = no MTD, [k] = level k
  std::vector<double> allocation;  // mean subjects per level
  double mean_subjects = 0.0;
  double mean_toxicities = 0.0;
  double cost_mean = 0.0;
  double cost_sd = 0.0;
  double cost_se = 0.0;
  std::vector<ReplicateRecord> records;
};

inline int count_toxicities(const Truth& truth, const Outcomes& ys) {
  if (std::holds_alternative<ToxScenario>(truth)) {
    int z = 0;
    for (double y : ys) z += (y != 0.0);
    return z;
  }
  const double t0 = std::get<BiomarkerModel>(truth).t0;
  int z = 0;
  for (double y : ys) z += (y > t0);
  return z;
}

inline ReplicateRecord summarize(const TrialTrajectory& traj, const Truth& truth, int K, Level nu, double p) {
  ReplicateRecord r;
  r.replicate = traj.replicate;
  r.recommendation = traj.recommendation;
  r.stopped = traj.stopped;
  r.subjects = traj.subjects();
  r.cost = design_cost(traj, nu);
  r.allocation.assign(static_cast<std::size_t>(K), 0);
  for (const auto& c : traj.cohorts) {
    r.allocation[static_cast<std::size_t>(c.level - 1)] += static_cast<int>(c.outcomes.size());
    r.toxicities += count_toxicities(truth, c.outcomes);
  }
  const auto probs = level_tox_probs(truth, K);
  if (r.recommendation) {
    r.correct = *r.recommendation == nu;
  } else {
    // "No MTD" is right only when every level is above target.
    r.correct = probs.front() > p;
  }
  return r;
}

/// Independent replicates r = 0..reps-1, each seeded by (seed, r).
inline SimReport run_mc(const Design& design, const Truth& truth, int K, int N, int m, int reps,
                        std::uint64_t seed, unsigned threads = 0) {
  if (reps < 1) throw ConfigError("reps must be at least 1", {"execution.reps"});
  check_pairing(design, truth, K, m);
  const double p = design.target();
  const Level nu = truth_mtd(truth, K, p);

  std::vector<ReplicateRecord> records(static_cast<std::size_t>(reps));
  parallel_for(records.size(), threads, [&](std::size_t r) {
    const auto traj = run_trial(design, truth, K, N, m, seed, r);
    records[r] = summarize(traj, truth, K, nu, p);
  });

  SimReport rep;
  rep.design = design.kind();
  rep.reps = reps;
  rep.cohorts = N;
  rep.cohort_size = m;
  rep.seed = seed;
  rep.nu = nu;
  rep.selection.assign(static_cast<std::size_t>(K + 1), 0.0);
  rep.allocation.assign(static_cast<std::size_t>(K), 0.0);

  numeric::CompensatedSum correct, subjects, tox, cost, cost_sq;
  std::vector<numeric::CompensatedSum> alloc(static_cast<std::size_t>(K));
  for (const auto& r : records) {
    correct.add(r.correct ? 1.0 : 0.0);
    subjects.add(r.subjects);
    tox.add(r.toxicities);
    cost.add(r.cost);
    cost_sq.add(r.cost * r.cost);
    rep.selection[static_cast<std::size_t>(r.recommendation.value_or(0))] += 1.0;
    for (std::size_t k = 0; k < alloc.size(); ++k) alloc[k].add(r.allocation[k]);
  }
  const double n = reps;
  rep.pcs = correct.value() / n;
  rep.pcs_se = std::sqrt(rep.pcs * (1.0 - rep.pcs) / n);
  for (auto& s : rep.selection) s /= n;
  for (std::size_t k = 0; k < alloc.size(); ++k) rep.allocation[k] = alloc[k].value() / n;
  rep.mean_subjects = subjects.value() / n;
  rep.mean_toxicities = tox.value() / n;
  rep.cost_mean = cost.value() / n;
  const double var = reps > 1 ? std::max(0.0, (cost_sq.value() - n * rep.cost_mean * rep.cost_mean) / (n - 1)) : 0.0;
  rep.cost_sd = std::sqrt(var);
  rep.cost_se = rep.cost_sd / std::sqrt(n);
  rep.records = std::move(records);
  return rep;
}

// ---------------------------------------------------------------------------
// Continuous-dose recursions and their asymptotic variances

enum class Recursion { rm, osa, logit_mle };

inline std::string_view to_string(Recursion r) {
  switch (r) {
    case Recursion::rm: return "rm";
    case Recursion::osa: return "osa";
    case Recursion::logit_mle: return "logit_mle";
  }
  return "rm";
}

/// Logit-MLE recursion on a continuous dose scale with the logistic working
/// model at fixed slope. Keeps per-cohort constants so that each root solve
/// costs one pass per Newton iteration; the root is bracketed throughout.
class LogitMleRecursion {
 public:
  LogitMleRecursion(double b_tilde, double p, double start) : b_(b_tilde), p_(p), x_(start), ref_(start) {
    if (!(b_tilde > 0.0)) throw ConfigError("b_tilde must be positive", {"asymptotics.b_tilde"});
  }

  double dose() const noexcept { return x_; }
  bool estimable() const noexcept { return sum_t_ > 0.0 && sum_t_ < static_cast<double>(a_.size()); }

  /// Records the cohort toxicity rate observed at the current dose and
  /// moves to the next one.
  double observe(double tbar) {
    a_.push_back((1.0 - p_) / p_ * std::exp(-b_ * (x_ - ref_)));
    doses_.push_back(x_);
    sum_t_ += tbar;
    const int i = static_cast<int>(a_.size());
    if (!estimable()) {
      // No finite root yet: Robbins-Monro on the rate with the working slope.
      x_ = sa::rm_step(x_, tbar, i, b_ * p_ * (1.0 - p_), p_);
      return x_;
    }
    x_ = solve(have_root_ ? x_ : ref_);
    have_root_ = true;
    return x_;
  }

 private:
  // g(theta) = sum T - sum F(x_j, theta), increasing in theta.
  std::pair<double, double> g_and_slope(double theta) const {
    const double w = std::exp(b_ * (theta - ref_));
    double s = 0.0;
    double ds = 0.0;
    for (double a : a_) {
      const double q = 1.0 / (1.0 + a * w);
      s += q;
      ds += q * (1.0 - q);
    }
    return {sum_t_ - s, b_ * ds};
  }

  double solve(double guess) const {
    const double span = 60.0 / b_;
    double lo = guess;
    double hi = guess;
    double step = 1.0 / b_;
    while (g_and_slope(lo).first > 0.0) {
      lo -= step;
      step *= 2.0;
      if (step > 1e6 * span) throw NumericalError("logit-MLE: root bracket search diverged");
    }
    step = 1.0 / b_;
    while (g_and_slope(hi).first < 0.0) {
      hi += step;
      step *= 2.0;
      if (step > 1e6 * span) throw NumericalError("logit-MLE: root bracket search diverged");
    }
    double t = std::clamp(guess, lo, hi);
    for (int it = 0; it < 200; ++it) {
      const auto [g, dg] = g_and_slope(t);
      if (g == 0.0) return t;
      if (g < 0.0) {
        lo = t;
      } else {
        hi = t;
      }
      double next = dg > 0.0 ? t - g / dg : 0.5 * (lo + hi);
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      if (std::abs(next - t) < 1e-11 || hi - lo < 1e-11) return next;
      t = next;
    }
    return t;
  }

  double b_;
  double p_;
  double x_;
  double ref_;
  double sum_t_ = 0.0;
  bool have_root_ = false;
  std::vector<double> a_;
  std::vector<double> doses_;
};

struct AsymptoticSetup {
  double b = 1.0;        // RM / O-statistic recursion constant
  double b_tilde = 1.0;  // logistic working-model slope (dose scale)
  int m = 1;
  std::optional<double> start;  // default theta + 0.5
  double root_lo = -100.0;
  double root_hi = 100.0;
  unsigned threads = 0;
};

struct AsymptoticComparison {
  Recursion recursion = Recursion::rm;
  int n = 0;
  int reps = 0;
  double theta = 0.0;
  double beta = 0.0;        // slope of the objective at theta
  double beta_tilde = 0.0;  // pi'(theta), logit-MLE only
  double b_effective = 0.0; // constant entering the variance formula
  double empirical_variance = 0.0;
  double formula_variance = 0.0;
  double ratio = 0.0;
  double ratio_ci_low = 0.0;
  double ratio_ci_high = 0.0;
  double mean_scaled_error = 0.0;
  std::vector<double> scaled_errors;  // sqrt(n) (x_n - theta) per replicate
};

namespace detail {

inline double derivative(const std::function<double(double)>& f, double x) {
  const double h = 1e-5 * std::max(1.0, std::abs(x));
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

}  // namespace detail

/// Empirical variance of sqrt(n)(x_n - theta) against the closed form.
///
/// rm: Robbins-Monro on the cohort mean targeting M(x) = t0.
/// osa: Robbins-Monro on the O-statistic targeting f(x) = t0.
/// logit_mle: fixed-slope logit-MLE on T = 1(Y > t0) targeting pi(x) = p.
/// Replicate r draws its noise from stream (seed, r), so the three
/// recursions see common random numbers.
inline AsymptoticComparison check_asymptotics(Recursion kind, const BiomarkerModel& model, int n, int reps,
                                              std::uint64_t seed, const AsymptoticSetup& setup) {
  if (n < 1 || reps < 2) throw ConfigError("need n >= 1 and reps >= 2", {"asymptotics.n", "asymptotics.reps"});
  const int m = setup.m;
  const double p = model.p;
  const double zp = model.z_p();
  AsymptoticComparison out;
  out.recursion = kind;
  out.n = n;
  out.reps = reps;

  std::function<double(double)> target_fn;
  if (kind == Recursion::rm) {
    target_fn = model.mean;
  } else {
    target_fn = [&](double x) { return model.objective(x); };
  }
  out.theta = continuous_root(target_fn, model.t0, setup.root_lo, setup.root_hi, 1e-13);
  out.beta = detail::derivative(target_fn, out.theta);
  const double sigma = model.sd(out.theta);

  switch (kind) {
    case Recursion::rm:
      if (!(setup.b > 0.0 && setup.b < 2.0 * out.beta)) throw ConfigError("need 0 < b < 2 beta", {"asymptotics.b"});
      out.b_effective = setup.b;
      out.formula_variance = sa::rm_variance(sigma * sigma / m, setup.b, out.beta);
      break;
    case Recursion::osa:
      if (m < 2) throw ConfigError("O-statistic recursion needs m >= 2", {"asymptotics.m"});
      if (model.noise != Noise::normal) throw ConfigError("closed-form v_O assumes normal noise", {"truth.noise"});
      out.b_effective = setup.b;
      out.formula_variance = sa::v_O(sigma, m, zp, setup.b, out.beta);
      break;
    case Recursion::logit_mle: {
      sa::AsymptoticInputs in;
      in.beta = out.beta;
      in.sigma_theta = sigma;
      in.zp = zp;
      in.noise = model.noise;
      out.beta_tilde = sa::beta_tilde(in);
      // Slope of the working model at theta on the probability scale.
      out.b_effective = setup.b_tilde * p * (1.0 - p);
      out.formula_variance = sa::v_T(p, m, out.b_effective, out.beta_tilde);
      break;
    }
  }

  const double start = setup.start.value_or(out.theta + 0.5);
  out.scaled_errors.assign(static_cast<std::size_t>(reps), 0.0);
  parallel_for(out.scaled_errors.size(), setup.threads, [&](std::size_t r) {
    Rng rng(seed, r);
    double x = start;
    std::vector<double> ys(static_cast<std::size_t>(m));
    std::optional<LogitMleRecursion> mle;
    if (kind == Recursion::logit_mle) mle.emplace(setup.b_tilde, p, start);
    for (int i = 1; i <= n; ++i) {
      const double mu = model.mean(x);
      const double s = model.sd(x);
      for (auto& y : ys) y = mu + s * noise::draw(model.noise, rng);
      switch (kind) {
        case Recursion::rm:
          x = sa::rm_step(x, numeric::mean(ys), i, setup.b, model.t0);
          break;
        case Recursion::osa:
          x = sa::osa_step(x, sa::o_statistic(ys, zp, model.noise), i, setup.b, model.t0);
          break;
        case Recursion::logit_mle: {
          int z = 0;
          for (double y : ys) z += (y > model.t0);
          x = mle->observe(static_cast<double>(z) / m);
          break;
        }
      }
    }
    out.scaled_errors[r] = std::sqrt(static_cast<double>(n)) * (x - out.theta);
  });

  // Spread about the true root, the quantity the closed form describes.
  numeric::CompensatedSum sq, sum;
  for (double e : out.scaled_errors) {
    sq.add(e * e);
    sum.add(e);
  }
  out.empirical_variance = sq.value() / reps;
  out.mean_scaled_error = sum.value() / reps;
  out.ratio = out.empirical_variance / out.formula_variance;
  // Approximate 95% interval from var(s^2)/sigma^4 = 2/reps under normality.
  const double half = 1.96 * std::sqrt(2.0 / reps);
  out.ratio_ci_low = out.ratio * (1.0 - half);
  out.ratio_ci_high = out.ratio * (1.0 + half);
  return out;
}

}  // namespace dosefind::sim
