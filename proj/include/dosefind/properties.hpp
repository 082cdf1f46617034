#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "dosefind/core.hpp"
#include "dosefind/engine.hpp"
#include "dosefind/sa.hpp"
#include "dosefind/sim.hpp"

namespace dosefind::properties {

enum class Verdict { pass, fail, inconclusive };

inline std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::pass: return "pass";
    case Verdict::fail: return "fail";
    case Verdict::inconclusive: return "inconclusive";
  }
  return "inconclusive";
}

/// A replayable trace: the outcomes of each cohort, the levels they were
/// treated at, and the flagged next level.
struct Witness {
  std::vector<Outcomes> outcomes;
  std::vector<Level> doses;  // doses.size() == outcomes.size() + 1
  std::string transition;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> replicate;

  /// "0,0 | 1,0": cohorts separated by bars.
  std::string path() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      if (i) os << " | ";
      for (std::size_t j = 0; j < outcomes[i].size(); ++j) {
        if (j) os << ",";
        os << outcomes[i][j];
      }
    }
    return os.str();
  }
};

struct PropertyReport {
  std::string property;
  Verdict verdict = Verdict::inconclusive;
  std::vector<Witness> witnesses;
  std::map<std::string, double> statistics;
  std::string note;
};

/// Group outcome with z toxicities out of m, toxicities listed first.
inline Outcomes group_outcome(int z, int m) {
  Outcomes o(static_cast<std::size_t>(m), 0.0);
  for (int j = 0; j < z; ++j) o[static_cast<std::size_t>(j)] = 1.0;
  return o;
}

/// True when moving from `from` to `to` after a cohort toxicity rate `ybar`
/// violates (group) coherence at target p.
inline bool incoherent(Level from, Level to, double ybar, double p) {
  return (to > from && ybar >= p) || (to < from && ybar <= p);
}

inline TrialState state_from_path(const Witness& w, int K, int m) {
  TrialState s(DoseGrid(K), m);
  for (std::size_t i = 0; i < w.outcomes.size(); ++i) {
    s.append(Cohort{w.doses[i], static_cast<double>(w.doses[i]), w.outcomes[i]});
  }
  return s;
}

/// Decisions the design can make at the end of a witness path.
inline std::vector<DoseDecision> replay_witness(const Design& design, const Witness& w, int K, int m) {
  return design.support(state_from_path(w, K, m));
}

namespace detail {

struct CoherenceWalk {
  const Design& design;
  int N;
  int m;
  double p;
  std::size_t max_witnesses = 16;
  PropertyReport& report;
  double paths = 0;
  double transitions = 0;
  double bad_up = 0;
  double bad_down = 0;

  void expand(const TrialState& state, const DoseDecision& d, std::vector<Level>& doses) {
    if (d.kind == DecisionKind::stop || state.cohorts() + 1 == N) {
      paths += 1;
      return;
    }
    doses.push_back(d.next_level);
    for (int z = 0; z <= m; ++z) {
      TrialState next = state;
      next.append(Cohort{d.next_level, d.assigned, group_outcome(z, m)});
      const double ybar = static_cast<double>(z) / m;
      for (const auto& d2 : design.support(next)) {
        if (d2.kind != DecisionKind::stop) {
          transitions += 1;
          if (incoherent(d.next_level, d2.next_level, ybar, p)) {
            (d2.next_level > d.next_level ? bad_up : bad_down) += 1;
            if (report.witnesses.size() < max_witnesses) {
              Witness w;
              for (const auto& c : next.history()) w.outcomes.push_back(c.outcomes);
              w.doses = doses;
              w.doses.push_back(d2.next_level);
              std::ostringstream os;
              os << "cohort " << next.cohorts() << ": level " << d.next_level << " -> " << d2.next_level
                 << " after toxicity rate " << ybar;
              w.transition = os.str();
              report.witnesses.push_back(std::move(w));
            }
          }
        }
        expand(next, d2, doses);
      }
    }
    doses.pop_back();
  }
};

}  // namespace detail

/// Exhaustive (group) coherence check over every outcome path of N cohorts.
/// Randomized designs are expanded over every decision in their support.
inline PropertyReport check_coherence(const Design& design, int K, int N, int m, double p,
                                      double path_budget = 4194304.0) {
  if (design.outcome_type() != OutcomeType::binary) {
    throw ConfigError("coherence is defined for binary outcomes", {"design.kind"});
  }
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("p must lie in (0, 1)", {"verify.target"});
  if (N < 1) throw ConfigError("horizon must be positive", {"verify.horizon"});
  design.check_compatible(K, m);
  const double planned = std::pow(m + 1.0, N - 1);
  if (planned > path_budget) {
    throw HorizonError("coherence: " + std::to_string(static_cast<long long>(planned)) +
                       " paths exceed the enumeration budget");
  }

  PropertyReport report;
  report.property = m == 1 ? "coherence" : "group-coherence";
  detail::CoherenceWalk walk{design, N, m, p, 16, report};
  TrialState empty(DoseGrid(K), m);
  std::vector<Level> doses;
  for (const auto& d : design.support(empty)) walk.expand(empty, d, doses);

  report.statistics["paths"] = walk.paths;
  report.statistics["transitions"] = walk.transitions;
  report.statistics["incoherent_escalations"] = walk.bad_up;
  report.statistics["incoherent_deescalations"] = walk.bad_down;
  report.statistics["horizon"] = N;
  report.statistics["cohort_size"] = m;
  report.verdict = (walk.bad_up + walk.bad_down) == 0 ? Verdict::pass : Verdict::fail;
  return report;
}

/// Analytic rigidity certificate for the discretized recursion.
///
/// DSA is rigid for every b > 0: from cohort dsa_freeze_index(b, p) on the
/// update cannot move a bounded rate. The witness is the shortest outcome
/// path (rates in increasing order) that ends in an absorbing state below a
/// level already visited; if none exists, the first absorbing state.
/// A rigid design fails the nonrigidity criterion, so the verdict is fail.
inline PropertyReport certify_dsa_rigidity(double b, double p, int K, Level start, int m = 2) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("p must lie in (0, 1)", {"design.target"});
  if (start < 1 || start > K) throw ConfigError("start level outside grid", {"design.start_level"});
  const int freeze = sa::dsa_freeze_index(b, p);
  if (freeze > 200000) throw HorizonError("freeze index too large to search for a witness path");

  auto absorbing = [&](Level x, int i) {
    return sa::dsa_step(x, 0.0, i, b, p, K) == x && sa::dsa_step(x, 1.0, i, b, p, K) == x;
  };

  struct Node {
    Level level;
    int index;  // cohort about to be treated
    Level highest;
    int parent;
    int z;
  };
  std::vector<Node> nodes{{start, 1, start, -1, -1}};
  std::map<std::tuple<Level, int, Level>, int> seen{{{start, 1, start}, 0}};
  int below = -1;
  int first_absorbed = -1;
  for (std::size_t head = 0; head < nodes.size(); ++head) {
    const Node n = nodes[head];
    if (absorbing(n.level, n.index)) {
      if (first_absorbed < 0) first_absorbed = static_cast<int>(head);
      if (n.level < n.highest) {
        below = static_cast<int>(head);
        break;
      }
      continue;
    }
    if (n.index > freeze) continue;
    for (int z = 0; z <= m; ++z) {
      const Level next = sa::dsa_step(n.level, static_cast<double>(z) / m, n.index, b, p, K);
      const auto key = std::make_tuple(next, n.index + 1, std::max(n.highest, next));
      if (seen.count(key)) continue;
      seen.emplace(key, static_cast<int>(nodes.size()));
      nodes.push_back({next, n.index + 1, std::max(n.highest, next), static_cast<int>(head), z});
    }
  }
  const int end = below >= 0 ? below : first_absorbed;

  PropertyReport report;
  report.property = "rigidity";
  report.verdict = Verdict::fail;
  report.statistics["freeze_index"] = freeze;
  report.statistics["b"] = b;
  report.statistics["target"] = p;
  Witness w;
  std::vector<int> chain;
  for (int at = end; at >= 0; at = nodes[static_cast<std::size_t>(at)].parent) chain.push_back(at);
  std::reverse(chain.begin(), chain.end());
  for (std::size_t i = 0; i < chain.size(); ++i) {
    const Node& n = nodes[static_cast<std::size_t>(chain[i])];
    w.doses.push_back(n.level);
    if (i > 0) w.outcomes.push_back(group_outcome(n.z, m));
  }
  const Node& last = nodes[static_cast<std::size_t>(end)];
  std::ostringstream os;
  os << "absorbed at level " << last.level << " from cohort " << last.index
     << (last.level < last.highest ? " after visiting level " + std::to_string(last.highest) : std::string());
  w.transition = os.str();
  report.statistics["absorbed_level"] = last.level;
  report.statistics["absorbed_from_cohort"] = last.index;
  report.witnesses.push_back(std::move(w));
  report.note = "analytic certificate: no update can move the dose from the freeze index on";
  return report;
}

struct RigidityOptions {
  double threshold = 0.01;     // exit probability regarded as evidence of rigidity
  double trigger_ybar = 0.5;   // first-visit toxicity rate at nu that is counted
  std::optional<TrialState> prefix;
  unsigned threads = 0;
};

/// Bounded-horizon Monte Carlo estimate of P{x_n outside I(pL, pU)}.
inline PropertyReport detect_rigidity_empirical(const Design& design, const ToxScenario& scenario, double pL,
                                                double pU, int horizon, int m, int reps, std::uint64_t seed,
                                                const RigidityOptions& opts = {}) {
  const double p = design.target();
  const int K = scenario.levels();
  const Level nu = true_mtd(scenario, p);
  if (!(pL < scenario.prob(nu) && scenario.prob(nu) < pU)) {
    throw ConfigError("need pL < pi(nu) < pU", {"verify.p_lower", "verify.p_upper"});
  }
  const sim::Truth truth = scenario;
  const int tail_from = std::max(1, horizon / 2);
  const int prefix_len = opts.prefix ? opts.prefix->cohorts() : 0;

  struct Rep {
    bool outside = false;
    bool confined = false;
    bool visited = false;
    bool triggered = false;
  };
  std::vector<Rep> out(static_cast<std::size_t>(reps));
  sim::parallel_for(out.size(), opts.threads, [&](std::size_t r) {
    const auto traj = sim::run_trial(design, truth, K, horizon, m, seed, r, opts.prefix ? &*opts.prefix : nullptr);
    Rep& rep = out[r];
    const auto final_level = traj.recommendation;
    rep.outside = !final_level || scenario.prob(*final_level) < pL || scenario.prob(*final_level) > pU;
    bool confined = final_level && *final_level < nu;
    for (std::size_t c = static_cast<std::size_t>(tail_from) - 1; c < traj.cohorts.size(); ++c) {
      confined = confined && traj.cohorts[c].level < nu;
    }
    rep.confined = confined;
    for (std::size_t c = static_cast<std::size_t>(prefix_len); c < traj.cohorts.size(); ++c) {
      if (traj.cohorts[c].level == nu) {
        rep.visited = true;
        rep.triggered = numeric::mean(traj.cohorts[c].outcomes) >= opts.trigger_ybar;
        break;
      }
    }
  });

  double outside = 0, confined = 0, visited = 0, triggered = 0;
  std::optional<std::size_t> example;
  for (std::size_t r = 0; r < out.size(); ++r) {
    outside += out[r].outside;
    confined += out[r].confined;
    visited += out[r].visited;
    triggered += out[r].triggered;
    if (out[r].confined && !example) example = r;
  }
  const double n = reps;
  auto se = [](double q, double count) { return count > 0 ? std::sqrt(q * (1.0 - q) / count) : 0.0; };

  PropertyReport report;
  report.property = "rigidity";
  const double exit_p = outside / n;
  const double exit_se = se(exit_p, n);
  const double conf_p = confined / n;
  const double trig_p = visited > 0 ? triggered / visited : 0.0;
  report.statistics["exit_probability"] = exit_p;
  report.statistics["exit_se"] = exit_se;
  report.statistics["confined_below_probability"] = conf_p;
  report.statistics["confined_below_se"] = se(conf_p, n);
  report.statistics["trigger_probability"] = trig_p;
  report.statistics["trigger_se"] = se(trig_p, visited);
  report.statistics["visited_nu"] = visited;
  report.statistics["horizon"] = horizon;
  report.statistics["reps"] = reps;
  report.statistics["nu"] = nu;

  if (exit_p - 2.0 * exit_se > opts.threshold) {
    report.verdict = Verdict::fail;
  } else if (exit_p + 2.0 * exit_se < opts.threshold) {
    report.verdict = Verdict::pass;
  } else {
    report.verdict = Verdict::inconclusive;
  }
  if (report.verdict == Verdict::fail) {
    std::size_t r = example.value_or(0);
    if (!example) {
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (out[i].outside) {
          r = i;
          break;
        }
      }
    }
    const auto traj = sim::run_trial(design, truth, K, horizon, m, seed, r, opts.prefix ? &*opts.prefix : nullptr);
    Witness w;
    for (const auto& c : traj.cohorts) {
      w.outcomes.push_back(c.outcomes);
      w.doses.push_back(c.level);
    }
    w.doses.push_back(traj.recommendation.value_or(kNoMtd));
    w.seed = seed;
    w.replicate = r;
    w.transition = "trajectory ends outside the window at horizon " + std::to_string(horizon);
    report.witnesses.push_back(std::move(w));
  }
  report.note = "finite-horizon Monte Carlo estimate";
  return report;
}

/// Smallest delta on the grid such that, for every scenario, at least
/// (1 - eps) of trajectories keep every dose from cohort n0 through the
/// final recommendation inside I(p - delta, p + delta).
inline PropertyReport estimate_indifference(const Design& design, const std::vector<ToxScenario>& scenarios,
                                            std::vector<double> delta_grid, int n0, int n_long, int m, int reps,
                                            std::uint64_t seed, double eps = 0.01, unsigned threads = 0) {
  if (scenarios.empty() || delta_grid.empty()) throw ConfigError("need scenarios and a delta grid", {"verify.scenarios"});
  if (n0 < 1 || n0 > n_long) throw ConfigError("need 1 <= n0 <= n_long", {"verify.n0"});
  std::sort(delta_grid.begin(), delta_grid.end());
  const double p = design.target();

  // Per scenario: each replicate's smallest admissible half-width.
  std::vector<std::vector<double>> widths;
  for (const auto& sc : scenarios) {
    std::vector<double> w(static_cast<std::size_t>(reps));
    const sim::Truth truth = sc;
    sim::parallel_for(w.size(), threads, [&](std::size_t r) {
      const auto traj = sim::run_trial(design, truth, sc.levels(), n_long, m, seed, r);
      double worst = 0.0;
      for (std::size_t c = static_cast<std::size_t>(n0) - 1; c < traj.cohorts.size(); ++c) {
        worst = std::max(worst, std::abs(sc.prob(traj.cohorts[c].level) - p));
      }
      worst = traj.recommendation ? std::max(worst, std::abs(sc.prob(*traj.recommendation) - p)) : 1.0;
      w[r] = worst;
    });
    widths.push_back(std::move(w));
  }

  PropertyReport report;
  report.property = "indifference";
  report.verdict = Verdict::inconclusive;
  for (double delta : delta_grid) {
    if (!(delta < p)) break;
    double worst_cover = 1.0;
    for (const auto& w : widths) {
      double inside = 0;
      for (double x : w) inside += (x <= delta + kTieTolerance);
      worst_cover = std::min(worst_cover, inside / static_cast<double>(w.size()));
    }
    if (worst_cover >= 1.0 - eps) {
      report.verdict = Verdict::pass;
      report.statistics["delta_hat"] = delta;
      report.statistics["coverage"] = worst_cover;
      break;
    }
  }
  report.statistics["n0"] = n0;
  report.statistics["n_long"] = n_long;
  report.statistics["reps"] = reps;
  report.statistics["eps"] = eps;
  report.note = "empirical half-width at a finite horizon; the asymptotic property is not verified";
  return report;
}

struct Perturbation {
  Level level;
  double prob;
};

/// Monte Carlo check of the unbiasedness orderings: P(x_N = d_k) must not
/// rise when p_i rises for i <= k, nor fall when p_i rises for i > k,
/// beyond two standard errors.
inline PropertyReport probe_unbiasedness(const Design& design, const ToxScenario& base, Level k,
                                         const std::vector<Perturbation>& perturbations, int N, int m, int reps,
                                         std::uint64_t seed, unsigned threads = 0) {
  const int K = base.levels();
  if (k < 1 || k > K) throw ConfigError("level k outside grid", {"verify.level"});
  std::vector<ToxScenario> variants;
  for (const auto& pert : perturbations) {
    if (pert.level < 1 || pert.level > K) throw ConfigError("perturbed level outside grid", {"verify.perturbations"});
    auto probs = base.probs();
    probs[static_cast<std::size_t>(pert.level - 1)] = pert.prob;
    ToxScenario sc(probs);
    if (base.is_strict() && !sc.is_strict()) {
      throw ConfigError("perturbation breaks monotonicity of the scenario", {"verify.perturbations"});
    }
    variants.push_back(std::move(sc));
  }

  auto selection = [&](const ToxScenario& sc) {
    const auto rep = sim::run_mc(design, sc, K, N, m, reps, seed, threads);
    const double q = rep.selection[static_cast<std::size_t>(k)];
    return std::make_pair(q, std::sqrt(q * (1.0 - q) / reps));
  };

  PropertyReport report;
  report.property = "unbiasedness";
  const auto [q0, se0] = selection(base);
  report.statistics["base_selection"] = q0;
  report.statistics["base_se"] = se0;
  bool ok = true;
  for (std::size_t j = 0; j < variants.size(); ++j) {
    const auto [q, se] = selection(variants[j]);
    const auto& pert = perturbations[j];
    const double delta = pert.prob - base.prob(pert.level);
    const double tol = 2.0 * std::sqrt(se0 * se0 + se * se);
    // Direction in which P(x_N = d_k) may move: down for i <= k, up for i > k.
    const double sign = (pert.level <= k ? -1.0 : 1.0) * (delta > 0 ? 1.0 : (delta < 0 ? -1.0 : 0.0));
    bool violated = false;
    if (sign < 0) violated = q > q0 + tol;
    if (sign > 0) violated = q < q0 - tol;
    if (sign == 0) violated = std::abs(q - q0) > tol;
    const std::string tag = "perturbation_" + std::to_string(j);
    report.statistics[tag + "_selection"] = q;
    report.statistics[tag + "_se"] = se;
    if (violated) {
      ok = false;
      Witness w;
      w.seed = seed;
      std::ostringstream os;
      os << "p_" << pert.level << " " << base.prob(pert.level) << " -> " << pert.prob << " moved P(x_N = d_" << k
         << ") from " << q0 << " to " << q;
      w.transition = os.str();
      report.witnesses.push_back(std::move(w));
    }
  }
  report.verdict = ok ? Verdict::pass : Verdict::fail;
  report.note = "orderings checked at 2-SE resolution";
  return report;
}

}  // namespace dosefind::properties
