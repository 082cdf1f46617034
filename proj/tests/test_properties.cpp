#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dosefind/config.hpp"
#include "dosefind/engine.hpp"
#include "dosefind/properties.hpp"

using namespace dosefind;
using namespace dosefind::properties;

namespace {

/// Escalates after a toxic cohort and stays otherwise.
class EscalateOnToxicity final : public Design {
 public:
  std::string kind() const override { return "escalate_on_toxicity"; }
  double target() const override { return 0.2; }
  Level start_level() const override { return 1; }
  DoseDecision recommend(const TrialState& s, Rng&) const override {
    if (s.empty()) return DoseDecision::move(1, 1, "start");
    const Level cur = s.last().level;
    const Level next = s.last().mean() > 0.0 ? std::min(cur + 1, s.levels()) : cur;
    return DoseDecision::move(cur, next, "planted");
  }
};

DesignPtr from_config(const nlohmann::json& cfg, int K, int m) { return config::build_design(cfg, K, m); }

const Witness& shortest(const PropertyReport& r) {
  const Witness* best = &r.witnesses.front();
  for (const auto& w : r.witnesses) {
    if (w.outcomes.size() < best->outcomes.size()) best = &w;
  }
  return *best;
}

}  // namespace

TEST(Coherence, BayesianCrmOneStagePasses) {
  const auto crm = from_config({{"design", {{"kind", "crm"}}}}, 5, 1);
  const auto r = check_coherence(*crm, 5, 10, 1, 0.2);
  EXPECT_EQ(r.verdict, Verdict::pass);
  EXPECT_TRUE(r.witnesses.empty());
  EXPECT_EQ(r.statistics.at("paths"), 512.0);
  EXPECT_EQ(r.property, "coherence");
}

TEST(Coherence, LeafCountIsTwoToTheNMinusOne) {
  ConstantDose d(2, 0.2);
  for (int N = 1; N <= 12; ++N) {
    EXPECT_EQ(check_coherence(d, 3, N, 1, 0.2).statistics.at("paths"), std::pow(2.0, N - 1));
  }
  EXPECT_EQ(check_coherence(d, 3, 6, 3, 0.2).statistics.at("paths"), std::pow(4.0, 5));
}

TEST(Coherence, PlantedBugFailsWithReplayableWitness) {
  EscalateOnToxicity bug;
  const auto r = check_coherence(bug, 4, 6, 1, 0.2);
  ASSERT_EQ(r.verdict, Verdict::fail);
  ASSERT_FALSE(r.witnesses.empty());
  const auto& w = shortest(r);
  ASSERT_EQ(w.outcomes.size(), 1u);
  EXPECT_EQ(w.outcomes[0], Outcomes{1.0});
  EXPECT_EQ(w.doses, (std::vector<Level>{1, 2}));
  EXPECT_EQ(w.path(), "1");
  for (const auto& wi : r.witnesses) {
    const auto replay = replay_witness(bug, wi, 4, 1);
    ASSERT_EQ(replay.size(), 1u);
    EXPECT_EQ(replay[0].next_level, wi.doses.back());
    EXPECT_TRUE(incoherent(wi.doses[wi.doses.size() - 2], replay[0].next_level, wi.outcomes.back()[0], 0.2));
  }
  EXPECT_GT(r.statistics.at("incoherent_escalations"), 0.0);
}

TEST(Coherence, DsaGroupVersionPasses) {
  for (double b : {0.05, 0.2, 1.0}) {
    for (double p : {0.2, 0.33}) {
      DiscretizedSa d(b, p);
      const auto r = check_coherence(d, 5, 12, 2, p);
      EXPECT_EQ(r.verdict, Verdict::pass) << b << " " << p;
      EXPECT_EQ(r.property, "group-coherence");
      EXPECT_EQ(r.statistics.at("paths"), std::pow(3.0, 11));
    }
  }
}

TEST(Coherence, GuardMakesEveryCatalogDesignCoherent) {
  for (const auto& info : config::design_catalog()) {
    if (info.outcome != "binary") continue;
    const int m = info.kind == "three_plus_three" ? 3 : (info.kind == "biased_coin" ? 1 : 2);
    nlohmann::json cfg = {{"design", {{"kind", info.kind}, {"coherence_guard", true}, {"level", 3}}}};
    const auto d = from_config(cfg, 4, m);
    const auto r = check_coherence(*d, 4, 7, m, d->target());
    EXPECT_EQ(r.verdict, Verdict::pass) << info.kind;
  }
}

TEST(Coherence, RandomizedDesignCheckedOverSupport) {
  BiasedCoin coin(0.2);
  const auto r = check_coherence(coin, 4, 8, 1, 0.2);
  EXPECT_EQ(r.verdict, Verdict::pass);
  // The coin either escalates or stays after a nontoxic outcome, so the
  // enumeration sees more leaves than a deterministic rule would.
  EXPECT_GT(r.statistics.at("paths"), std::pow(2.0, 7));
}

TEST(Coherence, HorizonBudget) {
  ConstantDose d(1, 0.2);
  EXPECT_THROW(check_coherence(d, 3, 24, 1, 0.2), HorizonError);
  EXPECT_THROW(check_coherence(d, 3, 10, 1, 0.2, 100.0), HorizonError);
}

TEST(DsaRigidity, WorkedTrapWitness) {
  const auto r = certify_dsa_rigidity(0.2, 0.2, 5, 1, 2);
  EXPECT_EQ(r.verdict, Verdict::fail);
  EXPECT_EQ(r.statistics.at("freeze_index"), 9.0);
  ASSERT_EQ(r.witnesses.size(), 1u);
  const auto& w = r.witnesses[0];
  EXPECT_EQ(w.path(), "0,0 | 1,0");
  EXPECT_EQ(w.doses, (std::vector<Level>{1, 2, 1}));
  // Replaying the witness and continuing with any outcomes stays at level 1.
  DiscretizedSa dsa(0.2, 0.2);
  auto s = state_from_path(w, 5, 2);
  Rng rng(0);
  EXPECT_EQ(dsa.recommend(s, rng).next_level, 1);
  for (int i = 0; i < 40; ++i) {
    s.append(Cohort{1, 1.0, group_outcome(i % 3, 2)});
    EXPECT_EQ(dsa.recommend(s, rng).next_level, 1);
  }
}

TEST(DsaRigidity, HugeBFreezesImmediately) {
  const auto r = certify_dsa_rigidity(1e9, 0.3, 4, 2, 2);
  EXPECT_EQ(r.verdict, Verdict::fail);
  EXPECT_EQ(r.statistics.at("freeze_index"), 1.0);
  EXPECT_EQ(r.witnesses[0].doses, (std::vector<Level>{2}));
}

TEST(EmpiricalRigidity, IsotonicTrap) {
  IsotonicDesign iso(0.2);
  const ToxScenario sc({0.05, 0.20, 0.45});
  TrialState prefix(DoseGrid(3), 2);
  prefix.append(Cohort{1, 1.0, {0.0, 0.0}});
  RigidityOptions opts;
  opts.prefix = prefix;
  const auto r = detect_rigidity_empirical(iso, sc, 0.1, 0.3, 20, 2, 20000, 5, opts);
  EXPECT_EQ(r.verdict, Verdict::fail);
  EXPECT_GE(r.statistics.at("confined_below_probability"), 0.34);
  EXPECT_NEAR(r.statistics.at("trigger_probability"), 0.36, 4 * r.statistics.at("trigger_se"));
  ASSERT_FALSE(r.witnesses.empty());
  const auto& w = r.witnesses[0];
  ASSERT_TRUE(w.seed && w.replicate);
  const auto traj = sim::run_trial(iso, sc, 3, 20, 2, *w.seed, *w.replicate, &prefix);
  EXPECT_EQ(traj.doses(), std::vector<Level>(w.doses.begin(), w.doses.end() - 1));
}

TEST(EmpiricalRigidity, ConstantAtMtdNeverExits) {
  ConstantDose d(2, 0.2);
  const auto r = detect_rigidity_empirical(d, ToxScenario({0.05, 0.2, 0.45}), 0.1, 0.3, 10, 1, 2000, 1);
  EXPECT_EQ(r.statistics.at("exit_probability"), 0.0);
  EXPECT_EQ(r.verdict, Verdict::pass);
  EXPECT_THROW(detect_rigidity_empirical(d, ToxScenario({0.05, 0.2, 0.45}), 0.25, 0.3, 10, 1, 10, 1), ConfigError);
}

TEST(EmpiricalRigidity, CrmExitProbabilityFallsWithHorizon) {
  const auto crm = from_config({{"design", {{"kind", "crm"}}}}, 5, 1);
  const ToxScenario sc({0.02, 0.06, 0.20, 0.40, 0.60});
  std::vector<double> exits, ses;
  for (int horizon : {5, 20, 60}) {
    const auto r = detect_rigidity_empirical(*crm, sc, 0.1, 0.3, horizon, 1, 600, 9);
    exits.push_back(r.statistics.at("exit_probability"));
    ses.push_back(r.statistics.at("exit_se"));
  }
  for (std::size_t i = 1; i < exits.size(); ++i) EXPECT_LE(exits[i], exits[i - 1] + 2 * ses[i]);
  EXPECT_LT(exits.back() + 2 * ses.back(), exits.front());
}

TEST(Indifference, ConstantAtTargetGetsSmallestDelta) {
  ConstantDose d(2, 0.2);
  const auto r = estimate_indifference(d, {ToxScenario({0.1, 0.2, 0.3})}, {0.05, 0.01, 0.1}, 3, 10, 1, 200, 1);
  EXPECT_EQ(r.verdict, Verdict::pass);
  EXPECT_EQ(r.statistics.at("delta_hat"), 0.01);
}

TEST(Indifference, InconclusiveWhenNoDeltaQualifies) {
  ConstantDose d(1, 0.2);
  const auto r = estimate_indifference(d, {ToxScenario({0.01, 0.2, 0.3})}, {0.01, 0.05, 0.1}, 3, 10, 1, 100, 1);
  EXPECT_EQ(r.verdict, Verdict::inconclusive);
}

TEST(Indifference, CrmDeltaNonincreasingInHorizon) {
  const auto crm = from_config({{"design", {{"kind", "crm"}}}}, 5, 1);
  const std::vector<double> grid = {0.01, 0.02, 0.03, 0.05, 0.07, 0.1, 0.15};
  const ToxScenario shallow({0.10, 0.15, 0.20, 0.25, 0.30});
  double prev = 1.0;
  for (int n : {20, 40, 100}) {
    const auto r = estimate_indifference(*crm, {shallow}, grid, n / 2, n, 1, 150, 3, 0.05);
    const double d = r.verdict == Verdict::pass ? r.statistics.at("delta_hat") : 1.0;
    EXPECT_LE(d, prev) << n;
    prev = d;
  }
  EXPECT_LT(prev, 1.0);
}

TEST(Indifference, SteepCurveFavoursTheMtd) {
  // Consistency for the middle level under a steep curve, checked as an
  // ordering of selection rates against a shallow curve.
  const auto crm = from_config({{"design", {{"kind", "crm"}}}}, 5, 1);
  const auto steep = sim::run_mc(*crm, ToxScenario({0.01, 0.03, 0.20, 0.50, 0.80}), 5, 40, 1, 300, 3);
  const auto shallow = sim::run_mc(*crm, ToxScenario({0.10, 0.15, 0.20, 0.25, 0.30}), 5, 40, 1, 300, 3);
  EXPECT_GT(steep.pcs - 2 * steep.pcs_se, shallow.pcs + 2 * shallow.pcs_se);
}

TEST(Unbiasedness, IdenticalPerturbationIsNeutral) {
  const auto crm = from_config({{"design", {{"kind", "crm"}}}}, 4, 1);
  const ToxScenario base({0.05, 0.15, 0.30, 0.50});
  const auto r = probe_unbiasedness(*crm, base, 2, {{3, 0.30}}, 12, 1, 400, 2);
  EXPECT_EQ(r.verdict, Verdict::pass);
  EXPECT_EQ(r.statistics.at("perturbation_0_selection"), r.statistics.at("base_selection"));
}

TEST(Unbiasedness, RaisingAHigherLevelDoesNotLowerSelection) {
  const auto crm = from_config({{"design", {{"kind", "crm"}}}}, 4, 1);
  const ToxScenario base({0.05, 0.15, 0.30, 0.50});
  const auto r = probe_unbiasedness(*crm, base, 2, {{4, 0.70}, {1, 0.10}}, 12, 1, 1000, 2);
  EXPECT_EQ(r.verdict, Verdict::pass);
  EXPECT_THROW(probe_unbiasedness(*crm, base, 2, {{2, 0.6}}, 12, 1, 10, 2), ConfigError);
}

TEST(Unbiasedness, StepwiseThreePlusThreeOverSteepeningFamily) {
  ThreePlusThree d(0.2);
  double prev = -1.0;
  for (double gap : {0.05, 0.15, 0.25}) {
    const ToxScenario sc({0.2 - gap > 0 ? 0.2 - gap : 0.01, 0.2, std::min(0.2 + 2 * gap, 0.95)});
    const auto rep = sim::run_mc(d, sc, 3, 6, 3, 4000, 4);
    EXPECT_GE(rep.pcs, prev - 2 * rep.pcs_se);
    prev = rep.pcs;
  }
}
