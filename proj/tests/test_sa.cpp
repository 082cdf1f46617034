#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dosefind/core.hpp"
#include "dosefind/rng.hpp"
#include "dosefind/sa.hpp"
#include "oracles.hpp"

using namespace dosefind;
using namespace dosefind::sa;

TEST(RmStep, Examples) {
  EXPECT_EQ(rm_step(1.7, 0.3, 4, 2.0, 0.3), 1.7);
  EXPECT_DOUBLE_EQ(rm_step(1.0, 0.0, 1, 0.2, 0.2), 2.0);
}

TEST(RmStep, ConsistentOnLinearMean) {
  // M(x) = x, alpha = 0, sigma = 1, b = 1, n = 10^4.
  int close = 0;
  const int seeds = 200;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(1000 + s);
    double x = 1.0;
    for (int i = 1; i <= 10'000; ++i) x = rm_step(x, x + rng.normal(), i, 1.0, 0.0);
    close += std::abs(x) < 0.05;
  }
  EXPECT_GE(close, static_cast<int>(0.99 * seeds));
}

TEST(RmStep, CoherentWithBinaryOutcomes) {
  Rng rng(3);
  for (int t = 0; t < 10'000; ++t) {
    const double x = rng.uniform() * 6;
    const double p = 0.05 + 0.9 * rng.uniform();
    const double y = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const int i = 1 + static_cast<int>(rng.uniform() * 100);
    const double next = rm_step(x, y, i, 0.1 + rng.uniform(), p);
    if (y == 1.0) {
      EXPECT_LT(next, x);
    } else {
      EXPECT_GT(next, x);
    }
  }
}

TEST(LaiRobbins, IteratesEqualLeastSquaresRoots) {
  Rng rng(17);
  for (int seq = 0; seq < 100; ++seq) {
    const double alpha = rng.normal();
    const double b = 0.2 + 2.0 * rng.uniform();
    std::vector<double> xs = {rng.normal()}, ys;
    for (int i = 1; i <= 50; ++i) {
      ys.push_back(rng.normal() * 2.0);
      const double next = rm_step(xs.back(), ys.back(), i, b, alpha);
      const double ls = oracle::least_squares_root(xs, ys, alpha, b);
      EXPECT_NEAR(next, ls, 1e-9 * std::max(1.0, std::abs(ls)));
      xs.push_back(next);
    }
  }
}

TEST(DsaStep, Examples) {
  EXPECT_EQ(dsa_step(1, 0.0, 1, 0.2, 0.2, 5), 2);
  EXPECT_EQ(dsa_step(2, 0.5, 2, 0.2, 0.2, 5), 1);
  EXPECT_EQ(dsa_step(3, 0.2, 7, 0.2, 0.2, 5), 3);
}

TEST(DsaStep, GroupCoherentExhaustive) {
  for (double p : {0.1, 0.2, 0.25, 1.0 / 3, 0.5}) {
    for (double b : {0.05, 0.2, 1.0, 3.0}) {
      for (int m = 1; m <= 5; ++m) {
        for (int i = 1; i <= 50; ++i) {
          for (Level x = 1; x <= 6; ++x) {
            for (int z = 0; z <= m; ++z) {
              const double ybar = static_cast<double>(z) / m;
              const Level next = dsa_step(x, ybar, i, b, p, 6);
              if (ybar >= p) {
                EXPECT_LE(next, x);
              }
              if (ybar <= p) {
                EXPECT_GE(next, x);
              }
            }
          }
        }
      }
    }
  }
}

TEST(DsaFreezeIndex, Examples) {
  EXPECT_EQ(dsa_freeze_index(0.2, 0.2), 9);
  EXPECT_EQ(dsa_freeze_index(1.0, 0.5), 2);
  EXPECT_EQ(dsa_freeze_index(1e12, 0.3), 1);
  EXPECT_EQ(dsa_freeze_index(std::numeric_limits<double>::infinity(), 0.3), 1);
}

TEST(DsaFreezeIndex, IdentityFromFreezeOnAndNotBefore) {
  for (double b : {0.05, 0.2, 0.7, 2.0}) {
    for (double p : {0.1, 0.2, 0.33, 0.5, 0.8}) {
      const int f = dsa_freeze_index(b, p);
      for (int i = f; i < f + 40; ++i) {
        for (int g = 0; g <= 1000; ++g) {
          for (Level x = 1; x <= 5; ++x) EXPECT_EQ(dsa_step(x, g / 1000.0, i, b, p, 5), x);
        }
      }
      if (f > 1) {
        // One step earlier the worst-case move still reaches half a level.
        EXPECT_GE(std::max(p, 1 - p) / ((f - 1) * b), 0.5) << "b=" << b << " p=" << p;
      }
    }
  }
}

TEST(OStatistic, C4AndMedianCase) {
  EXPECT_NEAR(normal_c4(2), std::sqrt(2.0 / M_PI), 1e-14);
  EXPECT_NEAR(normal_c4(3), std::sqrt(M_PI) / 2.0, 1e-14);
  for (int m = 2; m < 30; ++m) EXPECT_NEAR(normal_c4(m), oracle::c4(m), 1e-13);
  EXPECT_EQ(o_statistic(1.3, 0.7, 3, 0.0), 1.3);
  EXPECT_THROW(o_statistic(1.0, 1.0, 1, 0.5), StateError);
}

TEST(OStatistic, UnbiasedForObjective) {
  const double M = 1.5, sigma = 0.8, p = 0.2;
  const double zp = oracle::upper_quantile(p);
  Rng rng(55);
  const int n = 1'000'000;
  double sum = 0.0;
  std::vector<double> ys(3);
  for (int r = 0; r < n; ++r) {
    for (auto& y : ys) y = M + sigma * rng.normal();
    sum += o_statistic(ys, zp);
  }
  EXPECT_NEAR(sum / n, M + zp * sigma, 0.003);
}

TEST(OStatistic, LogisticExpectedRatioIsCachedEstimate) {
  const auto e = expected_s_ratio(3, Noise::logistic);
  EXPECT_GT(e.se, 0.0);
  EXPECT_LT(e.se, 1e-3);
  EXPECT_LT(e.value, 1.0);
  const auto again = expected_s_ratio(3, Noise::logistic);
  EXPECT_EQ(e.value, again.value);
}

TEST(OsaStep, ConvergesToObjectiveRoot) {
  // M(x) = x, sigma = 0.1, p = 0.2, t0 = 2, b = f'(theta) = 1.
  const double p = 0.2, t0 = 2.0, sigma = 0.1;
  const double zp = oracle::upper_quantile(p);
  const double theta = t0 - zp * sigma;
  EXPECT_EQ(osa_step(1.2, t0, 5, 1.0, t0), 1.2);
  int close = 0;
  for (int s = 0; s < 500; ++s) {
    Rng rng(7000 + s);
    double x = 1.0;
    std::vector<double> ys(3);
    for (int i = 1; i <= 2000; ++i) {
      for (auto& y : ys) y = x + sigma * rng.normal();
      x = osa_step(x, o_statistic(ys, zp), i, 1.0, t0);
    }
    close += std::abs(x - theta) < 0.05;
  }
  EXPECT_GE(close, 475);
}

TEST(VirtualObservation, Examples) {
  EXPECT_EQ(virtual_observation(0.7, 1.0, 3.0, 3, 5), 0.7);
  EXPECT_NEAR(virtual_observation(0.0, 1.0, 2.4, 2, 5), 0.4, 1e-15);
  EXPECT_THROW(virtual_observation(0.0, 1.0, 2.4, 3, 5), StateError);
}

TEST(VirtualObservation, MeanIsLocallySlopedObjective) {
  // E(V | x*) = f(C(x*)) + b (x* - C(x*)) at x* = 2.4.
  const double b = 1.0, zp = oracle::upper_quantile(0.2);
  auto M = [](double x) { return 0.5 * x; };
  auto sd = [](double x) { return 0.3 + 0.1 * x; };
  const double xs = 2.4;
  const Level x = round_to_grid(xs, 5);
  Rng rng(8);
  const int n = 1'000'000;
  double sum = 0.0;
  std::vector<double> ys(2);
  for (int r = 0; r < n; ++r) {
    for (auto& y : ys) y = M(x) + sd(x) * rng.normal();
    sum += virtual_observation(o_statistic(ys, zp), b, xs, x, 5);
  }
  const double h = M(x) + zp * sd(x) + b * (xs - x);
  EXPECT_NEAR(sum / n, h, 0.01);
}

TEST(VoStep, Examples) {
  const VirtualState s{3.0, 3};
  EXPECT_EQ(vo_step(s, 1.5, 4, 0.5, 1.5, 5), s);
  const VirtualState s1{1.0, 1};
  const auto s2 = vo_step(s1, 1.5 - 0.5, 1, 0.5, 1.5, 5);
  EXPECT_DOUBLE_EQ(s2.x_star, 2.0);
  EXPECT_EQ(s2.x_given, 2);
}

TEST(VoStep, NeverFreezes) {
  Rng rng(21);
  for (int t = 0; t < 2000; ++t) {
    const int K = 5;
    const double b = 0.2 + rng.uniform();
    const double t0 = rng.normal();
    const double xs = 0.5 + K * rng.uniform();
    const VirtualState s{xs, round_to_grid(xs, K)};
    for (int i : {1, 10, 100, 10'000, 1'000'000}) {
      const auto th = vo_move_thresholds(s, i, b, t0, K);
      ASSERT_TRUE(th.up.has_value() || th.down.has_value());
      if (th.up) {
        EXPECT_GT(vo_step(s, *th.up - 1e-6 * std::max(1.0, std::abs(*th.up)), i, b, t0, K).x_given, s.x_given);
      }
      if (th.down) {
        EXPECT_LT(vo_step(s, *th.down + 1e-6 * std::max(1.0, std::abs(*th.down)), i, b, t0, K).x_given, s.x_given);
      }
    }
  }
}

TEST(LambdaM, Values) {
  EXPECT_NEAR(lambda_m(2), M_PI / 2, 1e-12);
  EXPECT_NEAR(lambda_m(3), 4 / M_PI, 1e-12);
  for (int m = 2; m < 60; ++m) {
    EXPECT_NEAR(lambda_m(m), 1.0 / (oracle::c4(m) * oracle::c4(m)), 1e-12);
    EXPECT_GT(lambda_m(m), lambda_m(m + 1));
    EXPECT_GT(lambda_m(m), 1.0);
  }
  // lambda_m = 1 + 1/(2m) + O(m^-2); at m = 50 the value is 1.0103.
  EXPECT_NEAR(lambda_m(50), 1.0 / (oracle::c4(50) * oracle::c4(50)), 1e-12);
  EXPECT_NEAR(lambda_m(50), 1.0103, 5e-5);
  EXPECT_NEAR(lambda_m(5000), 1.0, 2e-4);
  EXPECT_THROW(lambda_m(1), StateError);
}

TEST(Variances, Formulas) {
  const double s = 0.7, beta = 1.3;
  EXPECT_NEAR(v_O(s, 3, 0.0, 0.9, beta), s * s / (3 * 0.9 * (2 * beta - 0.9)), 1e-15);
  const double zp = 0.84;
  EXPECT_NEAR(v_O(s, 3, zp, beta, beta), s * s * (1 + 3 * zp * zp * (lambda_m(3) - 1)) / (3 * beta * beta), 1e-14);
  EXPECT_THROW(v_O(s, 3, zp, 2 * beta, beta), ConfigError);
  EXPECT_NEAR(v_T(0.5, 1, 0.8, 0.8), 0.25 / (0.8 * 0.8), 1e-15);
  EXPECT_THROW(v_T(0.5, 1, 1.6, 0.8), ConfigError);
  double prev = 0.0;
  for (double bt = 0.8; bt < 1.6; bt += 0.01) {
    const double v = v_T(0.3, 2, bt, 0.8);
    EXPECT_GT(v, prev);
    prev = v;
  }
  EXPECT_GT(v_T(0.3, 2, 1.6 - 1e-9, 0.8), 1e7);
}

TEST(Variances, OptimalBIsBeta) {
  const double beta = 1.7;
  const double best = v_O(1.0, 3, 0.84, beta, beta);
  for (double b = 0.01; b < 2 * beta; b += 0.01) EXPECT_GE(v_O(1.0, 3, 0.84, b, beta), best - 1e-15);
}

TEST(BetaTilde, Formula) {
  AsymptoticInputs in;
  in.beta = 2.0;
  in.sigma_theta = 0.5;
  in.zp = oracle::upper_quantile(0.2);
  EXPECT_NEAR(beta_tilde(in), 2.0 * oracle::phi(in.zp) / 0.5, 1e-14);
}

TEST(EfficiencyRatio, Values) {
  auto oracle_ratio = [](double p, int m) {
    const double z = oracle::upper_quantile(p);
    const double lam = 1.0 / (oracle::c4(m) * oracle::c4(m));
    return p * (1 - p) / (oracle::phi(z) * oracle::phi(z) * (1 + m * z * z * (lam - 1)));
  };
  EXPECT_NEAR(efficiency_ratio(0.2, 3), oracle_ratio(0.2, 3), 1e-10);
  EXPECT_NEAR(efficiency_ratio(0.2, 3), 1.291, 5e-4);
  for (double p = 0.01; p < 0.5; p += 0.01) {
    EXPECT_NEAR(efficiency_ratio(p, 3), efficiency_ratio(1 - p, 3), 1e-9);
    EXPECT_NEAR(efficiency_ratio(p, 4), oracle_ratio(p, 4), 1e-9);
  }
}

TEST(EfficiencyRatio, CurveMinimumForCohortsOfThree) {
  const auto curve = efficiency_curve(3, 1e-3);
  ASSERT_EQ(curve.size(), 999u);
  double best = 1e9;
  std::vector<double> argmins;
  for (const auto& c : curve) best = std::min(best, c.ratio);
  for (const auto& c : curve) {
    if (c.ratio < best + 1e-9) argmins.push_back(c.p);
  }
  EXPECT_NEAR(best, 1.238, 1e-3);
  ASSERT_FALSE(argmins.empty());
  for (double p : argmins) EXPECT_TRUE(std::abs(p - 0.12) <= 0.005 || std::abs(p - 0.88) <= 0.005) << p;
  // Local minima on each side of 0.5.
  auto local_min = [&](double lo, double hi) {
    double v = 1e9, at = 0;
    for (const auto& c : curve) {
      if (c.p >= lo && c.p <= hi && c.ratio < v) {
        v = c.ratio;
        at = c.p;
      }
    }
    return at;
  };
  EXPECT_NEAR(local_min(0.0, 0.5), 0.12, 0.005);
  EXPECT_NEAR(local_min(0.5, 1.0), 0.88, 0.005);
}
