#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numbers>

#include "qsd/interpolation.hpp"
#include "qsd/montecarlo.hpp"
#include "qsd/random.hpp"
#include "qsd/stats.hpp"

using namespace qsd;

namespace {

DriftField logistic() { return drift_from_growth(logistic_growth(1.0, 1.0, 1.0)); }

const SpectralDecomposition& logistic_fixture() {
  static const SpectralDecomposition s = solve_default(logistic());
  return s;
}

const SpectralDecomposition& ou_fixture() {
  static const SpectralDecomposition s = build_and_solve(ou_drift(1.0), {1e-4, 8.0, 4096, GridKind::uniform}, 40);
  return s;
}

std::size_t absorbed_by(const PathBatch& b, double t) {
  std::size_t n = 0;
  for (double v : b.T0) n += v <= t;
  return n;
}

}  // namespace

TEST(Random, PhiloxKnownAnswers) {
  auto a = philox4x32_10({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(a[0], 0x6627e8d5u);
  EXPECT_EQ(a[1], 0xe169c58du);
  EXPECT_EQ(a[2], 0xbc57ac4cu);
  EXPECT_EQ(a[3], 0x9b00dbd8u);
  auto b = philox4x32_10({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
  EXPECT_EQ(b[0], 0x408f276du);
  EXPECT_EQ(b[1], 0x41c83b0eu);
  EXPECT_EQ(b[2], 0xa20bc7c6u);
  EXPECT_EQ(b[3], 0x6d5451fdu);
  auto c = philox4x32_10({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(c[0], 0xd16cfe09u);
  EXPECT_EQ(c[1], 0x94fdccebu);
  EXPECT_EQ(c[2], 0x5001e420u);
  EXPECT_EQ(c[3], 0x24126ea1u);
}

TEST(Random, StreamsAndMoments) {
  PhiloxStream a(7, 3), b(7, 3), c(7, 4), d(7, 3, 1);
  EXPECT_EQ(a.next_u64(), b.next_u64());
  PhiloxStream a2(7, 3);
  auto first = a2.next_u64();
  EXPECT_NE(first, c.next_u64());
  EXPECT_NE(first, d.next_u64());
  PhiloxStream r(11, 0);
  double s = 0, s2 = 0, u = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double z = r.normal();
    s += z;
    s2 += z * z;
    double v = r.uniform();
    ASSERT_GT(v, 0.0);
    ASSERT_LT(v, 1.0);
    u += v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
  EXPECT_NEAR(u / n, 0.5, 0.003);
}

TEST(Stats, KolmogorovSmirnovAndFit) {
  std::vector<double> grid;
  for (int i = 0; i < 1000; ++i) grid.push_back((i + 0.5) / 1000.0);
  EXPECT_NEAR(ks_statistic(grid, [](double x) { return x; }), 0.0005, 1e-12);
  EXPECT_DOUBLE_EQ(ks_two_sample(grid, grid), 0.0);
  std::vector<double> shifted;
  for (double g : grid) shifted.push_back(g + 0.1);
  EXPECT_NEAR(ks_two_sample(grid, shifted), 0.1, 2e-3);
  std::vector<double> x{0, 1, 2, 3, 4}, y{1, 3, 5, 7, 9};
  auto f = linear_fit(x, y);
  EXPECT_NEAR(f.slope, 2.0, 1e-14);
  EXPECT_NEAR(f.intercept, 1.0, 1e-14);
  EXPECT_NEAR(f.r2, 1.0, 1e-14);
  EXPECT_THROW(ks_statistic({}, [](double v) { return v; }), PreconditionError);
}

TEST(Interpolation, PchipIsMonotoneAndExactOnLines) {
  Pchip line({0, 1, 3, 4}, {1, 3, 7, 9});
  for (double t : {0.0, 0.3, 1.7, 3.9}) {
    EXPECT_NEAR(line(t), 1 + 2 * t, 1e-14);
    EXPECT_NEAR(line.derivative(t), 2.0, 1e-14);
  }
  Pchip step({0, 1, 2, 3, 4}, {0, 0, 1, 1, 1});
  double prev = -1.0;
  for (int i = 0; i <= 400; ++i) {
    double v = step(i / 100.0);
    EXPECT_GE(v, prev - 1e-15);
    EXPECT_GE(v, -1e-15);
    EXPECT_LE(v, 1.0 + 1e-15);
    prev = v;
  }
  EXPECT_THROW(Pchip({0, 0}, {1, 2}), PreconditionError);
}

TEST(MonteCarlo, DeterministicAcrossWorkerCounts) {
  SimConfig cfg;
  cfg.dt = 1e-3;
  cfg.t_max = 2.0;
  cfg.n_paths = 600;
  cfg.seed = 42;
  cfg.workers = 1;
  auto a = simulate_x(logistic(), 1.0, cfg);
  cfg.workers = 3;
  auto b = simulate_x(logistic(), 1.0, cfg);
  auto c = simulate_x(logistic(), 1.0, cfg);
  ASSERT_EQ(a.T0.size(), b.T0.size());
  for (std::size_t p = 0; p < a.T0.size(); ++p) {
    EXPECT_EQ(std::memcmp(&a.T0[p], &b.T0[p], sizeof(double)), 0);
    EXPECT_EQ(std::memcmp(&b.T0[p], &c.T0[p], sizeof(double)), 0);
  }
  EXPECT_EQ(a.states, b.states);
  cfg.seed = 43;
  auto d = simulate_x(logistic(), 1.0, cfg);
  EXPECT_NE(a.T0, d.T0);
}

TEST(MonteCarlo, PathBatchInvariants) {
  SimConfig cfg;
  cfg.t_max = 3.0;
  cfg.n_paths = 500;
  cfg.record_dt = 0.01;
  auto b = simulate_x(logistic(), 0.5, cfg);
  double prev = 1.0;
  for (std::size_t r = 0; r < b.times.size(); ++r) {
    double s = b.survival(b.times[r]);
    EXPECT_LE(s, prev);
    prev = s;
  }
  for (std::size_t p = 0; p < b.n_paths(); ++p) {
    for (std::size_t r = 0; r < b.times.size(); ++r) {
      if (b.times[r] < b.T0[p]) {
        EXPECT_GT(b.state(p, r), cfg.delta);
      } else {
        EXPECT_EQ(b.state(p, r), 0.0);
      }
    }
    if (!b.censored(p)) {
      EXPECT_GT(b.T0[p], 0.0);
      EXPECT_LE(b.T0[p], cfg.t_max);
    }
  }
  EXPECT_THROW(b.record_index(0.005), PreconditionError);
  EXPECT_THROW(simulate_x(logistic(), cfg.delta / 2, cfg), PreconditionError);
  SimConfig bad = cfg;
  bad.dt = 5.0;
  EXPECT_THROW(simulate_x(logistic(), 1.0, bad), PreconditionError);
}

TEST(MonteCarlo, BrownianSurvivalReflectionPrinciple) {
  SimConfig cfg;
  cfg.dt = 1e-2;
  cfg.t_max = 1.0;
  cfg.n_paths = 40000;
  cfg.delta = 0.0;
  cfg.seed = 5;
  auto zero = custom_drift("0");
  auto b = simulate_x(zero, 1.0, cfg);
  for (double t : {0.25, 0.5, 1.0}) {
    double exact = 2.0 * normal_cdf(1.0 / std::sqrt(t)) - 1.0;
    double se = std::sqrt(exact * (1 - exact) / cfg.n_paths);
    EXPECT_NEAR(b.survival(t), exact, 3 * se) << "t=" << t;
  }
}

TEST(MonteCarlo, BridgeIncreasesAbsorption) {
  SimConfig cfg;
  cfg.dt = 2e-2;
  cfg.t_max = 1.0;
  cfg.n_paths = 20000;
  cfg.delta = 0.0;
  auto zero = custom_drift("0");
  auto with = simulate_x(zero, 1.0, cfg);
  cfg.bridge_correction = false;
  auto without = simulate_x(zero, 1.0, cfg);
  EXPECT_GT(absorbed_by(with, 1.0), absorbed_by(without, 1.0));
  // Same Brownian increments: every threshold-only absorption is also a
  // bridge absorption, no later.
  for (std::size_t p = 0; p < with.n_paths(); ++p) EXPECT_LE(with.T0[p], without.T0[p]);
  double exact = 1.0 - (2.0 * normal_cdf(1.0) - 1.0);
  double se = std::sqrt(exact * (1 - exact) / cfg.n_paths);
  double bridge_err = std::fabs(absorbed_by(with, 1.0) / double(cfg.n_paths) - exact);
  double plain_err = std::fabs(absorbed_by(without, 1.0) / double(cfg.n_paths) - exact);
  EXPECT_LT(bridge_err, 3 * se);
  EXPECT_GT(plain_err, 3 * se);
}

TEST(MonteCarlo, OrnsteinUhlenbeckRate) {
  SimConfig cfg;
  cfg.dt = 2e-3;
  cfg.t_max = 3.0;
  cfg.n_paths = 20000;
  cfg.record_dt = 0.1;
  auto b = simulate_x(ou_drift(1.0), 1.0, cfg);
  auto r = estimate_lambda1(b, 1.0, 3.0);
  EXPECT_NEAR(r.rate, ou_fixture().lambdas[0], 3 * r.stderr);
  EXPECT_TRUE(r.advisory.empty());
  EXPECT_THROW(estimate_lambda1(b, 1.0, 50.0), PreconditionError);
}

TEST(MonteCarlo, TimeStepRefinementOnOrnsteinUhlenbeck) {
  // Both runs see the same Brownian paths, so the difference isolates the
  // discretization effect.
  SimConfig coarse;
  coarse.dt = 2e-3;
  coarse.t_max = 3.0;
  coarse.n_paths = 20000;
  coarse.record_dt = 0.1;
  coarse.noise_refinement = 1;
  SimConfig fine = coarse;
  fine.dt = 1e-3;
  fine.noise_refinement = 0;
  auto a = estimate_lambda1(simulate_x(ou_drift(1.0), 1.0, coarse), 1.0, 3.0);
  auto b = estimate_lambda1(simulate_x(ou_drift(1.0), 1.0, fine), 1.0, 3.0);
  EXPECT_LT(std::fabs(a.rate - b.rate), b.stderr);
}

TEST(MonteCarlo, StepRejectionNearSingularDrift) {
  // Steep drift near the threshold: overflow is handled by halving.
  auto d = custom_drift("1/x^3");
  SimConfig cfg;
  cfg.dt = 1e-2;
  cfg.t_max = 0.5;
  cfg.n_paths = 200;
  cfg.delta = 1e-12;
  auto b = simulate_x(d, 0.05, cfg);
  for (double v : b.states) EXPECT_TRUE(std::isfinite(v));
  for (double v : b.T0) EXPECT_FALSE(std::isnan(v));
}

TEST(MonteCarlo, CriticalFellerExtinction) {
  auto g = linear_growth(0.0, 1.0);
  SimConfig cfg;
  cfg.dt = 1e-3;
  cfg.t_max = 2.0;
  cfg.n_paths = 20000;
  cfg.record_dt = 0.5;
  auto b = simulate_z(g, 1.0, cfg);
  for (double t : {1.0, 2.0}) {
    double exact = std::exp(-2.0 * 1.0 / (g.gamma * t));
    double se = std::sqrt(exact * (1 - exact) / cfg.n_paths);
    EXPECT_NEAR(1.0 - b.survival(t), exact, 3 * se) << "t=" << t;
  }
  EXPECT_GT(b.scale_gamma, 0.0);
  EXPECT_NEAR(b.state(0, 0), 1.0, 1e-12);
}

TEST(MonteCarlo, SubcriticalFellerSurvivorsAreExponential) {
  auto g = linear_growth(-1.0, 1.0);
  SimConfig cfg;
  cfg.dt = 2e-3;
  cfg.t_max = 4.0;
  cfg.n_paths = 40000;
  cfg.record_dt = 1.0;
  auto b = simulate_z(g, 1.0, cfg);
  auto surv = b.survivors(4.0);
  ASSERT_GT(surv.size(), 500u);
  const double rate = 2.0 * 1.0 / g.gamma;
  double ks = ks_statistic(surv, [&](double z) { return 1.0 - std::exp(-rate * z); });
  EXPECT_LT(ks, 0.05);
}

TEST(MonteCarlo, ZeroStartIsAbsorbed) {
  SimConfig cfg;
  cfg.t_max = 0.1;
  cfg.n_paths = 50;
  auto b = simulate_z(linear_growth(1.0, 1.0), 0.0, cfg);
  for (double v : b.T0) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(b.survival(0.0), 0.0);
  auto law = conditional_histogram(b, 0.0, {0.0, 1.0, 2.0});
  EXPECT_TRUE(law.empty);
  EXPECT_THROW(simulate_z(linear_growth(1.0, 1.0), -1.0, cfg), DomainError);
}

TEST(MonteCarlo, HistogramAtTimeZeroIsPointMass) {
  SimConfig cfg;
  cfg.t_max = 0.1;
  cfg.n_paths = 100;
  auto b = simulate_x(logistic(), 1.3, cfg);
  auto law = conditional_histogram(b, 0.0, {0.0, 0.5, 1.0, 1.5, 2.0});
  EXPECT_FALSE(law.empty);
  EXPECT_EQ(law.masses, (std::vector<double>{0.0, 0.0, 1.0, 0.0}));
  EXPECT_EQ(law.n_survivors, 100u);
}

TEST(MonteCarlo, LogisticYaglomLimitAndStationarity) {
  const auto& s = logistic_fixture();
  auto nu = yaglom_measure(s);
  SimConfig cfg;
  cfg.dt = 1e-3;
  cfg.t_max = 6.0;
  cfg.n_paths = 30000;
  cfg.record_dt = 0.5;
  cfg.seed = 2024;
  auto b = simulate_x(logistic(), 1.0, cfg);
  auto late = b.survivors(6.0);
  EXPECT_LT(ks_statistic(late, [&](double x) { return nu.cdf_at(x); }), 0.05);

  std::vector<double> edges;
  for (int i = 0; i <= 20; ++i) edges.push_back(0.2 * i);
  auto h3 = conditional_histogram(b, 3.0, edges);
  auto h6 = conditional_histogram(b, 6.0, edges);
  double total = 0.0;
  for (std::size_t i = 0; i < h6.masses.size(); ++i) {
    total += h6.masses[i];
    double se = std::hypot(h3.stderrs[i], h6.stderrs[i]);
    EXPECT_LE(std::fabs(h3.masses[i] - h6.masses[i]), 3 * se + 1e-12) << "bin " << i;
  }
  EXPECT_NEAR(total, 1.0, 1e-3);

  auto r = estimate_lambda1(b, 3.0, 6.0);
  EXPECT_NEAR(r.rate, s.lambdas[0], 0.05 * s.lambdas[0]);
}

TEST(MonteCarlo, StartFromYaglomDecaysExponentially) {
  const auto& s = logistic_fixture();
  auto nu = yaglom_measure(s);
  SimConfig cfg;
  cfg.dt = 1e-3;
  cfg.t_max = 3.0;
  cfg.n_paths = 20000;
  cfg.record_dt = 0.1;
  auto b = simulate_x(logistic(), yaglom_inverse_cdf(nu), cfg);
  auto start = b.survivors(0.0);
  EXPECT_LT(ks_statistic(start, [&](double x) { return nu.cdf_at(x); }), 0.02);
  auto r = estimate_lambda1(b, 0.0, 3.0);
  EXPECT_NEAR(r.rate, s.lambdas[0], 0.05 * s.lambdas[0]);
  EXPECT_GT(r.r2, 0.99);
  for (double t : {1.0, 2.0, 3.0}) {
    double exact = std::exp(-s.lambdas[0] * t);
    double se = std::sqrt(exact * (1 - exact) / cfg.n_paths);
    EXPECT_NEAR(b.survival(t), exact, 4 * se + 0.01 * exact) << "t=" << t;
  }
}

TEST(MonteCarlo, QProcessOrnsteinUhlenbeck) {
  const auto& s = ou_fixture();
  QProcessDrift drift(s);
  for (double x : {0.3, 1.0, 2.0}) EXPECT_NEAR(drift(x), -x + 1.0 / x, 2e-3 * (1 + 1 / x)) << "x=" << x;

  SimConfig cfg;
  cfg.dt = 1e-3;
  cfg.t_max = 5.0;
  cfg.n_paths = 5000;
  cfg.record_dt = 1.0;
  auto b = simulate_qprocess(s, 1.0, cfg);
  for (double v : b.T0) EXPECT_TRUE(std::isinf(v));
  auto pts = b.survivors(5.0);
  ASSERT_EQ(pts.size(), 5000u);
  for (double v : pts) EXPECT_GT(v, cfg.delta);
  auto stationary_cdf = [](double x) { return std::erf(x) - 2.0 / std::sqrt(std::numbers::pi) * x * std::exp(-x * x); };
  EXPECT_LT(ks_statistic(pts, stationary_cdf), 0.05);

  // Stochastic domination of nu_1 with cdf 1 - e^{-x^2}.
  std::vector<double> sorted = pts;
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  for (double e = 0.2; e <= 3.0; e += 0.2) {
    double emp = static_cast<double>(std::upper_bound(sorted.begin(), sorted.end(), e) - sorted.begin()) / n;
    double yag = 1.0 - std::exp(-e * e);
    EXPECT_LE(emp, yag + 3 * std::sqrt(emp * (1 - emp) / n) + 1e-12) << "edge " << e;
  }
  EXPECT_THROW(simulate_qprocess(s, 100.0, cfg), PreconditionError);
}

TEST(MonteCarlo, SupercriticalFellerConditionedIsSubcritical) {
  for (double r : {0.5, 1.0, 2.0}) {
    for (double gamma : {1.0, 2.0}) {
      auto c = condition_on_extinction(linear_growth(r, gamma));
      for (double z : {0.1, 1.0, 10.0, 100.0}) {
        EXPECT_NEAR(c.model.h(z), -r * z, 1e-6 * r * z) << "r=" << r << " gamma=" << gamma << " z=" << z;
      }
      for (double q : c.ratios) EXPECT_NEAR(q, 1.0, 1e-6);
    }
  }
}

TEST(MonteCarlo, ConditionedDriftIsAsymptoticallyMinusH) {
  auto g = make_polynomial_growth({0.0, 1.0, 0.5}, 1.0, "z + z^2/2");
  auto c = condition_on_extinction(g);
  ASSERT_EQ(c.ratios.size(), c.probes.size());
  EXPECT_NEAR(c.ratios.back(), 1.0, 0.01);
  double prev_err = std::fabs(c.ratios.front() - 1.0);
  for (double q : c.ratios) {
    double err = std::fabs(q - 1.0);
    EXPECT_LE(err, prev_err + 1e-9);
    prev_err = err;
  }
  EXPECT_EQ(c.model.h(0.0), 0.0);
}

TEST(MonteCarlo, ExtinctionProbabilityShape) {
  auto g = make_polynomial_growth({0.0, 1.0, 0.5}, 1.0, "z + z^2/2");
  EXPECT_DOUBLE_EQ(extinction_probability(g, 0.0), 1.0);
  double prev = 1.0;
  for (double z : {0.01, 0.1, 0.5, 1.0, 2.0, 5.0}) {
    double u = extinction_probability(g, z);
    EXPECT_LT(u, prev);
    EXPECT_GT(u, 0.0);
    prev = u;
  }
  EXPECT_LT(extinction_probability(g, 30.0), 1e-100);
  // Supercritical Feller: u(z) = exp(-2 r z / gamma).
  auto lin = linear_growth(1.5, 2.0);
  for (double z : {0.1, 1.0, 3.0}) EXPECT_NEAR(extinction_probability(lin, z), std::exp(-1.5 * z), 1e-10);
}

TEST(MonteCarlo, ConditioningPreconditions) {
  // Subcritical: h/sqrt(x) does not grow.
  EXPECT_THROW(condition_on_extinction(linear_growth(-1.0, 1.0)), PreconditionError);
  EXPECT_THROW(condition_on_extinction(logistic_growth(1.0, 1.0, 1.0)), PreconditionError);
}
