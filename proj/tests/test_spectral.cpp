#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "qsd/spectral.hpp"

using namespace qsd;

namespace {

DriftField logistic() { return drift_from_growth(logistic_growth(1.0, 1.0, 1.0)); }

const SpectralDecomposition& ou_fixture() {
  static const SpectralDecomposition s = build_and_solve(ou_drift(1.0), {1e-4, 8.0, 4096, GridKind::uniform}, 40);
  return s;
}

const SpectralDecomposition& logistic_fixture() {
  static const SpectralDecomposition s = solve_default(logistic());
  return s;
}

double max_gram_error(const SpectralDecomposition& s, int K) {
  double e = 0.0;
  for (int i = 0; i < K; ++i) {
    for (int j = 0; j < K; ++j) e = std::max(e, std::fabs(s.gram(i, j) - (i == j ? 1.0 : 0.0)));
  }
  return e;
}

}  // namespace

TEST(Spectral, OrnsteinUhlenbeckOracle) {
  const auto& s = ou_fixture();
  EXPECT_NEAR(s.lambdas[0], 1.0, 1e-3);
  EXPECT_NEAR(s.lambdas[1], 3.0, 1e-3);
  // eta_1 against c x in L^2(mu).
  double xe = 0.0, xx = 0.0, ee = 0.0;
  for (int i = 1; i + 1 < s.n(); ++i) {
    double w = s.mu_weights[i];
    xe += w * s.x[i] * s.etas[0][i];
    xx += w * s.x[i] * s.x[i];
    ee += w * s.etas[0][i] * s.etas[0][i];
  }
  double c = xe / xx;
  double err = 0.0;
  for (int i = 1; i + 1 < s.n(); ++i) {
    double r = s.etas[0][i] - c * s.x[i];
    err += s.mu_weights[i] * r * r;
  }
  EXPECT_LT(std::sqrt(err / ee), 1e-3);
  auto y = yaglom_measure(s);
  for (double x = 0.05; x <= 3.0; x += 0.01) {
    EXPECT_NEAR(y.density_at(x), 2 * x * std::exp(-x * x), 1e-3) << x;
  }
}

TEST(Spectral, ScaledOrnsteinUhlenbeck) {
  for (double theta : {0.5, 2.0}) {
    auto s = build_and_solve(ou_drift(theta), {1e-4, 8.0 / std::sqrt(theta), 4096, GridKind::uniform}, 16);
    for (int k = 0; k < 4; ++k) EXPECT_NEAR(s.lambdas[k], (2 * k + 1) * theta, 2e-3 * theta) << theta << " " << k;
    EXPECT_NEAR(rate_report(s, 1.0, 0.0, 1.0).gap, 2 * theta, 2e-3 * theta);
  }
}

TEST(Spectral, SubcriticalFellerOracle) {
  for (double r : {-1.0, -2.0}) {
    auto g = linear_growth(r, 1.0);
    auto s = solve_default(drift_from_growth(g));
    EXPECT_NEAR(s.lambdas[0], -r, 1e-3);
    // eta_1 proportional to x^2.
    double c = s.eta_at(0, 1.0);
    for (double x : {0.3, 0.7, 1.5, 2.5}) EXPECT_NEAR(s.eta_at(0, x) / (c * x * x), 1.0, 2e-3) << x;
    auto y = yaglom_measure(s);
    double rate = 2.0 * std::fabs(r) / g.gamma;
    for (double z = 0.05; z <= 3.0; z += 0.05) {
      EXPECT_NEAR(yaglom_density_z(y, g, z), rate * std::exp(-rate * z), 1e-2) << z;
    }
  }
}

TEST(Spectral, StructuralInvariants) {
  const auto& s = logistic_fixture();
  EXPECT_GT(s.lambdas[0], 0.0);
  for (int k = 0; k + 1 < s.K(); ++k) EXPECT_LT(s.lambdas[k], s.lambdas[k + 1]);
  for (int i = 1; i + 1 < s.n(); ++i) ASSERT_GT(s.etas[0][i], 0.0) << i;
  EXPECT_LT(max_gram_error(s, 8), 1e-8);
  EXPECT_LT(max_gram_error(s, s.K()), 1e-8);
  EXPECT_LT(max_gram_error(ou_fixture(), ou_fixture().K()), 1e-8);
  // psi and eta normalizations agree.
  double psi2 = 0.0;
  for (int i = 1; i + 1 < s.n(); ++i) psi2 += s.mass(i) * s.psis[2][i] * s.psis[2][i];
  EXPECT_NEAR(psi2, 1.0, 1e-10);
}

TEST(Spectral, OdeResidualSecondOrder) {
  auto d = ou_drift(1.0);
  auto residual = [&](int n) {
    auto s = build_and_solve(d, {1e-4, 8.0, n, GridKind::uniform}, 8);
    auto [lo, hi] = s.resolved_window();
    double worst = 0.0;
    for (int k = 0; k < 3; ++k) {
      double sup = 0.0;
      for (int i = lo; i <= hi; ++i) sup = std::max(sup, std::fabs(s.etas[k][i]));
      for (int i = std::max(lo, 1); i <= std::min(hi, s.n() - 2); ++i) {
        double h = s.x[i + 1] - s.x[i];
        const auto& e = s.etas[k];
        double d2 = (e[i + 1] - 2 * e[i] + e[i - 1]) / (h * h);
        double d1 = (e[i + 1] - e[i - 1]) / (2 * h);
        double r = 0.5 * d2 - d.q(s.x[i]) * d1 + s.lambdas[k] * e[i];
        worst = std::max(worst, std::fabs(r) / sup);
      }
    }
    return worst;
  };
  double r1 = residual(2048);
  double r2 = residual(4096);
  EXPECT_LT(r2, 1e-3);
  EXPECT_GT(r1 / r2, 3.0);
}

TEST(Spectral, DomainStability) {
  auto d = logistic();
  auto base = default_domain(d);
  auto s0 = build_and_solve(d, base, 8);
  auto wider = base;
  wider.x_max *= 2.0;
  wider.n = 2 * base.n - 1;
  auto s1 = build_and_solve(d, wider, 8);
  EXPECT_LT(std::fabs(s1.lambdas[0] / s0.lambdas[0] - 1.0), 1e-6);
  TruncationDomain near{1e-4, base.x_max, base.n, base.kind};
  auto nearer = near;
  nearer.x_min *= 0.5;
  auto s2 = build_and_solve(d, near, 8);
  auto s3 = build_and_solve(d, nearer, 8);
  EXPECT_LT(std::fabs(s3.lambdas[0] / s2.lambdas[0] - 1.0), 1e-6);
}

TEST(Spectral, KernelSymmetryPositivityAndChapmanKolmogorov) {
  for (const SpectralDecomposition* sp : {&ou_fixture(), &logistic_fixture()}) {
    const auto& s = *sp;
    for (double x : {0.3, 1.0, 2.2}) {
      for (double y : {0.5, 1.7}) EXPECT_EQ(kernel_r(s, 1.0, x, y).value, kernel_r(s, 1.0, y, x).value);
    }
    auto [lo, hi] = s.resolved_window();
    // At t_min the truncated sum is positive up to its reported tail bound;
    // at t = 1 it is strictly positive across the bulk.
    for (int i = lo; i <= hi; i += 97) {
      for (int j = lo; j <= hi; j += 89) {
        auto kv = kernel_r(s, s.t_min, s.x[i], s.x[j]);
        EXPECT_GT(kv.value, -kv.tail_bound) << i << " " << j;
        if (s.x[i] < 4.0 && s.x[j] < 4.0) {
          EXPECT_GT(kernel_r_nodes(s, 1.0, i, j), 0.0) << i << " " << j;
        }
      }
    }
    for (auto [a, b] : {std::pair{0.5, 0.5}, std::pair{1.0, 1.0}}) {
      double worst = 0.0, scale = 0.0;
      for (double x : {0.4, 1.0, 1.9}) {
        for (double y : {0.6, 1.3}) {
          double lhs = 0.0;
          for (int i = 1; i + 1 < s.n(); ++i) {
            lhs += s.mu_weights[i] * kernel_r(s, a, x, s.x[i]).value * kernel_r(s, b, s.x[i], y).value;
          }
          double rhs = kernel_r(s, a + b, x, y).value;
          worst = std::max(worst, std::fabs(lhs - rhs));
          scale = std::max(scale, std::fabs(rhs));
        }
      }
      EXPECT_LT(worst / scale, 1e-6);
    }
  }
}

TEST(Spectral, KernelLongTimeLimit) {
  const auto& s = logistic_fixture();
  double t = 30.0;
  for (double x : {0.5, 1.5}) {
    double v = std::exp(s.lambdas[0] * t) * kernel_r(s, t, x, 1.0).value;
    EXPECT_NEAR(v / (s.eta_at(0, x) * s.eta_at(0, 1.0)), 1.0, 1e-9);
  }
}

TEST(Spectral, RefusesBelowTmin) {
  const auto& s = logistic_fixture();
  EXPECT_THROW(kernel_r(s, 0.5 * s.t_min, 1.0, 1.0), PreconditionError);
  EXPECT_THROW(survival(s, InitialLaw::at(1.0), 0.5 * s.t_min), PreconditionError);
  EXPECT_THROW(build_and_solve(logistic(), {1e-3, 10.0, 64, GridKind::uniform}, 17), PreconditionError);
  // h = 0: w decays to zero and the spectrum is not discrete.
  EXPECT_THROW(build_and_solve(drift_from_growth(linear_growth(0.0, 1.0)), {1e-3, 10.0, 256, GridKind::uniform}, 4),
               PreconditionError);
}

TEST(Spectral, SurvivalFromYaglomIsExponential) {
  const auto& s = logistic_fixture();
  for (double t : {0.5, 1.0, 2.0, 5.0}) {
    EXPECT_NEAR(survival(s, InitialLaw::yaglom(), t) / std::exp(-s.lambdas[0] * t), 1.0, 1e-6) << t;
  }
  // Long-time point asymptotics and sub-Markov mass.
  double t = 40.0;
  for (double x : {0.5, 1.0, 3.0}) {
    double v = std::exp(s.lambdas[0] * t) * survival(s, InitialLaw::at(x), t);
    EXPECT_NEAR(v / (s.eta_at(0, x) * s.eta1_mass), 1.0, 1e-9);
    EXPECT_LE(survival(s, InitialLaw::at(x), s.t_min), 1.0 + 1e-9);
  }
  // A density initial law concentrated near 1 behaves like the point mass.
  auto bump = [](double x) { return std::exp(-0.5 * std::pow((x - 1.0) / 0.01, 2)) / (0.01 * std::sqrt(2 * std::numbers::pi)); };
  EXPECT_NEAR(survival(s, InitialLaw::with_density(bump), 1.0), survival(s, InitialLaw::at(1.0), 1.0), 1e-3);
}

TEST(Spectral, ConditionalLaw) {
  const auto& s = logistic_fixture();
  double inf = std::numeric_limits<double>::infinity();
  EXPECT_NEAR(conditional_law(s, InitialLaw::at(1.0), 1.0, 0.0, inf), 1.0, 1e-12);
  double nuA = s.mu_integral(0, 0.0, 1.0) / s.eta1_mass;
  for (double x : {0.2, 1.0, 3.0}) EXPECT_NEAR(conditional_law(s, InitialLaw::at(x), 20.0, 0.0, 1.0), nuA, 1e-4);
  EXPECT_NEAR(rate_report(s, 1.0, 0.0, inf).coefficient, 0.0, 1e-12);
  EXPECT_NEAR(rate_report(ou_fixture(), 1.0, 0.0, 1.0).gap, 2.0, 2e-3);
  EXPECT_THROW(conditional_law(s, InitialLaw::at(1.0), 3000.0, 0.0, 1.0), NumericalError);
}

TEST(Spectral, ConvergenceRateRegression) {
  const auto& s = logistic_fixture();
  double nuA = s.mu_integral(0, 0.0, 1.0) / s.eta1_mass;
  auto rr = rate_report(s, 1.0, 0.0, 1.0);
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const int N = 31;
  for (int i = 0; i < N; ++i) {
    double t = 1.0 + 3.0 * i / (N - 1);
    double v = std::log(std::fabs(conditional_law(s, InitialLaw::at(1.0), t, 0.0, 1.0) - nuA));
    sx += t;
    sy += v;
    sxx += t * t;
    sxy += t * v;
  }
  double slope = (N * sxy - sx * sy) / (N * sxx - sx * sx);
  double intercept = (sy - slope * sx) / N;
  EXPECT_NEAR(slope / -rr.gap, 1.0, 0.05);
  EXPECT_NEAR(std::exp(intercept) / std::fabs(rr.coefficient), 1.0, 0.10);
}

TEST(Spectral, YaglomMeasure) {
  auto y = yaglom_measure(logistic_fixture());
  EXPECT_NEAR(y.cdf.back(), 1.0, 1e-6);
  for (std::size_t i = 0; i < y.x.size(); ++i) {
    EXPECT_GE(y.density[i], 0.0);
    if (i > 0) {
      EXPECT_GE(y.cdf[i], y.cdf[i - 1]);
    }
  }
  EXPECT_EQ(y.lambda1, logistic_fixture().lambdas[0]);
  // q = -x: eta_1 = x e^{-x^2} against mu = e^{x^2} dx is not integrable.
  auto s = build_and_solve(custom_drift("-x"), {1e-4, 8.0, 2048, GridKind::uniform}, 4);
  EXPECT_NEAR(s.lambdas[0], 2.0, 1e-3);
  EXPECT_THROW(yaglom_measure(s), NumericalError);
}

TEST(Spectral, FluxIdentity) {
  for (const SpectralDecomposition* s : {&ou_fixture(), &logistic_fixture()}) {
    auto f = flux_check(*s);
    EXPECT_LT(f.discrepancy, 1e-2);
    EXPECT_TRUE(f.flux_decreasing);
    EXPECT_TRUE(f.eta1_nondecreasing);
    EXPECT_GT(f.F0, 0.0);
  }
  // q = x: F(0+) = c e with eta_1 = c x.
  const auto& s = ou_fixture();
  double c = s.eta_at(0, 1.0);
  EXPECT_NEAR(flux_check(s).F0 / (c * std::exp(1.0)), 1.0, 1e-3);
}

TEST(Spectral, QProcess) {
  for (const SpectralDecomposition* sp : {&ou_fixture(), &logistic_fixture()}) {
    const auto& s = *sp;
    auto [lo, hi] = s.resolved_window();
    for (double t : {s.t_min, 2 * s.t_min, 1.0, 5.0}) {
      for (int i = lo; i <= hi; ++i) ASSERT_NEAR(qprocess_row_sum(s, t, i), 1.0, 1e-6) << t << " " << i;
    }
    // Explicit integration of a few rows against the node weights.
    for (double x : {0.5, 1.0, 2.0}) {
      double row = 0.0;
      for (int j = 1; j + 1 < s.n(); ++j) row += s.mass(j) * qprocess_kernel(s, 1.0, x, s.x[j]);
      EXPECT_NEAR(row, 1.0, 1e-6) << x;
    }
    auto st = qprocess_stationary(s);
    double mass = 0.0;
    for (int i = 0; i < s.n(); ++i) mass += s.mass(i) * st[i];
    EXPECT_NEAR(mass, 1.0, 1e-6);
    auto y = yaglom_measure(s, false);
    for (int i = lo; i < hi; ++i) EXPECT_LE(st[i] / y.density[i], st[i + 1] / y.density[i + 1] * (1 + 1e-12));
  }
  const auto& ou = ou_fixture();
  auto st = qprocess_stationary(ou);
  for (int i = 100; i < 1500; i += 50) {
    double x = ou.x[i];
    EXPECT_NEAR(st[i], 4.0 / std::sqrt(std::numbers::pi) * x * x * std::exp(-x * x), 1e-3) << x;
  }
}

TEST(Spectral, HeatKernelComparisonAndL2Bounds) {
  auto ou = solve_default(ou_drift(1.0));
  for (const SpectralDecomposition* s : {static_cast<const SpectralDecomposition*>(&ou), &logistic_fixture()}) {
    for (int i = 0; i < 50; ++i) {
      for (int j = 0; j < 50; ++j) {
        double x = 0.1 + 4.9 * i / 49, y = 0.1 + 4.9 * j / 49;
        ASSERT_TRUE(appendix_bound_check(*s, x, y).satisfied) << x << " " << y;
      }
    }
    for (double x : {0.5, 1.0, 2.0}) {
      for (double t : {0.5, 1.0}) EXPECT_TRUE(l2_bound_check(*s, t, x).satisfied) << x << " " << t;
    }
  }
  EXPECT_NEAR(dirichlet_heat_kernel(1.0, 1.0, 1.0), (1 - std::exp(-2.0)) / std::sqrt(2 * std::numbers::pi), 1e-15);
}
