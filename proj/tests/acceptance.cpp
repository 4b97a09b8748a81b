// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero
// if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "qsd/birthdeath.hpp"
#include "qsd/hypotheses.hpp"
#include "qsd/montecarlo.hpp"
#include "qsd/spectral.hpp"
#include "qsd/stats.hpp"

using namespace qsd;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

struct Criterion {
  int id;
  std::string name;
  double time_limit;
  std::function<void(Outcome&)> body;
};

DriftField logistic() { return drift_from_growth(logistic_growth(1.0, 1.0, 1.0)); }

SpectralDecomposition ou_spectrum() {
  return build_and_solve(ou_drift(1.0), {1e-4, 8.0, 4096, GridKind::uniform}, 40);
}

// Criterion 1: q(x) = x on [1e-4, 8].
void ou_oracle(Outcome& o) {
  auto s = ou_spectrum();
  double e1 = std::fabs(s.lambdas[0] - 1.0), e2 = std::fabs(s.lambdas[1] - 3.0);
  o.require(e1 < 1e-3 && e2 < 1e-3, "eigenvalues");
  double xe = 0.0, xx = 0.0, ee = 0.0;
  for (int i = 1; i + 1 < s.n(); ++i) {
    double w = s.mu_weights[i];
    xe += w * s.x[i] * s.etas[0][i];
    xx += w * s.x[i] * s.x[i];
    ee += w * s.etas[0][i] * s.etas[0][i];
  }
  double c = xe / xx, err = 0.0;
  for (int i = 1; i + 1 < s.n(); ++i) {
    double r = s.etas[0][i] - c * s.x[i];
    err += s.mu_weights[i] * r * r;
  }
  double l2 = std::sqrt(err / ee);
  o.require(l2 < 1e-3, "eta_1 L2 error");
  auto y = yaglom_measure(s);
  double sup = 0.0;
  for (int k = 0; k <= 295; ++k) {
    double x = 0.05 + 0.01 * k;
    sup = std::max(sup, std::fabs(y.density_at(x) - 2 * x * std::exp(-x * x)));
  }
  o.require(sup < 1e-3, "nu_1 density");
  o.detail << "lambda_1=" << s.lambdas[0] << " lambda_2=" << s.lambdas[1] << " eta1_L2=" << l2
           << " nu1_sup=" << sup;
}

// Criterion 2: h(z) = -z, gamma = 1.
void feller_oracle(Outcome& o) {
  auto g = linear_growth(-1.0, 1.0);
  auto s = solve_default(drift_from_growth(g));
  o.require(std::fabs(s.lambdas[0] - 1.0) < 1e-3, "lambda_1");
  auto y = yaglom_measure(s);
  double sup = 0.0;
  for (int k = 0; k <= 295; ++k) {
    double z = 0.05 + 0.01 * k;
    sup = std::max(sup, std::fabs(yaglom_density_z(y, g, z) - 2.0 * std::exp(-2.0 * z)));
  }
  o.require(sup < 1e-2, "Z-scale density");
  o.detail << "lambda_1=" << s.lambdas[0] << " exp2_sup=" << sup;
}

// Criterion 3: survival from nu_1 is exactly exponential.
void fixed_point(Outcome& o) {
  auto s = solve_default(logistic());
  double worst = 0.0;
  for (double t : {0.5, 1.0, 2.0, 5.0}) {
    double rel = std::fabs(survival(s, InitialLaw::yaglom(), t) / std::exp(-s.lambdas[0] * t) - 1.0);
    worst = std::max(worst, rel);
  }
  o.require(worst < 1e-6, "relative error");
  o.detail << "lambda_1=" << s.lambdas[0] << " max_rel_err=" << worst;
}

// Criterion 4: Gram matrix, Chapman-Kolmogorov and symmetry.
void orthonormality(Outcome& o) {
  auto s = solve_default(logistic());
  const int K = 8;
  double off = 0.0;
  for (int i = 0; i < K; ++i) {
    for (int j = 0; j < K; ++j) {
      if (i != j) off = std::max(off, std::fabs(s.gram(i, j)));
    }
  }
  o.require(off < 1e-8, "gram off-diagonal");
  double ck = 0.0;
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
    ck = std::max(ck, worst / scale);
  }
  o.require(ck < 1e-6, "Chapman-Kolmogorov");
  bool symmetric = true;
  for (double x : {0.2, 0.7, 1.3, 3.1}) {
    for (double y : {0.3, 1.0, 2.4}) {
      for (double t : {0.5, 1.0, 3.0}) symmetric = symmetric && kernel_r(s, t, x, y).value == kernel_r(s, t, y, x).value;
    }
  }
  o.require(symmetric, "kernel symmetry");
  o.detail << "max_offdiag=" << off << " ck_residual=" << ck << " symmetric=" << (symmetric ? "exact" : "no");
}

// Criterion 5: conditional law converges at rate lambda_2 - lambda_1.
void convergence_rate(Outcome& o) {
  auto s = solve_default(logistic());
  double nuA = s.mu_integral(0, 0.0, 1.0) / s.eta1_mass;
  auto rr = rate_report(s, 1.0, 0.0, 1.0);
  std::vector<double> ts, ls;
  for (int i = 0; i <= 30; ++i) {
    double t = 1.0 + 0.1 * i;
    ts.push_back(t);
    ls.push_back(std::log(std::fabs(conditional_law(s, InitialLaw::at(1.0), t, 0.0, 1.0) - nuA)));
  }
  auto fit = linear_fit(ts, ls);
  double slope_err = std::fabs(fit.slope / -rr.gap - 1.0);
  double coef_err = std::fabs(std::exp(fit.intercept) / std::fabs(rr.coefficient) - 1.0);
  o.require(slope_err < 0.05, "slope");
  o.require(coef_err < 0.10, "intercept");
  o.detail << "slope=" << fit.slope << " gap=" << rr.gap << " slope_rel_err=" << slope_err
           << " coef_rel_err=" << coef_err;
}

// Criterion 6: Q-process kernel and simulation on the logistic preset.
void qprocess(Outcome& o) {
  auto s = solve_default(logistic());
  auto [lo, hi] = s.resolved_window();
  double row_err = 0.0;
  for (double t : {s.t_min, 1.0, 10.0}) {
    for (int i = lo; i <= hi; ++i) row_err = std::max(row_err, std::fabs(qprocess_row_sum(s, t, i) - 1.0));
  }
  o.require(row_err < 1e-6, "row sums");

  auto st = qprocess_stationary(s);
  std::vector<double> cdf(s.n(), 0.0);
  for (int i = 1; i < s.n(); ++i) cdf[i] = cdf[i - 1] + 0.5 * (st[i] + st[i - 1]) * (s.x[i] - s.x[i - 1]);
  for (double& v : cdf) v /= cdf.back();
  auto stationary_cdf = [&](double x) {
    if (x <= s.x.front()) return 0.0;
    if (x >= s.x.back()) return 1.0;
    auto it = std::upper_bound(s.x.begin(), s.x.end(), x);
    std::size_t j = static_cast<std::size_t>(it - s.x.begin());
    double w = (x - s.x[j - 1]) / (s.x[j] - s.x[j - 1]);
    return cdf[j - 1] + w * (cdf[j] - cdf[j - 1]);
  };

  SimConfig cfg;
  cfg.dt = 1e-3;
  cfg.t_max = 10.0;
  cfg.n_paths = 20000;
  cfg.record_dt = 1.0;
  cfg.seed = 6;
  auto b = simulate_qprocess(s, 1.0, cfg);
  auto pts = b.survivors(10.0);
  o.require(pts.size() == 20000u, "no Q-process path absorbed");
  double ks = ks_statistic(pts, stationary_cdf);
  o.require(ks < 0.05, "KS vs eta_1^2 mu");

  auto nu = yaglom_measure(s);
  std::sort(pts.begin(), pts.end());
  const double n = static_cast<double>(pts.size());
  double worst = -1e300;
  for (int d = 1; d <= 9; ++d) {
    auto it = std::lower_bound(nu.cdf.begin(), nu.cdf.end(), 0.1 * d);
    double xd = nu.x[static_cast<std::size_t>(it - nu.cdf.begin())];
    double emp = static_cast<double>(std::upper_bound(pts.begin(), pts.end(), xd) - pts.begin()) / n;
    double se = std::sqrt(std::max(emp * (1 - emp), 1.0 / n) / n);
    worst = std::max(worst, (emp - nu.cdf_at(xd)) / se);
  }
  o.require(worst <= 3.0, "stochastic domination");
  o.detail << "row_sum_err=" << row_err << " ks=" << ks << " max_excess_over_nu1_cdf=" << worst << "SE";
}

// Criterion 7: Monte Carlo against the spectral Yaglom limit.
void yaglom_mc(Outcome& o) {
  auto s = solve_default(logistic());
  auto nu = yaglom_measure(s);
  SimConfig cfg;
  cfg.dt = 1e-3;
  cfg.t_max = 6.0;
  cfg.n_paths = 100000;
  cfg.record_dt = 0.05;
  cfg.seed = 7;
  auto b = simulate_x(logistic(), 1.0, cfg);
  auto pts = b.survivors(6.0);
  double ks = ks_statistic(pts, [&](double x) { return nu.cdf_at(x); });
  auto est = estimate_lambda1(b, 3.0, 6.0);
  double rel = std::fabs(est.rate - s.lambdas[0]) / s.lambdas[0];
  o.require(ks < 0.05, "KS");
  o.require(rel < 0.05, "lambda_1");
  o.detail << "survivors=" << pts.size() << " ks=" << ks << " lambda_mc=" << est.rate << "+-" << est.stderr
           << " lambda_spectral=" << s.lambdas[0] << " rel=" << rel;
}

// Criterion 8: hypothesis verdicts.
void hypotheses(Outcome& o) {
  auto lg = logistic_growth(1.0, 1.0, 1.0);
  auto rep = check_all(drift_from_growth(lg), &lg);
  for (auto [name, v] : {std::pair{"H1", &rep.h1}, std::pair{"H2", &rep.h2}, std::pair{"H3", &rep.h3},
                         std::pair{"H4", &rep.h4}, std::pair{"H5", &rep.h5}, std::pair{"HH", &rep.hh}}) {
    o.require(v->status == HypStatus::holds, std::string("logistic ") + name);
  }
  auto ou5 = check_h5(ou_drift(1.0));
  o.require(ou5.status == HypStatus::fails, "OU H5");
  auto hh0 = check_hh(linear_growth(0.0, 1.0));
  o.require(hh0.status == HypStatus::fails, "h=0 HH");
  std::vector<DriftField> presets{logistic(), ou_drift(1.0), drift_from_growth(linear_growth(-1.0, 1.0)),
                                  drift_from_growth(linear_growth(0.0, 1.0)),
                                  drift_from_growth(allee_growth(1.0, 0.5, 4.0, 1.0))};
  int agree = 0;
  for (const auto& d : presets) {
    auto v = check_h5(d);
    bool ok = v.integrals.size() < 2 || v.integrals[0].verdict.status == v.integrals[1].verdict.status;
    o.require(ok && v.status != HypStatus::inconclusive, "H5 forms on " + d.label);
    agree += ok;
  }
  o.detail << "logistic H1-H5,HH=" << to_string(rep.h1.status) << " OU_H5=" << to_string(ou5.status)
           << " zero_HH=" << to_string(hh0.status) << " H5_forms_agree=" << agree << "/" << presets.size();
}

// Criterion 9: flux identity.
void flux(Outcome& o) {
  std::vector<std::pair<std::string, SpectralDecomposition>> cases;
  cases.emplace_back("ou", ou_spectrum());
  cases.emplace_back("logistic", solve_default(logistic()));
  for (const auto& [name, s] : cases) {
    auto f = flux_check(s);
    o.require(f.discrepancy < 1e-2, name + " discrepancy");
    o.require(f.flux_decreasing, name + " F decreasing");
    o.require(f.eta1_nondecreasing, name + " eta_1 nondecreasing");
    o.detail << name << "_rel_discrepancy=" << f.discrepancy << " ";
  }
}

// Criterion 10: kernel comparison with the Dirichlet heat kernel and the L2 bound.
void bounds(Outcome& o) {
  std::vector<std::pair<std::string, SpectralDecomposition>> cases;
  cases.emplace_back("ou", solve_default(ou_drift(1.0)));
  cases.emplace_back("logistic", solve_default(logistic()));
  for (const auto& [name, s] : cases) {
    int ok = 0;
    for (int i = 0; i < 50; ++i) {
      for (int j = 0; j < 50; ++j) ok += appendix_bound_check(s, 0.1 + 4.9 * i / 49, 0.1 + 4.9 * j / 49).satisfied;
    }
    int l2 = 0;
    for (double x : {0.5, 1.0, 2.0}) {
      for (double t : {0.5, 1.0}) l2 += l2_bound_check(s, t, x).satisfied;
    }
    o.require(ok == 2500, name + " kernel bound");
    o.require(l2 == 6, name + " L2 bound");
    o.detail << name << ": kernel " << ok << "/2500, L2 " << l2 << "/6; ";
  }
}

// Criterion 11: birth-death scaling limit and S-criterion.
void birth_death(Outcome& o) {
  ScalingConfig cfg;
  auto tab = scaling_limit_check(BDFamily::logistic_branching, BDParams{}, cfg);
  o.require(tab.strictly_decreasing, "KS decreasing");
  o.require(tab.rows.back().ks_distance < 0.1, "KS at N=100");
  for (const auto& r : tab.rows) o.detail << "KS(N=" << r.N << ")=" << r.ks_distance << " ";
  auto lin = s_criterion(linear_chain(1.0, 2.0));
  auto lgc = s_criterion(logistic_chain(1.0, 1.0, 1.0));
  o.require(lin.S.status == IntegralStatus::diverges, "linear chain S");
  o.require(lgc.S.status == IntegralStatus::converges, "logistic chain S");
  o.require(lin.limit_and_S_agree && lgc.limit_and_S_agree, "finite-limit and S verdicts agree");
  o.detail << "linear S=" << to_string(lin.S.status) << " logistic S=" << to_string(lgc.S.status)
           << " limit_and_S_agree=" << (lin.limit_and_S_agree && lgc.limit_and_S_agree ? "yes" : "no");
}

// Criterion 12: conditioning on extinction.
void conditioning(Outcome& o) {
  auto c = condition_on_extinction(linear_growth(1.0, 1.0));
  double worst = 0.0;
  for (double z : {0.1, 1.0, 10.0}) worst = std::max(worst, std::fabs(c.model.h(z) / -z - 1.0));
  o.require(worst < 1e-6, "supercritical Feller");
  auto g = logistic_growth(1.0, 0.0, 1.0);
  auto cl = condition_on_extinction(g);
  const double z = 1e4;
  double ratio = cl.model.h(z) / -g.h(z);
  o.require(std::fabs(ratio - 1.0) < 0.02, "ratio at 1e4");
  // With c = 0 the growth is linear and the ratio is exactly 1; a quadratic
  // growth exercises the asymptotic regime.
  auto quad = make_polynomial_growth({0.0, 1.0, 0.5}, 1.0, "z + z^2/2");
  double qratio = condition_on_extinction(quad).model.h(z) / -quad.h(z);
  o.require(std::fabs(qratio - 1.0) < 0.02, "quadratic ratio at 1e4");
  o.detail << "feller_max_rel_err=" << worst << " ratio(1e4)=" << ratio << " quadratic_ratio(1e4)=" << qratio;
}

}  // namespace

int main() {
  std::vector<Criterion> criteria{
      {1, "OU half-line oracle", 10, ou_oracle},
      {2, "subcritical Feller oracle", 10, feller_oracle},
      {3, "QSD fixed point", 5, fixed_point},
      {4, "orthonormality and kernel consistency", 10, orthonormality},
      {5, "convergence rate", 30, convergence_rate},
      {6, "Q-process", 120, qprocess},
      {7, "Monte Carlo Yaglom cross-validation", 300, yaglom_mc},
      {8, "hypothesis engine", 30, hypotheses},
      {9, "flux identity", 5, flux},
      {10, "kernel and L2 bounds", 30, bounds},
      {11, "birth-death scaling and S-criterion", 300, birth_death},
      {12, "extinction conditioning", 10, conditioning},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    Outcome o;
    o.detail.precision(6);
    auto t0 = std::chrono::steady_clock::now();
    try {
      c.body(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "[exception: " << e.what() << "] ";
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > c.time_limit) {
      o.pass = false;
      o.detail << "[over time limit " << c.time_limit << " s] ";
    }
    failures += !o.pass;
    std::printf("%s criterion %d (%s): %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name.c_str(),
                o.detail.str().c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
