#pragma once

// Spectral decomposition of the killed generator on a truncated domain with
// Dirichlet ends. The Sturm-Liouville form is discretized by finite volumes
// and rescaled to psi = e^{-Q/2} eta, which gives a symmetric tridiagonal
// matrix (a consistent discretization of -1/2 D^2 + w). Eigenfunctions of
// the generator are eta = e^{Q/2} psi; e^{+-Q} is only formed in log space.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "qsd/errors.hpp"
#include "qsd/hypotheses.hpp"
#include "qsd/model.hpp"
#include "qsd/tridiagonal.hpp"

namespace qsd {

enum class GridKind { uniform, sqrt_graded };

inline const char* to_string(GridKind k) { return k == GridKind::uniform ? "uniform" : "sqrt-graded"; }

struct TruncationDomain {
  double x_min = 1e-3;
  double x_max = 10.0;
  int n = 4096;
  GridKind kind = GridKind::sqrt_graded;

  void validate() const {
    if (!(x_min > 0.0) || !(x_min < 1.0) || !(x_max > 1.0) || !std::isfinite(x_max)) {
      throw PreconditionError("spectral", "truncation domain needs 0 < x_min < 1 < x_max");
    }
    if (n < 64) throw PreconditionError("spectral", "truncation domain needs n >= 64");
  }

  /// n nodes including both Dirichlet ends.
  std::vector<double> nodes() const {
    std::vector<double> x(n);
    const double L = x_max - x_min;
    for (int i = 0; i < n; ++i) {
      double s = static_cast<double>(i) / (n - 1);
      x[i] = kind == GridKind::uniform ? x_min + L * s : x_min + L * s * s;
    }
    x[n - 1] = x_max;
    return x;
  }
};

/// Initial law for survival and conditional probabilities.
struct InitialLaw {
  enum class Kind { point, yaglom, density };
  Kind kind = Kind::point;
  double x = 1.0;
  Evaluator density;

  static InitialLaw at(double x0) { return {Kind::point, x0, {}}; }
  static InitialLaw yaglom() { return {Kind::yaglom, 0.0, {}}; }
  static InitialLaw with_density(Evaluator f) { return {Kind::density, 0.0, std::move(f)}; }
};

struct KernelValue {
  double value = 0.0;
  double tail_bound = 0.0;
};

class SpectralDecomposition {
 public:
  TruncationDomain domain;
  std::vector<double> x;
  std::vector<double> Q;
  // Q at cell midpoints.
  std::vector<double> Q_mid;
  std::vector<double> lambdas;
  // Per-eigenfunction grid values, zero at both ends.
  std::vector<std::vector<double>> etas;
  std::vector<std::vector<double>> psis;
  std::vector<LogVector> log_psis;
  std::vector<double> mu_weights;
  std::vector<double> log_mu_weights;
  // <eta_k, 1>_mu for every k; eta1_mass is the first.
  std::vector<double> eta_masses;
  double eta1_mass = 0.0;
  // <eta_1, eta_k>_mu; equal to the unit vector up to roundoff.
  std::vector<double> gram_first;
  double C = 0.0;
  double t_min = 0.0;
  std::shared_ptr<const DriftField> drift;

  int K() const { return static_cast<int>(lambdas.size()); }
  int n() const { return static_cast<int>(x.size()); }

  /// Node mass (x_{i+1} - x_{i-1}) / 2, zero at the ends.
  double mass(int i) const {
    if (i <= 0 || i >= n() - 1) return 0.0;
    return 0.5 * (x[i + 1] - x[i - 1]);
  }

  double log_eta(int k, int i) const { return log_psis[k].logabs[i] + 0.5 * Q[i]; }

  /// eta_k e^{-Q} at node i, the mu-density of eta_k against dx.
  double eta_mu_density(int k, int i) const {
    const LogVector& v = log_psis[k];
    if (v.sign[i] == 0) return 0.0;
    return v.sign[i] * std::exp(v.logabs[i] - 0.5 * Q[i]);
  }

  /// Linear interpolation of a grid function; zero outside the domain.
  double interpolate(const std::vector<double>& f, double at) const {
    if (!(at >= x.front()) || !(at <= x.back())) return 0.0;
    auto it = std::upper_bound(x.begin(), x.end(), at);
    if (it == x.end()) return f.back();
    std::size_t j = static_cast<std::size_t>(it - x.begin());
    std::size_t i = j - 1;
    double t = (at - x[i]) / (x[j] - x[i]);
    return f[i] + t * (f[j] - f[i]);
  }

  double eta_at(int k, double at) const { return interpolate(etas[k], at); }
  double psi_at(int k, double at) const { return interpolate(psis[k], at); }

  /// int_lo^hi eta_k e^{-Q} dx by the trapezoid rule on the grid, with the
  /// integrand interpolated linearly on partially covered cells. Over the
  /// whole domain this is exactly the node-mass sum.
  double mu_integral(int k, double lo, double hi) const {
    lo = std::max(lo, x.front());
    hi = std::min(hi, x.back());
    if (!(hi > lo)) return 0.0;
    double s = 0.0;
    for (int i = 0; i + 1 < n(); ++i) {
      double a = std::max(lo, x[i]);
      double b = std::min(hi, x[i + 1]);
      if (!(b > a)) continue;
      double ga = eta_mu_density(k, i);
      double gb = eta_mu_density(k, i + 1);
      double h = x[i + 1] - x[i];
      double fa = ga + (gb - ga) * (a - x[i]) / h;
      double fb = ga + (gb - ga) * (b - x[i]) / h;
      s += 0.5 * (fa + fb) * (b - a);
    }
    return s;
  }

  /// <eta_j, eta_k>_mu under the node weights.
  double gram(int j, int k) const {
    const LogVector& u = log_psis[j];
    const LogVector& v = log_psis[k];
    double s = 0.0;
    for (int i = 1; i + 1 < n(); ++i) {
      if (u.sign[i] == 0 || v.sign[i] == 0) continue;
      s += u.sign[i] * v.sign[i] * std::exp(std::log(mass(i)) + u.logabs[i] + v.logabs[i]);
    }
    return s;
  }

  /// Nodes where psi_1 is within 1e-10 of its maximum; outside this window
  /// the grid values are dominated by the truncation boundary.
  std::pair<int, int> resolved_window() const {
    const LogVector& v = log_psis[0];
    double top = tridiag::kNegInf;
    for (int i = 1; i + 1 < n(); ++i) top = std::max(top, v.logabs[i]);
    double floor = top + std::log(1e-10);
    int lo = 1, hi = n() - 2;
    while (lo < hi && v.logabs[lo] < floor) ++lo;
    while (hi > lo && v.logabs[hi] < floor) --hi;
    return {lo, hi};
  }

  void require_t(double t) const {
    if (!(t > 0.0)) throw PreconditionError("spectral", "time must be positive");
    if (t < t_min * (1.0 - 1e-12)) {
      throw PreconditionError("spectral", "t = " + std::to_string(t) + " is below t_min = " + std::to_string(t_min) +
                                              "; the truncated spectral sum is tail-dominated, increase K");
    }
  }
};

namespace detail {

inline double potential_checked(const DriftField& d, double x) {
  double w = d.w(x);
  if (!std::isfinite(w)) throw DomainError("spectral", "potential is not finite at x = " + std::to_string(x));
  return w;
}

}  // namespace detail

/// Solve for the K smallest eigenpairs on the given domain.
inline SpectralDecomposition build_and_solve(const DriftField& d, const TruncationDomain& dom, int K) {
  dom.validate();
  if (K < 1 || K > dom.n / 4) throw PreconditionError("spectral", "need 1 <= K <= n/4");
  if (check_h2(d).status == HypStatus::fails) {
    throw PreconditionError("spectral", "H2 fails: the spectrum is not discrete");
  }

  SpectralDecomposition s;
  s.domain = dom;
  s.x = dom.nodes();
  s.drift = std::make_shared<const DriftField>(d);
  s.C = d.C;
  const int n = dom.n;
  const int m = n - 2;
  const auto& x = s.x;

  s.Q.resize(n);
  for (int i = 0; i < n; ++i) s.Q[i] = d.Q(x[i]);

  // Finite volumes for -1/2 (e^{-Q} eta')' = lambda e^{-Q} eta with node
  // masses m_i e^{-Q_i}; rescaled to psi = e^{-Q/2} eta the matrix is
  // symmetric and only Q increments over half cells enter.
  s.Q_mid.resize(n - 1);
  std::vector<double> dl(n - 1), dr(n - 1);
  for (int i = 0; i + 1 < n; ++i) {
    double h = x[i + 1] - x[i];
    double xm = x[i] + 0.5 * h;
    dl[i] = d.Q_increment(x[i], 0.5 * h);
    dr[i] = d.Q_increment(xm, x[i + 1] - xm);
    s.Q_mid[i] = s.Q[i] + dl[i];
    if (!std::isfinite(dl[i]) || !std::isfinite(dr[i])) {
      throw DomainError("spectral", "Q increment is not finite near x = " + std::to_string(x[i]));
    }
  }
  std::vector<double> mass(m), a(m), b(m - 1);
  for (int j = 0; j < m; ++j) {
    int i = j + 1;
    detail::potential_checked(d, x[i]);
    double hl = x[i] - x[i - 1];
    double hr = x[i + 1] - x[i];
    mass[j] = 0.5 * (hl + hr);
    a[j] = 0.5 * (std::exp(dr[i - 1]) / hl + std::exp(-dl[i]) / hr) / mass[j];
  }
  for (int j = 0; j + 1 < m; ++j) {
    int i = j + 1;
    double h = x[i + 1] - x[i];
    b[j] = -0.5 * std::exp(0.5 * (dr[i] - dl[i])) / (h * std::sqrt(mass[j] * mass[j + 1]));
  }

  s.lambdas = tridiag::smallest_eigenvalues(a, b, K);
  for (int k = 0; k + 1 < K; ++k) {
    if (!(s.lambdas[k + 1] - s.lambdas[k] > 1e-10)) {
      throw NumericalError("spectral", "eigenvalues " + std::to_string(k + 1) + " and " + std::to_string(k + 2) +
                                           " are not separated; the truncation domain is too small");
    }
  }

  std::vector<LogVector> phis(K);
  for (int k = 0; k < K; ++k) {
    phis[k] = tridiag::twisted_eigenvector(a, b, s.lambdas[k]);
    tridiag::normalize(phis[k]);
  }
  tridiag::orthonormalize(phis);

  // Signs: ground state positive, the others positive at the first node.
  for (int k = 0; k < K; ++k) {
    auto& v = phis[k];
    int ref = 0;
    if (k == 0) {
      for (int j = 1; j < m; ++j) {
        if (v.logabs[j] > v.logabs[ref]) ref = j;
      }
    }
    if (v.sign[ref] < 0) {
      for (auto& sg : v.sign) sg = static_cast<std::int8_t>(-sg);
    }
  }
  for (int j = 0; j < m; ++j) {
    if (phis[0].sign[j] <= 0) throw NumericalError("spectral", "ground state changes sign on the grid");
  }

  s.log_psis.resize(K);
  s.psis.assign(K, std::vector<double>(n, 0.0));
  s.etas.assign(K, std::vector<double>(n, 0.0));
  for (int k = 0; k < K; ++k) {
    LogVector lp;
    lp.logabs.assign(n, tridiag::kNegInf);
    lp.sign.assign(n, 0);
    for (int j = 0; j < m; ++j) {
      int i = j + 1;
      lp.sign[i] = phis[k].sign[j];
      lp.logabs[i] = phis[k].logabs[j] - 0.5 * std::log(mass[j]);
      if (lp.sign[i] == 0) continue;
      s.psis[k][i] = lp.sign[i] * std::exp(lp.logabs[i]);
      s.etas[k][i] = lp.sign[i] * std::exp(lp.logabs[i] + 0.5 * s.Q[i]);
    }
    s.log_psis[k] = std::move(lp);
  }

  s.mu_weights.assign(n, 0.0);
  s.log_mu_weights.assign(n, tridiag::kNegInf);
  for (int j = 0; j < m; ++j) {
    int i = j + 1;
    s.log_mu_weights[i] = std::log(mass[j]) - s.Q[i];
    s.mu_weights[i] = std::exp(s.log_mu_weights[i]);
  }

  s.eta_masses.resize(K);
  for (int k = 0; k < K; ++k) s.eta_masses[k] = s.mu_integral(k, x.front(), x.back());
  s.eta1_mass = s.eta_masses[0];
  s.gram_first.resize(K);
  for (int k = 0; k < K; ++k) s.gram_first[k] = s.gram(0, k);
  s.t_min = K > 1 ? std::log(1e10) / (s.lambdas.back() - s.lambdas.front()) : 0.0;
  return s;
}

/// Default domain: x_min = 1e-3 on a sqrt-graded grid when the origin is
/// singular (1e-7 and uniform otherwise), x_max the first decade where
/// w > lambda_K + 50, iterated until the decade is stable.
inline TruncationDomain default_domain(const DriftField& d, int K = 40, int n = 4096) {
  TruncationDomain dom;
  dom.n = n;
  if (d.origin_exponent > 0.0) {
    dom.x_min = 1e-3;
    dom.kind = GridKind::sqrt_graded;
  } else {
    dom.x_min = 1e-7;
    dom.kind = GridKind::uniform;
  }
  auto decade_above = [&](double level) {
    for (int k = 1; k <= 12; ++k) {
      double xm = std::pow(10.0, k);
      double w = d.w(xm);
      if (std::isfinite(w) && w > level) return xm;
    }
    throw DomainError("spectral", "potential stays below " + std::to_string(level) + " up to 1e12");
  };
  double level = 50.0;
  dom.x_max = decade_above(level);
  for (int it = 0; it < 6; ++it) {
    auto s = build_and_solve(d, dom, K);
    double next = decade_above(s.lambdas.back() + 50.0);
    if (next <= dom.x_max) return dom;
    dom.x_max = next;
  }
  return dom;
}

inline SpectralDecomposition solve_default(const DriftField& d, int K = 40, int n = 4096) {
  return build_and_solve(d, default_domain(d, K, n), K);
}

struct YaglomMeasure {
  std::vector<double> x;
  std::vector<double> density;
  std::vector<double> cdf;
  double lambda1 = 0.0;
  // eta1_mass on the solved domain and its two enlargements.
  std::vector<double> mass_trail;

  double density_at(double at) const {
    if (!(at >= x.front()) || !(at <= x.back())) return 0.0;
    auto it = std::upper_bound(x.begin(), x.end(), at);
    if (it == x.end()) return density.back();
    std::size_t j = static_cast<std::size_t>(it - x.begin()), i = j - 1;
    return density[i] + (density[j] - density[i]) * (at - x[i]) / (x[j] - x[i]);
  }

  double cdf_at(double at) const {
    if (at <= x.front()) return 0.0;
    if (at >= x.back()) return 1.0;
    auto it = std::upper_bound(x.begin(), x.end(), at);
    std::size_t j = static_cast<std::size_t>(it - x.begin()), i = j - 1;
    // Exact integral of the piecewise-linear density over [x_i, at].
    double h = at - x[i];
    double slope = (density[j] - density[i]) / (x[j] - x[i]);
    return cdf[i] + h * (density[i] + 0.5 * slope * h);
  }
};

/// nu_1 = eta_1 mu / <eta_1, 1>_mu. With check_integrability the mass is
/// recomputed on domains with x_max doubled twice (grid density kept) and
/// must settle to 1e-3 relative.
inline YaglomMeasure yaglom_measure(const SpectralDecomposition& s, bool check_integrability = true) {
  YaglomMeasure y;
  y.x = s.x;
  y.lambda1 = s.lambdas.front();
  y.mass_trail.push_back(s.eta1_mass);
  if (check_integrability) {
    TruncationDomain dom = s.domain;
    for (int e = 0; e < 2; ++e) {
      dom.x_max *= 2.0;
      dom.n = 2 * dom.n - 1;
      auto big = build_and_solve(*s.drift, dom, 1);
      y.mass_trail.push_back(big.eta1_mass);
    }
    double d1 = std::fabs(y.mass_trail[1] - y.mass_trail[0]);
    double d2 = std::fabs(y.mass_trail[2] - y.mass_trail[1]);
    double tol = 1e-3 * std::fabs(y.mass_trail[0]);
    if (!(d1 <= tol && d2 <= tol)) {
      throw NumericalError("spectral", "eta_1 mass does not settle under domain enlargement (" +
                                           std::to_string(y.mass_trail[0]) + ", " + std::to_string(y.mass_trail[1]) +
                                           ", " + std::to_string(y.mass_trail[2]) + "): eta_1 may not be mu-integrable");
    }
  }
  const int n = s.n();
  y.density.assign(n, 0.0);
  for (int i = 0; i < n; ++i) y.density[i] = s.eta_mu_density(0, i) / s.eta1_mass;
  y.cdf.assign(n, 0.0);
  for (int i = 1; i < n; ++i) y.cdf[i] = y.cdf[i - 1] + 0.5 * (y.density[i - 1] + y.density[i]) * (s.x[i] - s.x[i - 1]);
  return y;
}

/// Density of nu_1 pushed to the population scale z = gamma x^2 / 4.
inline double yaglom_density_z(const YaglomMeasure& y, const GrowthModel& g, double z) {
  if (!(z > 0.0)) return 0.0;
  double xx = transform_state(g, z);
  return y.density_at(xx) / std::sqrt(g.gamma * z);
}

/// r(t, x, y) = sum_k e^{-lambda_k t} eta_k(x) eta_k(y).
inline KernelValue kernel_r(const SpectralDecomposition& s, double t, double x, double y) {
  s.require_t(t);
  KernelValue out;
  for (int k = 0; k < s.K(); ++k) out.value += std::exp(-s.lambdas[k] * t) * (s.eta_at(k, x) * s.eta_at(k, y));
  // Heuristic remainder: the largest of the upper half of the modes at x
  // and y, continued geometrically past lambda_K.
  int K = s.K();
  double ax = 0.0, ay = 0.0;
  for (int k = K / 2; k < K; ++k) {
    ax = std::max(ax, std::fabs(s.eta_at(k, x)));
    ay = std::max(ay, std::fabs(s.eta_at(k, y)));
  }
  double ratio = K > 1 ? std::exp(-(s.lambdas[K - 1] - s.lambdas[K - 2]) * t) : 0.0;
  out.tail_bound = ratio < 1.0 ? std::exp(-s.lambdas[K - 1] * t) * ax * ay / (1.0 - ratio)
                               : std::numeric_limits<double>::infinity();
  return out;
}

/// Kernel at grid nodes i, j (no interpolation).
inline double kernel_r_nodes(const SpectralDecomposition& s, double t, int i, int j) {
  s.require_t(t);
  double v = 0.0;
  for (int k = 0; k < s.K(); ++k) v += std::exp(-s.lambdas[k] * t) * (s.etas[k][i] * s.etas[k][j]);
  return v;
}

namespace detail {

/// Coefficients c_k with P_init(T > t) = sum_k e^{-lambda_k t} c_k <eta_k, 1>_mu.
inline std::vector<double> initial_coefficients(const SpectralDecomposition& s, const InitialLaw& init) {
  std::vector<double> c(s.K(), 0.0);
  switch (init.kind) {
    case InitialLaw::Kind::point:
      for (int k = 0; k < s.K(); ++k) c[k] = s.eta_at(k, init.x);
      break;
    case InitialLaw::Kind::yaglom:
      for (int k = 0; k < s.K(); ++k) c[k] = s.gram_first[k] / s.eta1_mass;
      break;
    case InitialLaw::Kind::density: {
      std::vector<double> f(s.n());
      for (int i = 1; i + 1 < s.n(); ++i) f[i] = init.density(s.x[i]) * s.mass(i);
      for (int k = 0; k < s.K(); ++k) {
        double acc = 0.0;
        for (int i = 1; i + 1 < s.n(); ++i) acc += f[i] * s.etas[k][i];
        c[k] = acc;
      }
      break;
    }
  }
  return c;
}

/// log of sum_k e^{-lambda_k t} c_k w_k, factored around e^{-lambda_1 t}.
inline double log_spectral_sum(const SpectralDecomposition& s, double t, const std::vector<double>& c,
                               const std::vector<double>& w, double& scaled) {
  scaled = 0.0;
  for (int k = 0; k < s.K(); ++k) scaled += std::exp(-(s.lambdas[k] - s.lambdas[0]) * t) * c[k] * w[k];
  return -s.lambdas[0] * t + std::log(std::fabs(scaled));
}

}  // namespace detail

inline double survival(const SpectralDecomposition& s, const InitialLaw& init, double t) {
  s.require_t(t);
  auto c = detail::initial_coefficients(s, init);
  double scaled;
  double l = detail::log_spectral_sum(s, t, c, s.eta_masses, scaled);
  return scaled < 0.0 ? -std::exp(l) : std::exp(l);
}

/// P_init(X_t in [lo, hi] | T_0 > t).
inline double conditional_law(const SpectralDecomposition& s, const InitialLaw& init, double t, double lo,
                              double hi) {
  s.require_t(t);
  auto c = detail::initial_coefficients(s, init);
  std::vector<double> restricted(s.K());
  for (int k = 0; k < s.K(); ++k) restricted[k] = s.mu_integral(k, lo, hi);
  double full_scaled, part_scaled;
  double lfull = detail::log_spectral_sum(s, t, c, s.eta_masses, full_scaled);
  detail::log_spectral_sum(s, t, c, restricted, part_scaled);
  if (!(full_scaled > 0.0) || lfull < std::log(1e-300)) {
    throw NumericalError("spectral", "survival probability underflows at t = " + std::to_string(t) +
                                         "; use a smaller t");
  }
  return std::clamp(part_scaled / full_scaled, 0.0, 1.0);
}

struct RateReport {
  double gap = 0.0;
  double coefficient = 0.0;
};

/// Leading correction P_x(X_t in A | T > t) - nu_1(A) ~ coefficient e^{-gap t}.
inline RateReport rate_report(const SpectralDecomposition& s, double x, double lo, double hi) {
  if (s.K() < 3) throw PreconditionError("spectral", "rate report needs K >= 3");
  RateReport r;
  r.gap = s.lambdas[1] - s.lambdas[0];
  double m1 = s.eta_masses[0], m2 = s.eta_masses[1];
  double a1 = s.mu_integral(0, lo, hi), a2 = s.mu_integral(1, lo, hi);
  r.coefficient = s.eta_at(1, x) / s.eta_at(0, x) * (m1 * a2 - m2 * a1) / (m1 * m1);
  return r;
}

struct FluxCheck {
  double F0 = 0.0;
  double Finf = 0.0;
  double lhs = 0.0;
  double rhs = 0.0;
  double discrepancy = 0.0;
  bool flux_decreasing = true;
  bool eta1_nondecreasing = true;
  double window_lo = 0.0;
  double window_hi = 0.0;
  std::vector<double> x_mid;
  std::vector<double> F;
};

/// F = eta_1' e^{-Q} at half nodes, and the identity
/// <eta_1, 1>_mu = (F(0+) - F(inf)) / (2 lambda_1). Monotonicity is checked
/// on the resolved window.
inline FluxCheck flux_check(const SpectralDecomposition& s) {
  FluxCheck fc;
  const int n = s.n();
  fc.x_mid.resize(n - 1);
  fc.F.resize(n - 1);
  const LogVector& v = s.log_psis[0];
  for (int i = 0; i + 1 < n; ++i) {
    double xm = 0.5 * (s.x[i] + s.x[i + 1]);
    double Qm = s.Q_mid[i];
    auto part = [&](int j) {
      return v.sign[j] == 0 ? 0.0 : v.sign[j] * std::exp(v.logabs[j] + 0.5 * s.Q[j] - Qm);
    };
    fc.x_mid[i] = xm;
    fc.F[i] = (part(i + 1) - part(i)) / (s.x[i + 1] - s.x[i]);
  }
  fc.F0 = fc.F.front();
  fc.Finf = fc.F.back();
  fc.lhs = s.eta1_mass;
  fc.rhs = (fc.F0 - fc.Finf) / (2.0 * s.lambdas[0]);
  fc.discrepancy = std::fabs(fc.lhs - fc.rhs) / std::fabs(fc.lhs);

  auto [lo, hi] = s.resolved_window();
  fc.window_lo = s.x[lo];
  fc.window_hi = s.x[hi];
  double fmax = 0.0;
  for (int i = lo; i < hi; ++i) fmax = std::max(fmax, std::fabs(fc.F[i]));
  for (int i = lo; i + 1 < hi; ++i) {
    if (fc.F[i + 1] > fc.F[i] + 1e-12 * fmax) fc.flux_decreasing = false;
  }
  for (int i = lo; i < hi; ++i) {
    if (s.log_eta(0, i + 1) < s.log_eta(0, i) - 1e-12) fc.eta1_nondecreasing = false;
  }
  return fc;
}

/// Q-process transition density against dy.
inline double qprocess_kernel(const SpectralDecomposition& s, double t, double x, double y) {
  double r = kernel_r(s, t, x, y).value;
  double l1 = s.lambdas[0];
  double ex = s.eta_at(0, x);
  double ey = s.eta_at(0, y);
  if (!(ex > 0.0)) throw DomainError("spectral", "Q-process started outside the domain");
  return std::exp(l1 * t - s.drift->Q(y)) * ey / ex * r;
}

/// int q(t, x_i, y) dy under the node weights.
inline double qprocess_row_sum(const SpectralDecomposition& s, double t, int i) {
  s.require_t(t);
  double sum = 0.0;
  for (int k = 0; k < s.K(); ++k) {
    const LogVector& v = s.log_psis[k];
    if (v.sign[i] == 0) continue;
    double ratio = v.sign[i] * std::exp(v.logabs[i] - s.log_psis[0].logabs[i]);
    sum += std::exp(-(s.lambdas[k] - s.lambdas[0]) * t) * ratio * s.gram_first[k];
  }
  return sum;
}

/// Stationary density of the Q-process, eta_1^2 e^{-Q} = psi_1^2, on the grid.
inline std::vector<double> qprocess_stationary(const SpectralDecomposition& s) {
  std::vector<double> out(s.n(), 0.0);
  for (int i = 0; i < s.n(); ++i) out[i] = s.psis[0][i] * s.psis[0][i];
  return out;
}

struct BoundCheck {
  double lhs = 0.0;
  double rhs = 0.0;
  bool satisfied = false;
};

inline double dirichlet_heat_kernel(double t, double x, double y) {
  double c = 1.0 / std::sqrt(2.0 * std::numbers::pi * t);
  // e^{-(x-y)^2/2t} (1 - e^{-2xy/t})
  return c * std::exp(-(x - y) * (x - y) / (2.0 * t)) * -std::expm1(-2.0 * x * y / t);
}

/// Schrodinger kernel at t = 1 against e^{C/2} times the half-line
/// Dirichlet heat kernel.
inline BoundCheck appendix_bound_check(const SpectralDecomposition& s, double x, double y) {
  if (s.t_min > 1.0) throw PreconditionError("spectral", "t = 1 is below t_min; increase K");
  BoundCheck b;
  for (int k = 0; k < s.K(); ++k) b.lhs += std::exp(-s.lambdas[k]) * s.psi_at(k, x) * s.psi_at(k, y);
  b.rhs = std::exp(0.5 * s.C) * dirichlet_heat_kernel(1.0, x, y);
  b.satisfied = b.lhs <= b.rhs * (1.0 + 1e-6);
  return b;
}

/// int r(t, x, y)^2 mu(dy) against (2 pi t)^{-1/2} e^{C t} e^{Q(x)}.
inline BoundCheck l2_bound_check(const SpectralDecomposition& s, double t, double x) {
  s.require_t(t);
  BoundCheck b;
  for (int k = 0; k < s.K(); ++k) {
    double e = s.eta_at(k, x);
    b.lhs += std::exp(-2.0 * s.lambdas[k] * t) * e * e;
  }
  b.rhs = std::exp(s.C * t + s.drift->Q(x)) / std::sqrt(2.0 * std::numbers::pi * t);
  b.satisfied = b.lhs <= b.rhs * (1.0 + 1e-6);
  return b;
}

}  // namespace qsd
