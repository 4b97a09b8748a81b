#pragma once

// Numerical verification of the standing hypotheses on a drift field:
//   H1  Lambda(inf) = inf and kappa(0+) < inf
//   H2  q^2 - q' -> +inf and C < inf
//   H3  int_0^1 e^{-Q} / (q^2 - q' + C + 2) < inf
//   H4  int_1^inf e^{-Q} < inf and int_0^1 x e^{-Q/2} < inf
//   H5  int_1^inf e^{Q(y)} int_y^inf e^{-Q} dz dy < inf (comes down from infinity)
//   HH  h(x)/sqrt(x) -> -inf and x h'(x)/h(x)^2 -> 0 for a growth model
// plus the int 1/q criterion and the descent functional J used for
// exponential moments of hitting times.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "qsd/errors.hpp"
#include "qsd/model.hpp"
#include "qsd/quadrature.hpp"

namespace qsd {

enum class HypStatus { holds, fails, inconclusive };

inline const char* to_string(HypStatus s) {
  switch (s) {
    case HypStatus::holds: return "holds";
    case HypStatus::fails: return "fails";
    case HypStatus::inconclusive: return "inconclusive";
  }
  return "?";
}

struct NamedIntegral {
  std::string name;
  IntegralVerdict verdict;
};

struct LimitProbe {
  std::string name;
  std::vector<double> abscissae;
  std::vector<double> values;
};

struct HypothesisVerdict {
  HypStatus status = HypStatus::inconclusive;
  std::vector<NamedIntegral> integrals;
  std::vector<LimitProbe> probes;
  std::string note;

  bool holds() const { return status == HypStatus::holds; }
};

struct InvQCriterion {
  IntegralVerdict verdict;
  double x0 = std::numeric_limits<double>::quiet_NaN();
  bool monotone_confirmed = false;
};

struct HypothesisReport {
  HypothesisVerdict h1, h2, h3, h4, h5, hh;
  bool hh_computed = false;
  double C = 0.0;
  InvQCriterion inv_q;
};

namespace detail {

// Length scale of exp(-Q_increment(y, .)) near u = 0.
inline double decay_scale(const DriftField& d, double y) {
  double qy = d.q(y);
  double base = 0.25 * std::max(y, 1.0);
  if (qy > 0.0 && std::isfinite(qy)) return std::min(base, 20.0 / qy);
  return base;
}

}  // namespace detail

/// log( e^{Q(y)} int_y^inf e^{-Q(z)} dz ); +inf when the tail diverges.
inline double log_descent_rate(const DriftField& d, double y, double rel_tol = 1e-11) {
  auto lf = [&](double u) { return -d.Q_increment(y, u); };
  return log_integral_to_infinity(lf, 0.0, rel_tol, 1e12, detail::decay_scale(d, y));
}

/// log( e^{-Q(y)} int_1^y e^{Q(z)} dz ) for y > 1.
inline double log_entrance_inner(const DriftField& d, double y, double rel_tol = 1e-11) {
  if (!(y > 1.0)) return detail::kNegInf;
  auto lf = [&](double v) { return -d.Q_increment(y - v, v); };
  double width = y - 1.0;
  double split = std::min(width, detail::decay_scale(d, y));
  auto a = detail::adaptive_log(lf, 0.0, split, rel_tol, 8);
  if (split >= width) return a.value;
  // Beyond the boundary layer the mass is spread over [split, width].
  double lo = split;
  double total = a.value;
  while (lo < width) {
    double hi = std::min(width, lo * 4.0);
    total = detail::log_add(total, detail::adaptive_log(lf, lo, hi, rel_tol, 8).value);
    lo = hi;
  }
  return total;
}

inline HypothesisVerdict check_h1(const DriftField& d, const QuadratureSpec& spec = {}) {
  HypothesisVerdict v;
  const double inf = std::numeric_limits<double>::infinity();
  IntegralVerdict lam = integrate_log([&](double y) { return d.Q(y); }, 1.0, inf, spec);
  auto kappa_lf = [&](double y) {
    auto inner = detail::adaptive_log([&](double z) { return -d.Q(z); }, y, 1.0, 1e-11, 8);
    return d.Q(y) + inner.value;
  };
  IntegralVerdict kap = integrate_log(kappa_lf, 0.0, 1.0, spec, true);
  v.integrals.push_back({"Lambda(inf) = int_1^inf e^Q", lam});
  v.integrals.push_back({"kappa(0+) = int_0^1 e^Q(y) int_y^1 e^-Q", kap});
  if (lam.converges() || kap.diverges()) {
    v.status = HypStatus::fails;
  } else if (lam.diverges() && kap.converges()) {
    v.status = HypStatus::holds;
  } else {
    v.note = "a trail failed to classify";
  }
  return v;
}

inline HypothesisVerdict check_h2(const DriftField& d) {
  HypothesisVerdict v;
  LimitProbe p{"w(10^k)", {}, {}};
  for (int k = 0; k <= 6; ++k) {
    double x = std::pow(10.0, k);
    p.abscissae.push_back(x);
    p.values.push_back(d.w(x));
  }
  LimitProbe c{"C", {}, {d.C}};
  v.probes = {p, c};
  if (!std::isfinite(d.C)) {
    v.status = HypStatus::fails;
    v.note = "C is not finite";
    return v;
  }
  const auto& w = p.values;
  for (double x : w) {
    if (std::isnan(x)) {
      v.note = "potential is NaN at a probe";
      return v;
    }
  }
  std::vector<double> inc;
  for (std::size_t k = 1; k < w.size(); ++k) inc.push_back(w[k] - w[k - 1]);
  const std::size_t m = inc.size();
  bool rising = inc[m - 1] > 0 && inc[m - 2] > 0 && inc[m - 3] > 0;
  bool flat_or_falling = inc[m - 1] <= 0 && inc[m - 2] <= 0 && inc[m - 3] <= 0;
  if (flat_or_falling) {
    v.status = HypStatus::fails;
    v.note = "probes are eventually non-increasing, the limit is finite";
    return v;
  }
  if (!rising) {
    v.note = "probes are not eventually monotone";
    return v;
  }
  if (std::isinf(w.back())) {
    v.status = HypStatus::holds;
    return v;
  }
  std::vector<double> log_inc;
  for (std::size_t k = m - 4 < m ? m - 4 : 0; k < m; ++k) log_inc.push_back(std::log(inc[k]));
  std::vector<double> decades(log_inc.size(), 1.0);
  TrailClass cls = classify_increments(log_inc, decades);
  if (cls.status == IntegralStatus::diverges) {
    v.status = HypStatus::holds;
    v.note = std::string("growth ") + to_string(cls.growth);
  } else if (cls.status == IntegralStatus::converges) {
    v.status = HypStatus::fails;
    v.note = "increments shrink geometrically, the limit is finite";
  } else {
    v.note = "growth of the probes did not classify";
  }
  return v;
}

inline HypothesisVerdict check_h3(const DriftField& d, const QuadratureSpec& spec = {}) {
  HypothesisVerdict v;
  auto lf = [&](double y) {
    double qq = d.q(y);
    return -d.Q(y) - std::log(qq * qq - d.q_prime(y) + d.C + 2.0);
  };
  IntegralVerdict iv = integrate_log(lf, 0.0, 1.0, spec, true);
  v.integrals.push_back({"int_0^1 mu(dy) / (q^2 - q' + C + 2)", iv});
  if (iv.converges()) v.status = HypStatus::holds;
  else if (iv.diverges()) v.status = HypStatus::fails;
  return v;
}

inline HypothesisVerdict check_h4(const DriftField& d, const QuadratureSpec& spec = {}) {
  HypothesisVerdict v;
  const double inf = std::numeric_limits<double>::infinity();
  IntegralVerdict a = integrate_log([&](double y) { return -d.Q(y); }, 1.0, inf, spec);
  IntegralVerdict b =
      integrate_log([&](double y) { return std::log(y) - 0.5 * d.Q(y); }, 0.0, 1.0, spec, true);
  v.integrals.push_back({"int_1^inf e^-Q", a});
  v.integrals.push_back({"int_0^1 x e^(-Q/2)", b});
  if (a.diverges() || b.diverges()) v.status = HypStatus::fails;
  else if (a.converges() && b.converges()) v.status = HypStatus::holds;
  return v;
}

inline HypothesisVerdict check_h5(const DriftField& d, const QuadratureSpec& spec = {}) {
  HypothesisVerdict v;
  const double inf = std::numeric_limits<double>::infinity();
  // Without int_1^inf e^{-Q} < inf the integrand itself is infinite.
  double tail1 = log_descent_rate(d, 1.0);
  if (std::isinf(tail1)) {
    IntegralVerdict mu_tail = integrate_log([&](double y) { return -d.Q(y); }, 1.0, inf, spec);
    v.integrals.push_back({"int_1^inf e^-Q", mu_tail});
    if (mu_tail.diverges()) {
      v.status = HypStatus::fails;
      v.note = "int_1^inf e^-Q diverges, so both forms are infinite";
      return v;
    }
  }
  IntegralVerdict direct = integrate_log([&](double y) { return log_descent_rate(d, y); }, 1.0, inf, spec);
  IntegralVerdict entrance =
      integrate_log([&](double y) { return log_entrance_inner(d, y); }, 1.0, inf, spec);
  v.integrals.push_back({"int_1^inf e^Q(y) int_y^inf e^-Q", direct});
  v.integrals.push_back({"int_1^inf e^-Q(y) int_1^y e^Q", entrance});
  if (direct.status != entrance.status) {
    v.note = "the two equivalent forms disagree";
    return v;
  }
  if (direct.converges()) v.status = HypStatus::holds;
  else if (direct.diverges()) v.status = HypStatus::fails;
  else v.note = "trail failed to classify";
  return v;
}

inline HypothesisVerdict check_hh(const GrowthModel& g) {
  g.validate();
  HypothesisVerdict v;
  LimitProbe a{"h(x)/sqrt(x)", {}, {}};
  LimitProbe b{"x h'(x)/h(x)^2", {}, {}};
  for (int k = 2; k <= 8; ++k) {
    double x = std::pow(10.0, k);
    double h = g.h(x);
    a.abscissae.push_back(x);
    a.values.push_back(h / std::sqrt(x));
    b.abscissae.push_back(x);
    b.values.push_back(x * g.h_prime(x) / (h * h));
  }
  v.probes = {a, b};
  const std::size_t m = a.values.size();

  HypStatus first = HypStatus::inconclusive;
  {
    const auto& s = a.values;
    bool negative = s[m - 1] < 0 && s[m - 2] < 0 && s[m - 3] < 0;
    bool nonneg_tail = s[m - 1] >= 0 && s[m - 2] >= 0;
    if (nonneg_tail) {
      first = HypStatus::fails;
    } else if (negative && s[m - 1] < s[m - 2] && s[m - 2] < s[m - 3]) {
      std::vector<double> log_inc;
      for (std::size_t k = m - 4; k + 1 < m; ++k) log_inc.push_back(std::log(s[k] - s[k + 1]));
      std::vector<double> decades(log_inc.size(), 1.0);
      TrailClass cls = classify_increments(log_inc, decades);
      if (cls.status == IntegralStatus::diverges) first = HypStatus::holds;
      else if (cls.status == IntegralStatus::converges) first = HypStatus::fails;
    } else if (negative && s[m - 1] >= s[m - 2] && s[m - 2] >= s[m - 3]) {
      first = HypStatus::fails;
    }
  }
  HypStatus second = HypStatus::inconclusive;
  {
    std::vector<double> s;
    for (double x : b.values) s.push_back(std::fabs(x));
    bool finite = std::isfinite(s[m - 1]) && std::isfinite(s[m - 2]) && std::isfinite(s[m - 3]);
    if (finite && s[m - 1] < s[m - 2] && s[m - 2] < s[m - 3] && s[m - 1] < 1e-3) {
      second = HypStatus::holds;
    } else if (finite && s[m - 1] >= s[m - 2] && s[m - 2] >= s[m - 3]) {
      second = HypStatus::fails;
    }
  }
  if (first == HypStatus::fails || second == HypStatus::fails) v.status = HypStatus::fails;
  else if (first == HypStatus::holds && second == HypStatus::holds) v.status = HypStatus::holds;
  v.note = std::string("h/sqrt(x) limit: ") + to_string(first) + ", x h'/h^2 limit: " + to_string(second);
  return v;
}

/// Verdict on int_{x0}^inf dx / q where x0 is the first of 4096 log nodes on
/// [1e-6, 1e6] from which q stays positive (at least 64 nodes, through the
/// end of the grid).
inline InvQCriterion inv_q_criterion(const DriftField& d, const QuadratureSpec& spec = {}) {
  InvQCriterion out;
  const int n = 4096;
  std::vector<double> xs = log_probe_grid(1e-6, 1e6, n);
  int start = -1;
  for (int i = n - 1; i >= 0; --i) {
    double qi = d.q(xs[i]);
    if (!(qi > 0.0)) break;
    start = i;
  }
  if (start < 0 || n - start < 64) {
    out.verdict.status = IntegralStatus::not_applicable;
    out.verdict.note = "q is not eventually positive on the probe grid";
    return out;
  }
  out.x0 = xs[start];
  out.monotone_confirmed = true;
  for (int i = start; i < n; ++i) {
    if (d.q_prime(xs[i]) < 0.0) {
      out.monotone_confirmed = false;
      break;
    }
  }
  try {
    out.verdict = integrate_log([&](double x) { return -std::log(d.q(x)); }, out.x0,
                                std::numeric_limits<double>::infinity(), spec);
  } catch (const EvaluationError& e) {
    out.verdict = IntegralVerdict{};
    out.verdict.note = std::string("q vanished between probe nodes: ") + e.what();
  }
  return out;
}

/// J(x) = int_{x_a}^x e^{Q(y)} int_y^inf e^{-Q(z)} dz dy, with
/// J'' = 2 q J' - 1.
class DescentFunctional {
 public:
  DescentFunctional(DriftField d, double x_a) : d_(std::move(d)), x_a_(x_a) {
    if (std::isinf(log_descent_rate(d_, x_a_))) {
      throw PreconditionError("quadrature", "int_y^inf e^-Q diverges, descent functional undefined");
    }
  }

  double x_a() const { return x_a_; }

  double J_prime(double y) const { return std::exp(log_descent_rate(d_, y, 1e-13)); }

  double J(double x) const {
    if (x < x_a_) throw PreconditionError("quadrature", "descent functional needs x >= x_a");
    if (x == x_a_) return 0.0;
    auto r = detail::adaptive_log([&](double y) { return log_descent_rate(d_, y); }, x_a_, x, 1e-11, 8);
    return std::exp(r.value);
  }

  /// 1/2 J'' - q J' + 1/2 with J'' from a fourth-order difference of J'.
  double ode_residual(double y, double h = 1e-3) const {
    h = std::min(h, 0.25 * (y - x_a_ > 0 ? y : 1.0));
    double jpp = (-J_prime(y + 2 * h) + 8 * J_prime(y + h) - 8 * J_prime(y - h) + J_prime(y - 2 * h)) / (12 * h);
    return 0.5 * jpp - d_.q(y) * J_prime(y) + 0.5;
  }

 private:
  DriftField d_;
  double x_a_;
};

inline double descent_functional(const DriftField& d, double x_a, double x) {
  return DescentFunctional(d, x_a).J(x);
}

struct ExpMomentBound {
  double a = 0.0;
  double x_a = 0.0;
  double y_a = 0.0;
  double J_ya = 0.0;
  double bound = std::numeric_limits<double>::infinity();  // sup_{x > y_a} E_x[e^{a T_{y_a}}] <=
};

/// Picks x_a with int_{x_a}^inf J' <= 1/(2a), sets y_a = 1 + x_a and reports
/// 1 / (2 a J(y_a)).
inline ExpMomentBound exp_moment_bound(const DriftField& d, double a) {
  if (!(a > 0.0)) throw PreconditionError("quadrature", "exponential rate must be positive");
  ExpMomentBound out;
  out.a = a;
  auto lf = [&](double y) { return log_descent_rate(d, y); };
  double x_a = 1.0;
  for (int i = 0; i < 60; ++i, x_a *= 2.0) {
    double tail = log_integral_to_infinity(lf, x_a, 1e-9, 1e12);
    if (std::isfinite(tail) && std::exp(tail) <= 1.0 / (2.0 * a)) break;
    if (i == 59) throw PreconditionError("quadrature", "int J' does not converge; (H5) fails");
  }
  out.x_a = x_a;
  out.y_a = 1.0 + x_a;
  out.J_ya = descent_functional(d, x_a, out.y_a);
  out.bound = 1.0 / (2.0 * a * out.J_ya);
  return out;
}

inline HypothesisReport check_all(const DriftField& d, const GrowthModel* g = nullptr,
                                  const QuadratureSpec& spec = {}) {
  HypothesisReport r;
  r.C = d.C;
  r.h1 = check_h1(d, spec);
  r.h2 = check_h2(d);
  r.h3 = check_h3(d, spec);
  r.h4 = check_h4(d, spec);
  r.h5 = check_h5(d, spec);
  if (g != nullptr) {
    r.hh = check_hh(*g);
    r.hh_computed = true;
  } else {
    r.hh.note = "no growth model";
  }
  r.inv_q = inv_q_criterion(d, spec);
  return r;
}

}  // namespace qsd
