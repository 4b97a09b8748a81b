#pragma once

// Drift fields q of dX = dB - q(X) dt, growth models h of
// dZ = sqrt(gamma Z) dB + h(Z) dt, and the map X = 2 sqrt(Z / gamma)
// between them.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qsd/errors.hpp"
#include "qsd/expression.hpp"
#include "qsd/quadrature.hpp"

namespace qsd {

using Evaluator = std::function<double(double)>;

/// Fourth-order central difference with step max(1e-5, 1e-5 x), capped at
/// x/4 so that every stencil point stays inside (0, inf).
inline double central_derivative(const Evaluator& f, double x) {
  double h = std::max(1e-5, 1e-5 * x);
  if (x > 0.0) h = std::min(h, 0.25 * x);
  return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h);
}

/// Log-spaced probe nodes on [lo, hi].
inline std::vector<double> log_probe_grid(double lo, double hi, int n) {
  std::vector<double> xs(n);
  double a = std::log(lo);
  double b = std::log(hi);
  for (int i = 0; i < n; ++i) xs[i] = std::exp(a + (b - a) * i / (n - 1));
  xs.front() = lo;
  xs.back() = hi;
  return xs;
}

struct GrowthModel {
  Evaluator h;
  Evaluator h_prime;
  double gamma = 1.0;
  // Coefficients a_k of h(z) = sum_k a_k z^k when h is a polynomial
  // (a_0 must be 0). Enables closed forms for Q and J.
  std::vector<double> poly;
  std::string label;

  void validate() const {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) {
      throw ModelError("model", "gamma must be positive and finite");
    }
    if (!h) throw ModelError("model", "growth function missing");
    double h0 = h(0.0);
    if (h0 != 0.0) throw ModelError("model", "growth function must vanish at 0, got h(0)=" + std::to_string(h0));
    if (!poly.empty() && poly[0] != 0.0) throw ModelError("model", "polynomial growth needs a_0 = 0");
  }

  /// J(x) = int_0^x 2 h(z) / (gamma z) dz.
  double J(double x) const {
    if (!poly.empty()) {
      double s = 0.0;
      double xp = 1.0;
      for (std::size_t k = 1; k < poly.size(); ++k) {
        xp *= x;
        s += poly[k] * 2.0 * xp / (gamma * static_cast<double>(k));
      }
      return s;
    }
    if (x == 0.0) return 0.0;
    auto f = [&](double z) { return z == 0.0 ? 2.0 * h_prime(0.0) / gamma : 2.0 * h(z) / (gamma * z); };
    return detail::adaptive(f, 0.0, x, 1e-12, 1e-14, 10).value;
  }
};

inline GrowthModel make_polynomial_growth(std::vector<double> coeffs, double gamma, std::string label) {
  GrowthModel g;
  g.poly = std::move(coeffs);
  g.gamma = gamma;
  g.label = std::move(label);
  auto c = g.poly;
  g.h = [c](double z) {
    double s = 0.0;
    for (std::size_t k = c.size(); k-- > 0;) s = s * z + c[k];
    return s;
  };
  g.h_prime = [c](double z) {
    double s = 0.0;
    for (std::size_t k = c.size(); k-- > 1;) s = s * z + static_cast<double>(k) * c[k];
    return s;
  };
  g.validate();
  return g;
}

/// h(z) = r z - c z^2
inline GrowthModel logistic_growth(double r, double c, double gamma) {
  return make_polynomial_growth({0.0, r, -c}, gamma, "logistic");
}

/// h(z) = r z
inline GrowthModel linear_growth(double r, double gamma) {
  return make_polynomial_growth({0.0, r}, gamma, "linear");
}

/// h(z) = r z (z/K0 - 1)(1 - z/K)
inline GrowthModel allee_growth(double r, double K0, double K, double gamma) {
  if (!(K0 > 0.0) || !(K > 0.0)) throw ModelError("model", "allee thresholds must be positive");
  return make_polynomial_growth({0.0, -r, r * (1.0 / K0 + 1.0 / K), -r / (K0 * K)}, gamma, "allee");
}

inline GrowthModel custom_growth(const std::string& expr, double gamma,
                                 const std::map<std::string, double>& constants = {}) {
  auto e = std::make_shared<Expression>(Expression::compile(expr, "z", constants));
  GrowthModel g;
  g.gamma = gamma;
  g.label = "custom";
  g.h = [e](double z) { return (*e)(z); };
  Evaluator hf = g.h;
  g.h_prime = [hf](double z) {
    if (z == 0.0) {
      double h = 1e-6;
      return (-3 * hf(0.0) + 4 * hf(h) - hf(2 * h)) / (2 * h);
    }
    return central_derivative(hf, z);
  };
  g.validate();
  return g;
}

struct DriftField {
  Evaluator q;
  Evaluator q_prime;
  Evaluator Q;
  // Optional cancellation-free Q(y + u) - Q(y).
  std::function<double(double, double)> dQ;
  double C = 0.0;
  double origin_exponent = 0.0;
  std::string label;

  /// Q(y + u) - Q(y), accurate even when u is far below the spacing of
  /// doubles near y.
  double Q_increment(double y, double u) const {
    if (dQ) return dQ(y, u);
    if (u == 0.0) return 0.0;
    if (std::fabs(u) <= 0.05 * y) {
      // Eight-point Gauss-Legendre on [y, y + u]; q is smooth on that scale.
      static constexpr double node[4] = {0.1834346424956498, 0.5255324099163290,
                                         0.7966664774136267, 0.9602898564975363};
      static constexpr double weight[4] = {0.3626837833783620, 0.3137066458778873,
                                           0.2223810344533745, 0.1012285362903763};
      double m = y + 0.5 * u;
      double r = 0.5 * u;
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += weight[k] * (q(m + r * node[k]) + q(m - r * node[k]));
      return 2.0 * r * s;
    }
    double a = Q(y);
    double b = Q(y + u);
    double diff = b - a;
    if (std::fabs(diff) > 1e-3 * std::max(std::fabs(a), std::fabs(b))) return diff;
    auto f = [&](double v) { return 2.0 * q(y + v); };
    auto r = u > 0.0 ? detail::adaptive(f, 0.0, u, 1e-12, 1e-300, 8) : detail::adaptive(f, u, 0.0, 1e-12, 1e-300, 8);
    return u > 0.0 ? r.value : -r.value;
  }

  /// Schrodinger potential (q^2 - q') / 2.
  double w(double x) const {
    double v = q(x);
    return 0.5 * (v * v - q_prime(x));
  }
  double log_mu_density(double x) const { return -Q(x); }
};

inline double potential(const DriftField& d, double x) {
  if (!(x > 0.0)) throw DomainError("model", "potential needs x > 0");
  return d.w(x);
}

/// C = max(0, -inf (q^2 - q')) over 4096 log nodes on [1e-6, 1e6] with a
/// golden-section refinement around the best node.
inline double estimate_C(const Evaluator& q, const Evaluator& q_prime) {
  auto g = [&](double x) {
    double v = q(x);
    double r = v * v - q_prime(x);
    if (!std::isfinite(r)) r = std::numeric_limits<double>::infinity();
    return r;
  };
  const int n = 4096;
  std::vector<double> xs = log_probe_grid(1e-6, 1e6, n);
  int best = 0;
  double best_v = g(xs[0]);
  for (int i = 1; i < n; ++i) {
    double v = g(xs[i]);
    if (v < best_v) {
      best_v = v;
      best = i;
    }
  }
  double a = std::log(xs[std::max(best - 1, 0)]);
  double b = std::log(xs[std::min(best + 1, n - 1)]);
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - phi * (b - a);
  double d = a + phi * (b - a);
  double gc = g(std::exp(c));
  double gd = g(std::exp(d));
  for (int it = 0; it < 80 && b - a > 1e-12; ++it) {
    if (gc < gd) {
      b = d;
      d = c;
      gd = gc;
      c = b - phi * (b - a);
      gc = g(std::exp(c));
    } else {
      a = c;
      c = d;
      gc = gd;
      d = a + phi * (b - a);
      gd = g(std::exp(d));
    }
  }
  best_v = std::min({best_v, gc, gd});
  return std::max(0.0, -best_v);
}

/// Q(x) = int_1^x 2q by quadrature in s = ln x.
inline double quadrature_Q_at(const Evaluator& q, double x) {
  if (!(x > 0.0)) throw DomainError("model", "Q needs x > 0");
  if (x == 1.0) return 0.0;
  auto f = [&](double s) {
    double u = std::exp(s);
    return 2.0 * q(u) * u;
  };
  double lx = std::log(x);
  auto r = lx > 0.0 ? detail::adaptive(f, 0.0, lx, 1e-12, 1e-14, 8)
                    : detail::adaptive(f, lx, 0.0, 1e-12, 1e-14, 8);
  return lx > 0.0 ? r.value : -r.value;
}

/// Q tabulated on a log grid over [1e-10, 1e10] and evaluated by cubic
/// Hermite interpolation in s = ln x, using dQ/ds = 2 q(x) x exactly.
/// Outside the table Q falls back to direct quadrature.
inline Evaluator quadrature_Q(const Evaluator& q) {
  struct Table {
    double s0, ds;
    std::vector<double> Q, dQ;
  };
  auto t = std::make_shared<Table>();
  const int n = 24001;
  const double s_lo = std::log(1e-10);
  const double s_hi = std::log(1e10);
  t->s0 = s_lo;
  t->ds = (s_hi - s_lo) / (n - 1);
  t->Q.assign(n, 0.0);
  t->dQ.assign(n, 0.0);
  auto f = [&](double s) {
    double u = std::exp(s);
    return 2.0 * q(u) * u;
  };
  const int i1 = static_cast<int>(std::lround(-s_lo / t->ds));  // node at s = 0
  for (int i = 0; i < n; ++i) t->dQ[i] = f(s_lo + i * t->ds);
  // Integrate outward from the node closest to x = 1, then re-anchor.
  double anchor = -quadrature_Q_at(q, std::exp(s_lo + i1 * t->ds));
  t->Q[i1] = 0.0;
  for (int i = i1 + 1; i < n; ++i) {
    double a = s_lo + (i - 1) * t->ds;
    t->Q[i] = t->Q[i - 1] + detail::adaptive(f, a, a + t->ds, 1e-13, 1e-300, 4).value;
  }
  for (int i = i1 - 1; i >= 0; --i) {
    double a = s_lo + i * t->ds;
    t->Q[i] = t->Q[i + 1] - detail::adaptive(f, a, a + t->ds, 1e-13, 1e-300, 4).value;
  }
  for (double& v : t->Q) v -= anchor;
  return [t, q](double x) {
    if (!(x > 0.0)) throw DomainError("model", "Q needs x > 0");
    if (x == 1.0) return 0.0;
    double s = std::log(x);
    double pos = (s - t->s0) / t->ds;
    int i = static_cast<int>(std::floor(pos));
    if (i < 0 || i + 1 >= static_cast<int>(t->Q.size())) return quadrature_Q_at(q, x);
    double u = pos - i;
    double h = t->ds;
    double u2 = u * u;
    double u3 = u2 * u;
    return (2 * u3 - 3 * u2 + 1) * t->Q[i] + (u3 - 2 * u2 + u) * h * t->dQ[i] +
           (-2 * u3 + 3 * u2) * t->Q[i + 1] + (u3 - u2) * h * t->dQ[i + 1];
  };
}

/// Assemble a DriftField; q_prime and Q are optional closed forms.
inline DriftField make_drift(Evaluator q, Evaluator q_prime, Evaluator Q, double origin_exponent,
                             std::string label) {
  if (!q) throw ModelError("model", "drift missing");
  DriftField d;
  d.q = std::move(q);
  if (q_prime) {
    d.q_prime = std::move(q_prime);
  } else {
    Evaluator qq = d.q;
    d.q_prime = [qq](double x) { return central_derivative(qq, x); };
  }
  d.Q = Q ? std::move(Q) : quadrature_Q(d.q);
  d.origin_exponent = origin_exponent;
  d.label = std::move(label);
  for (double x : log_probe_grid(1e-6, 1e6, 61)) {
    if (!std::isfinite(d.q(x))) {
      throw ModelError("model", "drift is not finite at x=" + std::to_string(x));
    }
  }
  d.C = estimate_C(d.q, d.q_prime);
  return d;
}

/// q(x) = 1/(2x) - (2/(gamma x)) h(gamma x^2 / 4).
inline DriftField drift_from_growth(const GrowthModel& g) {
  g.validate();
  const double gamma = g.gamma;
  for (double x : log_probe_grid(1e-6, 1e6, 61)) {
    double z = gamma * x * x / 4.0;
    if (!std::isfinite(g.h(z))) {
      throw ModelError("model", "growth function is not finite at z=" + std::to_string(z));
    }
  }
  Evaluator q;
  Evaluator qp;
  Evaluator Q;
  std::function<double(double, double)> dQ;
  if (!g.poly.empty()) {
    // Term k of h contributes a_k 2 gamma^{k-1} x^{2k-1} / 4^k to -q.
    std::vector<double> c(g.poly.size(), 0.0);
    for (std::size_t k = 1; k < g.poly.size(); ++k) {
      c[k] = g.poly[k] * 2.0 * std::pow(gamma, static_cast<double>(k) - 1.0) /
             std::pow(4.0, static_cast<double>(k));
    }
    q = [c](double x) {
      double s = 0.0;
      double x2 = x * x;
      double p = x;
      for (std::size_t k = 1; k < c.size(); ++k) {
        s += c[k] * p;
        p *= x2;
      }
      return 0.5 / x - s;
    };
    qp = [c](double x) {
      double s = 0.0;
      double x2 = x * x;
      double p = 1.0;
      for (std::size_t k = 1; k < c.size(); ++k) {
        s += c[k] * static_cast<double>(2 * k - 1) * p;
        p *= x2;
      }
      return -0.5 / (x * x) - s;
    };
    Q = [c](double x) {
      if (!(x > 0.0)) throw DomainError("model", "Q needs x > 0");
      double s = 0.0;
      double lx2 = 2.0 * std::log(x);
      for (std::size_t k = 1; k < c.size(); ++k) {
        s += c[k] * std::expm1(static_cast<double>(k) * lx2) / static_cast<double>(k);
      }
      return std::log(x) - s;
    };
    dQ = [c](double y, double u) {
      // (y+u)^{2k} - y^{2k} expanded binomially, so no cancellation.
      double s = 0.0;
      for (std::size_t k = 1; k < c.size(); ++k) {
        int m = static_cast<int>(2 * k);
        double inc = 0.0;
        double binom = 1.0;
        for (int j = 1; j <= m; ++j) {
          binom = binom * (m - j + 1) / j;
          inc += binom * std::pow(y, m - j) * std::pow(u, j);
        }
        s += c[k] * inc / static_cast<double>(k);
      }
      return std::log1p(u / y) - s;
    };
  } else {
    Evaluator h = g.h;
    Evaluator hp = g.h_prime;
    q = [h, gamma](double x) { return 0.5 / x - 2.0 / (gamma * x) * h(gamma * x * x / 4.0); };
    qp = [h, hp, gamma](double x) {
      double z = gamma * x * x / 4.0;
      return -0.5 / (x * x) + 2.0 * h(z) / (gamma * x * x) - hp(z);
    };
  }
  DriftField d = make_drift(q, qp, Q, 0.5, g.label.empty() ? "growth" : g.label);
  d.dQ = std::move(dQ);
  return d;
}

/// q(x) = theta x, Q = theta (x^2 - 1).
inline DriftField ou_drift(double theta) {
  DriftField d = make_drift([theta](double x) { return theta * x; }, [theta](double) { return theta; },
                            [theta](double x) { return theta * (x * x - 1.0); }, 0.0, "ou");
  d.dQ = [theta](double y, double u) { return theta * u * (2.0 * y + u); };
  return d;
}

inline DriftField custom_drift(const std::string& expr, const std::map<std::string, double>& constants = {}) {
  auto e = std::make_shared<Expression>(Expression::compile(expr, "x", constants));
  Evaluator q = [e](double x) { return (*e)(x); };
  // q(x) ~ a/x at the origin: read a off x q(x) at a tiny abscissa.
  double a = 1e-9 * q(1e-9);
  if (!std::isfinite(a) || std::fabs(a) < 1e-6) a = 0.0;
  return make_drift(q, nullptr, nullptr, a, "custom");
}

/// x = 2 sqrt(z / gamma).
inline double transform_state(const GrowthModel& g, double z) {
  if (!(z >= 0.0)) throw DomainError("model", "transform_state needs z >= 0");
  return 2.0 * std::sqrt(z / g.gamma);
}

/// z = gamma x^2 / 4.
inline double inverse_transform_state(const GrowthModel& g, double x) {
  if (!(x >= 0.0)) throw DomainError("model", "inverse_transform_state needs x >= 0");
  return g.gamma * x * x / 4.0;
}

struct ScaleValue {
  double value = 0.0;
  double error = 0.0;
  bool converged = true;
};

/// Lambda(x) = int_1^x e^Q, kappa(x) = int_1^x e^{Q(y)} int_1^y e^{-Q} dz dy,
/// and the mu density e^{-Q}. Evaluations are memoized.
class ScaleFunctions {
 public:
  ScaleFunctions(DriftField d, QuadratureSpec quad)
      : d_(std::move(d)), quad_(std::move(quad)), cache_(std::make_shared<Cache>()) {
    quad_.validate();
  }

  ScaleValue Lambda(double x) const { return memo(cache_->lambda, x, [&] { return compute_lambda(x); }); }
  ScaleValue kappa(double x) const { return memo(cache_->kappa, x, [&] { return compute_kappa(x); }); }
  double mu_density(double x) const { return std::exp(-d_.Q(x)); }

 private:
  struct Cache {
    std::mutex m;
    std::map<double, ScaleValue> lambda;
    std::map<double, ScaleValue> kappa;
  };

  template <class F>
  ScaleValue memo(std::map<double, ScaleValue>& table, double x, F&& compute) const {
    {
      std::lock_guard<std::mutex> lock(cache_->m);
      auto it = table.find(x);
      if (it != table.end()) return it->second;
    }
    ScaleValue v = compute();
    std::lock_guard<std::mutex> lock(cache_->m);
    table.emplace(x, v);
    return v;
  }

  // Signed integral of e^{sign*Q} between 1 and x.
  ScaleValue signed_exp_integral(double x, double sign) const {
    if (!(x > 0.0)) throw DomainError("model", "scale functions need x > 0");
    if (x == 1.0) return {};
    auto lf = [&](double y) { return sign * d_.Q(y); };
    double lo = std::min(x, 1.0);
    double hi = std::max(x, 1.0);
    auto r = detail::adaptive_log(lf, lo, hi, quad_.rel_tol, quad_.max_depth / 4);
    double v = std::exp(r.value);
    return {x > 1.0 ? v : -v, r.rel_err * v, r.converged};
  }

  ScaleValue compute_lambda(double x) const { return signed_exp_integral(x, 1.0); }

  ScaleValue compute_kappa(double x) const {
    if (!(x > 0.0)) throw DomainError("model", "scale functions need x > 0");
    if (x == 1.0) return {};
    bool ok = true;
    double lo = std::min(x, 1.0);
    double hi = std::max(x, 1.0);
    // Both factors flip sign together below 1, so the integrand is positive.
    auto lf = [&](double y) {
      if (y == 1.0) return -std::numeric_limits<double>::infinity();
      auto inner = detail::adaptive_log([&](double z) { return -d_.Q(z); }, std::min(y, 1.0),
                                        std::max(y, 1.0), quad_.rel_tol, 6);
      ok = ok && inner.converged;
      return d_.Q(y) + inner.value;
    };
    auto r = detail::adaptive_log(lf, lo, hi, quad_.rel_tol, quad_.max_depth / 4);
    double v = std::exp(r.value);
    return {v, r.rel_err * v, r.converged && ok};
  }

  DriftField d_;
  QuadratureSpec quad_;
  std::shared_ptr<Cache> cache_;
};

inline ScaleFunctions scale_functions(const DriftField& d, const QuadratureSpec& quad = {}) {
  return ScaleFunctions(d, quad);
}

}  // namespace qsd
