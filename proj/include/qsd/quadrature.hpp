#pragma once

// Singular-endpoint quadrature and divergence classification.
//
// Finite panels use the tanh-sinh (double exponential) rule, which tolerates
// integrable power and logarithmic endpoint singularities. Improper integrals
// are evaluated on a trail of cutoffs and the per-decade growth of the
// partial integrals is classified as bounded / logarithmic / power /
// exponential. No finite computation proves divergence; the classifier is an
// explicit, reproducible heuristic.
//
// Positive integrands may be supplied in log form (log f) so that integrands
// such as exp(Q) with superlinear Q never overflow: every panel sum is
// accumulated with a max-shift.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "qsd/errors.hpp"

namespace qsd {

struct QuadratureSpec {
  double rel_tol = 1e-9;
  double abs_tol = 1e-12;
  int max_depth = 40;
  std::vector<double> improper_cutoffs = {1e1, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8};

  void validate() const {
    if (!(rel_tol > 0.0) || !(abs_tol > 0.0)) {
      throw PreconditionError("quadrature", "tolerances must be positive");
    }
    if (max_depth < 1) throw PreconditionError("quadrature", "max_depth must be >= 1");
    for (std::size_t i = 1; i < improper_cutoffs.size(); ++i) {
      if (!(improper_cutoffs[i] > improper_cutoffs[i - 1])) {
        throw PreconditionError("quadrature", "improper cutoffs must be strictly increasing");
      }
    }
  }
};

enum class IntegralStatus { converges, diverges, inconclusive, not_applicable };
enum class GrowthLabel { bounded, logarithmic, power, exponential, unclassified };
enum class EndpointHint { none, power_singularity, log_singularity };

inline const char* to_string(IntegralStatus s) {
  switch (s) {
    case IntegralStatus::converges: return "converges";
    case IntegralStatus::diverges: return "diverges";
    case IntegralStatus::inconclusive: return "inconclusive";
    case IntegralStatus::not_applicable: return "not_applicable";
  }
  return "?";
}

inline const char* to_string(GrowthLabel g) {
  switch (g) {
    case GrowthLabel::bounded: return "bounded";
    case GrowthLabel::logarithmic: return "logarithmic";
    case GrowthLabel::power: return "power";
    case GrowthLabel::exponential: return "exponential";
    case GrowthLabel::unclassified: return "unclassified";
  }
  return "?";
}

struct TrailPoint {
  double cutoff;
  double value;      // partial integral, +inf once it overflows
  double log_value;  // log of |partial integral|
};

struct IntegralVerdict {
  IntegralStatus status = IntegralStatus::inconclusive;
  double value = std::numeric_limits<double>::quiet_NaN();
  double log_value = std::numeric_limits<double>::quiet_NaN();
  double error_estimate = std::numeric_limits<double>::quiet_NaN();
  std::vector<TrailPoint> trail;
  GrowthLabel growth = GrowthLabel::unclassified;
  std::string note;

  bool converges() const { return status == IntegralStatus::converges; }
  bool diverges() const { return status == IntegralStatus::diverges; }
};

namespace detail {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kPosInf = std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::fabs(a - b)));
}

// log(exp(a) - exp(b)) for a >= b.
inline double log_sub(double a, double b) {
  if (b == kNegInf) return a;
  if (b >= a) return kNegInf;
  return a + std::log1p(-std::exp(b - a));
}

inline double log_sum_exp(std::span<const double> xs) {
  double m = kNegInf;
  for (double x : xs) m = std::max(m, x);
  if (m == kNegInf || m == kPosInf) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

struct PanelResult {
  double value = 0.0;  // plain value, or log value for the log variant
  double rel_err = kPosInf;
  bool converged = false;
};

// Abscissa / weight generator of the tanh-sinh rule on [a, b]. For node
// parameter t >= 0 the two mirrored nodes sit at distance d from the ends.
struct TanhSinhNode {
  double left;
  double right;
  double log_weight;
  double dist;
};

inline TanhSinhNode tanh_sinh_node(double a, double b, double t) {
  const double half_pi = std::numbers::pi / 2.0;
  double u = half_pi * std::sinh(t);
  double width = b - a;
  // 1 - tanh(u) = 2 / (1 + e^{2u}); distance to each end is width / (1 + e^{2u}).
  double e2u = std::exp(-2.0 * u);
  double dist = width * e2u / (1.0 + e2u);
  // weight = width/2 * (pi/2) cosh(t) sech^2(u); sech^2 u = 4 e^{-2u} / (1+e^{-2u})^2.
  double log_w = std::log(width / 2.0) + std::log(half_pi * std::cosh(t)) + std::log(4.0) -
                 2.0 * u - 2.0 * std::log1p(e2u);
  return {a + dist, b - dist, log_w, dist};
}

// Error of the current level given the last two level differences. In the
// quadratically convergent regime the error is about the square of the
// latest difference; otherwise the difference itself is used.
inline double converged_error(double rel, double prev_rel) {
  if (rel < 0.1 * prev_rel && rel < 1e-2) return std::max(rel * rel, 1e-16);
  return rel;
}

// Plain tanh-sinh on a finite panel with level doubling.
template <class F>
PanelResult tanh_sinh(const F& f, double a, double b, double rel_tol, double abs_tol,
                      int max_level = 10) {
  PanelResult res;
  if (!(b > a)) {
    res.value = 0.0;
    res.rel_err = 0.0;
    res.converged = true;
    return res;
  }
  auto eval = [&](double x) {
    double y = f(x);
    if (std::isnan(y)) throw EvaluationError("quadrature", "integrand returned NaN", x);
    return y;
  };
  // The two ends are walked independently: near a the abscissa may resolve
  // distances far below the spacing of doubles near b.
  auto side_sum = [&](double t0, double step) {
    double s = 0.0;
    bool left_live = true;
    bool right_live = true;
    int small = 0;
    if (t0 == 0.0) {
      TanhSinhNode nd = tanh_sinh_node(a, b, 0.0);
      s += std::exp(nd.log_weight) * eval(nd.left);
    }
    double t = t0 == 0.0 ? step : t0;
    for (; t < 8.0 && (left_live || right_live); t += step) {
      TanhSinhNode nd = tanh_sinh_node(a, b, t);
      if (!(nd.dist > 0.0)) break;
      if (nd.left == a) left_live = false;
      if (nd.right == b) right_live = false;
      double w = std::exp(nd.log_weight);
      double term = 0.0;
      if (left_live) term += w * eval(nd.left);
      if (right_live) term += w * eval(nd.right);
      s += term;
      if (std::fabs(term) <= 1e-20 * std::fabs(s)) {
        if (++small >= 3) break;
      } else {
        small = 0;
      }
    }
    return s;
  };
  double h = 1.0;
  double sum = side_sum(0.0, h);
  double prev = sum * h;
  double prev_rel = kPosInf;
  for (int level = 1; level <= max_level; ++level) {
    h /= 2.0;
    sum += side_sum(h, 2.0 * h);
    double cur = sum * h;
    double diff = std::fabs(cur - prev);
    res.value = cur;
    double rel = diff / std::max(std::fabs(cur), 1e-300);
    res.rel_err = converged_error(rel, prev_rel);
    prev_rel = rel;
    if (level >= 3 && (res.rel_err <= rel_tol || diff <= abs_tol)) {
      res.converged = true;
      return res;
    }
    prev = cur;
  }
  return res;
}

// Log-space tanh-sinh for positive integrands given as log f.
template <class LogF>
PanelResult tanh_sinh_log(const LogF& logf, double a, double b, double rel_tol,
                          int max_level = 10) {
  PanelResult res;
  if (!(b > a)) {
    res.value = kNegInf;
    res.rel_err = 0.0;
    res.converged = true;
    return res;
  }
  auto eval = [&](double x) {
    double y = logf(x);
    if (std::isnan(y)) throw EvaluationError("quadrature", "log-integrand returned NaN", x);
    return y;
  };
  std::vector<double> terms;
  auto side_terms = [&](double t0, double step) {
    terms.clear();
    double running = kNegInf;
    int small = 0;
    bool left_live = true;
    bool right_live = true;
    for (double t = t0; t < 8.0 && (left_live || right_live); t += step) {
      TanhSinhNode nd = tanh_sinh_node(a, b, t);
      if (!(nd.dist > 0.0)) break;
      if (nd.left == a) left_live = false;
      if (nd.right == b) right_live = false;
      double l = left_live ? nd.log_weight + eval(nd.left) : kNegInf;
      terms.push_back(l);
      double r = kNegInf;
      if (t != 0.0 && right_live) {
        r = nd.log_weight + eval(nd.right);
        terms.push_back(r);
      }
      double term = log_add(l, r);
      running = log_add(running, term);
      if (term < running - 46.0) {
        if (++small >= 3) break;
      } else {
        small = 0;
      }
    }
    return log_sum_exp(terms);
  };
  double h = 1.0;
  double log_sum = side_terms(0.0, h);
  double prev = log_sum;  // + log(h) with h = 1
  double prev_rel = kPosInf;
  for (int level = 1; level <= max_level; ++level) {
    h /= 2.0;
    log_sum = log_add(log_sum, side_terms(h, 2.0 * h));
    double cur = log_sum + std::log(h);
    res.value = cur;
    if (cur == kNegInf && prev == kNegInf) {
      res.rel_err = 0.0;
    } else if (cur == kPosInf) {
      res.rel_err = kPosInf;
      return res;
    } else {
      double rel = std::fabs(std::expm1(prev - cur));
      res.rel_err = converged_error(rel, prev_rel);
      prev_rel = rel;
    }
    if (level >= 3 && res.rel_err <= rel_tol) {
      res.converged = true;
      return res;
    }
    prev = cur;
  }
  return res;
}

// Recursive bisection fallback around tanh-sinh.
template <class F>
PanelResult adaptive(const F& f, double a, double b, double rel_tol, double abs_tol,
                     int depth) {
  PanelResult r = tanh_sinh(f, a, b, rel_tol, abs_tol);
  if (r.converged || depth <= 0) return r;
  double m = a + (b - a) / 2.0;
  PanelResult l = adaptive(f, a, m, rel_tol, abs_tol / 2.0, depth - 1);
  PanelResult rr = adaptive(f, m, b, rel_tol, abs_tol / 2.0, depth - 1);
  PanelResult out;
  out.value = l.value + rr.value;
  out.converged = l.converged && rr.converged;
  double abs_err = l.rel_err * std::fabs(l.value) + rr.rel_err * std::fabs(rr.value);
  out.rel_err = abs_err / std::max(std::fabs(out.value), 1e-300);
  return out;
}

template <class LogF>
PanelResult adaptive_log(const LogF& logf, double a, double b, double rel_tol, int depth) {
  PanelResult r = tanh_sinh_log(logf, a, b, rel_tol);
  if (r.converged || depth <= 0 || r.value == kPosInf) return r;
  double m = a + (b - a) / 2.0;
  PanelResult l = adaptive_log(logf, a, m, rel_tol, depth - 1);
  PanelResult rr = adaptive_log(logf, m, b, rel_tol, depth - 1);
  PanelResult out;
  out.value = log_add(l.value, rr.value);
  out.converged = l.converged && rr.converged;
  out.rel_err = std::max(l.rel_err, rr.rel_err);
  return out;
}

}  // namespace detail

/// Growth classification of a trail of partial integrals taken at
/// geometric cutoffs. `log_increments[k]` is the log of the k-th increment
/// (the integral over the k-th decade-like panel); `decades[k]` is the
/// log10 width ratio between panel k and k+1. Requires at least three
/// increments; the verdict needs the last two per-decade slopes to agree.
struct TrailClass {
  IntegralStatus status = IntegralStatus::inconclusive;
  GrowthLabel growth = GrowthLabel::unclassified;
  double last_ratio = std::numeric_limits<double>::quiet_NaN();  // per-step increment ratio
};

inline TrailClass classify_increments(std::span<const double> log_increments,
                                      std::span<const double> decades) {
  using detail::kNegInf;
  using detail::kPosInf;
  TrailClass out;
  const std::size_t m = log_increments.size();
  for (double l : log_increments) {
    if (l == kPosInf) {
      out.status = IntegralStatus::diverges;
      out.growth = GrowthLabel::exponential;
      return out;
    }
  }
  if (m < 3) return out;
  enum class Kind { decay, flat, grow, odd };
  auto slope = [&](std::size_t k) {
    double a = log_increments[k];
    double b = log_increments[k + 1];
    if (b == kNegInf) return kNegInf;
    if (a == kNegInf) return std::numeric_limits<double>::quiet_NaN();
    double dec = k < decades.size() ? decades[k] : 1.0;
    return (b - a) / std::max(dec, 1e-12);
  };
  auto kind_of = [](double s) {
    if (std::isnan(s)) return Kind::odd;
    if (s < std::log(0.7)) return Kind::decay;
    if (s <= std::log(1.4)) return Kind::flat;
    return Kind::grow;
  };
  double s1 = slope(m - 3);
  double s2 = slope(m - 2);
  Kind k1 = kind_of(s1);
  Kind k2 = kind_of(s2);
  out.last_ratio = std::exp(s2 * (decades.size() >= m - 1 ? decades[m - 2] : 1.0));
  if (k1 != k2 || k1 == Kind::odd) return out;
  switch (k1) {
    case Kind::decay:
      out.status = IntegralStatus::converges;
      out.growth = GrowthLabel::bounded;
      break;
    case Kind::flat:
      out.status = IntegralStatus::diverges;
      out.growth = GrowthLabel::logarithmic;
      break;
    case Kind::grow:
      out.status = IntegralStatus::diverges;
      out.growth = (s2 - s1 > std::log(3.0)) ? GrowthLabel::exponential : GrowthLabel::power;
      break;
    case Kind::odd:
      break;
  }
  return out;
}

namespace detail {

// Shared trail driver. `panel(lo, hi)` returns a log-space PanelResult.
// For an upper trail the panels are [a, c1], [c1, c2], ...; for a lower trail
// toward `a` they are [c1, b], [c2, c1], ... with c_k = a + (b-a)/cutoff_k.
template <class Panel>
IntegralVerdict run_trail(const Panel& panel, double a, double b, bool upper,
                          const QuadratureSpec& spec) {
  IntegralVerdict v;
  std::vector<double> points;
  if (upper) {
    for (double c : spec.improper_cutoffs) {
      if (c > a) points.push_back(c);
    }
  } else {
    for (double c : spec.improper_cutoffs) points.push_back(a + (b - a) / c);
  }
  if (points.size() < 4) {
    v.note = "too few cutoffs beyond the finite endpoint to classify growth";
    return v;
  }
  std::vector<double> log_inc;
  std::vector<double> decades;
  double log_total = kNegInf;
  double err = 0.0;
  double prev = upper ? a : b;
  for (std::size_t k = 0; k < points.size(); ++k) {
    double lo = upper ? prev : points[k];
    double hi = upper ? points[k] : prev;
    PanelResult r = panel(lo, hi);
    err = std::max(err, r.rel_err);
    if (k > 0) {
      log_inc.push_back(r.value);
      double w_prev = upper ? (prev - (k >= 2 ? points[k - 2] : a)) : 0.0;
      if (upper) {
        double w_cur = hi - lo;
        decades.push_back(std::log10(w_cur / std::max(w_prev, 1e-300)));
      } else {
        decades.push_back(1.0);
      }
    }
    log_total = log_add(log_total, r.value);
    v.trail.push_back({points[k], std::exp(log_total), log_total});
    prev = points[k];
  }
  // decades[k] relates increment k to k+1; drop the leading entry so indices align.
  std::vector<double> dec_aligned(decades.begin() + (decades.empty() ? 0 : 1), decades.end());
  TrailClass cls = classify_increments(log_inc, dec_aligned);
  v.status = cls.status;
  v.growth = cls.growth;
  v.error_estimate = err;
  if (cls.status == IntegralStatus::converges) {
    double tail = kNegInf;
    double rho = cls.last_ratio;
    if (rho > 0.0 && rho < 1.0 && !log_inc.empty()) {
      tail = log_inc.back() + std::log(rho / (1.0 - rho));
    }
    v.log_value = log_add(log_total, tail);
    v.value = std::exp(v.log_value);
  } else if (cls.status == IntegralStatus::diverges) {
    v.log_value = kPosInf;
    v.value = kPosInf;
  }
  return v;
}

}  // namespace detail

/// Integral of a positive integrand supplied as log f over [a, b].
/// `b` may be +infinity; `improper_at_a` requests divergence classification
/// at the lower endpoint (e.g. a singular origin). Finite proper integrals
/// use adaptive tanh-sinh directly.
template <class LogF>
IntegralVerdict integrate_log(const LogF& logf, double a, double b, const QuadratureSpec& spec,
                              bool improper_at_a = false,
                              EndpointHint hint = EndpointHint::none) {
  spec.validate();
  if (std::isinf(b) && improper_at_a) {
    throw PreconditionError("quadrature", "split doubly improper integrals at an interior point");
  }
  // Substitution x = a + u^2 removes an x^{-1/2}-type singularity at a.
  auto panel = [&](double lo, double hi) {
    if (hint == EndpointHint::power_singularity && lo == a) {
      auto g = [&](double u) {
        double x = a + u * u;
        return x == a ? detail::kNegInf : logf(x) + std::log(2.0 * u);
      };
      return detail::adaptive_log(g, 0.0, std::sqrt(hi - a), spec.rel_tol, spec.max_depth / 4);
    }
    return detail::adaptive_log(logf, lo, hi, spec.rel_tol, spec.max_depth / 4);
  };
  if (std::isinf(b)) return detail::run_trail(panel, a, b, true, spec);
  if (improper_at_a) {
    IntegralVerdict v = detail::run_trail(panel, a, b, false, spec);
    if (v.status == IntegralStatus::converges) {
      detail::PanelResult full = panel(a, b);
      if (full.converged || full.rel_err < 1e-6) {
        v.log_value = full.value;
        v.value = std::exp(full.value);
        v.error_estimate = full.rel_err;
      }
    }
    return v;
  }
  detail::PanelResult r = panel(a, b);
  IntegralVerdict v;
  v.log_value = r.value;
  v.value = std::exp(r.value);
  v.error_estimate = r.rel_err;
  v.status = (r.converged && std::isfinite(r.value)) ? IntegralStatus::converges
                                                     : IntegralStatus::inconclusive;
  v.growth = GrowthLabel::bounded;
  v.trail.push_back({b, v.value, v.log_value});
  return v;
}

/// General (signed) integrand. Infinite upper limits are handled with the
/// cutoff trail; classification uses |increment|.
template <class F>
IntegralVerdict integrate(const F& f, double a, double b, const QuadratureSpec& spec,
                          EndpointHint hint = EndpointHint::none) {
  spec.validate();
  auto panel_plain = [&](double lo, double hi) {
    if (hint == EndpointHint::power_singularity && lo == a) {
      auto g = [&](double u) {
        double x = a + u * u;
        return x == a ? 0.0 : f(x) * 2.0 * u;
      };
      return detail::adaptive(g, 0.0, std::sqrt(hi - a), spec.rel_tol, spec.abs_tol,
                              spec.max_depth / 4);
    }
    if (hint == EndpointHint::log_singularity && lo == a) {
      // x = a + (hi - a) e^{-s}, s in [0, inf): truncated where the Jacobian vanishes.
      double w = hi - a;
      auto g = [&](double s) {
        double x = a + w * std::exp(-s);
        return f(x) * w * std::exp(-s);
      };
      return detail::adaptive(g, 0.0, 700.0, spec.rel_tol, spec.abs_tol, spec.max_depth / 4);
    }
    return detail::adaptive(f, lo, hi, spec.rel_tol, spec.abs_tol, spec.max_depth / 4);
  };
  if (!std::isinf(b)) {
    detail::PanelResult r = panel_plain(a, b);
    IntegralVerdict v;
    v.value = r.value;
    v.log_value = std::log(std::fabs(r.value));
    v.error_estimate = r.rel_err;
    v.status = (r.converged && std::isfinite(r.value)) ? IntegralStatus::converges
                                                       : IntegralStatus::inconclusive;
    v.growth = GrowthLabel::bounded;
    v.trail.push_back({b, v.value, v.log_value});
    return v;
  }
  // Upper trail with plain sums; classification on log|increment|.
  IntegralVerdict v;
  std::vector<double> points;
  for (double c : spec.improper_cutoffs) {
    if (c > a) points.push_back(c);
  }
  if (points.size() < 4) {
    v.note = "too few cutoffs beyond the finite endpoint to classify growth";
    return v;
  }
  std::vector<double> log_inc;
  std::vector<double> widths;
  double total = 0.0;
  double err = 0.0;
  double prev = a;
  for (std::size_t k = 0; k < points.size(); ++k) {
    detail::PanelResult r = panel_plain(prev, points[k]);
    err = std::max(err, r.rel_err);
    if (k > 0) {
      log_inc.push_back(std::isfinite(r.value) ? std::log(std::fabs(r.value)) : detail::kPosInf);
      widths.push_back(points[k] - prev);
    }
    total += r.value;
    v.trail.push_back({points[k], total, std::log(std::fabs(total))});
    prev = points[k];
  }
  std::vector<double> decades;
  for (std::size_t k = 1; k < widths.size(); ++k) decades.push_back(std::log10(widths[k] / widths[k - 1]));
  TrailClass cls = classify_increments(log_inc, decades);
  v.status = cls.status;
  v.growth = cls.growth;
  v.error_estimate = err;
  if (cls.status == IntegralStatus::converges) {
    double rho = cls.last_ratio;
    double last = v.trail.back().value - v.trail[v.trail.size() - 2].value;
    double tail = (rho > 0.0 && rho < 1.0) ? last * rho / (1.0 - rho) : 0.0;
    v.value = total + tail;
    v.log_value = std::log(std::fabs(v.value));
  } else if (cls.status == IntegralStatus::diverges) {
    v.value = total >= 0.0 ? detail::kPosInf : -detail::kPosInf;
    v.log_value = detail::kPosInf;
  }
  return v;
}

/// Value-only log integral over [a, inf) for nested use: doubling panels
/// until the next panel is negligible. Returns +inf when the panels stop
/// shrinking before `limit`.
template <class LogF>
double log_integral_to_infinity(const LogF& logf, double a, double rel_tol,
                                double limit = 1e12, double first_width = 0.0) {
  using detail::kNegInf;
  double total = kNegInf;
  double lo = a;
  double width = first_width > 0.0 ? first_width : std::max(std::fabs(a), 1.0) * 0.25;
  for (int i = 0; i < 400; ++i) {
    double hi = lo + width;
    detail::PanelResult r = detail::adaptive_log(logf, lo, hi, rel_tol, 6);
    total = detail::log_add(total, r.value);
    if (r.value == detail::kPosInf) return detail::kPosInf;
    if (r.value < total + std::log(rel_tol) - 4.0 && i >= 2) return total;
    lo = hi;
    width *= 2.0;
    if (lo > limit) break;
  }
  return detail::kPosInf;
}

}  // namespace qsd
