#pragma once

// Symmetric tridiagonal eigenproblem for the few smallest eigenpairs:
// Sturm-count bisection for eigenvalues to full precision and a twisted
// factorization for each eigenvector. Eigenvectors are carried as
// (log|v_i|, sign) so that components spanning hundreds of decades keep
// their relative accuracy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "qsd/errors.hpp"

namespace qsd {

struct LogVector {
  std::vector<double> logabs;
  std::vector<std::int8_t> sign;

  std::size_t size() const { return logabs.size(); }
  double value(std::size_t i) const { return sign[i] == 0 ? 0.0 : sign[i] * std::exp(logabs[i]); }
};

namespace tridiag {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Number of eigenvalues of T strictly below `lambda`. `a` is the diagonal,
/// `b[i]` couples rows i and i+1.
inline int sturm_count(const std::vector<double>& a, const std::vector<double>& b, double lambda) {
  const std::size_t n = a.size();
  const double tiny = std::numeric_limits<double>::min();
  int count = 0;
  double d = a[0] - lambda;
  if (d == 0.0) d = -tiny;
  if (d < 0.0) ++count;
  for (std::size_t i = 1; i < n; ++i) {
    d = (a[i] - lambda) - b[i - 1] * (b[i - 1] / d);
    if (d == 0.0) d = -tiny;
    if (d < 0.0) ++count;
  }
  return count;
}

inline void gershgorin(const std::vector<double>& a, const std::vector<double>& b, double& lo, double& hi) {
  const std::size_t n = a.size();
  lo = std::numeric_limits<double>::infinity();
  hi = -lo;
  for (std::size_t i = 0; i < n; ++i) {
    double r = (i > 0 ? std::fabs(b[i - 1]) : 0.0) + (i + 1 < n ? std::fabs(b[i]) : 0.0);
    lo = std::min(lo, a[i] - r);
    hi = std::max(hi, a[i] + r);
  }
}

/// The `k` smallest eigenvalues in ascending order, each bisected until the
/// bracketing interval cannot be split in floating point.
inline std::vector<double> smallest_eigenvalues(const std::vector<double>& a, const std::vector<double>& b,
                                                int k) {
  if (k < 1 || static_cast<std::size_t>(k) > a.size()) {
    throw PreconditionError("spectral", "requested eigenvalue count out of range");
  }
  double glo, ghi;
  gershgorin(a, b, glo, ghi);
  std::vector<double> out(k);
  double lower = glo;
  for (int j = 0; j < k; ++j) {
    // Invariant: count(lo) <= j < count(hi).
    double lo = lower;
    double hi = ghi;
    for (int it = 0; it < 2000; ++it) {
      double mid = lo + 0.5 * (hi - lo);
      if (mid <= lo || mid >= hi) break;
      if (sturm_count(a, b, mid) <= j) lo = mid;
      else hi = mid;
    }
    out[j] = lo + 0.5 * (hi - lo);
    lower = lo;
  }
  return out;
}

/// Eigenvector of T for an (accurate) eigenvalue via the twisted
/// factorization T - lambda = N_r D_r N_r^T with the twist index r chosen
/// at the smallest |gamma_r|. Normalized to unit Euclidean length.
inline LogVector twisted_eigenvector(const std::vector<double>& a, const std::vector<double>& b, double lambda) {
  const std::size_t n = a.size();
  const double tiny = std::numeric_limits<double>::min() / std::numeric_limits<double>::epsilon();
  std::vector<double> dp(n), dm(n);
  dp[0] = a[0] - lambda;
  if (dp[0] == 0.0) dp[0] = tiny;
  for (std::size_t i = 1; i < n; ++i) {
    dp[i] = (a[i] - lambda) - b[i - 1] * (b[i - 1] / dp[i - 1]);
    if (dp[i] == 0.0) dp[i] = tiny;
  }
  dm[n - 1] = a[n - 1] - lambda;
  if (dm[n - 1] == 0.0) dm[n - 1] = tiny;
  for (std::size_t i = n - 1; i-- > 0;) {
    dm[i] = (a[i] - lambda) - b[i] * (b[i] / dm[i + 1]);
    if (dm[i] == 0.0) dm[i] = tiny;
  }
  std::size_t r = 0;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    double g = dp[i] + dm[i] - (a[i] - lambda);
    if (std::fabs(g) < best) {
      best = std::fabs(g);
      r = i;
    }
  }
  LogVector v;
  v.logabs.assign(n, 0.0);
  v.sign.assign(n, 1);
  for (std::size_t i = r; i-- > 0;) {
    // z_i = -b_i z_{i+1} / D+_i
    double f = -b[i] / dp[i];
    v.logabs[i] = v.logabs[i + 1] + std::log(std::fabs(f));
    v.sign[i] = static_cast<std::int8_t>(v.sign[i + 1] * (f < 0 ? -1 : 1));
    if (f == 0.0) v.sign[i] = 0;
  }
  for (std::size_t i = r + 1; i < n; ++i) {
    // z_i = -b_{i-1} z_{i-1} / D-_i
    double f = -b[i - 1] / dm[i];
    v.logabs[i] = v.logabs[i - 1] + std::log(std::fabs(f));
    v.sign[i] = static_cast<std::int8_t>(v.sign[i - 1] * (f < 0 ? -1 : 1));
    if (f == 0.0) v.sign[i] = 0;
  }
  return v;
}

inline double log_norm2(const LogVector& v) {
  double m = kNegInf;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v.sign[i] != 0) m = std::max(m, v.logabs[i]);
  }
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v.sign[i] != 0) s += std::exp(2.0 * (v.logabs[i] - m));
  }
  return 2.0 * m + std::log(s);
}

inline void normalize(LogVector& v) {
  double half = 0.5 * log_norm2(v);
  for (double& l : v.logabs) l -= half;
}

/// Euclidean inner product, accumulated with a max-shift.
inline double dot(const LogVector& u, const LogVector& v) {
  double m = kNegInf;
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (u.sign[i] != 0 && v.sign[i] != 0) m = std::max(m, u.logabs[i] + v.logabs[i]);
  }
  if (m == kNegInf) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (u.sign[i] != 0 && v.sign[i] != 0) s += u.sign[i] * v.sign[i] * std::exp(u.logabs[i] + v.logabs[i] - m);
  }
  return s * std::exp(m);
}

/// v <- v - c u, componentwise in log form.
inline void axpy_neg(LogVector& v, double c, const LogVector& u) {
  if (c == 0.0) return;
  const double lc = std::log(std::fabs(c));
  const int sc = c < 0 ? -1 : 1;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (u.sign[i] == 0) continue;
    double lu = lc + u.logabs[i];
    int su = -sc * u.sign[i];
    if (v.sign[i] == 0) {
      v.logabs[i] = lu;
      v.sign[i] = static_cast<std::int8_t>(su);
      continue;
    }
    double m = std::max(v.logabs[i], lu);
    double val = v.sign[i] * std::exp(v.logabs[i] - m) + su * std::exp(lu - m);
    if (val == 0.0) {
      v.sign[i] = 0;
      v.logabs[i] = kNegInf;
    } else {
      v.logabs[i] = m + std::log(std::fabs(val));
      v.sign[i] = static_cast<std::int8_t>(val < 0 ? -1 : 1);
    }
  }
}

/// Two passes of modified Gram-Schmidt in index order.
inline void orthonormalize(std::vector<LogVector>& vs) {
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t k = 0; k < vs.size(); ++k) {
      for (std::size_t j = 0; j < k; ++j) axpy_neg(vs[k], dot(vs[j], vs[k]), vs[j]);
      normalize(vs[k]);
    }
  }
}

}  // namespace tridiag
}  // namespace qsd
