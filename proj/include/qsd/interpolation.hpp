#pragma once

// Monotone piecewise-cubic Hermite interpolation (Fritsch-Carlson slopes
// with the weighted harmonic mean for uneven spacing).

#include <algorithm>
#include <cmath>
#include <vector>

#include "qsd/errors.hpp"

namespace qsd {

class Pchip {
 public:
  Pchip() = default;

  Pchip(std::vector<double> x, std::vector<double> y) : x_(std::move(x)), y_(std::move(y)) {
    const std::size_t n = x_.size();
    if (n < 2 || y_.size() != n) throw PreconditionError("interpolation", "need at least two matching nodes");
    for (std::size_t i = 0; i + 1 < n; ++i) {
      if (!(x_[i + 1] > x_[i])) throw PreconditionError("interpolation", "abscissae must increase");
    }
    std::vector<double> h(n - 1), del(n - 1);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      h[i] = x_[i + 1] - x_[i];
      del[i] = (y_[i + 1] - y_[i]) / h[i];
    }
    d_.assign(n, 0.0);
    if (n == 2) {
      d_[0] = d_[1] = del[0];
      return;
    }
    for (std::size_t i = 1; i + 1 < n; ++i) {
      if (del[i - 1] * del[i] <= 0.0) continue;
      double w1 = 2 * h[i] + h[i - 1];
      double w2 = h[i] + 2 * h[i - 1];
      d_[i] = (w1 + w2) / (w1 / del[i - 1] + w2 / del[i]);
    }
    d_[0] = edge(h[0], h[1], del[0], del[1]);
    d_[n - 1] = edge(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
  }

  std::size_t locate(double at) const {
    auto it = std::upper_bound(x_.begin(), x_.end(), at);
    std::size_t j = static_cast<std::size_t>(it - x_.begin());
    return std::clamp<std::size_t>(j == 0 ? 0 : j - 1, 0, x_.size() - 2);
  }

  double operator()(double at) const {
    std::size_t i = locate(at);
    double h = x_[i + 1] - x_[i];
    double t = (at - x_[i]) / h;
    double t2 = t * t, t3 = t2 * t;
    return (2 * t3 - 3 * t2 + 1) * y_[i] + (t3 - 2 * t2 + t) * h * d_[i] + (-2 * t3 + 3 * t2) * y_[i + 1] +
           (t3 - t2) * h * d_[i + 1];
  }

  double derivative(double at) const {
    std::size_t i = locate(at);
    double h = x_[i + 1] - x_[i];
    double t = (at - x_[i]) / h;
    double t2 = t * t;
    return (6 * t2 - 6 * t) * (y_[i] - y_[i + 1]) / h + (3 * t2 - 4 * t + 1) * d_[i] + (3 * t2 - 2 * t) * d_[i + 1];
  }

  const std::vector<double>& x() const { return x_; }

 private:
  // One-sided three-point slope, kept shape preserving.
  static double edge(double h0, double h1, double m0, double m1) {
    double d = ((2 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if (d * m0 <= 0.0) return 0.0;
    if (m0 * m1 <= 0.0 && std::fabs(d) > std::fabs(3 * m0)) return 3 * m0;
    return d;
  }

  std::vector<double> x_, y_, d_;
};

}  // namespace qsd
