#pragma once

// Monte Carlo for the killed diffusions: Euler-Maruyama with absorption at a
// small threshold delta (optionally with the Brownian-bridge crossing test),
// survivor-conditioned histograms, empirical lambda_1, the Q-process via the
// Doob transform, and the diffusion conditioned on extinction.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "qsd/errors.hpp"
#include "qsd/interpolation.hpp"
#include "qsd/model.hpp"
#include "qsd/parallel.hpp"
#include "qsd/quadrature.hpp"
#include "qsd/random.hpp"
#include "qsd/spectral.hpp"
#include "qsd/stats.hpp"

namespace qsd {

struct SimConfig {
  double dt = 1e-3;
  double t_max = 1.0;
  int n_paths = 1000;
  std::uint64_t seed = 1;
  double delta = 1e-4;
  bool bridge_correction = true;
  // Spacing of the stored state grid; 0 means t_max / 100.
  double record_dt = 0.0;
  // Each Brownian increment is built from 2^noise_refinement normals, so a
  // run at dt with refinement L sees the same Brownian path as a run at
  // dt / 2^L with refinement 0.
  int noise_refinement = 0;
  int workers = 0;

  void validate() const {
    if (!(dt > 0.0) || !(t_max > dt)) throw PreconditionError("montecarlo", "need 0 < dt < t_max");
    if (n_paths < 1) throw PreconditionError("montecarlo", "need at least one path");
    if (!(delta >= 0.0)) throw PreconditionError("montecarlo", "absorption threshold must be >= 0");
    if (record_dt < 0.0) throw PreconditionError("montecarlo", "record_dt must be >= 0");
    if (noise_refinement < 0 || noise_refinement > 10) throw PreconditionError("montecarlo", "noise_refinement in [0, 10]");
  }

  long steps() const { return std::lround(t_max / dt); }

  long record_stride() const {
    double r = record_dt > 0.0 ? record_dt : t_max / 100.0;
    return std::max(1L, std::lround(r / dt));
  }
};

struct PathBatch {
  std::string scheme;
  std::vector<double> times;
  // n_paths x times.size(), row per path; 0 after absorption.
  std::vector<double> states;
  std::vector<double> T0;
  std::vector<std::uint64_t> rng_streams;
  long rejected_steps = 0;
  long reflections = 0;
  double scale_gamma = 0.0;  // > 0 when states are on the Z scale

  std::size_t n_paths() const { return T0.size(); }
  double state(std::size_t path, std::size_t rec) const { return states[path * times.size() + rec]; }
  bool censored(std::size_t path) const { return std::isinf(T0[path]); }

  std::size_t record_index(double t) const {
    for (std::size_t r = 0; r < times.size(); ++r) {
      if (std::fabs(times[r] - t) <= 1e-9 * std::max(1.0, t)) return r;
    }
    throw PreconditionError("montecarlo", "t = " + std::to_string(t) + " is not on the record grid");
  }

  /// Fraction of paths with T0 > t.
  double survival(double t) const {
    std::size_t alive = 0;
    for (double v : T0) alive += v > t;
    return static_cast<double>(alive) / static_cast<double>(T0.size());
  }

  /// States at record time t of the paths still alive.
  std::vector<double> survivors(double t) const {
    std::size_t r = record_index(t);
    std::vector<double> out;
    for (std::size_t p = 0; p < n_paths(); ++p) {
      if (T0[p] > t) out.push_back(state(p, r));
    }
    return out;
  }
};

struct EmpiricalLaw {
  std::vector<double> edges;
  std::vector<double> masses;
  std::vector<double> stderrs;
  std::size_t n_survivors = 0;
  bool empty = true;
};

namespace detail {

using InitialDraw = std::function<double(PhiloxStream&)>;

/// Per-path randomness: Brownian increments on channel 0, bridge tests and
/// initial draws on channel 1.
struct PathRng {
  PhiloxStream noise;
  PhiloxStream aux;
  int refine;

  PathRng(std::uint64_t seed, std::uint64_t path, int refine_level)
      : noise(seed, path, 0), aux(seed, path, 1), refine(refine_level) {}

  double increment_normal() {
    if (refine == 0) return noise.normal();
    int m = 1 << refine;
    double s = 0.0;
    for (int i = 0; i < m; ++i) s += noise.normal();
    return s / std::sqrt(static_cast<double>(m));
  }
};

struct StepOutcome {
  double x;
  bool absorbed;
  double frac;  // fraction of the step at which absorption happened
};

/// One Euler-Maruyama step of size h from x, halving on non-finite
/// evaluations. Absorption below delta, or by the bridge test.
inline StepOutcome em_step(const Evaluator& drift, double x, double h, double delta, bool bridge, PathRng& rng,
                           long& rejected, int depth = 0) {
  double b = drift(x);
  double xn = x + b * h + std::sqrt(h) * (depth == 0 ? rng.increment_normal() : rng.noise.normal());
  if (!std::isfinite(b) || !std::isfinite(xn)) {
    ++rejected;
    if (depth >= 10) return {0.0, true, 0.0};
    auto first = em_step(drift, x, 0.5 * h, delta, bridge, rng, rejected, depth + 1);
    if (first.absorbed) return {0.0, true, 0.5 * first.frac};
    auto second = em_step(drift, first.x, 0.5 * h, delta, bridge, rng, rejected, depth + 1);
    if (second.absorbed) return {0.0, true, 0.5 + 0.5 * second.frac};
    return second;
  }
  if (xn <= delta) return {0.0, true, (x - delta) / (x - xn)};
  if (bridge) {
    double e = 2.0 * (x - delta) * (xn - delta) / h;
    if (e < 40.0 && rng.aux.uniform() < std::exp(-e)) {
      return {0.0, true, (x - delta) / ((x - delta) + (xn - delta))};
    }
  }
  return {xn, false, 0.0};
}

/// Paths of dX = drift(X) dt + dB killed below delta.
inline PathBatch simulate_killed(const Evaluator& drift, const InitialDraw& init, const SimConfig& cfg,
                                 std::string scheme) {
  cfg.validate();
  const long steps = cfg.steps();
  const long stride = cfg.record_stride();
  PathBatch b;
  b.scheme = std::move(scheme);
  for (long k = 0; k <= steps; k += stride) b.times.push_back(k * cfg.dt);
  const std::size_t nrec = b.times.size();
  const std::size_t np = static_cast<std::size_t>(cfg.n_paths);
  b.states.assign(np * nrec, 0.0);
  b.T0.assign(np, std::numeric_limits<double>::infinity());
  b.rng_streams.resize(np);
  std::atomic<long> rejected{0};
  parallel_for(
      np,
      [&](std::size_t lo, std::size_t hi) {
        long local_rejected = 0;
        for (std::size_t p = lo; p < hi; ++p) {
          PathRng rng(cfg.seed, p, cfg.noise_refinement);
          b.rng_streams[p] = p;
          double x = init(rng.aux);
          double* row = &b.states[p * nrec];
          if (!(x > cfg.delta)) {
            b.T0[p] = 0.0;
            continue;
          }
          row[0] = x;
          for (long k = 0; k < steps; ++k) {
            auto o = em_step(drift, x, cfg.dt, cfg.delta, cfg.bridge_correction, rng, local_rejected);
            if (o.absorbed) {
              b.T0[p] = (k + std::clamp(o.frac, 0.0, 1.0)) * cfg.dt;
              break;
            }
            x = o.x;
            if ((k + 1) % stride == 0) row[(k + 1) / stride] = x;
          }
        }
        rejected += local_rejected;
      },
      cfg.workers);
  b.rejected_steps = rejected.load();
  return b;
}

}  // namespace detail

/// X paths for dX = dB - q(X) dt from x0.
inline PathBatch simulate_x(const DriftField& d, double x0, const SimConfig& cfg) {
  if (!(x0 > cfg.delta)) throw PreconditionError("montecarlo", "x0 must exceed the absorption threshold");
  Evaluator q = d.q;
  return detail::simulate_killed([q](double x) { return -q(x); }, [x0](PhiloxStream&) { return x0; }, cfg,
                                 "euler-maruyama" + std::string(cfg.bridge_correction ? "+bridge" : ""));
}

/// X paths with initial points drawn by inverse cdf from the path's own stream.
inline PathBatch simulate_x(const DriftField& d, const std::function<double(double)>& inverse_cdf,
                            const SimConfig& cfg) {
  Evaluator q = d.q;
  return detail::simulate_killed([q](double x) { return -q(x); },
                                 [&inverse_cdf](PhiloxStream& r) { return inverse_cdf(r.uniform()); }, cfg,
                                 "euler-maruyama" + std::string(cfg.bridge_correction ? "+bridge" : ""));
}

/// Inverse of the piecewise-linear cdf tabulated by a Yaglom measure, for
/// drawing initial points from nu_1.
inline std::function<double(double)> yaglom_inverse_cdf(const YaglomMeasure& m) {
  auto x = std::make_shared<const std::vector<double>>(m.x);
  auto c = std::make_shared<const std::vector<double>>(m.cdf);
  return [x, c](double u) {
    const auto& cdf = *c;
    const double target = u * cdf.back();
    auto it = std::lower_bound(cdf.begin(), cdf.end(), target);
    if (it == cdf.begin()) return (*x)[1];
    if (it == cdf.end()) return (*x)[x->size() - 2];
    std::size_t j = static_cast<std::size_t>(it - cdf.begin());
    double f0 = cdf[j - 1], f1 = cdf[j];
    double w = f1 > f0 ? (target - f0) / (f1 - f0) : 0.5;
    return (*x)[j - 1] + w * ((*x)[j] - (*x)[j - 1]);
  };
}

/// Z paths of dZ = sqrt(gamma Z) dB + h(Z) dt, simulated as X = 2 sqrt(Z / gamma)
/// and mapped back. The threshold delta is on the X scale.
inline PathBatch simulate_z(const GrowthModel& g, double z0, const SimConfig& cfg) {
  if (!(z0 >= 0.0)) throw DomainError("montecarlo", "z0 must be >= 0");
  auto d = drift_from_growth(g);
  double x0 = transform_state(g, z0);
  Evaluator q = d.q;
  PathBatch b = detail::simulate_killed([q](double x) { return -q(x); }, [x0](PhiloxStream&) { return x0; }, cfg,
                                        "euler-maruyama(x-scale)" + std::string(cfg.bridge_correction ? "+bridge" : ""));
  for (double& s : b.states) s = s > 0.0 ? inverse_transform_state(g, s) : 0.0;
  b.scale_gamma = g.gamma;
  return b;
}

/// Histogram at record time t of the paths alive at t.
inline EmpiricalLaw conditional_histogram(const PathBatch& b, double t, const std::vector<double>& edges) {
  if (edges.size() < 2) throw PreconditionError("montecarlo", "need at least two bin edges");
  EmpiricalLaw law;
  law.edges = edges;
  law.masses.assign(edges.size() - 1, 0.0);
  law.stderrs.assign(edges.size() - 1, 0.0);
  auto pts = b.survivors(t);
  law.n_survivors = pts.size();
  if (pts.empty()) return law;
  law.empty = false;
  std::vector<double> counts(law.masses.size(), 0.0);
  for (double v : pts) {
    auto it = std::upper_bound(edges.begin(), edges.end(), v);
    if (it == edges.begin()) continue;
    std::size_t i = static_cast<std::size_t>(it - edges.begin()) - 1;
    if (i >= counts.size()) {
      if (v == edges.back()) i = counts.size() - 1;
      else continue;
    }
    counts[i] += 1.0;
  }
  const double n = static_cast<double>(pts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    double p = counts[i] / n;
    law.masses[i] = p;
    law.stderrs[i] = std::sqrt(p * (1.0 - p) / n);
  }
  return law;
}

struct RateEstimate {
  double rate = 0.0;
  double stderr = 0.0;
  double r2 = 0.0;
  std::string advisory;
};

/// lambda_1 as minus the least-squares slope of log survival over
/// [t0, t1]. The standard error treats the deaths in the window as Poisson
/// events at a constant hazard.
inline RateEstimate estimate_lambda1(const PathBatch& b, double t0, double t1, int points = 40) {
  if (!(t1 > t0) || t0 < 0.0) throw PreconditionError("montecarlo", "bad estimation window");
  if (b.times.empty() || t1 > b.times.back() * (1.0 + 1e-12)) {
    throw PreconditionError("montecarlo", "estimation window extends past the simulated horizon");
  }
  std::size_t alive_end = 0, alive_start = 0;
  for (double v : b.T0) {
    alive_end += v > t1;
    alive_start += v > t0;
  }
  if (alive_end < 100) throw PreconditionError("montecarlo", "fewer than 100 survivors at the end of the window");
  std::vector<double> ts, ls;
  for (int i = 0; i < points; ++i) {
    double t = t0 + (t1 - t0) * i / (points - 1);
    ts.push_back(t);
    ls.push_back(std::log(b.survival(t)));
  }
  auto fit = linear_fit(ts, ls);
  RateEstimate r;
  r.rate = -fit.slope;
  double deaths = static_cast<double>(alive_start - alive_end);
  r.stderr = deaths > 0 ? r.rate / std::sqrt(deaths) : std::numeric_limits<double>::infinity();
  r.r2 = fit.r2;
  if (fit.r2 < 0.99) r.advisory = "log-survival is not linear on the window (R^2 < 0.99); widen or shift the window";
  return r;
}

/// Drift of the Q-process, -q + (log eta_1)', from monotone cubic
/// interpolation of log eta_1 over the resolved window of the grid.
class QProcessDrift {
 public:
  explicit QProcessDrift(const SpectralDecomposition& s) : q_(s.drift->q) {
    auto [lo, hi] = s.resolved_window();
    std::vector<double> xs, ls;
    for (int i = lo; i <= hi; ++i) {
      xs.push_back(s.x[i]);
      ls.push_back(s.log_eta(0, i));
    }
    log_eta_ = Pchip(std::move(xs), std::move(ls));
    x_lo_ = log_eta_.x().front();
    x_hi_ = log_eta_.x().back();
  }

  double operator()(double x) const { return -q_(x) + log_eta_.derivative(x); }
  double log_eta_derivative(double x) const { return log_eta_.derivative(x); }
  double lower() const { return x_lo_; }
  double upper() const { return x_hi_; }

 private:
  Evaluator q_;
  Pchip log_eta_;
  double x_lo_ = 0.0, x_hi_ = 0.0;
};

/// Q-process paths; never absorbed, reflected back into the resolved window
/// if they leave it.
inline PathBatch simulate_qprocess(const SpectralDecomposition& s, double x0, const SimConfig& cfg) {
  cfg.validate();
  QProcessDrift drift(s);
  if (!(x0 > drift.lower() && x0 < drift.upper())) {
    throw PreconditionError("montecarlo", "Q-process start outside the resolved spectral window");
  }
  const long steps = cfg.steps();
  const long stride = cfg.record_stride();
  PathBatch b;
  b.scheme = "euler-maruyama(q-process)";
  for (long k = 0; k <= steps; k += stride) b.times.push_back(k * cfg.dt);
  const std::size_t nrec = b.times.size();
  const std::size_t np = static_cast<std::size_t>(cfg.n_paths);
  b.states.assign(np * nrec, 0.0);
  b.T0.assign(np, std::numeric_limits<double>::infinity());
  b.rng_streams.resize(np);
  std::atomic<long> reflections{0};
  const double lo = drift.lower(), hi = drift.upper();
  parallel_for(
      np,
      [&](std::size_t a, std::size_t e) {
        long refl = 0;
        for (std::size_t p = a; p < e; ++p) {
          detail::PathRng rng(cfg.seed, p, cfg.noise_refinement);
          b.rng_streams[p] = p;
          double* row = &b.states[p * nrec];
          double x = x0;
          row[0] = x;
          for (long k = 0; k < steps; ++k) {
            x += drift(x) * cfg.dt + std::sqrt(cfg.dt) * rng.increment_normal();
            for (int guard = 0; guard < 8 && (x < lo || x > hi || !std::isfinite(x)); ++guard) {
              ++refl;
              if (!std::isfinite(x)) x = x0;
              else if (x < lo) x = std::min(2 * lo - x, hi);
              else x = std::max(2 * hi - x, lo);
            }
            if ((k + 1) % stride == 0) row[(k + 1) / stride] = x;
          }
        }
        reflections += refl;
      },
      cfg.workers);
  b.reflections = reflections.load();
  return b;
}

struct ConditionedModel {
  GrowthModel model;
  std::vector<double> probes;
  // (h + gamma y u'/u) / (-h) at the probes.
  std::vector<double> ratios;
};

namespace detail {

/// u'(y)/u(y) = -1 / int_0^inf e^{-(J(y+v) - J(y))} dv.
inline double extinction_log_derivative(const GrowthModel& g, double y) {
  double jy = g.J(y);
  double slope = std::fabs(2.0 * g.h(y) / (g.gamma * std::max(y, 1e-300)));
  double width = slope > 0.0 ? std::min(0.25 * std::max(y, 1.0), 1.0 / slope) : 0.25 * std::max(y, 1.0);
  if (y == 0.0) width = slope > 0.0 ? 1.0 / slope : 0.25;
  double l = log_integral_to_infinity([&](double v) { return -(g.J(y + v) - jy); }, 0.0, 1e-13, 1e15, width);
  if (!std::isfinite(l)) {
    throw PreconditionError("montecarlo", "int e^{-J} diverges; the conditioned process is undefined");
  }
  return -std::exp(-l);
}

}  // namespace detail

/// P_z(extinction) = u(z) = int_z^inf e^{-J} / int_0^inf e^{-J}.
inline double extinction_probability(const GrowthModel& g, double z) {
  auto logf = [&](double v) { return -g.J(v); };
  double total = log_integral_to_infinity(logf, 0.0, 1e-12, 1e15);
  if (!std::isfinite(total)) throw PreconditionError("montecarlo", "int e^{-J} diverges");
  if (z <= 0.0) return 1.0;
  double tail = log_integral_to_infinity(logf, z, 1e-12, 1e15);
  return std::exp(tail - total);
}

/// The growth model of Y = Z conditioned on extinction,
/// h*(y) = h(y) + gamma y u'(y)/u(y).
inline ConditionedModel condition_on_extinction(const GrowthModel& g) {
  g.validate();
  // h(x)/sqrt(x) must increase without bound along the probes.
  std::vector<double> hs;
  for (int k = 0; k <= 8; ++k) {
    double x = std::pow(10.0, k);
    hs.push_back(g.h(x) / std::sqrt(x));
  }
  if (!(hs[8] > hs[7] && hs[7] > hs[6] && hs[8] > 10.0)) {
    throw PreconditionError("montecarlo", "h(x)/sqrt(x) does not grow to infinity on the probes");
  }
  detail::extinction_log_derivative(g, 0.0);

  ConditionedModel c;
  GrowthModel base = g;
  c.model.gamma = g.gamma;
  c.model.label = g.label + "|extinction";
  c.model.h = [base](double y) {
    if (y == 0.0) return 0.0;
    return base.h(y) + base.gamma * y * detail::extinction_log_derivative(base, y);
  };
  Evaluator hf = c.model.h;
  c.model.h_prime = [hf](double y) {
    if (y == 0.0) {
      double e = 1e-6;
      return (-3 * hf(0.0) + 4 * hf(e) - hf(2 * e)) / (2 * e);
    }
    return central_derivative(hf, y);
  };
  for (int k = -1; k <= 4; ++k) {
    double y = std::pow(10.0, k);
    c.probes.push_back(y);
    c.ratios.push_back(c.model.h(y) / -g.h(y));
  }
  return c;
}

}  // namespace qsd
