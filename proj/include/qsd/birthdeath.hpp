#pragma once

// Birth-death prelimits Z^N of the generalized Feller diffusion: preset rate
// families, exact Gillespie simulation, the diffusion scaling check, and the
// S-series criterion for coming down from infinity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "qsd/errors.hpp"
#include "qsd/model.hpp"
#include "qsd/montecarlo.hpp"
#include "qsd/parallel.hpp"
#include "qsd/quadrature.hpp"
#include "qsd/random.hpp"
#include "qsd/stats.hpp"

namespace qsd {

using RateFn = std::function<double(std::int64_t)>;

enum class BDFamily { pure_branching, logistic_branching, allee_branching };

inline const char* to_string(BDFamily f) {
  switch (f) {
    case BDFamily::pure_branching: return "pure_branching";
    case BDFamily::logistic_branching: return "logistic_branching";
    case BDFamily::allee_branching: return "allee_branching";
  }
  return "?";
}

inline BDFamily parse_bd_family(const std::string& s) {
  if (s == "pure_branching") return BDFamily::pure_branching;
  if (s == "logistic_branching") return BDFamily::logistic_branching;
  if (s == "allee_branching") return BDFamily::allee_branching;
  throw ConfigError("birthdeath", "unknown family '" + s + "'");
}

/// Per-individual birth rate lambda, death rate mu, competition c, demographic
/// parameter gamma; K0 < K are the Allee thresholds with r = lambda - mu.
struct BDParams {
  double gamma = 1.0;
  double lambda = 2.0;
  double mu = 1.0;
  double c = 1.0;
  double K0 = 0.5;
  double K = 4.0;

  double r() const { return lambda - mu; }

  void validate(BDFamily f) const {
    if (!(gamma >= 0.0) || !(lambda >= 0.0) || !(mu >= 0.0)) {
      throw PreconditionError("birthdeath", "gamma, lambda and mu must be >= 0");
    }
    if (f == BDFamily::logistic_branching && !(c > 0.0)) throw PreconditionError("birthdeath", "c must be > 0");
    if (f == BDFamily::allee_branching && !(K0 > 0.0 && K > K0 && r() > 0.0)) {
      throw PreconditionError("birthdeath", "Allee family needs 0 < K0 < K and lambda > mu");
    }
  }
};

/// Chain on N^{-1} N with rates given per individual count n (state n / N).
struct BDModel {
  int N = 1;
  RateFn birth;
  RateFn death;
  std::string label;
  // max of b_N(x) / (x + 1) over the probe states x in [1/N, probe_max].
  double B_N = 0.0;
  double probe_max = 0.0;

  double state_scale() const { return 1.0 / N; }

  void validate() const {
    if (N < 1) throw PreconditionError("birthdeath", "N must be >= 1");
    if (!birth || !death) throw PreconditionError("birthdeath", "rates missing");
    if (birth(0) != 0.0 || death(0) != 0.0) throw ModelError("birthdeath", "rates must vanish at 0");
  }
};

inline BDModel make_bd_model(int N, RateFn birth, RateFn death, std::string label, double probe_max = 100.0) {
  BDModel m;
  m.N = N;
  m.birth = std::move(birth);
  m.death = std::move(death);
  m.label = std::move(label);
  m.validate();
  m.probe_max = probe_max;
  const std::int64_t top = std::max<std::int64_t>(1, std::llround(probe_max * N));
  for (std::int64_t n = 1; n <= top; n = std::max(n + 1, static_cast<std::int64_t>(n * 1.05))) {
    double b = m.birth(n), d = m.death(n);
    if (!(b >= 0.0) || !(d >= 0.0)) throw ModelError("birthdeath", "negative rate at n = " + std::to_string(n));
    m.B_N = std::max(m.B_N, b / (static_cast<double>(n) / N + 1.0));
  }
  return m;
}

inline BDModel preset_family(BDFamily f, const BDParams& p, int N) {
  p.validate(f);
  if (N < 1) throw PreconditionError("birthdeath", "N must be >= 1");
  const double NN = N;
  const double g = p.gamma * NN;
  switch (f) {
    case BDFamily::pure_branching:
      return make_bd_model(
          N, [g, p](std::int64_t n) { return (g + p.lambda) * n; }, [g, p](std::int64_t n) { return (g + p.mu) * n; },
          "pure_branching(N=" + std::to_string(N) + ")");
    case BDFamily::logistic_branching:
      return make_bd_model(
          N, [g, p](std::int64_t n) { return (g + p.lambda) * n; },
          [g, p, NN](std::int64_t n) {
            double k = static_cast<double>(n);
            return (g + p.mu) * k + p.c / NN * k * (k - 1.0);
          },
          "logistic_branching(N=" + std::to_string(N) + ")");
    case BDFamily::allee_branching: {
      // h(z) = r z (z/K0 - 1)(1 - z/K) split into its positive part (births)
      // and negative part (deaths).
      const double r = p.r(), a = 1.0 / p.K0 + 1.0 / p.K, b3 = 1.0 / (p.K0 * p.K);
      return make_bd_model(
          N,
          [g, r, a, NN](std::int64_t n) {
            double k = static_cast<double>(n);
            return g * k + r * a * k * k / NN;
          },
          [g, r, b3, NN](std::int64_t n) {
            double k = static_cast<double>(n);
            return g * k + r * k + r * b3 * k * k * k / (NN * NN);
          },
          "allee_branching(N=" + std::to_string(N) + ")");
    }
  }
  throw PreconditionError("birthdeath", "unknown family");
}

/// Growth function h and gamma of the limit, with the rate-limit normalization of gamma.
inline GrowthModel limit_growth(BDFamily f, const BDParams& p) {
  switch (f) {
    case BDFamily::pure_branching: return linear_growth(p.r(), p.gamma);
    case BDFamily::logistic_branching: return logistic_growth(p.r(), p.c, p.gamma);
    case BDFamily::allee_branching: return allee_growth(p.r(), p.K0, p.K, p.gamma);
  }
  throw PreconditionError("birthdeath", "unknown family");
}

struct LimitDiagnostics {
  std::vector<double> x;
  std::vector<double> drift;  // (b_N - d_N) / N
  std::vector<double> h;
  std::vector<double> noise;  // (b_N + d_N) / (2 N^2)
  std::vector<double> gamma_x;
};

/// Rate limits at lattice probe states against h(x) and gamma x.
inline LimitDiagnostics limit_diagnostics(BDFamily f, const BDParams& p, int N, const std::vector<double>& probes) {
  BDModel m = preset_family(f, p, N);
  GrowthModel g = limit_growth(f, p);
  LimitDiagnostics out;
  const double NN = N;
  for (double x : probes) {
    std::int64_t n = std::llround(x * NN);
    if (n < 1) continue;
    double xs = n / NN;
    double b = m.birth(n), d = m.death(n);
    out.x.push_back(xs);
    out.drift.push_back((b - d) / NN);
    out.h.push_back(g.h(xs));
    out.noise.push_back((b + d) / (2.0 * NN * NN));
    out.gamma_x.push_back(p.gamma * xs);
  }
  return out;
}

/// Lattice count of z0; throws if z0 is not on N^{-1} N.
inline std::int64_t lattice_count(const BDModel& m, double z0) {
  if (!(z0 >= 0.0)) throw DomainError("birthdeath", "z0 must be >= 0");
  double k = z0 * m.N;
  std::int64_t n = std::llround(k);
  if (std::fabs(k - static_cast<double>(n)) > 1e-9 * std::max(1.0, k)) {
    throw DomainError("birthdeath", "z0 = " + std::to_string(z0) + " is not on the lattice N^{-1} N");
  }
  return n;
}

struct BDPath {
  int N = 1;
  std::vector<double> times;  // event times, starting with 0
  std::vector<std::int64_t> counts;
  double T0 = std::numeric_limits<double>::infinity();
  double t_max = 0.0;

  std::int64_t count_at(double t) const {
    auto it = std::upper_bound(times.begin(), times.end(), t);
    return counts[static_cast<std::size_t>(it - times.begin()) - 1];
  }
  double value_at(double t) const { return static_cast<double>(count_at(t)) / N; }

  /// Time spent in each count 0..n_states-1 over [0, t_max].
  std::vector<double> occupation(std::size_t n_states) const {
    std::vector<double> occ(n_states, 0.0);
    for (std::size_t i = 0; i < times.size(); ++i) {
      double end = i + 1 < times.size() ? times[i + 1] : t_max;
      auto k = static_cast<std::size_t>(counts[i]);
      if (k < n_states) occ[k] += end - times[i];
    }
    return occ;
  }
};

namespace detail {

constexpr double kMaxBDRate = 1e15;
constexpr long kMaxBDEvents = 200'000'000;

/// Runs the chain from n until absorption or t_end, calling on_event(t, n)
/// after each jump. Returns the final count.
template <class OnEvent>
std::int64_t run_gillespie(const BDModel& m, std::int64_t n, double t_end, PhiloxStream& rng, OnEvent&& on_event) {
  double t = 0.0;
  long events = 0;
  while (n > 0) {
    double b = m.birth(n), d = m.death(n);
    double total = b + d;
    if (!std::isfinite(total) || total > kMaxBDRate) {
      throw NumericalError("birthdeath", "total jump rate " + std::to_string(total) + " at n = " + std::to_string(n) +
                                             " exceeds the scale limit");
    }
    if (total <= 0.0) break;
    t += -std::log(rng.uniform()) / total;
    if (t > t_end) break;
    n += rng.uniform() * total < b ? 1 : -1;
    on_event(t, n);
    if (++events > kMaxBDEvents) throw NumericalError("birthdeath", "event budget exhausted");
  }
  return n;
}

}  // namespace detail

/// Exact event-driven trajectory from z0 (on the lattice) up to t_max.
inline BDPath gillespie(const BDModel& m, double z0, double t_max, std::uint64_t seed, std::uint64_t stream = 0) {
  m.validate();
  if (!(t_max > 0.0)) throw PreconditionError("birthdeath", "t_max must be > 0");
  BDPath p;
  p.N = m.N;
  p.t_max = t_max;
  std::int64_t n0 = lattice_count(m, z0);
  p.times.push_back(0.0);
  p.counts.push_back(n0);
  if (n0 == 0) {
    p.T0 = 0.0;
    return p;
  }
  PhiloxStream rng(seed, stream);
  detail::run_gillespie(m, n0, t_max, rng, [&](double t, std::int64_t n) {
    p.times.push_back(t);
    p.counts.push_back(n);
    if (n == 0) p.T0 = t;
  });
  return p;
}

/// Counts at time t of n_reps independent replicas (replica r uses substream r).
inline std::vector<std::int64_t> replicate_counts(const BDModel& m, std::int64_t n0, double t, int n_reps,
                                                  std::uint64_t seed, std::uint8_t channel = 0, int workers = 0) {
  m.validate();
  std::vector<std::int64_t> out(static_cast<std::size_t>(n_reps), 0);
  parallel_for(
      out.size(),
      [&](std::size_t lo, std::size_t hi) {
        for (std::size_t r = lo; r < hi; ++r) {
          PhiloxStream rng(seed, r, channel);
          out[r] = detail::run_gillespie(m, n0, t, rng, [](double, std::int64_t) {});
        }
      },
      workers);
  return out;
}

/// Extinction times of n_reps replicas, +inf if alive at t_max.
inline std::vector<double> replicate_extinction_times(const BDModel& m, std::int64_t n0, double t_max, int n_reps,
                                                      std::uint64_t seed, int workers = 0) {
  m.validate();
  std::vector<double> out(static_cast<std::size_t>(n_reps), std::numeric_limits<double>::infinity());
  parallel_for(
      out.size(),
      [&](std::size_t lo, std::size_t hi) {
        for (std::size_t r = lo; r < hi; ++r) {
          PhiloxStream rng(seed, r);
          double t0 = n0 == 0 ? 0.0 : std::numeric_limits<double>::infinity();
          detail::run_gillespie(m, n0, t_max, rng, [&](double t, std::int64_t n) {
            if (n == 0) t0 = t;
          });
          out[r] = t0;
        }
      },
      workers);
  return out;
}

/// Distribution at time t of the chain restricted to counts 0..n_cap
/// (births from n_cap suppressed), by RK4 on the forward equation, together
/// with the expected occupation time of each count over [0, t].
struct MasterSolution {
  std::vector<double> p;
  std::vector<double> occupation;
};

inline MasterSolution master_equation(const BDModel& m, std::int64_t n_cap, std::int64_t n0, double t) {
  if (n_cap < 1 || n0 < 0 || n0 > n_cap) throw PreconditionError("birthdeath", "need 0 <= n0 <= n_cap");
  const std::size_t S = static_cast<std::size_t>(n_cap) + 1;
  std::vector<double> b(S), d(S);
  double max_rate = 0.0;
  for (std::size_t k = 0; k < S; ++k) {
    b[k] = k + 1 < S ? m.birth(static_cast<std::int64_t>(k)) : 0.0;
    d[k] = m.death(static_cast<std::int64_t>(k));
    max_rate = std::max(max_rate, b[k] + d[k]);
  }
  // State vector = (p, occupation); d occupation/dt = p.
  auto rhs = [&](const std::vector<double>& y) {
    std::vector<double> f(2 * S, 0.0);
    for (std::size_t k = 0; k < S; ++k) {
      double out = -(b[k] + d[k]) * y[k];
      if (k > 0) out += b[k - 1] * y[k - 1];
      if (k + 1 < S) out += d[k + 1] * y[k + 1];
      f[k] = out;
      f[S + k] = y[k];
    }
    return f;
  };
  std::vector<double> y(2 * S, 0.0);
  y[static_cast<std::size_t>(n0)] = 1.0;
  long steps = std::max(1000L, static_cast<long>(std::ceil(t * max_rate * 20.0)));
  double h = t / steps;
  for (long s = 0; s < steps; ++s) {
    auto k1 = rhs(y);
    std::vector<double> tmp(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) tmp[i] = y[i] + 0.5 * h * k1[i];
    auto k2 = rhs(tmp);
    for (std::size_t i = 0; i < y.size(); ++i) tmp[i] = y[i] + 0.5 * h * k2[i];
    auto k3 = rhs(tmp);
    for (std::size_t i = 0; i < y.size(); ++i) tmp[i] = y[i] + h * k3[i];
    auto k4 = rhs(tmp);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += h / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
  }
  return {std::vector<double>(y.begin(), y.begin() + S), std::vector<double>(y.begin() + S, y.end())};
}

struct ScalingRow {
  int N = 0;
  double ks_distance = 0.0;
  int n_reps = 0;
  double noise_level = 0.0;  // 95% two-sample KS critical value
};

struct ScalingTable {
  std::vector<ScalingRow> rows;
  GrowthModel limit;  // gamma already doubled
  int reference_paths = 0;
  bool strictly_decreasing = false;
  bool nonincreasing_within_noise = false;
};

struct ScalingConfig {
  std::vector<int> N_list{10, 30, 100};
  double z0 = 1.0;
  double t = 1.0;
  int n_reps = 10000;
  int reference_paths = 40000;
  double dt = 1e-3;
  std::uint64_t seed = 1;
  int workers = 0;
};

/// KS distance between the law of Z^N_t (absorbed replicas count as 0) and a
/// Monte Carlo sample of the limiting diffusion. The generator of Z^N tends
/// to h f' + gamma x f'', so the limit is dZ = sqrt(2 gamma Z) dB + h(Z) dt.
inline ScalingTable scaling_limit_check(BDFamily f, const BDParams& p, const ScalingConfig& cfg) {
  p.validate(f);
  if (!(p.gamma > 0.0)) throw PreconditionError("birthdeath", "gamma = 0 has a deterministic limit; use deterministic_limit_check");
  if (cfg.N_list.empty()) throw PreconditionError("birthdeath", "empty N list");
  for (std::size_t i = 1; i < cfg.N_list.size(); ++i) {
    if (cfg.N_list[i] <= cfg.N_list[i - 1]) throw PreconditionError("birthdeath", "N list must increase");
  }
  if (cfg.N_list.size() > 200) throw PreconditionError("birthdeath", "at most 200 scales");
  if (cfg.n_reps < 10 || cfg.reference_paths < 10) throw PreconditionError("birthdeath", "too few replicas");
  ScalingTable tab;
  tab.limit = limit_growth(f, p);
  tab.limit.gamma = 2.0 * p.gamma;
  tab.limit.label += "|bd-limit";
  tab.reference_paths = cfg.reference_paths;

  SimConfig sim;
  sim.dt = cfg.dt;
  sim.t_max = cfg.t;
  sim.record_dt = cfg.t;
  sim.n_paths = cfg.reference_paths;
  sim.seed = cfg.seed + 0x9e3779b97f4a7c15ULL;
  sim.workers = cfg.workers;
  PathBatch ref = simulate_z(tab.limit, cfg.z0, sim);
  std::vector<double> ref_values(ref.n_paths());
  std::size_t last = ref.times.size() - 1;
  for (std::size_t i = 0; i < ref.n_paths(); ++i) ref_values[i] = ref.T0[i] <= cfg.t ? 0.0 : ref.state(i, last);

  for (std::size_t j = 0; j < cfg.N_list.size(); ++j) {
    int N = cfg.N_list[j];
    BDModel m = preset_family(f, p, N);
    std::int64_t n0 = std::llround(cfg.z0 * N);
    auto counts = replicate_counts(m, n0, cfg.t, cfg.n_reps, cfg.seed, static_cast<std::uint8_t>(2 + j), cfg.workers);
    std::vector<double> z(counts.size());
    for (std::size_t r = 0; r < counts.size(); ++r) z[r] = static_cast<double>(counts[r]) / N;
    ScalingRow row;
    row.N = N;
    row.n_reps = cfg.n_reps;
    row.ks_distance = ks_two_sample(z, ref_values);
    row.noise_level = 1.358 * std::sqrt(1.0 / cfg.n_reps + 1.0 / cfg.reference_paths);
    tab.rows.push_back(row);
  }
  tab.strictly_decreasing = true;
  tab.nonincreasing_within_noise = true;
  for (std::size_t j = 1; j < tab.rows.size(); ++j) {
    if (!(tab.rows[j].ks_distance < tab.rows[j - 1].ks_distance)) tab.strictly_decreasing = false;
    if (tab.rows[j].ks_distance > tab.rows[j - 1].ks_distance + tab.rows[j].noise_level) {
      tab.nonincreasing_within_noise = false;
    }
  }
  return tab;
}

struct DeterministicLimit {
  std::vector<double> times;
  std::vector<double> mean;
  std::vector<double> stderrs;
  std::vector<double> ode;
  double max_rel_error = 0.0;
};

/// gamma = 0: mean of Z^N against the solution of z' = h(z) (RK4).
inline DeterministicLimit deterministic_limit_check(BDFamily f, const BDParams& p, int N, double z0,
                                                    const std::vector<double>& times, int n_reps,
                                                    std::uint64_t seed, int workers = 0) {
  if (p.gamma != 0.0) throw PreconditionError("birthdeath", "deterministic limit needs gamma = 0");
  if (times.empty()) throw PreconditionError("birthdeath", "no output times");
  BDModel m = preset_family(f, p, N);
  BDParams for_h = p;
  for_h.gamma = 1.0;  // only h is used
  GrowthModel g = limit_growth(f, for_h);
  const std::int64_t n0 = lattice_count(m, z0);
  if (!std::is_sorted(times.begin(), times.end())) throw PreconditionError("birthdeath", "output times must increase");
  const double t_end = times.back();
  const std::size_t T = times.size();
  std::vector<double> values(static_cast<std::size_t>(n_reps) * T);
  parallel_for(
      static_cast<std::size_t>(n_reps),
      [&](std::size_t lo, std::size_t hi) {
        for (std::size_t r = lo; r < hi; ++r) {
          PhiloxStream rng(seed, r);
          double* row = &values[r * T];
          std::size_t j = 0;
          std::int64_t prev = n0;
          std::int64_t last = detail::run_gillespie(m, n0, t_end, rng, [&](double t, std::int64_t n) {
            for (; j < T && times[j] < t; ++j) row[j] = static_cast<double>(prev) / N;
            prev = n;
          });
          for (; j < T; ++j) row[j] = static_cast<double>(last) / N;
        }
      },
      workers);
  DeterministicLimit out;
  out.times = times;
  double z = z0, t = 0.0;
  for (double target : times) {
    const int steps = std::max(1, static_cast<int>(std::ceil((target - t) / 1e-3)));
    const double h = (target - t) / steps;
    for (int s = 0; s < steps; ++s) {
      double k1 = g.h(z), k2 = g.h(z + 0.5 * h * k1), k3 = g.h(z + 0.5 * h * k2), k4 = g.h(z + h * k3);
      z += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    t = target;
    const std::size_t col = out.mean.size();
    double s1 = 0.0, s2 = 0.0;
    for (int r = 0; r < n_reps; ++r) {
      double v = values[static_cast<std::size_t>(r) * T + col];
      s1 += v;
      s2 += v * v;
    }
    double mean = s1 / n_reps;
    double var = std::max(0.0, s2 / n_reps - mean * mean);
    out.mean.push_back(mean);
    out.stderrs.push_back(std::sqrt(var / n_reps));
    out.ode.push_back(z);
    if (z > 0.0) out.max_rel_error = std::max(out.max_rel_error, std::fabs(mean - z) / z);
  }
  return out;
}

/// Unscaled chain with rates lambda_n, mu_n for n >= 1 (lambda_0 = mu_0 = 0).
struct BDChainSpec {
  RateFn lambda;
  RateFn mu;
  std::string label;
};

inline BDChainSpec linear_chain(double lambda, double mu) {
  return {[lambda](std::int64_t n) { return lambda * n; }, [mu](std::int64_t n) { return mu * n; },
          "linear(lambda=" + std::to_string(lambda) + ",mu=" + std::to_string(mu) + ")"};
}

inline BDChainSpec logistic_chain(double lambda, double mu, double c) {
  return {[lambda](std::int64_t n) { return lambda * n; },
          [mu, c](std::int64_t n) {
            double k = static_cast<double>(n);
            return mu * k + c * k * (k - 1.0);
          },
          "logistic(lambda=" + std::to_string(lambda) + ",mu=" + std::to_string(mu) + ",c=" + std::to_string(c) + ")"};
}

/// The chain as a BDModel with N = 1, for simulation cross-checks.
inline BDModel bd_model_from_chain(const BDChainSpec& c) {
  RateFn l = c.lambda, m = c.mu;
  return make_bd_model(
      1, [l](std::int64_t n) { return n == 0 ? 0.0 : l(n); }, [m](std::int64_t n) { return n == 0 ? 0.0 : m(n); },
      c.label, 100.0);
}

struct SeriesVerdict {
  IntegralStatus status = IntegralStatus::inconclusive;
  GrowthLabel growth = GrowthLabel::unclassified;
};

struct SCriterionResult {
  std::int64_t n_max = 0;
  // Index k holds n = k + 1.
  std::vector<double> log_pi;
  std::vector<double> log_S_partial;
  std::vector<double> log_A_partial;
  std::vector<double> log_E1T0_partial;
  std::vector<double> log_EnT0;  // log E_n(T_0)
  SeriesVerdict S, A, E1T0, EnT0;
  bool h1 = false;            // A = infinity (sure absorption)
  bool comes_down = false;    // A = inf, E_1 T_0 < inf, S < inf
  bool unique_qsd = false;
  bool limit_finite = false;  // sup_n E_n T_0 < inf
  bool S_finite = false;
  bool limit_and_S_agree = false;
  std::string note;

  double pi(std::int64_t n) const { return std::exp(log_pi[static_cast<std::size_t>(n - 1)]); }
  double expected_extinction_time(std::int64_t n) const {
    return std::exp(log_EnT0[static_cast<std::size_t>(n - 1)]);
  }
};

namespace detail {

/// Classify the increments of a series over half-decade blocks of n.
inline SeriesVerdict classify_series(const std::vector<double>& log_terms) {
  const std::size_t n = log_terms.size();
  std::vector<std::size_t> edges;
  for (int k = 0;; ++k) {
    auto e = static_cast<std::size_t>(std::ceil(std::pow(10.0, 0.5 * k) - 1e-9));
    if (e > n + 1) break;
    if (edges.empty() || e > edges.back()) edges.push_back(e);
  }
  std::vector<double> log_inc, widths;
  for (std::size_t j = 0; j + 1 < edges.size(); ++j) {
    double acc = kNegInf;
    for (std::size_t i = edges[j]; i < edges[j + 1]; ++i) acc = log_add(acc, log_terms[i - 1]);
    log_inc.push_back(acc);
    widths.push_back(static_cast<double>(edges[j + 1] - edges[j]));
  }
  // Skip the short leading block; slopes are per decade of block width.
  std::vector<double> li, dec;
  for (std::size_t j = 1; j < log_inc.size(); ++j) {
    li.push_back(log_inc[j]);
    if (j + 1 < log_inc.size()) dec.push_back(std::log10(widths[j + 1] / widths[j]));
  }
  TrailClass c = classify_increments(li, dec);
  return {c.status, c.growth};
}

}  // namespace detail

/// Partial sums of S, A, E_1(T_0) and E_n(T_0) up to n_max, in log space,
/// with growth verdicts. pi is extended to 2 n_max and its tail beyond that
/// is closed geometrically with the last ratio (infinite if the ratio is >= 1).
inline SCriterionResult s_criterion(const BDChainSpec& c, std::int64_t n_max = 10000) {
  using detail::kNegInf;
  using detail::kPosInf;
  using detail::log_add;
  if (n_max < 100) throw PreconditionError("birthdeath", "n_max must be >= 100");
  if (!c.lambda || !c.mu) throw PreconditionError("birthdeath", "rates missing");
  const std::int64_t n_ext = 2 * n_max;
  const std::size_t E = static_cast<std::size_t>(n_ext);
  std::vector<double> log_lambda(E + 1), log_pi(E);
  for (std::size_t k = 0; k <= E; ++k) {
    double l = c.lambda(static_cast<std::int64_t>(k + 1));
    if (!(l >= 0.0)) throw ModelError("birthdeath", "lambda_n must be >= 0");
    log_lambda[k] = std::log(l);
  }
  double mu1 = c.mu(1);
  if (!(mu1 > 0.0)) throw ModelError("birthdeath", "mu_1 must be > 0");
  log_pi[0] = -std::log(mu1);
  for (std::size_t k = 1; k < E; ++k) {
    double m = c.mu(static_cast<std::int64_t>(k + 1));
    if (!(m > 0.0)) throw ModelError("birthdeath", "mu_n must be > 0 for n >= 1");
    log_pi[k] = log_pi[k - 1] + log_lambda[k - 1] - std::log(m);
  }
  // Tail beyond n_ext.
  double log_beyond = kNegInf;
  if (log_pi[E - 1] != kNegInf) {
    double log_rho = log_pi[E - 1] - log_pi[E - 2];
    log_beyond = log_rho < 0.0 ? log_pi[E - 1] + log_rho - std::log1p(-std::exp(log_rho)) : kPosInf;
  }
  // log_tail[k] = log sum_{i >= k+1} pi_i.
  std::vector<double> log_tail(E + 1);
  log_tail[E] = log_beyond;
  for (std::size_t k = E; k-- > 0;) log_tail[k] = log_add(log_tail[k + 1], log_pi[k]);
  const double log_E1 = log_tail[0];

  SCriterionResult res;
  res.n_max = n_max;
  const std::size_t M = static_cast<std::size_t>(n_max);
  res.log_pi.assign(log_pi.begin(), log_pi.begin() + M);
  std::vector<double> s_terms(M), a_terms(M);
  for (std::size_t k = 0; k < M; ++k) {
    // (lambda_n pi_n)^{-1} sum_{i >= n+1} pi_i with n = k + 1.
    s_terms[k] = log_tail[k + 1] == kNegInf ? kNegInf : log_tail[k + 1] - log_lambda[k] - log_pi[k];
    a_terms[k] = -log_lambda[k] - log_pi[k];
  }
  auto add = [](double a, double b) { return a == kPosInf || b == kPosInf ? kPosInf : log_add(a, b); };
  double s_acc = kNegInf, a_acc = kNegInf, e_acc = kNegInf;
  res.log_EnT0.resize(M);
  for (std::size_t k = 0; k < M; ++k) {
    res.log_EnT0[k] = add(log_E1, s_acc);  // E_{k+1}(T_0) uses terms r <= k
    s_acc = add(s_acc, s_terms[k]);
    a_acc = add(a_acc, a_terms[k]);
    e_acc = add(e_acc, log_pi[k]);
    res.log_S_partial.push_back(add(log_E1, s_acc));
    res.log_A_partial.push_back(a_acc);
    res.log_E1T0_partial.push_back(e_acc);
  }
  res.S = detail::classify_series(s_terms);
  if (log_E1 == kPosInf) res.S = {IntegralStatus::diverges, GrowthLabel::unclassified};
  res.A = detail::classify_series(a_terms);
  std::vector<double> pis(log_pi.begin(), log_pi.begin() + M);
  res.E1T0 = detail::classify_series(pis);
  if (log_E1 == kPosInf) res.E1T0 = {IntegralStatus::diverges, GrowthLabel::unclassified};
  // E_n(T_0) increments: E_{n+1} - E_n = s_n.
  res.EnT0 = res.S;
  if (log_E1 != kPosInf) {
    std::vector<double> inc(s_terms.begin(), s_terms.end());
    res.EnT0 = detail::classify_series(inc);
  }

  res.h1 = res.A.status == IntegralStatus::diverges;
  res.S_finite = res.S.status == IntegralStatus::converges;
  res.limit_finite = res.EnT0.status == IntegralStatus::converges;
  res.unique_qsd = res.S_finite;
  res.comes_down = res.h1 && res.E1T0.status == IntegralStatus::converges && res.S_finite;
  bool decided = res.S.status != IntegralStatus::inconclusive && res.EnT0.status != IntegralStatus::inconclusive;
  res.limit_and_S_agree = decided && (res.limit_finite == res.S_finite);
  if (!res.h1) res.note = "A does not diverge: absorption is not certain, the equivalences do not apply";
  return res;
}

}  // namespace qsd
