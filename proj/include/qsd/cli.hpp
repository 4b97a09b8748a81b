#pragma once

// Command orchestration for the qsd tool: INI run configs, the eight
// commands, CSV artifacts, and the run report with a SHA-256 manifest.

#include <openssl/evp.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "qsd/birthdeath.hpp"
#include "qsd/errors.hpp"
#include "qsd/hypotheses.hpp"
#include "qsd/model.hpp"
#include "qsd/montecarlo.hpp"
#include "qsd/spectral.hpp"
#include "qsd/stats.hpp"

namespace qsd::cli {

namespace fs = std::filesystem;

/// Process exit codes.
enum ExitCode : int {
  kOk = 0,
  kNumericalFailure = 1,  // numerical, domain, model or evaluation error
  kConfigError = 2,       // bad command line or config file
  kPreconditionFailure = 3,
  kIoError = 4,
};

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"check",    "spectrum", "yaglom",  "kernel",
                                              "simulate", "qprocess", "bd",      "compare"};
  return names;
}

inline bool is_stochastic(const std::string& cmd) {
  return cmd == "simulate" || cmd == "qprocess" || cmd == "bd" || cmd == "compare";
}

// ---------------------------------------------------------------------------
// Formatting

/// Shortest text with 17 significant digits; inf / -inf / nan spelled out.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

inline std::string format_cell(double v) { return format_double(v); }
inline std::string format_cell(int v) { return std::to_string(v); }
inline std::string format_cell(long v) { return std::to_string(v); }
inline std::string format_cell(long long v) { return std::to_string(v); }
inline std::string format_cell(unsigned long v) { return std::to_string(v); }
inline std::string format_cell(unsigned long long v) { return std::to_string(v); }
inline std::string format_cell(bool v) { return v ? "true" : "false"; }
inline std::string format_cell(const std::string& v) {
  if (v.find_first_of(",\"\n") == std::string::npos) return v;
  std::string out = "\"";
  for (char ch : v) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}
inline std::string format_cell(const char* v) { return format_cell(std::string(v)); }

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::vector<std::string>& header) : path_(path) {
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
    write_fields(header);
  }

  template <class... T>
  void row(const T&... cells) {
    std::vector<std::string> f{format_cell(cells)...};
    write_fields(f);
  }

  void row_values(const std::vector<std::string>& cells) { write_fields(cells); }

  void close() {
    out_.close();
    if (!out_) throw IoError("write failed for " + path_.string());
  }

  struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
  };

 private:
  void write_fields(const std::vector<std::string>& f) {
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (i) out_ << ',';
      out_ << f[i];
    }
    out_ << '\n';
  }

  fs::path path_;
  std::ofstream out_;
};

using IoError = CsvWriter::IoError;

inline std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw IoError("sha256 init failed");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0 && EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount())) != 1) {
      throw IoError("sha256 update failed");
    }
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(ctx.get(), md, &len) != 1) throw IoError("sha256 final failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

// ---------------------------------------------------------------------------
// Configuration

struct ModelSection {
  std::string kind = "growth";  // growth | drift
  std::string preset = "logistic";
  double r = 1.0, c = 1.0, gamma = 1.0, K = 4.0, K0 = 0.5, theta = 1.0;
  std::string expr;
  bool condition_on_extinction = false;
};

struct DomainSection {
  bool explicit_domain = false;
  TruncationDomain domain;
};

struct SpectralSection {
  int K = 40;
  int n = 4096;
  int eigenfunctions = 5;
  std::vector<double> kernel_times{1.0};
  std::vector<double> kernel_points{0.5, 1.0, 2.0};
  double rate_x = 1.0;
  double rate_lo = 0.0;
  double rate_hi = 1.0;
};

struct MonteCarloSection {
  SimConfig sim;
  double x0 = 1.0;
  int hist_bins = 40;
  double hist_max = 5.0;
  double window_lo = -1.0;  // default t_max / 2
  double window_hi = -1.0;  // default t_max
};

struct QProcessSection {
  SimConfig sim;
  double x0 = 1.0;
  int hist_bins = 40;
  double hist_max = 5.0;
};

struct BDSection {
  BDFamily family = BDFamily::logistic_branching;
  BDParams params;
  ScalingConfig scaling;
  std::string chain = "logistic";  // s-criterion chain: linear | logistic
  double chain_lambda = 1.0, chain_mu = 1.0, chain_c = 1.0;
  std::int64_t n_max = 10000;
  int path_N = 100;
  int n_sample_paths = 5;
  double path_t_max = 5.0;
};

struct RunConfig {
  fs::path source;
  ModelSection model;
  DomainSection domain;
  SpectralSection spectral;
  MonteCarloSection montecarlo;
  QProcessSection qprocess;
  BDSection bd;
  fs::path output_dir;
  std::vector<std::string> commands;
  bool has_seed = false;
  bool quick = false;
};

struct Overrides {
  std::optional<fs::path> output_dir;
  std::optional<std::uint64_t> seed;
  bool quick = false;
};

namespace detail {

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

/// Reads typed values, records every problem, and flags unknown keys.
class Reader {
 public:
  explicit Reader(const boost::property_tree::ptree& root) : root_(root) {}

  std::optional<std::string> raw(const std::string& section, const std::string& key) {
    known_[section].insert(key);
    auto sec = root_.get_child_optional(section);
    if (!sec) return std::nullopt;
    auto v = sec->get_optional<std::string>(key);
    if (!v) return std::nullopt;
    return trim(*v);
  }

  bool has(const std::string& section, const std::string& key) { return raw(section, key).has_value(); }

  double real(const std::string& section, const std::string& key, double def) {
    auto v = raw(section, key);
    if (!v) return def;
    double out = 0.0;
    auto res = std::from_chars(v->data(), v->data() + v->size(), out);
    if (res.ec != std::errc() || res.ptr != v->data() + v->size() || !std::isfinite(out)) {
      error(section, key, "expected a finite number, got '" + *v + "'");
      return def;
    }
    return out;
  }

  long long integer(const std::string& section, const std::string& key, long long def) {
    auto v = raw(section, key);
    if (!v) return def;
    long long out = 0;
    auto res = std::from_chars(v->data(), v->data() + v->size(), out);
    if (res.ec != std::errc() || res.ptr != v->data() + v->size()) {
      error(section, key, "expected an integer, got '" + *v + "'");
      return def;
    }
    return out;
  }

  std::uint64_t unsigned64(const std::string& section, const std::string& key, std::uint64_t def) {
    auto v = raw(section, key);
    if (!v) return def;
    std::uint64_t out = 0;
    auto res = std::from_chars(v->data(), v->data() + v->size(), out);
    if (res.ec != std::errc() || res.ptr != v->data() + v->size()) {
      error(section, key, "expected a non-negative 64-bit integer, got '" + *v + "'");
      return def;
    }
    return out;
  }

  bool boolean(const std::string& section, const std::string& key, bool def) {
    auto v = raw(section, key);
    if (!v) return def;
    if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
    if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
    error(section, key, "expected true or false, got '" + *v + "'");
    return def;
  }

  std::string text(const std::string& section, const std::string& key, const std::string& def) {
    auto v = raw(section, key);
    return v ? *v : def;
  }

  std::vector<double> reals(const std::string& section, const std::string& key, std::vector<double> def) {
    auto v = raw(section, key);
    if (!v) return def;
    std::vector<double> out;
    for (const auto& item : split_list(*v)) {
      double x = 0.0;
      auto res = std::from_chars(item.data(), item.data() + item.size(), x);
      if (res.ec != std::errc() || res.ptr != item.data() + item.size() || !std::isfinite(x)) {
        error(section, key, "bad list entry '" + item + "'");
        return def;
      }
      out.push_back(x);
    }
    if (out.empty()) error(section, key, "empty list");
    return out;
  }

  void error(const std::string& section, const std::string& key, const std::string& what) {
    errors_.push_back(section + "." + key + ": " + what);
  }

  void check_unknown() {
    for (const auto& [name, sec] : root_) {
      if (!known_.count(name)) {
        errors_.push_back("[" + name + "]: unknown section");
        continue;
      }
      for (const auto& [key, value] : sec) {
        if (!known_[name].count(key)) errors_.push_back(name + "." + key + ": unknown key");
      }
    }
  }

  const std::vector<std::string>& errors() const { return errors_; }

 private:
  const boost::property_tree::ptree& root_;
  std::map<std::string, std::set<std::string>> known_;
  std::vector<std::string> errors_;
};

inline SimConfig read_sim(Reader& rd, const std::string& sec, SimConfig def) {
  SimConfig s = def;
  s.dt = rd.real(sec, "dt", def.dt);
  s.t_max = rd.real(sec, "t_max", def.t_max);
  s.n_paths = static_cast<int>(rd.integer(sec, "n_paths", def.n_paths));
  s.delta = rd.real(sec, "delta", def.delta);
  s.bridge_correction = rd.boolean(sec, "bridge_correction", def.bridge_correction);
  s.record_dt = rd.real(sec, "record_dt", def.record_dt);
  if (!(s.dt > 0.0) || !(s.t_max > s.dt)) rd.error(sec, "dt", "need 0 < dt < t_max");
  if (s.n_paths < 1) rd.error(sec, "n_paths", "must be >= 1");
  if (!(s.delta > 0.0)) rd.error(sec, "delta", "absorption threshold must be > 0");
  if (s.record_dt < 0.0) rd.error(sec, "record_dt", "must be >= 0");
  return s;
}

}  // namespace detail

/// Parses and validates a run config; every violated key is listed in the
/// ConfigError message.
inline RunConfig parse_config(const boost::property_tree::ptree& root, const fs::path& source,
                              const Overrides& ov = {}) {
  detail::Reader rd(root);
  RunConfig cfg;
  cfg.source = source;
  cfg.quick = ov.quick;

  auto& m = cfg.model;
  m.kind = rd.text("model", "kind", m.kind);
  m.preset = rd.text("model", "preset", m.preset);
  m.r = rd.real("model", "r", m.r);
  m.c = rd.real("model", "c", m.c);
  m.gamma = rd.real("model", "gamma", m.gamma);
  m.K = rd.real("model", "K", m.K);
  m.K0 = rd.real("model", "K0", m.K0);
  m.theta = rd.real("model", "theta", m.theta);
  m.expr = rd.text("model", "expr", "");
  m.condition_on_extinction = rd.boolean("model", "condition_on_extinction", false);
  if (m.kind != "growth" && m.kind != "drift") rd.error("model", "kind", "must be growth or drift");
  static const std::set<std::string> growth_presets{"logistic", "linear", "allee", "custom"};
  static const std::set<std::string> drift_presets{"ou", "custom"};
  if (m.kind == "growth" && !growth_presets.count(m.preset)) {
    rd.error("model", "preset", "growth presets are logistic, linear, allee, custom");
  }
  if (m.kind == "drift" && !drift_presets.count(m.preset)) rd.error("model", "preset", "drift presets are ou, custom");
  if (m.preset == "custom" && m.expr.empty()) rd.error("model", "expr", "required for preset = custom");
  if (!(m.gamma > 0.0)) rd.error("model", "gamma", "must be > 0");
  if (m.preset == "allee" && !(m.K0 > 0.0 && m.K > m.K0)) rd.error("model", "K0", "need 0 < K0 < K");
  if (m.preset == "ou" && !(m.theta > 0.0)) rd.error("model", "theta", "must be > 0");
  if (m.condition_on_extinction && m.kind != "growth") {
    rd.error("model", "condition_on_extinction", "needs a growth model");
  }

  auto& dom = cfg.domain;
  const bool any_domain = rd.has("domain", "x_min") || rd.has("domain", "x_max") || rd.has("domain", "grid");
  dom.explicit_domain = any_domain;
  dom.domain.x_min = rd.real("domain", "x_min", 1e-3);
  dom.domain.x_max = rd.real("domain", "x_max", 10.0);
  std::string grid = rd.text("domain", "grid", "sqrt_graded");
  if (grid == "uniform") dom.domain.kind = GridKind::uniform;
  else if (grid == "sqrt_graded" || grid == "sqrt") dom.domain.kind = GridKind::sqrt_graded;
  else rd.error("domain", "grid", "must be uniform or sqrt_graded");
  if (any_domain && !(dom.domain.x_min > 0.0 && dom.domain.x_min < 1.0 && dom.domain.x_max > 1.0)) {
    rd.error("domain", "x_min", "need 0 < x_min < 1 < x_max");
  }

  auto& sp = cfg.spectral;
  sp.K = static_cast<int>(rd.integer("spectral", "K", sp.K));
  sp.n = static_cast<int>(rd.integer("spectral", "n", sp.n));
  sp.eigenfunctions = static_cast<int>(rd.integer("spectral", "eigenfunctions", sp.eigenfunctions));
  sp.kernel_times = rd.reals("spectral", "kernel_times", sp.kernel_times);
  sp.kernel_points = rd.reals("spectral", "kernel_points", sp.kernel_points);
  sp.rate_x = rd.real("spectral", "rate_x", sp.rate_x);
  sp.rate_lo = rd.real("spectral", "rate_lo", sp.rate_lo);
  sp.rate_hi = rd.real("spectral", "rate_hi", sp.rate_hi);
  if (ov.quick) sp.n = std::max(64, sp.n / 10);
  if (sp.n < 64) rd.error("spectral", "n", "must be >= 64");
  if (sp.K < 1 || sp.K > sp.n / 4) rd.error("spectral", "K", "need 1 <= K <= n/4");
  if (sp.eigenfunctions < 1) rd.error("spectral", "eigenfunctions", "must be >= 1");
  if (!(sp.rate_hi > sp.rate_lo)) rd.error("spectral", "rate_hi", "need rate_lo < rate_hi");
  dom.domain.n = sp.n;

  const bool seed_given = rd.has("montecarlo", "seed");
  std::uint64_t seed = rd.unsigned64("montecarlo", "seed", 1);
  if (ov.seed) seed = *ov.seed;
  cfg.has_seed = seed_given || ov.seed.has_value();

  auto& mc = cfg.montecarlo;
  SimConfig mc_def;
  mc_def.t_max = 6.0;
  mc_def.n_paths = 100000;
  mc.sim = detail::read_sim(rd, "montecarlo", mc_def);
  mc.sim.seed = seed;
  mc.x0 = rd.real("montecarlo", "x0", mc.x0);
  mc.hist_bins = static_cast<int>(rd.integer("montecarlo", "hist_bins", mc.hist_bins));
  mc.hist_max = rd.real("montecarlo", "hist_max", mc.hist_max);
  mc.window_lo = rd.real("montecarlo", "window_lo", mc.sim.t_max / 2);
  mc.window_hi = rd.real("montecarlo", "window_hi", mc.sim.t_max);
  if (!(mc.x0 > mc.sim.delta)) rd.error("montecarlo", "x0", "must exceed delta");
  if (mc.hist_bins < 1) rd.error("montecarlo", "hist_bins", "must be >= 1");
  if (!(mc.hist_max > 0.0)) rd.error("montecarlo", "hist_max", "must be > 0");
  if (!(mc.window_hi > mc.window_lo) || mc.window_lo < 0.0 || mc.window_hi > mc.sim.t_max) {
    rd.error("montecarlo", "window_lo", "need 0 <= window_lo < window_hi <= t_max");
  }

  auto& qp = cfg.qprocess;
  SimConfig qp_def;
  qp_def.t_max = 10.0;
  qp_def.n_paths = 20000;
  qp.sim = detail::read_sim(rd, "qprocess", qp_def);
  qp.sim.seed = seed;
  qp.x0 = rd.real("qprocess", "x0", qp.x0);
  qp.hist_bins = static_cast<int>(rd.integer("qprocess", "hist_bins", qp.hist_bins));
  qp.hist_max = rd.real("qprocess", "hist_max", qp.hist_max);
  if (qp.hist_bins < 1) rd.error("qprocess", "hist_bins", "must be >= 1");

  auto& bd = cfg.bd;
  std::string fam = rd.text("bd", "family", "logistic_branching");
  try {
    bd.family = parse_bd_family(fam);
  } catch (const ConfigError&) {
    rd.error("bd", "family", "must be pure_branching, logistic_branching or allee_branching");
  }
  bd.params.gamma = rd.real("bd", "gamma", bd.params.gamma);
  bd.params.lambda = rd.real("bd", "lambda", bd.params.lambda);
  bd.params.mu = rd.real("bd", "mu", bd.params.mu);
  bd.params.c = rd.real("bd", "c", bd.params.c);
  bd.params.K0 = rd.real("bd", "K0", bd.params.K0);
  bd.params.K = rd.real("bd", "K", bd.params.K);
  std::vector<double> ns = rd.reals("bd", "N_list", {10, 30, 100});
  bd.scaling.N_list.clear();
  for (double v : ns) {
    if (!(v >= 1.0) || v != std::floor(v)) rd.error("bd", "N_list", "entries must be positive integers");
    bd.scaling.N_list.push_back(static_cast<int>(v));
  }
  for (std::size_t i = 1; i < bd.scaling.N_list.size(); ++i) {
    if (bd.scaling.N_list[i] <= bd.scaling.N_list[i - 1]) rd.error("bd", "N_list", "must increase");
  }
  bd.scaling.z0 = rd.real("bd", "z0", 1.0);
  bd.scaling.t = rd.real("bd", "t", 1.0);
  bd.scaling.n_reps = static_cast<int>(rd.integer("bd", "n_reps", 10000));
  bd.scaling.reference_paths = static_cast<int>(rd.integer("bd", "reference_paths", 40000));
  bd.scaling.dt = rd.real("bd", "dt", 1e-3);
  bd.scaling.seed = seed;
  bd.chain = rd.text("bd", "chain", bd.chain);
  bd.chain_lambda = rd.real("bd", "chain_lambda", bd.chain_lambda);
  bd.chain_mu = rd.real("bd", "chain_mu", bd.chain_mu);
  bd.chain_c = rd.real("bd", "chain_c", bd.chain_c);
  bd.n_max = rd.integer("bd", "n_max", bd.n_max);
  bd.path_N = static_cast<int>(rd.integer("bd", "path_N", bd.path_N));
  bd.n_sample_paths = static_cast<int>(rd.integer("bd", "sample_paths", bd.n_sample_paths));
  bd.path_t_max = rd.real("bd", "path_t_max", bd.path_t_max);
  if (bd.chain != "linear" && bd.chain != "logistic") rd.error("bd", "chain", "must be linear or logistic");
  if (bd.path_N < 1) rd.error("bd", "path_N", "must be >= 1");
  if (!(bd.path_t_max > 0.0)) rd.error("bd", "path_t_max", "must be > 0");
  if (!(bd.scaling.t > 0.0)) rd.error("bd", "t", "must be > 0");
  if (!(bd.params.gamma >= 0.0)) rd.error("bd", "gamma", "must be >= 0");

  std::string out = rd.text("output", "dir", "");
  cfg.commands = detail::split_list(rd.text("run", "commands", ""));
  for (const auto& c : cfg.commands) {
    if (std::find(command_names().begin(), command_names().end(), c) == command_names().end()) {
      rd.error("run", "commands", "unknown command '" + c + "'");
    }
  }

  if (ov.quick) {
    mc.sim.n_paths = std::max(10, mc.sim.n_paths / 10);
    qp.sim.n_paths = std::max(10, qp.sim.n_paths / 10);
    bd.n_max = std::max<std::int64_t>(100, bd.n_max / 10);
    bd.scaling.n_reps = std::max(10, bd.scaling.n_reps / 10);
    bd.scaling.reference_paths = std::max(10, bd.scaling.reference_paths / 10);
  }
  if (bd.n_max < 100) rd.error("bd", "n_max", "must be >= 100");
  if (bd.scaling.n_reps < 10) rd.error("bd", "n_reps", "must be >= 10");
  if (bd.scaling.reference_paths < 10) rd.error("bd", "reference_paths", "must be >= 10");

  if (ov.output_dir) cfg.output_dir = *ov.output_dir;
  else if (!out.empty()) cfg.output_dir = out;
  else cfg.output_dir = fs::path("qsd_out") / source.stem();

  rd.check_unknown();
  if (!rd.errors().empty()) {
    std::string msg = "invalid config " + source.string() + ":";
    for (const auto& e : rd.errors()) msg += "\n  " + e;
    throw ConfigError("cli", msg);
  }
  return cfg;
}

inline RunConfig load_config(const fs::path& path, const Overrides& ov = {}) {
  if (!fs::exists(path)) throw ConfigError("cli", "config file not found: " + path.string());
  boost::property_tree::ptree root;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), root);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("cli", std::string("cannot parse ") + path.string() + ": " + e.message() + " (line " +
                                 std::to_string(e.line()) + ")");
  }
  return parse_config(root, path, ov);
}

/// Stochastic commands need an explicit seed.
inline void require_seed(const RunConfig& cfg, const std::vector<std::string>& cmds) {
  for (const auto& c : cmds) {
    if (is_stochastic(c) && !cfg.has_seed) {
      throw ConfigError("cli", "montecarlo.seed: required for command '" + c + "' (or pass --seed)");
    }
  }
}

// ---------------------------------------------------------------------------
// Report

struct ManifestEntry {
  std::string file;
  std::string sha256;
};

struct CommandResult {
  std::string name;
  std::string status = "ok";
  int exit_code = kOk;
  std::string message;
  double wall_seconds = 0.0;
  std::vector<std::pair<std::string, std::string>> scalars;
  std::vector<std::string> files;

  void scalar(const std::string& k, double v) { scalars.emplace_back(k, format_double(v)); }
  void scalar(const std::string& k, const std::string& v) { scalars.emplace_back(k, v); }
};

struct RunReport {
  std::string config;
  std::vector<CommandResult> commands;
  std::vector<ManifestEntry> manifest;

  int exit_code() const {
    for (const auto& c : commands) {
      if (c.exit_code != kOk) return c.exit_code;
    }
    return kOk;
  }

  void write(const fs::path& dir) const {
    std::ofstream rep(dir / "report.txt", std::ios::binary | std::ios::trunc);
    if (!rep) throw IoError("cannot write report.txt");
    rep << "qsd run report\n";
    rep << "config: " << config << "\n";
    for (const auto& c : commands) {
      rep << "\n[" << c.name << "]\n";
      rep << "status: " << c.status << "\n";
      if (!c.message.empty()) rep << "message: " << c.message << "\n";
      rep << "wall_seconds: " << std::fixed << std::setprecision(3) << c.wall_seconds << "\n";
      rep.unsetf(std::ios::floatfield);
      for (const auto& [k, v] : c.scalars) rep << k << ": " << v << "\n";
      for (const auto& f : c.files) rep << "file: " << f << "\n";
    }
    rep << "\n[manifest]\n";
    for (const auto& e : manifest) rep << e.sha256 << "  " << e.file << "\n";
    std::ofstream man(dir / "manifest.sha256", std::ios::binary | std::ios::trunc);
    if (!man) throw IoError("cannot write manifest.sha256");
    for (const auto& e : manifest) man << e.sha256 << "  " << e.file << "\n";
  }
};

// ---------------------------------------------------------------------------
// Commands

class Runner {
 public:
  Runner(RunConfig cfg, std::ostream& log) : cfg_(std::move(cfg)), log_(log) {}

  const RunConfig& config() const { return cfg_; }

  RunReport run(const std::vector<std::string>& cmds) {
    RunReport report;
    report.config = cfg_.source.string();
    std::error_code ec;
    fs::create_directories(cfg_.output_dir, ec);
    if (ec || !fs::is_directory(cfg_.output_dir)) {
      CommandResult r;
      r.name = "setup";
      r.status = "failed";
      r.exit_code = kIoError;
      r.message = "cannot create output directory " + cfg_.output_dir.string();
      report.commands.push_back(r);
      return report;
    }
    for (const auto& cmd : cmds) {
      CommandResult r;
      r.name = cmd;
      auto t0 = std::chrono::steady_clock::now();
      try {
        dispatch(cmd, r);
      } catch (const ConfigError& e) {
        fail(r, kConfigError, e);
      } catch (const PreconditionError& e) {
        fail(r, kPreconditionFailure, e);
      } catch (const Error& e) {
        fail(r, kNumericalFailure, e);
      } catch (const IoError& e) {
        r.status = "failed";
        r.exit_code = kIoError;
        r.message = e.what();
      } catch (const std::exception& e) {
        r.status = "failed";
        r.exit_code = kNumericalFailure;
        r.message = e.what();
      }
      r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log_ << cmd << ": " << r.status;
      if (!r.message.empty()) log_ << " (" << r.message << ")";
      log_ << "\n";
      report.commands.push_back(std::move(r));
    }
    for (const auto& c : report.commands) {
      for (const auto& f : c.files) report.manifest.push_back({f, sha256_file(cfg_.output_dir / f)});
    }
    report.write(cfg_.output_dir);
    return report;
  }

 private:
  static void fail(CommandResult& r, int code, const Error& e) {
    r.status = "failed";
    r.exit_code = code;
    r.message = e.what();
  }

  void dispatch(const std::string& cmd, CommandResult& r) {
    if (cmd == "check") return cmd_check(r);
    if (cmd == "spectrum") return cmd_spectrum(r);
    if (cmd == "yaglom") return cmd_yaglom(r);
    if (cmd == "kernel") return cmd_kernel(r);
    if (cmd == "simulate") return cmd_simulate(r);
    if (cmd == "qprocess") return cmd_qprocess(r);
    if (cmd == "bd") return cmd_bd(r);
    if (cmd == "compare") return cmd_compare(r);
    throw ConfigError("cli", "unknown command '" + cmd + "'");
  }

  fs::path out(const std::string& name) const { return cfg_.output_dir / name; }

  const std::optional<GrowthModel>& growth() {
    if (!growth_loaded_) {
      growth_loaded_ = true;
      const auto& m = cfg_.model;
      if (m.kind == "growth") {
        if (m.preset == "logistic") growth_ = logistic_growth(m.r, m.c, m.gamma);
        else if (m.preset == "linear") growth_ = linear_growth(m.r, m.gamma);
        else if (m.preset == "allee") growth_ = allee_growth(m.r, m.K0, m.K, m.gamma);
        else growth_ = custom_growth(m.expr, m.gamma);
      }
    }
    return growth_;
  }

  const DriftField& drift() {
    if (!drift_) {
      const auto& m = cfg_.model;
      if (m.kind == "growth") {
        drift_ = drift_from_growth(*growth());
      } else if (m.preset == "ou") {
        drift_ = ou_drift(m.theta);
      } else {
        drift_ = custom_drift(m.expr);
      }
    }
    return *drift_;
  }

  const SpectralDecomposition& spectrum() {
    if (!spectrum_) {
      if (cfg_.domain.explicit_domain) {
        spectrum_ = std::make_unique<SpectralDecomposition>(build_and_solve(drift(), cfg_.domain.domain, cfg_.spectral.K));
      } else {
        spectrum_ = std::make_unique<SpectralDecomposition>(solve_default(drift(), cfg_.spectral.K, cfg_.spectral.n));
      }
    }
    return *spectrum_;
  }

  const YaglomMeasure& yaglom() {
    if (!yaglom_) yaglom_ = std::make_unique<YaglomMeasure>(yaglom_measure(spectrum()));
    return *yaglom_;
  }

  std::vector<double> edges(int bins, double hi) const {
    std::vector<double> e;
    for (int i = 0; i <= bins; ++i) e.push_back(hi * i / bins);
    return e;
  }

  static std::string trail_json(const IntegralVerdict& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : v.trail) {
      nlohmann::json val = std::isfinite(p.value) ? nlohmann::json(p.value) : nlohmann::json(format_double(p.value));
      arr.push_back({p.cutoff, val});
    }
    return arr.dump();
  }

  void cmd_check(CommandResult& r) {
    const auto& g = growth();
    auto rep = check_all(drift(), g ? &*g : nullptr);
    CsvWriter w(out("hypotheses.csv"), {"hypothesis", "status", "key_integral", "value_or_growth", "cutoff_trail_json"});
    log_ << "hypothesis report: " << drift().label << "\n";
    auto line = [&](const std::string& name, const std::string& status, const IntegralVerdict* key,
                    const std::string& key_name, const std::string& note) {
      std::string value = "", trail = "[]";
      if (key) {
        value = key->status == IntegralStatus::converges ? format_double(key->value) : to_string(key->growth);
        trail = trail_json(*key);
      } else {
        value = note;
      }
      w.row(name, status, key_name, value, trail);
      r.scalar(name, status);
      log_ << "  " << name << ": " << status;
      if (!key_name.empty()) log_ << "  [" << key_name << " = " << value << "]";
      if (key && !note.empty()) log_ << "  " << note;
      log_ << "\n";
    };
    auto verdict = [&](const std::string& name, const HypothesisVerdict& v) {
      const NamedIntegral* k = v.integrals.empty() ? nullptr : &v.integrals.front();
      line(name, to_string(v.status), k ? &k->verdict : nullptr, k ? k->name : (v.probes.empty() ? "" : v.probes.front().name),
           v.note);
    };
    verdict("h1", rep.h1);
    verdict("h2", rep.h2);
    verdict("h3", rep.h3);
    verdict("h4", rep.h4);
    verdict("h5", rep.h5);
    if (rep.hh_computed) verdict("hh", rep.hh);
    line("inv_q", to_string(rep.inv_q.verdict.status), &rep.inv_q.verdict, "int_x0^inf 1/q",
         rep.inv_q.monotone_confirmed ? "monotone q confirmed" : "monotone q not confirmed");
    w.close();
    r.scalar("C", rep.C);
    log_ << "  C = " << format_double(rep.C) << "\n";
    r.files.push_back("hypotheses.csv");
    if (cfg_.model.condition_on_extinction) {
      auto c = condition_on_extinction(*g);
      CsvWriter cw(out("conditioned_drift.csv"), {"z", "h", "h_conditioned", "ratio"});
      for (std::size_t i = 0; i < c.probes.size(); ++i) {
        double z = c.probes[i];
        cw.row(z, g->h(z), c.model.h(z), c.ratios[i]);
      }
      cw.close();
      r.scalar("conditioned_ratio_last", c.ratios.back());
      r.files.push_back("conditioned_drift.csv");
    }
  }

  void cmd_spectrum(CommandResult& r) {
    const auto& s = spectrum();
    CsvWriter w(out("spectrum.csv"), {"k", "lambda", "eta_mass"});
    for (int k = 0; k < s.K(); ++k) w.row(k + 1, s.lambdas[k], s.eta_masses[k]);
    w.close();
    const int m = std::min(cfg_.spectral.eigenfunctions, s.K());
    std::vector<std::string> header{"x", "Q"};
    for (int k = 1; k <= m; ++k) header.push_back("eta_" + std::to_string(k));
    CsvWriter e(out("eigenfunctions.csv"), header);
    for (int i = 0; i < s.n(); ++i) {
      std::vector<std::string> row{format_double(s.x[i]), format_double(s.Q[i])};
      for (int k = 0; k < m; ++k) row.push_back(format_double(s.etas[k][i]));
      e.row_values(row);
    }
    e.close();
    auto fc = flux_check(s);
    r.scalar("lambda_1", s.lambdas[0]);
    if (s.K() > 1) r.scalar("gap", s.lambdas[1] - s.lambdas[0]);
    r.scalar("eta1_mass", s.eta1_mass);
    r.scalar("t_min", s.t_min);
    r.scalar("x_min", s.domain.x_min);
    r.scalar("x_max", s.domain.x_max);
    r.scalar("n", static_cast<double>(s.n()));
    r.scalar("flux_discrepancy", fc.discrepancy);
    r.scalar("flux_decreasing", fc.flux_decreasing ? "true" : "false");
    r.scalar("eta1_nondecreasing", fc.eta1_nondecreasing ? "true" : "false");
    if (s.K() >= 3) {
      auto rr = rate_report(s, cfg_.spectral.rate_x, cfg_.spectral.rate_lo, cfg_.spectral.rate_hi);
      r.scalar("rate_coefficient", rr.coefficient);
    }
    r.files.push_back("spectrum.csv");
    r.files.push_back("eigenfunctions.csv");
  }

  void cmd_yaglom(CommandResult& r) {
    const auto& y = yaglom();
    const auto& g = growth();
    std::vector<std::string> header{"x", "density", "cdf"};
    if (g) header.insert(header.end(), {"z", "density_z"});
    CsvWriter w(out("yaglom.csv"), header);
    for (std::size_t i = 0; i < y.x.size(); ++i) {
      std::vector<std::string> row{format_double(y.x[i]), format_double(y.density[i]), format_double(y.cdf[i])};
      if (g) {
        double z = inverse_transform_state(*g, y.x[i]);
        row.push_back(format_double(z));
        row.push_back(format_double(z > 0.0 ? yaglom_density_z(y, *g, z) : 0.0));
      }
      w.row_values(row);
    }
    w.close();
    r.scalar("lambda_1", y.lambda1);
    for (std::size_t i = 0; i < y.mass_trail.size(); ++i) r.scalar("eta1_mass_trail_" + std::to_string(i), y.mass_trail[i]);
    r.files.push_back("yaglom.csv");
  }

  void cmd_kernel(CommandResult& r) {
    const auto& s = spectrum();
    CsvWriter w(out("kernel.csv"), {"t", "x", "y", "r", "tail_bound", "qprocess_kernel"});
    for (double t : cfg_.spectral.kernel_times) {
      s.require_t(t);
      for (double x : cfg_.spectral.kernel_points) {
        for (double y : cfg_.spectral.kernel_points) {
          auto kv = kernel_r(s, t, x, y);
          w.row(t, x, y, kv.value, kv.tail_bound, qprocess_kernel(s, t, x, y));
        }
      }
    }
    w.close();
    CsvWriter sv(out("survival_spectral.csv"), {"t", "x0", "survival", "survival_yaglom"});
    for (double t : cfg_.spectral.kernel_times) {
      for (double x : cfg_.spectral.kernel_points) {
        sv.row(t, x, survival(s, InitialLaw::at(x), t), survival(s, InitialLaw::yaglom(), t));
      }
    }
    sv.close();
    r.scalar("t_min", s.t_min);
    r.files.push_back("kernel.csv");
    r.files.push_back("survival_spectral.csv");
  }

  PathBatch simulate_main() {
    const auto& mc = cfg_.montecarlo;
    return simulate_x(drift(), mc.x0, mc.sim);
  }

  void write_survival(const PathBatch& b, const std::string& name) {
    CsvWriter w(out(name), {"t", "n_alive", "fraction"});
    for (double t : b.times) {
      std::size_t alive = 0;
      for (double v : b.T0) alive += v > t;
      w.row(t, static_cast<unsigned long long>(alive), b.survival(t));
    }
    w.close();
  }

  void write_hist(const EmpiricalLaw& law, const std::string& name, const std::vector<double>* reference = nullptr,
                  const std::string& ref_name = "") {
    std::vector<std::string> header{"bin_lo", "bin_hi", "mass", "stderr"};
    if (reference) header.push_back(ref_name);
    CsvWriter w(out(name), header);
    for (std::size_t i = 0; i < law.masses.size(); ++i) {
      std::vector<std::string> row{format_double(law.edges[i]), format_double(law.edges[i + 1]),
                                   format_double(law.masses[i]), format_double(law.stderrs[i])};
      if (reference) row.push_back(format_double((*reference)[i]));
      w.row_values(row);
    }
    w.close();
  }

  void cmd_simulate(CommandResult& r) {
    const auto& mc = cfg_.montecarlo;
    PathBatch b = simulate_main();
    {
      CsvWriter w(out("paths_summary.csv"), {"path_id", "T0", "censored"});
      for (std::size_t p = 0; p < b.n_paths(); ++p) {
        w.row(static_cast<unsigned long long>(b.rng_streams[p]), b.T0[p], b.censored(p));
      }
      w.close();
    }
    write_survival(b, "survival.csv");
    auto law = conditional_histogram(b, b.times.back(), edges(mc.hist_bins, mc.hist_max));
    write_hist(law, "conditional_hist.csv");
    r.scalar("scheme", b.scheme);
    r.scalar("survival_t_max", b.survival(b.times.back()));
    r.scalar("n_survivors", static_cast<double>(law.n_survivors));
    r.scalar("rejected_steps", static_cast<double>(b.rejected_steps));
    try {
      auto est = estimate_lambda1(b, mc.window_lo, mc.window_hi);
      r.scalar("lambda_1_mc", est.rate);
      r.scalar("lambda_1_mc_stderr", est.stderr);
      r.scalar("lambda_1_mc_r2", est.r2);
      if (!est.advisory.empty()) r.scalar("advisory", est.advisory);
    } catch (const PreconditionError& e) {
      r.scalar("lambda_1_mc", std::string("unavailable: ") + e.what());
    }
    r.files.insert(r.files.end(), {"paths_summary.csv", "survival.csv", "conditional_hist.csv"});
  }

  void cmd_qprocess(CommandResult& r) {
    const auto& qp = cfg_.qprocess;
    const auto& s = spectrum();
    PathBatch b = simulate_qprocess(s, qp.x0, qp.sim);
    auto e = edges(qp.hist_bins, qp.hist_max);
    auto law = conditional_histogram(b, b.times.back(), e);
    // Spectral stationary law psi_1^2 integrated over the bins.
    auto dens = qprocess_stationary(s);
    std::vector<double> ref(law.masses.size(), 0.0);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      ref[i] = grid_integral(s, dens, e[i], e[i + 1]);
    }
    write_hist(law, "qprocess_hist.csv", &ref, "stationary_mass");
    {
      CsvWriter w(out("qprocess_summary.csv"), {"path_id", "x_final"});
      const std::size_t last = b.times.size() - 1;
      for (std::size_t p = 0; p < b.n_paths(); ++p) w.row(static_cast<unsigned long long>(p), b.state(p, last));
      w.close();
    }
    auto pts = b.survivors(b.times.back());
    std::vector<double> cdf_x, cdf_v;
    double acc = 0.0;
    for (int i = 0; i < s.n(); ++i) {
      if (i > 0) acc += 0.5 * (dens[i] + dens[i - 1]) * (s.x[i] - s.x[i - 1]);
      cdf_x.push_back(s.x[i]);
      cdf_v.push_back(acc);
    }
    auto cdf = [&](double x) {
      if (x <= cdf_x.front()) return 0.0;
      if (x >= cdf_x.back()) return 1.0;
      auto it = std::upper_bound(cdf_x.begin(), cdf_x.end(), x);
      std::size_t j = static_cast<std::size_t>(it - cdf_x.begin());
      double w = (x - cdf_x[j - 1]) / (cdf_x[j] - cdf_x[j - 1]);
      return (cdf_v[j - 1] + w * (cdf_v[j] - cdf_v[j - 1])) / acc;
    };
    r.scalar("ks_stationary", ks_statistic(pts, cdf));
    r.scalar("reflections", static_cast<double>(b.reflections));
    std::size_t absorbed = 0;
    for (double v : b.T0) absorbed += !std::isinf(v);
    r.scalar("absorbed", static_cast<double>(absorbed));
    r.files.insert(r.files.end(), {"qprocess_hist.csv", "qprocess_summary.csv"});
  }

  static double grid_integral(const SpectralDecomposition& s, const std::vector<double>& f, double lo, double hi) {
    double acc = 0.0;
    for (int i = 1; i < s.n(); ++i) {
      double a = std::max(lo, s.x[i - 1]), b = std::min(hi, s.x[i]);
      if (b <= a) continue;
      double h = s.x[i] - s.x[i - 1];
      double fa = f[i - 1] + (f[i] - f[i - 1]) * (a - s.x[i - 1]) / h;
      double fb = f[i - 1] + (f[i] - f[i - 1]) * (b - s.x[i - 1]) / h;
      acc += 0.5 * (fa + fb) * (b - a);
    }
    return acc;
  }

  void cmd_bd(CommandResult& r) {
    const auto& bd = cfg_.bd;
    {
      BDModel m = preset_family(bd.family, bd.params, bd.path_N);
      double z0 = std::llround(bd.scaling.z0 * bd.path_N) / static_cast<double>(bd.path_N);
      CsvWriter w(out("bd_paths.csv"), {"replica", "t", "count", "z"});
      for (int rep = 0; rep < bd.n_sample_paths; ++rep) {
        auto p = gillespie(m, z0, bd.path_t_max, bd.scaling.seed, static_cast<std::uint64_t>(rep));
        for (std::size_t i = 0; i < p.times.size(); ++i) {
          w.row(rep, p.times[i], static_cast<long long>(p.counts[i]), static_cast<double>(p.counts[i]) / p.N);
        }
      }
      w.close();
      r.scalar("B_N", m.B_N);
      r.files.push_back("bd_paths.csv");
    }
    if (bd.params.gamma > 0.0) {
      auto tab = scaling_limit_check(bd.family, bd.params, bd.scaling);
      CsvWriter w(out("scaling_ks.csv"), {"N", "ks_distance", "n_reps"});
      for (const auto& row : tab.rows) w.row(row.N, row.ks_distance, row.n_reps);
      w.close();
      r.scalar("ks_strictly_decreasing", tab.strictly_decreasing ? "true" : "false");
      r.scalar("ks_nonincreasing_within_noise", tab.nonincreasing_within_noise ? "true" : "false");
      r.scalar("ks_last", tab.rows.back().ks_distance);
      r.files.push_back("scaling_ks.csv");
    }
    BDChainSpec chain = bd.chain == "linear" ? linear_chain(bd.chain_lambda, bd.chain_mu)
                                             : logistic_chain(bd.chain_lambda, bd.chain_mu, bd.chain_c);
    auto res = s_criterion(chain, bd.n_max);
    CsvWriter w(out("s_criterion.csv"),
                {"n", "pi_n", "S_partial", "A_partial", "log_pi_n", "log_S_partial", "log_A_partial", "E_n_T0"});
    for (std::int64_t n = 1; n <= res.n_max; ++n) {
      std::size_t k = static_cast<std::size_t>(n - 1);
      w.row(static_cast<long long>(n), std::exp(res.log_pi[k]), std::exp(res.log_S_partial[k]),
            std::exp(res.log_A_partial[k]), res.log_pi[k], res.log_S_partial[k], res.log_A_partial[k],
            std::exp(res.log_EnT0[k]));
    }
    w.close();
    r.scalar("chain", chain.label);
    r.scalar("S", std::string(to_string(res.S.status)) + "/" + to_string(res.S.growth));
    r.scalar("A", to_string(res.A.status));
    r.scalar("E1_T0", to_string(res.E1T0.status));
    r.scalar("h1", res.h1 ? "true" : "false");
    r.scalar("comes_down_from_infinity", res.comes_down ? "true" : "false");
    r.scalar("unique_qsd", res.unique_qsd ? "true" : "false");
    r.scalar("limit_and_S_agree", res.limit_and_S_agree ? "true" : "false");
    if (!res.note.empty()) r.scalar("note", res.note);
    r.files.push_back("s_criterion.csv");
  }

  void cmd_compare(CommandResult& r) {
    const auto& mc = cfg_.montecarlo;
    const auto& s = spectrum();
    const auto& y = yaglom();
    PathBatch b = simulate_main();
    const double t = b.times.back();
    auto e = edges(mc.hist_bins, mc.hist_max);
    auto law = conditional_histogram(b, t, e);
    std::vector<double> ref(law.masses.size());
    for (std::size_t i = 0; i < ref.size(); ++i) ref[i] = y.cdf_at(e[i + 1]) - y.cdf_at(e[i]);
    write_hist(law, "compare.csv", &ref, "spectral_mass");
    auto pts = b.survivors(t);
    double ks = pts.empty() ? 1.0 : ks_statistic(pts, [&](double x) { return y.cdf_at(x); });
    r.scalar("ks", ks);
    r.scalar("n_survivors", static_cast<double>(pts.size()));
    r.scalar("lambda_1_spectral", s.lambdas[0]);
    try {
      auto est = estimate_lambda1(b, mc.window_lo, mc.window_hi);
      r.scalar("lambda_1_mc", est.rate);
      r.scalar("lambda_1_mc_stderr", est.stderr);
      r.scalar("lambda_1_rel_discrepancy", std::fabs(est.rate - s.lambdas[0]) / s.lambdas[0]);
    } catch (const PreconditionError& err) {
      r.scalar("lambda_1_mc", std::string("unavailable: ") + err.what());
    }
    r.files.push_back("compare.csv");
  }

  RunConfig cfg_;
  std::ostream& log_;
  bool growth_loaded_ = false;
  std::optional<GrowthModel> growth_;
  std::optional<DriftField> drift_;
  std::unique_ptr<SpectralDecomposition> spectrum_;
  std::unique_ptr<YaglomMeasure> yaglom_;
};

}  // namespace qsd::cli
