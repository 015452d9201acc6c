#pragma once

// Command-line front end. Kept in a header so the tests can run commands
// in-process; tools/fblcrd.cpp is a thin main().

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fblcrd/crd_solver.hpp"
#include "fblcrd/errors.hpp"
#include "fblcrd/fbl_bounds.hpp"
#include "fblcrd/gaussian.hpp"
#include "fblcrd/markov.hpp"
#include "fblcrd/model_io.hpp"
#include "fblcrd/parallel.hpp"
#include "fblcrd/random.hpp"
#include "fblcrd/tilted_info.hpp"

namespace fblcrd::cli {

inline constexpr const char* kToolName = "fblcrd";
inline constexpr const char* kToolVersion = "1.0.0";

enum ExitCode : int { ok = 0, usage = 2, infeasible = 3, numerical = 4 };

/// A well-formed request the model cannot serve (exit code 3).
class InfeasibleRequest : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a run depends on. Echoed verbatim into the output, so two runs
/// with equal configs produce equal bytes.
struct RunConfig {
  std::string command;
  std::string model;
  std::vector<double> distortion;
  std::vector<double> grid;  // lo, hi, count
  double eps = 0.1;
  std::vector<int> n;
  std::optional<double> rate;  // nats per symbol; default is the normal approximation
  long long trials = 1000;
  std::uint64_t seed = 1;
  double tol = 1e-10;
  double lattice_step = 1e-6;
  std::string format = "csv";
  std::string out;
  unsigned threads = 0;  // 0: machine parallelism
  std::string units = "nats";
  std::string mode = "lower_bound";
  double var_x = 1.0;
  double var_z = 1.0;
  bool timing = false;
};

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["command"] = c.command;
  if (!c.model.empty()) j["model"] = c.model;
  if (!c.distortion.empty()) j["D"] = c.distortion;
  if (!c.grid.empty()) j["grid"] = c.grid;
  if (c.command != "rd-curve") {
    j["eps"] = c.eps;
    j["n"] = c.n;
    if (c.rate) j["rate"] = *c.rate;
    j["trials"] = c.trials;
    j["seed"] = c.seed;
  }
  j["tol"] = c.tol;
  if (c.command == "fbl") j["lattice_step"] = c.lattice_step;
  if (c.command == "gaussian") {
    j["mode"] = c.mode;
    if (c.model.empty()) {
      j["var_x"] = c.var_x;
      j["var_z"] = c.var_z;
    }
  }
  j["format"] = c.format;
  if (!c.out.empty()) j["out"] = c.out;
  j["threads"] = c.threads;
  j["units"] = c.units;
  j["timing"] = c.timing;
  return j;
}

//----------------------------------------------------------------------------
// Tables
//----------------------------------------------------------------------------

/// How a column scales under --units bits.
enum class Scale { none, rate, variance, integer };

struct Column {
  std::string name;
  std::string provenance;  // closed-form | solver | monte-carlo+-stderr | ...
  Scale scale = Scale::none;
};

struct Table {
  std::vector<Column> columns;
  std::vector<std::vector<double>> rows;
  nlohmann::ordered_json summary = nlohmann::ordered_json::object();
  nlohmann::ordered_json summary_provenance = nlohmann::ordered_json::object();

  void add_summary(const std::string& key, double value, const std::string& prov, Scale s,
                   double unit) {
    summary[key] = scaled(value, s, unit);
    summary_provenance[key] = prov;
  }

  static double scaled(double v, Scale s, double unit) {
    switch (s) {
      case Scale::rate: return v / unit;
      case Scale::variance: return v / (unit * unit);
      default: return v;
    }
  }
};

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  // nlohmann prints the shortest round-trip form with '.' regardless of locale.
  return nlohmann::json(v).dump();
}

inline std::string render(const Table& t, const RunConfig& cfg, double unit,
                          std::optional<double> wall_clock) {
  std::ostringstream os;
  if (cfg.format == "json") {
    nlohmann::ordered_json doc;
    doc["tool"] = kToolName;
    doc["version"] = kToolVersion;
    doc["config"] = to_json(cfg);
    doc["units"] = cfg.units;
    if (wall_clock) doc["wall_clock_s"] = *wall_clock;
    doc["summary"] = t.summary;
    nlohmann::ordered_json prov = t.summary_provenance;
    for (const auto& c : t.columns) prov[c.name] = c.provenance;
    doc["provenance"] = prov;
    auto rows = nlohmann::ordered_json::array();
    for (const auto& r : t.rows) {
      nlohmann::ordered_json o;
      for (std::size_t i = 0; i < r.size(); ++i) {
        const double v = Table::scaled(r[i], t.columns[i].scale, unit);
        if (t.columns[i].scale == Scale::integer) {
          o[t.columns[i].name] = std::llround(v);
        } else if (std::isfinite(v)) {
          o[t.columns[i].name] = v;
        } else {
          o[t.columns[i].name] = format_number(v);
        }
      }
      rows.push_back(std::move(o));
    }
    doc["rows"] = std::move(rows);
    os << doc.dump(2) << '\n';
    return os.str();
  }
  os << "# tool: " << kToolName << ' ' << kToolVersion << '\n';
  os << "# config: " << to_json(cfg).dump() << '\n';
  os << "# units: " << cfg.units << '\n';
  if (wall_clock) os << "# wall_clock_s: " << format_number(*wall_clock) << '\n';
  for (const auto& [k, v] : t.summary.items()) {
    os << "# summary: " << k << '=' << (v.is_number() ? format_number(v.get<double>()) : v.dump())
       << " (" << t.summary_provenance[k].get<std::string>() << ")\n";
  }
  for (const auto& c : t.columns) os << "# provenance: " << c.name << '=' << c.provenance << '\n';
  for (std::size_t i = 0; i < t.columns.size(); ++i)
    os << (i ? "," : "") << t.columns[i].name;
  os << '\n';
  for (const auto& r : t.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      os << (i ? "," : "");
      if (t.columns[i].scale == Scale::integer) os << std::llround(r[i]);
      else os << format_number(Table::scaled(r[i], t.columns[i].scale, unit));
    }
    os << '\n';
  }
  return os.str();
}

//----------------------------------------------------------------------------
// Commands
//----------------------------------------------------------------------------

inline unsigned resolve_threads(const RunConfig& c) {
  return c.threads ? c.threads : default_threads();
}

inline SolverOptions solver_options(const RunConfig& c) {
  SolverOptions o;
  o.tol = c.tol;
  return o;
}

inline Instance load_instance(const RunConfig& c) {
  if (c.model.empty()) throw std::invalid_argument("--model is required");
  const auto model = load_discrete_model(c.model);
  return validate(model.source, model.dist);
}

inline double single_distortion(const RunConfig& c) {
  if (c.distortion.size() != 1) throw std::invalid_argument("exactly one --D value is required");
  return c.distortion.front();
}

inline void require_n(const RunConfig& c, int min_n) {
  if (c.n.empty()) throw std::invalid_argument("--n is required");
  for (int n : c.n)
    if (n < min_n) throw std::invalid_argument("--n values must be at least " + std::to_string(min_n));
}

inline void require_trials(const RunConfig& c) {
  if (c.trials < 1) throw std::invalid_argument("--trials must be positive");
}

inline Table cmd_rd_curve(const RunConfig& c, double unit) {
  const Instance inst = load_instance(c);
  std::vector<double> grid = c.distortion;
  if (!c.grid.empty()) {
    if (c.grid.size() != 3 || c.grid[2] < 2 || c.grid[2] != std::floor(c.grid[2]) ||
        !(c.grid[1] > c.grid[0]))
      throw std::invalid_argument("--grid expects lo,hi,count with lo < hi and count >= 2");
    const int k = static_cast<int>(c.grid[2]);
    for (int i = 0; i + 1 < k; ++i) grid.push_back(c.grid[0] + (c.grid[1] - c.grid[0]) * i / (k - 1));
    grid.push_back(c.grid[1]);
  }
  if (grid.empty()) throw std::invalid_argument("rd-curve needs --D or --grid");

  Table t;
  t.columns = {{"D", "input"},
               {"R", "solver", Scale::rate},
               {"lambda", "solver", Scale::rate},
               {"V", "solver", Scale::variance},
               {"E_V_S", "solver", Scale::variance},
               {"var_R_S", "solver", Scale::variance}};
  t.add_summary("D_floor", inst.distortion_floor(), "closed-form", Scale::none, unit);
  t.add_summary("D_max", inst.zero_rate_distortion(), "closed-form", Scale::none, unit);
  const auto opts = solver_options(c);
  for (double d : grid) {
    const auto sol = solve_crd(inst, d, opts);
    const auto field = tilted_density(sol, inst);
    const auto disp = dispersion_v(field);
    t.rows.push_back({d, sol.rate, sol.slope, disp.v, disp.expected_state_var, disp.state_rate_var});
  }
  return t;
}

inline Table cmd_fbl(const RunConfig& c, double unit) {
  const Instance inst = load_instance(c);
  const double d = single_distortion(c);
  require_n(c, 1);
  require_trials(c);
  const unsigned threads = resolve_threads(c);
  const auto sol = solve_crd(inst, d, solver_options(c));
  const auto field = tilted_density(sol, inst);
  const double v = field.variance;

  Table t;
  t.add_summary("R", sol.rate, "solver", Scale::rate, unit);
  t.add_summary("V", v, "solver", Scale::variance, unit);
  t.add_summary("lambda", sol.slope, "solver", Scale::rate, unit);
  const auto trials = static_cast<std::size_t>(c.trials);
  std::string law_kind = "lattice";
  for (int n : c.n) {
    const std::uint64_t base = derive_seed(c.seed, static_cast<std::uint64_t>(n));
    SumLawOptions lo;
    lo.step = c.lattice_step;
    lo.seed = derive_seed(base, 2);
    lo.threads = threads;
    const SumLaw law = tilted_sum_law(field, n, lo);
    if (law.kind() != SumLaw::Kind::lattice) law_kind = "monte-carlo";
    const double sor = second_order_rate(n, c.eps, sol.rate, v);
    const double rate = c.rate.value_or(sor);
    const FblQuery q{n, d, c.eps, n * rate};
    const double conv = converse_lower_sup(q, law, v).value;
    const auto balls = sample_ball_probabilities(n, d, sol, inst, trials, derive_seed(base, 0), threads);
    const auto [ach, ach_se] = balls.eps(q.log_m);
    const double log_c = calibrate_log_c(n, d, d / 100.0, sol, inst, trials, derive_seed(base, 3), threads);
    const auto fwd = forward_bound(q, default_forward_params(q, log_c), sol, inst, law, trials,
                                   derive_seed(base, 1), threads);
    t.rows.push_back({static_cast<double>(n), sor, rate, conv, ach, ach_se, fwd.value,
                      fwd.mc_stderr, converse_rate(n, c.eps, law, v), balls.rate(n, c.eps)});
  }
  t.columns = {{"n", "input", Scale::integer},
               {"second_order_rate", "closed-form", Scale::rate},
               {"rate", c.rate ? "input" : "closed-form", Scale::rate},
               {"converse_eps", law_kind},
               {"achievability_eps", "monte-carlo"},
               {"achievability_stderr", "monte-carlo"},
               {"forward_bound", "monte-carlo"},
               {"forward_stderr", "monte-carlo"},
               {"converse_rate", law_kind, Scale::rate},
               {"achievability_rate", "monte-carlo", Scale::rate}};
  return t;
}

inline GaussianModel gaussian_model(const RunConfig& c) {
  GaussianModel m;
  m.var_x = c.var_x;
  m.var_z = c.var_z;
  if (!c.model.empty()) {
    const auto j = detail::parse_json(detail::read_file(c.model), c.model);
    if (!j.is_object()) throw detail::parse_error(c.model, "top level must be an object");
    for (const char* key : {"var_x", "var_z"}) {
      if (!j.contains(key) || !j.at(key).is_number())
        throw detail::parse_error(c.model, std::string("\"") + key + "\" must be a number");
    }
    m.var_x = j.at("var_x").get<double>();
    m.var_z = j.at("var_z").get<double>();
  }
  for (double v : {m.var_x, m.var_z})
    if (!(v > 0.0) || !std::isfinite(v))
      throw InfeasibleRequest("gaussian model: variances must be positive and finite");
  m.distortion = single_distortion(c);
  if (!(m.distortion > 0.0)) throw InfeasibleDistortion(m.distortion, 0.0);
  if (!(m.distortion < m.cond_var()))
    throw InfeasibleRequest("gaussian bounds need D < var(X|S) = " + format_number(m.cond_var()) +
                            "; above it the rate is zero");
  validate(m);
  return m;
}

inline CapMode cap_mode(const std::string& s) {
  if (s == "lower_bound") return CapMode::lower_bound;
  if (s == "exact") return CapMode::exact;
  if (s == "empirical") return CapMode::empirical;
  throw std::invalid_argument("--mode must be lower_bound, exact or empirical");
}

inline Table cmd_gaussian(const RunConfig& c, double unit) {
  const GaussianModel m = gaussian_model(c);
  const CapMode mode = cap_mode(c.mode);
  require_n(c, 2);
  require_trials(c);
  const unsigned threads = resolve_threads(c);
  const double r = gaussian_crd(m);

  Table t;
  t.add_summary("R", r, "closed-form", Scale::rate, unit);
  t.add_summary("V", kGaussianDispersion, "closed-form", Scale::variance, unit);
  t.add_summary("var_x_given_s", m.cond_var(), "closed-form", Scale::none, unit);
  t.columns = {{"n", "input", Scale::integer},
               {"second_order_rate", "closed-form", Scale::rate},
               {"rate", c.rate ? "input" : "closed-form", Scale::rate},
               {"converse_eps", "closed-form"},
               {"sphere_cap_bound", "quadrature"},
               {"simulated_eps", std::string("monte-carlo (") + cap_mode_name(mode) + ")"},
               {"simulated_stderr", "monte-carlo"}};
  for (int n : c.n) {
    const double sor = second_order_rate(n, c.eps, r, kGaussianDispersion);
    const double rate = c.rate.value_or(sor);
    const double log_m = n * rate;
    double conv = 0.0;
    for (double g : converse_gamma_grid(n, kGaussianDispersion))
      conv = std::max(conv, gaussian_converse(m, n, log_m, g).value);
    const double cap = sphere_cap_bound(m, n, log_m).value;
    const auto sim = gaussian_simulate(m, n, log_m, static_cast<std::size_t>(c.trials),
                                       derive_seed(c.seed, static_cast<std::uint64_t>(n)), mode,
                                       threads);
    t.rows.push_back({static_cast<double>(n), sor, rate, conv, cap, sim.value, sim.mc_stderr});
  }
  return t;
}

inline Table cmd_markov(const RunConfig& c, double unit) {
  if (c.model.empty()) throw std::invalid_argument("--model is required");
  const MarkovModel m = make_markov_model(load_markov_model(c.model));
  const double d = single_distortion(c);
  require_n(c, 1);
  require_trials(c);
  const unsigned threads = resolve_threads(c);
  const auto mt = markov_tilted_quantities(m, d, solver_options(c));
  const auto& lad = mt.ladder;
  const auto spec = v_inf_spectral(m, lad);

  Table t;
  t.add_summary("mu", lad.mu, "solver", Scale::rate, unit);
  t.add_summary("lag0", lad.lag0, "solver", Scale::variance, unit);
  t.add_summary("v_inf_ladder", lad.v_inf, "solver", Scale::variance, unit);
  t.add_summary("ladder_remainder", lad.remainder, "solver", Scale::variance, unit);
  t.add_summary("v_inf_spectral", spec.v_inf, spec.fallback ? "solver (ladder fallback)" : "solver",
                Scale::variance, unit);
  t.add_summary("spectral_condition", spec.condition, "solver", Scale::none, unit);
  t.add_summary("second_eigenvalue_modulus", second_eigenvalue_modulus(m.xi), "solver",
                Scale::none, unit);
  t.columns = {{"n", "input", Scale::integer},
               {"v_n", "solver", Scale::variance},
               {"second_order_rate", "closed-form", Scale::rate},
               {"rate", c.rate ? "input" : "closed-form", Scale::rate},
               {"converse_eps", "monte-carlo"}};
  for (int n : c.n) {
    const double sor = markov_second_order_rate(lad, n, c.eps);
    const double rate = c.rate.value_or(sor);
    const FblQuery q{n, d, c.eps, n * rate};
    const auto conv = markov_converse(m, lad, q, static_cast<std::size_t>(c.trials),
                                      derive_seed(c.seed, static_cast<std::uint64_t>(n)),
                                      std::nullopt, threads);
    t.rows.push_back({static_cast<double>(n), v_n(lad, n), sor, rate, conv.value});
  }
  return t;
}

inline std::string execute(const RunConfig& c) {
  const double unit = c.units == "bits" ? std::log(2.0) : 1.0;
  const auto start = std::chrono::steady_clock::now();
  Table t;
  if (c.command == "rd-curve") t = cmd_rd_curve(c, unit);
  else if (c.command == "fbl") t = cmd_fbl(c, unit);
  else if (c.command == "gaussian") t = cmd_gaussian(c, unit);
  else if (c.command == "markov") t = cmd_markov(c, unit);
  else throw std::invalid_argument("unknown command " + c.command);
  std::optional<double> wall;
  if (c.timing)
    wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return render(t, c, unit, wall);
}

//----------------------------------------------------------------------------
// Argument parsing
//----------------------------------------------------------------------------

inline void add_common(CLI::App* sub, RunConfig& c, bool bounds) {
  sub->add_option("--model", c.model, "model file (JSON)");
  sub->add_option("--D", c.distortion, "distortion level(s)")->delimiter(',');
  sub->add_option("--tol", c.tol, "solver rate tolerance, nats")->check(CLI::PositiveNumber);
  sub->add_option("--format", c.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  sub->add_option("--out", c.out, "output path (default stdout)");
  sub->add_option("--threads", c.threads, "worker threads, 0 = all cores");
  sub->add_option("--units", c.units, "nats or bits")->check(CLI::IsMember({"nats", "bits"}));
  sub->add_flag("--timing", c.timing, "record wall-clock time (output no longer reproducible)");
  if (!bounds) return;
  sub->add_option("--eps", c.eps, "excess-distortion probability")->check(CLI::Range(0.0, 1.0));
  sub->add_option("--n", c.n, "blocklength(s)")->delimiter(',');
  sub->add_option("--rate", c.rate, "evaluate at this rate (nats/symbol) instead of the normal approximation");
  sub->add_option("--trials", c.trials, "Monte-Carlo trials or paths");
  sub->add_option("--seed", c.seed, "base seed");
}

/// Parses argv and runs. Output goes to `out` (or --out), diagnostics to `err`.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  RunConfig c;
  CLI::App app{"Conditional rate-distortion and finite-blocklength bounds", kToolName};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  auto* rd = app.add_subcommand("rd-curve", "R(D), slope and dispersion over a distortion grid");
  add_common(rd, c, false);
  rd->add_option("--grid", c.grid, "lo,hi,count")->delimiter(',');
  auto* fbl = app.add_subcommand("fbl", "converse, random-coding and forward bounds");
  add_common(fbl, c, true);
  fbl->add_option("--lattice-step", c.lattice_step, "density lattice resolution, nats")
      ->check(CLI::PositiveNumber);
  auto* ga = app.add_subcommand("gaussian", "Gaussian source with Gaussian side information");
  add_common(ga, c, true);
  ga->add_option("--var-x", c.var_x, "variance of X")->check(CLI::PositiveNumber);
  ga->add_option("--var-z", c.var_z, "variance of the noise in S = X + Z")->check(CLI::PositiveNumber);
  ga->add_option("--mode", c.mode, "lower_bound, exact or empirical")
      ->check(CLI::IsMember({"lower_bound", "exact", "empirical"}));
  auto* mk = app.add_subcommand("markov", "Markov source: dispersion and bounds");
  add_common(mk, c, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    std::ostringstream o, e2;
    app.exit(e, o, e2);
    out << o.str();
    return ok;
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, e2;
    app.exit(e, o, e2);
    err << e2.str();
    return usage;
  }
  c.command = app.get_subcommands().front()->get_name();

  try {
    const std::string text = execute(c);
    if (c.out.empty()) {
      out << text;
    } else {
      std::ofstream f(c.out, std::ios::binary);
      if (!f) throw std::invalid_argument("cannot write " + c.out);
      f << text;
    }
    return ok;
  } catch (const ModelError& e) {
    err << kToolName << ": error: " << e.what() << '\n';
    return e.kind() == ModelError::Kind::parse ? usage : infeasible;
  } catch (const InfeasibleDistortion& e) {
    err << kToolName << ": error: " << e.what() << '\n';
    return infeasible;
  } catch (const InfeasibleRequest& e) {
    err << kToolName << ": error: " << e.what() << '\n';
    return infeasible;
  } catch (const ConvergenceError& e) {
    err << kToolName << ": error: " << e.what() << '\n';
    return numerical;
  } catch (const std::invalid_argument& e) {
    err << kToolName << ": error: " << e.what() << '\n';
    return usage;
  }
}

}  // namespace fblcrd::cli
