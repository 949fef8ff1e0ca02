// cmrisk: command-line front end for the risk, optimal-rule, adaptation and
// finite-sample computations.
//
// Exit codes: 0 success, 2 invalid input (parse, validation, infeasible
// moments), 3 numerical non-convergence or a duality gap above tolerance,
// 1 output could not be written.

#include "cmrisk/cmrisk.hpp"
#include "cmrisk/config_io.hpp"

#include <CLI11.hpp>

#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

using namespace cmrisk;

namespace {

constexpr int kExitInvalid = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 1;

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::uint64_t seed = 20250101;
  int nodes = 128;
  std::size_t mc_draws = 1'000'000;
  double tol = 1e-8;
  std::string out;

  IntegratorSettings settings() const {
    IntegratorSettings s;
    s.seed = seed;
    s.nodes = nodes;
    s.mc_draws = mc_draws;
    s.tol = tol;
    return s;
  }
};

std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing: " + std::strerror(errno));
  f << text;
  if (!f) throw IoError("failed writing " + path);
}

class Run {
 public:
  Run(std::string command, const Globals& g) : command_(std::move(command)), g_(g), start_(clock::now()) {}

  json& resolved() { return resolved_; }

  /// Writes `text` to `path`, or stdout when path is empty, plus a manifest
  /// sidecar next to every file.
  void emit(const std::string& path, const std::string& text) {
    if (path.empty()) {
      std::cout << text;
      std::cout.flush();
      return;
    }
    write_file(path, text);
    write_file(path + ".manifest.json", manifest().dump(2) + "\n");
  }

 private:
  using clock = std::chrono::steady_clock;

  json manifest() const {
    json integrator{{"nodes", g_.nodes}, {"mc_draws", g_.mc_draws}, {"tol", g_.tol}, {"max_quadrature_dim", 3}};
    return json{{"command", command_},
                {"config", resolved_},
                {"seed", g_.seed},
                {"integrator", integrator},
                {"tool_version", kVersion},
                {"wall_time_seconds", std::chrono::duration<double>(clock::now() - start_).count()}};
  }

  std::string command_;
  const Globals& g_;
  json resolved_ = json::object();
  clock::time_point start_;
};

json report_to_json(const RiskReport& r) {
  json out{{"value", number_to_json(r.value)}, {"status", to_string(r.status)}};
  out["beta_star"] = r.beta_star ? vector_to_json(*r.beta_star) : json(nullptr);
  out["iterations"] = r.iterations;
  out["gradient_norm"] = number_to_json(r.gradient_norm);
  return out;
}

int status_exit(SolverStatus s) { return s == SolverStatus::max_iterations ? kExitNumerical : 0; }

// dual-check ------------------------------------------------------------------

struct DualCheckArgs {
  std::string space;
  std::optional<double> lambda;
};

int cmd_dual_check(const DualCheckArgs& a, const Globals& g) {
  Run run("dual-check", g);
  FiniteSpacePrimal prob = space_from_json(load_json_file(a.space));
  if (a.lambda) {
    prob.lambda = *a.lambda;
    prob.validate();
  }
  run.resolved() = {{"space", a.space}, {"lambda", prob.lambda}, {"atoms", prob.q.size()}, {"moments", prob.b()}};
  const PrimalSolution primal = primal_risk_finite_space(prob);
  const RiskReport dual = dual_risk_finite_space(prob);
  const RiskReport dual_ineq = dual_risk_finite_space(prob, true);
  const double gap = std::abs(primal.value - dual.value);
  const bool ok = gap <= 1e-6 * (1.0 + std::abs(primal.value));
  json out{{"primal", number_to_json(primal.value)},
           {"dual", number_to_json(dual.value)},
           {"gap", number_to_json(gap)},
           {"worst_case", vector_to_json(primal.worst_case)},
           {"beta_star", dual.beta_star ? vector_to_json(*dual.beta_star) : json::array()},
           {"dual_inequality", number_to_json(dual_ineq.value)},
           {"within_tolerance", ok}};
  run.emit(g.out, out.dump() + "\n");
  if (!ok) std::cerr << "duality gap " << gap << " exceeds 1e-6 * (1 + |primal|)\n";
  return ok ? 0 : kExitNumerical;
}

// risk ------------------------------------------------------------------------

struct RiskArgs {
  std::string config;
  std::string rule = R"({"family": "zero"})";
  std::string m = "inf";
  std::optional<double> lambda;
  std::vector<double> h;
};

LimitExperimentConfig load_config(const std::string& path, const std::optional<double>& lambda) {
  LimitExperimentConfig cfg = config_from_json(load_json_file(path));
  return lambda ? cfg.with_lambda(*lambda) : cfg;
}

int cmd_risk(const RiskArgs& a, const Globals& g) {
  Run run("risk", g);
  const LimitExperimentConfig cfg = load_config(a.config, a.lambda);
  const RuleSpec rule = rule_from_json(json_argument(a.rule));
  const MomentOrder m = parse_moment_order(a.m);
  run.resolved() = {{"experiment", config_to_json(cfg)}, {"rule", rule_to_json(rule)}, {"M", m.to_string()}};
  RiskReport r;
  if (!a.h.empty()) {
    if (m.all) throw ConfigError("--local-h applies to finite M only; the all-moments risk is evaluated at h = 0");
    const Vec h = Eigen::Map<const Vec>(a.h.data(), static_cast<Eigen::Index>(a.h.size()));
    run.resolved()["h"] = vector_to_json(h);
    r = finite_m_dual_risk(cfg, rule, LossSpec::squared(), m.order, g.settings(), false, h);
  } else {
    r = constrained_risk(cfg, rule, LossSpec::squared(), m, g.settings());
  }
  json out = report_to_json(r);
  out["M"] = m.to_string();
  out["lambda"] = number_to_json(cfg.lambda);
  out["rule"] = rule_to_json(rule);
  run.emit(g.out, out.dump() + "\n");
  return status_exit(r.status);
}

// optimal ---------------------------------------------------------------------

struct OptimalArgs {
  std::string config;
  std::string m = "inf";
  std::optional<double> lambda;
};

int cmd_optimal(const OptimalArgs& a, const Globals& g) {
  Run run("optimal", g);
  const LimitExperimentConfig cfg = load_config(a.config, a.lambda);
  const MomentOrder m = parse_moment_order(a.m);
  run.resolved() = {{"experiment", config_to_json(cfg)}, {"M", m.to_string()}};
  const OptimalRule opt = optimal_rule(cfg, m, LossSpec::squared(), g.settings());
  json out{{"family", opt.rule.name()}};
  out["C"] = opt.c_star ? matrix_to_json(*opt.c_star) : json(nullptr);
  out["beta_star"] = opt.report.beta_star ? vector_to_json(*opt.report.beta_star) : json(nullptr);
  out["risk"] = number_to_json(opt.report.value);
  out["status"] = to_string(opt.report.status);
  out["M"] = m.to_string();
  out["lambda"] = number_to_json(cfg.lambda);
  run.emit(g.out, out.dump() + "\n");
  return status_exit(opt.report.status);
}

// adaptive --------------------------------------------------------------------

struct AdaptiveArgs {
  double omega = 2.0;
  std::string family = "all";
  std::optional<double> tau;
  std::optional<double> c;
  bool autotune = false;
  int grid_points = 37;
  double log_min = -3.0;
  double log_max = 6.0;
  int knots = 11;
};

std::string curve_csv(const AdaptiveReport& rep) {
  std::string s = "lambda,log_lambda,risk_rule,risk_opt,ratio\n";
  for (std::size_t i = 0; i < rep.grid.size(); ++i)
    s += csv_number(rep.grid.lambda(i)) + "," + csv_number(rep.grid.log_lambda(i)) + "," +
         csv_number(rep.risk_rule[i]) + "," + csv_number(rep.risk_opt[i]) + "," + csv_number(rep.ratio[i]) + "\n";
  return s;
}

struct FamilyResult {
  std::string label;
  RuleSpec rule;
  AdaptiveReport report;
  std::optional<SolverStatus> status;
};

FamilyResult run_family(const std::string& label, const AdaptiveArgs& a, const LambdaGrid& grid,
                        const IntegratorSettings& s) {
  if (label == "st" || label == "erm") {
    const RuleFamily fam = label == "st" ? RuleFamily::soft_threshold : RuleFamily::erm;
    if (a.tau && !a.autotune) {
      const RuleSpec rule = fam == RuleFamily::erm ? RuleSpec::erm(*a.tau) : RuleSpec::soft_threshold(*a.tau);
      return {label, rule, rule_risk_curve(rule, a.omega, grid, s), std::nullopt};
    }
    TunedRule t = tune_threshold(fam, a.omega, grid, s);
    return {label, t.rule, t.report, std::nullopt};
  }
  if (label == "linear") {
    if (a.c && !a.autotune) {
      const RuleSpec rule = RuleSpec::linear_scalar(*a.c);
      return {label, rule, rule_risk_curve(rule, a.omega, grid, s), std::nullopt};
    }
    TunedRule t = tune_linear(a.omega, grid, s);
    return {label, t.rule, t.report, std::nullopt};
  }
  if (label == "spline") {
    SplineFit f = optimize_spline(a.omega, grid, a.knots, s);
    return {label, f.rule, f.report, f.status};
  }
  throw ConfigError("unknown family \"" + label + "\" (expected st, erm, spline, linear or all)");
}

json family_summary(const FamilyResult& r) {
  json out{{"family", r.label},
           {"rule", rule_to_json(r.rule)},
           {"regret", number_to_json(r.report.regret)},
           {"regret_finite", number_to_json(r.report.regret_finite)},
           {"argmax_lambda", number_to_json(r.report.argmax_lambda)}};
  if (r.status) out["status"] = to_string(*r.status);
  return out;
}

int cmd_adaptive(const AdaptiveArgs& a, const Globals& g) {
  Run run("adaptive", g);
  const LambdaGrid grid(a.log_min, a.log_max, a.grid_points);
  run.resolved() = {{"omega", a.omega},       {"family", a.family},   {"grid_points", a.grid_points},
                    {"log_lambda_min", a.log_min}, {"log_lambda_max", a.log_max}, {"knots", a.knots}};
  if (a.tau) run.resolved()["tau"] = *a.tau;
  if (a.c) run.resolved()["c"] = *a.c;
  run.resolved()["auto"] = a.autotune;

  const IntegratorSettings s = g.settings();
  int code = 0;
  if (a.family != "all") {
    const FamilyResult r = run_family(a.family, a, grid, s);
    run.emit(g.out, curve_csv(r.report));
    if (!g.out.empty()) std::cout << family_summary(r).dump() << "\n";
    if (r.status == SolverStatus::max_iterations) code = kExitNumerical;
    return code;
  }
  if (g.out.empty()) throw ConfigError("--family all writes one file per family; pass --out <stem>.csv");
  const std::filesystem::path out(g.out);
  const std::string stem = (out.parent_path() / out.stem()).string();
  json summary = json::array();
  for (const std::string label : {"st", "erm", "spline"}) {
    const FamilyResult r = run_family(label, a, grid, s);
    run.emit(stem + "_" + label + ".csv", curve_csv(r.report));
    summary.push_back(family_summary(r));
    if (r.status == SolverStatus::max_iterations) code = kExitNumerical;
  }
  const json doc{{"omega", a.omega}, {"families", summary}};
  run.emit(stem + "_summary.json", doc.dump(2) + "\n");
  std::cout << doc.dump() << "\n";
  return code;
}

// ate -------------------------------------------------------------------------

struct AteArgs {
  double mu0 = 0.5, mu1 = 0.5, pi1 = 0.5;
  std::int64_t n = 2000;
  double h0 = 0.0, h1 = 0.0;
  double lambda = 8.0;
  int m = 0;
  std::int64_t reps = 10000;
  int batches = 20;
  std::string rule = R"({"family": "zero"})";
};

int cmd_ate(const AteArgs& a, const Globals& g) {
  Run run("ate", g);
  AteConfig cfg;
  cfg.mu0 = a.mu0;
  cfg.mu1 = a.mu1;
  cfg.pi1 = a.pi1;
  cfg.n = a.n;
  cfg.h = Vec(2);
  cfg.h << a.h0, a.h1;
  cfg.validate();
  const RuleSpec rule = rule_from_json(json_argument(a.rule));
  run.resolved() = {{"mu0", a.mu0}, {"mu1", a.mu1}, {"pi1", a.pi1},   {"n", a.n},
                    {"h", {a.h0, a.h1}}, {"lambda", a.lambda}, {"M", a.m}, {"reps", a.reps},
                    {"batches", a.batches}, {"rule", rule_to_json(rule)}};
  const AttainabilityReport r = mc_attainability(cfg, rule, a.m, a.lambda, a.reps, g.seed, g.settings(), a.batches);
  json out{{"n", r.n},
           {"reps", r.reps},
           {"limit_value", number_to_json(r.limit_value)},
           {"finite_value", number_to_json(r.finite_value)},
           {"mc_standard_error", number_to_json(r.mc_standard_error)},
           {"relative_gap", number_to_json(r.relative_gap)},
           {"beta_star", vector_to_json(r.beta_star)},
           {"mle_fallbacks", r.fallback_count},
           {"clamped", r.clamp_count},
           {"status", to_string(r.status)}};
  if (rule.family() == RuleFamily::zero && a.m == 0 && a.n <= 20000)
    out["exact_finite_value"] = number_to_json(exact_difference_in_means_tilted_risk(cfg, a.lambda));
  run.emit(g.out, out.dump() + "\n");
  if (r.fallback_count > 0) std::cerr << "warning: " << r.fallback_count << " replications had an empty arm\n";
  return status_exit(r.status);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Misspecification-robust risk of estimators in Gaussian limit experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));
  Globals g;
  app.add_option("--seed", g.seed, "seed for Monte Carlo draws")->capture_default_str();
  app.add_option("--nodes", g.nodes, "Gauss-Hermite nodes per dimension")->capture_default_str()->check(CLI::Range(2, 400));
  app.add_option("--mc-draws", g.mc_draws, "Monte Carlo draws when quadrature is too large")->capture_default_str();
  app.add_option("--tol", g.tol, "gradient tolerance of inner solvers")->capture_default_str();
  app.add_option("--out", g.out, "output file (stdout when omitted)");

  int code = 0;
  std::function<int()> action;

  DualCheckArgs dc;
  auto* dual = app.add_subcommand("dual-check", "primal versus dual risk on a finite state space")->fallthrough();
  dual->add_option("--space", dc.space, "finite-space JSON file")->required();
  dual->add_option("--lambda", dc.lambda, "override lambda");
  dual->callback([&] { action = [&] { return cmd_dual_check(dc, g); }; });

  RiskArgs ra;
  auto* risk = app.add_subcommand("risk", "constrained-multiplier risk of a rule")->fallthrough();
  risk->add_option("--config", ra.config, "experiment JSON (I0, Psi, Omega, K, lambda)")->required();
  risk->add_option("--rule", ra.rule, "rule JSON, inline or a file")->capture_default_str();
  risk->add_option("--M", ra.m, "moment order: 0, 1, ... or inf")->capture_default_str();
  risk->add_option("--lambda", ra.lambda, "override lambda");
  risk->add_option("--local-h", ra.h, "local parameter for finite M")->expected(1, -1);
  risk->callback([&] { action = [&] { return cmd_risk(ra, g); }; });

  OptimalArgs oa;
  auto* optimal = app.add_subcommand("optimal", "optimal equivariant rule under squared loss")->fallthrough();
  optimal->add_option("--config", oa.config, "experiment JSON")->required();
  optimal->add_option("--M", oa.m, "moment order: 0, 1, ... or inf")->capture_default_str();
  optimal->add_option("--lambda", oa.lambda, "override lambda");
  optimal->callback([&] { action = [&] { return cmd_optimal(oa, g); }; });

  AdaptiveArgs aa;
  auto* adaptive = app.add_subcommand("adaptive", "risk curves across lambda in the normalized scalar setting")->fallthrough();
  adaptive->add_option("--omega", aa.omega, "variance of the moment statistic (> 1)")->required();
  adaptive->add_option("--family", aa.family, "st, erm, spline, linear or all")->capture_default_str();
  adaptive->add_option("--tau", aa.tau, "fixed threshold for st or erm");
  adaptive->add_option("--c", aa.c, "fixed coefficient for linear");
  adaptive->add_flag("--auto", aa.autotune, "tune the family parameter to minimize regret");
  adaptive->add_option("--grid-points", aa.grid_points, "points on the log-lambda grid")->capture_default_str()->check(CLI::PositiveNumber);
  adaptive->add_option("--log-lambda-min", aa.log_min)->capture_default_str();
  adaptive->add_option("--log-lambda-max", aa.log_max)->capture_default_str();
  adaptive->add_option("--knots", aa.knots, "spline knots")->capture_default_str();
  adaptive->callback([&] { action = [&] { return cmd_adaptive(aa, g); }; });

  AteArgs ta;
  auto* ate = app.add_subcommand("ate", "finite-sample attainability in the two-team treatment-effect model")->fallthrough();
  ate->add_option("--mu0", ta.mu0)->capture_default_str();
  ate->add_option("--mu1", ta.mu1)->capture_default_str();
  ate->add_option("--pi1", ta.pi1)->capture_default_str();
  ate->add_option("--n", ta.n)->capture_default_str();
  ate->add_option("--h0", ta.h0)->capture_default_str();
  ate->add_option("--h1", ta.h1)->capture_default_str();
  ate->add_option("--lambda", ta.lambda)->capture_default_str();
  ate->add_option("--M", ta.m, "moment order")->capture_default_str()->check(CLI::Range(0, kMaxMomentOrder));
  ate->add_option("--reps", ta.reps)->capture_default_str();
  ate->add_option("--batches", ta.batches, "batches for the standard error")->capture_default_str();
  ate->add_option("--rule", ta.rule, "limit rule JSON, inline or a file")->capture_default_str();
  ate->callback([&] { action = [&] { return cmd_ate(ta, g); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInvalid;
  }

  try {
    code = action();
  } catch (const InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const ConfigError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const IntegrabilityError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const UnsupportedOrderError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const IoError& e) {
    std::cerr << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << e.what() << "\n";
    return kExitIo;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  }
  return code;
}
