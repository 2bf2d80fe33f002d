// Command-line driver: experiments, convergence studies, gradient checks and
// the coupling diagnostic.
#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "fbspde/fbspde.hpp"

namespace {

using namespace fbspde;

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_double(const std::string& s) {
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

// "0:1e-3,2000:3e-4" -> {(0, 1e-3), (2000, 3e-4)}
std::vector<std::pair<int, double>> parse_schedule(const std::string& s) {
  std::vector<std::pair<int, double>> out;
  for (const auto& item : split(s, ',')) {
    const auto parts = split(item, ':');
    if (parts.size() != 2) throw std::invalid_argument("bad lr schedule entry '" + item + "'");
    out.emplace_back(std::stoi(parts[0]), to_double(parts[1]));
  }
  return out;
}

// "16:4e-3,32:1e-3" or "7,15,31"
std::vector<ConvergenceLevel> parse_levels(const std::string& s) {
  std::vector<ConvergenceLevel> out;
  for (const auto& item : split(s, ',')) {
    const auto parts = split(item, ':');
    if (parts.empty() || parts.size() > 2) throw std::invalid_argument("bad level '" + item + "'");
    out.push_back({std::stoi(parts[0]), parts.size() == 2 ? to_double(parts[1]) : 0.0});
  }
  return out;
}

struct RunOptions {
  ExperimentConfig cfg;
  std::string algo = "dbsde1";
  std::string schedule;
  std::string warm_schedule;
  std::string propagator = "semi-implicit";
  std::string y0_init = "terminal";
};

int do_run(RunOptions& o) {
  ExperimentConfig& cfg = o.cfg;
  cfg.algorithm = parse_algorithm(o.algo);
  if (!o.schedule.empty()) cfg.lr_schedule = parse_schedule(o.schedule);
  if (!o.warm_schedule.empty()) cfg.warm_lr_schedule = parse_schedule(o.warm_schedule);
  if (o.propagator == "semi-implicit") cfg.propagator = Propagator::semi_implicit;
  else if (o.propagator == "explicit") cfg.propagator = Propagator::explicit_euler;
  else throw std::invalid_argument("unknown propagator '" + o.propagator + "'");
  if (o.y0_init == "terminal") cfg.y0_init = InitialValueGuess::terminal;
  else if (o.y0_init == "zero") cfg.y0_init = InitialValueGuess::zero;
  else throw std::invalid_argument("unknown y0 init '" + o.y0_init + "'");
  validate(cfg);
  const ErrorReport rep = run_experiment(cfg);
  for (std::size_t i = 0; i < rep.runs.size(); ++i) {
    std::printf("run %zu: %.1f s, final loss %.6e\n", i + 1, rep.wall_seconds[i],
                rep.reports[i].loss_history.empty() ? 0.0 : rep.reports[i].loss_history.back());
  }
  if (rep.diverged) {
    std::fprintf(stderr, "diverged: %s\n", rep.failure.c_str());
    if (!rep.runs.empty()) std::printf("R_E over %zu completed runs: %.6e\n", rep.runs.size(), rep.relative_error);
    return kExitDivergence;
  }
  std::printf("R_E = %.6e\n", rep.relative_error);
  return kExitOk;
}

int do_converge(const std::string& kind, const std::string& levels, std::uint64_t seed, int paths,
                const std::string& out) {
  const ConvergenceTable t = convergence_study(kind, levels.empty() ? std::vector<ConvergenceLevel>{} : parse_levels(levels),
                                               seed, paths);
  std::printf("%s\n%6s %12s %14s %8s\n", t.kind.c_str(), "L", "dt", "error", "rate");
  for (std::size_t i = 0; i < t.error.size(); ++i) {
    std::printf("%6d %12.4g %14.6e", t.levels[i].L, t.levels[i].dt, t.error[i]);
    if (i > 0) std::printf(" %8.4f", t.rate[i - 1]);
    std::printf("\n");
  }
  if (!out.empty()) emit_rates_csv(t, out);
  return kExitOk;
}

int do_gradcheck(std::uint64_t seed, int configs, double tol) {
  int failed = 0;
  for (const auto& c : run_gradient_checks(seed, configs)) {
    const bool ok = c.relative_error < tol;
    failed += ok ? 0 : 1;
    std::printf("%-4s %-32s %.3e\n", ok ? "ok" : "FAIL", c.name.c_str(), c.relative_error);
  }
  return failed == 0 ? kExitOk : 1;
}

int do_coupling(const std::string& constants, double horizon) {
  const auto parts = split(constants, ',');
  if (parts.size() != 7) throw std::invalid_argument("--constants needs 7 values: L1F,L2F,L1f,L2f,L1G,L2G,Lg");
  LipschitzConstants c{to_double(parts[0]), to_double(parts[1]), to_double(parts[2]), to_double(parts[3]),
                       to_double(parts[4]), to_double(parts[5]), to_double(parts[6])};
  print_coupling_diagnostic(std::cout, coupling_diagnostic(c, horizon));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Finite-element deep BSDE solvers for forward-backward SPDEs"};
  app.require_subcommand(1);

  RunOptions run;
  auto* run_cmd = app.add_subcommand("run", "Train a solver on an example and score u(0,x)");
  run_cmd->set_config("--config", "", "Key-value config file; command-line flags take precedence");
  run_cmd->add_option("--example", run.cfg.example, "ex1 | ex2 | heat-deterministic")->capture_default_str();
  run_cmd->add_option("--algo", run.algo, "dbsde1 | dbsde2 | dbsde3")->capture_default_str();
  run_cmd->add_option("--L", run.cfg.L, "Internal mesh nodes")->capture_default_str();
  run_cmd->add_option("--dt", run.cfg.dt, "Time step")->capture_default_str();
  run_cmd->add_option("--T", run.cfg.T, "Horizon")->capture_default_str();
  run_cmd->add_option("--batch", run.cfg.batch, "Batch size")->capture_default_str();
  run_cmd->add_option("--iters", run.cfg.iterations, "Iterations (per stage for dbsde1)")->capture_default_str();
  run_cmd->add_option("--first-iters", run.cfg.first_stage_iterations, "dbsde1: iterations of the terminal stage");
  run_cmd->add_option("--runs", run.cfg.runs, "Independent runs")->capture_default_str();
  run_cmd->add_option("--seed", run.cfg.seed, "Base seed")->capture_default_str();
  run_cmd->add_option("--out", run.cfg.out_dir, "Output directory for CSV files");
  run_cmd->add_option("--width", run.cfg.width, "Hidden width (default: input dimension + 10)");
  run_cmd->add_option("--hidden-layers", run.cfg.hidden_layers, "Hidden layers")->capture_default_str();
  run_cmd->add_option("--lr", run.cfg.lr, "Adam learning rate")->capture_default_str();
  run_cmd->add_option("--lr-schedule", run.schedule, "Piecewise lr, e.g. 0:1e-3,3000:1e-4");
  run_cmd->add_option("--warm-lr-schedule", run.warm_schedule, "dbsde1: piecewise lr of the warm-started stages");
  run_cmd->add_option("--pool-batches", run.cfg.pool_batches, "dbsde1: training paths per batch size")
      ->capture_default_str();
  run_cmd->add_option("--propagator", run.propagator, "semi-implicit | explicit")->capture_default_str();
  run_cmd->add_flag("--append-w", run.cfg.append_brownian_input, "Feed W_t to the networks");
  run_cmd->add_option("--y0-init", run.y0_init, "dbsde2/3 start value: terminal | zero")->capture_default_str();
  run_cmd->add_option("--log-every", run.cfg.log_every, "Progress line every n iterations (0: quiet)");

  std::string kind = "projection", levels, rates_out;
  std::uint64_t converge_seed = 2024;
  int paths = 8;
  auto* conv_cmd = app.add_subcommand("converge", "Spatial convergence studies");
  conv_cmd->add_option("--kind", kind, "projection | heat-deterministic | forward-pathwise")->capture_default_str();
  conv_cmd->add_option("--levels", levels, "Comma list of L or L:dt");
  conv_cmd->add_option("--seed", converge_seed, "Brownian seed (forward-pathwise)")->capture_default_str();
  conv_cmd->add_option("--paths", paths, "Brownian paths (forward-pathwise)")->capture_default_str();
  conv_cmd->add_option("--out", rates_out, "Write the rate table to this CSV file");

  std::uint64_t grad_seed = 7;
  int configs = 20;
  double tol = 1e-5;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Reverse-mode gradients against finite differences");
  grad_cmd->add_option("--seed", grad_seed, "Seed")->capture_default_str();
  grad_cmd->add_option("--configs", configs, "Random network configurations")->capture_default_str();
  grad_cmd->add_option("--tol", tol, "Relative tolerance")->capture_default_str();

  std::string constants;
  double horizon = 0.5;
  auto* coup_cmd = app.add_subcommand("diagnose-coupling", "Computable factor of the coupling condition");
  coup_cmd->add_option("--constants", constants, "L1F,L2F,L1f,L2f,L1G,L2G,Lg")->required();
  coup_cmd->add_option("--T", horizon, "Horizon")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInvalidConfig;
  }

  try {
    if (*run_cmd) return do_run(run);
    if (*conv_cmd) return do_converge(kind, levels, converge_seed, paths, rates_out);
    if (*grad_cmd) return do_gradcheck(grad_seed, configs, tol);
    if (*coup_cmd) return do_coupling(constants, horizon);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDivergence;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "invalid configuration: %s\n", e.what());
    return kExitInvalidConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kExitOk;
}
