#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>

#include "fbspde/harness.hpp"

using namespace fbspde;
namespace fs = std::filesystem;

namespace {

constexpr double pi = std::numbers::pi;

// Piecewise-linear hat profile that lies in V_h^0 of the uniform mesh with L = 9.
double tent(double x) { return x < 0.5 ? 2 * x : 2 * (1 - x); }

FeFunction nodal(const Mesh1D& mesh, double (*f)(double), double scale = 1.0) {
  Vec1 c(mesh.internal_nodes());
  for (int l = 0; l < mesh.internal_nodes(); ++l) c[l] = scale * f(mesh.node(l + 1));
  return {c};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("fbspde_test_" + name);
  fs::remove_all(dir);
  return dir;
}

ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.example = "ex1";
  cfg.algorithm = Algorithm::dbsde1;
  cfg.L = 5;
  cfg.dt = 0.1;
  cfg.batch = 16;
  cfg.iterations = 5;
  cfg.runs = 2;
  cfg.pool_batches = 2;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST(RelativeError, ExactRunsGiveZero) {
  const Mesh1D mesh = Mesh1D::uniform(9);
  const std::vector<FeFunction> runs(3, nodal(mesh, tent));
  EXPECT_NEAR(relative_error(mesh, runs, tent), 0.0, 1e-12);
}

TEST(RelativeError, ScaledRunGivesSquaredOffset) {
  const Mesh1D mesh = Mesh1D::uniform(9);
  EXPECT_NEAR(relative_error(mesh, {nodal(mesh, tent, 1.1)}, tent), 0.01, 1e-10);
}

TEST(RelativeError, UsesTheMeanOfTheRuns) {
  const Mesh1D mesh = Mesh1D::uniform(9);
  // Mean of 0.8 u and 1.4 u is 1.1 u.
  EXPECT_NEAR(relative_error(mesh, {nodal(mesh, tent, 0.8), nodal(mesh, tent, 1.4)}, tent), 0.01, 1e-10);
}

TEST(RelativeError, Invariances) {
  const Mesh1D mesh = Mesh1D::uniform(12);
  SplitMix64 rng(4);
  auto sine = [](double x) { return std::sin(pi * x); };
  std::vector<FeFunction> runs;
  for (int i = 0; i < 4; ++i) {
    Vec1 c(12);
    for (int l = 0; l < 12; ++l) c[l] = sine(mesh.node(l + 1)) + rng.uniform(-0.1, 0.1);
    runs.push_back({c});
  }
  const double base = relative_error(mesh, runs, sine);
  std::vector<FeFunction> permuted{runs[2], runs[0], runs[3], runs[1]};
  EXPECT_NEAR(relative_error(mesh, permuted, sine), base, 1e-12);
  for (double k : {-3.0, 0.25, 7.0}) {
    std::vector<FeFunction> scaled = runs;
    for (auto& r : scaled) {
      for (double& v : r.coeffs) v *= k;
    }
    EXPECT_NEAR(relative_error(mesh, scaled, [&](double x) { return k * sine(x); }), base, 1e-12);
  }
}

TEST(RelativeError, RejectsBadInput) {
  const Mesh1D mesh = Mesh1D::uniform(4);
  EXPECT_THROW(relative_error(mesh, {}, tent), std::invalid_argument);
  EXPECT_THROW(relative_error(mesh, {FeFunction{Vec1(3, 0.0)}}, tent), std::invalid_argument);
}

TEST(Coupling, DiagnosticFactor) {
  LipschitzConstants c;
  c.l1_G = c.l_g = c.l2_F = c.l2_f = 1.0;
  EXPECT_NEAR(coupling_diagnostic(c, 0.5), 0.9375, 1e-15);
  LipschitzConstants decoupled = c;
  decoupled.l2_F = decoupled.l2_f = 0.0;
  EXPECT_EQ(coupling_diagnostic(decoupled, 0.5), 0.0);
  LipschitzConstants forward_free = c;
  forward_free.l1_G = forward_free.l_g = 0.0;
  EXPECT_EQ(coupling_diagnostic(forward_free, 0.5), 0.0);
  c.l1_F = -1.0;
  EXPECT_THROW(coupling_diagnostic(c, 0.5), std::invalid_argument);
  std::ostringstream os;
  print_coupling_diagnostic(os, 0.9375);
  EXPECT_NE(os.str().find("0.9375"), std::string::npos);
  EXPECT_NE(os.str().find("not known"), std::string::npos);
}

TEST(Convergence, ProjectionRates) {
  const ConvergenceTable t = convergence_study("projection");
  ASSERT_EQ(t.rate.size(), 3u);
  for (double r : t.rate) {
    EXPECT_GE(r, 1.85);
    EXPECT_LE(r, 2.15);
  }
  EXPECT_DOUBLE_EQ(t.h.front(), 1.0 / 8);
  EXPECT_DOUBLE_EQ(t.h.back(), 1.0 / 64);
}

TEST(Convergence, HeatRates) {
  const ConvergenceTable t = convergence_study("heat-deterministic");
  ASSERT_EQ(t.rate.size(), 2u);
  for (double r : t.rate) {
    EXPECT_GE(r, 1.7);
    EXPECT_LE(r, 2.2);
  }
}

TEST(Convergence, PathwiseErrorsDecrease) {
  const ConvergenceTable t = convergence_study("forward-pathwise");
  ASSERT_EQ(t.error.size(), 3u);
  EXPECT_GT(t.error[0], t.error[1]);
  EXPECT_GT(t.error[1], t.error[2]);
}

TEST(Convergence, RejectsBadLevels) {
  EXPECT_THROW(convergence_study("projection", {{7, 0.0}, {15, 0.0}}), std::invalid_argument);
  EXPECT_THROW(convergence_study("spectral"), std::invalid_argument);
  EXPECT_THROW(convergence_study("forward-pathwise", {{4, 3e-3}, {8, 2e-3}, {16, 1e-3}}), std::invalid_argument);
}

TEST(Convergence, RateTableCsv) {
  const fs::path dir = scratch_dir("rates");
  const ConvergenceTable t = convergence_study("projection");
  emit_rates_csv(t, dir / "rates.csv");
  const std::string s = slurp(dir / "rates.csv");
  EXPECT_EQ(count_lines(s), 5);
  EXPECT_EQ(s.rfind("kind,level,L,dt,h,error,rate\n", 0), 0u);
  fs::remove_all(dir);
}

TEST(Experiment, ValidationErrors) {
  ExperimentConfig cfg = tiny_config();
  EXPECT_NO_THROW(validate(cfg));
  cfg.L = 0;
  EXPECT_THROW(validate(cfg), std::invalid_argument);
  cfg = tiny_config();
  cfg.example = "ex3";
  EXPECT_THROW(validate(cfg), std::invalid_argument);
  cfg = tiny_config();
  cfg.runs = 0;
  EXPECT_THROW(validate(cfg), std::invalid_argument);
  cfg = tiny_config();
  cfg.dt = -0.1;
  EXPECT_THROW(validate(cfg), std::invalid_argument);
  cfg = tiny_config();
  cfg.dt = 0.3;  // does not divide T
  EXPECT_THROW(validate(cfg), std::invalid_argument);
}

TEST(Experiment, SeedDerivationIsStable) {
  EXPECT_EQ(run_seed(1, 0), derive_seed(1, 0));
  EXPECT_NE(run_seed(1, 0), run_seed(1, 1));
  EXPECT_EQ(run_seed(42, 3), run_seed(42, 3));
}

TEST(Experiment, UntrainedSmokeRun) {
  ExperimentConfig cfg = tiny_config();
  cfg.runs = 1;
  cfg.iterations = 0;
  const ErrorReport a = run_experiment(cfg);
  ASSERT_EQ(a.runs.size(), 1u);
  // With no training R_E is that of the initial network's output.
  auto sys = std::make_shared<const FemSystem>(Mesh1D::uniform(cfg.L));
  const FbsdeProblem p = build_fd_fbsde(sys, make_example("ex1", cfg.T).coefficients);
  SolverConfig sc = solver_config(cfg);
  sc.seed = run_seed(cfg.seed, 0);
  const Vec1 y0 = solve(p, sc, sys.get()).y0;
  const ExampleSetup ex = make_example("ex1", cfg.T);
  const double expected =
      relative_error(sys->mesh(), {FeFunction{y0}}, [&](double x) { return ex.solution.u(0.0, x, 0.0); });
  EXPECT_EQ(a.relative_error, expected);
  EXPECT_EQ(run_experiment(cfg).relative_error, a.relative_error);
  EXPECT_FALSE(a.diverged);
}

TEST(Experiment, CsvArtifacts) {
  ExperimentConfig cfg = tiny_config();
  const fs::path d1 = scratch_dir("csv1"), d2 = scratch_dir("csv2");
  cfg.out_dir = d1.string();
  const ErrorReport rep = run_experiment(cfg);
  cfg.out_dir = d2.string();
  run_experiment(cfg);
  for (const char* f : {"u0_curves.csv", "loss_history.csv", "summary.csv"}) {
    ASSERT_TRUE(fs::exists(d1 / f)) << f;
    EXPECT_EQ(slurp(d1 / f), slurp(d2 / f)) << f;
  }
  EXPECT_TRUE(fs::exists(d1 / "timing.csv"));

  const std::string curves = slurp(d1 / "u0_curves.csv");
  EXPECT_EQ(count_lines(curves), 1 + cfg.L + 2);
  EXPECT_EQ(curves.substr(0, curves.find('\n')), "x,analytic,run_1,run_2,mean");
  std::istringstream rows(curves);
  std::string line;
  std::getline(rows, line);
  std::getline(rows, line);
  EXPECT_EQ(line, "0,0,0,0,0");

  const std::string loss = slurp(d1 / "loss_history.csv");
  const int steps = 5;
  EXPECT_EQ(count_lines(loss), 1 + cfg.runs * cfg.iterations * steps);

  std::istringstream summary(slurp(d1 / "summary.csv"));
  bool found = false;
  while (std::getline(summary, line)) {
    if (line.rfind("relative_error,", 0) == 0) {
      const double parsed = std::strtod(line.c_str() + 15, nullptr);
      EXPECT_NEAR(parsed, rep.relative_error, 1e-15);
      EXPECT_EQ(parsed, rep.relative_error);
      found = true;
    }
    if (line.rfind("status,", 0) == 0) EXPECT_EQ(line, "status,ok");
  }
  EXPECT_TRUE(found);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Experiment, GlobalLossCsvHasStepColumns) {
  ExperimentConfig cfg = tiny_config();
  cfg.example = "ex2";
  cfg.algorithm = Algorithm::dbsde3;
  cfg.runs = 1;
  cfg.iterations = 3;
  const fs::path dir = scratch_dir("csv3");
  cfg.out_dir = dir.string();
  run_experiment(cfg);
  const std::string loss = slurp(dir / "loss_history.csv");
  EXPECT_EQ(loss.substr(0, loss.find('\n')), "run,iteration,loss,L_1,L_2,L_3,L_4,L_5");
  EXPECT_EQ(count_lines(loss), 4);
  fs::remove_all(dir);
}

TEST(Experiment, DivergenceIsFlaggedInTheCsv) {
  ExperimentConfig cfg = tiny_config();
  cfg.example = "ex2";
  cfg.algorithm = Algorithm::dbsde2;
  cfg.runs = 2;
  cfg.iterations = 40;
  cfg.lr = 1e6;  // forces a blow-up
  const fs::path dir = scratch_dir("csv4");
  cfg.out_dir = dir.string();
  const ErrorReport rep = run_experiment(cfg);
  EXPECT_TRUE(rep.diverged);
  EXPECT_FALSE(rep.failure.empty());
  EXPECT_NE(slurp(dir / "summary.csv").find("status,diverged"), std::string::npos);
  fs::remove_all(dir);
}

TEST(GradientChecks, AllBelowTolerance) {
  const auto checks = run_gradient_checks(7, 20);
  ASSERT_GE(checks.size(), 20u);
  for (const auto& c : checks) EXPECT_LT(c.relative_error, 1e-5) << c.name;
}
