#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numbers>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fbspde/deepbsde.hpp"
#include "fbspde/fem.hpp"
#include "fbspde/nn.hpp"
#include "fbspde/problems.hpp"
#include "fbspde/random.hpp"
#include "fbspde/sde.hpp"

namespace fbspde {

/// Exit statuses of the command-line driver.
enum ExitCode : int { kExitOk = 0, kExitDivergence = 2, kExitInvalidConfig = 3 };

struct ExperimentConfig {
  std::string example = "ex1";  // ex1 | ex2 | heat-deterministic
  Algorithm algorithm = Algorithm::dbsde1;
  int L = 20;
  double dt = 0.05;
  double T = 0.5;
  int batch = 512;
  int iterations = 2000;
  int first_stage_iterations = -1;
  int runs = 10;
  std::uint64_t seed = 1;
  std::string out_dir;
  int width = -1;
  int hidden_layers = 2;
  double lr = 1e-3;
  std::vector<std::pair<int, double>> lr_schedule;
  std::vector<std::pair<int, double>> warm_lr_schedule;
  int pool_batches = 32;
  Propagator propagator = Propagator::semi_implicit;
  bool append_brownian_input = false;
  InitialValueGuess y0_init = InitialValueGuess::terminal;
  int log_every = 0;
};

/// Throws std::invalid_argument on an inconsistent configuration.
inline void validate(const ExperimentConfig& cfg) {
  if (cfg.example != "ex1" && cfg.example != "ex2" && cfg.example != "heat-deterministic") {
    throw std::invalid_argument("unknown example '" + cfg.example + "'");
  }
  if (cfg.L < 1) throw std::invalid_argument("L must be >= 1");
  if (cfg.runs < 1) throw std::invalid_argument("runs must be >= 1");
  if (cfg.batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (cfg.iterations < 0) throw std::invalid_argument("iterations must be >= 0");
  if (!(cfg.T > 0.0) || !(cfg.dt > 0.0)) throw std::invalid_argument("T and dt must be positive");
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("lr must be positive");
  TimeGrid::uniform(cfg.T, cfg.dt);
}

/// Seed of run i: splitmix64 hash of (seed, i).
inline std::uint64_t run_seed(std::uint64_t seed, int run) { return derive_seed(seed, static_cast<std::uint64_t>(run)); }

inline SolverConfig solver_config(const ExperimentConfig& e) {
  SolverConfig s;
  s.algorithm = e.algorithm;
  s.grid = TimeGrid::uniform(e.T, e.dt);
  s.batch = e.batch;
  s.iterations = e.iterations;
  s.first_stage_iterations = e.first_stage_iterations;
  s.adam.lr = e.lr;
  s.lr_schedule = e.lr_schedule;
  s.warm_lr_schedule = e.warm_lr_schedule;
  s.width = e.width;
  s.hidden_layers = e.hidden_layers;
  s.seed = e.seed;
  s.propagator = e.propagator;
  s.append_brownian_input = e.append_brownian_input;
  s.pool_batches = e.pool_batches;
  s.y0_init = e.y0_init;
  s.log_every = e.log_every;
  return s;
}

inline ExampleSetup make_example(const std::string& name, double horizon) {
  if (name == "ex1") return example1({horizon, 0.2, 1.0});
  if (name == "ex2") return example2({horizon, 0.001, 0.2, 0.2});
  if (name == "heat-deterministic") return example1({horizon, 0.2, 0.0});
  throw std::invalid_argument("unknown example '" + name + "'");
}

/// R_E = int |u - mean_i u_i|^2 / int |u|^2 with u_i the run curves. Both
/// integrals use composite Gauss quadrature on the mesh.
inline double relative_error(const Mesh1D& mesh, const std::vector<FeFunction>& runs,
                             const std::function<double(double)>& analytic, int order = 4, int refine = 4) {
  if (runs.empty()) throw std::invalid_argument("relative_error: empty run list");
  const int n = mesh.internal_nodes();
  FeFunction mean{Vec1(n, 0.0)};
  for (const auto& r : runs) {
    if (static_cast<int>(r.coeffs.size()) != n) throw std::invalid_argument("relative_error: curve length differs from L");
    for (int l = 0; l < n; ++l) mean.coeffs[l] += r.coeffs[l];
  }
  for (double& c : mean.coeffs) c /= static_cast<double>(runs.size());
  const double num = l2_error(mesh, mean, analytic, order, refine);
  const double den = l2_error(mesh, FeFunction{Vec1(n, 0.0)}, analytic, order, refine);
  if (!(den > 0.0)) throw std::domain_error("relative_error: analytic reference has zero norm");
  return (num * num) / (den * den);
}

struct ErrorReport {
  double relative_error = std::nan("");
  std::vector<FeFunction> runs;
  FeFunction mean;
  Vec1 nodes;     // all L+2 mesh nodes
  Vec1 analytic;  // u(0, node)
  std::vector<double> wall_seconds;
  std::vector<SolveReport> reports;
  bool diverged = false;
  std::string failure;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return out;
}

inline void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace detail

/// Writes u0_curves.csv, loss_history.csv and summary.csv (deterministic
/// given config and seed) plus timing.csv (wall-clock only).
inline void emit_csv(const ExperimentConfig& cfg, const ErrorReport& rep, const std::filesystem::path& dir) {
  using detail::fmt;
  std::filesystem::create_directories(dir);
  const int nruns = static_cast<int>(rep.runs.size());
  {
    const auto path = dir / "u0_curves.csv";
    auto out = detail::open_csv(path);
    out << "x,analytic";
    for (int i = 0; i < nruns; ++i) out << ",run_" << (i + 1);
    out << ",mean\n";
    for (std::size_t node = 0; node < rep.nodes.size(); ++node) {
      const bool boundary = node == 0 || node + 1 == rep.nodes.size();
      out << fmt(rep.nodes[node]) << ',' << fmt(rep.analytic[node]);
      for (int i = 0; i < nruns; ++i) out << ',' << fmt(boundary ? 0.0 : rep.runs[i].coeffs[node - 1]);
      out << ',' << fmt(boundary || nruns == 0 ? 0.0 : rep.mean.coeffs[node - 1]) << '\n';
    }
    detail::finish(out, path);
  }
  {
    const auto path = dir / "loss_history.csv";
    auto out = detail::open_csv(path);
    const bool staged = cfg.algorithm == Algorithm::dbsde1;
    const int steps = TimeGrid::uniform(cfg.T, cfg.dt).steps();
    out << "run,iteration" << (staged ? ",stage" : "") << ",loss";
    if (!staged) {
      for (int j = 1; j <= steps; ++j) out << ",L_" << j;
    }
    out << '\n';
    for (std::size_t r = 0; r < rep.reports.size(); ++r) {
      const SolveReport& s = rep.reports[r];
      for (std::size_t it = 0; it < s.loss_history.size(); ++it) {
        out << (r + 1) << ',' << it;
        if (staged) out << ',' << s.loss_stage[it];
        out << ',' << fmt(s.loss_history[it]);
        if (!staged) {
          for (double l : s.step_loss_history[it]) out << ',' << fmt(l);
        }
        out << '\n';
      }
    }
    detail::finish(out, path);
  }
  {
    const auto path = dir / "summary.csv";
    auto out = detail::open_csv(path);
    out << "key,value\n";
    out << "example," << cfg.example << '\n';
    out << "algorithm," << to_string(cfg.algorithm) << '\n';
    out << "L," << cfg.L << '\n';
    out << "dt," << fmt(cfg.dt) << '\n';
    out << "T," << fmt(cfg.T) << '\n';
    out << "batch," << cfg.batch << '\n';
    out << "iterations," << cfg.iterations << '\n';
    out << "first_stage_iterations," << cfg.first_stage_iterations << '\n';
    out << "runs," << cfg.runs << '\n';
    out << "seed," << cfg.seed << '\n';
    out << "width," << cfg.width << '\n';
    out << "lr," << fmt(cfg.lr) << '\n';
    out << "propagator," << (cfg.propagator == Propagator::semi_implicit ? "semi-implicit" : "explicit") << '\n';
    out << "completed_runs," << nruns << '\n';
    out << "status," << (rep.diverged ? "diverged" : "ok") << '\n';
    out << "relative_error," << fmt(rep.relative_error) << '\n';
    detail::finish(out, path);
  }
  {
    const auto path = dir / "timing.csv";
    auto out = detail::open_csv(path);
    out << "run,wall_seconds\n";
    for (std::size_t r = 0; r < rep.wall_seconds.size(); ++r) out << (r + 1) << ',' << fmt(rep.wall_seconds[r]) << '\n';
    detail::finish(out, path);
  }
}

/// Runs `runs` independent solves (run i seeded with run_seed(seed, i)) and
/// scores the mean u(0, .) curve against the closed form. A divergence stops
/// the experiment; the report then carries the completed runs only.
inline ErrorReport run_experiment(const ExperimentConfig& cfg) {
  validate(cfg);
  const ExampleSetup setup = make_example(cfg.example, cfg.T);
  auto sys = std::make_shared<const FemSystem>(Mesh1D::uniform(cfg.L));
  const FbsdeProblem problem = build_fd_fbsde(sys, setup.coefficients);
  const Mesh1D& mesh = sys->mesh();
  const AnalyticSolution sol = setup.solution;
  auto u0 = [&sol](double x) { return sol.u(0.0, x, 0.0); };

  ErrorReport rep;
  for (int i = 0; i <= mesh.internal_nodes() + 1; ++i) rep.nodes.push_back(mesh.node(i));
  rep.analytic = analytic_reference_curve(sol, 0.0, 0.0, rep.nodes);
  rep.mean.coeffs.assign(mesh.internal_nodes(), 0.0);
  for (int i = 0; i < cfg.runs; ++i) {
    SolverConfig sc = solver_config(cfg);
    sc.seed = run_seed(cfg.seed, i);
    try {
      SolveReport r = solve(problem, sc, sys.get());
      rep.runs.push_back(FeFunction{r.y0});
      rep.wall_seconds.push_back(r.wall_seconds);
      rep.reports.push_back(std::move(r));
    } catch (const DivergenceError& e) {
      rep.diverged = true;
      rep.failure = "run " + std::to_string(i + 1) + ": " + e.what();
      break;
    }
  }
  if (!rep.runs.empty()) {
    for (const auto& r : rep.runs) {
      for (int l = 0; l < mesh.internal_nodes(); ++l) rep.mean.coeffs[l] += r.coeffs[l];
    }
    for (double& c : rep.mean.coeffs) c /= static_cast<double>(rep.runs.size());
    rep.relative_error = relative_error(mesh, rep.runs, u0);
  }
  if (!cfg.out_dir.empty()) emit_csv(cfg, rep, cfg.out_dir);
  return rep;
}

// ---------------------------------------------------------------------------
// Convergence studies
// ---------------------------------------------------------------------------

struct ConvergenceLevel {
  int L = 0;
  double dt = 0.0;
};

struct ConvergenceTable {
  std::string kind;
  std::vector<ConvergenceLevel> levels;
  std::vector<double> h;
  std::vector<double> error;
  /// rate[i] = log(error[i]/error[i+1]) / log(h[i]/h[i+1]).
  std::vector<double> rate;
};

inline std::vector<ConvergenceLevel> default_levels(const std::string& kind) {
  if (kind == "projection") return {{7, 0.0}, {15, 0.0}, {31, 0.0}, {63, 0.0}};
  if (kind == "heat-deterministic") return {{8, 1e-4}, {16, 1e-4}, {32, 1e-4}};
  if (kind == "forward-pathwise") return {{16, 4e-3}, {32, 1e-3}, {64, 2.5e-4}};
  throw std::invalid_argument("unknown convergence study '" + kind + "'");
}

namespace detail {

inline void fill_rates(ConvergenceTable& t) {
  for (std::size_t i = 0; i + 1 < t.error.size(); ++i) {
    t.rate.push_back(std::log(t.error[i] / t.error[i + 1]) / std::log(t.h[i] / t.h[i + 1]));
  }
}

}  // namespace detail

/// projection: ||sin(pi x) - Pi_h sin(pi x)||.
/// heat-deterministic: semi-implicit FEM heat solution at T against
///   e^{-delta pi^2 T} sin(pi x).
/// forward-pathwise: Example 1 forward component at T against its pathwise
///   closed form, RMS over `paths` Brownian paths that are shared by all
///   levels (each level coarsens the finest increments).
inline ConvergenceTable convergence_study(const std::string& kind, std::vector<ConvergenceLevel> levels = {},
                                          std::uint64_t seed = 2024, int paths = 8, double horizon = 0.5) {
  if (levels.empty()) levels = default_levels(kind);
  if (levels.size() < 3) throw std::invalid_argument("convergence_study: need at least three levels");
  constexpr double pi = std::numbers::pi;
  ConvergenceTable t;
  t.kind = kind;
  t.levels = levels;
  auto sine = [](double x) { return std::sin(pi * x); };
  if (kind == "projection") {
    for (const auto& lv : levels) {
      const FemSystem sys(Mesh1D::uniform(lv.L));
      t.h.push_back(sys.mesh().max_h());
      t.error.push_back(l2_error(sys.mesh(), l2_project(sys, sine), sine, 6, 4));
    }
  } else if (kind == "heat-deterministic") {
    const double delta = 0.2;
    for (const auto& lv : levels) {
      auto sys = std::make_shared<const FemSystem>(Mesh1D::uniform(lv.L));
      const FbsdeProblem p = build_fd_fbsde(sys, make_example("heat-deterministic", horizon).coefficients);
      const TimeGrid grid = TimeGrid::uniform(horizon, lv.dt);
      const ForwardPathBatch x = euler_forward_semi_implicit(*sys, p, grid, make_brownian(seed, 1, grid));
      const auto xt = x.state(0, grid.steps());
      const double decay = std::exp(-delta * pi * pi * horizon);
      t.h.push_back(sys->mesh().max_h());
      t.error.push_back(l2_error(sys->mesh(), FeFunction{Vec1(xt.begin(), xt.end())},
                                 [&](double s) { return decay * sine(s); }, 6, 4));
    }
  } else if (kind == "forward-pathwise") {
    double finest = levels.front().dt;
    for (const auto& lv : levels) finest = std::min(finest, lv.dt);
    const TimeGrid fine_grid = TimeGrid::uniform(horizon, finest);
    const BrownianBatch fine = make_brownian(seed, paths, fine_grid);
    const ExampleSetup ex = make_example("ex1", horizon);
    for (const auto& lv : levels) {
      const double ratio = lv.dt / finest;
      const int factor = static_cast<int>(std::lround(ratio));
      if (std::abs(ratio - factor) > 1e-9 * ratio) {
        throw std::invalid_argument("convergence_study: time steps must be integer multiples of the finest");
      }
      auto sys = std::make_shared<const FemSystem>(Mesh1D::uniform(lv.L));
      const FbsdeProblem p = build_fd_fbsde(sys, ex.coefficients);
      const TimeGrid grid = TimeGrid::uniform(horizon, lv.dt);
      const BrownianBatch bm = coarsen(fine, factor);
      const ForwardPathBatch x = euler_forward_semi_implicit(*sys, p, grid, bm);
      double sq = 0.0;
      for (int b = 0; b < paths; ++b) {
        const auto xt = x.state(b, grid.steps());
        const double wt = bm.value(b, grid.steps())[0];
        const double e = l2_error(sys->mesh(), FeFunction{Vec1(xt.begin(), xt.end())},
                                  [&](double s) { return ex.solution.rho(horizon, s, wt); }, 6, 4);
        sq += e * e;
      }
      t.h.push_back(sys->mesh().max_h());
      t.error.push_back(std::sqrt(sq / paths));
    }
  } else {
    throw std::invalid_argument("unknown convergence study '" + kind + "'");
  }
  detail::fill_rates(t);
  return t;
}

/// rates.csv: level, L, dt, h, error, rate (rate empty on the first row).
inline void emit_rates_csv(const ConvergenceTable& t, const std::filesystem::path& path) {
  using detail::fmt;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto out = detail::open_csv(path);
  out << "kind,level,L,dt,h,error,rate\n";
  for (std::size_t i = 0; i < t.error.size(); ++i) {
    out << t.kind << ',' << i << ',' << t.levels[i].L << ',' << fmt(t.levels[i].dt) << ',' << fmt(t.h[i]) << ','
        << fmt(t.error[i]) << ',' << (i > 0 ? fmt(t.rate[i - 1]) : std::string()) << '\n';
  }
  detail::finish(out, path);
}

// ---------------------------------------------------------------------------
// Coupling diagnostic
// ---------------------------------------------------------------------------

struct LipschitzConstants {
  double l1_F = 0.0;
  double l2_F = 0.0;
  double l1_f = 0.0;
  double l2_f = 0.0;
  double l1_G = 0.0;
  double l2_G = 0.0;
  double l_g = 0.0;
};

/// max{L1G^2 T^2 + Lg^2, L1G^2 T} * T * max{L2F^2, L2F^2 T + L2f^2}.
inline double coupling_diagnostic(const LipschitzConstants& c, double horizon) {
  const double vals[] = {c.l1_F, c.l2_F, c.l1_f, c.l2_f, c.l1_G, c.l2_G, c.l_g, horizon};
  for (double v : vals) {
    if (!(v >= 0.0)) throw std::invalid_argument("coupling_diagnostic: constants must be nonnegative");
  }
  const double g2 = c.l1_G * c.l1_G;
  const double f2 = c.l2_F * c.l2_F;
  return std::max(g2 * horizon * horizon + c.l_g * c.l_g, g2 * horizon) * horizon *
         std::max(f2, f2 * horizon + c.l2_f * c.l2_f);
}

inline void print_coupling_diagnostic(std::ostream& os, double factor) {
  os << "coupling factor: " << detail::fmt(factor) << '\n'
     << "note: the well-posedness condition compares C e^{C T} times this factor with 1, and the constant C is "
        "not known; this number alone does not establish existence or uniqueness.\n";
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

struct GradientCheck {
  std::string name;
  double relative_error = 0.0;
};

namespace detail {

inline double relative_gap(const Vec1& a, const Vec1& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
  return std::sqrt(diff) / scale;
}

/// Central differences of a scalar function of `theta`.
inline Vec1 numeric_gradient(const std::function<double(const Vec1&)>& f, Vec1 theta, double step) {
  Vec1 g(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double keep = theta[i];
    const double h = step * std::max(1.0, std::abs(keep));
    theta[i] = keep + h;
    const double up = f(theta);
    theta[i] = keep - h;
    const double down = f(theta);
    theta[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline Vec1 random_vector(SplitMix64& rng, std::size_t n, double lo, double hi) {
  Vec1 v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline Vec1 flatten(const StepNetworks& n) {
  Vec1 out(n.y0.begin(), n.y0.end());
  out.insert(out.end(), n.z0.begin(), n.z0.end());
  for (std::size_t j = 1; j < n.y_nets.size(); ++j) {
    out.insert(out.end(), n.y_nets[j].data().begin(), n.y_nets[j].data().end());
    out.insert(out.end(), n.z_nets[j].data().begin(), n.z_nets[j].data().end());
  }
  return out;
}

inline void unflatten(const Vec1& v, StepNetworks& n) {
  std::size_t pos = 0;
  auto take = [&](std::span<double> dst) {
    std::copy(v.begin() + static_cast<std::ptrdiff_t>(pos), v.begin() + static_cast<std::ptrdiff_t>(pos + dst.size()),
              dst.begin());
    pos += dst.size();
  };
  take(n.y0);
  take(n.z0);
  for (std::size_t j = 1; j < n.y_nets.size(); ++j) {
    take(n.y_nets[j].data());
    take(n.z_nets[j].data());
  }
}

}  // namespace detail

/// Reverse-mode gradients against central differences: `configs` random
/// MLPs, the FEM coefficient adjoints of both examples, and the full
/// dbsde2/dbsde3 losses on small problems.
inline std::vector<GradientCheck> run_gradient_checks(std::uint64_t seed = 7, int configs = 20) {
  std::vector<GradientCheck> out;
  SplitMix64 rng(seed);
  for (int c = 0; c < configs; ++c) {
    const int in = 1 + static_cast<int>(rng.next() % 5);
    const int hidden = 1 + static_cast<int>(rng.next() % 3);
    const int width = 2 + static_cast<int>(rng.next() % 6);
    const int outd = 1 + static_cast<int>(rng.next() % 4);
    const int rows = 1 + static_cast<int>(rng.next() % 5);
    std::vector<int> sizes{in};
    for (int h = 0; h < hidden; ++h) sizes.push_back(width);
    sizes.push_back(outd);
    MlpParams p = init_params(rng.next(), sizes);
    for (int n = 0; n < p.layers(); ++n) {
      for (Eigen::Index i = 0; i < p.bias(n).size(); ++i) p.bias(n)[i] = rng.uniform(-0.5, 0.5);
    }
    RowMatrix x(rows, in), w(rows, outd);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1.0, 1.0);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-1.0, 1.0);
    Tape tape;
    mlp_forward(p, x, &tape);
    MlpGradients g = mlp_backward(p, tape, w);
    auto objective = [&](const MlpParams& q, const RowMatrix& xx) { return (mlp_forward(q, xx).array() * w.array()).sum(); };
    const Vec1 theta(p.data().begin(), p.data().end());
    const Vec1 num = detail::numeric_gradient(
        [&](const Vec1& th) {
          MlpParams q = p;
          std::copy(th.begin(), th.end(), q.data().begin());
          return objective(q, x);
        },
        theta, 1e-6);
    const Vec1 xin(x.data(), x.data() + x.size());
    const Vec1 num_x = detail::numeric_gradient(
        [&](const Vec1& v) {
          RowMatrix xx = Eigen::Map<const RowMatrix>(v.data(), rows, in);
          return objective(p, xx);
        },
        xin, 1e-6);
    const Vec1 ana(g.params.data().begin(), g.params.data().end());
    const Vec1 ana_x(g.input.data(), g.input.data() + g.input.size());
    out.push_back({"mlp config " + std::to_string(c + 1),
                   std::max(detail::relative_gap(ana, num), detail::relative_gap(ana_x, num_x))});
  }

  // Coefficient adjoints of the FEM reduction.
  for (const std::string name : {"ex1", "ex2"}) {
    const int L = 6;
    auto sys = std::make_shared<const FemSystem>(Mesh1D::uniform(L));
    const FbsdeProblem p = build_fd_fbsde(sys, make_example(name, 0.5).coefficients);
    const Vec1 x = [&] {
      Vec1 v = p.initial_state;
      for (double& e : v) e += rng.uniform(-0.1, 0.1);
      return v;
    }();
    const Vec1 y = detail::random_vector(rng, L, 0.2, 0.8);
    const Vec1 z = detail::random_vector(rng, L, -0.3, 0.3);
    const Vec1 w{rng.uniform(-0.5, 0.5)};
    const Vec1 cot = detail::random_vector(rng, L, -1.0, 1.0);
    const Vec1 cot_sigma = detail::random_vector(rng, p.z_size(), -1.0, 1.0);
    const double t = 0.2;
    struct Case {
      const char* label;
      const PointMap* map;
      const PointVjp* vjp;
      const Vec1* cot;
    };
    const Case cases[] = {{"drift", &p.drift, &p.drift_vjp, &cot},
                          {"diffusion", &p.diffusion, &p.diffusion_vjp, &cot_sigma},
                          {"driver", &p.driver, &p.driver_vjp, &cot}};
    for (const auto& cs : cases) {
      Vec1 dx(L, 0.0), dy(L, 0.0), dz(p.z_size(), 0.0);
      (*cs.vjp)({t, x, y, z, w}, *cs.cot, {dx, dy, dz});
      Vec1 ana = dx;
      ana.insert(ana.end(), dy.begin(), dy.end());
      ana.insert(ana.end(), dz.begin(), dz.end());
      Vec1 theta = x;
      theta.insert(theta.end(), y.begin(), y.end());
      theta.insert(theta.end(), z.begin(), z.end());
      const Vec1 num = detail::numeric_gradient(
          [&](const Vec1& th) {
            const std::span<const double> all(th);
            Vec1 val(cs.cot->size());
            (*cs.map)({t, all.subspan(0, L), all.subspan(L, L), all.subspan(2 * L), w}, val);
            double s = 0.0;
            for (std::size_t i = 0; i < val.size(); ++i) s += val[i] * (*cs.cot)[i];
            return s;
          },
          theta, 1e-6);
      out.push_back({name + " " + cs.label, detail::relative_gap(ana, num)});
    }
    Vec1 dx(L, 0.0);
    p.terminal_vjp(x, cot, dx);
    const Vec1 num = detail::numeric_gradient(
        [&](const Vec1& th) {
          Vec1 val(L);
          p.terminal(th, val);
          double s = 0.0;
          for (int i = 0; i < L; ++i) s += val[i] * cot[i];
          return s;
        },
        x, 1e-6);
    out.push_back({name + " terminal", detail::relative_gap(dx, num)});
  }

  // Whole-loss gradients of the global solvers.
  for (const Algorithm algo : {Algorithm::dbsde2, Algorithm::dbsde3}) {
    for (const Propagator prop : {Propagator::explicit_euler, Propagator::semi_implicit}) {
      const int L = 3;
      auto sys = std::make_shared<const FemSystem>(Mesh1D::uniform(L));
      const FbsdeProblem p = build_fd_fbsde(sys, make_example("ex2", 0.2).coefficients);
      SolverConfig cfg;
      cfg.algorithm = algo;
      cfg.grid = TimeGrid::uniform(0.2, 0.05);
      cfg.batch = 3;
      cfg.width = 4;
      cfg.propagator = prop;
      cfg.append_brownian_input = prop == Propagator::semi_implicit;
      cfg.seed = rng.next();
      StepNetworks nets = initial_networks(p, cfg);
      for (double& v : nets.z0) v = rng.uniform(-0.2, 0.2);
      const BrownianBatch bm = make_brownian(rng.next(), cfg.batch, cfg.grid, 1);
      StepNetworks grads;
      global_loss_gradient(p, cfg, nets, bm, grads, sys.get());
      const Vec1 num = detail::numeric_gradient(
          [&](const Vec1& th) {
            StepNetworks q = nets;
            detail::unflatten(th, q);
            StepNetworks unused;
            return global_loss_gradient(p, cfg, q, bm, unused, sys.get());
          },
          detail::flatten(nets), 1e-6);
      out.push_back({std::string(to_string(algo)) + " loss " +
                         (prop == Propagator::semi_implicit ? "semi-implicit" : "explicit"),
                     detail::relative_gap(detail::flatten(grads), num)});
    }
  }
  return out;
}

}  // namespace fbspde
