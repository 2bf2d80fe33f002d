#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fbspde/fem.hpp"
#include "fbspde/nn.hpp"
#include "fbspde/random.hpp"
#include "fbspde/sde.hpp"

namespace fbspde {

enum class Algorithm { dbsde1, dbsde2, dbsde3 };
enum class Propagator { explicit_euler, semi_implicit };
/// Starting value of the trainable Y_0 vector in the global-loss solvers.
enum class InitialValueGuess { terminal, zero };

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::dbsde1: return "dbsde1";
    case Algorithm::dbsde2: return "dbsde2";
    case Algorithm::dbsde3: return "dbsde3";
  }
  return "?";
}

inline Algorithm parse_algorithm(const std::string& s) {
  if (s == "dbsde1") return Algorithm::dbsde1;
  if (s == "dbsde2") return Algorithm::dbsde2;
  if (s == "dbsde3") return Algorithm::dbsde3;
  throw std::invalid_argument("unknown algorithm '" + s + "'");
}

struct SolverConfig {
  Algorithm algorithm = Algorithm::dbsde1;
  TimeGrid grid = TimeGrid::uniform(0.5, 0.05);
  int batch = 512;
  /// dbsde1: iterations of every warm-started stage; dbsde2/3: total iterations.
  int iterations = 2000;
  /// dbsde1: iterations of the first (terminal) stage; negative means `iterations`.
  int first_stage_iterations = -1;
  AdamHyper adam;
  /// Piecewise-constant learning rate: (first iteration, lr) pairs, ascending.
  std::vector<std::pair<int, double>> lr_schedule;
  /// dbsde1: schedule of the warm-started stages; empty means lr_schedule.
  std::vector<std::pair<int, double>> warm_lr_schedule;
  /// Hidden width; non-positive means input dimension + 10.
  int width = -1;
  int hidden_layers = 2;
  std::uint64_t seed = 0;
  Propagator propagator = Propagator::semi_implicit;
  /// Feed W_{t_j} to the networks next to X_{t_j}.
  bool append_brownian_input = false;
  /// dbsde1: initialize stage j networks from stage j+1.
  bool warm_start = true;
  /// dbsde1: training paths = pool_batches * batch, simulated once per solve.
  int pool_batches = 32;
  /// dbsde1: path pool memory above which states are checkpointed (bytes).
  std::size_t pool_memory_limit = std::size_t{1} << 30;
  InitialValueGuess y0_init = InitialValueGuess::terminal;
  /// Loss above divergence_factor * initial loss aborts training.
  double divergence_factor = 1e6;
  int log_every = 0;

  double lr_at(int iteration, bool warm_stage = false) const {
    const auto& schedule = warm_stage && !warm_lr_schedule.empty() ? warm_lr_schedule : lr_schedule;
    double lr = adam.lr;
    for (const auto& [from, value] : schedule) {
      if (iteration >= from) lr = value;
    }
    return lr;
  }
};

/// Per-time-step network pairs. dbsde1 uses indices 0..J-1; dbsde2/3 use
/// 1..J-1 together with the free vectors y0, z0.
struct StepNetworks {
  std::vector<MlpParams> y_nets;
  std::vector<MlpParams> z_nets;
  Vec1 y0;
  Vec1 z0;
};

struct SolveReport {
  Algorithm algorithm = Algorithm::dbsde1;
  Vec1 y0;
  std::vector<double> loss_history;
  /// dbsde1: stage index of each loss_history entry.
  std::vector<int> loss_stage;
  /// dbsde2/3: per-iteration local losses L_1..L_J.
  std::vector<Vec1> step_loss_history;
  /// dbsde1: last loss of stage j at index j; dbsde2/3: last L_1..L_J.
  Vec1 final_step_losses;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  std::string config_echo;
  StepNetworks networks;
};

/// Monte Carlo estimate of each local loss with its standard error.
struct StepLosses {
  Vec1 mean;
  Vec1 std_error;
};

inline std::string describe(const SolverConfig& cfg) {
  std::ostringstream os;
  os << "algorithm=" << to_string(cfg.algorithm) << " steps=" << cfg.grid.steps() << " T=" << cfg.grid.horizon()
     << " batch=" << cfg.batch << " iterations=" << cfg.iterations
     << " first_stage_iterations=" << cfg.first_stage_iterations << " lr=" << cfg.adam.lr
     << " width=" << cfg.width << " hidden_layers=" << cfg.hidden_layers << " seed=" << cfg.seed
     << " propagator=" << (cfg.propagator == Propagator::semi_implicit ? "semi-implicit" : "explicit")
     << " pool_batches=" << cfg.pool_batches;
  return os.str();
}

namespace detail {

inline std::span<double> row(RowMatrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}
inline std::span<const double> row(const RowMatrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

inline int input_dim(const FbsdeProblem& p, const SolverConfig& cfg) {
  return p.dim + (cfg.append_brownian_input ? p.noise_dim : 0);
}

inline std::vector<int> net_sizes(int in, int out, const SolverConfig& cfg) {
  const int width = cfg.width > 0 ? cfg.width : in + 10;
  std::vector<int> sizes{in};
  for (int h = 0; h < cfg.hidden_layers; ++h) sizes.push_back(width);
  sizes.push_back(out);
  return sizes;
}

inline StepNetworks init_networks(const FbsdeProblem& p, const SolverConfig& cfg) {
  const int J = cfg.grid.steps();
  const int in = input_dim(p, cfg);
  StepNetworks nets;
  for (int j = 0; j < J; ++j) {
    nets.y_nets.push_back(init_params(derive_seed(cfg.seed, 1000 + 2 * static_cast<std::uint64_t>(j)),
                                      net_sizes(in, p.dim, cfg)));
    nets.z_nets.push_back(init_params(derive_seed(cfg.seed, 1001 + 2 * static_cast<std::uint64_t>(j)),
                                      net_sizes(in, p.z_size(), cfg)));
  }
  if (cfg.algorithm != Algorithm::dbsde1) {
    nets.z0.assign(p.z_size(), 0.0);
    nets.y0.assign(p.dim, 0.0);
    if (cfg.y0_init == InitialValueGuess::terminal) p.terminal(p.initial_state, nets.y0);
  }
  return nets;
}

/// Network input rows [X_b, W_b] for the given states.
inline void build_input(const RowMatrix& x, const BrownianBatch* bm, int first_path, int j, int noise_dim,
                        bool append_w, RowMatrix& out) {
  if (!append_w) {
    out = x;
    return;
  }
  out.resize(x.rows(), x.cols() + noise_dim);
  out.leftCols(x.cols()) = x;
  for (Eigen::Index b = 0; b < x.rows(); ++b) {
    const auto w = bm->value(first_path + static_cast<int>(b), j);
    for (int c = 0; c < noise_dim; ++c) out(b, x.cols() + c) = w[c];
  }
}

inline void check_problem(const FbsdeProblem& p) {
  if (p.dim < 1 || p.noise_dim < 1) throw std::invalid_argument("solver: problem dimensions must be positive");
  if (!p.drift || !p.diffusion || !p.driver || !p.terminal) throw std::invalid_argument("solver: missing callbacks");
  if (static_cast<int>(p.initial_state.size()) != p.dim) throw std::invalid_argument("solver: bad initial state");
}

inline void check_config(const SolverConfig& cfg) {
  if (cfg.batch < 1) throw std::invalid_argument("solver: batch must be >= 1");
  if (cfg.iterations < 0) throw std::invalid_argument("solver: iterations must be >= 0");
  if (cfg.pool_batches < 1) throw std::invalid_argument("solver: pool_batches must be >= 1");
}

class Divergence {
 public:
  explicit Divergence(double factor) : factor_(factor) {}
  void check(double loss, int iteration) {
    if (!std::isfinite(loss)) {
      throw DivergenceError("training loss is not finite at iteration " + std::to_string(iteration), iteration);
    }
    if (!initial_) {
      initial_ = loss;
      return;
    }
    if (loss > factor_ * std::max(*initial_, 1e-300)) {
      throw DivergenceError("training loss exceeded the divergence guard at iteration " + std::to_string(iteration),
                            iteration);
    }
  }

 private:
  double factor_;
  std::optional<double> initial_;
};

// ---------------------------------------------------------------------------
// Backward dynamic programming (Deep BSDE-1).
// ---------------------------------------------------------------------------

/// Training paths for the backward stages. States are checkpointed every
/// `interval` steps and re-simulated block by block when memory is tight.
class PathPool {
 public:
  PathPool(const FbsdeProblem& p, const FemSystem* sys, const SolverConfig& cfg)
      : problem_(&p), system_(sys), cfg_(&cfg), size_(cfg.batch * cfg.pool_batches), steps_(cfg.grid.steps()) {
    bm_ = make_brownian(derive_seed(cfg.seed, 7), size_, cfg.grid, p.noise_dim);
    const double bytes = static_cast<double>(size_) * (steps_ + 1) * p.dim * sizeof(double);
    interval_ = bytes <= static_cast<double>(cfg.pool_memory_limit)
                    ? steps_
                    : std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(steps_)))));
    RowMatrix x0(size_, p.dim);
    for (int b = 0; b < size_; ++b) {
      std::copy(p.initial_state.begin(), p.initial_state.end(), row(x0, b).begin());
    }
    checkpoints_.push_back(x0);
    // Forward sweep storing checkpoints only.
    RowMatrix cur = x0;
    for (int start = 0; start < steps_; start += interval_) {
      const int stop = std::min(start + interval_, steps_);
      simulate(start, stop, cur, nullptr);
      if (stop < steps_) checkpoints_.push_back(cur);
    }
  }

  int size() const { return size_; }
  const BrownianBatch& brownian() const { return bm_; }

  /// States X_j for all pool paths.
  const RowMatrix& states(int j) {
    const int block = std::min(j / interval_, static_cast<int>(checkpoints_.size()) - 1);
    if (block != block_) materialize(block);
    return block_states_[static_cast<std::size_t>(j - block * interval_)];
  }

  /// States X_j and X_{j+1}.
  std::pair<const RowMatrix*, const RowMatrix*> pair(int j) {
    int block = j / interval_;
    if (block != block_) materialize(block);
    return {&block_states_[static_cast<std::size_t>(j - block * interval_)],
            &block_states_[static_cast<std::size_t>(j + 1 - block * interval_)]};
  }

 private:
  void simulate(int start, int stop, RowMatrix& cur, std::vector<RowMatrix>* keep) {
    ForwardStepper stepper(*problem_, system_, cfg_->propagator == Propagator::semi_implicit);
    const int n = problem_->dim;
    Vec1 zero_y(n, 0.0), zero_z(problem_->z_size(), 0.0), next(n);
    if (keep) keep->push_back(cur);
    for (int j = start; j < stop; ++j) {
      const double t = cfg_->grid.time(j), dt = cfg_->grid.dt(j);
      for (int b = 0; b < size_; ++b) {
        auto x = row(cur, b);
        stepper.step(t, dt, x, zero_y, zero_z, zero_y, bm_.value(b, j), bm_.increment(b, j), next);
        check_finite_state(next, j + 1);
        std::copy(next.begin(), next.end(), x.begin());
      }
      if (keep) keep->push_back(cur);
    }
  }

  void materialize(int block) {
    block_states_.clear();
    RowMatrix cur = checkpoints_[static_cast<std::size_t>(block)];
    const int start = block * interval_;
    simulate(start, std::min(start + interval_, steps_), cur, &block_states_);
    block_ = block;
  }

  const FbsdeProblem* problem_;
  const FemSystem* system_;
  const SolverConfig* cfg_;
  int size_;
  int steps_;
  int interval_ = 1;
  BrownianBatch bm_;
  std::vector<RowMatrix> checkpoints_;
  std::vector<RowMatrix> block_states_;
  int block_ = -1;
};

/// Loss E|target - (Y - b(X, Y, Z) dt + Z dW)|^2 of one backward stage on the
/// rows [first, first + rows) of the given states. With `grads` the adjoints
/// of the network outputs are written to y_bar, z_bar.
inline double stage_loss(const FbsdeProblem& p, const SolverConfig& cfg, int j, const RowMatrix& x,
                         const RowMatrix& target, const BrownianBatch& bm, int first, const RowMatrix& y,
                         const RowMatrix& z, RowMatrix* y_bar, RowMatrix* z_bar, Vec1* per_sample = nullptr) {
  const int n = p.dim;
  const int k = p.noise_dim;
  const int rows = static_cast<int>(y.rows());
  const double t = cfg.grid.time(j), dt = cfg.grid.dt(j);
  Vec1 bval(n), pred(n), cot(n);
  double total = 0.0;
  if (y_bar) {
    y_bar->setZero(rows, n);
    z_bar->setZero(rows, p.z_size());
  }
  for (int b = 0; b < rows; ++b) {
    const int path = first + b;
    const PointInputs in{t, row(x, path), row(y, b), row(z, b), bm.value(path, j)};
    p.driver(in, bval);
    const auto dw = bm.increment(path, j);
    propagate_y(in.y, in.z, bval, dt, dw, pred);
    const auto tgt = row(target, path);
    double sq = 0.0;
    for (int l = 0; l < n; ++l) {
      const double r = pred[l] - tgt[l];
      sq += r * r;
      cot[l] = 2.0 * r / rows;
    }
    total += sq;
    if (per_sample) (*per_sample)[b] = sq;
    if (y_bar) {
      auto yb = row(*y_bar, b);
      auto zb = row(*z_bar, b);
      for (int l = 0; l < n; ++l) {
        yb[l] += cot[l];
        for (int c = 0; c < k; ++c) zb[c * n + l] += cot[l] * dw[c];
      }
      for (int l = 0; l < n; ++l) cot[l] *= -dt;
      p.driver_vjp(in, cot, {{}, yb, zb});
    }
  }
  return total / rows;
}

inline RowMatrix stage_targets(const FbsdeProblem& p, const SolverConfig& cfg, const StepNetworks& nets, int j,
                               const RowMatrix& x_next, const BrownianBatch& bm, int first) {
  const int J = cfg.grid.steps();
  RowMatrix target(x_next.rows(), p.dim);
  if (j + 1 == J) {
    for (Eigen::Index b = 0; b < x_next.rows(); ++b) p.terminal(row(x_next, b), row(target, b));
    return target;
  }
  RowMatrix input;
  build_input(x_next, &bm, first, j + 1, p.noise_dim, cfg.append_brownian_input, input);
  return mlp_forward(nets.y_nets[static_cast<std::size_t>(j + 1)], input);
}

// ---------------------------------------------------------------------------
// Global-loss solvers (Deep BSDE-2 and Deep BSDE-3).
// ---------------------------------------------------------------------------

/// One forward simulation of the coupled scheme with everything the reverse
/// sweep needs.
struct CoupledTrace {
  std::vector<RowMatrix> x;        // X_j, j = 0..J
  std::vector<RowMatrix> y;        // propagated Y_j, j = 0..J
  std::vector<RowMatrix> y_net;    // network (or Y_0) values at j = 0..J-1
  std::vector<RowMatrix> z_net;
  std::vector<Tape> y_tape;        // j = 1..J-1
  std::vector<Tape> z_tape;
  RowMatrix terminal;              // g(X_J)
  Vec1 losses;                     // L_1..L_J
  std::vector<Vec1> per_sample;    // per-sample squared residuals, j = 1..J
};

inline void coupled_forward(const FbsdeProblem& p, const FemSystem* sys, const SolverConfig& cfg,
                            const StepNetworks& nets, const BrownianBatch& bm, CoupledTrace& tr, bool taped) {
  const int J = cfg.grid.steps();
  const int n = p.dim;
  const int B = bm.batch;
  const bool propagated_base = cfg.algorithm == Algorithm::dbsde2;
  ForwardStepper stepper(p, sys, cfg.propagator == Propagator::semi_implicit);
  tr.x.assign(J + 1, RowMatrix(B, n));
  tr.y.assign(J + 1, RowMatrix(B, n));
  tr.y_net.assign(J, RowMatrix());
  tr.z_net.assign(J, RowMatrix());
  tr.y_tape.assign(J, Tape());
  tr.z_tape.assign(J, Tape());
  tr.losses.assign(J, 0.0);
  tr.per_sample.assign(J, Vec1(B, 0.0));
  for (int b = 0; b < B; ++b) {
    std::copy(p.initial_state.begin(), p.initial_state.end(), row(tr.x[0], b).begin());
    std::copy(nets.y0.begin(), nets.y0.end(), row(tr.y[0], b).begin());
  }
  Vec1 bval(n);
  RowMatrix input;
  for (int j = 0; j < J; ++j) {
    const double t = cfg.grid.time(j), dt = cfg.grid.dt(j);
    if (j == 0) {
      tr.y_net[0] = tr.y[0];
      tr.z_net[0].resize(B, p.z_size());
      for (int b = 0; b < B; ++b) std::copy(nets.z0.begin(), nets.z0.end(), row(tr.z_net[0], b).begin());
    } else {
      build_input(tr.x[j], &bm, 0, j, p.noise_dim, cfg.append_brownian_input, input);
      tr.y_net[j] = mlp_forward(nets.y_nets[j], input, taped ? &tr.y_tape[j] : nullptr);
      tr.z_net[j] = mlp_forward(nets.z_nets[j], input, taped ? &tr.z_tape[j] : nullptr);
      // L_j compares the propagated Y_j with the network value.
      const double weight = propagated_base ? cfg.grid.dt(j - 1) : 1.0;
      double total = 0.0;
      for (int b = 0; b < B; ++b) {
        const auto yp = row(tr.y[j], b);
        const auto yn = row(tr.y_net[j], b);
        double sq = 0.0;
        for (int l = 0; l < n; ++l) sq += (yp[l] - yn[l]) * (yp[l] - yn[l]);
        tr.per_sample[j - 1][b] = weight * sq;
        total += sq;
      }
      tr.losses[j - 1] = weight * total / B;
    }
    for (int b = 0; b < B; ++b) {
      const auto x = row(tr.x[j], b);
      const auto yp = row(tr.y[j], b);
      const auto yn = row(tr.y_net[j], b);
      const auto zn = row(tr.z_net[j], b);
      const auto w = bm.value(b, j);
      const auto dw = bm.increment(b, j);
      stepper.step(t, dt, x, yn, zn, yp, w, dw, row(tr.x[j + 1], b));
      check_finite_state(row(tr.x[j + 1], b), j + 1);
      const auto base = propagated_base ? yp : yn;
      p.driver({t, x, base, zn, w}, bval);
      propagate_y(base, zn, bval, dt, dw, row(tr.y[j + 1], b));
    }
  }
  tr.terminal.resize(B, n);
  double total = 0.0;
  for (int b = 0; b < B; ++b) {
    p.terminal(row(tr.x[J], b), row(tr.terminal, b));
    const auto yj = row(tr.y[J], b);
    const auto g = row(tr.terminal, b);
    double sq = 0.0;
    for (int l = 0; l < n; ++l) sq += (yj[l] - g[l]) * (yj[l] - g[l]);
    tr.per_sample[J - 1][b] = sq;
    total += sq;
  }
  tr.losses[J - 1] = total / B;
}

/// Reverse sweep of the summed local losses; gradients are added into `grads`.
inline void coupled_backward(const FbsdeProblem& p, const FemSystem* sys, const SolverConfig& cfg,
                             const StepNetworks& nets, const BrownianBatch& bm, CoupledTrace& tr,
                             StepNetworks& grads) {
  if (!p.drift_vjp || !p.diffusion_vjp || !p.driver_vjp || !p.terminal_vjp) {
    throw std::invalid_argument("dbsde2/3 need the problem's adjoint callbacks");
  }
  const int J = cfg.grid.steps();
  const int n = p.dim;
  const int k = p.noise_dim;
  const int B = bm.batch;
  const bool propagated_base = cfg.algorithm == Algorithm::dbsde2;
  ForwardStepper stepper(p, sys, cfg.propagator == Propagator::semi_implicit);

  RowMatrix x_bar(B, n), y_bar(B, n);
  // L_J = mean |Y_J - g(X_J)|^2
  for (int b = 0; b < B; ++b) {
    auto yb = row(y_bar, b);
    auto xb = row(x_bar, b);
    std::fill(xb.begin(), xb.end(), 0.0);
    const auto yj = row(tr.y[J], b);
    const auto g = row(tr.terminal, b);
    Vec1 cot(n);
    for (int l = 0; l < n; ++l) {
      yb[l] = 2.0 * (yj[l] - g[l]) / B;
      cot[l] = -yb[l];
    }
    p.terminal_vjp(row(tr.x[J], b), cot, xb);
  }

  RowMatrix x_bar_prev(B, n), y_bar_prev(B, n), yn_bar(B, n), zn_bar(B, p.z_size()), input_grad;
  Vec1 cot(n);
  for (int j = J - 1; j >= 0; --j) {
    const double t = cfg.grid.time(j), dt = cfg.grid.dt(j);
    x_bar_prev.setZero();
    y_bar_prev.setZero();
    yn_bar.setZero();
    zn_bar.setZero();
    for (int b = 0; b < B; ++b) {
      const auto x = row(tr.x[j], b);
      const auto yp = row(tr.y[j], b);
      const auto yn = row(tr.y_net[j], b);
      const auto zn = row(tr.z_net[j], b);
      const auto w = bm.value(b, j);
      const auto dw = bm.increment(b, j);
      const auto ynext_bar = row(y_bar, b);
      auto xb = row(x_bar_prev, b);
      auto base_bar = propagated_base ? row(y_bar_prev, b) : row(yn_bar, b);
      auto znb = row(zn_bar, b);
      // Y_{j+1} = base - b(X_j, base, Z) dt + Z dW
      for (int l = 0; l < n; ++l) {
        base_bar[l] += ynext_bar[l];
        for (int c = 0; c < k; ++c) znb[c * n + l] += ynext_bar[l] * dw[c];
        cot[l] = -dt * ynext_bar[l];
      }
      const auto base = propagated_base ? yp : yn;
      p.driver_vjp({t, x, base, zn, w}, cot, {xb, base_bar, znb});
      // X_{j+1} = step(X_j; Y_net, Z_net for the drift, Y_j for the diffusion)
      stepper.step_vjp(t, dt, x, yn, zn, yp, w, dw, row(x_bar, b), xb, row(yn_bar, b), znb, row(y_bar_prev, b));
    }
    if (j >= 1) {
      const double weight = propagated_base ? cfg.grid.dt(j - 1) : 1.0;
      for (int b = 0; b < B; ++b) {
        const auto yp = row(tr.y[j], b);
        const auto yn = row(tr.y_net[j], b);
        auto ypb = row(y_bar_prev, b);
        auto ynb = row(yn_bar, b);
        for (int l = 0; l < n; ++l) {
          const double r = 2.0 * weight * (yp[l] - yn[l]) / B;
          ypb[l] += r;
          ynb[l] -= r;
        }
      }
      mlp_backward(nets.y_nets[j], tr.y_tape[j], yn_bar, grads.y_nets[j], &input_grad);
      x_bar_prev += input_grad.leftCols(n);
      mlp_backward(nets.z_nets[j], tr.z_tape[j], zn_bar, grads.z_nets[j], &input_grad);
      x_bar_prev += input_grad.leftCols(n);
    } else {
      // Y_0 is the trainable vector in every role.
      for (int b = 0; b < B; ++b) {
        const auto ynb = row(yn_bar, b);
        const auto ypb = row(y_bar_prev, b);
        const auto znb = row(zn_bar, b);
        for (int l = 0; l < n; ++l) grads.y0[l] += ynb[l] + ypb[l];
        for (int l = 0; l < p.z_size(); ++l) grads.z0[l] += znb[l];
      }
    }
    std::swap(x_bar, x_bar_prev);
    std::swap(y_bar, y_bar_prev);
  }
}

inline StepNetworks zero_like(const StepNetworks& nets) {
  StepNetworks g;
  for (const auto& m : nets.y_nets) g.y_nets.emplace_back(m.sizes());
  for (const auto& m : nets.z_nets) g.z_nets.emplace_back(m.sizes());
  g.y0.assign(nets.y0.size(), 0.0);
  g.z0.assign(nets.z0.size(), 0.0);
  return g;
}

inline void clear(StepNetworks& g) {
  for (auto& m : g.y_nets) m.set_zero();
  for (auto& m : g.z_nets) m.set_zero();
  std::fill(g.y0.begin(), g.y0.end(), 0.0);
  std::fill(g.z0.begin(), g.z0.end(), 0.0);
}

inline double elapsed(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline SolveReport solve_coupled(const FbsdeProblem& p, const FemSystem* sys, const SolverConfig& cfg) {
  check_problem(p);
  check_config(cfg);
  const auto start = std::chrono::steady_clock::now();
  const int J = cfg.grid.steps();
  SolveReport report;
  report.algorithm = cfg.algorithm;
  report.seed = cfg.seed;
  report.config_echo = describe(cfg);
  StepNetworks nets = init_networks(p, cfg);
  StepNetworks grads = zero_like(nets);
  std::vector<AdamState> y_adam, z_adam;
  for (int j = 0; j < J; ++j) {
    y_adam.emplace_back(nets.y_nets[j].size(), cfg.adam);
    z_adam.emplace_back(nets.z_nets[j].size(), cfg.adam);
  }
  AdamState y0_adam(nets.y0.size(), cfg.adam), z0_adam(nets.z0.size(), cfg.adam);
  Divergence guard(cfg.divergence_factor);
  CoupledTrace tr;
  const std::uint64_t stream = derive_seed(cfg.seed, 11);
  for (int it = 0; it < cfg.iterations; ++it) {
    const BrownianBatch bm = make_brownian(derive_seed(stream, static_cast<std::uint64_t>(it)), cfg.batch, cfg.grid,
                                           p.noise_dim);
    coupled_forward(p, sys, cfg, nets, bm, tr, true);
    double loss = 0.0;
    for (double l : tr.losses) loss += l;
    guard.check(loss, it);
    report.loss_history.push_back(loss);
    report.step_loss_history.push_back(tr.losses);
    clear(grads);
    coupled_backward(p, sys, cfg, nets, bm, tr, grads);
    const double lr = cfg.lr_at(it);
    for (int j = 1; j < J; ++j) {
      adam_step(nets.y_nets[j].data(), grads.y_nets[j].data(), y_adam[j], lr);
      adam_step(nets.z_nets[j].data(), grads.z_nets[j].data(), z_adam[j], lr);
    }
    adam_step(nets.y0, grads.y0, y0_adam, lr);
    adam_step(nets.z0, grads.z0, z0_adam, lr);
    if (cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iterations)) {
      std::fprintf(stderr, "[%s] it %d loss %.6e y0[mid] %.6f (%.1fs)\n", to_string(cfg.algorithm), it, loss,
                   nets.y0[nets.y0.size() / 2], elapsed(start));
    }
  }
  if (!report.step_loss_history.empty()) report.final_step_losses = report.step_loss_history.back();
  report.y0 = nets.y0;
  report.networks = std::move(nets);
  report.wall_seconds = elapsed(start);
  return report;
}

}  // namespace detail

/// Backward dynamic programming: networks for t_{J-1}, ..., t_0 are trained in
/// turn, each against the frozen estimate of the next time step.
inline SolveReport solve_dbsde1(const FbsdeProblem& p, const SolverConfig& cfg_in, const FemSystem* sys = nullptr) {
  using namespace detail;
  check_problem(p);
  check_config(cfg_in);
  if (p.forward_depends_on_yz) throw std::invalid_argument("solve_dbsde1: problem is coupled");
  SolverConfig cfg = cfg_in;
  cfg.algorithm = Algorithm::dbsde1;
  const auto start = std::chrono::steady_clock::now();
  const int J = cfg.grid.steps();
  const int B = cfg.batch;
  SolveReport report;
  report.algorithm = Algorithm::dbsde1;
  report.seed = cfg.seed;
  report.config_echo = describe(cfg);
  report.final_step_losses.assign(J, 0.0);
  StepNetworks nets = init_networks(p, cfg);
  PathPool pool(p, sys, cfg);
  const BrownianBatch& bm = pool.brownian();
  Divergence guard(cfg.divergence_factor);
  RowMatrix input, y_bar, z_bar, input_y;
  for (int j = J - 1; j >= 0; --j) {
    if (cfg.warm_start && j + 1 < J) {
      nets.y_nets[j] = nets.y_nets[j + 1];
      nets.z_nets[j] = nets.z_nets[j + 1];
    }
    auto [xj_ptr, xn_ptr] = pool.pair(j);
    const RowMatrix& xj = *xj_ptr;
    const RowMatrix target = stage_targets(p, cfg, nets, j, *xn_ptr, bm, 0);
    MlpParams& ynet = nets.y_nets[j];
    MlpParams& znet = nets.z_nets[j];
    AdamState y_adam(ynet.size(), cfg.adam), z_adam(znet.size(), cfg.adam);
    MlpParams y_grad(ynet.sizes()), z_grad(znet.sizes());
    const int iters = (j + 1 == J && cfg.first_stage_iterations >= 0) ? cfg.first_stage_iterations : cfg.iterations;
    double last = 0.0;
    for (int it = 0; it < iters; ++it) {
      const int first = (it % cfg.pool_batches) * B;
      build_input(xj.middleRows(first, B), &bm, first, j, p.noise_dim, cfg.append_brownian_input, input);
      Tape y_tape, z_tape;
      const RowMatrix y = mlp_forward(ynet, input, &y_tape);
      const RowMatrix z = mlp_forward(znet, input, &z_tape);
      const double loss = stage_loss(p, cfg, j, xj, target, bm, first, y, z, &y_bar, &z_bar);
      guard.check(loss, it);
      report.loss_history.push_back(loss);
      report.loss_stage.push_back(j);
      last = loss;
      y_grad.set_zero();
      z_grad.set_zero();
      mlp_backward(ynet, y_tape, y_bar, y_grad);
      mlp_backward(znet, z_tape, z_bar, z_grad);
      const double lr = cfg.lr_at(it, cfg.warm_start && j + 1 < J);
      adam_step(ynet.data(), y_grad.data(), y_adam, lr);
      adam_step(znet.data(), z_grad.data(), z_adam, lr);
      if (cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == iters)) {
        std::fprintf(stderr, "[dbsde1] stage %d it %d loss %.6e (%.1fs)\n", j, it, loss, elapsed(start));
      }
    }
    if (iters == 0) {
      build_input(xj.middleRows(0, B), &bm, 0, j, p.noise_dim, cfg.append_brownian_input, input);
      last = stage_loss(p, cfg, j, xj, target, bm, 0, mlp_forward(ynet, input), mlp_forward(znet, input), nullptr,
                        nullptr);
    }
    report.final_step_losses[j] = last;
  }
  // Y_0 = average of the first network over the batch at X_0.
  const RowMatrix& x0 = pool.states(0);
  build_input(x0.topRows(B), &bm, 0, 0, p.noise_dim, cfg.append_brownian_input, input);
  const RowMatrix y0 = mlp_forward(nets.y_nets[0], input);
  report.y0.assign(p.dim, 0.0);
  for (int l = 0; l < p.dim; ++l) report.y0[l] = y0.col(l).mean();
  report.networks = std::move(nets);
  report.wall_seconds = elapsed(start);
  return report;
}

/// Global loss with Y advanced from its own propagated values; local losses
/// weighted by dt.
inline SolveReport solve_dbsde2(const FbsdeProblem& p, const SolverConfig& cfg_in, const FemSystem* sys = nullptr) {
  SolverConfig cfg = cfg_in;
  cfg.algorithm = Algorithm::dbsde2;
  return detail::solve_coupled(p, sys, cfg);
}

/// Global loss with Y advanced from the step networks; unweighted local losses.
inline SolveReport solve_dbsde3(const FbsdeProblem& p, const SolverConfig& cfg_in, const FemSystem* sys = nullptr) {
  SolverConfig cfg = cfg_in;
  cfg.algorithm = Algorithm::dbsde3;
  return detail::solve_coupled(p, sys, cfg);
}

inline SolveReport solve(const FbsdeProblem& p, const SolverConfig& cfg, const FemSystem* sys = nullptr) {
  switch (cfg.algorithm) {
    case Algorithm::dbsde1: return solve_dbsde1(p, cfg, sys);
    case Algorithm::dbsde2: return solve_dbsde2(p, cfg, sys);
    case Algorithm::dbsde3: return solve_dbsde3(p, cfg, sys);
  }
  throw std::invalid_argument("solve: unknown algorithm");
}

/// Evaluates every local loss of the configured algorithm on the paths of
/// `bm` without training. dbsde1 reports the stage losses j = 0..J-1,
/// dbsde2/3 report L_1..L_J.
inline StepLosses evaluate_loss(const FbsdeProblem& p, const SolverConfig& cfg, const StepNetworks& nets,
                                const BrownianBatch& bm, const FemSystem* sys = nullptr) {
  using namespace detail;
  check_problem(p);
  const int J = cfg.grid.steps();
  const int B = bm.batch;
  if (bm.steps != J || bm.channels != p.noise_dim) throw std::invalid_argument("evaluate_loss: shape mismatch");
  StepLosses out;
  out.mean.assign(J, 0.0);
  out.std_error.assign(J, 0.0);
  auto summarize = [&](int idx, const Vec1& samples, double weight) {
    double mean = 0.0;
    for (double s : samples) mean += s;
    mean /= B;
    double var = 0.0;
    for (double s : samples) var += (s - mean) * (s - mean);
    var /= std::max(1, B - 1);
    out.mean[idx] = weight * mean;
    out.std_error[idx] = weight * std::sqrt(var / B);
  };
  if (cfg.algorithm == Algorithm::dbsde1) {
    const ForwardPathBatch paths =
        cfg.propagator == Propagator::semi_implicit && sys ? euler_forward_semi_implicit(*sys, p, cfg.grid, bm)
                                                           : euler_forward_explicit(p, cfg.grid, bm);
    RowMatrix input;
    Vec1 samples(B);
    for (int j = 0; j < J; ++j) {
      RowMatrix xj(B, p.dim), xn(B, p.dim);
      for (int b = 0; b < B; ++b) {
        std::copy(paths.state(b, j).begin(), paths.state(b, j).end(), row(xj, b).begin());
        std::copy(paths.state(b, j + 1).begin(), paths.state(b, j + 1).end(), row(xn, b).begin());
      }
      const RowMatrix target = stage_targets(p, cfg, nets, j, xn, bm, 0);
      build_input(xj, &bm, 0, j, p.noise_dim, cfg.append_brownian_input, input);
      stage_loss(p, cfg, j, xj, target, bm, 0, mlp_forward(nets.y_nets[j], input),
                 mlp_forward(nets.z_nets[j], input), nullptr, nullptr, &samples);
      summarize(j, samples, 1.0);
    }
    return out;
  }
  CoupledTrace tr;
  coupled_forward(p, sys, cfg, nets, bm, tr, false);
  for (int j = 0; j < J; ++j) summarize(j, tr.per_sample[j], 1.0);
  return out;
}

/// Summed dbsde2/3 loss on the paths of `bm`; its gradient with respect to
/// every trainable parameter is written to `grads` (same shapes as `nets`).
inline double global_loss_gradient(const FbsdeProblem& p, const SolverConfig& cfg, const StepNetworks& nets,
                                   const BrownianBatch& bm, StepNetworks& grads, const FemSystem* sys = nullptr) {
  using namespace detail;
  if (cfg.algorithm == Algorithm::dbsde1) throw std::invalid_argument("global_loss_gradient: needs dbsde2 or dbsde3");
  CoupledTrace tr;
  coupled_forward(p, sys, cfg, nets, bm, tr, true);
  grads = zero_like(nets);
  coupled_backward(p, sys, cfg, nets, bm, tr, grads);
  double loss = 0.0;
  for (double l : tr.losses) loss += l;
  return loss;
}

/// Initial networks exactly as the solvers create them.
inline StepNetworks initial_networks(const FbsdeProblem& p, const SolverConfig& cfg) {
  return detail::init_networks(p, cfg);
}

}  // namespace fbspde
