#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fbspde/fem.hpp"
#include "fbspde/numkit.hpp"
#include "fbspde/random.hpp"

namespace fbspde {

/// Raised when a simulated state or a loss becomes non-finite or explodes.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int index) : std::runtime_error(what), index_(index) {}
  /// Time step (propagators) or iteration (training) at which it happened.
  int index() const { return index_; }

 private:
  int index_;
};

/// Time partition 0 = t_0 < ... < t_J = T.
class TimeGrid {
 public:
  explicit TimeGrid(std::vector<double> times) : times_(std::move(times)) {
    if (times_.size() < 2 || times_.front() != 0.0) {
      throw std::invalid_argument("TimeGrid: need t_0 = 0 and at least one step");
    }
    for (std::size_t i = 1; i < times_.size(); ++i) {
      if (!(times_[i] > times_[i - 1]) || !std::isfinite(times_[i])) {
        throw std::invalid_argument("TimeGrid: times must be strictly increasing");
      }
    }
  }

  /// Uniform grid; dt must divide T to within 1e-12 relative.
  static TimeGrid uniform(double horizon, double dt) {
    if (!(horizon > 0.0) || !(dt > 0.0)) throw std::invalid_argument("TimeGrid::uniform: T and dt must be positive");
    const double ratio = horizon / dt;
    const long steps = std::lround(ratio);
    if (steps < 1 || std::abs(ratio - static_cast<double>(steps)) > 1e-12 * std::max(1.0, ratio) + 1e-9) {
      throw std::invalid_argument("TimeGrid::uniform: dt does not divide T");
    }
    std::vector<double> t(static_cast<std::size_t>(steps) + 1);
    for (long j = 0; j <= steps; ++j) t[j] = horizon * static_cast<double>(j) / static_cast<double>(steps);
    t.back() = horizon;
    return TimeGrid(std::move(t));
  }

  int steps() const { return static_cast<int>(times_.size()) - 1; }
  double time(int j) const { return times_[j]; }
  double dt(int j) const { return times_[j + 1] - times_[j]; }
  double horizon() const { return times_.back(); }
  double max_dt() const {
    double m = 0.0;
    for (int j = 0; j < steps(); ++j) m = std::max(m, dt(j));
    return m;
  }
  const std::vector<double>& times() const { return times_; }

 private:
  std::vector<double> times_;
};

/// Brownian increments and running values for a batch of paths.
/// Layout: increments[(b * J + j) * k + c], values[(b * (J+1) + j) * k + c].
struct BrownianBatch {
  int batch = 0;
  int steps = 0;
  int channels = 1;
  std::uint64_t seed = 0;
  Vec1 increments;
  Vec1 values;

  std::span<const double> increment(int b, int j) const {
    return {increments.data() + (static_cast<std::size_t>(b) * steps + j) * channels, static_cast<std::size_t>(channels)};
  }
  std::span<const double> value(int b, int j) const {
    return {values.data() + (static_cast<std::size_t>(b) * (steps + 1) + j) * channels, static_cast<std::size_t>(channels)};
  }
};

/// Path b of the batch uses the stream derive_seed(seed, first_path + b); the
/// increment of step j, channel c is sqrt(dt_j) * counter_normal(stream, j*k + c).
inline BrownianBatch make_brownian(std::uint64_t seed, int batch, const TimeGrid& grid, int channels = 1,
                                   std::uint64_t first_path = 0) {
  if (batch < 1 || channels < 1) throw std::invalid_argument("make_brownian: batch and k must be >= 1");
  BrownianBatch bm;
  bm.batch = batch;
  bm.steps = grid.steps();
  bm.channels = channels;
  bm.seed = seed;
  const std::size_t J = static_cast<std::size_t>(grid.steps());
  const std::size_t k = static_cast<std::size_t>(channels);
  bm.increments.resize(static_cast<std::size_t>(batch) * J * k);
  bm.values.resize(static_cast<std::size_t>(batch) * (J + 1) * k);
  std::vector<double> sqrt_dt(J);
  for (std::size_t j = 0; j < J; ++j) sqrt_dt[j] = std::sqrt(grid.dt(static_cast<int>(j)));
  for (int b = 0; b < batch; ++b) {
    const std::uint64_t stream = derive_seed(seed, first_path + static_cast<std::uint64_t>(b));
    double* inc = bm.increments.data() + static_cast<std::size_t>(b) * J * k;
    double* val = bm.values.data() + static_cast<std::size_t>(b) * (J + 1) * k;
    for (std::size_t c = 0; c < k; ++c) val[c] = 0.0;
    for (std::size_t j = 0; j < J; ++j) {
      for (std::size_t c = 0; c < k; ++c) {
        const double dw = sqrt_dt[j] * counter_normal(stream, j * k + c);
        inc[j * k + c] = dw;
        val[(j + 1) * k + c] = val[j * k + c] + dw;
      }
    }
  }
  return bm;
}

/// Sums groups of `factor` consecutive increments: the same paths observed on
/// a grid `factor` times coarser.
inline BrownianBatch coarsen(const BrownianBatch& fine, int factor) {
  if (factor < 1 || fine.steps % factor != 0) throw std::invalid_argument("coarsen: factor must divide J");
  BrownianBatch bm;
  bm.batch = fine.batch;
  bm.steps = fine.steps / factor;
  bm.channels = fine.channels;
  bm.seed = fine.seed;
  const int k = fine.channels;
  bm.increments.assign(static_cast<std::size_t>(bm.batch) * bm.steps * k, 0.0);
  bm.values.assign(static_cast<std::size_t>(bm.batch) * (bm.steps + 1) * k, 0.0);
  for (int b = 0; b < bm.batch; ++b) {
    for (int j = 0; j <= bm.steps; ++j) {
      for (int c = 0; c < k; ++c) {
        bm.values[(static_cast<std::size_t>(b) * (bm.steps + 1) + j) * k + c] = fine.value(b, j * factor)[c];
      }
    }
    for (int j = 0; j < bm.steps; ++j) {
      for (int c = 0; c < k; ++c) {
        bm.increments[(static_cast<std::size_t>(b) * bm.steps + j) * k + c] =
            bm.value(b, j + 1)[c] - bm.value(b, j)[c];
      }
    }
  }
  return bm;
}

/// Arguments of every coefficient callback. z holds L*k values, channel-major:
/// z[c*L + l]. w is the current Brownian value (k entries).
struct PointInputs {
  double t;
  std::span<const double> x;
  std::span<const double> y;
  std::span<const double> z;
  std::span<const double> w;
};

/// Adjoint accumulators; an empty span means that gradient is not requested.
struct PointAdjoints {
  std::span<double> dx;
  std::span<double> dy;
  std::span<double> dz;
};

using PointMap = std::function<void(const PointInputs&, std::span<double>)>;
using PointVjp = std::function<void(const PointInputs&, std::span<const double> cotangent, const PointAdjoints&)>;
using TerminalMap = std::function<void(std::span<const double> x, std::span<double>)>;
using TerminalVjp = std::function<void(std::span<const double> x, std::span<const double> cotangent, std::span<double> dx)>;

/// Coupled FBSDE
///   X(t) = X_0 + int mu(s,X,Y,Z) ds - sum_i int sigma^i(s,X,Y) dW^i,
///   Y(t) = g(X(T)) + int_t^T b(s,X,Y,Z) ds - sum_i int_t^T Z^i dW^i.
/// The noise enters with a minus sign. Vector-Jacobian products are needed
/// only by solvers that differentiate through the forward dynamics.
struct FbsdeProblem {
  int dim = 0;
  int noise_dim = 1;
  Vec1 initial_state;

  PointMap drift;
  PointMap diffusion;  // L*k values, channel-major
  PointMap driver;
  TerminalMap terminal;

  // Semi-implicit split: drift = -implicit_diffusion * A^{-1} B x + drift_explicit.
  double implicit_diffusion = 0.0;
  PointMap drift_explicit;

  PointVjp drift_vjp;
  PointVjp drift_explicit_vjp;
  PointVjp diffusion_vjp;
  PointVjp driver_vjp;
  TerminalVjp terminal_vjp;

  bool forward_depends_on_yz = false;
  bool sigma_depends_on_x = true;

  int z_size() const { return dim * noise_dim; }
};

/// States X[b, j, :] for j = 0..J.
struct ForwardPathBatch {
  int batch = 0;
  int steps = 0;
  int dim = 0;
  Vec1 data;

  ForwardPathBatch() = default;
  ForwardPathBatch(int batch_size, int num_steps, int state_dim)
      : batch(batch_size), steps(num_steps), dim(state_dim),
        data(static_cast<std::size_t>(batch_size) * (num_steps + 1) * state_dim, 0.0) {}

  std::span<double> state(int b, int j) {
    return {data.data() + (static_cast<std::size_t>(b) * (steps + 1) + j) * dim, static_cast<std::size_t>(dim)};
  }
  std::span<const double> state(int b, int j) const {
    return {data.data() + (static_cast<std::size_t>(b) * (steps + 1) + j) * dim, static_cast<std::size_t>(dim)};
  }
};

/// y_{j+1} = y_j - b * dt + sum_c z^c * dW^c.
inline void propagate_y(std::span<const double> y, std::span<const double> z, std::span<const double> driver_value,
                        double dt, std::span<const double> dw, std::span<double> out) {
  const std::size_t n = y.size();
  if (driver_value.size() != n || out.size() != n || z.size() != n * dw.size()) {
    throw std::invalid_argument("propagate_y: dimension mismatch");
  }
  for (std::size_t l = 0; l < n; ++l) {
    double v = y[l] - driver_value[l] * dt;
    for (std::size_t c = 0; c < dw.size(); ++c) v += z[c * n + l] * dw[c];
    out[l] = v;
  }
}

inline Vec1 propagate_y(std::span<const double> y, std::span<const double> z, std::span<const double> driver_value,
                        double dt, std::span<const double> dw) {
  Vec1 out(y.size());
  propagate_y(y, z, driver_value, dt, dw, out);
  return out;
}

/// One Euler step of the forward equation, explicit or semi-implicit in the
/// stiff part -delta A^{-1} B x. The semi-implicit step is
///   x_{j+1} = (A + delta dt B)^{-1} A (x_j + mu_explicit dt - sigma dW),
/// i.e. (I + delta dt A^{-1} B)^{-1} applied to the explicit update.
/// Holds scratch space: one stepper per thread.
class ForwardStepper {
 public:
  ForwardStepper(const FbsdeProblem& problem, const FemSystem* system, bool semi_implicit)
      : problem_(&problem), system_(system),
        semi_implicit_(semi_implicit && problem.implicit_diffusion != 0.0),
        mu_(problem.dim), sigma_(problem.z_size()), tmp_(problem.dim), tmp2_(problem.dim) {
    if (semi_implicit_) {
      if (system_ == nullptr || system_->dim() != problem.dim) {
        throw std::invalid_argument("ForwardStepper: semi-implicit step needs a FemSystem of matching dimension");
      }
      if (!problem.drift_explicit) throw std::invalid_argument("ForwardStepper: problem lacks drift_explicit");
    }
  }

  bool semi_implicit() const { return semi_implicit_; }

  /// out = next state. y_mu/z_mu feed the drift, y_sigma feeds the diffusion.
  void step(double t, double dt, std::span<const double> x, std::span<const double> y_mu,
            std::span<const double> z_mu, std::span<const double> y_sigma, std::span<const double> w,
            std::span<const double> dw, std::span<double> out) {
    const FbsdeProblem& p = *problem_;
    const int n = p.dim;
    const PointMap& mu = semi_implicit_ ? p.drift_explicit : p.drift;
    mu({t, x, y_mu, z_mu, w}, mu_);
    p.diffusion({t, x, y_sigma, {}, w}, sigma_);
    for (int l = 0; l < n; ++l) {
      double v = x[l] + mu_[l] * dt;
      for (int c = 0; c < p.noise_dim; ++c) v -= sigma_[c * n + l] * dw[c];
      out[l] = v;
    }
    if (semi_implicit_) {
      system_->mass().apply(out, tmp_);
      solver_for(dt).solve_in_place(tmp_);
      std::copy(tmp_.begin(), tmp_.end(), out.begin());
    }
  }

  /// Accumulates the pullback of `cot` (adjoint of the next state) into the
  /// requested adjoints. dy_mu/dz_mu belong to the drift inputs, dy_sigma to
  /// the diffusion input.
  void step_vjp(double t, double dt, std::span<const double> x, std::span<const double> y_mu,
                std::span<const double> z_mu, std::span<const double> y_sigma, std::span<const double> w,
                std::span<const double> dw, std::span<const double> cot, std::span<double> dx,
                std::span<double> dy_mu, std::span<double> dz_mu, std::span<double> dy_sigma) {
    const FbsdeProblem& p = *problem_;
    const int n = p.dim;
    // v = adjoint of the explicit update.
    std::copy(cot.begin(), cot.end(), tmp_.begin());
    if (semi_implicit_) {
      solver_for(dt).solve_in_place(tmp_);
      system_->mass().apply(tmp_, tmp2_);
      std::swap(tmp_, tmp2_);
    }
    if (!dx.empty()) {
      for (int l = 0; l < n; ++l) dx[l] += tmp_[l];
    }
    const PointVjp& mu_vjp = semi_implicit_ ? p.drift_explicit_vjp : p.drift_vjp;
    if (!mu_vjp || !p.diffusion_vjp) throw std::logic_error("ForwardStepper: problem lacks adjoint callbacks");
    for (int l = 0; l < n; ++l) mu_[l] = tmp_[l] * dt;
    mu_vjp({t, x, y_mu, z_mu, w}, mu_, {dx, dy_mu, dz_mu});
    for (int c = 0; c < p.noise_dim; ++c) {
      for (int l = 0; l < n; ++l) sigma_[c * n + l] = -tmp_[l] * dw[c];
    }
    p.diffusion_vjp({t, x, y_sigma, {}, w}, sigma_, {dx, dy_sigma, {}});
  }

 private:
  const TridiagSolver& solver_for(double dt) {
    auto it = implicit_solvers_.find(dt);
    if (it == implicit_solvers_.end()) {
      const Tridiag m = system_->mass().combine(1.0, system_->stiffness(), problem_->implicit_diffusion * dt);
      it = implicit_solvers_.emplace(dt, TridiagSolver(m)).first;
    }
    return it->second;
  }

  const FbsdeProblem* problem_;
  const FemSystem* system_;
  bool semi_implicit_;
  Vec1 mu_;
  Vec1 sigma_;
  Vec1 tmp_;
  Vec1 tmp2_;
  std::map<double, TridiagSolver> implicit_solvers_;
};

/// Supplies (Y, Z) at (step j, path b, state x) for coupled forward equations.
using StateProvider = std::function<void(int j, int b, std::span<const double> x, std::span<double> out)>;

inline void check_finite_state(std::span<const double> x, int step) {
  for (double v : x) {
    if (!std::isfinite(v)) {
      throw DivergenceError("forward propagation produced a non-finite state at step " + std::to_string(step), step);
    }
  }
}

namespace detail {

inline ForwardPathBatch propagate(ForwardStepper& stepper, const FbsdeProblem& problem, const TimeGrid& grid,
                                  const BrownianBatch& bm, const StateProvider& y_provider,
                                  const StateProvider& z_provider) {
  if (bm.steps != grid.steps() || bm.channels != problem.noise_dim) {
    throw std::invalid_argument("propagate: Brownian batch does not match grid or noise dimension");
  }
  if (static_cast<int>(problem.initial_state.size()) != problem.dim) {
    throw std::invalid_argument("propagate: initial state has wrong dimension");
  }
  if (problem.forward_depends_on_yz && (!y_provider || !z_provider)) {
    throw std::invalid_argument("propagate: coupled problem needs Y and Z providers");
  }
  const int n = problem.dim;
  ForwardPathBatch out(bm.batch, grid.steps(), n);
  Vec1 y(n, 0.0), z(problem.z_size(), 0.0);
  for (int b = 0; b < bm.batch; ++b) {
    auto x0 = out.state(b, 0);
    std::copy(problem.initial_state.begin(), problem.initial_state.end(), x0.begin());
    for (int j = 0; j < grid.steps(); ++j) {
      auto x = out.state(b, j);
      if (y_provider) y_provider(j, b, x, y);
      if (z_provider) z_provider(j, b, x, z);
      stepper.step(grid.time(j), grid.dt(j), x, y, z, y, bm.value(b, j), bm.increment(b, j), out.state(b, j + 1));
      check_finite_state(out.state(b, j + 1), j + 1);
    }
  }
  return out;
}

}  // namespace detail

/// X_{j+1} = X_j + mu dt_j - sigma dW_j, per path.
inline ForwardPathBatch euler_forward_explicit(const FbsdeProblem& problem, const TimeGrid& grid,
                                               const BrownianBatch& bm, const StateProvider& y_provider = {},
                                               const StateProvider& z_provider = {}) {
  ForwardStepper stepper(problem, nullptr, false);
  return detail::propagate(stepper, problem, grid, bm, y_provider, z_provider);
}

/// Stiff part -delta A^{-1} B x implicit, everything else explicit. With
/// delta = 0 this is the explicit scheme.
inline ForwardPathBatch euler_forward_semi_implicit(const FemSystem& system, const FbsdeProblem& problem,
                                                    const TimeGrid& grid, const BrownianBatch& bm,
                                                    const StateProvider& y_provider = {},
                                                    const StateProvider& z_provider = {}) {
  ForwardStepper stepper(problem, &system, true);
  return detail::propagate(stepper, problem, grid, bm, y_provider, z_provider);
}

}  // namespace fbspde
