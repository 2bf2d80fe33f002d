#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "fbspde/dual.hpp"
#include "fbspde/fem.hpp"
#include "fbspde/numkit.hpp"
#include "fbspde/sde.hpp"

namespace fbspde {

/// Derivative slots of the wide dual type; a coefficient may depend on at
/// most this many seeded inputs at once.
inline constexpr int kDualSlots = 8;
inline constexpr int kNarrowDualSlots = 3;
using Dual = DualNumber<kDualSlots>;
using NarrowDual = DualNumber<kNarrowDualSlots>;

/// State arguments a pointwise coefficient may read.
enum Uses : unsigned {
  kUsesRho = 1u << 0,
  kUsesGradRho = 1u << 1,
  kUsesU = 1u << 2,
  kUsesGradU = 1u << 3,
  kUsesPsi = 1u << 4,
  kUsesReductions = 1u << 5,
};

/// Arguments of a pointwise SPDE coefficient at (t, x). `space` holds the
/// declared spatial features at x, `path` the declared path features at
/// (t, W_t); `reductions` are the nonlocal integrals of kernel_r * rho(t, .).
template <class S>
struct PointArgs {
  double t = 0.0;
  double x = 0.0;
  std::span<const double> w;
  std::span<const double> space;
  std::span<const double> path;
  S rho{};
  S grad_rho{};
  S u{};
  S grad_u{};
  std::span<const S> psi;
  std::span<const S> reductions;
};

/// A pointwise coefficient, available in plain and dual-number form.
struct PointFn {
  std::function<double(const PointArgs<double>&)> value;
  std::function<Dual(const PointArgs<Dual>&)> dual;
  std::function<NarrowDual(const PointArgs<NarrowDual>&)> narrow;
  unsigned uses = 0;

  explicit operator bool() const { return static_cast<bool>(value); }
};

/// Wraps a generic lambda `[](const auto& a) {...}` into both forms.
template <class Fn>
PointFn point_fn(unsigned uses, Fn fn) {
  return PointFn{fn, fn, fn, uses};
}

/// Coefficients of
///   d rho = (delta Lap rho + F) dt - sum_i f^i dW^i,  rho(0) = rho_0,
///  -d u   = (delta Lap u + G) dt - sum_i psi^i dW^i,  u(T) = g(rho(T)),
/// with homogeneous Dirichlet conditions on (0,1).
struct SpdeCoefficients {
  double delta = 0.0;
  double horizon = 1.0;
  int noise_dim = 1;
  std::function<double(double)> initial;
  std::vector<std::function<double(double)>> spatial_features;
  std::function<void(double t, std::span<const double> w, std::vector<double>& out)> path_features;
  std::vector<std::function<double(double)>> reduction_kernels;
  PointFn drift;               // F; empty means zero
  std::vector<PointFn> noise;  // f^i(t, x, rho, u)
  PointFn driver;              // G; empty means zero
  PointFn terminal;            // g(x, rho(T, x)); called with empty w and path
};

/// Pathwise closed-form solution as functions of (t, x, W_t).
struct AnalyticSolution {
  std::function<double(double t, double x, double w)> rho;
  std::function<double(double t, double x, double w)> u;
};

namespace detail {

/// Evaluates load vectors A^{-1} <coef(fields), phi_l> and their adjoints for
/// the finite-dimensional system.
class FdAssembler {
 public:
  FdAssembler(std::shared_ptr<const FemSystem> sys, SpdeCoefficients coeffs)
      : sys_(std::move(sys)), c_(std::move(coeffs)), n_(sys_->dim()) {
    const int slots = 4 + c_.noise_dim + static_cast<int>(c_.reduction_kernels.size());
    if (slots > kDualSlots) throw std::invalid_argument("build_fd_fbsde: too many noise channels and reductions");
    if (static_cast<int>(c_.noise.size()) != c_.noise_dim) {
      throw std::invalid_argument("build_fd_fbsde: need one noise coefficient per channel");
    }
    const auto& pts = sys_->quadrature_points();
    nfeat_ = c_.spatial_features.size();
    features_.resize(pts.size() * nfeat_);
    for (std::size_t q = 0; q < pts.size(); ++q) {
      for (std::size_t f = 0; f < nfeat_; ++f) features_[q * nfeat_ + f] = c_.spatial_features[f](pts[q].x);
    }
    for (const auto& kernel : c_.reduction_kernels) {
      reduction_weights_.push_back(load_vector(sys_->mesh(), kernel, sys_->rule()));
    }
  }

  const FemSystem& system() const { return *sys_; }
  const SpdeCoefficients& coefficients() const { return c_; }
  int dim() const { return n_; }

  /// out = A^{-1} F(load of fn). x = rho coefficients, y = u, z = psi.
  void load(const PointFn& fn, const PointInputs& in, std::span<double> out, bool terminal = false) const {
    std::fill(out.begin(), out.end(), 0.0);
    if (!fn) return;
    Scratch& s = scratch();
    prepare(in, s, terminal);
    const auto& pts = sys_->quadrature_points();
    const int k = c_.noise_dim;
    s.psi_d.resize(k);
    PointArgs<double> a;
    a.t = in.t;
    a.w = in.w;
    a.path = s.path;
    a.reductions = s.red;
    for (std::size_t q = 0; q < pts.size(); ++q) {
      const QuadPoint& p = pts[q];
      const int e = p.element;
      a.x = p.x;
      a.space = std::span<const double>(features_.data() + q * nfeat_, nfeat_);
      sample(in.x, e, p, a.rho, a.grad_rho);
      sample(in.y, e, p, a.u, a.grad_u);
      for (int c = 0; c < k; ++c) {
        double dummy;
        sample(channel(in.z, c), e, p, s.psi_d[c], dummy);
      }
      a.psi = s.psi_d;
      const double v = fn.value(a) * p.weight;
      if (e >= 2) out[e - 2] += v * (1.0 - p.xi);
      if (e <= n_) out[e - 1] += v * p.xi;
    }
    sys_->apply_mass_inverse(out);
  }

  /// Adds the pullback of `cot` through in -> A^{-1} F(load of fn).
  void load_vjp(const PointFn& fn, const PointInputs& in, std::span<const double> cot, const PointAdjoints& adj,
                bool terminal = false) const {
    if (!fn) return;
    const int k = c_.noise_dim;
    const int nred = static_cast<int>(reduction_weights_.size());
    // Derivative slots go only to inputs that are both read and requested.
    Slots slots;
    int next = 0;
    auto take = [&](bool on) { return on ? next++ : -1; };
    const bool seed_x = !adj.dx.empty();
    const bool seed_y = !adj.dy.empty();
    const bool seed_z = !adj.dz.empty();
    slots.rho = take(seed_x && (fn.uses & kUsesRho));
    slots.grad_rho = take(seed_x && (fn.uses & kUsesGradRho));
    slots.u = take(seed_y && (fn.uses & kUsesU));
    slots.grad_u = take(seed_y && (fn.uses & kUsesGradU));
    for (int c = 0; c < k; ++c) slots.psi[c] = take(seed_z && (fn.uses & kUsesPsi));
    for (int r = 0; r < nred; ++r) slots.red[r] = take(seed_x && (fn.uses & kUsesReductions));
    if (next == 0) return;
    if (next <= kNarrowDualSlots) {
      pullback<NarrowDual>(fn.narrow, in, cot, adj, terminal, slots);
    } else {
      pullback<Dual>(fn.dual, in, cot, adj, terminal, slots);
    }
  }

  /// out = -delta A^{-1} B v.
  void stiff(std::span<const double> v, std::span<double> out) const {
    sys_->stiffness().apply(v, out);
    sys_->apply_mass_inverse(out);
    for (double& o : out) o *= -c_.delta;
  }

  /// adj += -delta B A^{-1} cot.
  void stiff_vjp(std::span<const double> cot, std::span<double> adj) const {
    Scratch& s = scratch();
    s.cot.assign(cot.begin(), cot.end());
    sys_->apply_mass_inverse(s.cot);
    s.tmp.resize(n_);
    sys_->stiffness().apply(s.cot, s.tmp);
    for (int l = 0; l < n_; ++l) adj[l] -= c_.delta * s.tmp[l];
  }

  const std::vector<Vec1>& reduction_weights() const { return reduction_weights_; }

 private:
  struct Slots {
    int rho = -1, grad_rho = -1, u = -1, grad_u = -1;
    std::array<int, kDualSlots> psi{}, red{};
  };

  struct Scratch {
    std::vector<double> path, red, cot, tmp, red_bar, psi_d;
  };

  template <class D>
  static D seeded(double value, int slot) {
    return slot >= 0 ? D::variable(value, slot) : D(value);
  }

  template <class D, class Fn>
  void pullback(const Fn& fn, const PointInputs& in, std::span<const double> cot, const PointAdjoints& adj,
                bool terminal, const Slots& slots) const {
    Scratch& s = scratch();
    prepare(in, s, terminal);
    s.cot.assign(cot.begin(), cot.end());
    sys_->apply_mass_inverse(s.cot);
    const auto& pts = sys_->quadrature_points();
    const int k = c_.noise_dim;
    const int nred = static_cast<int>(reduction_weights_.size());
    thread_local std::vector<D> red_dual, psi_dual;
    red_dual.resize(nred);
    for (int r = 0; r < nred; ++r) red_dual[r] = seeded<D>(s.red[r], slots.red[r]);
    s.red_bar.assign(nred, 0.0);
    psi_dual.resize(k);
    PointArgs<D> a;
    a.t = in.t;
    a.w = in.w;
    a.path = s.path;
    a.reductions = red_dual;
    const bool any_x = slots.rho >= 0 || slots.grad_rho >= 0;
    const bool any_y = slots.u >= 0 || slots.grad_u >= 0;
    auto slot_of = [](const D& out, int slot) { return slot >= 0 ? out.d[slot] : 0.0; };
    for (std::size_t q = 0; q < pts.size(); ++q) {
      const QuadPoint& p = pts[q];
      const int e = p.element;
      const double cl = nodal_value(s.cot, e - 1);
      const double cr = nodal_value(s.cot, e);
      const double weight = p.weight * (cl * (1.0 - p.xi) + cr * p.xi);
      if (weight == 0.0) continue;
      a.x = p.x;
      a.space = std::span<const double>(features_.data() + q * nfeat_, nfeat_);
      double v, g;
      sample(in.x, e, p, v, g);
      a.rho = seeded<D>(v, slots.rho);
      a.grad_rho = seeded<D>(g, slots.grad_rho);
      sample(in.y, e, p, v, g);
      a.u = seeded<D>(v, slots.u);
      a.grad_u = seeded<D>(g, slots.grad_u);
      for (int c = 0; c < k; ++c) {
        sample(channel(in.z, c), e, p, v, g);
        psi_dual[c] = seeded<D>(v, slots.psi[c]);
      }
      a.psi = psi_dual;
      const D out = fn(a);
      if (any_x) scatter(adj.dx, e, p, weight * slot_of(out, slots.rho), weight * slot_of(out, slots.grad_rho));
      if (any_y) scatter(adj.dy, e, p, weight * slot_of(out, slots.u), weight * slot_of(out, slots.grad_u));
      for (int c = 0; c < k; ++c) {
        if (slots.psi[c] >= 0) {
          scatter(adj.dz.subspan(static_cast<std::size_t>(c) * n_, n_), e, p, weight * out.d[slots.psi[c]], 0.0);
        }
      }
      for (int r = 0; r < nred; ++r) {
        if (slots.red[r] >= 0) s.red_bar[r] += weight * out.d[slots.red[r]];
      }
    }
    for (int r = 0; r < nred; ++r) {
      if (slots.red[r] < 0) continue;
      for (int l = 0; l < n_; ++l) adj.dx[l] += s.red_bar[r] * reduction_weights_[r][l];
    }
  }

  static Scratch& scratch() {
    thread_local Scratch s;
    return s;
  }

  std::span<const double> channel(std::span<const double> z, int c) const {
    if (z.empty()) return {};
    return z.subspan(static_cast<std::size_t>(c) * n_, n_);
  }

  static void sample(std::span<const double> coeffs, int e, const QuadPoint& p, double& value, double& slope) {
    if (coeffs.empty()) {
      value = 0.0;
      slope = 0.0;
      return;
    }
    const double left = nodal_value(coeffs, e - 1);
    const double right = nodal_value(coeffs, e);
    value = left * (1.0 - p.xi) + right * p.xi;
    slope = (right - left) * p.inv_h;
  }

  void scatter(std::span<double> target, int e, const QuadPoint& p, double d_value, double d_slope) const {
    if (e >= 2) target[e - 2] += d_value * (1.0 - p.xi) - d_slope * p.inv_h;
    if (e <= n_) target[e - 1] += d_value * p.xi + d_slope * p.inv_h;
  }

  void prepare(const PointInputs& in, Scratch& s, bool terminal) const {
    s.path.clear();
    if (!terminal && c_.path_features) c_.path_features(in.t, in.w, s.path);
    s.red.resize(reduction_weights_.size());
    for (std::size_t r = 0; r < reduction_weights_.size(); ++r) {
      double acc = 0.0;
      for (int l = 0; l < n_; ++l) acc += reduction_weights_[r][l] * in.x[l];
      s.red[r] = acc;
    }
  }

  std::shared_ptr<const FemSystem> sys_;
  SpdeCoefficients c_;
  int n_;
  std::size_t nfeat_ = 0;
  std::vector<double> features_;
  std::vector<Vec1> reduction_weights_;
};

}  // namespace detail

/// Finite-element reduction of an SPDE pair to the FBSDE on R^L:
///   mu    = -delta A^{-1} B rho + A^{-1} F(rho_h, u_h, psi_h),
///   sigma = columns A^{-1} f^i(rho_h, u_h),
///   b     = -delta A^{-1} B u + A^{-1} G(rho_h, u_h, psi_h),
///   g     = A^{-1} g(rho_h(T)),
/// with X_0 the L2 projection of rho_0. Loads use the system's quadrature.
inline FbsdeProblem build_fd_fbsde(std::shared_ptr<const FemSystem> sys, SpdeCoefficients coeffs) {
  auto as = std::make_shared<const detail::FdAssembler>(std::move(sys), std::move(coeffs));
  const SpdeCoefficients& c = as->coefficients();
  const int n = as->dim();
  const int k = c.noise_dim;

  FbsdeProblem p;
  p.dim = n;
  p.noise_dim = k;
  p.implicit_diffusion = c.delta;
  if (c.initial) p.initial_state = l2_project(as->system(), c.initial).coeffs;
  else p.initial_state.assign(n, 0.0);

  unsigned forward_uses = c.drift.uses;
  unsigned noise_uses = 0;
  for (const auto& f : c.noise) noise_uses |= f.uses;
  forward_uses |= noise_uses;
  p.forward_depends_on_yz = (forward_uses & (kUsesU | kUsesGradU | kUsesPsi)) != 0;
  p.sigma_depends_on_x = (noise_uses & (kUsesRho | kUsesGradRho | kUsesReductions)) != 0;

  p.drift_explicit = [as](const PointInputs& in, std::span<double> out) {
    as->load(as->coefficients().drift, in, out);
  };
  p.drift = [as, n](const PointInputs& in, std::span<double> out) {
    as->load(as->coefficients().drift, in, out);
    thread_local Vec1 tmp;
    tmp.resize(n);
    as->stiff(in.x, tmp);
    for (int l = 0; l < n; ++l) out[l] += tmp[l];
  };
  p.diffusion = [as, n, k](const PointInputs& in, std::span<double> out) {
    for (int ch = 0; ch < k; ++ch) {
      as->load(as->coefficients().noise[ch], in, out.subspan(static_cast<std::size_t>(ch) * n, n));
    }
  };
  p.driver = [as, n](const PointInputs& in, std::span<double> out) {
    as->load(as->coefficients().driver, in, out);
    thread_local Vec1 tmp;
    tmp.resize(n);
    as->stiff(in.y, tmp);
    for (int l = 0; l < n; ++l) out[l] += tmp[l];
  };
  p.terminal = [as](std::span<const double> x, std::span<double> out) {
    as->load(as->coefficients().terminal, {as->coefficients().horizon, x, {}, {}, {}}, out, true);
  };

  p.drift_explicit_vjp = [as](const PointInputs& in, std::span<const double> cot, const PointAdjoints& adj) {
    as->load_vjp(as->coefficients().drift, in, cot, adj);
  };
  p.drift_vjp = [as](const PointInputs& in, std::span<const double> cot, const PointAdjoints& adj) {
    as->load_vjp(as->coefficients().drift, in, cot, adj);
    if (!adj.dx.empty()) as->stiff_vjp(cot, adj.dx);
  };
  p.diffusion_vjp = [as, n, k](const PointInputs& in, std::span<const double> cot, const PointAdjoints& adj) {
    for (int ch = 0; ch < k; ++ch) {
      as->load_vjp(as->coefficients().noise[ch], in, cot.subspan(static_cast<std::size_t>(ch) * n, n),
                   {adj.dx, adj.dy, {}});
    }
  };
  p.driver_vjp = [as](const PointInputs& in, std::span<const double> cot, const PointAdjoints& adj) {
    as->load_vjp(as->coefficients().driver, in, cot, adj);
    if (!adj.dy.empty()) as->stiff_vjp(cot, adj.dy);
  };
  p.terminal_vjp = [as](std::span<const double> x, std::span<const double> cot, std::span<double> dx) {
    as->load_vjp(as->coefficients().terminal, {as->coefficients().horizon, x, {}, {}, {}}, cot, {dx, {}, {}}, true);
  };
  return p;
}

struct Example1Params {
  double horizon = 0.5;
  double delta = 0.2;
  double gamma = 1.0;
};

struct ExampleSetup {
  SpdeCoefficients coefficients;
  AnalyticSolution solution;
};

/// Decoupled pair with multiplicative noise:
///   d rho = delta Lap rho dt - gamma rho dW,  rho_0 = sin(pi x),
///  -d u   = (delta Lap u + gamma psi + f(t, x, rho)) dt - psi dW,
///   u(T)  = 1 - exp(-rho(T)).
/// The Gaussian expectations in f are evaluated in closed form:
///   E[grad rho_0(x + sqrt(2 delta) B_t)] = pi e^{-delta pi^2 t} cos(pi x),
///   E[Lap  rho_0(x + sqrt(2 delta) B_t)] = -pi^2 e^{-delta pi^2 t} sin(pi x).
inline ExampleSetup example1(const Example1Params& prm = {}) {
  constexpr double pi = std::numbers::pi;
  const double delta = prm.delta;
  const double gamma = prm.gamma;
  SpdeCoefficients c;
  c.delta = delta;
  c.horizon = prm.horizon;
  c.noise_dim = 1;
  c.initial = [](double x) { return std::sin(pi * x); };
  c.spatial_features = {[](double x) { return std::sin(pi * x); }, [](double x) { return std::cos(pi * x); }};
  // path[0] = e^{-delta pi^2 t} e^{-gamma W_t - gamma^2 t / 2}
  c.path_features = [delta, gamma](double t, std::span<const double> w, std::vector<double>& out) {
    out.assign(1, std::exp(-delta * pi * pi * t - gamma * w[0] - 0.5 * gamma * gamma * t));
  };
  c.noise = {point_fn(kUsesRho, [gamma](const auto& a) { return gamma * a.rho; })};
  c.driver = point_fn(kUsesRho | kUsesPsi, [delta, gamma](const auto& a) {
    using std::exp;
    const double m = a.path[0];
    const double sin_px = a.space[0];
    const double cos_px = a.space[1];
    const auto e = exp(-a.rho);
    const double grad_mean = pi * m * cos_px;
    const double lap_mean = -pi * pi * m * sin_px;
    return gamma * a.psi[0] +
           (delta * grad_mean * grad_mean + 2.0 * delta * (-lap_mean)) * e +
           (0.5 * gamma * gamma * a.rho * a.rho + gamma * gamma * a.rho) * e;
  });
  c.terminal = point_fn(kUsesRho, [](const auto& a) {
    using std::exp;
    return 1.0 - exp(-a.rho);
  });

  AnalyticSolution sol;
  sol.rho = [delta, gamma](double t, double x, double w) {
    return std::exp(-delta * pi * pi * t) * std::sin(pi * x) * std::exp(-gamma * w - 0.5 * gamma * gamma * t);
  };
  sol.u = [rho = sol.rho](double t, double x, double w) { return 1.0 - std::exp(-rho(t, x, w)); };
  return {std::move(c), std::move(sol)};
}

struct Example2Params {
  double horizon = 0.5;
  double delta = 0.001;
  double alpha = 0.2;
  double gamma = 0.2;
};

/// Coupled, nonlocal pair:
///   d rho = (delta Lap rho + f1(t, x, rho, u)) dt - f3(t, x) dW,
///  -d u   = (delta Lap u + f2(t, x, rho, u)) dt - psi dW,
///   rho_0 = (pi/2) sin(pi x) + (1/2) sin(2 pi x),  u(T) = arctan(rho(T)),
/// where f2 contains gamma (int_0^1 sin(2 pi x) rho dx - (2 + cos W_t)/12).
inline ExampleSetup example2(const Example2Params& prm = {}) {
  constexpr double pi = std::numbers::pi;
  const double delta = prm.delta;
  const double alpha = prm.alpha;
  const double gamma = prm.gamma;
  SpdeCoefficients c;
  c.delta = delta;
  c.horizon = prm.horizon;
  c.noise_dim = 1;
  c.initial = [](double x) { return 0.5 * pi * std::sin(pi * x) + 0.5 * std::sin(2.0 * pi * x); };
  // space = sin(pi x), cos(pi x), sin(2 pi x), cos(2 pi x)
  c.spatial_features = {[](double x) { return std::sin(pi * x); }, [](double x) { return std::cos(pi * x); },
                        [](double x) { return std::sin(2.0 * pi * x); },
                        [](double x) { return std::cos(2.0 * pi * x); }};
  // path = cos(W_t), sin(W_t)
  c.path_features = [](double, std::span<const double> w, std::vector<double>& out) {
    out.assign({std::cos(w[0]), std::sin(w[0])});
  };
  c.reduction_kernels = {[](double x) { return std::sin(2.0 * pi * x); }};

  c.drift = point_fn(kUsesRho | kUsesU, [delta, alpha](const auto& a) {
    using std::cos;
    using std::sqrt;
    const double cos_w = a.path[0];
    const double sin_2px = a.space[2];
    return alpha * cos(a.u) - alpha / sqrt(1.0 + a.rho * a.rho) + delta * pi * pi * a.rho +
           (delta * (2.0 + cos_w) / 2.0 * pi * pi - cos_w / 12.0) * sin_2px;
  });
  c.noise = {point_fn(0, [](const auto& a) { return a.path[1] / 6.0 * a.space[2]; })};
  c.driver = point_fn(kUsesRho | kUsesU | kUsesReductions, [delta, alpha, gamma](const auto& a) {
    using std::atan;
    const double sin_px = a.space[0];
    const double cos_px = a.space[1];
    const double sin_2px = a.space[2];
    const double cos_2px = a.space[3];
    const double cos_w = a.path[0];
    const double sin_w = a.path[1];
    const double amp = (2.0 + cos_w) / 3.0;
    const auto q = 1.0 + a.rho * a.rho;
    const auto inv_q = 1.0 / q;
    const double grad = 0.5 * pi * pi * cos_px + amp * pi * cos_2px;
    const double lap = 0.5 * pi * pi * pi * sin_px + amp * 2.0 * pi * pi * sin_2px;
    const auto forcing = delta * pi * pi * a.rho + (delta * (2.0 + cos_w) / 2.0 * pi * pi - cos_w / 12.0) * sin_2px;
    return 2.0 * delta * a.rho * inv_q * inv_q * (grad * grad) + 2.0 * delta * inv_q * lap +
           alpha * a.u - alpha * atan(a.rho) +
           a.rho * inv_q * inv_q * (sin_w * sin_w * sin_2px * sin_2px / 36.0) - inv_q * forcing +
           gamma * (a.reductions[0] - (2.0 + cos_w) / 12.0);
  });
  c.terminal = point_fn(kUsesRho, [](const auto& a) {
    using std::atan;
    return atan(a.rho);
  });

  AnalyticSolution sol;
  sol.rho = [](double, double x, double w) {
    return 0.5 * pi * std::sin(pi * x) + (2.0 + std::cos(w)) / 6.0 * std::sin(2.0 * pi * x);
  };
  sol.u = [rho = sol.rho](double t, double x, double w) { return std::atan(rho(t, x, w)); };
  return {std::move(c), std::move(sol)};
}

/// u(t, x, w) at every x in xs.
inline Vec1 analytic_reference_curve(const AnalyticSolution& sol, double t, double w, std::span<const double> xs) {
  Vec1 out;
  out.reserve(xs.size());
  for (double x : xs) {
    if (!(x >= 0.0 && x <= 1.0)) throw std::out_of_range("analytic_reference_curve: x outside [0,1]");
    out.push_back(sol.u(t, x, w));
  }
  return out;
}

/// Evaluates a pointwise coefficient on exact fields (used by consistency checks).
inline double evaluate_pointwise(const SpdeCoefficients& c, const PointFn& fn, double t, double x, double w,
                                 double rho, double grad_rho, double u, double grad_u, std::span<const double> psi,
                                 std::span<const double> reductions) {
  std::vector<double> space, path;
  for (const auto& f : c.spatial_features) space.push_back(f(x));
  const double wv[1] = {w};
  if (c.path_features) c.path_features(t, std::span<const double>(wv, 1), path);
  PointArgs<double> a;
  a.t = t;
  a.x = x;
  a.w = std::span<const double>(wv, 1);
  a.space = space;
  a.path = path;
  a.rho = rho;
  a.grad_rho = grad_rho;
  a.u = u;
  a.grad_u = grad_u;
  a.psi = psi;
  a.reductions = reductions;
  return fn.value(a);
}

}  // namespace fbspde
