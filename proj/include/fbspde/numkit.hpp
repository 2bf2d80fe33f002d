#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fbspde/mesh.hpp"

namespace fbspde {

using Vec1 = std::vector<double>;

inline void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw std::domain_error(std::string(what) + ": non-finite input");
  }
}

/// Tridiagonal matrix stored by bands. sub[i] = m(i+1, i), sup[i] = m(i, i+1).
struct Tridiag {
  Vec1 sub;
  Vec1 diag;
  Vec1 sup;

  Tridiag() = default;
  Tridiag(Vec1 sub_band, Vec1 diag_band, Vec1 sup_band)
      : sub(std::move(sub_band)), diag(std::move(diag_band)), sup(std::move(sup_band)) {
    const std::size_t n = diag.size();
    if (n == 0 || sub.size() != n - 1 || sup.size() != n - 1) {
      throw std::invalid_argument("Tridiag: band lengths must be n-1, n, n-1");
    }
  }

  static Tridiag symmetric(Vec1 diag_band, Vec1 off_band) {
    Vec1 copy = off_band;
    return Tridiag(std::move(copy), std::move(diag_band), std::move(off_band));
  }

  int size() const { return static_cast<int>(diag.size()); }

  bool is_symmetric() const { return sub == sup; }

  double max_abs() const {
    double s = 0.0;
    for (double v : diag) s = std::max(s, std::abs(v));
    for (double v : sub) s = std::max(s, std::abs(v));
    for (double v : sup) s = std::max(s, std::abs(v));
    return s;
  }

  /// out = m * x. `out` must not alias `x`.
  void apply(std::span<const double> x, std::span<double> out) const {
    const int n = size();
    if (static_cast<int>(x.size()) != n || static_cast<int>(out.size()) != n) {
      throw std::invalid_argument("Tridiag::apply: dimension mismatch");
    }
    for (int i = 0; i < n; ++i) {
      double acc = diag[i] * x[i];
      if (i > 0) acc += sub[i - 1] * x[i - 1];
      if (i + 1 < n) acc += sup[i] * x[i + 1];
      out[i] = acc;
    }
  }

  Vec1 apply(std::span<const double> x) const {
    Vec1 out(x.size());
    apply(x, out);
    return out;
  }

  /// Linear combination a*this + b*other (same dimension).
  Tridiag combine(double a, const Tridiag& other, double b) const {
    if (other.size() != size()) throw std::invalid_argument("Tridiag::combine: dimension mismatch");
    Tridiag r = *this;
    for (std::size_t i = 0; i < diag.size(); ++i) r.diag[i] = a * diag[i] + b * other.diag[i];
    for (std::size_t i = 0; i < sub.size(); ++i) {
      r.sub[i] = a * sub[i] + b * other.sub[i];
      r.sup[i] = a * sup[i] + b * other.sup[i];
    }
    return r;
  }
};

/// Thomas factorization of a tridiagonal matrix, reusable across right-hand sides.
class TridiagSolver {
 public:
  TridiagSolver() = default;

  explicit TridiagSolver(const Tridiag& m) : sub_(m.sub) {
    const int n = m.size();
    require_finite(m.diag, "TridiagSolver");
    require_finite(m.sub, "TridiagSolver");
    require_finite(m.sup, "TridiagSolver");
    const double scale = m.max_abs();
    upper_.resize(n > 0 ? n - 1 : 0);
    inv_pivot_.resize(n);
    double pivot = m.diag[0];
    for (int i = 0; i < n; ++i) {
      if (i > 0) pivot = m.diag[i] - m.sub[i - 1] * upper_[i - 1];
      if (!(std::abs(pivot) >= 1e-14 * scale) || scale == 0.0) {
        throw std::runtime_error("TridiagSolver: singular pivot at row " + std::to_string(i));
      }
      inv_pivot_[i] = 1.0 / pivot;
      if (i + 1 < n) upper_[i] = m.sup[i] * inv_pivot_[i];
    }
  }

  int size() const { return static_cast<int>(inv_pivot_.size()); }

  /// In-place solve; `x` holds the right-hand side on entry.
  void solve_in_place(std::span<double> x) const {
    const int n = size();
    if (static_cast<int>(x.size()) != n) throw std::invalid_argument("TridiagSolver: dimension mismatch");
    x[0] *= inv_pivot_[0];
    for (int i = 1; i < n; ++i) x[i] = (x[i] - sub_[i - 1] * x[i - 1]) * inv_pivot_[i];
    for (int i = n - 2; i >= 0; --i) x[i] -= upper_[i] * x[i + 1];
  }

  Vec1 solve(std::span<const double> rhs) const {
    require_finite(rhs, "TridiagSolver::solve");
    Vec1 x(rhs.begin(), rhs.end());
    solve_in_place(x);
    return x;
  }

 private:
  Vec1 sub_;
  Vec1 upper_;
  Vec1 inv_pivot_;
};

inline Vec1 solve_tridiag(const Tridiag& m, std::span<const double> rhs) {
  if (static_cast<int>(rhs.size()) != m.size()) {
    throw std::invalid_argument("solve_tridiag: dimension mismatch");
  }
  return TridiagSolver(m).solve(rhs);
}

/// Quadrature on the reference element [0,1]; weights sum to 1.
struct QuadratureRule {
  Vec1 nodes;
  Vec1 weights;
  int order = 0;

  int size() const { return static_cast<int>(nodes.size()); }
};

/// Gauss-Legendre rule with `order` points mapped to [0,1]; exact through
/// degree 2*order-1.
inline QuadratureRule gauss_legendre(int order) {
  if (order < 1 || order > 10) throw std::invalid_argument("gauss_legendre: order must be in 1..10");
  QuadratureRule rule;
  rule.order = order;
  rule.nodes.resize(order);
  rule.weights.resize(order);
  const int n = order;
  for (int i = 0; i < (n + 1) / 2; ++i) {
    // Newton iteration on P_n from the Chebyshev-like initial guess.
    double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = 0.0;
      for (int k = 1; k <= n; ++k) {
        const double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / k;
      }
      dp = n * (z * p0 - p1) / (z * z - 1.0);
      const double dz = p0 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-16) break;
    }
    // Recompute derivative at the converged root.
    {
      double p0 = 1.0, p1 = 0.0;
      for (int k = 1; k <= n; ++k) {
        const double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / k;
      }
      dp = n * (z * p0 - p1) / (z * z - 1.0);
    }
    const double w = 2.0 / ((1.0 - z * z) * dp * dp);
    // Map [-1,1] -> [0,1]: x = (1 - z)/2 gives ascending order for descending z.
    rule.nodes[i] = 0.5 * (1.0 - z);
    rule.nodes[n - 1 - i] = 0.5 * (1.0 + z);
    rule.weights[i] = 0.5 * w;
    rule.weights[n - 1 - i] = 0.5 * w;
  }
  if (n % 2 == 1) rule.nodes[n / 2] = 0.5;
  return rule;
}

/// Composite quadrature of f*g over (0,1) using the mesh elements.
template <class F, class G>
double l2_inner_grid(F&& f, G&& g, const QuadratureRule& rule, const Mesh1D& mesh) {
  double total = 0.0;
  for (int e = 1; e <= mesh.elements(); ++e) {
    const double a = mesh.node(e - 1);
    const double h = mesh.element_length(e);
    double local = 0.0;
    for (int q = 0; q < rule.size(); ++q) {
      const double x = a + rule.nodes[q] * h;
      local += rule.weights[q] * f(x) * g(x);
    }
    total += h * local;
  }
  return total;
}

}  // namespace fbspde
