#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "fbspde/mesh.hpp"
#include "fbspde/numkit.hpp"

namespace fbspde {

/// Piecewise-linear finite-element function in V_h^0: nodal values at the
/// internal nodes, zero on the boundary.
struct FeFunction {
  Vec1 coeffs;
};

/// a_ii = h_i/3 + h_{i+1}/3, a_{i,i+1} = h_{i+1}/6.
inline Tridiag assemble_mass(const Mesh1D& mesh) {
  const int n = mesh.internal_nodes();
  Vec1 diag(n), off(n - 1);
  for (int i = 1; i <= n; ++i) {
    diag[i - 1] = mesh.element_length(i) / 3.0 + mesh.element_length(i + 1) / 3.0;
    if (i < n) off[i - 1] = mesh.element_length(i + 1) / 6.0;
  }
  return Tridiag::symmetric(std::move(diag), std::move(off));
}

/// b_ii = 1/h_i + 1/h_{i+1}, b_{i,i+1} = -1/h_{i+1}.
inline Tridiag assemble_stiffness(const Mesh1D& mesh) {
  const int n = mesh.internal_nodes();
  Vec1 diag(n), off(n - 1);
  for (int i = 1; i <= n; ++i) {
    diag[i - 1] = 1.0 / mesh.element_length(i) + 1.0 / mesh.element_length(i + 1);
    if (i < n) off[i - 1] = -1.0 / mesh.element_length(i + 1);
  }
  return Tridiag::symmetric(std::move(diag), std::move(off));
}

/// Nodal coefficient of internal node `node` (1..L); boundary nodes are zero.
inline double nodal_value(std::span<const double> coeffs, int node) {
  const int n = static_cast<int>(coeffs.size());
  return (node >= 1 && node <= n) ? coeffs[node - 1] : 0.0;
}

/// l-th entry approximates the integral of f * phi_l by per-element quadrature.
template <class F>
Vec1 load_vector(const Mesh1D& mesh, F&& f, const QuadratureRule& rule) {
  const int n = mesh.internal_nodes();
  Vec1 out(n, 0.0);
  for (int e = 1; e <= mesh.elements(); ++e) {
    const double a = mesh.node(e - 1);
    const double h = mesh.element_length(e);
    double left = 0.0, right = 0.0;
    for (int q = 0; q < rule.size(); ++q) {
      const double xi = rule.nodes[q];
      const double fx = f(a + xi * h);
      if (!std::isfinite(fx)) throw std::domain_error("load_vector: non-finite integrand");
      left += rule.weights[q] * fx * (1.0 - xi);
      right += rule.weights[q] * fx * xi;
    }
    if (e - 1 >= 1) out[e - 2] += h * left;
    if (e <= n) out[e - 1] += h * right;
  }
  return out;
}

/// Quadrature point of the assembled system, with its element geometry.
struct QuadPoint {
  int element;      // 1..L+1
  double x;         // physical position
  double weight;    // reference weight times element length
  double xi;        // reference coordinate in [0,1]
  double inv_h;
};

/// Mesh plus assembled mass (A) and stiffness (B) matrices and a cached
/// factorization of A.
class FemSystem {
 public:
  explicit FemSystem(Mesh1D mesh, int quadrature_order = 4)
      : mesh_(std::move(mesh)),
        mass_(assemble_mass(mesh_)),
        stiffness_(assemble_stiffness(mesh_)),
        mass_solver_(mass_),
        rule_(gauss_legendre(quadrature_order)) {
    for (int e = 1; e <= mesh_.elements(); ++e) {
      const double a = mesh_.node(e - 1);
      const double h = mesh_.element_length(e);
      for (int q = 0; q < rule_.size(); ++q) {
        points_.push_back({e, a + rule_.nodes[q] * h, rule_.weights[q] * h, rule_.nodes[q], 1.0 / h});
      }
    }
  }

  const Mesh1D& mesh() const { return mesh_; }
  const Tridiag& mass() const { return mass_; }
  const Tridiag& stiffness() const { return stiffness_; }
  const TridiagSolver& mass_solver() const { return mass_solver_; }
  const QuadratureRule& rule() const { return rule_; }
  const std::vector<QuadPoint>& quadrature_points() const { return points_; }
  int dim() const { return mesh_.internal_nodes(); }

  /// x <- A^{-1} x.
  void apply_mass_inverse(std::span<double> x) const { mass_solver_.solve_in_place(x); }

 private:
  Mesh1D mesh_;
  Tridiag mass_;
  Tridiag stiffness_;
  TridiagSolver mass_solver_;
  QuadratureRule rule_;
  std::vector<QuadPoint> points_;
};

/// Piecewise-linear interpolant value at x; zero at both endpoints.
inline double eval_fe(const Mesh1D& mesh, const FeFunction& u, double x) {
  if (static_cast<int>(u.coeffs.size()) != mesh.internal_nodes()) {
    throw std::invalid_argument("eval_fe: coefficient length differs from L");
  }
  const int e = mesh.locate(x);
  const double a = mesh.node(e - 1);
  const double h = mesh.element_length(e);
  const double xi = (x - a) / h;
  return nodal_value(u.coeffs, e - 1) * (1.0 - xi) + nodal_value(u.coeffs, e) * xi;
}

/// Derivative of the interpolant; at a node the left element's slope is used.
inline double eval_fe_gradient(const Mesh1D& mesh, const FeFunction& u, double x) {
  if (static_cast<int>(u.coeffs.size()) != mesh.internal_nodes()) {
    throw std::invalid_argument("eval_fe_gradient: coefficient length differs from L");
  }
  const int e = mesh.locate(x);
  return (nodal_value(u.coeffs, e) - nodal_value(u.coeffs, e - 1)) / mesh.element_length(e);
}

/// Coefficients c solving A c = load_vector(f).
template <class F>
FeFunction l2_project(const FemSystem& sys, F&& f) {
  Vec1 rhs = load_vector(sys.mesh(), std::forward<F>(f), sys.rule());
  sys.apply_mass_inverse(rhs);
  return FeFunction{std::move(rhs)};
}

/// (integral of (u - ref)^2)^{1/2}, integrated element by element with each
/// element split into `refine` pieces.
template <class F>
double l2_error(const Mesh1D& mesh, const FeFunction& u, F&& ref, int order = 4, int refine = 1) {
  if (static_cast<int>(u.coeffs.size()) != mesh.internal_nodes()) {
    throw std::invalid_argument("l2_error: coefficient length differs from L");
  }
  const QuadratureRule rule = gauss_legendre(order);
  double total = 0.0;
  for (int e = 1; e <= mesh.elements(); ++e) {
    const double a = mesh.node(e - 1);
    const double h = mesh.element_length(e);
    const double left = nodal_value(u.coeffs, e - 1);
    const double right = nodal_value(u.coeffs, e);
    for (int s = 0; s < refine; ++s) {
      for (int q = 0; q < rule.size(); ++q) {
        const double xi = (s + rule.nodes[q]) / refine;
        const double x = a + xi * h;
        const double diff = left * (1.0 - xi) + right * xi - ref(x);
        total += rule.weights[q] * h / refine * diff * diff;
      }
    }
  }
  return std::sqrt(total);
}

inline double l2_norm(const Mesh1D& mesh, const FeFunction& u) {
  return l2_error(mesh, u, [](double) { return 0.0; });
}

}  // namespace fbspde
