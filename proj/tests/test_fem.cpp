#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "fbspde/fem.hpp"
#include "fbspde/random.hpp"

using namespace fbspde;

namespace {

constexpr double pi = std::numbers::pi;

Mesh1D random_mesh(SplitMix64& rng, int L) {
  std::vector<double> nodes{0.0};
  for (int i = 0; i < L; ++i) nodes.push_back(nodes.back() + rng.uniform(0.5, 1.5));
  const double total = nodes.back() + rng.uniform(0.5, 1.5);
  for (auto& v : nodes) v /= total;
  nodes.push_back(1.0);
  return Mesh1D(nodes);
}

double hat(const Mesh1D& m, int l, double x) {
  const double a = m.node(l - 1), b = m.node(l), c = m.node(l + 1);
  if (x <= a || x >= c) return 0.0;
  return x <= b ? (x - a) / (b - a) : (c - x) / (c - b);
}

double hat_slope(const Mesh1D& m, int l, double x) {
  const double a = m.node(l - 1), b = m.node(l), c = m.node(l + 1);
  if (x <= a || x >= c) return 0.0;
  return x <= b ? 1.0 / (b - a) : -1.0 / (c - b);
}

// Composite midpoint rule with many cells per element; a slow but simple
// reference for integrals of products of hats.
template <class F>
double fine_integral(const Mesh1D& m, F&& f, int cells = 2000) {
  double total = 0.0;
  for (int e = 1; e <= m.elements(); ++e) {
    const double a = m.node(e - 1), h = m.element_length(e);
    for (int c = 0; c < cells; ++c) total += f(a + (c + 0.5) * h / cells) * h / cells;
  }
  return total;
}

}  // namespace

TEST(Mesh, UniformSpacingAndLocate) {
  const Mesh1D m = Mesh1D::uniform(4);
  EXPECT_EQ(m.internal_nodes(), 4);
  EXPECT_EQ(m.elements(), 5);
  EXPECT_DOUBLE_EQ(m.max_h(), 0.2);
  EXPECT_EQ(m.locate(0.0), 1);
  EXPECT_EQ(m.locate(0.1), 1);
  EXPECT_EQ(m.locate(0.2), 1);
  EXPECT_EQ(m.locate(0.21), 2);
  EXPECT_EQ(m.locate(1.0), 5);
  EXPECT_THROW(m.locate(1.5), std::out_of_range);
  EXPECT_THROW(Mesh1D::uniform(0), std::invalid_argument);
  EXPECT_THROW(Mesh1D({0.0, 0.6, 0.4, 1.0}), std::invalid_argument);
  EXPECT_THROW(Mesh1D({0.0, 0.5, 0.9}), std::invalid_argument);
}

TEST(Assembly, UniformMeshEntries) {
  const Mesh1D m = Mesh1D::uniform(3);
  const Tridiag a = assemble_mass(m);
  const Tridiag b = assemble_stiffness(m);
  for (int i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(a.diag[i], 2.0 * 0.25 / 3.0);
    EXPECT_DOUBLE_EQ(b.diag[i], 8.0);
  }
  for (int i = 0; i < 2; ++i) {
    EXPECT_DOUBLE_EQ(a.sub[i], 0.25 / 6.0);
    EXPECT_DOUBLE_EQ(b.sub[i], -4.0);
  }
  EXPECT_TRUE(a.is_symmetric());
  EXPECT_TRUE(b.is_symmetric());
}

TEST(Assembly, MatchesIntegralsOfHatFunctionsOnRandomMeshes) {
  SplitMix64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const Mesh1D m = random_mesh(rng, 4 + trial);
    const Tridiag a = assemble_mass(m);
    const Tridiag b = assemble_stiffness(m);
    const int L = m.internal_nodes();
    for (int i = 1; i <= L; ++i) {
      for (int j = i; j <= std::min(L, i + 1); ++j) {
        const double mass = fine_integral(m, [&](double x) { return hat(m, i, x) * hat(m, j, x); });
        const double stiff = fine_integral(m, [&](double x) { return hat_slope(m, i, x) * hat_slope(m, j, x); });
        const double got_a = i == j ? a.diag[i - 1] : a.sup[i - 1];
        const double got_b = i == j ? b.diag[i - 1] : b.sup[i - 1];
        EXPECT_NEAR(got_a, mass, 1e-7);
        EXPECT_NEAR(got_b, stiff, 1e-6 * std::abs(stiff));
      }
    }
  }
}

TEST(Assembly, MassRowSumsAreHatIntegrals) {
  SplitMix64 rng(8);
  const Mesh1D m = random_mesh(rng, 7);
  const Tridiag a = assemble_mass(m);
  const Vec1 ones(7, 1.0);
  const Vec1 s = a.apply(ones);
  // Interior rows see the full partition of unity.
  for (int i = 2; i <= 6; ++i) {
    EXPECT_NEAR(s[i - 1], 0.5 * (m.element_length(i) + m.element_length(i + 1)), 1e-15);
  }
}

TEST(Assembly, StiffnessAnnihilatesLinearFunctionsAwayFromBoundary) {
  SplitMix64 rng(9);
  const Mesh1D m = random_mesh(rng, 6);
  const Tridiag b = assemble_stiffness(m);
  Vec1 lin(6);
  for (int i = 1; i <= 6; ++i) lin[i - 1] = 3.0 * m.node(i) + 1.0;
  const Vec1 r = b.apply(lin);
  for (int i = 2; i <= 5; ++i) EXPECT_NEAR(r[i - 1], 0.0, 1e-12);
}

TEST(FeFunction, EvaluationAndGradient) {
  const Mesh1D m = Mesh1D::uniform(3);
  const FeFunction u{{1.0, 2.0, -1.0}};
  EXPECT_DOUBLE_EQ(eval_fe(m, u, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(eval_fe(m, u, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(eval_fe(m, u, 0.25), 1.0);
  EXPECT_DOUBLE_EQ(eval_fe(m, u, 0.375), 1.5);
  EXPECT_DOUBLE_EQ(eval_fe(m, u, 0.875), -0.5);
  EXPECT_DOUBLE_EQ(eval_fe_gradient(m, u, 0.1), 4.0);
  EXPECT_DOUBLE_EQ(eval_fe_gradient(m, u, 0.25), 4.0);  // left element at a node
  EXPECT_DOUBLE_EQ(eval_fe_gradient(m, u, 0.3), 4.0);
  EXPECT_DOUBLE_EQ(eval_fe_gradient(m, u, 0.6), -12.0);
  EXPECT_THROW(eval_fe(m, FeFunction{{1.0}}, 0.5), std::invalid_argument);
}

TEST(Projection, FeFunctionIsReproduced) {
  SplitMix64 rng(4);
  const FemSystem sys(random_mesh(rng, 9));
  FeFunction v{Vec1(9)};
  for (auto& c : v.coeffs) c = rng.uniform(-1.0, 1.0);
  const FeFunction p = l2_project(sys, [&](double x) { return eval_fe(sys.mesh(), v, x); });
  for (int i = 0; i < 9; ++i) EXPECT_NEAR(p.coeffs[i], v.coeffs[i], 1e-12);
  EXPECT_NEAR(l2_error(sys.mesh(), p, [&](double x) { return eval_fe(sys.mesh(), v, x); }), 0.0, 1e-12);
}

TEST(Projection, SecondOrderRateForSine) {
  auto f = [](double x) { return std::sin(pi * x); };
  std::vector<double> err, h;
  for (int L : {7, 15, 31, 63}) {
    const FemSystem sys(Mesh1D::uniform(L));
    err.push_back(l2_error(sys.mesh(), l2_project(sys, f), f, 6, 4));
    h.push_back(sys.mesh().max_h());
  }
  for (std::size_t i = 0; i + 1 < err.size(); ++i) {
    const double rate = std::log(err[i] / err[i + 1]) / std::log(h[i] / h[i + 1]);
    EXPECT_GE(rate, 1.85);
    EXPECT_LE(rate, 2.15);
  }
}

TEST(Projection, LoadVectorOfConstantIsHatIntegral) {
  const Mesh1D m = Mesh1D::uniform(4);
  const Vec1 f = load_vector(m, [](double) { return 2.0; }, gauss_legendre(2));
  for (double v : f) EXPECT_NEAR(v, 2.0 * 0.2, 1e-15);
  EXPECT_THROW(load_vector(m, [](double) { return std::nan(""); }, gauss_legendre(2)), std::domain_error);
}

TEST(Norms, L2NormOfHat) {
  const Mesh1D m = Mesh1D::uniform(1);
  const FeFunction u{{1.0}};
  // integral of the hat squared over (0,1) is 1/3
  EXPECT_NEAR(l2_norm(m, u), std::sqrt(1.0 / 3.0), 1e-15);
}

TEST(FemSystem, QuadraturePointsCoverTheInterval) {
  const FemSystem sys(Mesh1D::uniform(5), 4);
  double total = 0.0;
  for (const auto& q : sys.quadrature_points()) total += q.weight;
  EXPECT_NEAR(total, 1.0, 1e-14);
  EXPECT_EQ(sys.quadrature_points().size(), 6u * 4u);
  Vec1 x{1.0, 0.0, 0.0, 0.0, 0.0};
  const Vec1 ax = sys.mass().apply(x);
  Vec1 back = ax;
  sys.apply_mass_inverse(back);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(back[i], x[i], 1e-14);
}
