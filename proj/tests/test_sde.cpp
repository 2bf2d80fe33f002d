#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <stdexcept>

#include "fbspde/fem.hpp"
#include "fbspde/problems.hpp"
#include "fbspde/random.hpp"
#include "fbspde/sde.hpp"

using namespace fbspde;

namespace {

// dX = -a X dt - s dW on R^n with constant s, no coupling.
FbsdeProblem ou_problem(int n, double a, double s) {
  FbsdeProblem p;
  p.dim = n;
  p.noise_dim = 1;
  p.initial_state.assign(n, 1.0);
  p.drift = [n, a](const PointInputs& in, std::span<double> out) {
    for (int l = 0; l < n; ++l) out[l] = -a * in.x[l];
  };
  p.diffusion = [n, s](const PointInputs&, std::span<double> out) {
    for (int l = 0; l < n; ++l) out[l] = s;
  };
  p.driver = [](const PointInputs&, std::span<double> out) { std::fill(out.begin(), out.end(), 0.0); };
  p.terminal = [](std::span<const double> x, std::span<double> out) { std::copy(x.begin(), x.end(), out.begin()); };
  return p;
}

}  // namespace

TEST(TimeGrid, UniformGridAndValidation) {
  const TimeGrid g = TimeGrid::uniform(0.5, 0.05);
  EXPECT_EQ(g.steps(), 10);
  EXPECT_DOUBLE_EQ(g.horizon(), 0.5);
  EXPECT_NEAR(g.dt(3), 0.05, 1e-15);
  EXPECT_NEAR(g.time(10), 0.5, 0.0);
  EXPECT_EQ(TimeGrid::uniform(0.5, 0.001).steps(), 500);
  EXPECT_THROW(TimeGrid::uniform(0.5, 0.03), std::invalid_argument);
  EXPECT_THROW(TimeGrid::uniform(0.5, 0.0), std::invalid_argument);
  EXPECT_THROW(TimeGrid({0.0, 0.2, 0.1}), std::invalid_argument);
}

TEST(Brownian, MomentsWithinFourSigma) {
  const TimeGrid g = TimeGrid::uniform(1.0, 0.25);
  const int B = 20000;
  const BrownianBatch bm = make_brownian(99, B, g, 2);
  for (int j = 0; j < g.steps(); ++j) {
    for (int c = 0; c < 2; ++c) {
      double s1 = 0.0, s2 = 0.0, s4 = 0.0;
      for (int b = 0; b < B; ++b) {
        const double d = bm.increment(b, j)[c];
        s1 += d;
        s2 += d * d;
        s4 += d * d * d * d;
      }
      const double dt = g.dt(j);
      const double mean = s1 / B, var = s2 / B;
      // sd of the sample mean is sqrt(dt/B); of the sample second moment sqrt(2 dt^2 / B)
      EXPECT_LE(std::abs(mean), 4.0 * std::sqrt(dt / B));
      EXPECT_LE(std::abs(var - dt), 4.0 * std::sqrt(2.0 * dt * dt / B));
      EXPECT_LE(std::abs(s4 / B - 3.0 * dt * dt), 4.0 * std::sqrt(96.0 * dt * dt * dt * dt / B));
    }
  }
  // Channels and steps are uncorrelated.
  double cross = 0.0;
  for (int b = 0; b < B; ++b) cross += bm.increment(b, 0)[0] * bm.increment(b, 0)[1];
  EXPECT_LE(std::abs(cross / B), 4.0 * 0.25 / std::sqrt(B));
}

TEST(Brownian, ValuesAreCumulativeSums) {
  const TimeGrid g = TimeGrid::uniform(0.5, 0.1);
  const BrownianBatch bm = make_brownian(1, 3, g);
  for (int b = 0; b < 3; ++b) {
    double w = 0.0;
    EXPECT_EQ(bm.value(b, 0)[0], 0.0);
    for (int j = 0; j < 5; ++j) {
      w += bm.increment(b, j)[0];
      EXPECT_NEAR(bm.value(b, j + 1)[0], w, 1e-15);
    }
  }
}

TEST(Brownian, DeterministicAndPrefixStable) {
  const TimeGrid g = TimeGrid::uniform(0.5, 0.05);
  const BrownianBatch a = make_brownian(42, 8, g);
  const BrownianBatch b = make_brownian(42, 16, g);
  const BrownianBatch c = make_brownian(42, 8, g, 1, 8);
  for (int p = 0; p < 8; ++p) {
    for (int j = 0; j < 10; ++j) {
      EXPECT_EQ(a.increment(p, j)[0], b.increment(p, j)[0]);
      EXPECT_EQ(c.increment(p, j)[0], b.increment(p + 8, j)[0]);
    }
  }
  const BrownianBatch d = make_brownian(43, 8, g);
  EXPECT_NE(a.increment(0, 0)[0], d.increment(0, 0)[0]);
}

TEST(Brownian, CoarseningKeepsTheSamePath) {
  const TimeGrid fine = TimeGrid::uniform(0.5, 0.01);
  const BrownianBatch f = make_brownian(5, 4, fine);
  const BrownianBatch c = coarsen(f, 5);
  EXPECT_EQ(c.steps, 10);
  for (int b = 0; b < 4; ++b) {
    EXPECT_EQ(c.value(b, 10)[0], f.value(b, 50)[0]);
    double s = 0.0;
    for (int j = 0; j < 5; ++j) s += f.increment(b, j)[0];
    EXPECT_NEAR(c.increment(b, 0)[0], s, 1e-15);
  }
  EXPECT_THROW(coarsen(f, 7), std::invalid_argument);
}

TEST(PropagateY, MatchesHandComputation) {
  const Vec1 y{1.0, 2.0}, z{0.5, -1.0}, b{3.0, 4.0}, dw{0.2};
  const Vec1 out = propagate_y(y, z, b, 0.1, dw);
  EXPECT_DOUBLE_EQ(out[0], 1.0 - 0.3 + 0.1);
  EXPECT_DOUBLE_EQ(out[1], 2.0 - 0.4 - 0.2);
  const Vec1 bad_z{1.0};
  EXPECT_THROW(propagate_y(y, bad_z, b, 0.1, dw), std::invalid_argument);
}

TEST(ExplicitEuler, AdditiveNoiseWithoutDriftIsExact) {
  FbsdeProblem p = ou_problem(3, 0.0, 0.7);
  const TimeGrid g = TimeGrid::uniform(0.5, 0.05);
  const BrownianBatch bm = make_brownian(3, 5, g);
  const ForwardPathBatch x = euler_forward_explicit(p, g, bm);
  for (int b = 0; b < 5; ++b) {
    for (int l = 0; l < 3; ++l) EXPECT_NEAR(x.state(b, 10)[l], 1.0 - 0.7 * bm.value(b, 10)[0], 1e-14);
  }
}

TEST(ExplicitEuler, MeanOfOuProcessMatchesRecursion) {
  FbsdeProblem p = ou_problem(1, 2.0, 0.5);
  const TimeGrid g = TimeGrid::uniform(0.5, 0.05);
  const int B = 40000;
  const ForwardPathBatch x = euler_forward_explicit(p, g, make_brownian(8, B, g));
  double mean = 0.0, sq = 0.0;
  for (int b = 0; b < B; ++b) {
    mean += x.state(b, 10)[0];
    sq += x.state(b, 10)[0] * x.state(b, 10)[0];
  }
  mean /= B;
  const double var = sq / B - mean * mean;
  // E X_J = (1 - a dt)^J; Var X_J = s^2 dt sum_{i<J} (1 - a dt)^{2i}
  const double r = 1.0 - 2.0 * 0.05;
  double v = 0.0;
  for (int i = 0; i < 10; ++i) v += std::pow(r, 2 * i);
  v *= 0.25 * 0.05;
  EXPECT_NEAR(mean, std::pow(r, 10), 4.0 * std::sqrt(v / B));
  EXPECT_NEAR(var, v, 4.0 * v * std::sqrt(2.0 / B));
}

TEST(SemiImplicit, ReducesToExplicitWithoutDiffusion) {
  auto sys = std::make_shared<const FemSystem>(Mesh1D::uniform(6));
  const ExampleSetup ex = example1({0.5, 0.0, 1.0});
  const FbsdeProblem p = build_fd_fbsde(sys, ex.coefficients);
  const TimeGrid g = TimeGrid::uniform(0.5, 0.05);
  const BrownianBatch bm = make_brownian(12, 4, g);
  const ForwardPathBatch a = euler_forward_explicit(p, g, bm);
  const ForwardPathBatch b = euler_forward_semi_implicit(*sys, p, g, bm);
  EXPECT_EQ(a.data, b.data);
}

TEST(SemiImplicit, HeatStepMatchesLinearSolve) {
  auto sys = std::make_shared<const FemSystem>(Mesh1D::uniform(8));
  const FbsdeProblem p = build_fd_fbsde(sys, example1({0.5, 0.2, 0.0}).coefficients);
  const TimeGrid g = TimeGrid::uniform(0.5, 0.1);
  const ForwardPathBatch x = euler_forward_semi_implicit(*sys, p, g, make_brownian(1, 1, g));
  // (A + delta dt B) x_1 = A x_0
  const Tridiag m = sys->mass().combine(1.0, sys->stiffness(), 0.2 * 0.1);
  const Vec1 lhs = m.apply(Vec1(x.state(0, 1).begin(), x.state(0, 1).end()));
  const Vec1 rhs = sys->mass().apply(p.initial_state);
  for (int l = 0; l < 8; ++l) EXPECT_NEAR(lhs[l], rhs[l], 1e-14);
}

TEST(Propagators, CoupledProblemNeedsProviders) {
  auto sys = std::make_shared<const FemSystem>(Mesh1D::uniform(4));
  const FbsdeProblem p = build_fd_fbsde(sys, example2().coefficients);
  ASSERT_TRUE(p.forward_depends_on_yz);
  const TimeGrid g = TimeGrid::uniform(0.5, 0.05);
  EXPECT_THROW(euler_forward_explicit(p, g, make_brownian(1, 2, g)), std::invalid_argument);
  const StateProvider zero = [](int, int, std::span<const double>, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
  };
  EXPECT_NO_THROW(euler_forward_explicit(p, g, make_brownian(1, 2, g), zero, zero));
}

TEST(Propagators, NonFiniteStateIsReported) {
  FbsdeProblem p = ou_problem(2, 0.0, 1.0);
  p.drift = [](const PointInputs&, std::span<double> out) { std::fill(out.begin(), out.end(), std::nan("")); };
  const TimeGrid g = TimeGrid::uniform(0.5, 0.05);
  try {
    euler_forward_explicit(p, g, make_brownian(1, 2, g));
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.index(), 1);
  }
}

TEST(Propagators, ShapeMismatchRejected) {
  FbsdeProblem p = ou_problem(2, 0.0, 1.0);
  const TimeGrid g = TimeGrid::uniform(0.5, 0.05);
  const TimeGrid other = TimeGrid::uniform(0.5, 0.1);
  EXPECT_THROW(euler_forward_explicit(p, g, make_brownian(1, 2, other)), std::invalid_argument);
}
