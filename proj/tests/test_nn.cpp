#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include "fbspde/nn.hpp"
#include "fbspde/numkit.hpp"

using namespace fbspde;

TEST(Mlp, ParameterLayoutAndCount) {
  const MlpParams p({3, 5, 2});
  EXPECT_EQ(p.size(), static_cast<std::size_t>(3 * 5 + 5 + 5 * 2 + 2));
  EXPECT_EQ(p.layers(), 2);
  EXPECT_EQ(p.weight(0).rows(), 5);
  EXPECT_EQ(p.weight(0).cols(), 3);
  EXPECT_THROW(MlpParams({3}), std::invalid_argument);
  EXPECT_THROW(MlpParams({3, 0, 1}), std::invalid_argument);
}

TEST(Mlp, ForwardMatchesHandComputation) {
  MlpParams p({2, 2, 1});
  p.weight(0) << 1.0, -1.0, 0.5, 2.0;
  p.bias(0) << 0.1, -0.2;
  p.weight(1) << 3.0, -1.0;
  p.bias(1) << 0.5;
  RowMatrix x(1, 2);
  x << 0.3, 0.7;
  const double h0 = std::tanh(0.3 - 0.7 + 0.1);
  const double h1 = std::tanh(0.15 + 1.4 - 0.2);
  EXPECT_NEAR(mlp_forward(p, x)(0, 0), 3.0 * h0 - h1 + 0.5, 1e-15);
  EXPECT_THROW(mlp_forward(p, RowMatrix(1, 3)), std::invalid_argument);
}

TEST(Mlp, ZeroNetworkOutputsItsBias) {
  MlpParams p({4, 14, 14, 4});
  p.bias(2).setConstant(0.25);
  const RowMatrix x = RowMatrix::Random(6, 4);
  const RowMatrix y = mlp_forward(p, x);
  EXPECT_TRUE((y.array() == 0.25).all());
}

TEST(Mlp, BackwardAgreesWithFiniteDifferences) {
  const MlpParams p = init_params(17, {3, 6, 6, 2});
  RowMatrix x(4, 3), w(4, 2);
  SplitMix64 rng(2);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1.0, 1.0);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-1.0, 1.0);
  auto [y, tape] = mlp_forward_taped(p, x);
  const MlpGradients g = mlp_backward(p, tape, w);
  auto objective = [&](const MlpParams& q, const RowMatrix& xx) { return (mlp_forward(q, xx).array() * w.array()).sum(); };
  for (std::size_t i = 0; i < p.size(); ++i) {
    MlpParams up = p, down = p;
    up.data()[i] += 1e-6;
    down.data()[i] -= 1e-6;
    const double fd = (objective(up, x) - objective(down, x)) / 2e-6;
    EXPECT_NEAR(g.params.data()[i], fd, 1e-8 * std::max(1.0, std::abs(fd)));
  }
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    RowMatrix up = x, down = x;
    up.data()[i] += 1e-6;
    down.data()[i] -= 1e-6;
    const double fd = (objective(p, up) - objective(p, down)) / 2e-6;
    EXPECT_NEAR(g.input.data()[i], fd, 1e-8 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Mlp, TapeCannotBeReused) {
  const MlpParams p = init_params(1, {2, 3, 1});
  auto [y, tape] = mlp_forward_taped(p, RowMatrix::Ones(2, 2));
  MlpParams g(p.sizes());
  mlp_backward(p, tape, RowMatrix::Ones(2, 1), g);
  EXPECT_THROW(mlp_backward(p, tape, RowMatrix::Ones(2, 1), g), std::logic_error);
}

TEST(Mlp, GradientsAccumulate) {
  const MlpParams p = init_params(4, {2, 3, 1});
  const RowMatrix x = RowMatrix::Ones(3, 2);
  MlpParams once(p.sizes()), twice(p.sizes());
  for (int k = 0; k < 2; ++k) {
    Tape t;
    mlp_forward(p, x, &t);
    mlp_backward(p, t, RowMatrix::Ones(3, 1), twice);
  }
  Tape t;
  mlp_forward(p, x, &t);
  mlp_backward(p, t, RowMatrix::Ones(3, 1), once);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(twice.data()[i], 2.0 * once.data()[i], 1e-15);
}

TEST(Mlp, XavierInitIsBoundedAndSeeded) {
  const MlpParams a = init_params(5, {20, 30, 30, 20});
  const MlpParams b = init_params(5, {20, 30, 30, 20});
  const MlpParams c = init_params(6, {20, 30, 30, 20});
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
  const double bound = std::sqrt(6.0 / 50.0);
  EXPECT_LE(a.weight(0).cwiseAbs().maxCoeff(), bound);
  EXPECT_EQ(a.bias(1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstTheGradientSign) {
  Vec1 x{1.0, -2.0, 0.0};
  const Vec1 g{0.3, -5.0, 0.0};
  AdamState s(3, AdamHyper{});
  adam_step(x, g, s);
  EXPECT_NEAR(x[0], 1.0 - 1e-3, 1e-10);
  EXPECT_NEAR(x[1], -2.0 + 1e-3, 1e-10);
  EXPECT_EQ(x[2], 0.0);
}

TEST(Adam, MinimizesAQuadratic) {
  Vec1 x{3.0, -4.0};
  AdamState s(2, AdamHyper{0.05});
  for (int it = 0; it < 3000; ++it) {
    const Vec1 g{2.0 * (x[0] - 1.0), 4.0 * (x[1] + 0.5)};
    adam_step(x, g, s);
  }
  EXPECT_NEAR(x[0], 1.0, 1e-3);
  EXPECT_NEAR(x[1], -0.5, 1e-3);
}

TEST(Adam, ShapeMismatchThrows) {
  Vec1 x{1.0};
  const Vec1 g{1.0, 2.0};
  AdamState s(1, AdamHyper{});
  EXPECT_THROW(adam_step(x, g, s), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsExact) {
  const MlpParams p = init_params(9, {3, 7, 2});
  const auto path = std::filesystem::temp_directory_path() / "fbspde_ckpt_test.txt";
  save_checkpoint(path.string(), p);
  const MlpParams q = load_checkpoint(path.string());
  EXPECT_TRUE(p == q);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint((path.string() + ".missing")), std::runtime_error);
}
