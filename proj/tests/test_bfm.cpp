#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "hcfusion/bfm.hpp"

using namespace hcfusion;
using hcfusion::testing::random_tensor;

TEST(BranchWeights, EqualZeroInputsGiveHalves) {
  const Tensor<double> z({1, 2, 3, 3});
  const auto w = branch_weights(z, z);
  for (std::size_t i = 0; i < z.numel(); ++i) {
    EXPECT_DOUBLE_EQ(w.w1[i], 0.5 / (1.0 + 1e-8));
    EXPECT_EQ(w.w1[i], w.w2[i]);
  }
}

TEST(BranchWeights, SaturatedSecondBranch) {
  const Tensor<double> a({1, 1, 1, 1}, std::vector<double>{0.0});
  const Tensor<double> b({1, 1, 1, 1}, std::vector<double>{30.0});
  const auto w = branch_weights(a, b);
  const double s2 = 1.0 / (1.0 + std::exp(-30.0));
  EXPECT_NEAR(w.w1[0], 1.0 / 3.0, 1e-8);
  EXPECT_NEAR(w.w2[0], 2.0 / 3.0, 1e-8);
  EXPECT_DOUBLE_EQ(w.w2[0], s2 / (0.5 + s2 + 1e-8));
}

TEST(BranchWeights, StrictlyInsideUnitIntervalWithSumBelowOne) {
  Rng rng(1);
  for (double range : {1.0, 10.0, 100.0}) {
    const auto a = random_tensor({2, 4, 5, 5}, rng, -range, range), b = random_tensor({2, 4, 5, 5}, rng, -range, range);
    const auto w = branch_weights(a, b);
    for (std::size_t i = 0; i < a.numel(); ++i) {
      EXPECT_GT(w.w1[i], 0.0);
      EXPECT_LT(w.w1[i], 1.0);
      EXPECT_GT(w.w2[i], 0.0);
      EXPECT_LT(w.w2[i], 1.0);
      EXPECT_LT(w.w1[i] + w.w2[i], 1.0);
      const double s = clamped_sigmoid(a[i]) + clamped_sigmoid(b[i]);
      EXPECT_NEAR(w.w1[i] + w.w2[i], s / (s + 1e-8), 1e-15);
      EXPECT_GE(w.w1[i] + w.w2[i], 1.0 - 1e-8 / s - 1e-15);
    }
  }
}

TEST(BranchWeights, SwapSwapsWeights) {
  Rng rng(2);
  const auto a = random_tensor({1, 3, 4, 4}, rng, -5, 5), b = random_tensor({1, 3, 4, 4}, rng, -5, 5);
  const auto w = branch_weights(a, b), s = branch_weights(b, a);
  EXPECT_TRUE(w.w1 == s.w2);
  EXPECT_TRUE(w.w2 == s.w1);
}

TEST(BranchWeights, ExtremeInputsStayFinite) {
  const Tensor<float> a({1, 1, 1, 2}, std::vector<float>{-1e30f, 1e30f});
  const auto w = branch_weights(a, a);
  for (float v : w.w1.values()) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GT(v, 0.0f);
  }
}

TEST(BranchWeights, RejectsMismatchAndNonFinite) {
  EXPECT_THROW(branch_weights(Tensor<float>({1, 2, 2, 2}), Tensor<float>({1, 2, 2, 3})), ShapeError);
  Tensor<float> bad({1, 1, 2, 2});
  bad[0] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(branch_weights(bad, bad), NumericalError);
}

TEST(FuseBranches, ZeroInputGivesZero) {
  const Tensor<double> z({1, 2, 2, 2});
  const auto f = fuse_branches(z, z);
  for (double v : f.values()) EXPECT_EQ(v, 0.0);
}

TEST(FuseBranches, SwapIsBitwiseSymmetric) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<float> a({1, 4, 6, 6}), b({1, 4, 6, 6});
    for (auto& v : a.values()) v = static_cast<float>(rng.uniform(-10, 10));
    for (auto& v : b.values()) v = static_cast<float>(rng.uniform(-10, 10));
    EXPECT_TRUE(fuse_branches(a, b) == fuse_branches(b, a));
  }
}

TEST(FuseBranches, EqualBranchesFollowClosedForm) {
  Rng rng(4);
  const auto phi = random_tensor({1, 4, 4, 4}, rng, -10, 10);
  const auto f = fuse_branches(phi, phi);
  for (std::size_t i = 0; i < phi.numel(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-phi[i]));
    EXPECT_NEAR(f[i], phi[i] * (2 * s / (2 * s + 1e-8)), 1e-14);
  }
}

TEST(FuseBranches, EqualBranchesModerateMagnitudeWithinRelativeBound) {
  Rng rng(5);
  const auto phi = random_tensor({1, 8, 8, 8}, rng, -2, 2);
  const auto f = fuse_branches(phi, phi);
  for (std::size_t i = 0; i < phi.numel(); ++i) EXPECT_LE(std::abs(f[i] - phi[i]), 1e-7 * std::abs(phi[i]));
}

TEST(FuseBranches, BackwardMatchesFiniteDifferences) {
  Rng rng(6);
  auto a = random_tensor({1, 3, 4, 4}, rng, -3, 3), b = random_tensor({1, 3, 4, 4}, rng, -3, 3);
  const auto r = random_tensor({1, 3, 4, 4}, rng);
  const auto [ga, gb] = fuse_branches_backward(a, b, r);
  auto loss = [&] { return hcfusion::testing::probe(fuse_branches(a, b), r); };
  hcfusion::testing::GradCheck report;
  std::vector<std::size_t> all(a.numel());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  hcfusion::testing::check_coords(report, "phi_1", a.data(), ga.data(), all, loss);
  hcfusion::testing::check_coords(report, "phi_2", b.data(), gb.data(), all, loss);
  EXPECT_EQ(report.checked, 2 * a.numel());
  EXPECT_LT(report.max_rel, hcfusion::testing::kFdTolerance) << report.worst;
}

TEST(AverageBranches, EqualBranchesReturnBranch) {
  Rng rng(7);
  const auto phi = random_tensor({1, 4, 3, 3}, rng, -10, 10);
  EXPECT_TRUE(average_branches(phi, phi) == phi);
}

TEST(AverageBranches, IsArithmeticMean) {
  const Tensor<double> a({1, 1, 1, 2}, std::vector<double>{1, -3}), b({1, 1, 1, 2}, std::vector<double>{3, 5});
  const auto m = average_branches(a, b);
  EXPECT_EQ(m[0], 2.0);
  EXPECT_EQ(m[1], 1.0);
}
