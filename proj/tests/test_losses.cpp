#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "hcfusion/losses.hpp"

using namespace hcfusion;
using hcfusion::testing::random_tensor;

namespace {

// Direct evaluation with a freshly built 2-D kernel and centred moments.
double ssim_oracle(const Tensor<double>& x, const Tensor<double>& y, int k, double sigma, double c1, double c2) {
  std::vector<double> g(k * k);
  double total = 0;
  const double c = (k - 1) / 2.0;
  for (int u = 0; u < k; ++u)
    for (int v = 0; v < k; ++v) {
      g[u * k + v] = std::exp(-((u - c) * (u - c) + (v - c) * (v - c)) / (2 * sigma * sigma));
      total += g[u * k + v];
    }
  for (auto& w : g) w /= total;
  const std::size_t P = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  double acc = 0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t i = 0; i + k <= H; ++i)
      for (std::size_t j = 0; j + k <= W; ++j) {
        auto at = [&](const Tensor<double>& t, int u, int v) { return t[(p * H + i + u) * W + j + v]; };
        double mx = 0, my = 0;
        for (int u = 0; u < k; ++u)
          for (int v = 0; v < k; ++v) {
            mx += g[u * k + v] * at(x, u, v);
            my += g[u * k + v] * at(y, u, v);
          }
        double sx = 0, sy = 0, sxy = 0;
        for (int u = 0; u < k; ++u)
          for (int v = 0; v < k; ++v) {
            const double dx = at(x, u, v) - mx, dy = at(y, u, v) - my;
            sx += g[u * k + v] * dx * dx;
            sy += g[u * k + v] * dy * dy;
            sxy += g[u * k + v] * dx * dy;
          }
        acc += (2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sx + sy + c2));
        ++count;
      }
  return acc / static_cast<double>(count);
}

// Checks every coordinate of `target` against `analytic`.
void check_grad(const char* label, const std::function<double()>& f, const Tensor<double>& analytic,
                Tensor<double>& target) {
  hcfusion::testing::GradCheck report;
  std::vector<std::size_t> all(target.numel());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  hcfusion::testing::check_coords(report, label, target.data(), analytic.data(), all, f);
  EXPECT_EQ(report.checked, target.numel());
  EXPECT_LT(report.max_rel, hcfusion::testing::kFdTolerance) << report.worst;
}

}  // namespace

TEST(GaussianWindow, NormalizedAndSymmetric) {
  const auto g = gaussian_window(11, 1.5);
  double sum = 0;
  for (double v : g) sum += v;
  EXPECT_NEAR(sum, 1.0, 1e-14);
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      EXPECT_DOUBLE_EQ(g[i * 11 + j], g[j * 11 + i]);
      EXPECT_DOUBLE_EQ(g[i * 11 + j], g[(10 - i) * 11 + (10 - j)]);
    }
  EXPECT_EQ(std::max_element(g.begin(), g.end()) - g.begin(), 5 * 11 + 5);
}

TEST(SsimParams, StabilizersForUnitRange) {
  const SsimParams p;
  EXPECT_DOUBLE_EQ(p.c1(), 0.0004);
  EXPECT_DOUBLE_EQ(p.c2(), 0.0036);
}

TEST(Mse, ClosedForm) {
  const Tensor<double> a({1, 1, 1, 4}, std::vector<double>{0, 1, 2, 3});
  const Tensor<double> b({1, 1, 1, 4}, std::vector<double>{1, 1, 0, 3});
  EXPECT_DOUBLE_EQ(mse_loss(a, b), 5.0 / 4.0);
  EXPECT_THROW(mse_loss(a, Tensor<double>({1, 1, 2, 2})), ShapeError);
}

TEST(Ssim, IdenticalInputsGiveExactlyOne) {
  Rng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_tensor({2, 1, 16, 13}, rng);
    EXPECT_EQ(ssim(x, x), 1.0);
  }
  Tensor<float> xf({1, 1, 12, 12});
  for (auto& v : xf.values()) v = static_cast<float>(rng.uniform(-1, 1));
  EXPECT_EQ(ssim(xf, xf), 1.0f);
}

TEST(Ssim, MatchesDirectOracle) {
  Rng rng(2);
  const SsimParams p;
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_tensor({2, 1, 16, 20}, rng);
    auto y = x;
    for (auto& v : y.values()) v = std::clamp(v + rng.normal(0, 0.2 * (trial + 1)), -1.0, 1.0);
    EXPECT_NEAR(ssim(x, y), ssim_oracle(x, y, 11, 1.5, p.c1(), p.c2()), 1e-6);
  }
}

TEST(Ssim, ConstantImagesReduceToLuminanceTerm) {
  const SsimParams p;
  const Tensor<double> x({1, 1, 11, 11}, 0.5), y({1, 1, 11, 11}, -0.25);
  const double expected = (2 * 0.5 * -0.25 + p.c1()) / (0.25 + 0.0625 + p.c1());
  EXPECT_NEAR(ssim(x, y), expected, 1e-12);
}

TEST(Ssim, SymmetricAndBounded) {
  Rng rng(3);
  const auto x = random_tensor({1, 1, 16, 16}, rng), y = random_tensor({1, 1, 16, 16}, rng);
  EXPECT_NEAR(ssim(x, y), ssim(y, x), 1e-15);
  EXPECT_LT(ssim(x, y), 1.0);
  EXPECT_GE(ssim(x, y), -1.0);
}

TEST(Ssim, DecreasesWithNoiseAmplitude) {
  Rng rng(4);
  const auto x = random_tensor({1, 1, 24, 24}, rng, -0.5, 0.5);
  const auto n = random_tensor({1, 1, 24, 24}, rng);
  double prev = 1.0;
  for (double amp : {0.01, 0.05, 0.1, 0.2, 0.4}) {
    auto y = x;
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] += amp * n[i];
    const double s = ssim(x, y);
    EXPECT_LT(s, prev) << "amplitude " << amp;
    prev = s;
  }
}

TEST(Ssim, RejectsImagesSmallerThanWindow) {
  EXPECT_THROW(ssim(Tensor<double>({1, 1, 10, 20}), Tensor<double>({1, 1, 10, 20})), ShapeError);
  SsimParams p;
  p.window = 5;
  EXPECT_NO_THROW(ssim(Tensor<double>({1, 1, 5, 5}), Tensor<double>({1, 1, 5, 5}), p));
}

TEST(Ssim, GradientMatchesFiniteDifferencesSmallWindow) {
  Rng rng(5);
  SsimParams p;
  p.window = 5;
  auto x = random_tensor({1, 2, 8, 8}, rng);
  const auto y = random_tensor({1, 2, 8, 8}, rng);
  const auto g = ssim_backward(x, y, 1.0, p);
  check_grad("x", [&] { return ssim(x, y, p); }, g, x);
}

TEST(Ssim, GradientMatchesFiniteDifferencesDefaultWindow) {
  Rng rng(6);
  auto x = random_tensor({1, 1, 12, 12}, rng);
  const auto y = random_tensor({1, 1, 12, 12}, rng);
  const auto g = ssim_backward(x, y, 1.0);
  check_grad("x", [&] { return ssim(x, y); }, g, x);
}

TEST(Ssim, GradientVanishesAtIdentity) {
  Rng rng(7);
  const auto x = random_tensor({1, 1, 12, 12}, rng);
  const auto g = ssim_backward(x, x);
  for (double v : g.values()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(TotalLoss, ZeroForIdenticalInputs) {
  Rng rng(8);
  const auto x = random_tensor({2, 1, 16, 16}, rng);
  EXPECT_NEAR(total_loss(x, x), 0.0, 1e-7);
  Tensor<float> xf({1, 1, 32, 32});
  for (auto& v : xf.values()) v = static_cast<float>(rng.uniform(-1, 1));
  EXPECT_NEAR(total_loss(xf, xf), 0.0f, 1e-7f);
}

TEST(TotalLoss, CombinesTermsWithWeight) {
  Rng rng(9);
  const auto x = random_tensor({1, 1, 12, 12}, rng), y = random_tensor({1, 1, 12, 12}, rng);
  EXPECT_NEAR(total_loss(x, y, LossWeights{3.0}), mse_loss(x, y) + 3.0 * (1.0 - ssim(x, y)), 1e-15);
  EXPECT_EQ(total_loss(x, y, LossWeights{0.0}), mse_loss(x, y));
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
  Rng rng(10);
  LossWeights w;
  w.ssim.window = 7;
  auto x = random_tensor({1, 1, 8, 8}, rng);
  const auto y = random_tensor({1, 1, 8, 8}, rng);
  const auto g = total_loss_backward(x, y, w);
  check_grad("x", [&] { return total_loss(x, y, w); }, g, x);
}

TEST(TotalLoss, GradientMatchesFiniteDifferencesDefaultWindow) {
  Rng rng(11);
  auto x = random_tensor({2, 1, 12, 12}, rng);
  const auto y = random_tensor({2, 1, 12, 12}, rng);
  const auto g = total_loss_backward(x, y);
  check_grad("x", [&] { return total_loss(x, y); }, g, x);
}

TEST(TotalLoss, MseOnlyGradient) {
  const Tensor<double> a({1, 1, 1, 2}, std::vector<double>{1, -1}), b({1, 1, 1, 2}, std::vector<double>{0, 0});
  const auto g = total_loss_backward(a, b, LossWeights{0.0});
  EXPECT_DOUBLE_EQ(g[0], 1.0);
  EXPECT_DOUBLE_EQ(g[1], -1.0);
}
