#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "hcfusion/encoder.hpp"

using namespace hcfusion;
using hcfusion::testing::random_tensor;

namespace {

NetworkConfig small_config(int channels = 8) {
  NetworkConfig cfg;
  cfg.encoder_channels = channels;
  return cfg;
}

}  // namespace

TEST(Encoder, PreservesResolution) {
  NetworkConfig cfg;
  Rng rng(1);
  CanEncoder<float> enc("encoder", cfg);
  enc.init(rng);
  Tensor<float> x({1, 1, 64, 64});
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-1, 1));
  EXPECT_EQ(enc.forward(x).shape(), (Shape{1, 64, 64, 64}));
}

TEST(Encoder, RandomSizesKeepSpatialDims) {
  Rng rng(2);
  CanEncoder<double> enc("encoder", small_config(4));
  enc.init(rng);
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t h = 3 + rng.index(20), w = 3 + rng.index(20), b = 1 + rng.index(2);
    const auto y = enc.forward(random_tensor({b, 1, h, w}, rng));
    EXPECT_EQ(y.shape(), (Shape{b, 4, h, w}));
  }
}

TEST(Encoder, ZeroInputGivesZeroMap) {
  Rng rng(3);
  CanEncoder<double> enc("encoder", small_config());
  enc.init(rng);
  const auto y = enc.forward(Tensor<double>({1, 1, 16, 16}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Encoder, DeterministicForward) {
  Rng rng(4);
  CanEncoder<float> enc("encoder", small_config());
  enc.init(rng);
  Tensor<float> x({2, 1, 12, 12});
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-1, 1));
  EXPECT_TRUE(enc.forward(x) == enc.forward(x));
}

TEST(Encoder, ParameterGradientsMatchFiniteDifferences) {
  Rng rng(5);
  CanEncoder<double> enc("encoder", small_config());
  enc.init(rng);
  enc.visit([&](Param<double>& p) {
    for (auto& v : p.value.values()) v += rng.normal(0, 0.05);  // non-zero biases too
  });
  const auto x = random_tensor({1, 1, 16, 16}, rng);
  EncoderTrace<double> tr;
  const auto y = enc.forward(x, &tr);
  enc.visit([](Param<double>& p) { p.zero_grad(); });
  enc.backward(tr, Tensor<double>(y.shape(), 1.0));

  const auto base_pattern = hcfusion::testing::sign_pattern(tr.pre_act);
  std::vector<bool> pattern;
  auto sum_output = [&] {
    EncoderTrace<double> t;
    double s = 0;
    const auto y = enc.forward(x, &t);
    for (double v : y.values()) s += v;
    pattern = hcfusion::testing::sign_pattern(t.pre_act);
    return s;
  };
  auto smooth = [&] { return pattern == base_pattern; };
  hcfusion::testing::GradCheck report;
  enc.visit([&](Param<double>& p) {
    const auto coords = hcfusion::testing::sample_coords(p.value.numel(), 12, rng);
    hcfusion::testing::check_coords(report, p.name, p.value.data(), p.grad.data(), coords, sum_output, smooth);
  });
  EXPECT_GE(report.checked, 20u) << report.skipped << " coordinates straddled a kink";
  EXPECT_LT(report.max_rel, hcfusion::testing::kFdTolerance) << report.worst;
}

TEST(Encoder, InputGradientMatchesFiniteDifferences) {
  Rng rng(6);
  CanEncoder<double> enc("encoder", small_config(4));
  enc.init(rng);
  auto x = random_tensor({1, 1, 8, 8}, rng);
  const auto r = random_tensor({1, 4, 8, 8}, rng);
  EncoderTrace<double> tr;
  enc.forward(x, &tr);
  const auto gx = enc.backward(tr, r);
  hcfusion::testing::GradCheck report;
  hcfusion::testing::check_coords(report, "x", x.data(), gx.data(),
                                  hcfusion::testing::sample_coords(x.numel(), 64, rng),
                                  [&] { return hcfusion::testing::probe(enc.forward(x), r); });
  EXPECT_LT(report.max_rel, hcfusion::testing::kFdTolerance) << report.worst;
}

TEST(EncodePair, SharedWeightsGiveIdenticalFeatures) {
  Rng rng(7);
  CanEncoder<float> enc("encoder", small_config());
  enc.init(rng);
  Tensor<float> x({1, 1, 32, 32});
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-1, 1));
  const auto [phi1, phi2] = encode_pair(enc, static_cast<const CanEncoder<float>*>(nullptr), x, x);
  EXPECT_EQ(phi1.shape(), (Shape{1, 8, 32, 32}));
  EXPECT_TRUE(phi1 == phi2);
}

TEST(EncodePair, SeparateWeightsDiffer) {
  Rng rng(8);
  CanEncoder<float> e1("encoder1", small_config()), e2("encoder2", small_config());
  e1.init(rng);
  e2.init(rng);
  Tensor<float> x({1, 1, 16, 16});
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-1, 1));
  const auto [phi1, phi2] = encode_pair(e1, &e2, x, x);
  EXPECT_FALSE(phi1 == phi2);
}

TEST(EncodePair, SizeMismatchRejected) {
  Rng rng(9);
  CanEncoder<float> enc("encoder", small_config());
  enc.init(rng);
  EXPECT_THROW(encode_pair(enc, static_cast<const CanEncoder<float>*>(nullptr), Tensor<float>({1, 1, 32, 32}),
                           Tensor<float>({1, 1, 31, 32})),
               ShapeError);
}

TEST(Encoder, RejectsInvalidInputs) {
  Rng rng(10);
  CanEncoder<float> enc("encoder", small_config());
  enc.init(rng);
  EXPECT_THROW(enc.forward(Tensor<float>({1, 2, 16, 16})), ShapeError);
  EXPECT_THROW(enc.forward(Tensor<float>({1, 16, 16})), ShapeError);
  EXPECT_THROW(enc.forward(Tensor<float>({1, 1, 2, 16})), ShapeError);
  Tensor<float> bad({1, 1, 8, 8});
  bad[5] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(enc.forward(bad), NumericalError);
}

TEST(Encoder, ParameterNames) {
  CanEncoder<float> enc("encoder", NetworkConfig{});
  std::vector<std::string> names;
  enc.visit([&](Param<float>& p) { names.push_back(p.name); });
  ASSERT_EQ(names.size(), 10u);
  EXPECT_EQ(names.front(), "encoder.conv0.weight");
  EXPECT_EQ(names.back(), "encoder.conv4.bias");
}
