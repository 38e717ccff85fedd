#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "hcfusion/metrics.hpp"
#include "synthetic.hpp"

using namespace hcfusion;
using hcfusion::testing::synthetic_scene;

namespace {

std::size_t reflect(long i, long n) {
  if (i < 0) return static_cast<std::size_t>(-i);
  if (i >= n) return static_cast<std::size_t>(2 * n - 2 - i);
  return static_cast<std::size_t>(i);
}

// Sobel magnitude written as an explicit 3x3 correlation.
Plane sobel_oracle(const Plane& p) {
  static const int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static const int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  Plane out(p.height, p.width);
  const long H = static_cast<long>(p.height), W = static_cast<long>(p.width);
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      double gx = 0, gy = 0;
      for (int u = -1; u <= 1; ++u)
        for (int v = -1; v <= 1; ++v) {
          const double s = p.at(reflect(y + u, H), reflect(x + v, W));
          gx += kx[u + 1][v + 1] * s;
          gy += ky[u + 1][v + 1] * s;
        }
      out.at(y, x) = std::hypot(gx, gy);
    }
  return out;
}

std::vector<int> quantize_oracle(const Plane& f) {
  double lo = f.data[0], hi = f.data[0];
  for (double v : f.data) lo = std::min(lo, v), hi = std::max(hi, v);
  std::vector<int> q(f.size(), 0);
  if (hi == lo) return q;
  for (std::size_t i = 0; i < f.size(); ++i) q[i] = std::min(255, static_cast<int>((f.data[i] - lo) / (hi - lo) * 256));
  return q;
}

// MI as H(X) + H(Y) - H(X,Y) from sparse counts.
double mi_oracle(const std::vector<int>& x, const std::vector<int>& y) {
  std::map<int, double> cx, cy;
  std::map<std::pair<int, int>, double> cxy;
  for (std::size_t i = 0; i < x.size(); ++i) {
    cx[x[i]] += 1;
    cy[y[i]] += 1;
    cxy[{x[i], y[i]}] += 1;
  }
  const double n = static_cast<double>(x.size());
  auto entropy = [&](const auto& counts) {
    double h = 0;
    for (const auto& [k, c] : counts) h -= c / n * std::log(c / n);
    return h;
  };
  return std::max(0.0, entropy(cx) + entropy(cy) - entropy(cxy));
}

double fmi_oracle(const Plane& f, const Plane& a, const Plane& b) {
  const auto qf = quantize_oracle(sobel_oracle(f));
  return mi_oracle(qf, quantize_oracle(sobel_oracle(a))) + mi_oracle(qf, quantize_oracle(sobel_oracle(b)));
}

// Direct 2-D convolution with a sampled Gaussian, reflected borders.
Plane blur_oracle(const Plane& p, double sigma) {
  const long r = static_cast<long>(std::ceil(3 * sigma));
  double norm = 0;
  for (long i = -r; i <= r; ++i)
    for (long j = -r; j <= r; ++j) norm += std::exp(-(i * i + j * j) / (2 * sigma * sigma));
  Plane out(p.height, p.width);
  const long H = static_cast<long>(p.height), W = static_cast<long>(p.width);
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i)
        for (long j = -r; j <= r; ++j)
          acc += std::exp(-(i * i + j * j) / (2 * sigma * sigma)) / norm * p.at(reflect(y + i, H), reflect(x + j, W));
      out.at(y, x) = acc;
    }
  return out;
}

double qcv_oracle(const Plane& f, const Plane& a, const Plane& b) {
  double num = 0, den = 0;
  for (const Plane* src : {&a, &b}) {
    Plane diff(f.height, f.width);
    for (std::size_t i = 0; i < f.size(); ++i) diff.data[i] = src->data[i] - f.data[i];
    const Plane c = blur_oracle(diff, 1.0), s = blur_oracle(diff, 2.0);
    const Plane g = sobel_oracle(*src);
    for (std::size_t ry = 0; ry < f.height; ry += 16)
      for (std::size_t rx = 0; rx < f.width; rx += 16) {
        double lambda = 0, d = 0;
        std::size_t n = 0;
        for (std::size_t y = ry; y < std::min(f.height, ry + 16); ++y)
          for (std::size_t x = rx; x < std::min(f.width, rx + 16); ++x) {
            lambda += g.at(y, x);
            const double band = c.at(y, x) - s.at(y, x);
            d += band * band;
            ++n;
          }
        num += lambda * d / static_cast<double>(n);
        den += lambda;
      }
  }
  return num / den;
}

Plane random_plane(std::size_t h, std::size_t w, Rng& rng) {
  Plane p(h, w);
  for (auto& v : p.data) v = std::round(rng.uniform(0, 255));
  return p;
}

Plane add_noise(const Plane& p, const Plane& noise, double amplitude) {
  Plane out = p;
  for (std::size_t i = 0; i < p.size(); ++i) out.data[i] += amplitude * noise.data[i];
  return out;
}

Plane standard_noise(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Plane n(h, w);
  for (auto& v : n.data) v = rng.normal();
  return n;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST(Sobel, MatchesExplicitCorrelation) {
  Rng rng(1);
  const auto p = random_plane(9, 13, rng);
  const auto a = sobel_magnitude(p), b = sobel_oracle(p);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-12);
}

TEST(GaussianBlur, MatchesDirectConvolution) {
  Rng rng(2);
  const auto p = random_plane(20, 17, rng);
  const auto a = gaussian_blur(p, 1.5), b = blur_oracle(p, 1.5);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-10);
}

TEST(Psnr, UnitOffsetFromBothSources) {
  const Plane a(16, 16, 100.0), f(16, 16, 101.0), b(16, 16, 102.0);
  const auto r = psnr_fusion(f, a, b);
  EXPECT_FALSE(r.identical);
  EXPECT_NEAR(r.value, 48.1308, 1e-3);
  EXPECT_NEAR(r.value, 20 * std::log10(255.0), 1e-12);
}

TEST(Psnr, MseFourAndZero) {
  const Plane f(8, 8, 50.0), a(8, 8, 52.0), b(8, 8, 50.0);
  const auto r = psnr_fusion(f, a, b);
  EXPECT_NEAR(r.value, 45.1205, 1e-3);
  EXPECT_NEAR(r.value, 10 * std::log10(255.0 * 255.0 / 2.0), 1e-12);
}

TEST(Psnr, IdenticalImagesAreCappedAndFlagged) {
  Rng rng(3);
  const auto a = random_plane(8, 8, rng);
  const auto r = psnr_fusion(a, a, a);
  EXPECT_TRUE(r.identical);
  EXPECT_EQ(r.value, kPsnrCap);
  EXPECT_FALSE(psnr_fusion(a, a, add_noise(a, Plane(8, 8, 1.0), 1.0)).identical);
}

TEST(Psnr, SizeMismatchRejected) {
  EXPECT_THROW(psnr_fusion(Plane(4, 4), Plane(4, 4), Plane(4, 5)), ShapeError);
}

TEST(Fmi, MatchesHistogramOracleOnRandomTriples) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto f = random_plane(16, 16, rng), a = random_plane(16, 16, rng), b = random_plane(16, 16, rng);
    EXPECT_NEAR(fmi(f, a, b), fmi_oracle(f, a, b), 1e-10);
  }
}

TEST(Fmi, MatchesOracleOnStructuredImages) {
  const auto a = synthetic_scene(32, 32, 11), b = synthetic_scene(32, 32, 12);
  Plane f(32, 32);
  for (std::size_t i = 0; i < f.size(); ++i) f.data[i] = std::round(0.5 * (a.data[i] + b.data[i]));
  EXPECT_NEAR(fmi(f, a, b), fmi_oracle(f, a, b), 1e-10);
}

TEST(Fmi, SelfInformationIsTwiceFeatureEntropy) {
  const auto a = synthetic_scene(32, 32, 5);
  const auto q = quantize_oracle(sobel_oracle(a));
  std::map<int, double> counts;
  for (int v : q) counts[v] += 1;
  double h = 0;
  for (const auto& [k, c] : counts) h -= c / q.size() * std::log(c / q.size());
  EXPECT_GT(h, 0.0);
  EXPECT_NEAR(fmi(a, a, a), 2 * h, 1e-10);
}

TEST(Fmi, SymmetricInSources) {
  Rng rng(6);
  const auto f = random_plane(16, 16, rng), a = random_plane(16, 16, rng), b = random_plane(16, 16, rng);
  EXPECT_DOUBLE_EQ(fmi(f, a, b), fmi(f, b, a));
}

TEST(Fmi, ConstantFeaturesGiveZero) {
  const Plane flat(16, 16, 7.0);
  Rng rng(7);
  EXPECT_EQ(fmi(flat, flat, flat), 0.0);
  EXPECT_EQ(fmi(flat, random_plane(16, 16, rng), random_plane(16, 16, rng)), 0.0);
}

TEST(Qcv, IdenticalImagesGiveExactlyZero) {
  const auto a = synthetic_scene(48, 32, 8);
  EXPECT_EQ(qcv(a, a, a), 0.0);
}

TEST(Qcv, MatchesRegionLoopOracle) {
  const auto a = synthetic_scene(32, 32, 21), b = synthetic_scene(32, 32, 22);
  Rng rng(9);
  for (int trial = 0; trial < 3; ++trial) {
    Plane f(32, 32);
    for (std::size_t i = 0; i < f.size(); ++i) f.data[i] = 0.5 * (a.data[i] + b.data[i]) + rng.normal(0, 5);
    EXPECT_NEAR(qcv(f, a, b), qcv_oracle(f, a, b), 1e-8);
  }
}

TEST(Qcv, PartialRegionsAreIncluded) {
  const auto a = synthetic_scene(40, 24, 31), b = synthetic_scene(40, 24, 32);
  const auto f = synthetic_scene(40, 24, 33);
  EXPECT_EQ(qcv_regions(f, a).saliency.size(), 3u * 2u);
  EXPECT_NEAR(qcv(f, a, b), qcv_oracle(f, a, b), 1e-8);
}

TEST(Qcv, InvariantToCommonSaliencyScale) {
  const auto a = synthetic_scene(32, 32, 41), b = synthetic_scene(32, 32, 42), f = synthetic_scene(32, 32, 43);
  auto ra = qcv_regions(f, a), rb = qcv_regions(f, b);
  const double base = qcv_aggregate(ra, rb);
  for (auto* r : {&ra, &rb})
    for (auto& s : r->saliency) s *= 7.5;
  EXPECT_NEAR(qcv_aggregate(ra, rb), base, 1e-12 * base);
}

TEST(Qcv, ZeroSaliencyReportsZero) {
  const Plane flat(16, 16, 3.0);
  Rng rng(10);
  EXPECT_EQ(qcv(random_plane(16, 16, rng), flat, flat), 0.0);
}

TEST(Qcv, RejectsImagesSmallerThanRegion) {
  EXPECT_THROW(qcv(Plane(8, 32), Plane(8, 32), Plane(8, 32)), ShapeError);
  EXPECT_THROW(qcv(Plane(16, 16), Plane(16, 16), Plane(16, 17)), ShapeError);
}

// The plug-in histogram estimator needs about one sample per joint bin; at
// 256x256 it does, and amplitudes stay below its bias floor.
TEST(Metrics, MonotoneUnderIncreasingNoise) {
  const std::size_t n = 256;
  for (std::uint64_t scene = 0; scene < 10; ++scene) {
    const auto a = synthetic_scene(n, n, 100 + 2 * scene), b = synthetic_scene(n, n, 101 + 2 * scene);
    Plane base(n, n);
    for (std::size_t i = 0; i < base.size(); ++i) base.data[i] = 0.5 * (a.data[i] + b.data[i]);
    const auto noise = standard_noise(n, n, 300 + scene);
    double prev_psnr = 1e9, prev_fmi = 1e9, prev_qcv = -1;
    for (double amp : {0.5, 1.0, 2.0, 4.0, 8.0}) {
      const auto f = add_noise(base, noise, amp);
      const double p = psnr_fusion(f, a, b).value, m = fmi(f, a, b), q = qcv(f, a, b);
      EXPECT_LT(p, prev_psnr) << "scene " << scene << " amplitude " << amp;
      EXPECT_LT(m, prev_fmi) << "scene " << scene << " amplitude " << amp;
      EXPECT_GT(q, prev_qcv) << "scene " << scene << " amplitude " << amp;
      prev_psnr = p;
      prev_fmi = m;
      prev_qcv = q;
    }
  }
}

TEST(Metrics, FmiBoundedBySelfInformation) {
  const auto a = synthetic_scene(32, 32, 61);
  const auto noise = standard_noise(32, 32, 62);
  const double self = fmi(a, a, a);
  for (double amp : {1.0, 5.0, 20.0}) EXPECT_LT(fmi(add_noise(a, noise, amp), a, a), self);
}

TEST(Metrics, InvariantToHorizontalFlip) {
  const auto a = synthetic_scene(48, 32, 71), b = synthetic_scene(48, 32, 72), f = synthetic_scene(48, 32, 73);
  const auto fa = flip_horizontal(a), fb = flip_horizontal(b), ff = flip_horizontal(f);
  EXPECT_NEAR(psnr_fusion(ff, fa, fb).value, psnr_fusion(f, a, b).value, 1e-12);
  EXPECT_NEAR(fmi(ff, fa, fb), fmi(f, a, b), 1e-10);
  EXPECT_NEAR(qcv(ff, fa, fb), qcv(f, a, b), 1e-9 * qcv(f, a, b));
}

TEST(MetricReport, TextRoundTripIsLossless) {
  MetricReport r;
  r.per_pair = {{"a.png", 55.123456789012345, false, 1.0 / 3.0, 0.1}, {"b.png", kPsnrCap, true, 2.5, 0.0}};
  r.missing = {"c.png"};
  r.compute_averages();
  EXPECT_EQ(MetricReport::from_text(r.to_text()), r);
  EXPECT_EQ(MetricReport::from_json(nlohmann::json::parse(r.to_json().dump())), r);
}

TEST(MetricReport, MalformedTextRejected) {
  EXPECT_THROW(MetricReport::from_text("x.png 1 2\n"), DataError);
  EXPECT_THROW(MetricReport::from_text("x.png 1 2 3 0\n"), DataError);
}

TEST(EvaluateDir, SinglePairWithIdenticalImages) {
  TempDir tmp("hcfusion_metrics_single");
  const auto a = synthetic_scene(32, 32, 81);
  for (const char* d : {"a", "b", "f"}) {
    std::filesystem::create_directories(tmp.path / d);
    write_image((tmp.path / d / "x.png").string(), gray_sample(a, 8));
  }
  const auto r = evaluate_dir((tmp.path / "a").string(), (tmp.path / "b").string(), (tmp.path / "f").string());
  ASSERT_EQ(r.per_pair.size(), 1u);
  EXPECT_TRUE(r.per_pair[0].psnr_identical);
  EXPECT_EQ(r.psnr, kPsnrCap);
  EXPECT_NEAR(r.fmi, fmi_oracle(a, a, a), 1e-10);
  EXPECT_EQ(r.qcv, 0.0);
  EXPECT_TRUE(r.missing.empty());
}

TEST(EvaluateDir, AveragesAndMissingCounterparts) {
  TempDir tmp("hcfusion_metrics_multi");
  for (const char* d : {"a", "b", "f"}) std::filesystem::create_directories(tmp.path / d);
  for (int i = 0; i < 3; ++i) {
    const auto name = "p" + std::to_string(i) + ".png";
    const auto a = synthetic_scene(32, 32, 90 + i), b = synthetic_scene(32, 32, 95 + i);
    Plane f(32, 32);
    for (std::size_t k = 0; k < f.size(); ++k) f.data[k] = std::round(0.5 * (a.data[k] + b.data[k]));
    write_image((tmp.path / "a" / name).string(), gray_sample(a, 8));
    if (i != 2) write_image((tmp.path / "b" / name).string(), gray_sample(b, 8));
    write_image((tmp.path / "f" / name).string(), gray_sample(f, 8));
  }
  const auto one = evaluate_dir((tmp.path / "a").string(), (tmp.path / "b").string(), (tmp.path / "f").string(), 1);
  const auto four = evaluate_dir((tmp.path / "a").string(), (tmp.path / "b").string(), (tmp.path / "f").string(), 4);
  EXPECT_EQ(one, four);
  ASSERT_EQ(one.per_pair.size(), 2u);
  EXPECT_EQ(one.per_pair[0].name, "p0.png");
  EXPECT_EQ(one.missing, std::vector<std::string>{"p2.png"});
  EXPECT_NEAR(one.psnr, 0.5 * (one.per_pair[0].psnr + one.per_pair[1].psnr), 1e-12);
  EXPECT_NEAR(one.qcv, 0.5 * (one.per_pair[0].qcv + one.per_pair[1].qcv), 1e-12);
}

TEST(EvaluateDir, NoUsablePairsIsAnError) {
  TempDir tmp("hcfusion_metrics_empty");
  for (const char* d : {"a", "b", "f"}) std::filesystem::create_directories(tmp.path / d);
  EXPECT_THROW(evaluate_dir((tmp.path / "a").string(), (tmp.path / "b").string(), (tmp.path / "f").string()),
               DataError);
  EXPECT_THROW(evaluate_dir((tmp.path / "nope").string(), (tmp.path / "b").string(), (tmp.path / "f").string()),
               DataError);
}
