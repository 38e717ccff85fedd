#pragma once

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "hcfusion/image_io.hpp"
#include "hcfusion/log.hpp"
#include "hcfusion/plane.hpp"

namespace hcfusion {

/// Value reported when the fused image equals both sources.
inline constexpr double kPsnrCap = 99.0;

// ---------------------------------------------------------------------------
// Filtering helpers (reflect-101 borders).

inline std::size_t border101(long i, long n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return static_cast<std::size_t>(i);
}

/// Gradient magnitude from the 3x3 Sobel pair.
inline Plane sobel_magnitude(const Plane& p) {
  Plane out(p.height, p.width);
  const long H = static_cast<long>(p.height), W = static_cast<long>(p.width);
  auto px = [&](long y, long x) { return p.at(border101(y, H), border101(x, W)); };
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      const double gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1));
      const double gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1));
      out.at(y, x) = std::sqrt(gx * gx + gy * gy);
    }
  return out;
}

inline Plane gaussian_blur(const Plane& p, double sigma) {
  const long r = static_cast<long>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double sum = 0;
  for (long i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-(i * i) / (2 * sigma * sigma));
  for (auto& v : k) v /= sum;
  const long H = static_cast<long>(p.height), W = static_cast<long>(p.width);
  Plane tmp(p.height, p.width), out(p.height, p.width);
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i) acc += k[i + r] * p.at(y, border101(x + i, W));
      tmp.at(y, x) = acc;
    }
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i) acc += k[i + r] * tmp.at(border101(y + i, H), x);
      out.at(y, x) = acc;
    }
  return out;
}

// ---------------------------------------------------------------------------

struct PsnrResult {
  double value = 0;
  bool identical = false;
};

inline double mean_squared_error(const Plane& a, const Plane& b) {
  require_same_size(a, b, "mse");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  return acc / static_cast<double>(a.size());
}

/// PSNR of the fused image against both sources: 10 log10(peak^2 / mean MSE).
inline PsnrResult psnr_fusion(const Plane& fused, const Plane& a, const Plane& b, double peak = 255.0) {
  require_same_size(fused, a, "psnr");
  require_same_size(fused, b, "psnr");
  const double m = 0.5 * (mean_squared_error(fused, a) + mean_squared_error(fused, b));
  if (m == 0.0) return {kPsnrCap, true};
  return {std::min(kPsnrCap, 10.0 * std::log10(peak * peak / m)), false};
}

/// Feature image quantized to `bins` levels over its own value range.
inline std::vector<int> quantize_feature(const Plane& feat, int bins = 256) {
  const auto [lo, hi] = std::minmax_element(feat.data.begin(), feat.data.end());
  std::vector<int> q(feat.size(), 0);
  const double range = *hi - *lo;
  if (range <= 0) return q;
  for (std::size_t i = 0; i < feat.size(); ++i)
    q[i] = std::min(bins - 1, static_cast<int>(std::floor((feat.data[i] - *lo) / range * bins)));
  return q;
}

/// Mutual information (natural log) of two quantized images via their joint histogram.
inline double mutual_information(const std::vector<int>& x, const std::vector<int>& y, int bins = 256) {
  const std::size_t nb = static_cast<std::size_t>(bins);
  std::vector<double> joint(nb * nb, 0.0), px(nb, 0.0), py(nb, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) joint[static_cast<std::size_t>(x[i]) * nb + y[i]] += 1.0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < nb; ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      px[i] += joint[i * nb + j] / n;
      py[j] += joint[i * nb + j] / n;
    }
  double mi = 0;
  for (std::size_t i = 0; i < nb; ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      const double pxy = joint[i * nb + j] / n;
      if (pxy > 0) mi += pxy * std::log(pxy / (px[i] * py[j]));
    }
  return std::max(0.0, mi);
}

/// Feature mutual information: MI of Sobel-magnitude features of the fused
/// image with those of each source, summed.
inline double fmi(const Plane& fused, const Plane& a, const Plane& b, int bins = 256) {
  require_same_size(fused, a, "fmi");
  require_same_size(fused, b, "fmi");
  const auto qf = quantize_feature(sobel_magnitude(fused), bins);
  return mutual_information(qf, quantize_feature(sobel_magnitude(a), bins), bins) +
         mutual_information(qf, quantize_feature(sobel_magnitude(b), bins), bins);
}

// ---------------------------------------------------------------------------
// Chen-Varshney perceptual distortion.

struct QcvParams {
  std::size_t region = 16;
  double saliency_exponent = 1.0;
  double csf_sigma_center = 1.0;
  double csf_sigma_surround = 2.0;
};

/// Per-region saliency (lambda) and filtered distortion (D) of one source.
struct QcvRegions {
  std::vector<double> saliency, distortion;
};

/// Band-pass contrast-sensitivity filter: difference of Gaussians.
inline Plane csf_filter(const Plane& p, const QcvParams& q = {}) {
  Plane c = gaussian_blur(p, q.csf_sigma_center), s = gaussian_blur(p, q.csf_sigma_surround);
  for (std::size_t i = 0; i < c.size(); ++i) c.data[i] -= s.data[i];
  return c;
}

inline QcvRegions qcv_regions(const Plane& fused, const Plane& src, const QcvParams& q = {}) {
  Plane diff(src.height, src.width);
  for (std::size_t i = 0; i < diff.size(); ++i) diff.data[i] = src.data[i] - fused.data[i];
  const Plane filtered = csf_filter(diff, q);
  const Plane grad = sobel_magnitude(src);
  QcvRegions out;
  for (std::size_t y0 = 0; y0 < src.height; y0 += q.region)
    for (std::size_t x0 = 0; x0 < src.width; x0 += q.region) {
      double energy = 0, dist = 0;
      std::size_t n = 0;
      for (std::size_t y = y0; y < std::min(src.height, y0 + q.region); ++y)
        for (std::size_t x = x0; x < std::min(src.width, x0 + q.region); ++x) {
          energy += grad.at(y, x);
          dist += filtered.at(y, x) * filtered.at(y, x);
          ++n;
        }
      out.saliency.push_back(std::pow(energy, q.saliency_exponent));
      out.distortion.push_back(dist / static_cast<double>(n));
    }
  return out;
}

/// Saliency-weighted average of regional distortions of both sources.
inline double qcv_aggregate(const QcvRegions& a, const QcvRegions& b) {
  double num = 0, den = 0;
  for (std::size_t r = 0; r < a.saliency.size(); ++r) {
    num += a.saliency[r] * a.distortion[r] + b.saliency[r] * b.distortion[r];
    den += a.saliency[r] + b.saliency[r];
  }
  if (den == 0.0) {
    log_warning("qcv: both sources have zero saliency everywhere; reporting 0");
    return 0.0;
  }
  return num / den;
}

inline double qcv(const Plane& fused, const Plane& a, const Plane& b, const QcvParams& q = {}) {
  require_same_size(fused, a, "qcv");
  require_same_size(fused, b, "qcv");
  if (a.height < q.region || a.width < q.region)
    throw ShapeError("qcv: image smaller than the " + std::to_string(q.region) + "-pixel region");
  return qcv_aggregate(qcv_regions(fused, a, q), qcv_regions(fused, b, q));
}

// ---------------------------------------------------------------------------
// Directory evaluation and reports.

struct PairMetrics {
  std::string name;
  double psnr = 0;
  bool psnr_identical = false;
  double fmi = 0;
  double qcv = 0;

  bool operator==(const PairMetrics&) const = default;
};

struct MetricReport {
  std::vector<PairMetrics> per_pair;
  double psnr = 0, fmi = 0, qcv = 0;  // arithmetic means
  std::vector<std::string> missing;

  void compute_averages() {
    psnr = fmi = qcv = 0;
    if (per_pair.empty()) return;
    for (const auto& p : per_pair) {
      psnr += p.psnr;
      fmi += p.fmi;
      qcv += p.qcv;
    }
    const double n = static_cast<double>(per_pair.size());
    psnr /= n;
    fmi /= n;
    qcv /= n;
  }

  bool operator==(const MetricReport&) const = default;

  /// One record per pair, then an `average` line.
  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "# name psnr fmi qcv identical\n";
    for (const auto& p : per_pair)
      os << p.name << ' ' << p.psnr << ' ' << p.fmi << ' ' << p.qcv << ' ' << (p.psnr_identical ? 1 : 0) << '\n';
    for (const auto& m : missing) os << "# missing " << m << '\n';
    os << "average " << psnr << ' ' << fmi << ' ' << qcv << '\n';
    return os.str();
  }

  static MetricReport from_text(const std::string& text) {
    MetricReport r;
    std::istringstream is(text);
    std::string line;
    bool have_average = false;
    while (std::getline(is, line)) {
      if (line.rfind("# missing ", 0) == 0) {
        r.missing.push_back(line.substr(10));
        continue;
      }
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      std::string name;
      ls >> name;
      if (name == "average") {
        ls >> r.psnr >> r.fmi >> r.qcv;
        have_average = true;
      } else {
        PairMetrics p;
        int identical = 0;
        p.name = name;
        ls >> p.psnr >> p.fmi >> p.qcv >> identical;
        p.psnr_identical = identical != 0;
        r.per_pair.push_back(p);
      }
      if (ls.fail()) throw DataError("malformed report line: '" + line + "'");
    }
    if (!have_average) throw DataError("report has no average line");
    return r;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["pairs"] = nlohmann::json::array();
    for (const auto& p : per_pair)
      j["pairs"].push_back(
          {{"name", p.name}, {"psnr", p.psnr}, {"psnr_identical", p.psnr_identical}, {"fmi", p.fmi}, {"qcv", p.qcv}});
    j["average"] = {{"psnr", psnr}, {"fmi", fmi}, {"qcv", qcv}};
    j["missing"] = missing;
    return j;
  }

  static MetricReport from_json(const nlohmann::json& j) {
    MetricReport r;
    for (const auto& p : j.at("pairs"))
      r.per_pair.push_back({p.at("name").get<std::string>(), p.at("psnr").get<double>(),
                            p.at("psnr_identical").get<bool>(), p.at("fmi").get<double>(), p.at("qcv").get<double>()});
    r.psnr = j.at("average").at("psnr").get<double>();
    r.fmi = j.at("average").at("fmi").get<double>();
    r.qcv = j.at("average").at("qcv").get<double>();
    r.missing = j.at("missing").get<std::vector<std::string>>();
    return r;
  }
};

inline PairMetrics evaluate_pair(const std::string& name, const Plane& fused, const Plane& a, const Plane& b) {
  PairMetrics m;
  m.name = name;
  const auto p = psnr_fusion(fused, a, b);
  m.psnr = p.value;
  m.psnr_identical = p.identical;
  m.fmi = fmi(fused, a, b);
  m.qcv = qcv(fused, a, b);
  return m;
}

/// Luma of an image file on the 8-bit [0, 255] scale.
inline Plane read_luma_8bit(const std::string& path) {
  const auto img = read_image(path);
  return rescale_depth(luminance(img), img.max_value(), 255.0);
}

/// Evaluates every file of `dir_fused` against same-named files in the source
/// directories. Pairs are computed concurrently; results keep filename order.
inline MetricReport evaluate_dir(const std::string& dir_a, const std::string& dir_b, const std::string& dir_fused,
                                 unsigned threads = 1) {
  for (const auto* d : {&dir_a, &dir_b, &dir_fused})
    if (!std::filesystem::is_directory(*d)) throw DataError("not a directory: '" + *d + "'");
  std::vector<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(dir_fused))
    if (e.is_regular_file() && is_supported_image(e.path().string())) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  MetricReport report;
  std::vector<std::string> usable;
  for (const auto& n : names) {
    const bool ok = std::filesystem::exists(std::filesystem::path(dir_a) / n) &&
                    std::filesystem::exists(std::filesystem::path(dir_b) / n);
    (ok ? usable : report.missing).push_back(n);
  }
  for (const auto& e : std::filesystem::directory_iterator(dir_a)) {
    const auto n = e.path().filename().string();
    if (is_supported_image(n) && std::find(names.begin(), names.end(), n) == names.end()) report.missing.push_back(n);
  }
  std::sort(report.missing.begin(), report.missing.end());
  for (const auto& m : report.missing) log_warning("no counterpart for '" + m + "'; skipped");
  if (usable.empty()) throw DataError("no fused images with counterparts in '" + dir_fused + "'");

  std::vector<PairMetrics> results(usable.size());
  std::vector<std::string> errors(usable.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < usable.size();) {
      try {
        const auto& n = usable[i];
        results[i] = evaluate_pair(n, read_luma_8bit((std::filesystem::path(dir_fused) / n).string()),
                                   read_luma_8bit((std::filesystem::path(dir_a) / n).string()),
                                   read_luma_8bit((std::filesystem::path(dir_b) / n).string()));
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < std::max(1u, threads); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < usable.size(); ++i)
    if (!errors[i].empty()) throw DataError("evaluating '" + usable[i] + "': " + errors[i]);
  report.per_pair = std::move(results);
  report.compute_averages();
  return report;
}

}  // namespace hcfusion
