#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hcfusion/checkpoint.hpp"
#include "hcfusion/image_io.hpp"
#include "hcfusion/metrics.hpp"
#include "hcfusion/model.hpp"
#include "hcfusion/training.hpp"

namespace hcfusion {

enum class ColorPolicy { kLuminanceFuse, kGrayOnly };

inline ColorPolicy parse_color_policy(const std::string& s) {
  if (s == "luminance-fuse" || s == "luminance") return ColorPolicy::kLuminanceFuse;
  if (s == "gray-only" || s == "gray") return ColorPolicy::kGrayOnly;
  throw ConfigError("unknown color policy '" + s + "' (expected luminance-fuse or gray-only)");
}

inline std::string to_string(ColorPolicy p) { return p == ColorPolicy::kGrayOnly ? "gray-only" : "luminance-fuse"; }

struct FusionRequest {
  std::string path_a, path_b;
  std::string checkpoint;
  std::string output;
  ColorPolicy color_policy = ColorPolicy::kLuminanceFuse;
};

struct FusionOutput {
  ImageSample image;
  /// Planes the output was assembled from, in output sample units. Chroma is
  /// empty for gray output.
  YCbCrPlanes planes;
};

/// Fuses two aligned luma planes given in units of `max_value`; the result is
/// quantized to the same units.
template <typename T>
Plane fuse_planes(const FusionModel<T>& model, const Plane& a, const Plane& b, double max_value) {
  require_same_size(a, b, "fuse");
  return denormalize(model.forward(normalize<T>(a, max_value), normalize<T>(b, max_value)), max_value);
}

/// Fuses an image pair. Gray pairs are fused directly. With one color input
/// its luma is fused and its chroma reattached; with two, each pixel takes the
/// chroma of the more saturated source. The output uses the larger bit depth.
template <typename T>
FusionOutput fuse_images(const FusionModel<T>& model, const ImageSample& a, const ImageSample& b,
                         ColorPolicy policy = ColorPolicy::kLuminanceFuse) {
  if (a.height != b.height || a.width != b.width)
    throw ShapeError("fuse: inputs differ in size (" + std::to_string(a.height) + "x" + std::to_string(a.width) +
                     " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
  const int depth = std::max(a.bit_depth, b.bit_depth);
  const double mx = depth == 16 ? 65535.0 : 255.0;
  auto planes_of = [&](const ImageSample& img) {
    if (!img.is_color()) return YCbCrPlanes{rescale_depth(img.channel(0), img.max_value(), mx), {}, {}};
    auto p = rgb_to_ycbcr(img);
    if (img.max_value() != mx) {
      const double off_from = (img.max_value() + 1) / 2, off_to = (mx + 1) / 2;
      p.y = rescale_depth(p.y, img.max_value(), mx);
      for (Plane* c : {&p.cb, &p.cr})
        for (auto& v : c->data) v = (v - off_from) / img.max_value() * mx + off_to;
    }
    return p;
  };
  const YCbCrPlanes pa = planes_of(a), pb = planes_of(b);

  FusionOutput out;
  out.planes.y = fuse_planes(model, pa.y, pb.y, mx);
  const bool color = policy == ColorPolicy::kLuminanceFuse && (a.is_color() || b.is_color());
  if (!color) {
    out.image = gray_sample(out.planes.y, depth);
    return out;
  }
  if (a.is_color() && b.is_color()) {
    const double off = (mx + 1) / 2;
    out.planes.cb = Plane(a.height, a.width);
    out.planes.cr = Plane(a.height, a.width);
    for (std::size_t i = 0; i < out.planes.y.size(); ++i) {
      const bool take_a = std::abs(pa.cb.data[i] - off) + std::abs(pa.cr.data[i] - off) >=
                          std::abs(pb.cb.data[i] - off) + std::abs(pb.cr.data[i] - off);
      out.planes.cb.data[i] = (take_a ? pa : pb).cb.data[i];
      out.planes.cr.data[i] = (take_a ? pa : pb).cr.data[i];
    }
  } else {
    const YCbCrPlanes& src = a.is_color() ? pa : pb;
    out.planes.cb = src.cb;
    out.planes.cr = src.cr;
  }
  out.image = ycbcr_to_rgb(out.planes, depth);
  return out;
}

/// Reads both inputs and the checkpoint, fuses and writes the output file.
inline FusionOutput fuse_files(const FusionRequest& req) {
  const auto model = Checkpoint::load(req.checkpoint).restore<float>();
  const auto a = read_image(req.path_a), b = read_image(req.path_b);
  auto out = fuse_images(model, a, b, req.color_policy);
  write_image(req.output, out.image);
  return out;
}

// ---------------------------------------------------------------------------
// Ablation study.

struct AblationVariant {
  std::string name;
  AblationFlags flags;
};

inline std::vector<AblationVariant> ablation_variants() {
  return {{"full", {}},
          {"w/o STB", {true, false, false}},
          {"w/o NCA", {false, true, false}},
          {"w/o BFM", {false, false, true}}};
}

struct AblationRow {
  std::string variant;
  AblationFlags flags;
  std::uint64_t seed = 0;
  bool completed = false;
  bool numerical_failure = false;
  std::string error;
  std::size_t parameters = 0;
  std::size_t attention_parameters = 0;    // cross-modal channel attention
  std::size_t transformer_parameters = 0;  // windowed transformer blocks
  ModuleSummary modules;
  double psnr = 0, fmi = 0, qcv = 0;
};

struct AblationTable {
  std::uint64_t seed = 0;
  std::vector<AblationRow> rows;

  bool complete() const {
    return rows.size() == ablation_variants().size() &&
           std::all_of(rows.begin(), rows.end(), [](const AblationRow& r) { return r.completed; });
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "# ablation seed=" << seed << (complete() ? "" : " (incomplete)") << '\n';
    os << "variant   |     PSNR |      FMI |     Q_cv | seed\n";
    char buf[160];
    for (const auto& r : rows) {
      if (r.completed)
        std::snprintf(buf, sizeof(buf), "%-9s | %8.4f | %8.4f | %8.2f | %llu", r.variant.c_str(), r.psnr, r.fmi, r.qcv,
                      static_cast<unsigned long long>(r.seed));
      else
        std::snprintf(buf, sizeof(buf), "%-9s | %8s | %8s | %8s | %llu  FAILED: %s", r.variant.c_str(), "-", "-", "-",
                      static_cast<unsigned long long>(r.seed), r.error.c_str());
      os << buf << '\n';
    }
    return os.str();
  }
};

struct AblationOptions {
  std::function<void(const AblationRow&)> on_variant;
  FitOptions fit;
};

template <typename T>
AblationRow describe_variant(FusionModel<T>& model, const std::string& name, std::uint64_t seed) {
  AblationRow row;
  row.variant = name;
  row.flags = model.ablation();
  row.seed = seed;
  row.modules = model.summary();
  model.visit([&](Param<T>& p) {
    row.parameters += p.value.numel();
    if (is_nca_param(p.name)) row.attention_parameters += p.value.numel();
    if (is_transformer_param(p.name)) row.transformer_parameters += p.value.numel();
  });
  return row;
}

/// Source pairs of an evaluation set: same-named files in two directories.
struct EvalSet {
  std::vector<std::string> names;
  std::vector<ImageSample> a, b;
};

inline EvalSet load_eval_set(const std::string& dir_a, const std::string& dir_b) {
  EvalSet s;
  for (const auto& path : list_images(dir_a)) {
    const auto other = std::filesystem::path(dir_b) / path.filename();
    if (!std::filesystem::exists(other)) {
      log_warning("no counterpart for '" + path.filename().string() + "' in '" + dir_b + "'; skipped");
      continue;
    }
    s.names.push_back(path.filename().string());
    s.a.push_back(read_image(path.string()));
    s.b.push_back(read_image(other.string()));
  }
  if (s.names.empty()) throw DataError("evaluation set '" + dir_a + "' / '" + dir_b + "' has no image pairs");
  return s;
}

/// Averaged metrics of `model` over an evaluation set, computed on 8-bit luma.
template <typename T>
MetricReport evaluate_model(const FusionModel<T>& model, const EvalSet& set) {
  MetricReport report;
  for (std::size_t i = 0; i < set.names.size(); ++i) {
    const auto fused = fuse_images(model, set.a[i], set.b[i], ColorPolicy::kGrayOnly).image;
    auto luma8 = [](const ImageSample& img) { return rescale_depth(luminance(img), img.max_value(), 255.0); };
    report.per_pair.push_back(evaluate_pair(set.names[i], luma8(fused), luma8(set.a[i]), luma8(set.b[i])));
  }
  report.compute_averages();
  return report;
}

/// Trains the full model and each ablated variant with the same seed and
/// evaluates each on the same pairs. A failing variant stops the study; the
/// rows gathered so far are returned with the failure recorded.
inline AblationTable run_ablation(const Corpus& corpus, const EvalSet& eval, const RunConfig& base,
                                  const AblationOptions& options = {}) {
  AblationTable table;
  table.seed = base.train.seed;
  for (const auto& v : ablation_variants()) {
    RunConfig run = base;
    run.train.ablation = v.flags;
    AblationRow row;
    row.variant = v.name;
    row.flags = v.flags;
    row.seed = run.train.seed;
    try {
      auto result = fit(corpus, run, options.fit);
      auto model = result.checkpoint.restore<float>();
      row = describe_variant(model, v.name, run.train.seed);
      const auto report = evaluate_model(model, eval);
      row.psnr = report.psnr;
      row.fmi = report.fmi;
      row.qcv = report.qcv;
      row.completed = true;
    } catch (const NumericalError& e) {
      row.error = e.what();
      row.numerical_failure = true;
    } catch (const Error& e) {
      row.error = e.what();
    }
    table.rows.push_back(row);
    if (options.on_variant) options.on_variant(row);
    if (!row.completed) break;
  }
  return table;
}

}  // namespace hcfusion
