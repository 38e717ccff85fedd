#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "hcfusion/checkpoint.hpp"
#include "hcfusion/image_io.hpp"
#include "hcfusion/log.hpp"
#include "hcfusion/losses.hpp"
#include "hcfusion/model.hpp"
#include "hcfusion/optim.hpp"

namespace hcfusion {

/// Independent random streams derived from one run seed.
struct SeedStreams {
  Rng init;  // parameter initialization
  Rng data;  // shuffling and cropping
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline SeedStreams seed_all(std::uint64_t seed) {
  return {Rng(splitmix64(seed)), Rng(splitmix64(seed ^ 0x5eed5eed5eed5eedULL))};
}

// ---------------------------------------------------------------------------
// Training corpus.

/// Grayscale training images with values in [-1, 1].
struct Corpus {
  std::vector<Plane> images;
  std::vector<std::string> names;
  std::size_t size() const { return images.size(); }
};

inline std::vector<std::filesystem::path> list_images(const std::string& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: '" + dir + "'");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && is_supported_image(e.path().string())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

/// Loads every readable image in `dir` as BT.601 luma; unreadable files are
/// skipped with a warning.
inline Corpus load_corpus(const std::string& dir) {
  Corpus c;
  for (const auto& path : list_images(dir)) {
    try {
      const auto img = read_image(path.string());
      Plane y = luminance(img);
      for (auto& v : y.data) v = v / img.max_value() * 2.0 - 1.0;
      c.images.push_back(std::move(y));
      c.names.push_back(path.filename().string());
    } catch (const DataError& e) {
      log_warning(std::string("skipping ") + e.what());
    }
  }
  if (c.images.empty()) throw DataError("training corpus '" + dir + "' contains no readable images");
  return c;
}

inline Plane resize_bilinear(const Plane& src, std::size_t h, std::size_t w) {
  Plane out(h, w);
  const double sy = static_cast<double>(src.height) / h, sx = static_cast<double>(src.width) / w;
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double ty = fy - y0;
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double tx = fx - x0;
      out.at(y, x) = (1 - ty) * ((1 - tx) * src.at(y0, x0) + tx * src.at(y0, x1)) +
                     ty * ((1 - tx) * src.at(y1, x0) + tx * src.at(y1, x1));
    }
  }
  return out;
}

/// Random square crop; images smaller than the crop are first resized so the
/// shorter side matches it.
inline Plane random_crop(const Plane& img, std::size_t crop, Rng& rng) {
  const Plane* src = &img;
  Plane resized;
  if (img.height < crop || img.width < crop) {
    const double s = static_cast<double>(crop) / static_cast<double>(std::min(img.height, img.width));
    resized = resize_bilinear(img, std::max(crop, static_cast<std::size_t>(std::ceil(img.height * s))),
                              std::max(crop, static_cast<std::size_t>(std::ceil(img.width * s))));
    src = &resized;
  }
  const std::size_t oy = rng.index(src->height - crop + 1), ox = rng.index(src->width - crop + 1);
  Plane out(crop, crop);
  for (std::size_t y = 0; y < crop; ++y)
    for (std::size_t x = 0; x < crop; ++x) out.at(y, x) = src->at(oy + y, ox + x);
  return out;
}

/// Visits the image indices of every step of an epoch. A short final batch is
/// filled by resampling the corpus.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t corpus_size, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> order(corpus_size);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < corpus_size; start += batch) {
    std::vector<std::size_t> idx(order.begin() + start, order.begin() + std::min(corpus_size, start + batch));
    while (idx.size() < batch) idx.push_back(rng.index(corpus_size));
    out.push_back(std::move(idx));
  }
  return out;
}

template <typename T>
Tensor<T> make_batch(const Corpus& corpus, const std::vector<std::size_t>& idx, std::size_t crop, Rng& rng) {
  Tensor<T> batch({idx.size(), 1, crop, crop});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Plane p = random_crop(corpus.images[idx[b]], crop, rng);
    for (std::size_t i = 0; i < p.size(); ++i) batch.slice(b)[i] = static_cast<T>(p.data[i]);
  }
  return batch;
}

inline std::size_t steps_per_epoch(std::size_t corpus_size, std::size_t batch) {
  return (corpus_size + batch - 1) / batch;
}

// ---------------------------------------------------------------------------

struct LossRecord {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
};

/// Unsupervised reconstruction loss of the model on `batch` fed to both branches.
template <typename T>
T validation_loss(const FusionModel<T>& model, const Tensor<T>& batch, double lambda_1) {
  return total_loss(model.forward(batch, batch), batch, LossWeights{lambda_1});
}

/// Owns the optimization state for one model.
template <typename T>
class Trainer {
 public:
  /// Called with (branch 1 input, branch 2 input, loss target) on every step.
  using StepObserver = std::function<void(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&)>;

  Trainer(FusionModel<T>& model, const TrainConfig& cfg, std::size_t total_steps)
      : model_(model), cfg_(cfg), total_steps_(total_steps),
        optimizer_(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay), params_(model.parameters()) {}

  void set_observer(StepObserver fn) { observer_ = std::move(fn); }
  std::size_t step() const { return step_; }
  std::size_t total_steps() const { return total_steps_; }
  double current_lr() const { return lr_at(step_, total_steps_, cfg_); }

  /// One optimization step on `batch` with the scheduled learning rate.
  T train_step(const Tensor<T>& batch) { return train_step(batch, current_lr()); }

  T train_step(const Tensor<T>& batch, double lr) {
    for (T v : batch.values())
      if (!(v >= T(-1) && v <= T(1))) throw DataError("train_step: batch values must lie in [-1, 1]");
    ForwardTrace<T> trace;
    const Tensor<T>& branch_1 = batch;
    const Tensor<T>& branch_2 = batch;
    const Tensor<T>& target = batch;
    if (observer_) observer_(branch_1, branch_2, target);
    const Tensor<T> out = model_.forward(branch_1, branch_2, &trace);
    const LossWeights weights{cfg_.lambda_1};
    const T loss = total_loss(out, target, weights);
    if (!std::isfinite(loss)) throw NumericalError("train_step: non-finite loss at step " + std::to_string(step_));
    model_.zero_grad();
    model_.backward(trace, total_loss_backward(out, target, weights));
    for (const auto* p : params_)
      if (!all_finite(p->grad))
        throw NumericalError("train_step: non-finite gradient in parameter '" + p->name + "' at step " +
                             std::to_string(step_));
    clip_grad_norm(params_, cfg_.grad_clip);
    optimizer_.step(params_, lr);
    ++step_;
    return loss;
  }

 private:
  FusionModel<T>& model_;
  TrainConfig cfg_;
  std::size_t total_steps_;
  std::size_t step_ = 0;
  AdamW<T> optimizer_;
  std::vector<Param<T>*> params_;
  StepObserver observer_;
};

struct FitResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> log;
};

struct FitOptions {
  std::function<void(const LossRecord&)> on_step;
};

/// Full training protocol: epochs x ceil(N / batch) steps of same-image
/// reconstruction with a cosine-annealed AdamW schedule.
inline FitResult fit(const Corpus& corpus, const RunConfig& run, const FitOptions& options = {}) {
  run.network.validate();
  run.train.validate();
  if (corpus.size() == 0) throw DataError("fit: empty corpus");
  const auto& cfg = run.train;
  auto streams = seed_all(cfg.seed);
  auto model = build_model<float>(run.network, cfg.ablation, streams.init);
  const std::size_t per_epoch = steps_per_epoch(corpus.size(), cfg.batch_size);
  Trainer<float> trainer(model, cfg, per_epoch * cfg.epochs);
  FitResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch)
    for (const auto& idx : epoch_batches(corpus.size(), cfg.batch_size, streams.data)) {
      const auto batch = make_batch<float>(corpus, idx, cfg.crop_size, streams.data);
      LossRecord rec{trainer.step(), trainer.current_lr(), 0.0};
      rec.loss = trainer.train_step(batch);
      result.log.push_back(rec);
      if (options.on_step) options.on_step(rec);
    }
  result.checkpoint = Checkpoint::capture(model, cfg, trainer.step());
  return result;
}

inline FitResult fit(const std::string& corpus_dir, const RunConfig& run, const FitOptions& options = {}) {
  return fit(load_corpus(corpus_dir), run, options);
}

inline void write_loss_log(const std::string& path, const std::vector<LossRecord>& log) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write loss log '" + path + "'");
  out.precision(10);
  out << "step,lr,loss\n";
  for (const auto& r : log) out << r.step << ',' << r.lr << ',' << r.loss << '\n';
}

/// Exponential moving average of a loss trace.
inline std::vector<double> smooth_losses(const std::vector<LossRecord>& log, double beta = 0.9) {
  std::vector<double> out;
  double avg = 0;
  for (std::size_t i = 0; i < log.size(); ++i) {
    avg = i == 0 ? log[i].loss : beta * avg + (1 - beta) * log[i].loss;
    out.push_back(avg);
  }
  return out;
}

}  // namespace hcfusion
