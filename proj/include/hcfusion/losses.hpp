#pragma once

#include <cmath>
#include <vector>

#include "hcfusion/tensor.hpp"

namespace hcfusion {

/// Structural similarity parameters for data in [-1, 1].
struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 2.0;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
};

struct LossWeights {
  double lambda_1 = 10.0;
  SsimParams ssim{};
};

/// Normalized 2-D Gaussian window, row-major [window, window].
inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g1(size);
  double sum = 0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    g1[i] = std::exp(-d * d / (2 * sigma * sigma));
    sum += g1[i];
  }
  for (auto& v : g1) v /= sum;
  std::vector<double> g(static_cast<std::size_t>(size) * size);
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) g[i * size + j] = g1[i] * g1[j];
  return g;
}

/// Mean of squared differences over all elements.
template <typename T>
T mse_loss(const Tensor<T>& output, const Tensor<T>& input) {
  output.require_same(input, "mse_loss");
  double acc = 0;
  for (std::size_t i = 0; i < output.numel(); ++i) {
    const double d = static_cast<double>(output[i]) - static_cast<double>(input[i]);
    acc += d * d;
  }
  return static_cast<T>(acc / static_cast<double>(output.numel()));
}

template <typename T>
Tensor<T> mse_loss_backward(const Tensor<T>& output, const Tensor<T>& input, T grad = T(1)) {
  Tensor<T> g(output.shape());
  const T scale = T(2) * grad / static_cast<T>(output.numel());
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] = scale * (output[i] - input[i]);
  return g;
}

namespace detail {

/// Per-window SSIM statistics over every plane of a [B,C,H,W] pair, computed
/// on windows lying fully inside the image.
template <typename T>
struct SsimMaps {
  std::size_t planes = 0, out_h = 0, out_w = 0;
  std::vector<double> mx, my, exx, eyy, exy;

  SsimMaps(const Tensor<T>& x, const Tensor<T>& y, const SsimParams& p) {
    x.require_same(y, "ssim");
    require_rank(x, 4, "ssim");
    const std::size_t H = x.dim(2), W = x.dim(3), k = static_cast<std::size_t>(p.window);
    if (H < k || W < k)
      throw ShapeError("ssim: image " + to_string(x.shape()) + " smaller than the " + std::to_string(k) + "x" +
                       std::to_string(k) + " window");
    planes = x.dim(0) * x.dim(1);
    out_h = H - k + 1;
    out_w = W - k + 1;
    const auto g = gaussian_window(p.window, p.sigma);
    const std::size_t n = planes * out_h * out_w;
    mx.assign(n, 0);
    my.assign(n, 0);
    exx.assign(n, 0);
    eyy.assign(n, 0);
    exy.assign(n, 0);
    for (std::size_t pl = 0; pl < planes; ++pl) {
      const T* xp = x.data() + pl * H * W;
      const T* yp = y.data() + pl * H * W;
      for (std::size_t i = 0; i < out_h; ++i)
        for (std::size_t j = 0; j < out_w; ++j) {
          double a = 0, b = 0, aa = 0, bb = 0, ab = 0;
          for (std::size_t u = 0; u < k; ++u)
            for (std::size_t v = 0; v < k; ++v) {
              const double w = g[u * k + v];
              const double xv = xp[(i + u) * W + j + v], yv = yp[(i + u) * W + j + v];
              a += w * xv;
              b += w * yv;
              aa += w * xv * xv;
              bb += w * yv * yv;
              ab += w * xv * yv;
            }
          const std::size_t o = (pl * out_h + i) * out_w + j;
          mx[o] = a;
          my[o] = b;
          exx[o] = aa;
          eyy[o] = bb;
          exy[o] = ab;
        }
    }
  }
};

}  // namespace detail

/// Mean local structural similarity (Gaussian window, valid positions only).
template <typename T>
T ssim(const Tensor<T>& x, const Tensor<T>& y, const SsimParams& p = {}) {
  detail::SsimMaps<T> m(x, y, p);
  const double c1 = p.c1(), c2 = p.c2();
  double acc = 0;
  for (std::size_t o = 0; o < m.mx.size(); ++o) {
    const double vx = m.exx[o] - m.mx[o] * m.mx[o], vy = m.eyy[o] - m.my[o] * m.my[o];
    const double cxy = m.exy[o] - m.mx[o] * m.my[o];
    acc += ((2 * m.mx[o] * m.my[o] + c1) * (2 * cxy + c2)) /
           ((m.mx[o] * m.mx[o] + m.my[o] * m.my[o] + c1) * (vx + vy + c2));
  }
  return static_cast<T>(acc / static_cast<double>(m.mx.size()));
}

/// d ssim(x, y) / dx, scaled by `grad`.
template <typename T>
Tensor<T> ssim_backward(const Tensor<T>& x, const Tensor<T>& y, T grad = T(1), const SsimParams& p = {}) {
  detail::SsimMaps<T> m(x, y, p);
  const double c1 = p.c1(), c2 = p.c2();
  const double scale = static_cast<double>(grad) / static_cast<double>(m.mx.size());
  const std::size_t n = m.mx.size();
  std::vector<double> gm(n), gxx(n), gxy(n);
  for (std::size_t o = 0; o < n; ++o) {
    const double mx = m.mx[o], my = m.my[o];
    const double vx = m.exx[o] - mx * mx, vy = m.eyy[o] - my * my, cxy = m.exy[o] - mx * my;
    const double a1 = 2 * mx * my + c1, a2 = 2 * cxy + c2;
    const double b1 = mx * mx + my * my + c1, b2 = vx + vy + c2;
    const double s = a1 * a2 / (b1 * b2);
    const double ds_dmx = 2 * my * a2 / (b1 * b2) - 2 * mx * s / b1;
    const double ds_dvx = -s / b2;
    const double ds_dcxy = 2 * a1 / (b1 * b2);
    gm[o] = scale * (ds_dmx - 2 * mx * ds_dvx - my * ds_dcxy);
    gxx[o] = scale * ds_dvx;
    gxy[o] = scale * ds_dcxy;
  }
  const std::size_t H = x.dim(2), W = x.dim(3), k = static_cast<std::size_t>(p.window);
  const auto g = gaussian_window(p.window, p.sigma);
  Tensor<T> out(x.shape());
  std::vector<double> acc_m(H * W), acc_xx(H * W), acc_xy(H * W);
  for (std::size_t pl = 0; pl < m.planes; ++pl) {
    std::fill(acc_m.begin(), acc_m.end(), 0.0);
    std::fill(acc_xx.begin(), acc_xx.end(), 0.0);
    std::fill(acc_xy.begin(), acc_xy.end(), 0.0);
    for (std::size_t i = 0; i < m.out_h; ++i)
      for (std::size_t j = 0; j < m.out_w; ++j) {
        const std::size_t o = (pl * m.out_h + i) * m.out_w + j;
        for (std::size_t u = 0; u < k; ++u)
          for (std::size_t v = 0; v < k; ++v) {
            const double w = g[u * k + v];
            const std::size_t q = (i + u) * W + j + v;
            acc_m[q] += w * gm[o];
            acc_xx[q] += w * gxx[o];
            acc_xy[q] += w * gxy[o];
          }
      }
    const T* xp = x.data() + pl * H * W;
    const T* yp = y.data() + pl * H * W;
    T* op = out.data() + pl * H * W;
    for (std::size_t q = 0; q < H * W; ++q)
      op[q] = static_cast<T>(acc_m[q] + 2.0 * static_cast<double>(xp[q]) * acc_xx[q] +
                             static_cast<double>(yp[q]) * acc_xy[q]);
  }
  return out;
}

/// L = MSE + lambda_1 * (1 - SSIM).
template <typename T>
T total_loss(const Tensor<T>& output, const Tensor<T>& input, const LossWeights& w = {}) {
  const T mse = mse_loss(output, input);
  if (w.lambda_1 == 0.0) return mse;
  return mse + static_cast<T>(w.lambda_1) * (T(1) - ssim(output, input, w.ssim));
}

template <typename T>
Tensor<T> total_loss_backward(const Tensor<T>& output, const Tensor<T>& input, const LossWeights& w = {}) {
  Tensor<T> g = mse_loss_backward(output, input);
  if (w.lambda_1 == 0.0) return g;
  const Tensor<T> gs = ssim_backward(output, input, static_cast<T>(-w.lambda_1), w.ssim);
  g += gs;
  return g;
}

}  // namespace hcfusion
