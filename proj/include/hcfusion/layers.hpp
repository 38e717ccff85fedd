#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hcfusion/tensor.hpp"

namespace hcfusion {

/// Seeded random source. Every stochastic choice in the library draws from
/// one of these so that a seed fully determines a run.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// A trainable array with its accumulated gradient.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(shape) {}
  void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
using ParamVisitor = std::function<void(Param<T>&)>;

// ---------------------------------------------------------------------------
// GEMM on row-major buffers, backed by Eigen.

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

enum class Trans { kNo, kYes };

/// C[m,n] (+)= op(A) * op(B), all row-major.
///
/// Operands are staged in aligned scratch storage: Eigen's vectorized kernels
/// peel unaligned heads, so working on caller buffers directly would make the
/// summation order (and the last bits of the result) depend on addresses.
template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n),
             K = static_cast<Eigen::Index>(k);
  thread_local RowMatrix<T> sa, sb, sc;
  if (ta == Trans::kNo)
    sa = ConstMatrixMap<T>(a, M, K);
  else
    sa = ConstMatrixMap<T>(a, K, M);
  if (tb == Trans::kNo)
    sb = ConstMatrixMap<T>(b, K, N);
  else
    sb = ConstMatrixMap<T>(b, N, K);
  sc.resize(M, N);
  if (ta == Trans::kNo && tb == Trans::kNo)
    sc.noalias() = sa * sb;
  else if (ta == Trans::kNo)
    sc.noalias() = sa * sb.transpose();
  else if (tb == Trans::kNo)
    sc.noalias() = sa.transpose() * sb;
  else
    sc.noalias() = sa.transpose() * sb.transpose();
  MatrixMap<T> cm(c, M, N);
  if (accumulate)
    cm += sc;
  else
    cm = sc;
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities. Backward variants take the forward input.

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T{0} ? x[i] : slope * x[i];
  return y;
}

template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& x, const Tensor<T>& gy, T slope) {
  Tensor<T> gx(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) gx[i] = x[i] > T{0} ? gy[i] : slope * gy[i];
  return gx;
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(3.14159265358979323846));
  return cdf + x * pdf;
}

// ---------------------------------------------------------------------------

/// Stride-1 2-D convolution with dilation and "same" zero padding.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t dilation)
      : in_(in_ch), out_(out_ch), k_(kernel), dilation_(dilation),
        weight_(name + ".weight", {out_ch, in_ch * kernel * kernel}),
        bias_(name + ".bias", {out_ch}) {}

  /// Kaiming fan-in initialization for a leaky-rectified stack, zero bias.
  void init(Rng& rng, double slope) {
    const double fan_in = static_cast<double>(in_ * k_ * k_);
    const double stddev = std::sqrt(2.0 / ((1.0 + slope * slope) * fan_in));
    for (auto& w : weight_.value.values()) w = static_cast<T>(rng.normal(0.0, stddev));
    bias_.value.fill(T{0});
  }

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  std::size_t kernel() const { return k_; }
  std::size_t dilation() const { return dilation_; }

  Tensor<T> forward(const Tensor<T>& x) const {
    check_input(x);
    const std::size_t B = x.dim(0), H = x.dim(2), W = x.dim(3), HW = H * W;
    Tensor<T> y({B, out_, H, W});
    std::vector<T> col(in_ * k_ * k_ * HW);
    for (std::size_t b = 0; b < B; ++b) {
      im2col(x.slice(b), H, W, col.data());
      T* yb = y.slice(b);
      gemm<T>(Trans::kNo, Trans::kNo, out_, HW, in_ * k_ * k_, weight_.value.data(), col.data(), yb, false);
      for (std::size_t o = 0; o < out_; ++o) {
        const T bo = bias_.value[o];
        for (std::size_t p = 0; p < HW; ++p) yb[o * HW + p] += bo;
      }
    }
    return y;
  }

  /// Accumulates parameter gradients and returns the input gradient.
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& gy) {
    const std::size_t B = x.dim(0), H = x.dim(2), W = x.dim(3), HW = H * W;
    const std::size_t K = in_ * k_ * k_;
    Tensor<T> gx(x.shape());
    std::vector<T> col(K * HW), gcol(K * HW);
    for (std::size_t b = 0; b < B; ++b) {
      im2col(x.slice(b), H, W, col.data());
      const T* gyb = gy.slice(b);
      gemm<T>(Trans::kNo, Trans::kYes, out_, K, HW, gyb, col.data(), weight_.grad.data(), true);
      for (std::size_t o = 0; o < out_; ++o) {
        T s{0};
        for (std::size_t p = 0; p < HW; ++p) s += gyb[o * HW + p];
        bias_.grad[o] += s;
      }
      gemm<T>(Trans::kYes, Trans::kNo, K, HW, out_, weight_.value.data(), gyb, gcol.data(), false);
      col2im(gcol.data(), H, W, gx.slice(b));
    }
    return gx;
  }

  void visit(const ParamVisitor<T>& fn) {
    fn(weight_);
    fn(bias_);
  }

  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

 private:
  void check_input(const Tensor<T>& x) const {
    require_rank(x, 4, "conv2d");
    if (x.dim(1) != in_)
      throw ShapeError("conv2d: expected " + std::to_string(in_) + " input channels, got " + to_string(x.shape()));
    if (x.dim(2) < k_ || x.dim(3) < k_)
      throw ShapeError("conv2d: spatial size " + to_string(x.shape()) + " smaller than kernel support " +
                       std::to_string(k_));
  }

  void im2col(const T* x, std::size_t H, std::size_t W, T* col) const {
    const long r = static_cast<long>(k_ / 2), d = static_cast<long>(dilation_);
    const long h = static_cast<long>(H), w = static_cast<long>(W);
    for (std::size_t c = 0; c < in_; ++c)
      for (std::size_t ky = 0; ky < k_; ++ky)
        for (std::size_t kx = 0; kx < k_; ++kx) {
          T* row = col + ((c * k_ + ky) * k_ + kx) * H * W;
          const long dy = (static_cast<long>(ky) - r) * d, dx = (static_cast<long>(kx) - r) * d;
          for (long y = 0; y < h; ++y) {
            const long sy = y + dy;
            T* out = row + y * w;
            if (sy < 0 || sy >= h) {
              std::fill(out, out + w, T{0});
              continue;
            }
            const T* src = x + (c * H + sy) * W;
            for (long xx = 0; xx < w; ++xx) {
              const long sx = xx + dx;
              out[xx] = (sx < 0 || sx >= w) ? T{0} : src[sx];
            }
          }
        }
  }

  void col2im(const T* col, std::size_t H, std::size_t W, T* gx) const {
    const long r = static_cast<long>(k_ / 2), d = static_cast<long>(dilation_);
    const long h = static_cast<long>(H), w = static_cast<long>(W);
    for (std::size_t c = 0; c < in_; ++c)
      for (std::size_t ky = 0; ky < k_; ++ky)
        for (std::size_t kx = 0; kx < k_; ++kx) {
          const T* row = col + ((c * k_ + ky) * k_ + kx) * H * W;
          const long dy = (static_cast<long>(ky) - r) * d, dx = (static_cast<long>(kx) - r) * d;
          for (long y = 0; y < h; ++y) {
            const long sy = y + dy;
            if (sy < 0 || sy >= h) continue;
            T* dst = gx + (c * H + sy) * W;
            const T* in = row + y * w;
            for (long xx = 0; xx < w; ++xx) {
              const long sx = xx + dx;
              if (sx >= 0 && sx < w) dst[sx] += in[xx];
            }
          }
        }
  }

  std::size_t in_ = 0, out_ = 0, k_ = 3, dilation_ = 1;
  Param<T> weight_;
  Param<T> bias_;
};

/// Affine map over the last axis of a [rows, in] matrix.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out)
      : in_(in), out_(out), weight_(name + ".weight", {out, in}), bias_(name + ".bias", {out}) {}

  void init(Rng& rng, double stddev = 0.02) {
    for (auto& w : weight_.value.values()) w = static_cast<T>(rng.normal(0.0, stddev));
    bias_.value.fill(T{0});
  }

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

  /// x holds `rows` consecutive vectors of length in_features().
  std::vector<T> forward(const std::vector<T>& x, std::size_t rows) const {
    std::vector<T> y(rows * out_);
    gemm<T>(Trans::kNo, Trans::kYes, rows, out_, in_, x.data(), weight_.value.data(), y.data(), false);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < out_; ++o) y[r * out_ + o] += bias_.value[o];
    return y;
  }

  std::vector<T> backward(const std::vector<T>& x, const std::vector<T>& gy, std::size_t rows) {
    gemm<T>(Trans::kYes, Trans::kNo, out_, in_, rows, gy.data(), x.data(), weight_.grad.data(), true);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < out_; ++o) bias_.grad[o] += gy[r * out_ + o];
    std::vector<T> gx(rows * in_);
    gemm<T>(Trans::kNo, Trans::kNo, rows, in_, out_, gy.data(), weight_.value.data(), gx.data(), false);
    return gx;
  }

  void visit(const ParamVisitor<T>& fn) {
    fn(weight_);
    fn(bias_);
  }

  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Param<T> weight_;
  Param<T> bias_;
};

/// Normalization over the last axis with learned gain and offset.
template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::string name, std::size_t dim)
      : dim_(dim), gamma_(name + ".weight", {dim}), beta_(name + ".bias", {dim}) {
    gamma_.value.fill(T{1});
  }

  std::vector<T> forward(const std::vector<T>& x, std::size_t rows) const {
    std::vector<T> y(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = x.data() + r * dim_;
      auto [mean, inv_std] = moments(xr);
      for (std::size_t i = 0; i < dim_; ++i)
        y[r * dim_ + i] = (xr[i] - mean) * inv_std * gamma_.value[i] + beta_.value[i];
    }
    return y;
  }

  std::vector<T> backward(const std::vector<T>& x, const std::vector<T>& gy, std::size_t rows) {
    std::vector<T> gx(x.size());
    std::vector<T> xhat(dim_), g(dim_);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = x.data() + r * dim_;
      const T* gr = gy.data() + r * dim_;
      auto [mean, inv_std] = moments(xr);
      T mean_g{0}, mean_gx{0};
      for (std::size_t i = 0; i < dim_; ++i) {
        xhat[i] = (xr[i] - mean) * inv_std;
        gamma_.grad[i] += gr[i] * xhat[i];
        beta_.grad[i] += gr[i];
        g[i] = gr[i] * gamma_.value[i];
        mean_g += g[i];
        mean_gx += g[i] * xhat[i];
      }
      mean_g /= static_cast<T>(dim_);
      mean_gx /= static_cast<T>(dim_);
      for (std::size_t i = 0; i < dim_; ++i) gx[r * dim_ + i] = inv_std * (g[i] - mean_g - xhat[i] * mean_gx);
    }
    return gx;
  }

  void visit(const ParamVisitor<T>& fn) {
    fn(gamma_);
    fn(beta_);
  }

 private:
  std::pair<T, T> moments(const T* x) const {
    T mean{0};
    for (std::size_t i = 0; i < dim_; ++i) mean += x[i];
    mean /= static_cast<T>(dim_);
    T var{0};
    for (std::size_t i = 0; i < dim_; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<T>(dim_);
    return {mean, T(1) / std::sqrt(var + T(1e-5))};
  }

  std::size_t dim_ = 0;
  Param<T> gamma_;
  Param<T> beta_;
};

}  // namespace hcfusion
