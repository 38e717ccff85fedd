#pragma once

#include <algorithm>
#include <cmath>
#include <utility>

#include "hcfusion/layers.hpp"

namespace hcfusion {

/// Channel-to-channel affinities between a vice feature (rows) and a primary
/// feature (columns), per batch element.
///
/// `affinity(b,i,j) = exp(<V_i, P_j>/(H*W) - max_j' <V_i, P_j'>/(H*W))` is the
/// embedded-Gaussian kernel up to a per-row factor, which cancels in the
/// normalized `weights` (each row sums to one).
template <typename T>
struct ChannelAffinity {
  Tensor<T> affinity;  // [B, C, C], positive
  Tensor<T> weights;   // [B, C, C], row-normalized
};

template <typename T>
ChannelAffinity<T> channel_affinity(const Tensor<T>& phi_v, const Tensor<T>& phi_p) {
  require_rank(phi_p, 4, "channel_affinity");
  if (phi_v.shape() != phi_p.shape())
    throw ShapeError("channel_affinity: shape mismatch " + to_string(phi_v.shape()) + " vs " +
                     to_string(phi_p.shape()));
  const std::size_t B = phi_p.dim(0), C = phi_p.dim(1), N = phi_p.dim(2) * phi_p.dim(3);
  ChannelAffinity<T> out{Tensor<T>({B, C, C}), Tensor<T>({B, C, C})};
  const T scale = T(1) / static_cast<T>(N);
  for (std::size_t b = 0; b < B; ++b) {
    T* aff = out.affinity.slice(b);
    T* w = out.weights.slice(b);
    gemm<T>(Trans::kNo, Trans::kYes, C, C, N, phi_v.slice(b), phi_p.slice(b), aff, false);
    for (std::size_t i = 0; i < C; ++i) {
      T* row = aff + i * C;
      T mx = row[0] * scale;
      for (std::size_t j = 0; j < C; ++j) {
        row[j] *= scale;
        mx = std::max(mx, row[j]);
      }
      T sum{0};
      for (std::size_t j = 0; j < C; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      for (std::size_t j = 0; j < C; ++j) w[i * C + j] = row[j] / sum;
    }
  }
  return out;
}

/// Attended feature Y: Y_i = sum_j w_ij * P_j over channel slices.
template <typename T>
Tensor<T> attend(const Tensor<T>& weights, const Tensor<T>& phi_p) {
  const std::size_t B = phi_p.dim(0), C = phi_p.dim(1), N = phi_p.dim(2) * phi_p.dim(3);
  Tensor<T> y(phi_p.shape());
  for (std::size_t b = 0; b < B; ++b)
    gemm<T>(Trans::kNo, Trans::kNo, C, N, C, weights.slice(b), phi_p.slice(b), y.slice(b), false);
  return y;
}

/// Cross-modal channel attention with residual: Phi_P + alpha * Y.
template <typename T>
Tensor<T> nca_forward(const Tensor<T>& phi_p, const Tensor<T>& phi_v, T alpha) {
  require_finite(phi_p, "nca_forward");
  require_finite(phi_v, "nca_forward");
  if (!std::isfinite(alpha)) throw NumericalError("nca_forward: alpha is not finite");
  const auto aff = channel_affinity(phi_v, phi_p);
  if (alpha == T{0}) return phi_p;
  Tensor<T> out = attend(aff.weights, phi_p);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = phi_p[i] + alpha * out[i];
  return out;
}

template <typename T>
struct NcaTrace {
  Tensor<T> phi_p, phi_v;
  Tensor<T> weights;
  Tensor<T> attended;
};

/// One attention block: a learnable residual gain initialised to zero.
template <typename T>
class NcaBlock {
 public:
  NcaBlock() = default;
  explicit NcaBlock(const std::string& name) : alpha_(name + ".alpha", {1}) {}

  T alpha() const { return alpha_.value[0]; }
  void set_alpha(T a) { alpha_.value[0] = a; }

  Tensor<T> forward(const Tensor<T>& phi_p, const Tensor<T>& phi_v, NcaTrace<T>* trace = nullptr) const {
    if (!trace) return nca_forward(phi_p, phi_v, alpha());
    auto aff = channel_affinity(phi_v, phi_p);
    trace->phi_p = phi_p;
    trace->phi_v = phi_v;
    trace->attended = attend(aff.weights, phi_p);
    trace->weights = std::move(aff.weights);
    const T a = alpha();
    if (a == T{0}) return phi_p;
    Tensor<T> out(phi_p.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = phi_p[i] + a * trace->attended[i];
    return out;
  }

  /// Returns (dL/dPhi_P, dL/dPhi_V) and accumulates dL/dalpha.
  std::pair<Tensor<T>, Tensor<T>> backward(const NcaTrace<T>& tr, const Tensor<T>& grad) {
    const std::size_t B = tr.phi_p.dim(0), C = tr.phi_p.dim(1), N = tr.phi_p.dim(2) * tr.phi_p.dim(3);
    const T a = alpha();
    T galpha{0};
    for (std::size_t i = 0; i < grad.numel(); ++i) galpha += grad[i] * tr.attended[i];
    alpha_.grad[0] += galpha;

    Tensor<T> gp = grad;
    Tensor<T> gv(tr.phi_v.shape());
    std::vector<T> gy(C * N), gw(C * C), gs(C * C);
    const T scale = T(1) / static_cast<T>(N);
    for (std::size_t b = 0; b < B; ++b) {
      const T* g = grad.slice(b);
      const T* P = tr.phi_p.slice(b);
      const T* V = tr.phi_v.slice(b);
      const T* w = tr.weights.slice(b);
      for (std::size_t i = 0; i < C * N; ++i) gy[i] = a * g[i];
      // Y = W P
      gemm<T>(Trans::kNo, Trans::kYes, C, C, N, gy.data(), P, gw.data(), false);
      gemm<T>(Trans::kYes, Trans::kNo, C, N, C, w, gy.data(), gp.slice(b), true);
      // row softmax
      for (std::size_t i = 0; i < C; ++i) {
        T dot{0};
        for (std::size_t j = 0; j < C; ++j) dot += gw[i * C + j] * w[i * C + j];
        for (std::size_t j = 0; j < C; ++j) gs[i * C + j] = w[i * C + j] * (gw[i * C + j] - dot) * scale;
      }
      // S = V P^T / N
      gemm<T>(Trans::kNo, Trans::kNo, C, N, C, gs.data(), P, gv.slice(b), false);
      gemm<T>(Trans::kYes, Trans::kNo, C, N, C, gs.data(), V, gp.slice(b), true);
    }
    return {std::move(gp), std::move(gv)};
  }

  void visit(const ParamVisitor<T>& fn) { fn(alpha_); }

 private:
  Param<T> alpha_;
};

/// Each branch plays the primary role once.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> nca_pair(const Tensor<T>& phi_1, const Tensor<T>& phi_2, const NcaBlock<T>& p1,
                                         const NcaBlock<T>& p2) {
  return {p1.forward(phi_1, phi_2), p2.forward(phi_2, phi_1)};
}

}  // namespace hcfusion
