#pragma once

#include <algorithm>
#include <cmath>
#include <utility>

#include "hcfusion/tensor.hpp"

namespace hcfusion {

inline constexpr double kBranchEpsilon = 1e-8;
/// Sigmoid arguments are clamped to this magnitude, bounding weights away from 0.
inline constexpr double kSigmoidClamp = 50.0;

template <typename T>
T clamped_sigmoid(T x) {
  const T c = std::clamp(x, T(-kSigmoidClamp), T(kSigmoidClamp));
  return T(1) / (T(1) + std::exp(-c));
}

template <typename T>
struct BranchWeights {
  Tensor<T> w1, w2;
  T epsilon = static_cast<T>(kBranchEpsilon);
};

template <typename T>
void require_branch_pair(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": branch shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  require_finite(a, what);
  require_finite(b, what);
}

/// w_k = sigmoid(Phi_k) / (sigmoid(Phi_1) + sigmoid(Phi_2) + eps), elementwise.
template <typename T>
BranchWeights<T> branch_weights(const Tensor<T>& phi_1, const Tensor<T>& phi_2) {
  require_branch_pair(phi_1, phi_2, "branch_weights");
  BranchWeights<T> out{Tensor<T>(phi_1.shape()), Tensor<T>(phi_1.shape())};
  for (std::size_t i = 0; i < phi_1.numel(); ++i) {
    const T s1 = clamped_sigmoid(phi_1[i]), s2 = clamped_sigmoid(phi_2[i]);
    const T den = s1 + s2 + out.epsilon;
    out.w1[i] = s1 / den;
    out.w2[i] = s2 / den;
  }
  return out;
}

/// Phi_f = w_1 * Phi_1 + w_2 * Phi_2 (Hadamard products).
template <typename T>
Tensor<T> fuse_branches(const Tensor<T>& phi_1, const Tensor<T>& phi_2) {
  const auto w = branch_weights(phi_1, phi_2);
  Tensor<T> out(phi_1.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    // Fixed operand order keeps a branch swap bitwise symmetric under FMA contraction.
    const bool first = phi_1[i] <= phi_2[i];
    const T wa = first ? w.w1[i] : w.w2[i], pa = first ? phi_1[i] : phi_2[i];
    const T wb = first ? w.w2[i] : w.w1[i], pb = first ? phi_2[i] : phi_1[i];
    out[i] = wa * pa + wb * pb;
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> fuse_branches_backward(const Tensor<T>& phi_1, const Tensor<T>& phi_2,
                                                       const Tensor<T>& grad) {
  const T eps = static_cast<T>(kBranchEpsilon);
  Tensor<T> g1(phi_1.shape()), g2(phi_1.shape());
  for (std::size_t i = 0; i < grad.numel(); ++i) {
    const T s1 = clamped_sigmoid(phi_1[i]), s2 = clamped_sigmoid(phi_2[i]);
    const T den = s1 + s2 + eps;
    const T fused = (s1 * phi_1[i] + s2 * phi_2[i]) / den;
    const T d1 = std::abs(phi_1[i]) < T(kSigmoidClamp) ? s1 * (T(1) - s1) : T{0};
    const T d2 = std::abs(phi_2[i]) < T(kSigmoidClamp) ? s2 * (T(1) - s2) : T{0};
    g1[i] = grad[i] * (s1 / den + d1 * (phi_1[i] - fused) / den);
    g2[i] = grad[i] * (s2 / den + d2 * (phi_2[i] - fused) / den);
  }
  return {std::move(g1), std::move(g2)};
}

/// Parameter-free fallback used when the fusion module is ablated.
template <typename T>
Tensor<T> average_branches(const Tensor<T>& phi_1, const Tensor<T>& phi_2) {
  require_branch_pair(phi_1, phi_2, "average_branches");
  Tensor<T> out(phi_1.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = (phi_1[i] + phi_2[i]) * T(0.5);
  return out;
}

}  // namespace hcfusion
