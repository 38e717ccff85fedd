#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "hcfusion/config.hpp"
#include "hcfusion/layers.hpp"
#include "hcfusion/log.hpp"

namespace hcfusion {

/// Additive attention-mask value for token pairs that must not interact.
inline constexpr double kMaskValue = -1e4;

/// Tokens laid out row-major over a (grid_h, grid_w) grid, plus the geometry
/// needed to map them back onto the feature map they came from.
template <typename T>
struct TokenGrid {
  Tensor<T> tokens;  // [B, L, D]
  std::size_t grid_h = 0, grid_w = 0;
  std::size_t feature_h = 0, feature_w = 0;  // before padding
  std::size_t padded_h = 0, padded_w = 0;    // after reflective padding

  std::size_t batch() const { return tokens.dim(0); }
  std::size_t length() const { return tokens.dim(1); }
  std::size_t width() const { return tokens.dim(2); }
};

// ---------------------------------------------------------------------------
// Reflective padding on the bottom/right edges.

inline std::size_t reflect_index(long i, long n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return static_cast<std::size_t>(i);
}

template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (out_h == H && out_w == W) return x;
  Tensor<T> y({B, C, out_h, out_w});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < out_h; ++i) {
        const auto si = reflect_index(static_cast<long>(i), static_cast<long>(H));
        for (std::size_t j = 0; j < out_w; ++j)
          y(b, c, i, j) = x(b, c, si, reflect_index(static_cast<long>(j), static_cast<long>(W)));
      }
  return y;
}

template <typename T>
Tensor<T> pad_reflect_backward(const Tensor<T>& gy, std::size_t H, std::size_t W) {
  const std::size_t B = gy.dim(0), C = gy.dim(1), out_h = gy.dim(2), out_w = gy.dim(3);
  if (out_h == H && out_w == W) return gy;
  Tensor<T> gx({B, C, H, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < out_h; ++i) {
        const auto si = reflect_index(static_cast<long>(i), static_cast<long>(H));
        for (std::size_t j = 0; j < out_w; ++j)
          gx(b, c, si, reflect_index(static_cast<long>(j), static_cast<long>(W))) += gy(b, c, i, j);
      }
  return gx;
}

// ---------------------------------------------------------------------------
// Window partitioning over a [B, Ht, Wt, D] grid.

/// Effective window size: clamped to the smaller grid side.
inline std::size_t effective_window(std::size_t grid_h, std::size_t grid_w, std::size_t window) {
  return std::min(window, std::min(grid_h, grid_w));
}

/// [B, Ht, Wt, D] -> [B * nW, M*M, D], windows in row-major order.
template <typename U>
Tensor<U> window_partition(const Tensor<U>& grid, std::size_t window) {
  require_rank(grid, 4, "window_partition");
  const std::size_t B = grid.dim(0), H = grid.dim(1), W = grid.dim(2), D = grid.dim(3);
  std::size_t M = window;
  if (M > H || M > W) {
    M = effective_window(H, W, window);
    log_warning("window size " + std::to_string(window) + " exceeds token grid " + std::to_string(H) + "x" +
                std::to_string(W) + "; clamped to " + std::to_string(M));
  }
  if (H % M != 0 || W % M != 0)
    throw ShapeError("window_partition: grid " + std::to_string(H) + "x" + std::to_string(W) +
                     " not divisible by window " + std::to_string(M));
  const std::size_t nh = H / M, nw = W / M;
  Tensor<U> out({B * nh * nw, M * M, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t wy = 0; wy < nh; ++wy)
      for (std::size_t wx = 0; wx < nw; ++wx) {
        U* dst = out.slice((b * nh + wy) * nw + wx);
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t j = 0; j < M; ++j) {
            const U* src = grid.data() + ((b * H + wy * M + i) * W + wx * M + j) * D;
            std::copy(src, src + D, dst + (i * M + j) * D);
          }
      }
  return out;
}

/// Inverse of window_partition for a grid of the given size.
template <typename U>
Tensor<U> window_reverse(const Tensor<U>& windows, std::size_t window, std::size_t H, std::size_t W) {
  require_rank(windows, 3, "window_reverse");
  const std::size_t M = std::min(window, std::min(H, W));
  if (H % M != 0 || W % M != 0 || windows.dim(1) != M * M)
    throw ShapeError("window_reverse: inconsistent window geometry");
  const std::size_t nh = H / M, nw = W / M, D = windows.dim(2);
  if (windows.dim(0) % (nh * nw) != 0) throw ShapeError("window_reverse: window count does not match grid");
  const std::size_t B = windows.dim(0) / (nh * nw);
  Tensor<U> grid({B, H, W, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t wy = 0; wy < nh; ++wy)
      for (std::size_t wx = 0; wx < nw; ++wx) {
        const U* src = windows.slice((b * nh + wy) * nw + wx);
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t j = 0; j < M; ++j) {
            U* dst = grid.data() + ((b * H + wy * M + i) * W + wx * M + j) * D;
            std::copy(src + (i * M + j) * D, src + (i * M + j + 1) * D, dst);
          }
      }
  return grid;
}

/// Region labels of the cyclically shifted, padded grid; windows may only
/// attend within one label. Returns [nW, M*M, M*M] additive mask.
template <typename T>
Tensor<T> shifted_window_mask(std::size_t H, std::size_t W, std::size_t M, std::size_t shift) {
  Tensor<int> labels({1, H, W, 1});
  if (shift > 0) {
    auto band = [&](std::size_t i, std::size_t n) { return i < n - M ? 0 : (i < n - shift ? 1 : 2); };
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) labels[i * W + j] = band(i, H) * 3 + band(j, W);
  }
  const auto wins = window_partition(labels, M);
  const std::size_t nW = wins.dim(0), N = M * M;
  Tensor<T> mask({nW, N, N});
  for (std::size_t w = 0; w < nW; ++w)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j)
        mask[(w * N + i) * N + j] = wins[w * N + i] == wins[w * N + j] ? T{0} : static_cast<T>(kMaskValue);
  return mask;
}

/// Index into the (2M-1)^2 relative-position table for each token pair of a
/// window of side `m` (m <= M).
inline std::vector<std::size_t> relative_position_index(std::size_t m, std::size_t M) {
  const std::size_t N = m * m;
  std::vector<std::size_t> idx(N * N);
  for (std::size_t a = 0; a < N; ++a)
    for (std::size_t b = 0; b < N; ++b) {
      const long dr = static_cast<long>(a / m) - static_cast<long>(b / m) + static_cast<long>(M) - 1;
      const long dc = static_cast<long>(a % m) - static_cast<long>(b % m) + static_cast<long>(M) - 1;
      idx[a * N + b] = static_cast<std::size_t>(dr) * (2 * M - 1) + static_cast<std::size_t>(dc);
    }
  return idx;
}

/// Multiply-adds spent in the score and value products of windowed attention
/// over a grid padded to whole windows.
inline std::uint64_t window_attention_macs(std::size_t grid_h, std::size_t grid_w, std::size_t window,
                                           std::size_t dim) {
  const std::size_t M = effective_window(grid_h, grid_w, window);
  const std::uint64_t windows = ((grid_h + M - 1) / M) * ((grid_w + M - 1) / M);
  const std::uint64_t N = M * M;
  return windows * 2 * N * N * dim;
}

// ---------------------------------------------------------------------------

template <typename T>
struct AttentionTrace {
  std::vector<T> input;    // [rows, D]
  std::vector<T> qkv;      // [rows, 3D]
  std::vector<T> probs;    // [windows, heads, N, N]
  std::vector<T> context;  // [rows, D], before the output projection
  std::size_t windows = 0, tokens = 0;
  std::uint64_t macs = 0;
};

/// Multi-head self-attention inside windows with relative position bias.
template <typename T>
class WindowAttention {
 public:
  WindowAttention() = default;
  WindowAttention(const std::string& name, std::size_t dim, std::size_t heads, std::size_t window)
      : dim_(dim), heads_(heads), window_(window), qkv_(name + ".qkv", dim, 3 * dim), proj_(name + ".proj", dim, dim),
        bias_table_(name + ".relative_position_bias_table", {(2 * window - 1) * (2 * window - 1), heads}) {}

  void init(Rng& rng) {
    qkv_.init(rng);
    proj_.init(rng);
    for (auto& v : bias_table_.value.values()) v = static_cast<T>(std::clamp(rng.normal(0.0, 0.02), -0.04, 0.04));
  }

  /// x: `windows` groups of m*m tokens. `mask` is [nW_per_image, N, N] or empty.
  std::vector<T> forward(const std::vector<T>& x, std::size_t windows, std::size_t m, const Tensor<T>* mask,
                         AttentionTrace<T>* trace = nullptr) const {
    const std::size_t N = m * m, D = dim_, hd = D / heads_, rows = windows * N;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const auto rel = relative_position_index(m, window_);
    std::vector<T> qkv = qkv_.forward(x, rows);
    std::vector<T> context(rows * D);
    std::vector<T> q(N * hd), k(N * hd), v(N * hd), s(N * N), o(N * hd);
    std::vector<T> probs;
    if (trace) probs.resize(windows * heads_ * N * N);
    const std::size_t mask_windows = mask ? mask->dim(0) : 1;
    for (std::size_t w = 0; w < windows; ++w)
      for (std::size_t h = 0; h < heads_; ++h) {
        gather_head(qkv, w, h, N, q, k, v);
        for (auto& e : q) e *= scale;
        gemm<T>(Trans::kNo, Trans::kYes, N, N, hd, q.data(), k.data(), s.data(), false);
        const T* mk = mask ? mask->slice(w % mask_windows) : nullptr;
        for (std::size_t i = 0; i < N; ++i) {
          T* row = s.data() + i * N;
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j < N; ++j) {
            row[j] += bias_table_.value[rel[i * N + j] * heads_ + h];
            if (mk) row[j] += mk[i * N + j];
            mx = std::max(mx, row[j]);
          }
          T sum{0};
          for (std::size_t j = 0; j < N; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
          }
          for (std::size_t j = 0; j < N; ++j) row[j] /= sum;
        }
        gemm<T>(Trans::kNo, Trans::kNo, N, hd, N, s.data(), v.data(), o.data(), false);
        for (std::size_t n = 0; n < N; ++n)
          std::copy(o.begin() + n * hd, o.begin() + (n + 1) * hd, context.begin() + (w * N + n) * D + h * hd);
        if (trace) std::copy(s.begin(), s.end(), probs.begin() + (w * heads_ + h) * N * N);
      }
    std::vector<T> y = proj_.forward(context, rows);
    if (trace) {
      trace->input = x;
      trace->qkv = std::move(qkv);
      trace->probs = std::move(probs);
      trace->context = std::move(context);
      trace->windows = windows;
      trace->tokens = N;
      trace->macs = static_cast<std::uint64_t>(windows) * heads_ * 2 * N * N * hd;
    }
    return y;
  }

  std::vector<T> backward(const AttentionTrace<T>& tr, const std::vector<T>& gy, std::size_t m) {
    const std::size_t N = tr.tokens, D = dim_, hd = D / heads_, rows = tr.windows * N;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const auto rel = relative_position_index(m, window_);
    std::vector<T> gcontext = proj_.backward(tr.context, gy, rows);
    std::vector<T> gqkv(rows * 3 * D);
    std::vector<T> q(N * hd), k(N * hd), v(N * hd), go(N * hd), ga(N * N), gs(N * N);
    std::vector<T> gq(N * hd), gk(N * hd), gv(N * hd);
    for (std::size_t w = 0; w < tr.windows; ++w)
      for (std::size_t h = 0; h < heads_; ++h) {
        gather_head(tr.qkv, w, h, N, q, k, v);
        for (auto& e : q) e *= scale;
        const T* a = tr.probs.data() + (w * heads_ + h) * N * N;
        for (std::size_t n = 0; n < N; ++n)
          std::copy(gcontext.begin() + (w * N + n) * D + h * hd, gcontext.begin() + (w * N + n) * D + (h + 1) * hd,
                    go.begin() + n * hd);
        gemm<T>(Trans::kNo, Trans::kYes, N, N, hd, go.data(), v.data(), ga.data(), false);
        gemm<T>(Trans::kYes, Trans::kNo, N, hd, N, a, go.data(), gv.data(), false);
        for (std::size_t i = 0; i < N; ++i) {
          T dot{0};
          for (std::size_t j = 0; j < N; ++j) dot += ga[i * N + j] * a[i * N + j];
          for (std::size_t j = 0; j < N; ++j) {
            gs[i * N + j] = a[i * N + j] * (ga[i * N + j] - dot);
            bias_table_.grad[rel[i * N + j] * heads_ + h] += gs[i * N + j];
          }
        }
        gemm<T>(Trans::kNo, Trans::kNo, N, hd, N, gs.data(), k.data(), gq.data(), false);
        gemm<T>(Trans::kYes, Trans::kNo, N, hd, N, gs.data(), q.data(), gk.data(), false);
        for (std::size_t n = 0; n < N; ++n) {
          T* row = gqkv.data() + (w * N + n) * 3 * D + h * hd;
          for (std::size_t e = 0; e < hd; ++e) {
            row[e] = gq[n * hd + e] * scale;
            row[D + e] = gk[n * hd + e];
            row[2 * D + e] = gv[n * hd + e];
          }
        }
      }
    return qkv_.backward(tr.input, gqkv, rows);
  }

  void visit(const ParamVisitor<T>& fn) {
    qkv_.visit(fn);
    proj_.visit(fn);
    fn(bias_table_);
  }

  std::size_t heads() const { return heads_; }

 private:
  void gather_head(const std::vector<T>& qkv, std::size_t w, std::size_t h, std::size_t N, std::vector<T>& q,
                   std::vector<T>& k, std::vector<T>& v) const {
    const std::size_t D = dim_, hd = D / heads_;
    for (std::size_t n = 0; n < N; ++n) {
      const T* row = qkv.data() + (w * N + n) * 3 * D + h * hd;
      std::copy(row, row + hd, q.begin() + n * hd);
      std::copy(row + D, row + D + hd, k.begin() + n * hd);
      std::copy(row + 2 * D, row + 2 * D + hd, v.begin() + n * hd);
    }
  }

  std::size_t dim_ = 0, heads_ = 1, window_ = 1;
  Linear<T> qkv_, proj_;
  Param<T> bias_table_;
};

/// Window geometry of one block applied to one token grid.
struct WindowPlan {
  std::size_t window = 0;  // effective window side
  std::size_t shift = 0;
  std::size_t padded_h = 0, padded_w = 0;
  std::size_t windows_per_image = 0;
  std::vector<long> source;  // per window-token slot: token index in the image, or -1 for padding

  static WindowPlan make(std::size_t grid_h, std::size_t grid_w, std::size_t window, bool shifted) {
    WindowPlan p;
    const bool whole_grid = std::min(grid_h, grid_w) <= window;
    p.window = whole_grid ? std::min(grid_h, grid_w) : window;
    p.shift = (shifted && !whole_grid) ? p.window / 2 : 0;
    p.padded_h = (grid_h + p.window - 1) / p.window * p.window;
    p.padded_w = (grid_w + p.window - 1) / p.window * p.window;
    Tensor<long> idx({1, p.padded_h, p.padded_w, 1}, -1);
    for (std::size_t i = 0; i < p.padded_h; ++i)
      for (std::size_t j = 0; j < p.padded_w; ++j) {
        // cyclic shift towards the top-left
        const std::size_t si = (i + p.shift) % p.padded_h, sj = (j + p.shift) % p.padded_w;
        if (si < grid_h && sj < grid_w) idx[i * p.padded_w + j] = static_cast<long>(si * grid_w + sj);
      }
    const auto wins = window_partition(idx, p.window);
    p.windows_per_image = wins.dim(0);
    p.source.assign(wins.values().begin(), wins.values().end());
    return p;
  }
};

template <typename T>
struct SwinTrace {
  std::vector<T> input, normed1, mid, normed2, hidden, activated;
  AttentionTrace<T> attn;
  WindowPlan plan;
};

/// Pre-norm transformer block with (shifted-)window attention and an MLP.
template <typename T>
class SwinBlock {
 public:
  SwinBlock() = default;
  SwinBlock(const std::string& name, std::size_t dim, std::size_t heads, std::size_t window, std::size_t mlp_ratio,
            bool shifted)
      : dim_(dim), window_(window), shifted_(shifted), norm1_(name + ".norm1", dim),
        attn_(name + ".attn", dim, heads, window), norm2_(name + ".norm2", dim),
        fc1_(name + ".mlp.fc1", dim, dim * mlp_ratio), fc2_(name + ".mlp.fc2", dim * mlp_ratio, dim) {}

  void init(Rng& rng) {
    attn_.init(rng);
    fc1_.init(rng);
    fc2_.init(rng);
  }

  bool shifted() const { return shifted_; }

  /// tokens: [B, L, D] over a grid_h x grid_w grid.
  Tensor<T> forward(const Tensor<T>& tokens, std::size_t grid_h, std::size_t grid_w,
                    SwinTrace<T>* trace = nullptr) const {
    const std::size_t B = tokens.dim(0), L = tokens.dim(1), D = dim_, rows = B * L;
    if (L != grid_h * grid_w || tokens.dim(2) != D) throw ShapeError("swin_block: token grid metadata mismatch");
    const auto plan = WindowPlan::make(grid_h, grid_w, window_, shifted_);
    const std::vector<T>& x = tokens.storage();
    std::vector<T> n1 = norm1_.forward(x, rows);
    const auto slots = plan.source.size();
    std::vector<T> win(B * slots * D, T{0});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < slots; ++s)
        if (const long src = plan.source[s]; src >= 0)
          std::copy_n(n1.begin() + (b * L + src) * D, D, win.begin() + (b * slots + s) * D);
    Tensor<T> mask;
    if (plan.shift > 0) mask = shifted_window_mask<T>(plan.padded_h, plan.padded_w, plan.window, plan.shift);
    std::vector<T> att = attn_.forward(win, B * plan.windows_per_image, plan.window, plan.shift ? &mask : nullptr,
                                       trace ? &trace->attn : nullptr);
    std::vector<T> mid = x;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < slots; ++s)
        if (const long src = plan.source[s]; src >= 0)
          for (std::size_t d = 0; d < D; ++d) mid[(b * L + src) * D + d] += att[(b * slots + s) * D + d];
    std::vector<T> n2 = norm2_.forward(mid, rows);
    std::vector<T> hidden = fc1_.forward(n2, rows);
    std::vector<T> act(hidden.size());
    for (std::size_t i = 0; i < hidden.size(); ++i) act[i] = gelu(hidden[i]);
    std::vector<T> mlp = fc2_.forward(act, rows);
    Tensor<T> out(tokens.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = mid[i] + mlp[i];
    if (trace) {
      trace->input = x;
      trace->normed1 = std::move(n1);
      trace->mid = std::move(mid);
      trace->normed2 = std::move(n2);
      trace->hidden = std::move(hidden);
      trace->activated = std::move(act);
      trace->plan = plan;
    }
    return out;
  }

  Tensor<T> backward(const SwinTrace<T>& tr, const Tensor<T>& grad) {
    const std::size_t B = grad.dim(0), L = grad.dim(1), D = dim_, rows = B * L;
    const auto& plan = tr.plan;
    const auto slots = plan.source.size();
    std::vector<T> gmid = grad.storage();
    std::vector<T> gact = fc2_.backward(tr.activated, grad.storage(), rows);
    for (std::size_t i = 0; i < gact.size(); ++i) gact[i] *= gelu_grad(tr.hidden[i]);
    std::vector<T> gn2 = fc1_.backward(tr.normed2, gact, rows);
    std::vector<T> g = norm2_.backward(tr.mid, gn2, rows);
    for (std::size_t i = 0; i < gmid.size(); ++i) gmid[i] += g[i];

    std::vector<T> gatt(B * slots * D, T{0});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < slots; ++s)
        if (const long src = plan.source[s]; src >= 0)
          std::copy_n(gmid.begin() + (b * L + src) * D, D, gatt.begin() + (b * slots + s) * D);
    std::vector<T> gwin = attn_.backward(tr.attn, gatt, plan.window);
    std::vector<T> gn1(rows * D, T{0});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < slots; ++s)
        if (const long src = plan.source[s]; src >= 0)
          for (std::size_t d = 0; d < D; ++d) gn1[(b * L + src) * D + d] += gwin[(b * slots + s) * D + d];
    std::vector<T> gx = norm1_.backward(tr.input, gn1, rows);
    Tensor<T> out(grad.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = gmid[i] + gx[i];
    return out;
  }

  void visit(const ParamVisitor<T>& fn) {
    norm1_.visit(fn);
    attn_.visit(fn);
    norm2_.visit(fn);
    fc1_.visit(fn);
    fc2_.visit(fn);
  }

 private:
  std::size_t dim_ = 0, window_ = 1;
  bool shifted_ = false;
  LayerNorm<T> norm1_;
  WindowAttention<T> attn_;
  LayerNorm<T> norm2_;
  Linear<T> fc1_, fc2_;
};

// ---------------------------------------------------------------------------

template <typename T>
struct ConvStackTrace {
  std::vector<Tensor<T>> inputs, pre_act;
};

/// Convolution + leaky rectification layers on the token grid, dimension
/// matched to the transformer blocks they replace in the ablated decoder.
template <typename T>
class TokenConvStack {
 public:
  TokenConvStack() = default;
  TokenConvStack(const std::string& name, std::size_t dim, std::size_t depth, T slope) : slope_(slope) {
    for (std::size_t i = 0; i < depth; ++i) convs_.emplace_back(name + std::to_string(i), dim, dim, 3, 1);
  }

  void init(Rng& rng) {
    for (auto& c : convs_) c.init(rng, slope_);
  }

  Tensor<T> forward(const Tensor<T>& tokens, std::size_t gh, std::size_t gw, ConvStackTrace<T>* trace = nullptr) const {
    Tensor<T> x = to_image(tokens, gh, gw);
    for (const auto& conv : convs_) {
      Tensor<T> z = conv.forward(x);
      Tensor<T> a = leaky_relu(z, slope_);
      if (trace) {
        trace->inputs.push_back(std::move(x));
        trace->pre_act.push_back(std::move(z));
      }
      x = std::move(a);
    }
    return to_tokens(x);
  }

  Tensor<T> backward(const ConvStackTrace<T>& tr, const Tensor<T>& grad, std::size_t gh, std::size_t gw) {
    Tensor<T> g = to_image(grad, gh, gw);
    for (std::size_t i = convs_.size(); i-- > 0;) {
      g = leaky_relu_backward(tr.pre_act[i], g, slope_);
      g = convs_[i].backward(tr.inputs[i], g);
    }
    return to_tokens(g);
  }

  void visit(const ParamVisitor<T>& fn) {
    for (auto& c : convs_) c.visit(fn);
  }

  std::size_t depth() const { return convs_.size(); }

 private:
  static Tensor<T> to_image(const Tensor<T>& tokens, std::size_t gh, std::size_t gw) {
    const std::size_t B = tokens.dim(0), L = tokens.dim(1), D = tokens.dim(2);
    Tensor<T> img({B, D, gh, gw});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t d = 0; d < D; ++d) img[(b * D + d) * L + l] = tokens[(b * L + l) * D + d];
    return img;
  }
  static Tensor<T> to_tokens(const Tensor<T>& img) {
    const std::size_t B = img.dim(0), D = img.dim(1), L = img.dim(2) * img.dim(3);
    Tensor<T> tokens({B, L, D});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t d = 0; d < D; ++d) tokens[(b * L + l) * D + d] = img[(b * D + d) * L + l];
    return tokens;
  }

  T slope_{0.2};
  std::vector<Conv2d<T>> convs_;
};

// ---------------------------------------------------------------------------

template <typename T>
struct DecoderTrace {
  Tensor<T> padded;
  std::vector<T> patches;
  std::vector<Tensor<T>> block_inputs;
  std::vector<SwinTrace<T>> blocks;
  ConvStackTrace<T> conv_stack;
  std::vector<T> final_tokens;
  Tensor<T> unembedded;  // [B, C, H, W] after crop
  Tensor<T> conv0_pre;
  Tensor<T> conv1_in;
  Tensor<T> output;
  std::size_t grid_h = 0, grid_w = 0;
};

/// Patch embedding, windowed transformer blocks, un-embedding, two 3x3
/// convolutions and a Tanh output head.
template <typename T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(const std::string& name, const NetworkConfig& cfg, bool use_transformer)
      : channels_(cfg.encoder_channels), dim_(cfg.embed_dim), patch_(cfg.patch_size), window_(cfg.window_size),
        slope_(static_cast<T>(cfg.negative_slope)), use_transformer_(use_transformer),
        embed_(name + ".patch_embed", channels_ * patch_ * patch_, dim_),
        unembed_(name + ".unembed", dim_, channels_ * patch_ * patch_),
        conv0_(name + ".conv_out0", channels_, channels_ / 2, 3, 1), conv1_(name + ".conv_out1", channels_ / 2, 1, 3, 1) {
    if (use_transformer) {
      for (int i = 0; i < cfg.decoder_depth; ++i)
        blocks_.emplace_back(name + ".stb" + std::to_string(i), dim_, cfg.num_heads, window_, cfg.mlp_ratio, i % 2 == 1);
    } else {
      conv_stack_ = TokenConvStack<T>(name + ".conv_stack", dim_, cfg.decoder_depth, slope_);
    }
  }

  void init(Rng& rng) {
    embed_.init(rng);
    for (auto& b : blocks_) b.init(rng);
    conv_stack_.init(rng);
    unembed_.init(rng);
    conv0_.init(rng, slope_);
    conv1_.init(rng, 1.0);
  }

  std::size_t transformer_blocks() const { return blocks_.size(); }
  std::size_t conv_stack_depth() const { return conv_stack_.depth(); }
  const std::vector<SwinBlock<T>>& blocks() const { return blocks_; }

  TokenGrid<T> patch_embed(const Tensor<T>& phi_f, DecoderTrace<T>* trace = nullptr) const {
    require_rank(phi_f, 4, "patch_embed");
    if (phi_f.dim(1) != channels_) throw ShapeError("patch_embed: channel mismatch " + to_string(phi_f.shape()));
    const std::size_t B = phi_f.dim(0), H = phi_f.dim(2), W = phi_f.dim(3), p = patch_;
    TokenGrid<T> g;
    g.feature_h = H;
    g.feature_w = W;
    g.padded_h = (H + p - 1) / p * p;
    g.padded_w = (W + p - 1) / p * p;
    g.grid_h = g.padded_h / p;
    g.grid_w = g.padded_w / p;
    Tensor<T> padded = pad_reflect(phi_f, g.padded_h, g.padded_w);
    const std::size_t L = g.grid_h * g.grid_w, K = channels_ * p * p;
    std::vector<T> patches(B * L * K);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t ty = 0; ty < g.grid_h; ++ty)
        for (std::size_t tx = 0; tx < g.grid_w; ++tx) {
          T* row = patches.data() + (b * L + ty * g.grid_w + tx) * K;
          for (std::size_t c = 0; c < channels_; ++c)
            for (std::size_t py = 0; py < p; ++py)
              for (std::size_t px = 0; px < p; ++px)
                row[(c * p + py) * p + px] = padded(b, c, ty * p + py, tx * p + px);
        }
    g.tokens = Tensor<T>({B, L, dim_}, embed_.forward(patches, B * L));
    if (trace) {
      trace->padded = std::move(padded);
      trace->patches = std::move(patches);
      trace->grid_h = g.grid_h;
      trace->grid_w = g.grid_w;
    }
    return g;
  }

  /// The transformer stage (or its convolutional replacement).
  TokenGrid<T> transform(TokenGrid<T> g, DecoderTrace<T>* trace = nullptr) const {
    if (use_transformer_) {
      if (trace) trace->blocks.resize(blocks_.size());
      for (std::size_t i = 0; i < blocks_.size(); ++i)
        g.tokens = blocks_[i].forward(g.tokens, g.grid_h, g.grid_w, trace ? &trace->blocks[i] : nullptr);
    } else {
      g.tokens = conv_stack_.forward(g.tokens, g.grid_h, g.grid_w, trace ? &trace->conv_stack : nullptr);
    }
    return g;
  }

  /// Tokens back to a [B,1,H,W] image in (-1,1).
  Tensor<T> reconstruct(const TokenGrid<T>& g, DecoderTrace<T>* trace = nullptr) const {
    const std::size_t p = patch_;
    if (g.tokens.rank() != 3 || g.tokens.dim(1) != g.grid_h * g.grid_w || g.tokens.dim(2) != dim_ ||
        g.grid_h * p != g.padded_h || g.grid_w * p != g.padded_w || g.feature_h > g.padded_h ||
        g.feature_w > g.padded_w || g.feature_h + p <= g.padded_h || g.feature_w + p <= g.padded_w)
      throw ShapeError("reconstruct: inconsistent token grid metadata");
    const std::size_t B = g.batch(), L = g.length(), K = channels_ * p * p;
    std::vector<T> rows = unembed_.forward(g.tokens.storage(), B * L);
    Tensor<T> img({B, channels_, g.feature_h, g.feature_w});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t ty = 0; ty < g.grid_h; ++ty)
        for (std::size_t tx = 0; tx < g.grid_w; ++tx) {
          const T* row = rows.data() + (b * L + ty * g.grid_w + tx) * K;
          for (std::size_t c = 0; c < channels_; ++c)
            for (std::size_t py = 0; py < p; ++py)
              for (std::size_t px = 0; px < p; ++px) {
                const std::size_t y = ty * p + py, x = tx * p + px;
                if (y < g.feature_h && x < g.feature_w) img(b, c, y, x) = row[(c * p + py) * p + px];
              }
        }
    Tensor<T> z0 = conv0_.forward(img);
    Tensor<T> a0 = leaky_relu(z0, slope_);
    Tensor<T> out = conv1_.forward(a0);
    const T edge = std::nextafter(T(1), T(0));  // tanh rounds to +-1 for large inputs
    for (auto& v : out.values()) v = std::clamp(std::tanh(v), -edge, edge);
    if (trace) {
      trace->final_tokens = g.tokens.storage();
      trace->unembedded = std::move(img);
      trace->conv0_pre = std::move(z0);
      trace->conv1_in = std::move(a0);
      trace->output = out;
    }
    return out;
  }

  Tensor<T> forward(const Tensor<T>& phi_f, DecoderTrace<T>* trace = nullptr) const {
    return reconstruct(transform(patch_embed(phi_f, trace), trace), trace);
  }

  /// Gradient with respect to the fused feature map.
  Tensor<T> backward(const DecoderTrace<T>& tr, const Tensor<T>& grad) {
    Tensor<T> g(grad.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = grad[i] * (T(1) - tr.output[i] * tr.output[i]);
    g = conv1_.backward(tr.conv1_in, g);
    g = leaky_relu_backward(tr.conv0_pre, g, slope_);
    g = conv0_.backward(tr.unembedded, g);

    const std::size_t p = patch_, B = g.dim(0), K = channels_ * p * p;
    const std::size_t gh = tr.grid_h, gw = tr.grid_w, L = gh * gw;
    const std::size_t H = g.dim(2), W = g.dim(3);
    std::vector<T> grows(B * L * K, T{0});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t ty = 0; ty < gh; ++ty)
        for (std::size_t tx = 0; tx < gw; ++tx) {
          T* row = grows.data() + (b * L + ty * gw + tx) * K;
          for (std::size_t c = 0; c < channels_; ++c)
            for (std::size_t py = 0; py < p; ++py)
              for (std::size_t px = 0; px < p; ++px) {
                const std::size_t y = ty * p + py, x = tx * p + px;
                if (y < H && x < W) row[(c * p + py) * p + px] = g(b, c, y, x);
              }
        }
    Tensor<T> gtok({B, L, dim_}, unembed_.backward(tr.final_tokens, grows, B * L));
    if (use_transformer_) {
      for (std::size_t i = blocks_.size(); i-- > 0;) gtok = blocks_[i].backward(tr.blocks[i], gtok);
    } else {
      gtok = conv_stack_.backward(tr.conv_stack, gtok, gh, gw);
    }
    std::vector<T> gpatch = embed_.backward(tr.patches, gtok.storage(), B * L);
    Tensor<T> gpad(tr.padded.shape());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t ty = 0; ty < gh; ++ty)
        for (std::size_t tx = 0; tx < gw; ++tx) {
          const T* row = gpatch.data() + (b * L + ty * gw + tx) * K;
          for (std::size_t c = 0; c < channels_; ++c)
            for (std::size_t py = 0; py < p; ++py)
              for (std::size_t px = 0; px < p; ++px) gpad(b, c, ty * p + py, tx * p + px) = row[(c * p + py) * p + px];
        }
    return pad_reflect_backward(gpad, H, W);
  }

  void visit(const ParamVisitor<T>& fn) {
    embed_.visit(fn);
    for (auto& b : blocks_) b.visit(fn);
    conv_stack_.visit(fn);
    unembed_.visit(fn);
    conv0_.visit(fn);
    conv1_.visit(fn);
  }

 private:
  std::size_t channels_ = 0, dim_ = 0, patch_ = 1, window_ = 1;
  T slope_{0.2};
  bool use_transformer_ = true;
  Linear<T> embed_;
  std::vector<SwinBlock<T>> blocks_;
  TokenConvStack<T> conv_stack_;
  Linear<T> unembed_;
  Conv2d<T> conv0_, conv1_;
};

}  // namespace hcfusion
