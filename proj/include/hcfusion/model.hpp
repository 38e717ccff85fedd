#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hcfusion/bfm.hpp"
#include "hcfusion/config.hpp"
#include "hcfusion/decoder.hpp"
#include "hcfusion/encoder.hpp"
#include "hcfusion/nca.hpp"

namespace hcfusion {

/// Counts of the structural blocks present in a built model.
struct ModuleSummary {
  std::size_t encoders = 0;
  std::size_t nca_blocks = 0;
  std::size_t bfm_blocks = 0;
  std::size_t transformer_blocks = 0;
  std::size_t conv_stack_layers = 0;
};

template <typename T>
struct ForwardTrace {
  bool deduplicated = false;  // both branches took the same input through one shared encoder
  EncoderTrace<T> enc1, enc2;
  Tensor<T> phi1, phi2;
  NcaTrace<T> nca1, nca2;
  Tensor<T> att1, att2;
  DecoderTrace<T> decoder;
};

/// The complete two-branch fusion network.
template <typename T>
class FusionModel {
 public:
  FusionModel(const NetworkConfig& cfg, const AblationFlags& flags) : cfg_(cfg), flags_(flags) {
    cfg.validate();
    encoder1_ = CanEncoder<T>(cfg.shared_encoder ? "encoder" : "encoder1", cfg);
    if (!cfg.shared_encoder) encoder2_ = CanEncoder<T>("encoder2", cfg);
    if (!flags.disable_nca) {
      nca1_ = NcaBlock<T>(cfg.nca_shared_alpha ? "nca" : "nca1");
      if (!cfg.nca_shared_alpha) nca2_ = NcaBlock<T>("nca2");
    }
    decoder_ = Decoder<T>("decoder", cfg, !flags.disable_stb);
  }

  void init(Rng& rng) {
    encoder1_.init(rng);
    if (encoder2_) encoder2_->init(rng);
    decoder_.init(rng);
  }

  const NetworkConfig& config() const { return cfg_; }
  const AblationFlags& ablation() const { return flags_; }

  ModuleSummary summary() const {
    ModuleSummary s;
    s.encoders = encoder2_ ? 2 : 1;
    s.nca_blocks = flags_.disable_nca ? 0 : 2;
    s.bfm_blocks = flags_.disable_bfm ? 0 : 1;
    s.transformer_blocks = decoder_.transformer_blocks();
    s.conv_stack_layers = decoder_.conv_stack_depth();
    return s;
  }

  void visit(const ParamVisitor<T>& fn) {
    encoder1_.visit(fn);
    if (encoder2_) encoder2_->visit(fn);
    if (nca1_) nca1_->visit(fn);
    if (nca2_) nca2_->visit(fn);
    decoder_.visit(fn);
  }

  std::vector<Param<T>*> parameters() {
    std::vector<Param<T>*> out;
    visit([&](Param<T>& p) { out.push_back(&p); });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](Param<T>& p) { n += p.value.numel(); });
    return n;
  }

  void zero_grad() {
    visit([](Param<T>& p) { p.zero_grad(); });
  }

  const CanEncoder<T>& encoder() const { return encoder1_; }
  const Decoder<T>& decoder() const { return decoder_; }
  NcaBlock<T>* nca(int branch) {
    if (branch == 1) return nca1_ ? &*nca1_ : nullptr;
    return nca2_ ? &*nca2_ : (nca1_ ? &*nca1_ : nullptr);
  }

  /// Encoded features of both branches.
  std::pair<Tensor<T>, Tensor<T>> encode_pair(const Tensor<T>& a, const Tensor<T>& b) const {
    return hcfusion::encode_pair(encoder1_, encoder2_ ? &*encoder2_ : nullptr, a, b);
  }

  /// Branch features after cross-modal attention (identity when ablated).
  std::pair<Tensor<T>, Tensor<T>> attend_pair(const Tensor<T>& phi1, const Tensor<T>& phi2) const {
    if (flags_.disable_nca) return {phi1, phi2};
    return nca_pair(phi1, phi2, *nca1_, nca2_ ? *nca2_ : *nca1_);
  }

  Tensor<T> fuse_features(const Tensor<T>& c1, const Tensor<T>& c2) const {
    return flags_.disable_bfm ? average_branches(c1, c2) : fuse_branches(c1, c2);
  }

  /// Fuses two aligned [B,1,H,W] batches in [-1,1] into one batch in (-1,1).
  Tensor<T> forward(const Tensor<T>& a, const Tensor<T>& b, ForwardTrace<T>* trace = nullptr) const {
    if (a.shape() != b.shape())
      throw ShapeError("fuse: modality shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    if (!trace) {
      auto [phi1, phi2] = encode_pair(a, b);
      auto [c1, c2] = attend_pair(phi1, phi2);
      return decoder_.forward(fuse_features(c1, c2));
    }
    auto& tr = *trace;
    tr.deduplicated = !encoder2_ && a == b;
    tr.phi1 = encoder1_.forward(a, &tr.enc1);
    if (tr.deduplicated)
      tr.phi2 = tr.phi1;
    else
      tr.phi2 = (encoder2_ ? *encoder2_ : encoder1_).forward(b, &tr.enc2);
    if (flags_.disable_nca) {
      tr.att1 = tr.phi1;
      tr.att2 = tr.phi2;
    } else {
      tr.att1 = nca1_->forward(tr.phi1, tr.phi2, &tr.nca1);
      tr.att2 = (nca2_ ? *nca2_ : *nca1_).forward(tr.phi2, tr.phi1, &tr.nca2);
    }
    return decoder_.forward(fuse_features(tr.att1, tr.att2), &tr.decoder);
  }

  /// Accumulates parameter gradients for dL/d(output) = grad. Returns the
  /// gradients with respect to both inputs.
  std::pair<Tensor<T>, Tensor<T>> backward(const ForwardTrace<T>& tr, const Tensor<T>& grad) {
    Tensor<T> gf = decoder_.backward(tr.decoder, grad);
    Tensor<T> g1, g2;
    if (flags_.disable_bfm) {
      g1 = Tensor<T>(gf.shape());
      for (std::size_t i = 0; i < gf.numel(); ++i) g1[i] = gf[i] * T(0.5);
      g2 = g1;
    } else {
      std::tie(g1, g2) = fuse_branches_backward(tr.att1, tr.att2, gf);
    }
    if (!flags_.disable_nca) {
      auto [gp1, gv2] = nca1_->backward(tr.nca1, g1);
      auto [gp2, gv1] = (nca2_ ? *nca2_ : *nca1_).backward(tr.nca2, g2);
      gp1 += gv1;
      gp2 += gv2;
      g1 = std::move(gp1);
      g2 = std::move(gp2);
    }
    if (tr.deduplicated) {
      g1 += g2;
      Tensor<T> gin = encoder1_.backward(tr.enc1, std::move(g1));
      return {gin, gin};
    }
    Tensor<T> ga = encoder1_.backward(tr.enc1, std::move(g1));
    Tensor<T> gb = (encoder2_ ? *encoder2_ : encoder1_).backward(tr.enc2, std::move(g2));
    return {std::move(ga), std::move(gb)};
  }

  /// Named parameter arrays, in registration order.
  std::map<std::string, Tensor<T>> state() {
    std::map<std::string, Tensor<T>> out;
    visit([&](Param<T>& p) { out.emplace(p.name, p.value); });
    return out;
  }

  void load_state(const std::map<std::string, Tensor<T>>& state) {
    std::size_t used = 0;
    visit([&](Param<T>& p) {
      auto it = state.find(p.name);
      if (it == state.end()) throw DataError("checkpoint is missing parameter '" + p.name + "'");
      if (it->second.shape() != p.value.shape())
        throw DataError("checkpoint parameter '" + p.name + "' has shape " + to_string(it->second.shape()) +
                        ", model expects " + to_string(p.value.shape()));
      p.value = it->second;
      ++used;
    });
    if (used != state.size()) throw DataError("checkpoint contains parameters unknown to this model");
  }

 private:
  NetworkConfig cfg_;
  AblationFlags flags_;
  CanEncoder<T> encoder1_;
  std::optional<CanEncoder<T>> encoder2_;
  std::optional<NcaBlock<T>> nca1_, nca2_;
  Decoder<T> decoder_;
};

/// Builds (and initialises from `rng`) the full model or an ablated variant.
template <typename T>
FusionModel<T> build_model(const NetworkConfig& cfg, const AblationFlags& flags, Rng& rng) {
  FusionModel<T> m(cfg, flags);
  m.init(rng);
  return m;
}

/// True for parameters belonging to the windowed transformer blocks.
inline bool is_transformer_param(const std::string& name) { return name.find(".stb") != std::string::npos; }

/// True for parameters of the cross-modal channel attention blocks.
inline bool is_nca_param(const std::string& name) { return name.rfind("nca", 0) == 0; }

}  // namespace hcfusion
