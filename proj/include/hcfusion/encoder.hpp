#pragma once

#include <utility>
#include <vector>

#include "hcfusion/config.hpp"
#include "hcfusion/layers.hpp"

namespace hcfusion {

/// Activations kept by a training-mode forward pass for the backward pass.
template <typename T>
struct EncoderTrace {
  std::vector<Tensor<T>> inputs;      // input of each convolution
  std::vector<Tensor<T>> pre_act;     // convolution output before rectification
};

/// Context aggregation network: a stack of dilated 3x3 convolutions, each
/// followed by leaky rectification, at constant spatial resolution.
template <typename T>
class CanEncoder {
 public:
  CanEncoder() = default;
  CanEncoder(const std::string& name, const NetworkConfig& cfg) : slope_(static_cast<T>(cfg.negative_slope)) {
    std::size_t in = 1;
    for (std::size_t i = 0; i < cfg.encoder_dilations.size(); ++i) {
      const auto out = static_cast<std::size_t>(cfg.encoder_channels);
      convs_.emplace_back(name + ".conv" + std::to_string(i), in, out, cfg.kernel_size, cfg.encoder_dilations[i]);
      in = out;
    }
  }

  void init(Rng& rng) {
    for (auto& c : convs_) c.init(rng, slope_);
  }

  std::size_t out_channels() const { return convs_.back().out_channels(); }
  std::size_t depth() const { return convs_.size(); }

  /// Maps a [B,1,H,W] image batch in [-1,1] to a [B,C,H,W] feature map.
  Tensor<T> forward(const Tensor<T>& image, EncoderTrace<T>* trace = nullptr) const {
    require_rank(image, 4, "encode");
    if (image.dim(1) != 1) throw ShapeError("encode: expected single-channel input, got " + to_string(image.shape()));
    require_finite(image, "encode");
    if (trace) {
      trace->inputs.clear();
      trace->pre_act.clear();
    }
    Tensor<T> x = image;
    for (const auto& conv : convs_) {
      Tensor<T> z = conv.forward(x);
      Tensor<T> a = leaky_relu(z, slope_);
      if (trace) {
        trace->inputs.push_back(std::move(x));
        trace->pre_act.push_back(std::move(z));
      }
      x = std::move(a);
    }
    return x;
  }

  /// Returns the gradient with respect to the image.
  Tensor<T> backward(const EncoderTrace<T>& trace, Tensor<T> grad) {
    for (std::size_t i = convs_.size(); i-- > 0;) {
      grad = leaky_relu_backward(trace.pre_act[i], grad, slope_);
      grad = convs_[i].backward(trace.inputs[i], grad);
    }
    return grad;
  }

  void visit(const ParamVisitor<T>& fn) {
    for (auto& c : convs_) c.visit(fn);
  }

  std::vector<Conv2d<T>>& layers() { return convs_; }

 private:
  T slope_{0.2};
  std::vector<Conv2d<T>> convs_;
};

/// Runs the two modality branches. With a single encoder the branches share
/// weights; `second` selects separate weights for branch two.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> encode_pair(const CanEncoder<T>& first, const CanEncoder<T>* second,
                                            const Tensor<T>& image_1, const Tensor<T>& image_2) {
  if (image_1.shape() != image_2.shape())
    throw ShapeError("encode_pair: modality shape mismatch " + to_string(image_1.shape()) + " vs " +
                     to_string(image_2.shape()));
  const auto& enc2 = second ? *second : first;
  return {first.forward(image_1), enc2.forward(image_2)};
}

}  // namespace hcfusion
