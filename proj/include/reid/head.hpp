#pragma once

#include <cstddef>
#include <random>
#include <string>

#include "reid/layers.hpp"

namespace reid {

enum class HeadTap { block1, block2 };

struct HeadConfig {
  std::size_t in_channels = 2048;
  std::size_t num_classes = 2;
  double negative_slope = 0.01;
  HeadTap tap = HeadTap::block2;
};

struct HeadOutput {
  Tensor logits;  // [B,num_classes]
  Tensor tap1;    // block1 output [B,C/2,H,W]
  Tensor tap2;    // block2 output [B,C/2,H,W]
  Tensor pooled;  // spatial mean of tap2 [B,C/2]
};

/// Gradients arriving at a head's outputs. Empty tensors mean "no gradient".
struct HeadGrads {
  Tensor logits;
  Tensor tap1;
  Tensor tap2;
};

/// Task pipeline: two conv blocks (1x1 C->C/2, then 3x3 C/2->C/2, each with
/// batch norm and leaky rectifier), spatial average pool, linear classifier.
class Head {
 public:
  Head(const HeadConfig& config, std::mt19937_64& rng)
      : config_(validated(config)),
        conv1_(config.in_channels, config.in_channels / 2, 1, 1, 0, rng),
        bn1_(config.in_channels / 2),
        act1_(config.negative_slope),
        conv2_(config.in_channels / 2, config.in_channels / 2, 3, 1, 1, rng),
        bn2_(config.in_channels / 2),
        act2_(config.negative_slope),
        fc_(config.in_channels / 2, config.num_classes, rng) {}

  const HeadConfig& config() const { return config_; }
  std::size_t tap_channels() const { return config_.in_channels / 2; }

  HeadOutput forward(const Tensor& features, Mode mode) {
    detail::check_channels(features, config_.in_channels, "head");
    HeadOutput out;
    out.tap1 = act1_.forward(bn1_.forward(conv1_.forward(features, mode), mode), mode);
    out.tap2 = act2_.forward(bn2_.forward(conv2_.forward(out.tap1, mode), mode), mode);
    tap_shape_ = out.tap2.shape();
    out.pooled = pool_.forward(out.tap2, mode);
    out.logits = fc_.forward(out.pooled, mode);
    return out;
  }

  Tensor backward(const HeadGrads& grads, bool accumulate) {
    Tensor g2 = grads.tap2.empty() ? Tensor(tap_shape_) : grads.tap2;
    if (!grads.logits.empty()) g2 += pool_.backward(fc_.backward(grads.logits, accumulate), accumulate);
    Tensor g1 = conv2_.backward(bn2_.backward(act2_.backward(g2, accumulate), accumulate), accumulate);
    if (!grads.tap1.empty()) g1 += grads.tap1;
    return conv1_.backward(bn1_.backward(act1_.backward(g1, accumulate), accumulate), accumulate);
  }

  void visit(const std::string& prefix, const StateVisitor& fn) {
    conv1_.visit(detail::join(prefix, "block1.conv"), fn);
    bn1_.visit(detail::join(prefix, "block1.bn"), fn);
    conv2_.visit(detail::join(prefix, "block2.conv"), fn);
    bn2_.visit(detail::join(prefix, "block2.bn"), fn);
    fc_.visit(detail::join(prefix, "classifier"), fn);
  }

  BatchNorm2d& block1_norm() { return bn1_; }
  BatchNorm2d& block2_norm() { return bn2_; }
  Linear& classifier() { return fc_; }

 private:
  static const HeadConfig& validated(const HeadConfig& config) {
    if (config.in_channels == 0 || config.in_channels % 2 != 0)
      throw Error(ErrorKind::odd_channels, "head input channels must be even, got " + std::to_string(config.in_channels));
    if (config.num_classes < 2)
      throw Error(ErrorKind::invalid_config, "head needs at least 2 classes");
    return config;
  }

  HeadConfig config_;
  Conv2d conv1_;
  BatchNorm2d bn1_;
  LeakyRelu act1_;
  Conv2d conv2_;
  BatchNorm2d bn2_;
  LeakyRelu act2_;
  GlobalAvgPool pool_;
  Linear fc_;
  Shape tap_shape_;
};

}  // namespace reid
