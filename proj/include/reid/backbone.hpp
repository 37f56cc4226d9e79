#pragma once

#include <cstddef>
#include <memory>
#include <random>
#include <string>

#include "reid/layers.hpp"

namespace reid {

struct BackboneConfig {
  std::string architecture = "resnet50";  // "resnet50" or "tiny"
  bool pretrained = false;
  std::string weights;                    // checkpoint holding backbone.* tensors
  std::size_t tiny_channels = 16;         // output width of the tiny backbone
};

/// ResNet bottleneck: 1x1 reduce, 3x3 (strided), 1x1 expand, identity or projected shortcut.
class Bottleneck : public Layer {
 public:
  Bottleneck(std::size_t in_channels, std::size_t width, std::size_t stride, std::mt19937_64& rng)
      : conv1_(in_channels, width, 1, 1, 0, rng), bn1_(width), conv2_(width, width, 3, stride, 1, rng), bn2_(width),
        conv3_(width, width * 4, 1, 1, 0, rng), bn3_(width * 4) {
    if (stride != 1 || in_channels != width * 4) {
      downsample_ = std::make_unique<Sequential>();
      downsample_->add("0", std::make_unique<Conv2d>(in_channels, width * 4, 1, stride, 0, rng));
      downsample_->add("1", std::make_unique<BatchNorm2d>(width * 4));
    }
  }

  Shape output_shape(const Shape& in) const override {
    return conv3_.output_shape(conv2_.output_shape(conv1_.output_shape(in)));
  }

  Tensor forward(const Tensor& x, Mode mode) override {
    Tensor h = relu1_.forward(bn1_.forward(conv1_.forward(x, mode), mode), mode);
    h = relu2_.forward(bn2_.forward(conv2_.forward(h, mode), mode), mode);
    h = bn3_.forward(conv3_.forward(h, mode), mode);
    h += downsample_ ? downsample_->forward(x, mode) : x;
    return relu_out_.forward(h, mode);
  }

  Tensor backward(const Tensor& grad_out, bool accumulate) override {
    const Tensor g = relu_out_.backward(grad_out, accumulate);
    Tensor gm = bn3_.backward(g, accumulate);
    gm = conv3_.backward(gm, accumulate);
    gm = conv2_.backward(bn2_.backward(relu2_.backward(gm, accumulate), accumulate), accumulate);
    gm = conv1_.backward(bn1_.backward(relu1_.backward(gm, accumulate), accumulate), accumulate);
    gm += downsample_ ? downsample_->backward(g, accumulate) : g;
    return gm;
  }

  void visit(const std::string& prefix, const StateVisitor& fn) override {
    conv1_.visit(detail::join(prefix, "conv1"), fn);
    bn1_.visit(detail::join(prefix, "bn1"), fn);
    conv2_.visit(detail::join(prefix, "conv2"), fn);
    bn2_.visit(detail::join(prefix, "bn2"), fn);
    conv3_.visit(detail::join(prefix, "conv3"), fn);
    bn3_.visit(detail::join(prefix, "bn3"), fn);
    if (downsample_) downsample_->visit(detail::join(prefix, "downsample"), fn);
  }

 private:
  Conv2d conv1_;
  BatchNorm2d bn1_;
  LeakyRelu relu1_;
  Conv2d conv2_;
  BatchNorm2d bn2_;
  LeakyRelu relu2_;
  Conv2d conv3_;
  BatchNorm2d bn3_;
  std::unique_ptr<Sequential> downsample_;
  LeakyRelu relu_out_;
};

/// Classification network with its average pool and classifier removed:
/// maps [B,3,H,W] images to a [B,C,H/s,W/s] feature map.
class Backbone {
 public:
  Backbone(const BackboneConfig& config, std::mt19937_64& rng) : config_(config) {
    if (config.architecture == "resnet50") {
      build_resnet50(rng);
      channels_ = 2048;
    } else if (config.architecture == "tiny") {
      if (config.tiny_channels < 2) throw Error(ErrorKind::invalid_config, "tiny backbone needs >= 2 channels");
      build_tiny(rng);
      channels_ = config.tiny_channels;
    } else {
      throw Error(ErrorKind::unknown_kind, "unknown backbone architecture '" + config.architecture + "'");
    }
  }

  const BackboneConfig& config() const { return config_; }
  std::size_t output_channels() const { return channels_; }

  Shape output_shape(const Shape& images) const {
    if (images.size() != 4 || images[1] != 3)
      throw Error(ErrorKind::shape_mismatch, "backbone expects [B,3,H,W], got " + to_string(images));
    return net_.output_shape(images);
  }

  Tensor forward(const Tensor& images, Mode mode) {
    output_shape(images.shape());
    if (images.dim(0) == 0) throw Error(ErrorKind::shape_mismatch, "empty batch");
    return net_.forward(images, mode);
  }

  Tensor backward(const Tensor& grad, bool accumulate = true) { return net_.backward(grad, accumulate); }

  void visit(const std::string& prefix, const StateVisitor& fn) { net_.visit(prefix, fn); }

 private:
  void build_tiny(std::mt19937_64& rng) {
    const std::size_t c = config_.tiny_channels;
    net_.add("conv1", std::make_unique<Conv2d>(3, c / 2, 3, 2, 1, rng))
        .add("bn1", std::make_unique<BatchNorm2d>(c / 2))
        .add("relu1", std::make_unique<LeakyRelu>())
        .add("pool", std::make_unique<MaxPool2d>(2, 2))
        .add("conv2", std::make_unique<Conv2d>(c / 2, c, 3, 2, 1, rng))
        .add("bn2", std::make_unique<BatchNorm2d>(c))
        .add("relu2", std::make_unique<LeakyRelu>())
        .add("conv3", std::make_unique<Conv2d>(c, c, 3, 2, 1, rng))
        .add("bn3", std::make_unique<BatchNorm2d>(c))
        .add("relu3", std::make_unique<LeakyRelu>());
  }

  void build_resnet50(std::mt19937_64& rng) {
    net_.add("conv1", std::make_unique<Conv2d>(3, 64, 7, 2, 3, rng))
        .add("bn1", std::make_unique<BatchNorm2d>(64))
        .add("relu", std::make_unique<LeakyRelu>())
        .add("maxpool", std::make_unique<MaxPool2d>(3, 2, 1));
    std::size_t in = 64;
    const std::size_t widths[] = {64, 128, 256, 512};
    const std::size_t blocks[] = {3, 4, 6, 3};
    for (std::size_t stage = 0; stage < 4; ++stage) {
      auto layer = std::make_unique<Sequential>();
      for (std::size_t b = 0; b < blocks[stage]; ++b) {
        const std::size_t stride = (b == 0 && stage > 0) ? 2 : 1;
        layer->add(std::to_string(b), std::make_unique<Bottleneck>(in, widths[stage], stride, rng));
        in = widths[stage] * 4;
      }
      net_.add("layer" + std::to_string(stage + 1), std::move(layer));
    }
  }

  BackboneConfig config_;
  std::size_t channels_ = 0;
  Sequential net_;
};

}  // namespace reid
