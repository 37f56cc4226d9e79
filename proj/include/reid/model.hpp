#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "reid/backbone.hpp"
#include "reid/head.hpp"

namespace reid {

/// Shared backbone plus one pipeline head per task.
class MultiHeadModel {
 public:
  MultiHeadModel(const BackboneConfig& backbone, std::vector<HeadConfig> heads, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    backbone_ = std::make_unique<Backbone>(backbone, rng);
    for (HeadConfig& h : heads) {
      if (h.in_channels != backbone_->output_channels())
        throw Error(ErrorKind::shape_mismatch, "head in_channels " + std::to_string(h.in_channels) +
                                                   " != backbone channels " +
                                                   std::to_string(backbone_->output_channels()));
      heads_.push_back(std::make_unique<Head>(h, rng));
    }
    frozen_.assign(heads_.size(), false);
  }

  MultiHeadModel(const MultiHeadModel&) = delete;
  MultiHeadModel& operator=(const MultiHeadModel&) = delete;
  MultiHeadModel(MultiHeadModel&&) = default;
  MultiHeadModel& operator=(MultiHeadModel&&) = default;

  Backbone& backbone() { return *backbone_; }
  const Backbone& backbone() const { return *backbone_; }
  std::size_t num_heads() const { return heads_.size(); }
  Head& head(std::size_t index) { return *heads_.at(checked(index)); }

  /// Number of completed training phases.
  std::size_t phase() const { return phase_; }
  void set_phase(std::size_t phase) { phase_ = phase; }

  bool is_frozen(std::size_t index) const { return frozen_.at(checked(index)); }

  /// A frozen head is excluded from trainable_parameters, runs its batch
  /// norms in inference mode and never accumulates parameter gradients.
  void set_frozen(std::size_t index, bool frozen) { frozen_.at(checked(index)) = frozen; }

  Tensor forward_backbone(const Tensor& images, Mode mode) { return backbone_->forward(images, mode); }

  HeadOutput forward_head(std::size_t index, const Tensor& features, Mode mode) {
    Head& h = head(index);
    return h.forward(features, frozen_[index] ? Mode::eval : mode);
  }

  Tensor backward_head(std::size_t index, const HeadGrads& grads) {
    Head& h = head(index);
    return h.backward(grads, !frozen_[index]);
  }

  /// Phase k (1-based) trains the backbone and head k-1.
  std::vector<ParamRef> trainable_parameters(std::size_t phase, bool include_backbone = true) {
    if (phase < 1 || phase > heads_.size())
      throw Error(ErrorKind::plan_mismatch, "phase " + std::to_string(phase) + " outside 1.." +
                                                std::to_string(heads_.size()));
    std::vector<ParamRef> params;
    auto collect = [&params](const std::string& name, Tensor& value, Tensor* grad) {
      if (grad) params.push_back({name, &value, grad, 1.0});
    };
    if (include_backbone) backbone_->visit("backbone", collect);
    const std::size_t active = phase - 1;
    if (!frozen_[active]) heads_[active]->visit(head_prefix(active), collect);
    return params;
  }

  void zero_grad() {
    visit([](const std::string&, Tensor&, Tensor* grad) {
      if (grad) grad->fill(0.0);
    });
  }

  /// Every parameter and buffer, named "backbone.*" and "heads.<i>.*".
  void visit(const StateVisitor& fn) {
    backbone_->visit("backbone", fn);
    for (std::size_t i = 0; i < heads_.size(); ++i) heads_[i]->visit(head_prefix(i), fn);
  }

  void visit_head(std::size_t index, const StateVisitor& fn) { head(index).visit(head_prefix(index), fn); }

  static std::string head_prefix(std::size_t index) { return "heads." + std::to_string(index); }

 private:
  std::size_t checked(std::size_t index) const {
    if (index >= heads_.size())
      throw Error(ErrorKind::unknown_head, "head " + std::to_string(index) + " of a " +
                                               std::to_string(heads_.size()) + "-head model");
    return index;
  }

  std::unique_ptr<Backbone> backbone_;
  std::vector<std::unique_ptr<Head>> heads_;
  std::vector<bool> frozen_;
  std::size_t phase_ = 0;
};

}  // namespace reid
