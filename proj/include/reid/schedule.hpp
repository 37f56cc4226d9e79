#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "reid/layers.hpp"

namespace reid {

struct ClrConfig {
  double base_lr = 1e-3;
  double max_lr = 6e-3;
  std::uint64_t step_size = 1;  // iterations per half-cycle

  void validate() const {
    if (!(base_lr > 0.0)) throw Error(ErrorKind::invalid_config, "base_lr must be > 0");
    if (!(max_lr > base_lr)) throw Error(ErrorKind::invalid_config, "max_lr must exceed base_lr");
    if (step_size < 1) throw Error(ErrorKind::invalid_config, "step_size must be >= 1");
  }
};

/// Triangular cyclical learning rate.
///
/// Equivalent to cycle = floor(1 + it/(2s)), x = |it/s - 2 cycle + 1|,
/// lr = base + (max - base) max(0, 1 - x), but evaluated on integers so the
/// period, symmetry and the two endpoints are exact.
inline double clr_lr(std::uint64_t it, const ClrConfig& cfg) {
  const std::uint64_t s = cfg.step_size;
  const std::uint64_t r = it % (2 * s);
  const std::uint64_t from_peak = r > s ? r - s : s - r;
  const double t = static_cast<double>(s - from_peak) / static_cast<double>(s);
  return std::lerp(cfg.base_lr, cfg.max_lr, t);
}

enum class OptimizerKind { sgd_clr, adam };

inline OptimizerKind parse_optimizer_kind(std::string_view name) {
  if (name == "sgd_clr") return OptimizerKind::sgd_clr;
  if (name == "adam") return OptimizerKind::adam;
  throw Error(ErrorKind::unknown_kind, "unknown optimizer '" + std::string(name) + "'");
}

inline const char* to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd_clr ? "sgd_clr" : "adam"; }

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_clr;
  ClrConfig clr;
  double momentum = 0.9;
  double adam_lr = 3e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double adam_weight_decay = 5e-4;
};

class Optimizer {
 public:
  explicit Optimizer(std::vector<ParamRef> params) : params_(std::move(params)) {
    if (params_.empty()) throw Error(ErrorKind::invalid_config, "optimizer needs at least one parameter");
  }
  virtual ~Optimizer() = default;

  virtual OptimizerKind kind() const = 0;
  /// Learning rate the next step() will use.
  virtual double lr_at(std::uint64_t iteration) const = 0;
  double current_lr() const { return lr_at(iterations_); }

  /// Applies one update from the accumulated gradients; returns the LR used.
  double step() {
    const double lr = current_lr();
    apply(lr);
    ++iterations_;
    return lr;
  }

  std::uint64_t iterations() const { return iterations_; }
  const std::vector<ParamRef>& params() const { return params_; }

  /// Named state tensors (moments), for checkpointing.
  virtual std::vector<std::pair<std::string, Tensor*>> state() = 0;
  void restore(std::uint64_t iterations) { iterations_ = iterations; }

 protected:
  virtual void apply(double lr) = 0;

  std::vector<ParamRef> params_;
  std::uint64_t iterations_ = 0;
};

/// SGD with momentum, LR from the triangular cycle.
class SgdClr : public Optimizer {
 public:
  SgdClr(std::vector<ParamRef> params, const OptimizerConfig& cfg) : Optimizer(std::move(params)), cfg_(cfg) {
    cfg_.clr.validate();
    for (const ParamRef& p : params_) velocity_.emplace_back(p.value->shape());
  }

  OptimizerKind kind() const override { return OptimizerKind::sgd_clr; }
  double lr_at(std::uint64_t iteration) const override { return clr_lr(iteration, cfg_.clr); }

  std::vector<std::pair<std::string, Tensor*>> state() override {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < params_.size(); ++i) out.emplace_back(params_[i].name + ".velocity", &velocity_[i]);
    return out;
  }

 protected:
  void apply(double lr) override {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& w = *params_[i].value;
      const Tensor& g = *params_[i].grad;
      Tensor& v = velocity_[i];
      const double step = lr * params_[i].lr_scale;
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = cfg_.momentum * v[j] + g[j];
        w[j] -= step * v[j];
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> velocity_;
};

/// Adam at a fixed LR with L2 weight decay folded into the gradient.
class Adam : public Optimizer {
 public:
  Adam(std::vector<ParamRef> params, const OptimizerConfig& cfg) : Optimizer(std::move(params)), cfg_(cfg) {
    if (!(cfg_.adam_lr > 0.0)) throw Error(ErrorKind::invalid_config, "adam lr must be > 0");
    for (const ParamRef& p : params_) {
      m_.emplace_back(p.value->shape());
      v_.emplace_back(p.value->shape());
    }
  }

  OptimizerKind kind() const override { return OptimizerKind::adam; }
  double lr_at(std::uint64_t) const override { return cfg_.adam_lr; }

  std::vector<std::pair<std::string, Tensor*>> state() override {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.emplace_back(params_[i].name + ".m", &m_[i]);
      out.emplace_back(params_[i].name + ".v", &v_[i]);
    }
    return out;
  }

 protected:
  void apply(double lr) override {
    const double t = static_cast<double>(iterations_ + 1);
    const double c1 = 1.0 - std::pow(cfg_.adam_beta1, t);
    const double c2 = 1.0 - std::pow(cfg_.adam_beta2, t);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& w = *params_[i].value;
      const Tensor& g = *params_[i].grad;
      const double step = lr * params_[i].lr_scale;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j] + cfg_.adam_weight_decay * w[j];
        m_[i][j] = cfg_.adam_beta1 * m_[i][j] + (1.0 - cfg_.adam_beta1) * gj;
        v_[i][j] = cfg_.adam_beta2 * v_[i][j] + (1.0 - cfg_.adam_beta2) * gj * gj;
        w[j] -= step * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + cfg_.adam_eps);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> m_, v_;
};

inline std::unique_ptr<Optimizer> make_optimizer(std::vector<ParamRef> params, const OptimizerConfig& cfg) {
  switch (cfg.kind) {
    case OptimizerKind::sgd_clr: return std::make_unique<SgdClr>(std::move(params), cfg);
    case OptimizerKind::adam: return std::make_unique<Adam>(std::move(params), cfg);
  }
  throw Error(ErrorKind::unknown_kind, "unknown optimizer kind");
}

}  // namespace reid
