#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "reid/tensor.hpp"

namespace reid {

enum class Mode { train, eval };

/// Called once per named tensor. `grad` is null for buffers (running statistics).
using StateVisitor = std::function<void(const std::string& name, Tensor& value, Tensor* grad)>;

/// A learnable tensor as seen by optimizers.
struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
  double lr_scale = 1.0;
};

class Layer {
 public:
  virtual ~Layer() = default;

  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  /// Gradient w.r.t. the input of the last forward. Parameter gradients are
  /// accumulated only when `accumulate` is set.
  virtual Tensor backward(const Tensor& grad_out, bool accumulate) = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual void visit(const std::string& /*prefix*/, const StateVisitor& /*fn*/) {}
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

namespace detail {

inline std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

inline void check_channels(const Tensor& x, std::size_t channels, const char* layer) {
  require_rank(x, 4, layer);
  if (x.dim(1) != channels)
    throw Error(ErrorKind::shape_mismatch, std::string(layer) + " expects " + std::to_string(channels) +
                                               " channels, got " + to_string(x.shape()));
}

}  // namespace detail

class Conv2d : public Layer {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
         std::size_t padding, std::mt19937_64& rng, bool bias = false)
      : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(padding), has_bias_(bias),
        weight_({out_channels, in_channels, kernel, kernel}), weight_grad_(weight_.shape()) {
    // Kaiming normal, fan-out mode.
    const double std_dev = std::sqrt(2.0 / static_cast<double>(out_channels * kernel * kernel));
    std::normal_distribution<double> dist(0.0, std_dev);
    for (double& w : weight_.values()) w = dist(rng);
    if (has_bias_) {
      bias_ = Tensor({out_channels});
      bias_grad_ = Tensor({out_channels});
    }
  }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 4 || in[1] != in_)
      throw Error(ErrorKind::shape_mismatch, "conv expects [B," + std::to_string(in_) + ",H,W], got " + to_string(in));
    return {in[0], out_, out_extent(in[2]), out_extent(in[3])};
  }

  Tensor forward(const Tensor& x, Mode) override {
    detail::check_channels(x, in_, "conv");
    input_ = x;
    const Shape os = output_shape(x.shape());
    Tensor y(os);
    const std::size_t spatial = os[2] * os[3];
    ConstRowMap w(weight_.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_ * k_ * k_));
    RowMatrix col;
    for (std::size_t n = 0; n < x.dim(0); ++n) {
      RowMap out(y.sample(n).data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(spatial));
      if (pointwise()) {
        ConstRowMap in(x.sample(n).data(), static_cast<Eigen::Index>(in_), static_cast<Eigen::Index>(spatial));
        out.noalias() = w * in;
      } else {
        im2col(x, n, os[2], os[3], col);
        out.noalias() = w * col;
      }
      if (has_bias_)
        for (std::size_t c = 0; c < out_; ++c) out.row(static_cast<Eigen::Index>(c)).array() += bias_[c];
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out, bool accumulate) override {
    const Tensor& x = input_;
    Tensor grad_in(x.shape());
    const std::size_t ho = grad_out.dim(2), wo = grad_out.dim(3), spatial = ho * wo;
    const auto rows = static_cast<Eigen::Index>(in_ * k_ * k_);
    ConstRowMap w(weight_.data(), static_cast<Eigen::Index>(out_), rows);
    RowMap dw(weight_grad_.data(), static_cast<Eigen::Index>(out_), rows);
    RowMatrix col, dcol;
    for (std::size_t n = 0; n < x.dim(0); ++n) {
      ConstRowMap g(grad_out.sample(n).data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(spatial));
      if (pointwise()) {
        ConstRowMap in(x.sample(n).data(), static_cast<Eigen::Index>(in_), static_cast<Eigen::Index>(spatial));
        if (accumulate) dw.noalias() += g * in.transpose();
        RowMap gi(grad_in.sample(n).data(), static_cast<Eigen::Index>(in_), static_cast<Eigen::Index>(spatial));
        gi.noalias() = w.transpose() * g;
      } else {
        if (accumulate) {
          im2col(x, n, ho, wo, col);
          dw.noalias() += g * col.transpose();
        }
        dcol.noalias() = w.transpose() * g;
        col2im(dcol, grad_in, n, ho, wo);
      }
      if (accumulate && has_bias_)
        for (std::size_t c = 0; c < out_; ++c) bias_grad_[c] += g.row(static_cast<Eigen::Index>(c)).sum();
    }
    return grad_in;
  }

  void visit(const std::string& prefix, const StateVisitor& fn) override {
    fn(detail::join(prefix, "weight"), weight_, &weight_grad_);
    if (has_bias_) fn(detail::join(prefix, "bias"), bias_, &bias_grad_);
  }

  Tensor& weight() { return weight_; }

 private:
  bool pointwise() const { return k_ == 1 && stride_ == 1 && pad_ == 0; }

  std::size_t out_extent(std::size_t in) const {
    if (in + 2 * pad_ < k_) throw Error(ErrorKind::shape_mismatch, "conv input smaller than kernel");
    return (in + 2 * pad_ - k_) / stride_ + 1;
  }

  void im2col(const Tensor& x, std::size_t n, std::size_t ho, std::size_t wo, RowMatrix& col) const {
    const std::size_t h = x.dim(2), w = x.dim(3);
    col.resize(static_cast<Eigen::Index>(in_ * k_ * k_), static_cast<Eigen::Index>(ho * wo));
    const double* src = x.sample(n).data();
    double* dst = col.data();
    for (std::size_t c = 0; c < in_; ++c)
      for (std::size_t ki = 0; ki < k_; ++ki)
        for (std::size_t kj = 0; kj < k_; ++kj)
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride_ + ki) - static_cast<std::ptrdiff_t>(pad_);
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride_ + kj) - static_cast<std::ptrdiff_t>(pad_);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                  ix < static_cast<std::ptrdiff_t>(w);
              *dst++ = inside ? src[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] : 0.0;
            }
          }
  }

  void col2im(const RowMatrix& col, Tensor& grad_in, std::size_t n, std::size_t ho, std::size_t wo) const {
    const std::size_t h = grad_in.dim(2), w = grad_in.dim(3);
    double* dst = grad_in.sample(n).data();
    const double* src = col.data();
    for (std::size_t c = 0; c < in_; ++c)
      for (std::size_t ki = 0; ki < k_; ++ki)
        for (std::size_t kj = 0; kj < k_; ++kj)
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride_ + ki) - static_cast<std::ptrdiff_t>(pad_);
            for (std::size_t ox = 0; ox < wo; ++ox, ++src) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride_ + kj) - static_cast<std::ptrdiff_t>(pad_);
              if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix < static_cast<std::ptrdiff_t>(w))
                dst[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += *src;
            }
          }
  }

  std::size_t in_, out_, k_, stride_, pad_;
  bool has_bias_;
  Tensor weight_, weight_grad_, bias_, bias_grad_;
  Tensor input_;
};

class BatchNorm2d : public Layer {
 public:
  explicit BatchNorm2d(std::size_t channels, double eps = 1e-5, double momentum = 0.1)
      : channels_(channels), eps_(eps), momentum_(momentum), gamma_({channels}, 1.0), beta_({channels}),
        gamma_grad_({channels}), beta_grad_({channels}), running_mean_({channels}), running_var_({channels}, 1.0) {}

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 4 || in[1] != channels_)
      throw Error(ErrorKind::shape_mismatch, "batchnorm expects " + std::to_string(channels_) + " channels");
    return in;
  }

  Tensor forward(const Tensor& x, Mode mode) override {
    detail::check_channels(x, channels_, "batchnorm");
    const std::size_t batch = x.dim(0), spatial = x.dim(2) * x.dim(3);
    const std::size_t count = batch * spatial;
    mode_ = mode;
    normalized_ = Tensor(x.shape());
    inv_std_.assign(channels_, 0.0);
    Tensor y(x.shape());
    for (std::size_t c = 0; c < channels_; ++c) {
      double mean = running_mean_[c], var = running_var_[c];
      if (mode == Mode::train) {
        double sum = 0.0;
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t s = 0; s < spatial; ++s) sum += x.sample(n)[c * spatial + s];
        mean = sum / static_cast<double>(count);
        double sq = 0.0;
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t s = 0; s < spatial; ++s) {
            const double d = x.sample(n)[c * spatial + s] - mean;
            sq += d * d;
          }
        var = sq / static_cast<double>(count);
        const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
        running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * mean;
        running_var_[c] = (1.0 - momentum_) * running_var_[c] + momentum_ * unbiased;
      }
      const double inv_std = 1.0 / std::sqrt(var + eps_);
      inv_std_[c] = inv_std;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t s = 0; s < spatial; ++s) {
          const std::size_t i = c * spatial + s;
          const double xhat = (x.sample(n)[i] - mean) * inv_std;
          normalized_.sample(n)[i] = xhat;
          y.sample(n)[i] = gamma_[c] * xhat + beta_[c];
        }
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out, bool accumulate) override {
    const std::size_t batch = grad_out.dim(0), spatial = grad_out.dim(2) * grad_out.dim(3);
    const auto count = static_cast<double>(batch * spatial);
    Tensor grad_in(grad_out.shape());
    for (std::size_t c = 0; c < channels_; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t s = 0; s < spatial; ++s) {
          const std::size_t i = c * spatial + s;
          sum_g += grad_out.sample(n)[i];
          sum_gx += grad_out.sample(n)[i] * normalized_.sample(n)[i];
        }
      if (accumulate) {
        gamma_grad_[c] += sum_gx;
        beta_grad_[c] += sum_g;
      }
      const double scale = gamma_[c] * inv_std_[c];
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t s = 0; s < spatial; ++s) {
          const std::size_t i = c * spatial + s;
          const double g = grad_out.sample(n)[i];
          grad_in.sample(n)[i] = mode_ == Mode::train
                                     ? scale * (g - sum_g / count - normalized_.sample(n)[i] * sum_gx / count)
                                     : scale * g;
        }
    }
    return grad_in;
  }

  void visit(const std::string& prefix, const StateVisitor& fn) override {
    fn(detail::join(prefix, "weight"), gamma_, &gamma_grad_);
    fn(detail::join(prefix, "bias"), beta_, &beta_grad_);
    fn(detail::join(prefix, "running_mean"), running_mean_, nullptr);
    fn(detail::join(prefix, "running_var"), running_var_, nullptr);
  }

  Tensor& gamma() { return gamma_; }
  Tensor& beta() { return beta_; }

 private:
  std::size_t channels_;
  double eps_, momentum_;
  Tensor gamma_, beta_, gamma_grad_, beta_grad_, running_mean_, running_var_;
  Mode mode_ = Mode::train;
  Tensor normalized_;
  std::vector<double> inv_std_;
};

/// Leaky rectifier; slope 0 gives a plain ReLU.
class LeakyRelu : public Layer {
 public:
  explicit LeakyRelu(double negative_slope = 0.0) : slope_(negative_slope) {}

  Shape output_shape(const Shape& in) const override { return in; }

  Tensor forward(const Tensor& x, Mode) override {
    input_ = x;
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : slope_ * x[i];
    return y;
  }

  Tensor backward(const Tensor& grad_out, bool) override {
    Tensor g(grad_out.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = input_[i] > 0.0 ? grad_out[i] : slope_ * grad_out[i];
    return g;
  }

 private:
  double slope_;
  Tensor input_;
};

class MaxPool2d : public Layer {
 public:
  MaxPool2d(std::size_t kernel, std::size_t stride, std::size_t padding = 0)
      : k_(kernel), stride_(stride), pad_(padding) {}

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 4) throw Error(ErrorKind::shape_mismatch, "maxpool expects rank 4");
    return {in[0], in[1], (in[2] + 2 * pad_ - k_) / stride_ + 1, (in[3] + 2 * pad_ - k_) / stride_ + 1};
  }

  Tensor forward(const Tensor& x, Mode) override {
    require_rank(x, 4, "maxpool");
    in_shape_ = x.shape();
    const Shape os = output_shape(x.shape());
    Tensor y(os);
    argmax_.assign(y.size(), 0);
    const std::size_t h = x.dim(2), w = x.dim(3);
    std::size_t o = 0;
    for (std::size_t n = 0; n < os[0]; ++n)
      for (std::size_t c = 0; c < os[1]; ++c) {
        const std::size_t base = (n * os[1] + c) * h * w;
        for (std::size_t oy = 0; oy < os[2]; ++oy)
          for (std::size_t ox = 0; ox < os[3]; ++ox, ++o) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t best_i = base;
            for (std::size_t ki = 0; ki < k_; ++ki)
              for (std::size_t kj = 0; kj < k_; ++kj) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * stride_ + ki) - static_cast<std::ptrdiff_t>(pad_);
                const auto ix = static_cast<std::ptrdiff_t>(ox * stride_ + kj) - static_cast<std::ptrdiff_t>(pad_);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix >= static_cast<std::ptrdiff_t>(w))
                  continue;
                const std::size_t i = base + static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
                if (x[i] > best) {
                  best = x[i];
                  best_i = i;
                }
              }
            y[o] = best;
            argmax_[o] = best_i;
          }
      }
    return y;
  }

  Tensor backward(const Tensor& grad_out, bool) override {
    Tensor g(in_shape_);
    for (std::size_t o = 0; o < grad_out.size(); ++o) g[argmax_[o]] += grad_out[o];
    return g;
  }

 private:
  std::size_t k_, stride_, pad_;
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

/// [B,C,H,W] -> [B,C] spatial mean.
class GlobalAvgPool : public Layer {
 public:
  Shape output_shape(const Shape& in) const override {
    if (in.size() != 4) throw Error(ErrorKind::shape_mismatch, "global pool expects rank 4");
    return {in[0], in[1]};
  }

  Tensor forward(const Tensor& x, Mode) override {
    require_rank(x, 4, "global pool");
    in_shape_ = x.shape();
    const std::size_t spatial = x.dim(2) * x.dim(3);
    Tensor y({x.dim(0), x.dim(1)});
    for (std::size_t i = 0; i < y.size(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < spatial; ++j) s += x[i * spatial + j];
      y[i] = s / static_cast<double>(spatial);
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out, bool) override {
    Tensor g(in_shape_);
    const std::size_t spatial = in_shape_[2] * in_shape_[3];
    for (std::size_t i = 0; i < grad_out.size(); ++i)
      for (std::size_t j = 0; j < spatial; ++j) g[i * spatial + j] = grad_out[i] / static_cast<double>(spatial);
    return g;
  }

 private:
  Shape in_shape_;
};

class Linear : public Layer {
 public:
  Linear(std::size_t in_features, std::size_t out_features, std::mt19937_64& rng, double init_std = 0.001)
      : in_(in_features), out_(out_features), weight_({out_features, in_features}), bias_({out_features}),
        weight_grad_(weight_.shape()), bias_grad_(bias_.shape()) {
    std::normal_distribution<double> dist(0.0, init_std);
    for (double& w : weight_.values()) w = dist(rng);
  }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 2 || in[1] != in_)
      throw Error(ErrorKind::shape_mismatch, "linear expects [B," + std::to_string(in_) + "]");
    return {in[0], out_};
  }

  Tensor forward(const Tensor& x, Mode) override {
    output_shape(x.shape());
    input_ = x;
    Tensor y({x.dim(0), out_});
    const auto b = static_cast<Eigen::Index>(x.dim(0));
    ConstRowMap in(x.data(), b, static_cast<Eigen::Index>(in_));
    ConstRowMap w(weight_.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_));
    RowMap out(y.data(), b, static_cast<Eigen::Index>(out_));
    out.noalias() = in * w.transpose();
    Eigen::Map<const Eigen::RowVectorXd> bias(bias_.data(), static_cast<Eigen::Index>(out_));
    out.rowwise() += bias;
    return y;
  }

  Tensor backward(const Tensor& grad_out, bool accumulate) override {
    const auto b = static_cast<Eigen::Index>(input_.dim(0));
    ConstRowMap g(grad_out.data(), b, static_cast<Eigen::Index>(out_));
    ConstRowMap in(input_.data(), b, static_cast<Eigen::Index>(in_));
    ConstRowMap w(weight_.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_));
    if (accumulate) {
      RowMap dw(weight_grad_.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_));
      dw.noalias() += g.transpose() * in;
      Eigen::Map<Eigen::RowVectorXd> db(bias_grad_.data(), static_cast<Eigen::Index>(out_));
      db += g.colwise().sum();
    }
    Tensor grad_in(input_.shape());
    RowMap gi(grad_in.data(), b, static_cast<Eigen::Index>(in_));
    gi.noalias() = g * w;
    return grad_in;
  }

  void visit(const std::string& prefix, const StateVisitor& fn) override {
    fn(detail::join(prefix, "weight"), weight_, &weight_grad_);
    fn(detail::join(prefix, "bias"), bias_, &bias_grad_);
  }

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  std::size_t in_, out_;
  Tensor weight_, bias_, weight_grad_, bias_grad_;
  Tensor input_;
};

class Sequential : public Layer {
 public:
  Sequential& add(std::string name, std::unique_ptr<Layer> layer) {
    layers_.emplace_back(std::move(name), std::move(layer));
    return *this;
  }

  Shape output_shape(const Shape& in) const override {
    Shape s = in;
    for (const auto& [name, layer] : layers_) s = layer->output_shape(s);
    return s;
  }

  Tensor forward(const Tensor& x, Mode mode) override {
    Tensor y = x;
    for (auto& [name, layer] : layers_) y = layer->forward(y, mode);
    return y;
  }

  Tensor backward(const Tensor& grad_out, bool accumulate) override {
    Tensor g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = it->second->backward(g, accumulate);
    return g;
  }

  void visit(const std::string& prefix, const StateVisitor& fn) override {
    for (auto& [name, layer] : layers_) layer->visit(detail::join(prefix, name), fn);
  }

  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<std::pair<std::string, std::unique_ptr<Layer>>> layers_;
};

}  // namespace reid
