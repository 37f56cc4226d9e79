#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "reid/error.hpp"

namespace reid {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles. Image batches use NCHW order.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != numel(shape_))
      throw Error(ErrorKind::shape_mismatch, "value count does not match shape " + to_string(shape_));
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Contiguous view of sample n (all trailing axes).
  std::span<double> sample(std::size_t n) {
    const std::size_t stride = data_.size() / shape_.at(0);
    return {data_.data() + n * stride, stride};
  }
  std::span<const double> sample(std::size_t n) const {
    const std::size_t stride = data_.size() / shape_.at(0);
    return {data_.data() + n * stride, stride};
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  void reshape(Shape shape) {
    if (numel(shape) != data_.size())
      throw Error(ErrorKind::shape_mismatch,
                  "cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    shape_ = std::move(shape);
  }

  Tensor& operator+=(const Tensor& other) {
    if (other.shape_ != shape_)
      throw Error(ErrorKind::shape_mismatch, to_string(shape_) + " += " + to_string(other.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw Error(ErrorKind::shape_mismatch,
                std::string(what) + " expects rank " + std::to_string(rank) + ", got " + to_string(t.shape()));
}

}  // namespace reid
