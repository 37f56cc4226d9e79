#pragma once

#include <array>
#include <cstddef>
#include <list>
#include <mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "reid/datasets.hpp"
#include "reid/tensor.hpp"

namespace reid {

struct InputSpec {
  std::size_t height = 256;
  std::size_t width = 128;
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> std{0.229, 0.224, 0.225};
};

/// Decodes images into normalized RGB planes, with a bounded LRU cache.
class ImageLoader {
 public:
  explicit ImageLoader(InputSpec spec, std::size_t cache_capacity = 4096)
      : spec_(spec), capacity_(cache_capacity) {}

  const InputSpec& spec() const { return spec_; }

  /// [N,3,H,W] batch in record order.
  Tensor load_batch(std::span<const ImageRecord> records) {
    const std::size_t plane = 3 * spec_.height * spec_.width;
    Tensor batch({records.size(), 3, spec_.height, spec_.width});
    for (std::size_t i = 0; i < records.size(); ++i) {
      const std::vector<double>& img = load(records[i].path);
      std::copy(img.begin(), img.end(), batch.data() + i * plane);
    }
    return batch;
  }

  const std::vector<double>& load(const fs::path& path) {
    std::lock_guard lock(mutex_);
    const std::string key = path.string();
    if (auto it = index_.find(key); it != index_.end()) {
      lru_.splice(lru_.begin(), lru_, it->second);
      return it->second->second;
    }
    lru_.emplace_front(key, decode(path));
    index_[key] = lru_.begin();
    if (capacity_ > 0 && lru_.size() > capacity_) {
      index_.erase(lru_.back().first);
      lru_.pop_back();
    }
    return lru_.front().second;
  }

 private:
  std::vector<double> decode(const fs::path& path) const {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw Error(ErrorKind::io_error, "cannot decode image " + path.string());
    if (static_cast<std::size_t>(bgr.rows) != spec_.height || static_cast<std::size_t>(bgr.cols) != spec_.width)
      cv::resize(bgr, bgr, cv::Size(static_cast<int>(spec_.width), static_cast<int>(spec_.height)), 0, 0,
                 cv::INTER_LINEAR);
    const std::size_t hw = spec_.height * spec_.width;
    std::vector<double> out(3 * hw);
    for (int y = 0; y < bgr.rows; ++y) {
      const auto* row = bgr.ptr<cv::Vec3b>(y);
      for (int x = 0; x < bgr.cols; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * spec_.width + static_cast<std::size_t>(x);
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = row[x][static_cast<int>(2 - c)] / 255.0;  // BGR -> RGB
          out[c * hw + i] = (v - spec_.mean[c]) / spec_.std[c];
        }
      }
    }
    return out;
  }

  using Entry = std::pair<std::string, std::vector<double>>;

  InputSpec spec_;
  std::size_t capacity_;
  std::mutex mutex_;
  std::list<Entry> lru_;
  std::unordered_map<std::string, std::list<Entry>::iterator> index_;
};

}  // namespace reid
