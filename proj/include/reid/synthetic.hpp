#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <string>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "reid/datasets.hpp"

namespace reid {

/// Parameters of a generated Market-style dataset tree. Each identity is a
/// figure with its own upper/lower clothing colors; cameras change
/// brightness, and every image gets position jitter and pixel noise.
struct SyntheticSpec {
  int identities = 8;
  int first_person_id = 1;
  int train_per_id = 8;
  int query_per_id = 1;
  int gallery_per_id = 3;
  int cameras = 3;
  int distractors = 0;  // gallery images with person id -1
  int height = 64;
  int width = 32;
  double noise = 10.0;
  std::uint64_t seed = 0;
  std::string extension = "png";
};

namespace detail {

struct Appearance {
  std::array<double, 3> upper;
  std::array<double, 3> lower;
  int stripe_row;
};

inline Appearance appearance_for(int person_id, std::uint64_t seed) {
  std::mt19937_64 rng(seed * 1000003ULL + static_cast<std::uint64_t>(person_id + 7919));
  std::uniform_real_distribution<double> color(30.0, 225.0);
  std::uniform_int_distribution<int> stripe(0, 3);
  Appearance a{};
  for (double& c : a.upper) c = color(rng);
  for (double& c : a.lower) c = color(rng);
  a.stripe_row = stripe(rng);
  return a;
}

inline cv::Mat render_person(const Appearance& a, int camera, const SyntheticSpec& spec, std::mt19937_64& rng) {
  std::mt19937_64 cam_rng(spec.seed * 31ULL + static_cast<std::uint64_t>(camera));
  std::uniform_real_distribution<double> gain_dist(0.85, 1.15);
  std::uniform_real_distribution<double> bg_dist(60.0, 190.0);
  const double gain = gain_dist(cam_rng);
  const double bg = bg_dist(cam_rng);

  cv::Mat img(spec.height, spec.width, CV_8UC3);
  std::normal_distribution<double> noise(0.0, spec.noise);
  std::uniform_int_distribution<int> jitter(-2, 2);
  const int dy = jitter(rng), dx = jitter(rng);
  const int top = spec.height / 8 + dy, waist = spec.height / 2 + dy, bottom = spec.height * 7 / 8 + dy;
  const int left = spec.width / 5 + dx, right = spec.width * 4 / 5 + dx;
  const int stripe_h = std::max(1, spec.height / 16);
  const int stripe_y = top + (a.stripe_row + 1) * (waist - top) / 5;
  for (int y = 0; y < spec.height; ++y) {
    auto* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < spec.width; ++x) {
      std::array<double, 3> rgb{bg, bg, bg};
      if (x >= left && x < right) {
        if (y >= top && y < waist) {
          rgb = a.upper;
          if (y >= stripe_y && y < stripe_y + stripe_h)
            for (double& c : rgb) c = 255.0 - c;
        } else if (y >= waist && y < bottom) {
          rgb = a.lower;
        }
      }
      for (int c = 0; c < 3; ++c) {
        const double v = rgb[static_cast<std::size_t>(c)] * gain + noise(rng);
        row[x][2 - c] = cv::saturate_cast<uchar>(v);
      }
    }
  }
  return img;
}

}  // namespace detail

/// Writes bounding_box_train/, query/ and bounding_box_test/ under `root`.
inline void make_synthetic_dataset(const fs::path& root, const SyntheticSpec& spec) {
  if (spec.identities < 1 || spec.cameras < 2)
    throw Error(ErrorKind::invalid_config, "synthetic dataset needs >= 1 identity and >= 2 cameras");
  const fs::path train = root / "bounding_box_train", query = root / "query", gallery = root / "bounding_box_test";
  for (const fs::path& d : {train, query, gallery}) fs::create_directories(d);
  std::mt19937_64 rng(spec.seed);
  auto write = [&](const fs::path& dir, int pid, int camera, int frame, const detail::Appearance& a) {
    const cv::Mat img = detail::render_person(a, camera, spec, rng);
    const fs::path file = dir / format_filename({pid, camera}, Layout::market, 1, frame, 0, spec.extension);
    if (!cv::imwrite(file.string(), img)) throw Error(ErrorKind::io_error, "cannot write " + file.string());
  };
  for (int i = 0; i < spec.identities; ++i) {
    const int pid = spec.first_person_id + i;
    const detail::Appearance a = detail::appearance_for(pid, spec.seed);
    int frame = 0;
    for (int j = 0; j < spec.train_per_id; ++j) write(train, pid, 1 + j % spec.cameras, frame++, a);
    for (int j = 0; j < spec.query_per_id; ++j) write(query, pid, 1, frame++, a);
    for (int j = 0; j < spec.gallery_per_id; ++j) write(gallery, pid, 2 + j % (spec.cameras - 1), frame++, a);
    // One same-camera gallery view, which the protocol must ignore.
    write(gallery, pid, 1, frame++, a);
  }
  for (int j = 0; j < spec.distractors; ++j) {
    const detail::Appearance a = detail::appearance_for(-1000 - j, spec.seed);
    write(gallery, -1, 1 + j % spec.cameras, 900000 + j, a);
  }
}

}  // namespace reid
