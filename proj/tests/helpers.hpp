#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <unistd.h>

#include "reid/reid.hpp"

namespace testing_util {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("reid_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline reid::Tensor random_tensor(reid::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  reid::Tensor t(std::move(shape));
  for (double& v : t.values()) v = d(rng);
  return t;
}

/// Two disjoint synthetic tasks: ids 1..8 and 101..108.
inline reid::SyntheticSpec fixture_spec(int task, std::uint64_t seed = 0) {
  reid::SyntheticSpec s;
  s.first_person_id = task == 1 ? 1 : 101;
  s.seed = seed * 10 + static_cast<std::uint64_t>(task);
  return s;
}

/// Lazily created, process-wide fixture tree for one task.
inline const fs::path& fixture_root(int task) {
  static TempDir dir;
  static fs::path roots[3];
  if (roots[task].empty()) {
    roots[task] = dir / ("task" + std::to_string(task));
    reid::make_synthetic_dataset(roots[task], fixture_spec(task));
  }
  return roots[task];
}

inline reid::TaskData fixture_task(int task) {
  return reid::TaskData::load({"task" + std::to_string(task), 0, fixture_root(task),
                               static_cast<std::size_t>(task - 1), reid::Layout::market});
}

/// Tiny-backbone settings used by the trainer tests.
inline reid::TrainConfig toy_config(std::size_t epochs = 2, std::uint64_t seed = 0) {
  reid::TrainConfig c;
  c.epochs = epochs;
  c.seed = seed;
  c.optimizer.clr.base_lr = 0.02;
  c.optimizer.clr.max_lr = 0.12;
  return c;
}

inline std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Runs a shell command, returning its exit status.
inline int run(const std::string& cmd) {
  const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

inline std::string quote(const fs::path& p) { return reid::detail::shell_quote(p.string()); }

}  // namespace testing_util
