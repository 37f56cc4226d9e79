#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "reid/error.hpp"

namespace reid {

namespace fs = std::filesystem;

enum class Split { train, query, gallery };
enum class Layout { market, duke };

inline const char* to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "?";
}

inline const char* to_string(Layout layout) { return layout == Layout::market ? "market" : "duke"; }

inline Layout parse_layout(std::string_view name) {
  if (name == "market") return Layout::market;
  if (name == "duke") return Layout::duke;
  throw Error(ErrorKind::unknown_kind, "unknown dataset layout '" + std::string(name) + "'");
}

struct ImageRecord {
  fs::path path;
  int person_id = 0;  // -1 distractor, 0 junk
  int camera_id = 1;
  Split split = Split::train;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct ParsedName {
  int person_id = 0;
  int camera_id = 0;

  friend bool operator==(const ParsedName&, const ParsedName&) = default;
};

namespace detail {

inline const std::regex& market_grammar() {
  static const std::regex re(R"(^(-?\d+)_c(\d+)s(\d+)_(\d+)_(\d+)\.(jpg|png)$)");
  return re;
}

inline const std::regex& duke_grammar() {
  static const std::regex re(R"(^(-?\d+)_c(\d+)_f(\d+)\.(jpg|png)$)");
  return re;
}

inline ParsedName parse_with(const std::string& name, const std::regex& re, bool& ok) {
  std::smatch m;
  ok = std::regex_match(name, m, re);
  if (!ok) return {};
  try {
    return {std::stoi(m[1].str()), std::stoi(m[2].str())};
  } catch (const std::out_of_range&) {
    ok = false;
    return {};
  }
}

inline bool is_image_file(const fs::path& p) {
  const std::string ext = p.extension().string();
  return ext == ".jpg" || ext == ".png";
}

}  // namespace detail

/// Parses a filename in the layout's grammar.
inline ParsedName parse_filename(const std::string& name, Layout layout) {
  bool ok = false;
  const ParsedName parsed =
      detail::parse_with(name, layout == Layout::market ? detail::market_grammar() : detail::duke_grammar(), ok);
  if (!ok) throw Error(ErrorKind::malformed_filename, "'" + name + "' is not a " + to_string(layout) + " filename");
  return parsed;
}

/// Parses either grammar; Market-1501 is tried first.
inline ParsedName parse_market_filename(const std::string& name) {
  bool ok = false;
  ParsedName parsed = detail::parse_with(name, detail::market_grammar(), ok);
  if (ok) return parsed;
  parsed = detail::parse_with(name, detail::duke_grammar(), ok);
  if (ok) return parsed;
  throw Error(ErrorKind::malformed_filename, "'" + name + "' matches neither filename grammar");
}

/// Builds a filename. `sequence` and `frame` fill the non-identifying fields.
inline std::string format_filename(const ParsedName& id, Layout layout, int sequence = 1, int frame = 0,
                                   int box = 0, const std::string& ext = "jpg") {
  char pid[32];
  std::snprintf(pid, sizeof pid, id.person_id < 0 ? "%d" : "%04d", id.person_id);
  std::ostringstream os;
  os << pid << "_c" << id.camera_id;
  char tail[64];
  if (layout == Layout::market)
    std::snprintf(tail, sizeof tail, "s%d_%06d_%02d", sequence, frame, box);
  else
    std::snprintf(tail, sizeof tail, "_f%07d", frame);
  os << tail << '.' << ext;
  return os.str();
}

struct IngestResult {
  std::vector<ImageRecord> records;
  std::size_t train_identities = 0;
  std::size_t count(Split split) const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [split](const ImageRecord& r) { return r.split == split; }));
  }
};

inline bool is_training_identity(int person_id) { return person_id > 0; }

/// Resolves the three split directories under `root`. Accepts the
/// bounding_box_train/query/bounding_box_test naming and train/query/gallery.
inline std::vector<std::pair<Split, fs::path>> split_directories(const fs::path& root) {
  const std::pair<Split, std::vector<const char*>> roles[] = {
      {Split::train, {"bounding_box_train", "train"}},
      {Split::query, {"query"}},
      {Split::gallery, {"bounding_box_test", "gallery"}},
  };
  std::vector<std::pair<Split, fs::path>> dirs;
  for (const auto& [split, names] : roles) {
    fs::path found;
    for (const char* n : names)
      if (fs::is_directory(root / n)) {
        found = root / n;
        break;
      }
    if (found.empty())
      throw Error(ErrorKind::missing_directory,
                  "no " + std::string(to_string(split)) + " directory under " + root.string());
    dirs.emplace_back(split, found);
  }
  return dirs;
}

/// Reads every image under the split directories, in split then filename order.
inline IngestResult ingest(const fs::path& root, Layout layout) {
  if (!fs::is_directory(root)) throw Error(ErrorKind::missing_directory, root.string() + " is not a directory");
  IngestResult result;
  std::vector<int> train_ids;
  for (const auto& [split, dir] : split_directories(root)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && detail::is_image_file(entry.path())) files.push_back(entry.path());
    if (files.empty())
      throw Error(ErrorKind::empty_split, std::string(to_string(split)) + " split is empty in " + dir.string());
    std::sort(files.begin(), files.end());
    for (const fs::path& f : files) {
      const ParsedName id = parse_filename(f.filename().string(), layout);
      if (id.camera_id < 1)
        throw Error(ErrorKind::malformed_filename, f.filename().string() + ": camera ids start at 1");
      result.records.push_back({f, id.person_id, id.camera_id, split});
      if (split == Split::train && is_training_identity(id.person_id)) train_ids.push_back(id.person_id);
    }
  }
  std::sort(train_ids.begin(), train_ids.end());
  result.train_identities =
      static_cast<std::size_t>(std::unique(train_ids.begin(), train_ids.end()) - train_ids.begin());
  return result;
}

inline std::vector<ImageRecord> filter_split(const std::vector<ImageRecord>& records, Split split) {
  std::vector<ImageRecord> out;
  std::copy_if(records.begin(), records.end(), std::back_inserter(out),
               [split](const ImageRecord& r) { return r.split == split; });
  return out;
}

/// Dense 0..n-1 class labels over the sorted training identities.
class LabelMap {
 public:
  LabelMap() = default;
  explicit LabelMap(std::vector<int> person_ids) : ids_(std::move(person_ids)) {
    std::sort(ids_.begin(), ids_.end());
    ids_.erase(std::unique(ids_.begin(), ids_.end()), ids_.end());
  }

  static LabelMap from_records(const std::vector<ImageRecord>& records) {
    std::vector<int> ids;
    for (const ImageRecord& r : records)
      if (r.split == Split::train && is_training_identity(r.person_id)) ids.push_back(r.person_id);
    return LabelMap(std::move(ids));
  }

  std::size_t size() const { return ids_.size(); }
  const std::vector<int>& person_ids() const { return ids_; }

  int label(int person_id) const {
    const auto it = std::lower_bound(ids_.begin(), ids_.end(), person_id);
    if (it == ids_.end() || *it != person_id)
      throw Error(ErrorKind::label_out_of_range, "person " + std::to_string(person_id) + " has no class label");
    return static_cast<int>(it - ids_.begin());
  }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;

 private:
  std::vector<int> ids_;
};

struct TaskSpec {
  std::string name;
  std::size_t num_classes = 0;
  fs::path root;
  std::size_t head_index = 0;
  Layout layout = Layout::market;
};

/// Consecutive (positive, negative) index pairs into a batch.
struct PairMask {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::size_t batch_size = 0;

  void validate(std::size_t batch) const {
    if (batch != batch_size)
      throw Error(ErrorKind::dim_mismatch,
                  "mask built for batch " + std::to_string(batch_size) + ", got " + std::to_string(batch));
    for (const auto& [p, n] : pairs)
      if (p >= batch_size || n >= batch_size)
        throw Error(ErrorKind::dim_mismatch, "mask index outside batch of " + std::to_string(batch_size));
  }
};

struct PkBatch {
  std::vector<ImageRecord> records;
  PairMask mask;
};

/// P identities x K instances per batch. Identities with fewer than K
/// training images are drawn with replacement unless that is disabled.
class PkSampler {
 public:
  PkSampler(const std::vector<ImageRecord>& records, std::size_t p, std::size_t k, std::uint64_t seed,
            bool allow_replacement = true)
      : p_(p), k_(k), allow_replacement_(allow_replacement), rng_(seed) {
    if (p == 0 || k == 0) throw Error(ErrorKind::invalid_config, "P and K must be positive");
    for (const ImageRecord& r : records)
      if (r.split == Split::train && is_training_identity(r.person_id)) by_id_[r.person_id].push_back(r);
    for (const auto& [id, recs] : by_id_) {
      ids_.push_back(id);
      if (recs.size() >= k_) ++ids_with_k_;
    }
    if (ids_.size() < p_ || p_ < 2)
      throw Error(ErrorKind::insufficient_identities, "need " + std::to_string(std::max<std::size_t>(p_, 2)) +
                                                          " identities, have " + std::to_string(ids_.size()));
    if (!allow_replacement_ && ids_with_k_ < p_)
      throw Error(ErrorKind::insufficient_instances,
                  std::to_string(ids_with_k_) + " identities have >= " + std::to_string(k_) + " images, need " +
                      std::to_string(p_));
  }

  std::size_t batch_size() const { return p_ * k_; }
  std::size_t num_identities() const { return ids_.size(); }

  PkBatch next() {
    PkBatch batch;
    std::vector<int> pool = allow_replacement_ ? ids_ : eligible_ids();
    std::shuffle(pool.begin(), pool.end(), rng_);
    pool.resize(p_);
    for (int id : pool) {
      const std::vector<ImageRecord>& recs = by_id_.at(id);
      if (recs.size() >= k_) {
        std::vector<std::size_t> order(recs.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng_);
        for (std::size_t i = 0; i < k_; ++i) batch.records.push_back(recs[order[i]]);
      } else {
        std::uniform_int_distribution<std::size_t> pick(0, recs.size() - 1);
        for (std::size_t i = 0; i < k_; ++i) batch.records.push_back(recs[pick(rng_)]);
      }
    }
    batch.mask.batch_size = batch.records.size();
    // Every slot except the last of its identity block is a positive; its
    // negative is the same slot in a randomly chosen other block.
    std::uniform_int_distribution<std::size_t> other(1, p_ - 1);
    for (std::size_t block = 0; block < p_; ++block)
      for (std::size_t offset = 0; offset + 1 < k_; ++offset) {
        const std::size_t neg_block = (block + other(rng_)) % p_;
        batch.mask.pairs.emplace_back(block * k_ + offset, neg_block * k_ + offset);
      }
    return batch;
  }

  std::string rng_state() const {
    std::ostringstream os;
    os << rng_;
    return os.str();
  }

  void set_rng_state(const std::string& state) {
    std::istringstream is(state);
    is >> rng_;
    if (!is) throw Error(ErrorKind::checkpoint_mismatch, "bad sampler state");
  }

 private:
  std::vector<int> eligible_ids() const {
    std::vector<int> out;
    for (int id : ids_)
      if (by_id_.at(id).size() >= k_) out.push_back(id);
    return out;
  }

  std::size_t p_, k_;
  bool allow_replacement_;
  std::mt19937_64 rng_;
  std::map<int, std::vector<ImageRecord>> by_id_;
  std::vector<int> ids_;
  std::size_t ids_with_k_ = 0;
};

inline PkBatch sample_pk_batch(const std::vector<ImageRecord>& records, std::size_t p, std::size_t k,
                               std::uint64_t seed) {
  return PkSampler(records, p, k, seed).next();
}

}  // namespace reid
