#pragma once

#include <cmath>
#include <cstddef>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "reid/image_io.hpp"
#include "reid/kernel.hpp"
#include "reid/model.hpp"
#include "reid/ranking.hpp"

namespace reid {

enum class EnsembleMode { none, base_plus_head, all_heads };

inline EnsembleMode parse_ensemble_mode(std::string_view name) {
  if (name == "none") return EnsembleMode::none;
  if (name == "base_plus_head") return EnsembleMode::base_plus_head;
  if (name == "all_heads") return EnsembleMode::all_heads;
  throw Error(ErrorKind::unknown_kind, "unknown ensemble mode '" + std::string(name) + "'");
}

inline const char* to_string(EnsembleMode m) {
  switch (m) {
    case EnsembleMode::none: return "none";
    case EnsembleMode::base_plus_head: return "base_plus_head";
    case EnsembleMode::all_heads: return "all_heads";
  }
  return "?";
}

/// Which features become the retrieval descriptor for a task.
struct DescriptorSource {
  EnsembleMode mode = EnsembleMode::none;
  std::size_t head_index = 0;
};

/// A head counts as trained once its phase has completed.
inline DescriptorSource ensemble_mode(const MultiHeadModel& model, std::size_t head_index, EnsembleMode mode) {
  if (head_index >= model.num_heads())
    throw Error(ErrorKind::unknown_head, "head " + std::to_string(head_index) + " does not exist");
  if (head_index >= model.phase())
    throw Error(ErrorKind::untrained_head, "head " + std::to_string(head_index) + " has not been trained");
  return {mode, head_index};
}

namespace detail {

inline void l2_normalize(std::span<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0.0)
    for (double& x : v) x /= n;
}

}  // namespace detail

/// Raw (unnormalized) descriptors [B,D] for an image batch, in inference mode.
inline Tensor describe(MultiHeadModel& model, const Tensor& images, const DescriptorSource& source) {
  const Tensor features = model.forward_backbone(images, Mode::eval);
  const std::size_t b = features.dim(0);
  switch (source.mode) {
    case EnsembleMode::none:
      return model.forward_head(source.head_index, features, Mode::eval).pooled;
    case EnsembleMode::base_plus_head: {
      GlobalAvgPool pool;
      const Tensor base = pool.forward(features, Mode::eval);
      const Tensor head = model.forward_head(source.head_index, features, Mode::eval).pooled;
      const std::size_t cb = base.dim(1), ch = head.dim(1);
      Tensor out({b, cb + ch});
      for (std::size_t i = 0; i < b; ++i) {
        std::copy_n(base.sample(i).begin(), cb, out.sample(i).begin());
        std::copy_n(head.sample(i).begin(), ch, out.sample(i).begin() + static_cast<std::ptrdiff_t>(cb));
      }
      return out;
    }
    case EnsembleMode::all_heads: {
      const std::size_t trained = std::max(model.phase(), source.head_index + 1);
      Tensor out;
      for (std::size_t h = 0; h < trained && h < model.num_heads(); ++h) {
        Tensor d = model.forward_head(h, features, Mode::eval).pooled;
        for (std::size_t i = 0; i < b; ++i) detail::l2_normalize(d.sample(i));
        if (out.empty())
          out = d;
        else
          out += d;
      }
      for (double& v : out.values()) v /= static_cast<double>(std::min(trained, model.num_heads()));
      return out;
    }
  }
  throw Error(ErrorKind::unknown_kind, "unknown ensemble mode");
}

/// One L2-normalized descriptor per record, ids and cameras carried through.
inline EmbeddingSet extract(MultiHeadModel& model, const std::vector<ImageRecord>& records,
                            const DescriptorSource& source, ImageLoader& loader, std::size_t batch_size = 64) {
  if (source.head_index >= model.phase())
    throw Error(ErrorKind::untrained_head, "head " + std::to_string(source.head_index) + " has not been trained");
  EmbeddingSet set;
  for (std::size_t begin = 0; begin < records.size(); begin += batch_size) {
    const std::size_t end = std::min(records.size(), begin + batch_size);
    const Tensor images = loader.load_batch(std::span(records).subspan(begin, end - begin));
    Tensor d = describe(model, images, source);
    set.dim = d.dim(1);
    for (std::size_t i = 0; i < d.dim(0); ++i) {
      detail::l2_normalize(d.sample(i));
      set.vectors.insert(set.vectors.end(), d.sample(i).begin(), d.sample(i).end());
    }
  }
  for (const ImageRecord& r : records) {
    set.person_ids.push_back(r.person_id);
    set.camera_ids.push_back(r.camera_id);
  }
  return set;
}

struct RankOptions {
  std::set<int> topk{1, 5, 10, 20};
  RankBackend backend = RankBackend::reference;
  std::filesystem::path kernel;   // native executable; found automatically when empty
  std::filesystem::path workdir;  // scratch for native kernel files
  unsigned workers = 1;
};

inline EvalReport rank(const EmbeddingSet& query, const EmbeddingSet& gallery, const RankOptions& opts) {
  if (opts.backend == RankBackend::reference) return cmc_map(query, gallery, opts.topk, opts.workers);
  const auto exe = opts.kernel.empty() ? find_rank_kernel() : opts.kernel;
  const auto dir = opts.workdir.empty() ? std::filesystem::temp_directory_path() / "reid_kernel" : opts.workdir;
  return run_rank_kernel(exe, query, gallery, opts.topk, dir);
}

}  // namespace reid
