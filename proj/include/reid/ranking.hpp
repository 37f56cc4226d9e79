#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "reid/error.hpp"

namespace reid {

/// N row-major embedding vectors with the identity and camera of each.
struct EmbeddingSet {
  std::size_t dim = 0;
  std::vector<double> vectors;  // N x dim
  std::vector<int> person_ids;
  std::vector<int> camera_ids;

  std::size_t size() const { return person_ids.size(); }
  const double* row(std::size_t i) const { return vectors.data() + i * dim; }

  void validate() const {
    if (vectors.size() != size() * dim || camera_ids.size() != size())
      throw Error(ErrorKind::dim_mismatch, "embedding set arrays have inconsistent lengths");
    for (double v : vectors)
      if (!std::isfinite(v)) throw Error(ErrorKind::non_finite_input, "embedding set contains NaN/Inf");
  }
};

inline constexpr char kEmbeddingMagic[8] = {'R', 'E', 'I', 'D', 'E', 'M', 'B', '1'};

namespace detail {

template <typename T>
void put_le(std::ostream& os, T value) {
  static_assert(sizeof(T) == 4);
  const auto bits = std::bit_cast<std::uint32_t>(value);
  const char bytes[4] = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                         static_cast<char>((bits >> 16) & 0xFF), static_cast<char>((bits >> 24) & 0xFF)};
  os.write(bytes, 4);
}

template <typename T>
T get_le(std::istream& is) {
  static_assert(sizeof(T) == 4);
  unsigned char bytes[4];
  if (!is.read(reinterpret_cast<char*>(bytes), 4)) throw Error(ErrorKind::bad_magic, "truncated embedding file");
  const std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
                             (static_cast<std::uint32_t>(bytes[2]) << 16) |
                             (static_cast<std::uint32_t>(bytes[3]) << 24);
  return std::bit_cast<T>(bits);
}

}  // namespace detail

/// REIDEMB1 layout: magic, u32 N, u32 D, N*D f32, N i32 ids, N i32 cameras; little-endian.
inline void write_embeddings(const std::filesystem::path& path, const EmbeddingSet& set) {
  set.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::io_error, "cannot write " + path.string());
  os.write(kEmbeddingMagic, 8);
  detail::put_le(os, static_cast<std::uint32_t>(set.size()));
  detail::put_le(os, static_cast<std::uint32_t>(set.dim));
  for (double v : set.vectors) detail::put_le(os, static_cast<float>(v));
  for (int id : set.person_ids) detail::put_le(os, static_cast<std::int32_t>(id));
  for (int cam : set.camera_ids) detail::put_le(os, static_cast<std::int32_t>(cam));
  if (!os) throw Error(ErrorKind::io_error, "short write to " + path.string());
}

inline EmbeddingSet read_embeddings(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::io_error, "cannot read " + path.string());
  char magic[8] = {};
  if (!is.read(magic, 8) || std::memcmp(magic, kEmbeddingMagic, 8) != 0)
    throw Error(ErrorKind::bad_magic, path.string() + " is not a REIDEMB1 file");
  EmbeddingSet set;
  const auto n = detail::get_le<std::uint32_t>(is);
  set.dim = detail::get_le<std::uint32_t>(is);
  set.vectors.resize(static_cast<std::size_t>(n) * set.dim);
  for (double& v : set.vectors) v = detail::get_le<float>(is);
  set.person_ids.resize(n);
  set.camera_ids.resize(n);
  for (int& id : set.person_ids) id = detail::get_le<std::int32_t>(is);
  for (int& cam : set.camera_ids) cam = detail::get_le<std::int32_t>(is);
  return set;
}

using DistanceMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Squared Euclidean distances, query rows by gallery columns.
inline DistanceMatrix distance_matrix(const EmbeddingSet& query, const EmbeddingSet& gallery) {
  if (query.dim != gallery.dim)
    throw Error(ErrorKind::dim_mismatch,
                "query dim " + std::to_string(query.dim) + " != gallery dim " + std::to_string(gallery.dim));
  using Rows = Eigen::Map<const DistanceMatrix>;
  const auto d = static_cast<Eigen::Index>(query.dim);
  Rows q(query.vectors.data(), static_cast<Eigen::Index>(query.size()), d);
  Rows g(gallery.vectors.data(), static_cast<Eigen::Index>(gallery.size()), d);
  DistanceMatrix dist = -2.0 * q * g.transpose();
  dist.colwise() += q.rowwise().squaredNorm();
  dist.rowwise() += g.rowwise().squaredNorm().transpose();
  return dist.cwiseMax(0.0);
}

struct EvalReport {
  double rank1 = 0.0;
  double rank20 = 0.0;
  double map = 0.0;
  std::vector<double> per_query_ap;    // valid queries only, in query order
  std::map<int, double> cmc;           // requested k -> CMC@k
  std::size_t valid_queries = 0;

  double rank(int k) const { return cmc.at(k); }
};

struct QueryOutcome {
  bool valid = false;
  std::size_t first_hit = 0;  // 0-based position of the first relevant kept entry
  double ap = 0.0;
};

/// Ranking outcome for one query row. Gallery entries are ordered by distance
/// with ties broken by original index; same-id same-camera entries and ids
/// -1/0 are dropped before ranking.
inline QueryOutcome rank_query(const double* dist, std::size_t ng, int q_id, int q_cam, const std::vector<int>& g_ids,
                               const std::vector<int>& g_cams, std::vector<std::size_t>& order) {
  order.resize(ng);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [dist](std::size_t a, std::size_t b) {
    return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
  });
  QueryOutcome out;
  std::size_t kept = 0, hits = 0;
  double precision_sum = 0.0;
  for (std::size_t idx : order) {
    const int gid = g_ids[idx];
    if (gid == -1 || gid == 0 || (gid == q_id && g_cams[idx] == q_cam)) continue;
    ++kept;
    if (gid == q_id) {
      if (hits == 0) out.first_hit = kept - 1;
      ++hits;
      precision_sum += static_cast<double>(hits) / static_cast<double>(kept);
    }
  }
  out.valid = hits > 0;
  if (out.valid) out.ap = precision_sum / static_cast<double>(hits);
  return out;
}

/// Rank-k CMC and mAP under the multi-shot protocol. Queries without any
/// valid match are excluded. `workers` splits query rows across threads;
/// the result does not depend on it.
inline EvalReport cmc_map(const DistanceMatrix& dist, const std::vector<int>& q_ids, const std::vector<int>& q_cams,
                          const std::vector<int>& g_ids, const std::vector<int>& g_cams,
                          std::set<int> topk = {1, 5, 10, 20}, unsigned workers = 1) {
  const auto nq = static_cast<std::size_t>(dist.rows()), ng = static_cast<std::size_t>(dist.cols());
  if (nq == 0 || ng == 0) throw Error(ErrorKind::no_valid_queries, "empty query or gallery");
  if (q_ids.size() != nq || q_cams.size() != nq || g_ids.size() != ng || g_cams.size() != ng)
    throw Error(ErrorKind::dim_mismatch, "id/camera arrays do not match the distance matrix");
  topk.insert(1);
  topk.insert(20);
  if (*topk.begin() < 1) throw Error(ErrorKind::invalid_config, "top-k values must be >= 1");

  std::vector<QueryOutcome> outcomes(nq);
  auto run = [&](std::size_t begin, std::size_t end) {
    std::vector<std::size_t> order;
    for (std::size_t q = begin; q < end; ++q)
      outcomes[q] = rank_query(dist.data() + q * ng, ng, q_ids[q], q_cams[q], g_ids, g_cams, order);
  };
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(nq)));
  if (workers == 1) {
    run(0, nq);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (nq + workers - 1) / workers;
    for (std::size_t b = 0; b < nq; b += chunk) pool.emplace_back(run, b, std::min(nq, b + chunk));
    for (auto& t : pool) t.join();
  }

  EvalReport report;
  std::map<int, std::size_t> hits;
  double ap_sum = 0.0;
  for (const QueryOutcome& o : outcomes) {
    if (!o.valid) continue;
    ++report.valid_queries;
    report.per_query_ap.push_back(o.ap);
    ap_sum += o.ap;
    for (int k : topk)
      if (o.first_hit < static_cast<std::size_t>(k)) ++hits[k];
  }
  if (report.valid_queries == 0) throw Error(ErrorKind::no_valid_queries, "no query has a valid gallery match");
  const auto n = static_cast<double>(report.valid_queries);
  for (int k : topk) report.cmc[k] = static_cast<double>(hits[k]) / n;
  report.map = ap_sum / n;
  report.rank1 = report.cmc[1];
  report.rank20 = report.cmc[20];
  return report;
}

inline EvalReport cmc_map(const EmbeddingSet& query, const EmbeddingSet& gallery, std::set<int> topk = {1, 5, 10, 20},
                          unsigned workers = 1) {
  return cmc_map(distance_matrix(query, gallery), query.person_ids, query.camera_ids, gallery.person_ids,
                 gallery.camera_ids, std::move(topk), workers);
}

}  // namespace reid
