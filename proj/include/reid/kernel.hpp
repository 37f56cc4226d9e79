#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <sys/wait.h>

#include <json.hpp>

#include "reid/ranking.hpp"

namespace reid {

enum class RankBackend { reference, native };

inline RankBackend parse_rank_backend(std::string_view name) {
  if (name == "reference") return RankBackend::reference;
  if (name == "native") return RankBackend::native;
  throw Error(ErrorKind::unknown_kind, "unknown kernel '" + std::string(name) + "'");
}

inline const char* to_string(RankBackend b) { return b == RankBackend::reference ? "reference" : "native"; }

/// Exit status of a rank-kernel process. Its contract puts format
/// errors at 2, unlike the toolkit-wide table.
inline int kernel_exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::bad_magic: return 2;
    case ErrorKind::dim_mismatch: return 3;
    case ErrorKind::no_valid_queries: return 4;
    case ErrorKind::io_error: return 1;
    default: return exit_code(kind);
  }
}

/// `{"rank":{"1":f,...},"map":f}`, the rank kernel's output document.
inline nlohmann::json kernel_report_json(const EvalReport& report) {
  nlohmann::json rank = nlohmann::json::object();
  for (const auto& [k, v] : report.cmc) rank[std::to_string(k)] = v;
  return {{"rank", rank}, {"map", report.map}};
}

inline EvalReport parse_kernel_report(const nlohmann::json& doc) {
  EvalReport report;
  try {
    for (const auto& [k, v] : doc.at("rank").items()) report.cmc[std::stoi(k)] = v.get<double>();
    report.map = doc.at("map").get<double>();
  } catch (const std::exception& e) {
    throw Error(ErrorKind::bad_magic, std::string("malformed kernel report: ") + e.what());
  }
  if (report.cmc.count(1)) report.rank1 = report.cmc.at(1);
  if (report.cmc.count(20)) report.rank20 = report.cmc.at(20);
  return report;
}

/// $REID_RANK_KERNEL, else `rank-kernel` on $PATH; empty if neither exists.
inline std::filesystem::path find_rank_kernel() {
  namespace fs = std::filesystem;
  if (const char* env = std::getenv("REID_RANK_KERNEL"); env && *env) return fs::path(env);
  if (const char* path = std::getenv("PATH")) {
    std::stringstream ss(path);
    std::string dir;
    while (std::getline(ss, dir, ':')) {
      const fs::path candidate = fs::path(dir) / "rank-kernel";
      if (!dir.empty() && fs::exists(candidate)) return candidate;
    }
  }
  return {};
}

namespace detail {

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return out + "'";
}

}  // namespace detail

/// Runs the external rank kernel on already-written REIDEMB1 files.
inline EvalReport run_rank_kernel(const std::filesystem::path& executable, const std::filesystem::path& query_file,
                                  const std::filesystem::path& gallery_file, const std::set<int>& topk,
                                  const std::filesystem::path& out_file) {
  if (executable.empty() || !std::filesystem::exists(executable))
    throw Error(ErrorKind::io_error, "rank kernel executable not found; set REID_RANK_KERNEL or use --kernel reference");
  std::string ks;
  for (int k : topk) ks += (ks.empty() ? "" : ",") + std::to_string(k);
  const std::string cmd = detail::shell_quote(executable.string()) + " --query " +
                          detail::shell_quote(query_file.string()) + " --gallery " +
                          detail::shell_quote(gallery_file.string()) + " --topk " + ks + " --out " +
                          detail::shell_quote(out_file.string());
  const int status = std::system(cmd.c_str());
  const int code = (status != -1 && WIFEXITED(status)) ? WEXITSTATUS(status) : -1;
  switch (code) {
    case 0: break;
    case 2: throw Error(ErrorKind::bad_magic, "rank kernel rejected its input format");
    case 3: throw Error(ErrorKind::dim_mismatch, "rank kernel reported a dimension mismatch");
    case 4: throw Error(ErrorKind::no_valid_queries, "rank kernel found no valid queries");
    default: throw Error(ErrorKind::io_error, "rank kernel failed with status " + std::to_string(code));
  }
  std::ifstream is(out_file);
  if (!is) throw Error(ErrorKind::io_error, "rank kernel wrote no report at " + out_file.string());
  nlohmann::json doc;
  try {
    is >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::bad_magic, std::string("kernel report is not JSON: ") + e.what());
  }
  return parse_kernel_report(doc);
}

inline EvalReport run_rank_kernel(const std::filesystem::path& executable, const EmbeddingSet& query,
                                  const EmbeddingSet& gallery, const std::set<int>& topk,
                                  const std::filesystem::path& workdir) {
  std::filesystem::create_directories(workdir);
  const auto q = workdir / "query.emb", g = workdir / "gallery.emb", out = workdir / "kernel_report.json";
  write_embeddings(q, query);
  write_embeddings(g, gallery);
  return run_rank_kernel(executable, q, g, topk, out);
}

}  // namespace reid
