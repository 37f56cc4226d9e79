#pragma once

#include <algorithm>
#include <future>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "reid/config.hpp"
#include "reid/synthetic.hpp"
#include "reid/trainer.hpp"

namespace reid {

inline constexpr const char* kToolVersion = "0.3.0";

inline std::string hex_digest(const std::string& data, const EVP_MD* md) {
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), out, &len, md, nullptr) != 1)
    throw Error(ErrorKind::io_error, "digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(out[i]);
  return os.str();
}

inline std::string sha256_hex(const std::string& data) { return hex_digest(data, EVP_sha256()); }

/// Git blob id of `content`: sha1("blob <size>\0" + content).
inline std::string git_blob_id(const std::string& content) {
  std::string blob = "blob " + std::to_string(content.size());
  blob.push_back('\0');
  return hex_digest(blob + content, EVP_sha1());
}

/// Hash of every parameter and buffer in one head; changes iff any bit changes.
inline std::string head_digest(MultiHeadModel& model, std::size_t head) {
  std::string bytes;
  model.visit_head(head, [&bytes](const std::string& name, Tensor& value, Tensor*) {
    bytes += name;
    bytes.append(reinterpret_cast<const char*>(value.data()), value.size() * sizeof(double));
  });
  return sha256_hex(bytes);
}

/// Provenance written next to every command's outputs.
class RunRecord {
 public:
  RunRecord(std::filesystem::path dir, std::string command, const nlohmann::json& config, std::uint64_t seed)
      : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
    const std::string canonical = config.dump();
    doc_ = {{"command", std::move(command)},
            {"config_hash", sha256_hex(canonical)},
            {"content_version", git_blob_id(canonical)},
            {"tool_version", kToolVersion},
            {"seed", seed},
            {"started", utc_timestamp()},
            {"status", "running"},
            {"config", config}};
    write();
  }

  void finish(const std::string& status, const std::string& detail = {}) {
    doc_["status"] = status;
    doc_["finished"] = utc_timestamp();
    if (!detail.empty()) doc_["detail"] = detail;
    write();
  }

  const nlohmann::json& doc() const { return doc_; }

 private:
  void write() const { std::ofstream(dir_ / "run.json") << doc_.dump(2) << '\n'; }

  std::filesystem::path dir_;
  nlohmann::json doc_;
};

/// Runs `body` under a RunRecord, marking it ok or failed.
template <typename Body>
auto with_run_record(const std::filesystem::path& dir, const std::string& command, const nlohmann::json& config,
                     std::uint64_t seed, Body&& body) {
  RunRecord record(dir, command, config, seed);
  try {
    if constexpr (std::is_void_v<decltype(body())>) {
      body();
      record.finish("ok");
    } else {
      auto result = body();
      record.finish("ok");
      return result;
    }
  } catch (const std::exception& e) {
    record.finish("failed", e.what());
    throw;
  }
}

// ---------------------------------------------------------------- ingest

struct IngestSummary {
  std::size_t train = 0, query = 0, gallery = 0, train_identities = 0;
};

inline nlohmann::json to_json(const ImageRecord& r) {
  return {{"path", r.path.string()}, {"person_id", r.person_id}, {"camera_id", r.camera_id},
          {"split", to_string(r.split)}};
}

inline IngestSummary cmd_ingest(const std::filesystem::path& root, Layout layout, const std::filesystem::path& out) {
  const nlohmann::json args = {{"root", root.string()}, {"layout", to_string(layout)}};
  return with_run_record(out, "ingest", args, 0, [&] {
    const IngestResult result = ingest(root, layout);
    std::ofstream manifest(out / "manifest.jsonl");
    for (const ImageRecord& r : result.records) manifest << to_json(r).dump() << '\n';
    IngestSummary s{result.count(Split::train), result.count(Split::query), result.count(Split::gallery),
                    result.train_identities};
    std::ofstream(out / "summary.json") << nlohmann::json{{"root", root.string()},
                                                          {"layout", to_string(layout)},
                                                          {"train_images", s.train},
                                                          {"query_images", s.query},
                                                          {"gallery_images", s.gallery},
                                                          {"train_identities", s.train_identities}}
                                               .dump(2)
                                        << '\n';
    return s;
  });
}

// ---------------------------------------------------------------- results tables

inline constexpr const char* kResultsHeader = "no,dataset,rank1,rank20,map";

inline void write_results(const std::filesystem::path& dir, const std::vector<ResultRow>& rows) {
  std::ofstream csv(dir / "results.csv");
  csv << kResultsHeader << '\n' << std::setprecision(6) << std::fixed;
  nlohmann::json json = nlohmann::json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const EvalReport& r = rows[i].report;
    csv << i + 1 << ',' << rows[i].task << ',' << r.rank1 << ',' << r.rank20 << ',' << r.map << '\n';
    json.push_back({{"no", i + 1}, {"phase", rows[i].phase}, {"dataset", rows[i].task}, {"rank1", r.rank1},
                    {"rank20", r.rank20}, {"map", r.map}, {"cmc", kernel_report_json(r)["rank"]},
                    {"valid_queries", r.valid_queries}});
  }
  std::ofstream(dir / "results.json") << json.dump(2) << '\n';
}

inline void reset_logs(const std::filesystem::path& dir) {
  std::filesystem::remove(dir / "run_log.jsonl");
  std::filesystem::remove(dir / "eval_log.jsonl");
}

// ---------------------------------------------------------------- run-incremental

inline std::vector<ResultRow> run_incremental_into(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                                   bool verbose = false) {
  if (cfg.tasks.size() < 2) throw Error(ErrorKind::invalid_config, "run-incremental needs at least 2 tasks");
  std::filesystem::create_directories(out);
  TrainConfig tcfg = to_train_config(cfg);
  tcfg.checkpoint_dir = out;
  tcfg.rank.workdir = out / "kernel";
  const std::vector<TaskData> tasks = load_tasks(cfg);
  reset_logs(out);
  RunLog log;
  log.attach(out / "run_log.jsonl", out / "eval_log.jsonl");
  std::vector<ResultRow> partial;
  auto on_row = [&](const ResultRow& row) {
    partial.push_back(row);
    write_results(out, partial);
    if (verbose)
      std::cerr << "phase " << row.phase << " " << row.task << ": rank1=" << row.report.rank1
                << " rank20=" << row.report.rank20 << " mAP=" << row.report.map << '\n';
  };
  IncrementalResult result = run_incremental(tasks, tcfg, on_row, std::move(log));
  write_results(out, result.rows);
  return result.rows;
}

inline std::vector<ResultRow> cmd_run_incremental(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                                  bool verbose = false) {
  if (cfg.tasks.size() < 2) throw Error(ErrorKind::invalid_config, "run-incremental needs at least 2 tasks");
  return with_run_record(out, "run-incremental", to_json(cfg), cfg.seed,
                         [&] { return run_incremental_into(cfg, out, verbose); });
}

// ---------------------------------------------------------------- train / eval

inline std::filesystem::path phase_checkpoint(const std::filesystem::path& dir, std::size_t phase) {
  return dir / ("checkpoint_phase" + std::to_string(phase) + ".bin");
}

inline EvalReport cmd_train(const ExperimentConfig& cfg, std::size_t phase, const std::filesystem::path& out) {
  return with_run_record(out, "train --phase " + std::to_string(phase), to_json(cfg), cfg.seed, [&] {
    if (phase < 1 || phase > cfg.tasks.size())
      throw Error(ErrorKind::plan_mismatch, "phase " + std::to_string(phase) + " outside 1.." +
                                                std::to_string(cfg.tasks.size()));
    TrainConfig tcfg = to_train_config(cfg);
    tcfg.checkpoint_dir = out;
    tcfg.rank.workdir = out / "kernel";
    const std::vector<TaskData> tasks = load_tasks(cfg);
    std::vector<TaskState> states;
    for (const TaskData& t : tasks) states.push_back(t.state());

    std::unique_ptr<MultiHeadModel> model;
    std::optional<TrainingState> resume;
    std::uint64_t first_iter = 0;
    const auto own = phase_checkpoint(out, phase);
    if (std::filesystem::exists(own)) {
      LoadedCheckpoint ck = load_checkpoint(own);
      if (ck.training && ck.training->epoch < cfg.epochs && ck.model->phase() < phase) {
        model = std::move(ck.model);
        resume = ck.training;
      }
    }
    if (!model && phase == 1) {
      model = build_model(tcfg, tasks);
    } else if (!model) {
      if (!std::filesystem::exists(phase_checkpoint(out, phase - 1)))
        throw Error(ErrorKind::plan_mismatch, "phase " + std::to_string(phase - 1) + " has not been run in " +
                                                  out.string());
      LoadedCheckpoint ck = load_checkpoint(phase_checkpoint(out, phase - 1));
      if (ck.model->phase() < phase - 1)
        throw Error(ErrorKind::plan_mismatch, "phase " + std::to_string(phase - 1) + " has not finished");
      for (std::size_t i = 0; i < ck.tasks.size() && i < tasks.size(); ++i)
        if (!(ck.tasks[i].labels == tasks[i].labels))
          throw Error(ErrorKind::checkpoint_mismatch, "label map of task '" + tasks[i].spec.name + "' changed");
      if (ck.training) first_iter = ck.training->global_iteration;
      model = std::move(ck.model);
    }
    if (model->num_heads() != tasks.size())
      throw Error(ErrorKind::checkpoint_mismatch, "checkpoint has " + std::to_string(model->num_heads()) +
                                                      " heads, config has " + std::to_string(tasks.size()) + " tasks");
    ImageLoader loader(tcfg.input, tcfg.image_cache);
    RunLog log;
    log.attach(out / "run_log.jsonl", out / "eval_log.jsonl");
    const TaskData& task = tasks[phase - 1];
    PhaseTrainer trainer(*model, PhasePlan::make(phase, task.spec, tcfg.epochs), task, tcfg, loader, log, states,
                         first_iter);
    if (resume) trainer.restore(*resume);
    trainer.run();
    const EvalReport report = evaluate_task(*model, task, tcfg, loader);
    log.append(EvalSnapshot{phase, task.spec.name, report.rank1, report.rank20, report.map});
    return report;
  });
}

/// Latest phase checkpoint in `dir`.
inline std::filesystem::path latest_checkpoint(const std::filesystem::path& dir) {
  std::filesystem::path best;
  for (std::size_t phase = 1; std::filesystem::exists(phase_checkpoint(dir, phase)); ++phase)
    best = phase_checkpoint(dir, phase);
  if (best.empty()) throw Error(ErrorKind::invalid_config, "no checkpoint_phase*.bin in " + dir.string());
  return best;
}

struct TaskEval {
  std::string task;
  EvalReport report;
};

/// Evaluates every trained task (or only `only_task`), writing embeddings
/// in REIDEMB1 form plus eval_report.json.
inline std::vector<TaskEval> cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                      const std::filesystem::path& out, const std::string& only_task = {}) {
  return with_run_record(out, "eval", to_json(cfg), cfg.seed, [&] {
    LoadedCheckpoint ck = load_checkpoint(checkpoint.empty() ? latest_checkpoint(out) : checkpoint);
    TrainConfig tcfg = to_train_config(cfg);
    tcfg.rank.workdir = out / "kernel";
    ImageLoader loader(tcfg.input, tcfg.image_cache);
    std::vector<TaskEval> results;
    const std::filesystem::path emb_dir = out / "embeddings";
    std::filesystem::create_directories(emb_dir);
    bool matched = only_task.empty();
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
      const TaskConfig& tc = cfg.tasks[i];
      if (!only_task.empty() && tc.name != only_task) continue;
      matched = true;
      if (i >= ck.model->phase()) {
        if (only_task.empty()) continue;
        throw Error(ErrorKind::untrained_head, "task '" + tc.name + "' has not been trained yet");
      }
      const TaskData task = TaskData::load({tc.name, tc.num_classes, tc.root, i, tc.layout});
      const DescriptorSource source = ensemble_mode(*ck.model, i, tcfg.ensemble);
      const EmbeddingSet q = extract(*ck.model, task.query, source, loader);
      const EmbeddingSet g = extract(*ck.model, task.gallery, source, loader);
      write_embeddings(emb_dir / (tc.name + "_query.emb"), q);
      write_embeddings(emb_dir / (tc.name + "_gallery.emb"), g);
      results.push_back({tc.name, rank(q, g, tcfg.rank)});
    }
    if (!matched) throw Error(ErrorKind::invalid_config, "no task named '" + only_task + "'");
    nlohmann::json doc = nlohmann::json::array();
    for (const TaskEval& r : results)
      doc.push_back({{"task", r.task}, {"rank1", r.report.rank1}, {"rank20", r.report.rank20},
                     {"map", r.report.map}, {"cmc", kernel_report_json(r.report)["rank"]},
                     {"valid_queries", r.report.valid_queries}});
    std::ofstream(out / "eval_report.json") << doc.dump(2) << '\n';
    return results;
  });
}

// ---------------------------------------------------------------- sweep

enum class SweepParam { lambda, batch_size };

inline SweepParam parse_sweep_param(std::string_view name) {
  if (name == "lambda") return SweepParam::lambda;
  if (name == "batch_size") return SweepParam::batch_size;
  throw Error(ErrorKind::unknown_kind, "unknown sweep parameter '" + std::string(name) + "'");
}

struct SweepRow {
  double value = 0.0;
  double rank1 = 0.0;
  std::vector<double> row_rank1;  // Rank-1 of every protocol row
  bool best = false;
};

/// Config for one sweep point. Batch sizes keep P and set K = size / P.
inline ExperimentConfig sweep_point(ExperimentConfig cfg, SweepParam param, double value) {
  if (param == SweepParam::lambda) {
    cfg.cov.lambda = value;
    cfg.cov.validate();
  } else {
    const auto size = static_cast<std::size_t>(value);
    if (value != static_cast<double>(size) || size % cfg.p != 0 || size < cfg.p)
      throw Error(ErrorKind::invalid_config, "batch size " + std::to_string(value) + " is not a multiple of P = " +
                                                 std::to_string(cfg.p));
    cfg.k = size / cfg.p;
  }
  return cfg;
}

/// One full incremental run per value. The reported Rank-1 is the first
/// row (task 1 right after its own phase) for batch_size, and the final
/// re-evaluation of task 1 for lambda, since lambda only acts from phase 2.
inline std::vector<SweepRow> cmd_sweep(const ExperimentConfig& cfg, SweepParam param, std::vector<double> values,
                                       const std::filesystem::path& out, bool parallel = false) {
  if (values.empty()) throw Error(ErrorKind::invalid_config, "sweep needs at least one value");
  const char* pname = param == SweepParam::lambda ? "lambda" : "batch_size";
  nlohmann::json args = to_json(cfg);
  args["sweep"] = {{"parameter", pname}, {"values", values}};
  return with_run_record(out, std::string("sweep ") + pname, args, cfg.seed, [&] {
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    std::vector<ExperimentConfig> points;
    for (double v : values) points.push_back(sweep_point(cfg, param, v));

    auto run_one = [&](std::size_t i) {
      std::ostringstream name;
      name << pname << '=' << values[i];
      const auto rows = run_incremental_into(points[i], out / name.str());
      SweepRow r;
      r.value = values[i];
      for (const ResultRow& row : rows) r.row_rank1.push_back(row.report.rank1);
      r.rank1 = param == SweepParam::batch_size ? r.row_rank1.front() : r.row_rank1.back();
      return r;
    };
    std::vector<SweepRow> rows;
    if (parallel) {
      std::vector<std::future<SweepRow>> futures;
      for (std::size_t i = 0; i < values.size(); ++i) futures.push_back(std::async(std::launch::async, run_one, i));
      for (auto& f : futures) rows.push_back(f.get());
    } else {
      for (std::size_t i = 0; i < values.size(); ++i) rows.push_back(run_one(i));
    }
    auto best = std::max_element(rows.begin(), rows.end(),
                                 [](const SweepRow& a, const SweepRow& b) { return a.rank1 < b.rank1; });
    best->best = true;

    std::ofstream csv(out / "sweep.csv");
    csv << pname << ",rank1,best\n";
    nlohmann::json json = nlohmann::json::array();
    for (const SweepRow& r : rows) {
      csv << r.value << ',' << std::fixed << std::setprecision(6) << r.rank1 << ',' << (r.best ? 1 : 0) << '\n'
          << std::defaultfloat;
      json.push_back({{pname, r.value}, {"rank1", r.rank1}, {"row_rank1", r.row_rank1}, {"best", r.best}});
    }
    std::ofstream(out / "sweep.json") << json.dump(2) << '\n';
    return rows;
  });
}

}  // namespace reid
