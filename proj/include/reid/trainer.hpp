#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "reid/checkpoint.hpp"
#include "reid/datasets.hpp"
#include "reid/eval.hpp"
#include "reid/image_io.hpp"
#include "reid/losses.hpp"
#include "reid/model.hpp"
#include "reid/schedule.hpp"

namespace reid {

enum class LossMode { ce_only, ce_plus_cov };

struct PhasePlan {
  std::size_t phase_index = 1;  // 1-based
  TaskSpec task;
  std::size_t epochs = 100;
  LossMode loss_mode = LossMode::ce_only;
  std::set<std::size_t> frozen_heads;

  /// Phase 1: cross-entropy only, nothing frozen. Phase k: heads 0..k-2 frozen, covariance term on.
  static PhasePlan make(std::size_t phase_index, TaskSpec task, std::size_t epochs) {
    PhasePlan plan{phase_index, std::move(task), epochs, phase_index == 1 ? LossMode::ce_only : LossMode::ce_plus_cov,
                   {}};
    for (std::size_t h = 0; h + 1 < phase_index; ++h) plan.frozen_heads.insert(h);
    return plan;
  }

  void validate(const MultiHeadModel& model) const {
    auto fail = [](const std::string& why) { throw Error(ErrorKind::plan_mismatch, why); };
    if (phase_index < 1 || phase_index > model.num_heads())
      fail("phase " + std::to_string(phase_index) + " but model has " + std::to_string(model.num_heads()) + " heads");
    if (task.head_index != phase_index - 1) fail("task '" + task.name + "' is not bound to head " +
                                                 std::to_string(phase_index - 1));
    if (epochs < 1) fail("epochs must be >= 1");
    if (phase_index == 1 && (loss_mode != LossMode::ce_only || !frozen_heads.empty()))
      fail("phase 1 trains with cross-entropy only and no frozen heads");
    if (phase_index > 1) {
      if (loss_mode != LossMode::ce_plus_cov) fail("later phases train with the covariance term");
      for (std::size_t h = 0; h + 1 < phase_index; ++h)
        if (!frozen_heads.count(h)) fail("head " + std::to_string(h) + " must be frozen in phase " +
                                         std::to_string(phase_index));
      if (frozen_heads.count(phase_index - 1)) fail("the active head cannot be frozen");
    }
    if (model.phase() + 1 < phase_index)
      fail("phase " + std::to_string(phase_index) + " requested after only " + std::to_string(model.phase()) +
           " completed phases");
  }
};

struct IterationRecord {
  std::uint64_t iter = 0;
  double lr = 0.0;
  double ce = 0.0;
  double cov = 0.0;
  double total = 0.0;
};

struct EvalSnapshot {
  std::size_t phase = 0;
  std::string task;
  double rank1 = 0.0;
  double rank20 = 0.0;
  double map = 0.0;
};

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

/// Append-only training history.
class RunLog {
 public:
  void append(const IterationRecord& r) {
    if (!iterations_.empty() && r.iter <= iterations_.back().iter)
      throw Error(ErrorKind::plan_mismatch, "run log iterations must increase");
    iterations_.push_back(r);
    if (iter_sink_) *iter_sink_ << to_json(r).dump() << '\n' << std::flush;
  }

  void append(const EvalSnapshot& s) {
    evals_.push_back(s);
    if (eval_sink_) *eval_sink_ << to_json(s).dump() << '\n' << std::flush;
  }

  void stamp(const std::string& event) { stamps_.emplace_back(event, utc_timestamp()); }

  /// Streams records as JSON lines while they are appended.
  void attach(const std::filesystem::path& iterations_file, const std::filesystem::path& evals_file) {
    iter_sink_ = std::make_shared<std::ofstream>(iterations_file, std::ios::app);
    eval_sink_ = std::make_shared<std::ofstream>(evals_file, std::ios::app);
    if (!*iter_sink_ || !*eval_sink_) throw Error(ErrorKind::io_error, "cannot open run log files");
  }

  const std::vector<IterationRecord>& iterations() const { return iterations_; }
  const std::vector<EvalSnapshot>& evals() const { return evals_; }
  const std::vector<std::pair<std::string, std::string>>& stamps() const { return stamps_; }

  static nlohmann::json to_json(const IterationRecord& r) {
    return {{"iter", r.iter}, {"lr", r.lr}, {"ce", r.ce}, {"cov", r.cov}, {"total", r.total}};
  }
  static nlohmann::json to_json(const EvalSnapshot& s) {
    return {{"phase", s.phase}, {"task", s.task}, {"rank1", s.rank1}, {"rank20", s.rank20}, {"map", s.map}};
  }

 private:
  std::vector<IterationRecord> iterations_;
  std::vector<EvalSnapshot> evals_;
  std::vector<std::pair<std::string, std::string>> stamps_;
  std::shared_ptr<std::ofstream> iter_sink_, eval_sink_;
};

/// A task's records split by role, plus its label map.
struct TaskData {
  TaskSpec spec;
  LabelMap labels;
  std::vector<ImageRecord> train, query, gallery;

  static TaskData from_records(TaskSpec spec, const std::vector<ImageRecord>& records) {
    TaskData d;
    d.labels = LabelMap::from_records(records);
    d.train = filter_split(records, Split::train);
    d.query = filter_split(records, Split::query);
    d.gallery = filter_split(records, Split::gallery);
    if (spec.num_classes == 0) spec.num_classes = d.labels.size();
    if (spec.num_classes != d.labels.size())
      throw Error(ErrorKind::invalid_config, "task '" + spec.name + "' declares " + std::to_string(spec.num_classes) +
                                                 " classes but has " + std::to_string(d.labels.size()) +
                                                 " training identities");
    d.spec = std::move(spec);
    return d;
  }

  static TaskData load(TaskSpec spec) {
    const IngestResult ingested = ingest(spec.root, spec.layout);
    return from_records(std::move(spec), ingested.records);
  }

  TaskState state() const { return {spec.name, spec.head_index, labels}; }
};

struct TrainConfig {
  BackboneConfig backbone{"tiny", false, "", 16};
  double negative_slope = 0.01;
  HeadTap head_tap = HeadTap::block2;
  InputSpec input{64, 32};
  CovLossConfig cov;
  OptimizerConfig optimizer;
  bool auto_step_size = true;  // step_size = 2 x iterations per epoch
  std::size_t p = 8;
  std::size_t k = 4;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  double backbone_lr_mult = 1.0;
  bool freeze_backbone = false;
  EnsembleMode ensemble = EnsembleMode::none;
  RankOptions rank;
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::size_t eval_every_epochs = 0;     // 0: evaluate only at phase end
  std::size_t image_cache = 4096;
};

namespace detail {

inline EmbeddingSet extract_unchecked(MultiHeadModel& model, const std::vector<ImageRecord>& records,
                                      const DescriptorSource& source, ImageLoader& loader) {
  const std::size_t phase = model.phase();
  model.set_phase(std::max(phase, source.head_index + 1));
  EmbeddingSet set;
  try {
    set = extract(model, records, source, loader);
  } catch (...) {
    model.set_phase(phase);
    throw;
  }
  model.set_phase(phase);
  return set;
}

}  // namespace detail

/// Evaluates a task's query/gallery split through its head.
inline EvalReport evaluate_task(MultiHeadModel& model, const TaskData& task, const TrainConfig& cfg,
                                ImageLoader& loader) {
  const DescriptorSource source = ensemble_mode(model, task.spec.head_index, cfg.ensemble);
  const EmbeddingSet q = extract(model, task.query, source, loader);
  const EmbeddingSet g = extract(model, task.gallery, source, loader);
  return rank(q, g, cfg.rank);
}

/// Runs one training phase step by step. Owns the optimizer and sampler.
class PhaseTrainer {
 public:
  PhaseTrainer(MultiHeadModel& model, PhasePlan plan, const TaskData& data, const TrainConfig& cfg,
               ImageLoader& loader, RunLog& log, std::vector<TaskState> task_states = {},
               std::uint64_t first_iteration = 0)
      : model_(model), plan_(std::move(plan)), data_(data), cfg_(cfg), loader_(loader), log_(log),
        task_states_(std::move(task_states)), global_iter_(first_iteration),
        sampler_(data.train, cfg.p, cfg.k, cfg.seed * 0x9E3779B97F4A7C15ULL + plan_.phase_index) {
    plan_.validate(model_);
    if (data_.spec.num_classes != model_.head(active()).config().num_classes)
      throw Error(ErrorKind::plan_mismatch, "task '" + data_.spec.name + "' has " +
                                                std::to_string(data_.spec.num_classes) + " classes, head has " +
                                                std::to_string(model_.head(active()).config().num_classes));
    if (plan_.loss_mode == LossMode::ce_plus_cov) cfg_.cov.validate();
    for (std::size_t h : plan_.frozen_heads) model_.set_frozen(h, true);
    model_.set_frozen(active(), false);

    const std::size_t batch = cfg_.p * cfg_.k;
    iters_per_epoch_ = std::max<std::size_t>(1, (data_.train.size() + batch - 1) / batch);
    OptimizerConfig ocfg = cfg_.optimizer;
    if (cfg_.auto_step_size) ocfg.clr.step_size = 2 * iters_per_epoch_;
    std::vector<ParamRef> params = model_.trainable_parameters(plan_.phase_index, !cfg_.freeze_backbone);
    for (ParamRef& p : params)
      if (p.name.rfind("backbone.", 0) == 0) p.lr_scale = cfg_.backbone_lr_mult;
    optimizer_ = make_optimizer(std::move(params), ocfg);
  }

  std::size_t active() const { return plan_.phase_index - 1; }
  std::size_t iterations_per_epoch() const { return iters_per_epoch_; }
  std::uint64_t global_iteration() const { return global_iter_; }
  const Optimizer& optimizer() const { return *optimizer_; }

  IterationRecord step() {
    const PkBatch batch = sampler_.next();
    const Tensor images = loader_.load_batch(batch.records);
    std::vector<int> labels;
    for (const ImageRecord& r : batch.records) labels.push_back(data_.labels.label(r.person_id));

    model_.zero_grad();
    const Tensor features = model_.forward_backbone(images, Mode::train);
    std::map<std::size_t, HeadOutput> outputs;
    outputs[active()] = model_.forward_head(active(), features, Mode::train);
    const LossValue ce = cross_entropy(outputs[active()].logits, labels);

    IterationRecord rec;
    rec.iter = ++global_iter_;
    rec.lr = optimizer_->current_lr();
    rec.ce = ce.value;

    LossValue cov;
    std::vector<std::size_t> tap_heads;
    if (plan_.loss_mode == LossMode::ce_plus_cov) {
      std::vector<const Tensor*> taps;
      if (cfg_.cov.tap == CovTap::backbone) {
        taps.push_back(&features);
      } else {
        if (cfg_.cov.tap == CovTap::block2_both_heads)
          for (std::size_t h = 0; h < active(); ++h) tap_heads.push_back(h);
        tap_heads.push_back(active());
        for (std::size_t h : tap_heads) {
          if (!outputs.count(h)) outputs[h] = model_.forward_head(h, features, Mode::train);
          taps.push_back(&tap_of(h, outputs[h]));
        }
      }
      cov = covariance_loss(taps, batch.mask, cfg_.cov);
      rec.cov = cov.value;
    }
    rec.total = rec.ce + rec.cov;
    if (!std::isfinite(rec.total)) {
      dump_nonfinite(rec, batch);
      throw Error(ErrorKind::non_finite_loss, "loss became non-finite at iteration " + std::to_string(rec.iter));
    }
    rec.total = total_loss(rec.ce, rec.cov);

    Tensor grad_features(features.shape());
    for (auto& [h, out] : outputs) {
      HeadGrads g;
      if (h == active()) g.logits = ce.grads.front();
      for (std::size_t i = 0; i < tap_heads.size(); ++i)
        if (tap_heads[i] == h) {
          (model_.head(h).config().tap == HeadTap::block1 ? g.tap1 : g.tap2) = cov.grads[i];
        }
      grad_features += model_.backward_head(h, g);
    }
    if (plan_.loss_mode == LossMode::ce_plus_cov && cfg_.cov.tap == CovTap::backbone)
      grad_features += cov.grads.front();
    if (!cfg_.freeze_backbone) model_.backbone().backward(grad_features, true);

    optimizer_->step();
    log_.append(rec);
    return rec;
  }

  /// Trains the remaining epochs, checkpointing at every epoch end.
  void run() {
    log_.stamp("phase" + std::to_string(plan_.phase_index) + "_start");
    for (; epoch_ < plan_.epochs; ++epoch_) {
      for (std::size_t i = 0; i < iters_per_epoch_; ++i) step();
      if (cfg_.eval_every_epochs > 0 && (epoch_ + 1) % cfg_.eval_every_epochs == 0 && epoch_ + 1 < plan_.epochs)
        snapshot();
      if (!cfg_.checkpoint_dir.empty()) {
        TrainingState st = training_state();
        st.epoch = epoch_ + 1;
        save_checkpoint(checkpoint_path(), model_, task_states_, &st);
      }
    }
    model_.set_phase(std::max(model_.phase(), plan_.phase_index));
    if (!cfg_.checkpoint_dir.empty()) {
      TrainingState st = training_state();
      save_checkpoint(checkpoint_path(), model_, task_states_, &st);
    }
    log_.stamp("phase" + std::to_string(plan_.phase_index) + "_end");
  }

  std::filesystem::path checkpoint_path() const {
    return cfg_.checkpoint_dir / ("checkpoint_phase" + std::to_string(plan_.phase_index) + ".bin");
  }

  TrainingState training_state() {
    TrainingState st;
    st.phase_index = plan_.phase_index;
    st.global_iteration = global_iter_;
    st.optimizer_iterations = optimizer_->iterations();
    st.epoch = epoch_;
    st.sampler_rng = sampler_.rng_state();
    st.optimizer = optimizer_->kind();
    for (auto& [name, t] : optimizer_->state()) st.optimizer_tensors.emplace(name, *t);
    return st;
  }

  void restore(const TrainingState& st) {
    if (st.phase_index != plan_.phase_index || st.optimizer != optimizer_->kind())
      throw Error(ErrorKind::checkpoint_mismatch, "training state belongs to a different phase or optimizer");
    for (auto& [name, t] : optimizer_->state()) {
      const auto it = st.optimizer_tensors.find(name);
      if (it == st.optimizer_tensors.end() || it->second.shape() != t->shape())
        throw Error(ErrorKind::checkpoint_mismatch, "optimizer state lacks " + name);
      *t = it->second;
    }
    optimizer_->restore(st.optimizer_iterations);
    sampler_.set_rng_state(st.sampler_rng);
    global_iter_ = st.global_iteration;
    epoch_ = st.epoch;
  }

 private:
  const Tensor& tap_of(std::size_t h, const HeadOutput& out) const {
    return model_.head(h).config().tap == HeadTap::block1 ? out.tap1 : out.tap2;
  }

  void snapshot() {
    const DescriptorSource source{cfg_.ensemble, active()};
    const EmbeddingSet q = detail::extract_unchecked(model_, data_.query, source, loader_);
    const EmbeddingSet g = detail::extract_unchecked(model_, data_.gallery, source, loader_);
    const EvalReport r = rank(q, g, cfg_.rank);
    log_.append(EvalSnapshot{plan_.phase_index, data_.spec.name, r.rank1, r.rank20, r.map});
  }

  void dump_nonfinite(const IterationRecord& rec, const PkBatch& batch) const {
    if (cfg_.checkpoint_dir.empty()) return;
    nlohmann::json dump = RunLog::to_json(rec);
    dump["phase"] = plan_.phase_index;
    dump["task"] = data_.spec.name;
    dump["batch"] = nlohmann::json::array();
    for (const ImageRecord& r : batch.records) dump["batch"].push_back(r.path.string());
    std::ofstream(cfg_.checkpoint_dir / "nonfinite_dump.json") << dump.dump(2) << '\n';
  }

  MultiHeadModel& model_;
  PhasePlan plan_;
  const TaskData& data_;
  TrainConfig cfg_;
  ImageLoader& loader_;
  RunLog& log_;
  std::vector<TaskState> task_states_;
  std::uint64_t global_iter_;
  std::size_t epoch_ = 0;
  std::size_t iters_per_epoch_ = 1;
  PkSampler sampler_;
  std::unique_ptr<Optimizer> optimizer_;
};

inline RunLog train_phase(MultiHeadModel& model, const PhasePlan& plan, const TaskData& data, const TrainConfig& cfg,
                          ImageLoader& loader, std::vector<TaskState> task_states = {}) {
  RunLog log;
  PhaseTrainer trainer(model, plan, data, cfg, loader, log, std::move(task_states));
  trainer.run();
  return log;
}

inline std::unique_ptr<MultiHeadModel> build_model(const TrainConfig& cfg, const std::vector<TaskData>& tasks) {
  std::vector<HeadConfig> heads;
  const std::size_t channels = cfg.backbone.architecture == "resnet50" ? 2048 : cfg.backbone.tiny_channels;
  for (const TaskData& t : tasks) heads.push_back({channels, t.spec.num_classes, cfg.negative_slope, cfg.head_tap});
  auto model = std::make_unique<MultiHeadModel>(cfg.backbone, heads, cfg.seed);
  if (cfg.backbone.pretrained) {
    if (cfg.backbone.weights.empty())
      throw Error(ErrorKind::invalid_config, "pretrained backbone requested without a weights file");
    load_backbone_weights(*model, cfg.backbone.weights);
  }
  return model;
}

struct ResultRow {
  std::size_t phase = 0;
  std::string task;
  EvalReport report;
};

struct IncrementalResult {
  std::vector<ResultRow> rows;
  RunLog log;
  std::unique_ptr<MultiHeadModel> model;
};

/// Train task 1, evaluate it; for each later task k: train it with earlier
/// heads frozen, evaluate it, then re-evaluate every earlier task without
/// further training. Two tasks give three rows.
inline IncrementalResult run_incremental(const std::vector<TaskData>& tasks, const TrainConfig& cfg,
                                         const std::function<void(const ResultRow&)>& on_row = {},
                                         RunLog log = {}) {
  if (tasks.size() < 2) throw Error(ErrorKind::invalid_config, "incremental protocol needs at least 2 tasks");
  for (std::size_t i = 0; i < tasks.size(); ++i)
    if (tasks[i].spec.head_index != i)
      throw Error(ErrorKind::plan_mismatch, "task '" + tasks[i].spec.name + "' must use head " + std::to_string(i));
  IncrementalResult result;
  result.log = std::move(log);
  result.model = build_model(cfg, tasks);
  MultiHeadModel& model = *result.model;
  ImageLoader loader(cfg.input, cfg.image_cache);
  std::vector<TaskState> states;
  for (const TaskData& t : tasks) states.push_back(t.state());

  auto record = [&](std::size_t phase, const TaskData& task) {
    ResultRow row{phase, task.spec.name, evaluate_task(model, task, cfg, loader)};
    result.log.append(EvalSnapshot{phase, task.spec.name, row.report.rank1, row.report.rank20, row.report.map});
    if (on_row) on_row(row);
    result.rows.push_back(std::move(row));
  };

  std::uint64_t iter = 0;
  for (std::size_t k = 1; k <= tasks.size(); ++k) {
    const TaskData& task = tasks[k - 1];
    PhaseTrainer trainer(model, PhasePlan::make(k, task.spec, cfg.epochs), task, cfg, loader, result.log, states,
                         iter);
    trainer.run();
    iter = trainer.global_iteration();
    record(k, task);
    for (std::size_t earlier = 0; earlier + 1 < k; ++earlier) record(k, tasks[earlier]);
  }
  return result;
}

}  // namespace reid
