#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "reid/trainer.hpp"

namespace reid {

/// JSON Schema (draft-07 subset) every experiment config is checked against.
/// Also shipped as schema/experiment_config.schema.json.
inline constexpr const char* kConfigSchema = R"JSON({
  "$schema": "http://json-schema.org/draft-07/schema#",
  "title": "reid-incremental experiment config",
  "type": "object",
  "required": ["spec_version", "tasks"],
  "additionalProperties": false,
  "properties": {
    "spec_version": {"const": 1},
    "seed": {"type": "integer", "minimum": 0},
    "output_dir": {"type": "string"},
    "tasks": {
      "type": "array",
      "minItems": 1,
      "items": {
        "type": "object",
        "required": ["name", "root"],
        "additionalProperties": false,
        "properties": {
          "name": {"type": "string", "minLength": 1},
          "layout": {"enum": ["market", "duke"]},
          "root": {"type": "string", "minLength": 1},
          "num_classes": {"type": "integer", "minimum": 0}
        }
      }
    },
    "input": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "height": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1}
      }
    },
    "backbone": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "architecture": {"enum": ["resnet50", "tiny"]},
        "pretrained": {"type": "boolean"},
        "weights": {"type": "string"},
        "tiny_channels": {"type": "integer", "minimum": 2}
      }
    },
    "head": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "negative_slope": {"type": "number", "minimum": 0},
        "tap": {"enum": ["block1", "block2"]}
      }
    },
    "covariance_loss": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "lambda": {"type": "number", "minimum": 0},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "beta": {"type": "number"},
        "tap": {"enum": ["block2_active_head", "block2_both_heads", "backbone"]}
      }
    },
    "clr": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "base_lr": {"type": "number", "exclusiveMinimum": 0},
        "max_lr": {"type": "number", "exclusiveMinimum": 0},
        "step_size": {"type": "integer", "minimum": 0}
      }
    },
    "optimizer": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "kind": {"enum": ["sgd_clr", "adam"]},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_lr": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0}
      }
    },
    "batch": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "P": {"type": "integer", "minimum": 2},
        "K": {"type": "integer", "minimum": 1},
        "size": {"type": "integer", "minimum": 2}
      }
    },
    "epochs_per_phase": {"type": "integer", "minimum": 1},
    "eval": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "topk": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
        "ensemble": {"enum": ["none", "base_plus_head", "all_heads"]},
        "kernel": {"enum": ["reference", "native"]},
        "every_epochs": {"type": "integer", "minimum": 0}
      }
    },
    "train": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "backbone_lr_mult": {"type": "number", "exclusiveMinimum": 0},
        "freeze_backbone": {"type": "boolean"},
        "image_cache": {"type": "integer", "minimum": 0}
      }
    }
  }
}
)JSON";

namespace detail {

inline bool schema_type_matches(const nlohmann::json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "integer") return v.is_number_integer() || (v.is_number_float() && std::floor(v.get<double>()) == v.get<double>());
  if (type == "number") return v.is_number();
  if (type == "null") return v.is_null();
  return false;
}

inline void validate_node(const nlohmann::json& v, const nlohmann::json& schema, const std::string& path,
                          std::vector<std::string>& errors) {
  auto fail = [&](const std::string& msg) { errors.push_back((path.empty() ? "/" : path) + ": " + msg); };
  if (schema.contains("const") && v != schema["const"]) fail("must equal " + schema["const"].dump());
  if (schema.contains("enum")) {
    bool found = false;
    for (const auto& e : schema["enum"]) found = found || e == v;
    if (!found) fail("must be one of " + schema["enum"].dump());
  }
  if (schema.contains("type") && !schema_type_matches(v, schema["type"].get<std::string>())) {
    fail("must be of type " + schema["type"].get<std::string>());
    return;
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (schema.contains("minimum") && x < schema["minimum"].get<double>()) fail("below minimum");
    if (schema.contains("maximum") && x > schema["maximum"].get<double>()) fail("above maximum");
    if (schema.contains("exclusiveMinimum") && x <= schema["exclusiveMinimum"].get<double>()) fail("must exceed " + schema["exclusiveMinimum"].dump());
    if (schema.contains("exclusiveMaximum") && x >= schema["exclusiveMaximum"].get<double>()) fail("must be below " + schema["exclusiveMaximum"].dump());
  }
  if (v.is_string() && schema.contains("minLength") && v.get<std::string>().size() < schema["minLength"].get<std::size_t>())
    fail("too short");
  if (v.is_array()) {
    if (schema.contains("minItems") && v.size() < schema["minItems"].get<std::size_t>()) fail("too few items");
    if (schema.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i) validate_node(v[i], schema["items"], path + "/" + std::to_string(i), errors);
  }
  if (v.is_object()) {
    if (schema.contains("required"))
      for (const auto& r : schema["required"])
        if (!v.contains(r.get<std::string>())) fail("missing required property '" + r.get<std::string>() + "'");
    const nlohmann::json props = schema.value("properties", nlohmann::json::object());
    for (const auto& [key, value] : v.items()) {
      if (props.contains(key))
        validate_node(value, props[key], path + "/" + key, errors);
      else if (schema.contains("additionalProperties") && schema["additionalProperties"] == false)
        fail("unknown property '" + key + "'");
    }
  }
}

}  // namespace detail

/// Schema violations of `doc`, one message per problem; empty when valid.
inline std::vector<std::string> schema_errors(const nlohmann::json& doc) {
  static const nlohmann::json schema = nlohmann::json::parse(kConfigSchema);
  std::vector<std::string> errors;
  detail::validate_node(doc, schema, "", errors);
  return errors;
}

struct TaskConfig {
  std::string name;
  Layout layout = Layout::market;
  std::string root;
  std::size_t num_classes = 0;  // 0: taken from the dataset
};

struct ExperimentConfig {
  int spec_version = 1;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  std::vector<TaskConfig> tasks;
  InputSpec input{256, 128};
  BackboneConfig backbone{"resnet50", false, "", 16};
  double negative_slope = 0.01;
  HeadTap head_tap = HeadTap::block2;
  CovLossConfig cov;
  ClrConfig clr{1e-3, 6e-3, 0};
  OptimizerKind optimizer = OptimizerKind::sgd_clr;
  double momentum = 0.9;
  double adam_lr = 3e-4;
  double weight_decay = 5e-4;
  std::size_t p = 8;
  std::size_t k = 4;
  std::size_t epochs = 100;
  std::set<int> topk{1, 5, 10, 20};
  EnsembleMode ensemble = EnsembleMode::none;
  RankBackend kernel = RankBackend::reference;
  std::size_t eval_every_epochs = 0;
  double backbone_lr_mult = 1.0;
  bool freeze_backbone = false;
  std::size_t image_cache = 4096;

  std::size_t batch_size() const { return p * k; }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const TaskConfig& t : c.tasks)
    tasks.push_back({{"name", t.name}, {"layout", to_string(t.layout)}, {"root", t.root}, {"num_classes", t.num_classes}});
  return {
      {"spec_version", c.spec_version},
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"tasks", tasks},
      {"input", {{"height", c.input.height}, {"width", c.input.width}}},
      {"backbone", {{"architecture", c.backbone.architecture}, {"pretrained", c.backbone.pretrained},
                    {"weights", c.backbone.weights}, {"tiny_channels", c.backbone.tiny_channels}}},
      {"head", {{"negative_slope", c.negative_slope}, {"tap", c.head_tap == HeadTap::block1 ? "block1" : "block2"}}},
      {"covariance_loss", {{"lambda", c.cov.lambda}, {"alpha", c.cov.alpha}, {"beta", c.cov.beta},
                           {"tap", to_string(c.cov.tap)}}},
      {"clr", {{"base_lr", c.clr.base_lr}, {"max_lr", c.clr.max_lr}, {"step_size", c.clr.step_size}}},
      {"optimizer", {{"kind", to_string(c.optimizer)}, {"momentum", c.momentum}, {"adam_lr", c.adam_lr},
                     {"weight_decay", c.weight_decay}}},
      {"batch", {{"P", c.p}, {"K", c.k}, {"size", c.batch_size()}}},
      {"epochs_per_phase", c.epochs},
      {"eval", {{"topk", c.topk}, {"ensemble", to_string(c.ensemble)}, {"kernel", to_string(c.kernel)},
                {"every_epochs", c.eval_every_epochs}}},
      {"train", {{"backbone_lr_mult", c.backbone_lr_mult}, {"freeze_backbone", c.freeze_backbone},
                 {"image_cache", c.image_cache}}},
  };
}

/// Validates against the schema, then applies defaults and cross-field checks.
inline ExperimentConfig parse_config(const nlohmann::json& doc) {
  if (const auto errors = schema_errors(doc); !errors.empty()) {
    std::string msg = "config does not match schema:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw Error(ErrorKind::invalid_config, msg);
  }
  ExperimentConfig c;
  c.seed = doc.value("seed", c.seed);
  c.output_dir = doc.value("output_dir", c.output_dir);
  for (const auto& t : doc.at("tasks"))
    c.tasks.push_back({t.at("name").get<std::string>(), parse_layout(t.value("layout", "market")),
                       t.at("root").get<std::string>(), t.value("num_classes", std::size_t{0})});
  const auto section = [&doc](const char* name) { return doc.value(name, nlohmann::json::object()); };
  const auto in = section("input");
  c.input.height = in.value("height", c.input.height);
  c.input.width = in.value("width", c.input.width);
  const auto bb = section("backbone");
  c.backbone.architecture = bb.value("architecture", c.backbone.architecture);
  c.backbone.pretrained = bb.value("pretrained", c.backbone.pretrained);
  c.backbone.weights = bb.value("weights", c.backbone.weights);
  c.backbone.tiny_channels = bb.value("tiny_channels", c.backbone.tiny_channels);
  const auto hd = section("head");
  c.negative_slope = hd.value("negative_slope", c.negative_slope);
  c.head_tap = hd.value("tap", std::string("block2")) == "block1" ? HeadTap::block1 : HeadTap::block2;
  const auto cv = section("covariance_loss");
  c.cov.lambda = cv.value("lambda", c.cov.lambda);
  c.cov.alpha = cv.value("alpha", c.cov.alpha);
  c.cov.beta = cv.value("beta", c.cov.beta);
  c.cov.tap = parse_cov_tap(cv.value("tap", std::string(to_string(c.cov.tap))));
  const auto clr = section("clr");
  c.clr.base_lr = clr.value("base_lr", c.clr.base_lr);
  c.clr.max_lr = clr.value("max_lr", c.clr.max_lr);
  c.clr.step_size = clr.value("step_size", c.clr.step_size);
  const auto opt = section("optimizer");
  c.optimizer = parse_optimizer_kind(opt.value("kind", std::string("sgd_clr")));
  c.momentum = opt.value("momentum", c.momentum);
  c.adam_lr = opt.value("adam_lr", c.adam_lr);
  c.weight_decay = opt.value("weight_decay", c.weight_decay);
  const auto batch = section("batch");
  c.p = batch.value("P", c.p);
  c.k = batch.value("K", c.k);
  if (batch.contains("size") && batch["size"].get<std::size_t>() != c.batch_size())
    throw Error(ErrorKind::invalid_config, "batch.size " + batch["size"].dump() + " != P*K = " +
                                               std::to_string(c.batch_size()));
  c.epochs = doc.value("epochs_per_phase", c.epochs);
  const auto ev = section("eval");
  if (ev.contains("topk")) c.topk = ev["topk"].get<std::set<int>>();
  c.ensemble = parse_ensemble_mode(ev.value("ensemble", std::string("none")));
  c.kernel = parse_rank_backend(ev.value("kernel", std::string("reference")));
  c.eval_every_epochs = ev.value("every_epochs", c.eval_every_epochs);
  const auto tr = section("train");
  c.backbone_lr_mult = tr.value("backbone_lr_mult", c.backbone_lr_mult);
  c.freeze_backbone = tr.value("freeze_backbone", c.freeze_backbone);
  c.image_cache = tr.value("image_cache", c.image_cache);

  if (c.clr.max_lr <= c.clr.base_lr) throw Error(ErrorKind::invalid_config, "clr.max_lr must exceed clr.base_lr");
  c.cov.validate();
  std::set<std::string> names;
  for (const TaskConfig& t : c.tasks)
    if (!names.insert(t.name).second) throw Error(ErrorKind::invalid_config, "duplicate task name '" + t.name + "'");
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::invalid_config, "cannot read config " + path.string());
  nlohmann::json doc;
  try {
    is >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::invalid_config, path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

inline TrainConfig to_train_config(const ExperimentConfig& c) {
  TrainConfig t;
  t.backbone = c.backbone;
  t.negative_slope = c.negative_slope;
  t.head_tap = c.head_tap;
  t.input = c.input;
  t.cov = c.cov;
  t.optimizer.kind = c.optimizer;
  t.optimizer.clr = c.clr;
  t.auto_step_size = c.clr.step_size == 0;
  if (t.auto_step_size) t.optimizer.clr.step_size = 1;
  t.optimizer.momentum = c.momentum;
  t.optimizer.adam_lr = c.adam_lr;
  t.optimizer.adam_weight_decay = c.weight_decay;
  t.p = c.p;
  t.k = c.k;
  t.epochs = c.epochs;
  t.seed = c.seed;
  t.backbone_lr_mult = c.backbone_lr_mult;
  t.freeze_backbone = c.freeze_backbone;
  t.ensemble = c.ensemble;
  t.rank.topk = c.topk;
  t.rank.backend = c.kernel;
  t.eval_every_epochs = c.eval_every_epochs;
  t.image_cache = c.image_cache;
  return t;
}

inline std::vector<TaskData> load_tasks(const ExperimentConfig& c) {
  std::vector<TaskData> out;
  for (std::size_t i = 0; i < c.tasks.size(); ++i) {
    const TaskConfig& t = c.tasks[i];
    out.push_back(TaskData::load({t.name, t.num_classes, t.root, i, t.layout}));
  }
  return out;
}

}  // namespace reid
