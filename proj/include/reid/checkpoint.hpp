#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "reid/datasets.hpp"
#include "reid/model.hpp"
#include "reid/schedule.hpp"

namespace reid {

// Archive layout: "REIDCKPT", u32 format version, u64 header length, JSON
// header, then every tensor as little-endian f64 in header order.
inline constexpr char kCheckpointMagic[8] = {'R', 'E', 'I', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TaskState {
  std::string name;
  std::size_t head_index = 0;
  LabelMap labels;
};

/// Resumable optimizer and sampler state for a phase in progress.
struct TrainingState {
  std::size_t phase_index = 0;
  std::uint64_t global_iteration = 0;
  std::uint64_t optimizer_iterations = 0;
  std::size_t epoch = 0;
  std::string sampler_rng;
  OptimizerKind optimizer = OptimizerKind::sgd_clr;
  std::map<std::string, Tensor> optimizer_tensors;
};

struct LoadedCheckpoint {
  std::unique_ptr<MultiHeadModel> model;
  std::vector<TaskState> tasks;
  std::optional<TrainingState> training;
};

namespace detail {

inline nlohmann::json to_json(const BackboneConfig& c) {
  return {{"architecture", c.architecture}, {"pretrained", c.pretrained}, {"weights", c.weights},
          {"tiny_channels", c.tiny_channels}};
}

inline BackboneConfig backbone_from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.architecture = j.at("architecture").get<std::string>();
  c.pretrained = j.at("pretrained").get<bool>();
  c.weights = j.at("weights").get<std::string>();
  c.tiny_channels = j.at("tiny_channels").get<std::size_t>();
  return c;
}

inline nlohmann::json to_json(const HeadConfig& c) {
  return {{"in_channels", c.in_channels}, {"num_classes", c.num_classes}, {"negative_slope", c.negative_slope},
          {"tap", c.tap == HeadTap::block1 ? "block1" : "block2"}};
}

inline HeadConfig head_from_json(const nlohmann::json& j) {
  HeadConfig c;
  c.in_channels = j.at("in_channels").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.negative_slope = j.at("negative_slope").get<double>();
  c.tap = j.at("tap").get<std::string>() == "block1" ? HeadTap::block1 : HeadTap::block2;
  return c;
}

inline void write_f64(std::ostream& os, const Tensor& t) {
  std::vector<char> buf(t.size() * 8);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(t[i]);
    for (int b = 0; b < 8; ++b) buf[i * 8 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline void read_f64(std::istream& is, Tensor& t) {
  std::vector<unsigned char> buf(t.size() * 8);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw Error(ErrorKind::checkpoint_mismatch, "truncated checkpoint payload");
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[i * 8 + static_cast<std::size_t>(b)]) << (8 * b);
    t[i] = std::bit_cast<double>(bits);
  }
}

template <typename T>
void write_pod_le(std::ostream& os, T v) {
  for (std::size_t b = 0; b < sizeof(T); ++b) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * b)) & 0xFF));
}

template <typename T>
T read_pod_le(std::istream& is) {
  std::uint64_t v = 0;
  for (std::size_t b = 0; b < sizeof(T); ++b) {
    const int c = is.get();
    if (c == EOF) throw Error(ErrorKind::bad_magic, "truncated checkpoint header");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * b);
  }
  return static_cast<T>(v);
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, MultiHeadModel& model,
                            const std::vector<TaskState>& tasks, const TrainingState* training = nullptr) {
  nlohmann::json header;
  header["backbone"] = detail::to_json(model.backbone().config());
  header["heads"] = nlohmann::json::array();
  for (std::size_t i = 0; i < model.num_heads(); ++i)
    header["heads"].push_back({{"config", detail::to_json(model.head(i).config())}, {"frozen", model.is_frozen(i)}});
  header["phase"] = model.phase();
  header["tasks"] = nlohmann::json::array();
  for (const TaskState& t : tasks)
    header["tasks"].push_back({{"name", t.name}, {"head_index", t.head_index}, {"label_ids", t.labels.person_ids()}});

  std::vector<std::pair<std::string, Tensor*>> tensors;
  model.visit([&](const std::string& name, Tensor& value, Tensor*) { tensors.emplace_back(name, &value); });
  if (training) {
    header["training"] = {{"phase_index", training->phase_index},
                          {"global_iteration", training->global_iteration},
                          {"optimizer_iterations", training->optimizer_iterations},
                          {"epoch", training->epoch},
                          {"sampler_rng", training->sampler_rng},
                          {"optimizer", to_string(training->optimizer)}};
    for (const auto& [name, t] : training->optimizer_tensors)
      tensors.emplace_back("optimizer." + name, const_cast<Tensor*>(&t));
  }
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : tensors) header["tensors"].push_back({{"name", name}, {"shape", t->shape()}});

  const std::string text = header.dump();
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw Error(ErrorKind::io_error, "cannot write " + tmp.string());
    os.write(kCheckpointMagic, 8);
    detail::write_pod_le<std::uint32_t>(os, kCheckpointVersion);
    detail::write_pod_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : tensors) detail::write_f64(os, *t);
    if (!os) throw Error(ErrorKind::io_error, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace detail {

struct RawCheckpoint {
  nlohmann::json header;
  std::map<std::string, Tensor> tensors;
};

inline RawCheckpoint read_raw_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::io_error, "cannot read " + path.string());
  char magic[8] = {};
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw Error(ErrorKind::bad_magic, path.string() + " is not a checkpoint");
  const auto version = read_pod_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::checkpoint_mismatch, "unsupported checkpoint version " + std::to_string(version));
  const auto len = read_pod_le<std::uint64_t>(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len)))
    throw Error(ErrorKind::checkpoint_mismatch, "truncated checkpoint header");
  RawCheckpoint raw;
  try {
    raw.header = nlohmann::json::parse(text);
    for (const auto& entry : raw.header.at("tensors")) {
      Tensor t(entry.at("shape").get<Shape>());
      read_f64(is, t);
      raw.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::checkpoint_mismatch, std::string("bad checkpoint header: ") + e.what());
  }
  return raw;
}

/// Copies tensors whose names start with `prefix` into the model, checking shapes.
inline void assign_tensors(MultiHeadModel& model, const std::map<std::string, Tensor>& tensors,
                           const std::string& prefix, bool require_all) {
  model.visit([&](const std::string& name, Tensor& value, Tensor*) {
    if (name.rfind(prefix, 0) != 0) return;
    const auto it = tensors.find(name);
    if (it == tensors.end()) {
      if (require_all) throw Error(ErrorKind::checkpoint_mismatch, "checkpoint lacks " + name);
      return;
    }
    if (it->second.shape() != value.shape())
      throw Error(ErrorKind::checkpoint_mismatch, name + ": checkpoint shape " + to_string(it->second.shape()) +
                                                      " != model shape " + to_string(value.shape()));
    value = it->second;
  });
}

}  // namespace detail

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  detail::RawCheckpoint raw = detail::read_raw_checkpoint(path);
  LoadedCheckpoint out;
  try {
    const auto& h = raw.header;
    BackboneConfig bb = detail::backbone_from_json(h.at("backbone"));
    bb.pretrained = false;  // weights come from this archive
    std::vector<HeadConfig> heads;
    for (const auto& e : h.at("heads")) heads.push_back(detail::head_from_json(e.at("config")));
    out.model = std::make_unique<MultiHeadModel>(bb, heads, 0);
    for (std::size_t i = 0; i < heads.size(); ++i) out.model->set_frozen(i, h.at("heads")[i].at("frozen").get<bool>());
    out.model->set_phase(h.at("phase").get<std::size_t>());
    for (const auto& t : h.at("tasks"))
      out.tasks.push_back({t.at("name").get<std::string>(), t.at("head_index").get<std::size_t>(),
                           LabelMap(t.at("label_ids").get<std::vector<int>>())});
    if (h.contains("training")) {
      const auto& tr = h.at("training");
      TrainingState st;
      st.phase_index = tr.at("phase_index").get<std::size_t>();
      st.global_iteration = tr.at("global_iteration").get<std::uint64_t>();
      st.optimizer_iterations = tr.at("optimizer_iterations").get<std::uint64_t>();
      st.epoch = tr.at("epoch").get<std::size_t>();
      st.sampler_rng = tr.at("sampler_rng").get<std::string>();
      st.optimizer = parse_optimizer_kind(tr.at("optimizer").get<std::string>());
      const std::string prefix = "optimizer.";
      for (auto& [name, t] : raw.tensors)
        if (name.rfind(prefix, 0) == 0) st.optimizer_tensors.emplace(name.substr(prefix.size()), t);
      out.training = std::move(st);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::checkpoint_mismatch, std::string("bad checkpoint header: ") + e.what());
  }
  detail::assign_tensors(*out.model, raw.tensors, "", true);
  return out;
}

/// Loads "backbone.*" tensors from an archive into an existing model.
inline void load_backbone_weights(MultiHeadModel& model, const std::filesystem::path& path) {
  const detail::RawCheckpoint raw = detail::read_raw_checkpoint(path);
  detail::assign_tensors(model, raw.tensors, "backbone.", true);
}

}  // namespace reid
