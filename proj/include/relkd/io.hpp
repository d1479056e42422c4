#pragma once

// File formats: dual-encoder checkpoints, the per-epoch metrics CSV and
// atomic whole-file writes.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relkd/encoders.hpp"
#include "relkd/error.hpp"
#include "relkd/losses.hpp"
#include "relkd/trainer.hpp"

namespace relkd {

// Writes to a sibling temporary file, then renames over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + tmp + "' for writing");
    out << contents;
    if (!out) throw DataError("write to '" + tmp + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- checkpoints ----------------------------------------------------------

struct CheckpointMeta {
  std::string method;
  std::uint64_t seed = 0;
  std::size_t epochs_trained = 0;
};

struct Checkpoint {
  DualEncoder model;
  TemperatureSet temperatures;
  CheckpointMeta meta;
};

inline nlohmann::ordered_json checkpoint_to_json(const Checkpoint& c) {
  nlohmann::ordered_json j;
  j["network"] = to_string(c.model.network);
  j["image_encoder"] = encoder_to_json(c.model.image);
  j["text_encoder"] = encoder_to_json(c.model.text);
  const auto& t = c.temperatures;
  // Learnable temperatures are stored as log(1/tau).
  j["temperatures"] = {{"teacher_tau", t.teacher_tau},
                       {"task", t.task.value.item()},
                       {"student", t.student.value.item()},
                       {"image", t.image.value.item()},
                       {"text", t.text.value.item()},
                       {"cross", t.cross.value.item()}};
  j["meta"] = {{"method", c.meta.method}, {"seed", c.meta.seed}, {"epochs_trained", c.meta.epochs_trained}};
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::ordered_json& j) {
  try {
    Checkpoint c;
    const auto net = j.at("network").get<std::string>();
    if (net != "teacher" && net != "student") throw DataError("checkpoint: unknown network '" + net + "'");
    c.model.network = net == "teacher" ? Network::teacher : Network::student;
    c.model.image = encoder_from_json(j.at("image_encoder"), net + ".image");
    c.model.text = encoder_from_json(j.at("text_encoder"), net + ".text");
    const auto& t = j.at("temperatures");
    c.temperatures = TemperatureSet::initial();
    c.temperatures.teacher_tau = t.at("teacher_tau").get<double>();
    c.temperatures.task.value = Tensor::scalar(t.at("task").get<double>());
    c.temperatures.student.value = Tensor::scalar(t.at("student").get<double>());
    c.temperatures.image.value = Tensor::scalar(t.at("image").get<double>());
    c.temperatures.text.value = Tensor::scalar(t.at("text").get<double>());
    c.temperatures.cross.value = Tensor::scalar(t.at("cross").get<double>());
    if (j.contains("meta")) {
      const auto& m = j.at("meta");
      c.meta.method = m.value("method", std::string{});
      c.meta.seed = m.value("seed", std::uint64_t{0});
      c.meta.epochs_trained = m.value("epochs_trained", std::size_t{0});
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file_atomic(path, checkpoint_to_json(c).dump(1) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return checkpoint_from_json(nlohmann::ordered_json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint '" + path.string() + "': " + e.what());
  }
}

// A teacher checkpoint keeps its trained task temperature in teacher_tau.
inline Checkpoint teacher_checkpoint(const TeacherModel& t, std::uint64_t seed, std::size_t epochs) {
  Checkpoint c{t.encoder, TemperatureSet::initial(t.tau, t.tau), {"teacher", seed, epochs}};
  return c;
}

inline TeacherModel teacher_from_checkpoint(const Checkpoint& c) {
  if (c.model.network != Network::teacher) throw DataError("checkpoint does not hold a teacher");
  return {c.model, c.temperatures.teacher_tau};
}

// ---- metrics CSV ----------------------------------------------------------

inline const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {
      "run_id",     "method",     "seed",       "epoch",      "loss_task",  "loss_fd",
      "loss_icl",   "loss_hrd",   "loss_vrd_ce", "loss_vrd_kl", "loss_xrd",  "loss_total",
      "val_i2t_r1", "val_t2i_r1", "val_i2t_r5", "val_t2i_r5", "zs_acc",     "pos_mean",
      "neg_mean",   "gap",        "mi_bound_image", "mi_bound_text"};
  return cols;
}

// Shortest text that reads back as the same double.
inline std::string format_number(double v) {
  char buf[40];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : std::string{}; }

inline std::string metrics_header() {
  std::string out;
  for (const auto& c : metrics_columns()) out += (out.empty() ? "" : ",") + c;
  return out + "\n";
}

inline std::string metrics_row(const MetricRecord& r) {
  const auto& l = r.losses;
  const auto& e = r.eval;
  const std::vector<std::string> cells = {
      r.run_id,
      r.method,
      std::to_string(r.seed),
      std::to_string(r.epoch),
      format_number(l.task),
      format_optional(l.fd),
      format_optional(l.icl),
      format_optional(l.hrd),
      format_optional(l.vrd_ce),
      format_optional(l.vrd_kl),
      format_optional(l.xrd),
      format_number(l.total),
      format_number(e.retrieval.i2t_r1),
      format_number(e.retrieval.t2i_r1),
      format_number(e.retrieval.i2t_r5),
      format_number(e.retrieval.t2i_r5),
      format_number(e.zs_acc),
      format_number(e.pos_mean),
      format_number(e.neg_mean),
      format_number(e.gap),
      format_optional(e.mi_bound_image),
      format_optional(e.mi_bound_text),
  };
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
  return out + "\n";
}

inline std::string metrics_csv(const std::vector<MetricRecord>& records) {
  std::string out = metrics_header();
  for (const auto& r : records) out += metrics_row(r);
  return out;
}

}  // namespace relkd
