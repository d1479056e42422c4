#pragma once

// Run configuration file (JSON). Every section is optional; missing keys take
// the desk-scale defaults, unknown keys are rejected so typos surface early.

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "relkd/error.hpp"
#include "relkd/losses.hpp"
#include "relkd/synth_data.hpp"
#include "relkd/trainer.hpp"

namespace relkd {

struct RunConfig {
  std::string dataset;  // JSONL path; empty means generate from `data`
  SyntheticSpec data;
  bool data_seed_explicit = false;  // otherwise the run seed seeds the data too
  SplitFractions split;
  std::uint64_t seed = 0;
  std::size_t embed_dim = 32;
  std::size_t teacher_hidden = 128;
  std::string teacher_checkpoint;
  std::size_t student_hidden = 16;
  TrainConfig train;
  TemperatureConfig temperatures;
  std::string method;
  std::string output_dir;

  ModelShape teacher_shape() const { return {teacher_hidden, embed_dim}; }
  ModelShape student_shape() const { return {student_hidden, embed_dim}; }

  SyntheticSpec data_spec() const {
    SyntheticSpec s = data;
    if (!data_seed_explicit) s.seed = seed;
    return s;
  }

  DistillConfig distill_config() const {
    DistillConfig d;
    d.train = train;
    d.train.seed = seed;
    d.student = student_shape();
    d.temperatures = temperatures;
    d.method = method.empty() ? method_name(train.enabled) : method;
    d.run_id = d.method + "-s" + std::to_string(seed);
    return d;
  }

  TrainConfig teacher_train_config() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }

  // Names matching the ablation recipes, otherwise the enabled list.
  static std::string method_name(const LossSet& s) {
    if (s.empty()) return "task";
    if (s == LossSet::clip_kd()) return "KD";
    if (s == LossSet{true, true, true, false, true}) return "KD+XRD";
    if (s == LossSet{true, true, true, true, false}) return "KD+VRD";
    if (s == LossSet::clip_rd()) return "RD";
    std::string out;
    for (const auto& n : s.names()) out += (out.empty() ? "" : "+") + n;
    return out;
  }
};

namespace detail {

using json = nlohmann::ordered_json;

inline void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline TemperatureInit read_temperature(const json& j, const std::string& name, TemperatureInit def) {
  if (!j.contains(name)) return def;
  const auto& t = j.at(name);
  if (t.is_number()) {
    def.tau = t.get<double>();
    return def;
  }
  reject_unknown(t, {"init", "learnable"}, "loss.temperatures." + name);
  read(t, "init", def.tau);
  read(t, "learnable", def.learnable);
  if (!(def.tau > 0.0)) throw ConfigError("loss.temperatures." + name + ".init must be positive");
  return def;
}

inline json temperature_json(const TemperatureInit& t) {
  json j;
  j["init"] = t.tau;
  j["learnable"] = t.learnable;
  return j;
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::ordered_json& j) {
  using detail::read;
  using detail::reject_unknown;
  RunConfig c;
  try {
    reject_unknown(j, {"dataset", "data", "split", "seed", "embed_dim", "teacher", "student", "train", "loss",
                       "method", "output_dir"},
                   "config");
    read(j, "dataset", c.dataset);
    read(j, "seed", c.seed);
    read(j, "embed_dim", c.embed_dim);
    read(j, "method", c.method);
    read(j, "output_dir", c.output_dir);
    if (j.contains("data")) {
      const auto& d = j.at("data");
      reject_unknown(d, {"latent_dim", "image_dim", "text_dim", "n_concepts", "samples_per_concept", "noise_sigma", "seed"},
                     "data");
      read(d, "latent_dim", c.data.latent_dim);
      read(d, "image_dim", c.data.image_dim);
      read(d, "text_dim", c.data.text_dim);
      read(d, "n_concepts", c.data.n_concepts);
      read(d, "samples_per_concept", c.data.samples_per_concept);
      read(d, "noise_sigma", c.data.noise_sigma);
      if (d.contains("seed") && !d.at("seed").is_null()) {
        c.data.seed = d.at("seed").get<std::uint64_t>();
        c.data_seed_explicit = true;
      }
    }
    if (j.contains("split")) {
      const auto& s = j.at("split");
      reject_unknown(s, {"train", "val", "test"}, "split");
      read(s, "train", c.split.train);
      read(s, "val", c.split.val);
      read(s, "test", c.split.test);
    }
    if (j.contains("teacher")) {
      const auto& t = j.at("teacher");
      reject_unknown(t, {"hidden", "checkpoint"}, "teacher");
      read(t, "hidden", c.teacher_hidden);
      read(t, "checkpoint", c.teacher_checkpoint);
    }
    if (j.contains("student")) {
      const auto& s = j.at("student");
      reject_unknown(s, {"hidden"}, "student");
      read(s, "hidden", c.student_hidden);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      reject_unknown(t, {"epochs", "warmup_iters", "batch_size", "peak_lr", "weight_decay", "betas", "eps"}, "train");
      read(t, "epochs", c.train.epochs);
      read(t, "warmup_iters", c.train.warmup_iters);
      read(t, "batch_size", c.train.batch_size);
      read(t, "peak_lr", c.train.peak_lr);
      read(t, "weight_decay", c.train.weight_decay);
      read(t, "eps", c.train.eps);
      if (t.contains("betas")) {
        const auto b = t.at("betas").get<std::vector<double>>();
        if (b.size() != 2) throw ConfigError("train.betas must have two entries");
        c.train.beta1 = b[0];
        c.train.beta2 = b[1];
      }
    }
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      reject_unknown(l, {"enabled", "alpha", "beta", "lambda", "temperatures"}, "loss");
      if (l.contains("enabled")) {
        std::string joined;
        for (const auto& n : l.at("enabled")) joined += n.get<std::string>() + ",";
        c.train.enabled = LossSet::parse(joined);
      }
      read(l, "alpha", c.train.weights.alpha);
      read(l, "beta", c.train.weights.beta);
      read(l, "lambda", c.train.weights.lambda);
      if (l.contains("temperatures")) {
        const auto& t = l.at("temperatures");
        reject_unknown(t, {"task", "student", "image", "text", "cross"}, "loss.temperatures");
        auto& tc = c.temperatures;
        tc.task = detail::read_temperature(t, "task", tc.task);
        tc.student = detail::read_temperature(t, "student", tc.student);
        tc.image = detail::read_temperature(t, "image", tc.image);
        tc.text = detail::read_temperature(t, "text", tc.text);
        tc.cross = detail::read_temperature(t, "cross", tc.cross);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.train.weights.validate();
  c.data.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return parse_config(nlohmann::ordered_json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
}

// Fully resolved snapshot; parse_config(to_json(c)) reproduces `c`.
inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["dataset"] = c.dataset;
  j["data"] = {{"latent_dim", c.data.latent_dim},
               {"image_dim", c.data.image_dim},
               {"text_dim", c.data.text_dim},
               {"n_concepts", c.data.n_concepts},
               {"samples_per_concept", c.data.samples_per_concept},
               {"noise_sigma", c.data.noise_sigma}};
  if (c.data_seed_explicit) j["data"]["seed"] = c.data.seed;
  j["split"] = {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}};
  j["seed"] = c.seed;
  j["embed_dim"] = c.embed_dim;
  j["teacher"] = {{"hidden", c.teacher_hidden}, {"checkpoint", c.teacher_checkpoint}};
  j["student"] = {{"hidden", c.student_hidden}};
  j["train"] = {{"epochs", c.train.epochs},
                {"warmup_iters", c.train.warmup_iters},
                {"batch_size", c.train.batch_size},
                {"peak_lr", c.train.peak_lr},
                {"weight_decay", c.train.weight_decay},
                {"betas", {c.train.beta1, c.train.beta2}},
                {"eps", c.train.eps}};
  nlohmann::ordered_json loss;
  loss["enabled"] = c.train.enabled.names();
  loss["alpha"] = c.train.weights.alpha;
  loss["beta"] = c.train.weights.beta;
  loss["lambda"] = c.train.weights.lambda;
  loss["temperatures"] = {{"task", detail::temperature_json(c.temperatures.task)},
                          {"student", detail::temperature_json(c.temperatures.student)},
                          {"image", detail::temperature_json(c.temperatures.image)},
                          {"text", detail::temperature_json(c.temperatures.text)},
                          {"cross", detail::temperature_json(c.temperatures.cross)}};
  j["loss"] = std::move(loss);
  j["method"] = c.method;
  j["output_dir"] = c.output_dir;
  return j;
}

}  // namespace relkd
