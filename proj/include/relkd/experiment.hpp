#pragma once

// Glue shared by the command-line tool and the acceptance runner: resolving
// the data, obtaining a teacher, and the four ablation recipes.

#include <string>
#include <utility>
#include <vector>

#include "relkd/config.hpp"
#include "relkd/io.hpp"
#include "relkd/synth_data.hpp"
#include "relkd/trainer.hpp"

namespace relkd {

// Splits for a run: a saved JSONL dataset keeps its stored split column,
// otherwise data is generated and split from the run seed.
inline DatasetSplits load_run_data(const RunConfig& cfg) {
  if (!cfg.dataset.empty()) {
    const PairedDataset all = load(cfg.dataset);
    DatasetSplits s{all.subset(Split::train), all.subset(Split::val), all.subset(Split::test)};
    if (s.train.size() == 0 || s.val.size() == 0) throw DataError("dataset '" + cfg.dataset + "' lacks train/val rows");
    return s;
  }
  return split(generate(cfg.data_spec()), cfg.split, derive_seed(cfg.seed, seed_stream::data_split));
}

inline TeacherResult train_run_teacher(const RunConfig& cfg, const DatasetSplits& data) {
  return train_teacher(cfg.teacher_train_config(), cfg.teacher_shape(), data.train);
}

// Loads the configured teacher checkpoint, or trains one when none is set.
inline TeacherModel obtain_teacher(const RunConfig& cfg, const DatasetSplits& data) {
  if (!cfg.teacher_checkpoint.empty()) return teacher_from_checkpoint(load_checkpoint(cfg.teacher_checkpoint));
  return train_run_teacher(cfg, data).model;
}

struct AblationRecipe {
  std::string method;
  LossSet enabled;
};

// Row order of the ablation table.
inline const std::vector<AblationRecipe>& ablation_recipes() {
  static const std::vector<AblationRecipe> recipes = {
      {"KD", LossSet::clip_kd()},
      {"KD+XRD", LossSet{true, true, true, false, true}},
      {"KD+VRD", LossSet{true, true, true, true, false}},
      {"RD", LossSet::clip_rd()},
  };
  return recipes;
}

inline RunConfig with_recipe(RunConfig cfg, const AblationRecipe& r) {
  cfg.train.enabled = r.enabled;
  cfg.method = r.method;
  return cfg;
}

inline DistillResult run_distill(const RunConfig& cfg, const TeacherModel& teacher, const DatasetSplits& data) {
  return distill(cfg.distill_config(), teacher, data.train, data.val);
}

inline Checkpoint student_checkpoint(const DistillResult& r, const RunConfig& cfg) {
  return {r.student, r.temperatures, {cfg.distill_config().method, cfg.seed, cfg.train.epochs}};
}

}  // namespace relkd
