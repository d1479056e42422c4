// relkd: command-line driver for data generation, teacher training,
// distillation, ablations, evaluation and diagnostics.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "relkd/config.hpp"
#include "relkd/experiment.hpp"
#include "relkd/gradient_suite.hpp"
#include "relkd/io.hpp"
#include "relkd/metrics.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace relkd;

namespace {

constexpr const char* kVersion = "relkd 0.1.0";
constexpr double kGradTolerance = 1e-4;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

fs::path output_root(const Common& c, const RunConfig& cfg) {
  if (!c.out.empty()) return c.out;
  if (const char* env = std::getenv("RELKD_OUT"); env && *env) return env;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  return "runs";
}

class Manifest {
 public:
  Manifest(std::string command, const RunConfig& cfg, fs::path root)
      : command_(std::move(command)), cfg_(cfg), root_(std::move(root)), start_(std::chrono::steady_clock::now()) {}

  void add(const std::string& role, const fs::path& p) { artifacts_.emplace_back(role, p); }

  void write() const {
    json j;
    j["command"] = command_;
    j["version"] = kVersion;
    j["seed"] = cfg_.seed;
    j["config"] = to_json(cfg_);
    json arts = json::object();
    for (const auto& [role, p] : artifacts_) {
      if (!fs::exists(p)) throw ContractError("manifest names missing artifact '" + p.string() + "'");
      arts[role] = fs::relative(p, root_).generic_string();
    }
    j["artifacts"] = arts;
    j["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_file_atomic(root_ / "manifest.json", j.dump(2) + "\n");
  }

 private:
  std::string command_;
  RunConfig cfg_;
  fs::path root_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::pair<std::string, fs::path>> artifacts_;
};

std::string fixed(double v, int prec = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

std::string aligned_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      out << (i ? "  " : "") << (i ? std::right : std::left) << std::setw(static_cast<int>(width[i])) << cells[i];
    }
    out << "\n";
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out.str();
}

const std::vector<std::string>& eval_columns() {
  static const std::vector<std::string> cols = {"val_i2t_r1", "val_t2i_r1", "val_i2t_r5", "val_t2i_r5", "zs_acc",
                                                "pos_mean",   "neg_mean",   "gap",        "mi_bound_image",
                                                "mi_bound_text"};
  return cols;
}

std::vector<std::optional<double>> eval_values(const EvalMetrics& e) {
  return {e.retrieval.i2t_r1, e.retrieval.t2i_r1, e.retrieval.i2t_r5, e.retrieval.t2i_r5, e.zs_acc,
          e.pos_mean,         e.neg_mean,         e.gap,              e.mi_bound_image,   e.mi_bound_text};
}

std::string eval_table(const std::string& label, const EvalMetrics& e) {
  std::vector<std::string> header = {"run"};
  for (const auto& c : eval_columns()) header.push_back(c);
  std::vector<std::string> row = {label};
  for (const auto& v : eval_values(e)) row.push_back(v ? fixed(*v) : "-");
  return aligned_table(header, {row});
}

// ---- commands -------------------------------------------------------------

int cmd_gen_data(const Common& c) {
  RunConfig cfg = resolve_config(c);
  const fs::path root = output_root(c, cfg);
  Manifest manifest("gen-data", cfg, root);
  const DatasetSplits s = split(generate(cfg.data_spec()), cfg.split, derive_seed(cfg.seed, seed_stream::data_split));
  const fs::path path = root / "dataset.jsonl";
  fs::create_directories(root);
  save(merge(s), (path.string() + ".tmp"));
  fs::rename(path.string() + ".tmp", path);
  manifest.add("dataset", path);
  manifest.write();
  std::cout << "wrote " << path.string() << " (train " << s.train.size() << ", val " << s.val.size() << ", test "
            << s.test.size() << ")\n";
  return 0;
}

int cmd_train_teacher(const Common& c) {
  RunConfig cfg = resolve_config(c);
  const fs::path root = output_root(c, cfg);
  Manifest manifest("train-teacher", cfg, root);
  const DatasetSplits data = load_run_data(cfg);
  const TeacherResult t = train_run_teacher(cfg, data);

  const fs::path ckpt = root / "teacher.json";
  save_checkpoint(ckpt, teacher_checkpoint(t.model, cfg.seed, cfg.train.epochs));

  std::string losses = "epoch,loss_task\n";
  for (std::size_t e = 0; e < t.epoch_losses.size(); ++e) {
    losses += std::to_string(e + 1) + "," + format_number(t.epoch_losses[e]) + "\n";
  }
  const fs::path loss_path = root / "teacher_losses.csv";
  write_file_atomic(loss_path, losses);

  MetricRecord r;
  r.run_id = "teacher-s" + std::to_string(cfg.seed);
  r.method = "teacher";
  r.seed = cfg.seed;
  r.epoch = cfg.train.epochs;
  r.losses.task = r.losses.total = t.epoch_losses.empty() ? 0.0 : t.epoch_losses.back();
  const TemperatureSet temps = TemperatureSet::initial(t.model.tau, t.model.tau);
  r.eval = evaluate_model(t.model.encoder, temps, nullptr, data.train, data.val, cfg.train.batch_size);
  const fs::path metrics = root / "metrics.csv";
  write_file_atomic(metrics, metrics_csv({r}));

  manifest.add("checkpoint", ckpt);
  manifest.add("losses", loss_path);
  manifest.add("metrics", metrics);
  manifest.write();
  std::cout << "teacher tau " << fixed(t.model.tau) << "\n" << eval_table(r.run_id, r.eval);
  return 0;
}

int cmd_distill(const Common& c, const std::string& teacher_path) {
  RunConfig cfg = resolve_config(c);
  if (!teacher_path.empty()) cfg.teacher_checkpoint = teacher_path;
  const fs::path root = output_root(c, cfg);
  Manifest manifest("distill", cfg, root);
  const DatasetSplits data = load_run_data(cfg);

  TeacherModel teacher;
  if (cfg.teacher_checkpoint.empty()) {
    teacher = train_run_teacher(cfg, data).model;
    const fs::path tpath = root / "teacher.json";
    save_checkpoint(tpath, teacher_checkpoint(teacher, cfg.seed, cfg.train.epochs));
    manifest.add("teacher", tpath);
  } else {
    teacher = obtain_teacher(cfg, data);
  }

  const DistillResult r = run_distill(cfg, teacher, data);
  const fs::path ckpt = root / "student.json";
  save_checkpoint(ckpt, student_checkpoint(r, cfg));
  const fs::path metrics = root / "metrics.csv";
  write_file_atomic(metrics, metrics_csv(r.records));
  manifest.add("checkpoint", ckpt);
  manifest.add("metrics", metrics);
  manifest.write();
  const MetricRecord& last = r.records.back();
  std::cout << eval_table(last.run_id, last.eval);
  return 0;
}

int cmd_ablate(const Common& c, const std::string& seeds_arg, const std::string& teacher_path) {
  RunConfig base = resolve_config(c);
  if (!teacher_path.empty()) base.teacher_checkpoint = teacher_path;
  const fs::path root = output_root(c, base);
  Manifest manifest("ablate", base, root);

  std::vector<std::uint64_t> seeds;
  if (seeds_arg.empty()) {
    seeds.push_back(base.seed);
  } else {
    std::stringstream ss(seeds_arg);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        std::size_t used = 0;
        seeds.push_back(std::stoull(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ConfigError("--seeds: '" + tok + "' is not a non-negative integer");
      }
    }
    if (seeds.empty()) throw ConfigError("--seeds: empty list");
  }

  const auto& recipes = ablation_recipes();
  std::vector<MetricRecord> all;
  std::map<std::string, std::vector<EvalMetrics>> finals;
  for (std::uint64_t seed : seeds) {
    RunConfig cfg = base;
    cfg.seed = seed;
    const DatasetSplits data = load_run_data(cfg);
    const TeacherModel teacher = obtain_teacher(cfg, data);
    for (const auto& recipe : recipes) {
      const RunConfig run_cfg = with_recipe(cfg, recipe);
      const DistillResult r = run_distill(run_cfg, teacher, data);
      const fs::path dir = root / (recipe.method + "-s" + std::to_string(seed));
      save_checkpoint(dir / "student.json", student_checkpoint(r, run_cfg));
      write_file_atomic(dir / "metrics.csv", metrics_csv(r.records));
      manifest.add(recipe.method + "-s" + std::to_string(seed), dir / "metrics.csv");
      finals[recipe.method].push_back(r.records.back().eval);
      all.insert(all.end(), r.records.begin(), r.records.end());
      std::cerr << recipe.method << " seed " << seed << " done\n";
    }
  }

  std::vector<std::string> header = {"method", "n_seeds"};
  for (const auto& col : eval_columns()) header.push_back(col);
  std::string csv;
  for (std::size_t i = 0; i < header.size(); ++i) csv += (i ? "," : "") + header[i];
  csv += "\n";
  std::vector<std::vector<std::string>> rows;
  for (const auto& recipe : recipes) {
    const auto& evals = finals[recipe.method];
    std::vector<std::optional<double>> mean(eval_columns().size(), 0.0);
    for (const auto& e : evals) {
      const auto v = eval_values(e);
      for (std::size_t k = 0; k < v.size(); ++k) {
        if (v[k] && mean[k]) *mean[k] += *v[k] / static_cast<double>(evals.size());
        else mean[k].reset();
      }
    }
    std::vector<std::string> row = {recipe.method, std::to_string(evals.size())};
    std::vector<std::string> pretty = row;
    for (const auto& m : mean) {
      row.push_back(format_optional(m));
      pretty.push_back(m ? fixed(*m) : "-");
    }
    for (std::size_t i = 0; i < row.size(); ++i) csv += (i ? "," : "") + row[i];
    csv += "\n";
    rows.push_back(pretty);
  }
  const std::string table = aligned_table(header, rows);
  write_file_atomic(root / "ablation.csv", csv);
  write_file_atomic(root / "ablation.txt", table);
  write_file_atomic(root / "metrics.csv", metrics_csv(all));
  manifest.add("table_csv", root / "ablation.csv");
  manifest.add("table_txt", root / "ablation.txt");
  manifest.add("metrics", root / "metrics.csv");
  manifest.write();
  std::cout << table;
  return 0;
}

struct LoadedRun {
  RunConfig cfg;
  DatasetSplits data;
  Checkpoint ckpt;
  std::optional<TeacherModel> teacher;
};

LoadedRun load_run(const Common& c, const std::string& checkpoint, const std::string& teacher_path) {
  LoadedRun run{resolve_config(c), {}, load_checkpoint(checkpoint), std::nullopt};
  if (!teacher_path.empty()) run.cfg.teacher_checkpoint = teacher_path;
  run.data = load_run_data(run.cfg);
  if (!run.cfg.teacher_checkpoint.empty()) {
    run.teacher = teacher_from_checkpoint(load_checkpoint(run.cfg.teacher_checkpoint));
  }
  return run;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& teacher_path) {
  LoadedRun run = load_run(c, checkpoint, teacher_path);
  const fs::path root = output_root(c, run.cfg);
  Manifest manifest("eval", run.cfg, root);
  const DualEncoder* teacher = run.teacher ? &run.teacher->encoder : nullptr;
  const EvalMetrics e =
      evaluate_model(run.ckpt.model, run.ckpt.temperatures, teacher, run.data.train, run.data.val,
                     run.cfg.train.batch_size);

  const std::string run_id = run.ckpt.meta.method + "-s" + std::to_string(run.ckpt.meta.seed);
  std::string csv = "run_id,method,seed,epoch";
  for (const auto& col : eval_columns()) csv += "," + col;
  csv += "\n" + run_id + "," + run.ckpt.meta.method + "," + std::to_string(run.ckpt.meta.seed) + "," +
         std::to_string(run.ckpt.meta.epochs_trained);
  for (const auto& v : eval_values(e)) csv += "," + format_optional(v);
  csv += "\n";
  const fs::path path = root / "eval.csv";
  write_file_atomic(path, csv);
  manifest.add("eval", path);
  manifest.write();
  std::cout << eval_table(run_id, e);
  return 0;
}

int cmd_analyze(const Common& c, const std::string& checkpoint, const std::string& teacher_path, std::size_t bins) {
  LoadedRun run = load_run(c, checkpoint, teacher_path);
  const fs::path root = output_root(c, run.cfg);
  Manifest manifest("analyze", run.cfg, root);
  const Tensor img = embed(run.ckpt.model.image, run.data.val.image);
  const Tensor txt = embed(run.ckpt.model.text, run.data.val.text);
  const PairSimilarityStats stats = pair_similarity_stats(img, txt);
  const auto pos = similarity_histogram(stats.pos_values, bins);
  const auto neg = similarity_histogram(stats.neg_values, bins);

  std::string hist = "bin_lo,bin_hi,pos_count,neg_count\n";
  for (std::size_t b = 0; b < bins; ++b) {
    const double lo = -1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(bins);
    const double hi = -1.0 + 2.0 * static_cast<double>(b + 1) / static_cast<double>(bins);
    hist += format_number(lo) + "," + format_number(hi) + "," + std::to_string(pos[b]) + "," + std::to_string(neg[b]) +
            "\n";
  }

  std::vector<std::pair<std::string, double>> summary = {
      {"n_pairs", static_cast<double>(stats.pos_values.size())},
      {"pos_mean", stats.pos_mean},
      {"neg_mean", stats.neg_mean},
      {"gap", stats.gap},
  };
  const auto& t = run.ckpt.temperatures;
  summary.emplace_back("tau_task", TemperatureSet::tau_of(t.task));
  summary.emplace_back("tau_student", TemperatureSet::tau_of(t.student));
  summary.emplace_back("tau_image", TemperatureSet::tau_of(t.image));
  summary.emplace_back("tau_text", TemperatureSet::tau_of(t.text));
  summary.emplace_back("tau_cross", TemperatureSet::tau_of(t.cross));
  if (run.teacher) {
    const std::size_t b = run.cfg.train.batch_size;
    summary.emplace_back("mi_bound_image", chunked_mi_bound(embed(run.teacher->encoder.image, run.data.val.image),
                                                            img, TemperatureSet::tau_of(t.image), b));
    summary.emplace_back("mi_bound_text", chunked_mi_bound(embed(run.teacher->encoder.text, run.data.val.text), txt,
                                                           TemperatureSet::tau_of(t.text), b));
    summary.emplace_back("mi_bound_limit", std::log(static_cast<double>(std::min(b, img.rows()) - 1)));
  }
  std::string sum = "metric,value\n";
  for (const auto& [k, v] : summary) sum += k + "," + format_number(v) + "\n";

  write_file_atomic(root / "analysis_histogram.csv", hist);
  write_file_atomic(root / "analysis_summary.csv", sum);
  manifest.add("histogram", root / "analysis_histogram.csv");
  manifest.add("summary", root / "analysis_summary.csv");
  manifest.write();
  std::cout << sum;
  return 0;
}

int cmd_grad_check() {
  const auto results = run_gradient_suite();
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> failing;
  for (const auto& r : results) {
    std::ostringstream err;
    err << std::scientific << std::setprecision(3) << r.max_relative_error;
    const bool ok = r.max_relative_error < kGradTolerance;
    if (!ok) failing.push_back(r.loss);
    rows.push_back({r.loss, err.str(), std::to_string(r.coordinates), ok ? "ok" : "FAIL", r.worst_coordinate});
  }
  std::cout << aligned_table({"loss", "max_rel_error", "coords", "status", "worst"}, rows);
  if (!failing.empty()) {
    std::cerr << "gradient check failed for:";
    for (const auto& f : failing) std::cerr << " " << f;
    std::cerr << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relational knowledge distillation for dual encoders"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  Common common;
  std::string checkpoint, teacher, seeds;
  std::size_t bins = kDefaultHistogramBins;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "Overrides the configured seed");
    sub->add_option("--out", common.out, "Output directory");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate and split a synthetic paired dataset");
  auto* train = app.add_subcommand("train-teacher", "Train the teacher dual encoder");
  auto* dist = app.add_subcommand("distill", "Distill a student from a teacher");
  auto* abl = app.add_subcommand("ablate", "Run the KD, KD+XRD, KD+VRD and RD recipes over seeds");
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on the validation split");
  auto* an = app.add_subcommand("analyze", "Similarity histograms and MI bound for a checkpoint");
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every loss gradient");
  for (auto* sub : {gen, train, dist, abl, ev, an}) add_common(sub);
  for (auto* sub : {dist, abl, ev, an}) {
    sub->add_option("--teacher", teacher, "Teacher checkpoint (overrides config)")->check(CLI::ExistingFile);
  }
  abl->add_option("--seeds", seeds, "Comma-separated seed list");
  for (auto* sub : {ev, an}) {
    sub->add_option("--checkpoint", checkpoint, "Checkpoint to score")->required()->check(CLI::ExistingFile);
  }
  an->add_option("--bins", bins, "Histogram bins")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(common);
    if (train->parsed()) return cmd_train_teacher(common);
    if (dist->parsed()) return cmd_distill(common, teacher);
    if (abl->parsed()) return cmd_ablate(common, seeds, teacher);
    if (ev->parsed()) return cmd_eval(common, checkpoint, teacher);
    if (an->parsed()) return cmd_analyze(common, checkpoint, teacher, bins);
    if (gc->parsed()) return cmd_grad_check();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
