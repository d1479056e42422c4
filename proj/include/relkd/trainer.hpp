#pragma once

// Teacher pretraining with the contrastive task loss, and distillation of a
// frozen teacher into a fresh student under any combination of objectives.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "relkd/autodiff.hpp"
#include "relkd/encoders.hpp"
#include "relkd/error.hpp"
#include "relkd/eval.hpp"
#include "relkd/losses.hpp"
#include "relkd/metrics.hpp"
#include "relkd/synth_data.hpp"

namespace relkd {

// splitmix64; decorrelates the per-purpose RNG streams derived from one run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace seed_stream {
inline constexpr std::uint64_t teacher_init = 1;
inline constexpr std::uint64_t teacher_shuffle = 2;
inline constexpr std::uint64_t student_init = 3;
inline constexpr std::uint64_t student_shuffle = 4;
inline constexpr std::uint64_t data_split = 5;
}  // namespace seed_stream

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t warmup_iters = 100;
  std::size_t batch_size = 64;
  double peak_lr = 1e-3;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  LossSet enabled = LossSet::clip_rd();
  LossWeights weights;

  std::size_t iters_per_epoch(std::size_t n_train) const { return batch_size ? n_train / batch_size : 0; }
  std::size_t total_iters(std::size_t n_train) const { return epochs * iters_per_epoch(n_train); }

  void validate(std::size_t n_train) const {
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (relational losses need negatives)");
    if (n_train < batch_size) {
      throw ConfigError("training split has " + std::to_string(n_train) + " rows, fewer than one batch");
    }
    if (epochs > 0 && warmup_iters >= total_iters(n_train)) {
      throw ConfigError("warmup_iters (" + std::to_string(warmup_iters) + ") must be below total iterations (" +
                        std::to_string(total_iters(n_train)) + ")");
    }
    if (!(peak_lr >= 0.0) || !(weight_decay >= 0.0) || !(eps > 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) ||
        !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("optimizer hyperparameters out of range");
    }
    weights.validate();
  }
};

// ---- schedule -------------------------------------------------------------

// Linear warmup 0 → peak over `warmup` iterations, then cosine decay to 0 at `total`.
inline double lr_at(std::size_t iter, std::size_t warmup, std::size_t total, double peak) {
  if (iter > total) {
    throw ContractError("lr_at: iteration " + std::to_string(iter) + " beyond total " + std::to_string(total));
  }
  if (iter < warmup) return peak * static_cast<double>(iter) / static_cast<double>(warmup);
  if (total == warmup) return peak;
  const double progress = static_cast<double>(iter - warmup) / static_cast<double>(total - warmup);
  return peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// ---- optimizer ------------------------------------------------------------

struct OptimizerState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::size_t step = 0;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.1;

  static AdamWConfig from(const TrainConfig& c) { return {c.beta1, c.beta2, c.eps, c.weight_decay}; }
};

// One AdamW step: decay (scaled by lr) is applied straight to the parameter,
// then the bias-corrected adaptive update. Parameters with trainable == false
// are skipped, decay == false skips only the decay.
inline void optimizer_step(std::span<ad::Parameter* const> params, OptimizerState& state, double lr,
                           const AdamWConfig& cfg) {
  if (!(lr >= 0.0)) throw ContractError("optimizer_step: negative learning rate");
  if (state.first_moment.empty()) {
    for (const ad::Parameter* p : params) {
      state.first_moment.push_back(Tensor::zeros_like(p->value));
      state.second_moment.push_back(Tensor::zeros_like(p->value));
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("optimizer_step: parameter count changed");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const ad::Parameter& p = *params[k];
    if (p.grad.shape() != p.value.shape() || state.first_moment[k].shape() != p.value.shape()) {
      throw ShapeError("optimizer_step: shape mismatch for " + p.name);
    }
    for (std::size_t i = 0; i < p.grad.size(); ++i) {
      if (!std::isfinite(p.grad[i])) throw NumericError("non-finite gradient in " + p.name, i);
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    ad::Parameter& p = *params[k];
    if (!p.trainable) continue;
    Tensor& m = state.first_moment[k];
    Tensor& v = state.second_moment[k];
    const double decay = p.decay ? 1.0 - lr * cfg.weight_decay : 1.0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p.value[i] = p.value[i] * decay - lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

// ---- shared pieces --------------------------------------------------------

struct ModelShape {
  std::size_t hidden = 16;
  std::size_t embed = 32;
};

// Batches for one epoch: a fresh permutation, trailing partial batch dropped.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start + batch <= n; start += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(start + batch));
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> sequential_batches(std::size_t n, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start + batch <= n; start += batch) {
    std::vector<std::size_t> b(batch);
    std::iota(b.begin(), b.end(), start);
    out.push_back(std::move(b));
  }
  return out;
}

inline void require_finite_loss(double v, std::size_t iteration) {
  if (!std::isfinite(v)) throw NumericError("non-finite loss, training diverged", iteration);
}

// ---- teacher --------------------------------------------------------------

struct TeacherModel {
  DualEncoder encoder;
  double tau = kDefaultTemperature;  // trained task temperature, frozen afterwards
};

struct TeacherResult {
  TeacherModel model;
  std::vector<double> epoch_losses;
};

inline TeacherResult train_teacher(const TrainConfig& config, const ModelShape& shape, const PairedDataset& train) {
  if (train.size() == 0) throw ConfigError("train_teacher: empty training split");
  config.validate(train.size());
  TeacherResult result;
  DualEncoder& enc = result.model.encoder;
  enc = init_dual_encoder(train.image.cols(), train.text.cols(), shape.hidden, shape.embed,
                          derive_seed(config.seed, seed_stream::teacher_init), Network::teacher);
  ad::Parameter log_scale = TemperatureSet::make("teacher_task", kDefaultTemperature, true);

  auto params = enc.parameters();
  params.push_back(&log_scale);
  OptimizerState state;
  const auto adam = AdamWConfig::from(config);
  const std::size_t total = config.total_iters(train.size());
  std::mt19937_64 rng(derive_seed(config.seed, seed_stream::teacher_shuffle));
  std::size_t iter = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    const auto batches = epoch_batches(train.size(), config.batch_size, rng);
    for (const auto& idx : batches) {
      ad::Graph g;
      auto v = encode(g, enc.image, train.image.gather_rows(idx), Network::teacher, Modality::image);
      auto s = encode(g, enc.text, train.text.gather_rows(idx), Network::teacher, Modality::text);
      auto loss = clip_loss(v, s, learnable_temperature(g, log_scale)).value;
      require_finite_loss(loss.item(), iter);
      loss_sum += loss.item();
      g.backward(loss, params);
      optimizer_step(params, state, lr_at(iter, config.warmup_iters, total, config.peak_lr), adam);
      if (log_scale.value[0] > std::log(kMaxLogitScale)) log_scale.value[0] = std::log(kMaxLogitScale);
      ++iter;
    }
    result.epoch_losses.push_back(loss_sum / static_cast<double>(batches.size()));
  }
  result.model.tau = TemperatureSet::tau_of(log_scale);
  return result;
}

// ---- evaluation shared by distill and the eval command --------------------

struct EvalMetrics {
  RetrievalResult retrieval;
  double zs_acc = 0.0;
  double pos_mean = 0.0;
  double neg_mean = 0.0;
  double gap = 0.0;
  std::optional<double> mi_bound_image;
  std::optional<double> mi_bound_text;
};

// Mean InfoNCE bound over consecutive chunks of `batch` rows (remainder
// dropped; one chunk of everything when fewer rows than `batch`).
inline double chunked_mi_bound(const Tensor& teacher, const Tensor& student, double tau, std::size_t batch) {
  const std::size_t n = teacher.rows();
  const std::size_t b = std::min(batch, n);
  double total = 0.0;
  std::size_t chunks = 0;
  for (std::size_t start = 0; start + b <= n; start += b, ++chunks) {
    std::vector<std::size_t> idx(b);
    std::iota(idx.begin(), idx.end(), start);
    total += mi_lower_bound(teacher.gather_rows(idx), student.gather_rows(idx), tau).bound;
  }
  return total / static_cast<double>(chunks);
}

inline EvalMetrics evaluate_model(const DualEncoder& model, const TemperatureSet& temps,
                                  const DualEncoder* teacher, const PairedDataset& train,
                                  const PairedDataset& val, std::size_t mi_batch) {
  const Tensor val_img = embed(model.image, val.image);
  const Tensor val_txt = embed(model.text, val.text);
  EvalMetrics m;
  m.retrieval = retrieval_recall(val_img, val_txt);

  const std::size_t n_classes = std::max(train.n_concepts, val.n_concepts);
  const Tensor protos = class_prototypes(embed(model.text, train.text), train.labels, n_classes);
  m.zs_acc = zero_shot_classify(val_img, protos, val.labels);

  const auto stats = pair_similarity_stats(val_img, val_txt);
  m.pos_mean = stats.pos_mean;
  m.neg_mean = stats.neg_mean;
  m.gap = stats.gap;

  if (teacher) {
    m.mi_bound_image = chunked_mi_bound(embed(teacher->image, val.image), val_img,
                                        TemperatureSet::tau_of(temps.image), mi_batch);
    m.mi_bound_text = chunked_mi_bound(embed(teacher->text, val.text), val_txt,
                                       TemperatureSet::tau_of(temps.text), mi_batch);
  }
  return m;
}

// ---- distillation ---------------------------------------------------------

struct LossComponents {
  double task = 0.0;
  std::optional<double> fd, icl, hrd, vrd_ce, vrd_kl, xrd;
  double total = 0.0;
};

struct MetricRecord {
  std::string run_id;
  std::string method;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  LossComponents losses;
  EvalMetrics eval;
};

struct TemperatureInit {
  double tau = kDefaultTemperature;
  bool learnable = true;
};

struct TemperatureConfig {
  TemperatureInit task, student, image, text, cross;

  TemperatureSet make(double teacher_tau) const {
    return TemperatureSet{TemperatureSet::make("task", task.tau, task.learnable),
                          TemperatureSet::make("student", student.tau, student.learnable),
                          TemperatureSet::make("image", image.tau, image.learnable),
                          TemperatureSet::make("text", text.tau, text.learnable),
                          TemperatureSet::make("cross", cross.tau, cross.learnable),
                          teacher_tau};
  }
};

struct DistillConfig {
  TrainConfig train;
  ModelShape student;
  TemperatureConfig temperatures;
  std::string run_id = "run";
  std::string method = "custom";
};

// Optional starting point instead of a fresh student.
struct DistillInit {
  std::optional<DualEncoder> student;
  std::optional<TemperatureSet> temperatures;
};

struct DistillResult {
  DualEncoder student;
  TemperatureSet temperatures;
  std::vector<MetricRecord> records;  // epoch 0 is the untrained state
};

namespace detail {

struct RunningLosses {
  double task = 0.0, total = 0.0;
  double fd = 0.0, icl = 0.0, hrd = 0.0, vrd_ce = 0.0, vrd_kl = 0.0, xrd = 0.0;
  std::size_t batches = 0;

  void add(const LossBundle& b) {
    task += b.task.item();
    total += b.total.item();
    if (b.fd) fd += b.fd->item();
    if (b.icl) icl += b.icl->item();
    if (b.hrd) hrd += b.hrd->item();
    if (b.vrd_ce) vrd_ce += b.vrd_ce->item();
    if (b.vrd_kl) vrd_kl += b.vrd_kl->item();
    if (b.xrd) xrd += b.xrd->item();
    ++batches;
  }

  LossComponents mean(const LossSet& enabled) const {
    const double n = static_cast<double>(batches);
    LossComponents c;
    c.task = task / n;
    c.total = total / n;
    if (enabled.fd) c.fd = fd / n;
    if (enabled.icl) c.icl = icl / n;
    if (enabled.hrd) c.hrd = hrd / n;
    if (enabled.vrd) {
      c.vrd_ce = vrd_ce / n;
      c.vrd_kl = vrd_kl / n;
    }
    if (enabled.xrd) c.xrd = xrd / n;
    return c;
  }
};

}  // namespace detail

inline DistillResult distill(const DistillConfig& config, const TeacherModel& teacher, const PairedDataset& train,
                             const PairedDataset& val, DistillInit init = {}) {
  const TrainConfig& tc = config.train;
  tc.validate(train.size());
  const DualEncoder& t_enc = teacher.encoder;
  if (t_enc.image.widths.embed != 0 && t_enc.image.widths.embed != config.student.embed && !init.student) {
    throw ConfigError("teacher and student must share the embedding dimension");
  }

  DistillResult result;
  result.student = init.student ? *init.student
                                : init_dual_encoder(train.image.cols(), train.text.cols(), config.student.hidden,
                                                    config.student.embed,
                                                    derive_seed(tc.seed, seed_stream::student_init), Network::student);
  result.temperatures = init.temperatures ? *init.temperatures : config.temperatures.make(teacher.tau);
  DualEncoder& student = result.student;
  TemperatureSet& temps = result.temperatures;

  // Teacher is frozen: its embeddings enter every graph as constants.
  const Tensor teacher_img = embed(t_enc.image, train.image);
  const Tensor teacher_txt = embed(t_enc.text, train.text);

  auto params = student.parameters();
  for (ad::Parameter* p : temps.parameters()) params.push_back(p);
  OptimizerState state;
  const auto adam = AdamWConfig::from(tc);
  const std::size_t total = tc.total_iters(train.size());

  auto forward = [&](ad::Graph& g, const std::vector<std::size_t>& idx) {
    DistillInputs in{
        {g.constant(teacher_img.gather_rows(idx)), Network::teacher, Modality::image},
        {g.constant(teacher_txt.gather_rows(idx)), Network::teacher, Modality::text},
        encode(g, student.image, train.image.gather_rows(idx), Network::student, Modality::image),
        encode(g, student.text, train.text.gather_rows(idx), Network::student, Modality::text),
        bind(g, temps),
    };
    return clip_rd_total(tc.enabled, tc.weights, in);
  };

  auto record = [&](std::size_t epoch, const detail::RunningLosses& running) {
    MetricRecord r;
    r.run_id = config.run_id;
    r.method = config.method;
    r.seed = tc.seed;
    r.epoch = epoch;
    r.losses = running.mean(tc.enabled);
    r.eval = evaluate_model(student, temps, &t_enc, train, val, tc.batch_size);
    result.records.push_back(std::move(r));
  };

  {
    detail::RunningLosses running;
    for (const auto& idx : sequential_batches(train.size(), tc.batch_size)) {
      ad::Graph g;
      auto bundle = forward(g, idx);
      require_finite_loss(bundle.total.item(), 0);
      running.add(bundle);
    }
    record(0, running);
  }

  std::mt19937_64 rng(derive_seed(tc.seed, seed_stream::student_shuffle));
  std::size_t iter = 0;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    detail::RunningLosses running;
    for (const auto& idx : epoch_batches(train.size(), tc.batch_size, rng)) {
      ad::Graph g;
      auto bundle = forward(g, idx);
      require_finite_loss(bundle.total.item(), iter);
      running.add(bundle);
      g.backward(bundle.total, params);
      optimizer_step(params, state, lr_at(iter, tc.warmup_iters, total, tc.peak_lr), adam);
      temps.clamp();
      ++iter;
    }
    record(epoch, running);
  }
  return result;
}

}  // namespace relkd
