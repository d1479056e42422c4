#pragma once

// Contrastive task loss and the teacher/student distillation objectives.
//
// Every similarity below is a dot product between unit-norm embeddings
// divided by a temperature. Temperatures are carried as logit scales
// (1/tau), and learnable ones are stored as log logit scales.

#include <cmath>
#include <cstddef>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "relkd/autodiff.hpp"
#include "relkd/encoders.hpp"
#include "relkd/error.hpp"

namespace relkd {

inline constexpr double kDefaultTemperature = 0.07;
inline constexpr double kMaxLogitScale = 100.0;

struct EmbeddingTag {
  Network network = Network::student;
  Modality modality = Modality::image;

  friend bool operator==(const EmbeddingTag&, const EmbeddingTag&) = default;
};

inline EmbeddingTag tag_of(const EmbeddingBatch& b) { return {b.network, b.modality}; }

// Temperature as seen by a single forward pass.
struct Temperature {
  ad::Var logit_scale;  // scalar node holding 1/tau

  double tau() const { return 1.0 / logit_scale.item(); }
};

inline Temperature fixed_temperature(ad::Graph& g, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw DomainError("temperature must be positive and finite, got " + std::to_string(tau));
  }
  return {g.constant(Tensor::scalar(1.0 / tau))};
}

// `log_scale` holds log(1/tau).
inline Temperature learnable_temperature(ad::Graph& g, ad::Parameter& log_scale) {
  return {ad::exp(g.param(log_scale))};
}

struct TemperatureSet {
  ad::Parameter task;
  ad::Parameter student;  // horizontal (HRD) student side
  ad::Parameter image;    // vertical, image-image
  ad::Parameter text;     // vertical, text-text
  ad::Parameter cross;    // cross-network, cross-modality
  double teacher_tau = kDefaultTemperature;

  static ad::Parameter make(const std::string& name, double tau, bool trainable) {
    if (!(tau > 0.0)) throw ConfigError("temperature " + name + " must be positive");
    return ad::Parameter("temperature." + name, Tensor::scalar(std::log(1.0 / tau)), trainable, false);
  }

  static TemperatureSet initial(double tau = kDefaultTemperature, double teacher = kDefaultTemperature) {
    return TemperatureSet{make("task", tau, true),  make("student", tau, true), make("image", tau, true),
                          make("text", tau, true),  make("cross", tau, true),   teacher};
  }

  std::vector<ad::Parameter*> parameters() { return {&task, &student, &image, &text, &cross}; }

  // Keeps every logit scale at or below kMaxLogitScale.
  void clamp() {
    const double cap = std::log(kMaxLogitScale);
    for (ad::Parameter* p : parameters())
      if (p->value[0] > cap) p->value[0] = cap;
  }

  static double tau_of(const ad::Parameter& p) { return std::exp(-p.value.item()); }
};

struct TemperatureVars {
  Temperature task, teacher, student, image, text, cross;
};

inline TemperatureVars bind(ad::Graph& g, TemperatureSet& t) {
  return {learnable_temperature(g, t.task),  fixed_temperature(g, t.teacher_tau),
          learnable_temperature(g, t.student), learnable_temperature(g, t.image),
          learnable_temperature(g, t.text),  learnable_temperature(g, t.cross)};
}

// Row k is the softmax over j of anchor_k · target_j / tau.
struct SimilarityDistribution {
  ad::Var probs;
  ad::Var log_probs;
  EmbeddingTag anchor;
  EmbeddingTag target;
  double tau = 1.0;

  std::size_t size() const { return probs.value().rows(); }
};

namespace detail {

inline void require_matched(const EmbeddingBatch& a, const EmbeddingBatch& b, const char* op) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows() || x.cols() != y.cols()) {
    throw ShapeError(std::string(op) + ": embedding batches " + to_string(x.shape()) + " and " +
                     to_string(y.shape()) + " do not match");
  }
  if (x.rows() == 0) throw ShapeError(std::string(op) + ": empty batch");
}

inline double inv_batch(const EmbeddingBatch& a) { return 1.0 / static_cast<double>(a.size()); }

}  // namespace detail

inline SimilarityDistribution similarity_distribution(const EmbeddingBatch& anchors, const EmbeddingBatch& targets,
                                                      const Temperature& tau) {
  detail::require_matched(anchors, targets, "similarity_distribution");
  ad::Var logits = ad::scale(ad::matmul(anchors.rows, ad::transpose(targets.rows)), tau.logit_scale);
  return {ad::row_softmax(logits), ad::row_log_softmax(logits), tag_of(anchors), tag_of(targets), tau.tau()};
}

inline SimilarityDistribution similarity_distribution(const EmbeddingBatch& anchors, const EmbeddingBatch& targets,
                                                      double tau) {
  return similarity_distribution(anchors, targets, fixed_temperature(anchors.rows.graph(), tau));
}

// Wraps an explicit row-stochastic matrix; log uses the floored log op.
inline SimilarityDistribution distribution_from_probabilities(ad::Var probs) {
  return {probs, ad::log(probs), {}, {}, 1.0};
}

// (1/B) Σ_k Σ_j p[k][j] · log(p[k][j] / q[k][j])
inline ad::Var kl_rows(const SimilarityDistribution& p, const SimilarityDistribution& q) {
  if (p.probs.shape() != q.probs.shape()) {
    throw ShapeError("kl_rows: " + to_string(p.probs.shape()) + " vs " + to_string(q.probs.shape()));
  }
  const double inv = 1.0 / static_cast<double>(p.size());
  return ad::scale(ad::sum(ad::mul(p.probs, ad::sub(p.log_probs, q.log_probs))), inv);
}

// Batch mean of -log P[k][k]: InfoNCE with index-aligned positives.
inline ad::Var diagonal_nll(const SimilarityDistribution& d) {
  return ad::negate(ad::mean(ad::select_diag(d.log_probs)));
}

// ---- task loss ------------------------------------------------------------

struct ClipLoss {
  ad::Var value;
  ad::Var image_to_text;
  ad::Var text_to_image;
  SimilarityDistribution i2t, t2i;
};

inline ClipLoss clip_loss(const EmbeddingBatch& images, const EmbeddingBatch& texts, const Temperature& tau) {
  detail::require_matched(images, texts, "clip_loss");
  auto i2t = similarity_distribution(images, texts, tau);
  auto t2i = similarity_distribution(texts, images, tau);
  ad::Var a = diagonal_nll(i2t);
  ad::Var b = diagonal_nll(t2i);
  return {ad::scale(ad::add(a, b), 0.5), a, b, i2t, t2i};
}

// ---- CLIP-KD components ---------------------------------------------------

inline ad::Var fd_loss(const EmbeddingBatch& v_t, const EmbeddingBatch& s_t, const EmbeddingBatch& v_s,
                       const EmbeddingBatch& s_s) {
  detail::require_matched(v_t, v_s, "fd_loss");
  detail::require_matched(s_t, s_s, "fd_loss");
  detail::require_matched(v_t, s_t, "fd_loss");
  ad::Var image = ad::sum(ad::square(ad::sub(v_t.rows, v_s.rows)));
  ad::Var text = ad::sum(ad::square(ad::sub(s_t.rows, s_s.rows)));
  return ad::scale(ad::add(image, text), detail::inv_batch(v_t));
}

struct IclLoss {
  ad::Var value;
  ad::Var image_to_text;  // student images vs teacher texts
  ad::Var text_to_image;  // student texts vs teacher images
  SimilarityDistribution i2t, t2i;
};

inline IclLoss icl_loss(const EmbeddingBatch& v_s, const EmbeddingBatch& s_s, const EmbeddingBatch& v_t,
                        const EmbeddingBatch& s_t, const Temperature& tau) {
  detail::require_matched(v_s, s_t, "icl_loss");
  detail::require_matched(s_s, v_t, "icl_loss");
  auto i2t = similarity_distribution(v_s, s_t, tau);
  auto t2i = similarity_distribution(s_s, v_t, tau);
  ad::Var a = diagonal_nll(i2t);
  ad::Var b = diagonal_nll(t2i);
  return {ad::scale(ad::add(a, b), 0.5), a, b, i2t, t2i};
}

struct HrdLoss {
  ad::Var value;
  ad::Var image_to_text;
  ad::Var text_to_image;
  SimilarityDistribution p_teacher, p_student, q_teacher, q_student;
};

// Teacher distributions sit in the first KL slot; the two directions are summed.
inline HrdLoss hrd_loss(const EmbeddingBatch& v_t, const EmbeddingBatch& s_t, const EmbeddingBatch& v_s,
                        const EmbeddingBatch& s_s, const Temperature& tau_teacher,
                        const Temperature& tau_student) {
  detail::require_matched(v_t, s_t, "hrd_loss");
  detail::require_matched(v_s, s_s, "hrd_loss");
  detail::require_matched(v_t, v_s, "hrd_loss");
  auto p_t = similarity_distribution(v_t, s_t, tau_teacher);
  auto p_s = similarity_distribution(v_s, s_s, tau_student);
  auto q_t = similarity_distribution(s_t, v_t, tau_teacher);
  auto q_s = similarity_distribution(s_s, v_s, tau_student);
  ad::Var a = kl_rows(p_t, p_s);
  ad::Var b = kl_rows(q_t, q_s);
  return {ad::add(a, b), a, b, p_t, p_s, q_t, q_s};
}

// ---- vertical relational distillation ------------------------------------

struct VerticalDistributions {
  SimilarityDistribution image_ts;  // teacher image anchors, student image targets
  SimilarityDistribution image_st;
  SimilarityDistribution text_ts;
  SimilarityDistribution text_st;
};

inline VerticalDistributions vertical_distributions(const EmbeddingBatch& v_t, const EmbeddingBatch& v_s,
                                                    const EmbeddingBatch& s_t, const EmbeddingBatch& s_s,
                                                    const Temperature& tau_image, const Temperature& tau_text) {
  detail::require_matched(v_t, v_s, "vrd");
  detail::require_matched(s_t, s_s, "vrd");
  detail::require_matched(v_t, s_t, "vrd");
  return {similarity_distribution(v_t, v_s, tau_image), similarity_distribution(v_s, v_t, tau_image),
          similarity_distribution(s_t, s_s, tau_text), similarity_distribution(s_s, s_t, tau_text)};
}

struct VrdCeLoss {
  ad::Var value;
  ad::Var image;  // batch mean of -log I_ts[k][k] - log I_st[k][k]
  ad::Var text;
  VerticalDistributions distributions;
};

inline VrdCeLoss vrd_ce_loss(const VerticalDistributions& d) {
  ad::Var image = ad::add(diagonal_nll(d.image_ts), diagonal_nll(d.image_st));
  ad::Var text = ad::add(diagonal_nll(d.text_ts), diagonal_nll(d.text_st));
  return {ad::scale(ad::add(image, text), 0.5), image, text, d};
}

inline VrdCeLoss vrd_ce_loss(const EmbeddingBatch& v_t, const EmbeddingBatch& v_s, const EmbeddingBatch& s_t,
                             const EmbeddingBatch& s_s, const Temperature& tau_image,
                             const Temperature& tau_text) {
  return vrd_ce_loss(vertical_distributions(v_t, v_s, s_t, s_s, tau_image, tau_text));
}

struct VrdKlLoss {
  ad::Var value;
  ad::Var teacher_anchored;  // KL(I_ts || T_ts)
  ad::Var student_anchored;  // KL(I_st || T_st)
  VerticalDistributions distributions;
};

inline VrdKlLoss vrd_kl_loss(const VerticalDistributions& d) {
  ad::Var ts = kl_rows(d.image_ts, d.text_ts);
  ad::Var st = kl_rows(d.image_st, d.text_st);
  return {ad::scale(ad::add(ts, st), 0.5), ts, st, d};
}

inline VrdKlLoss vrd_kl_loss(const EmbeddingBatch& v_t, const EmbeddingBatch& v_s, const EmbeddingBatch& s_t,
                             const EmbeddingBatch& s_s, const Temperature& tau_image,
                             const Temperature& tau_text) {
  return vrd_kl_loss(vertical_distributions(v_t, v_s, s_t, s_s, tau_image, tau_text));
}

struct VrdLoss {
  ad::Var value;
  VrdCeLoss ce;
  VrdKlLoss kl;
};

inline VrdLoss vrd_loss(const EmbeddingBatch& v_t, const EmbeddingBatch& v_s, const EmbeddingBatch& s_t,
                        const EmbeddingBatch& s_s, const Temperature& tau_image, const Temperature& tau_text) {
  auto d = vertical_distributions(v_t, v_s, s_t, s_s, tau_image, tau_text);
  auto ce = vrd_ce_loss(d);
  auto kl = vrd_kl_loss(d);
  return {ad::add(ce.value, kl.value), ce, kl};
}

// ---- cross relational distillation ---------------------------------------

struct XrdLoss {
  ad::Var value;
  ad::Var teacher_to_student;  // symmetrized KL between R(Ti->St) and R(Tt->Si)
  ad::Var student_to_teacher;  // symmetrized KL between R(Si->Tt) and R(St->Ti)
  SimilarityDistribution ti_st, tt_si, si_tt, st_ti;
};

inline XrdLoss xrd_loss(const EmbeddingBatch& v_t, const EmbeddingBatch& s_t, const EmbeddingBatch& v_s,
                        const EmbeddingBatch& s_s, const Temperature& tau) {
  detail::require_matched(v_t, s_s, "xrd_loss");
  detail::require_matched(s_t, v_s, "xrd_loss");
  detail::require_matched(v_t, s_t, "xrd_loss");
  auto ti_st = similarity_distribution(v_t, s_s, tau);
  auto tt_si = similarity_distribution(s_t, v_s, tau);
  auto si_tt = similarity_distribution(v_s, s_t, tau);
  auto st_ti = similarity_distribution(s_s, v_t, tau);
  ad::Var t2s = ad::scale(ad::add(kl_rows(ti_st, tt_si), kl_rows(tt_si, ti_st)), 0.5);
  ad::Var s2t = ad::scale(ad::add(kl_rows(si_tt, st_ti), kl_rows(st_ti, si_tt)), 0.5);
  return {ad::scale(ad::add(t2s, s2t), 0.5), t2s, s2t, ti_st, tt_si, si_tt, st_ti};
}

// ---- combined objective ---------------------------------------------------

struct LossSet {
  bool fd = false;
  bool icl = false;
  bool hrd = false;
  bool vrd = false;
  bool xrd = false;

  bool empty() const { return !(fd || icl || hrd || vrd || xrd); }
  friend bool operator==(const LossSet&, const LossSet&) = default;

  static LossSet clip_kd() { return {true, true, true, false, false}; }
  static LossSet clip_rd() { return {true, true, true, true, true}; }

  // Comma separated, e.g. "FD,ICL,HRD". Empty string is the empty set.
  static LossSet parse(const std::string& text) {
    LossSet s;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      if (item == "FD") s.fd = true;
      else if (item == "ICL") s.icl = true;
      else if (item == "HRD") s.hrd = true;
      else if (item == "VRD") s.vrd = true;
      else if (item == "XRD") s.xrd = true;
      else throw ConfigError("unknown loss '" + item + "' (expected FD, ICL, HRD, VRD or XRD)");
    }
    return s;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    if (fd) out.emplace_back("FD");
    if (icl) out.emplace_back("ICL");
    if (hrd) out.emplace_back("HRD");
    if (vrd) out.emplace_back("VRD");
    if (xrd) out.emplace_back("XRD");
    return out;
  }
};

struct LossWeights {
  double alpha = 2000.0;  // FD
  double beta = 1.0;      // ICL
  double lambda = 1.0;    // each relational term

  void validate() const {
    for (double w : {alpha, beta, lambda})
      if (!std::isfinite(w) || w < 0.0) throw ConfigError("loss weights must be finite and >= 0");
  }
};

struct DistillInputs {
  EmbeddingBatch v_teacher, s_teacher, v_student, s_student;
  TemperatureVars temperatures;
};

struct LossBundle {
  ad::Var task;
  std::optional<ad::Var> fd, icl, hrd, vrd_ce, vrd_kl, vrd, xrd;
  ad::Var total;
};

// task + alpha·FD + beta·ICL + lambda·(HRD + VRD + XRD) over the present terms.
inline ad::Var weighted_total(const LossBundle& b, const LossWeights& weights) {
  weights.validate();
  ad::Var total = b.task;
  if (b.fd) total = ad::add(total, ad::scale(*b.fd, weights.alpha));
  if (b.icl) total = ad::add(total, ad::scale(*b.icl, weights.beta));
  if (b.hrd) total = ad::add(total, ad::scale(*b.hrd, weights.lambda));
  if (b.vrd) total = ad::add(total, ad::scale(*b.vrd, weights.lambda));
  if (b.xrd) total = ad::add(total, ad::scale(*b.xrd, weights.lambda));
  return total;
}

inline LossBundle clip_rd_total(const LossSet& enabled, const LossWeights& weights, const DistillInputs& in) {
  weights.validate();
  const auto& t = in.temperatures;
  LossBundle b;
  b.task = clip_loss(in.v_student, in.s_student, t.task).value;
  if (enabled.fd) b.fd = fd_loss(in.v_teacher, in.s_teacher, in.v_student, in.s_student);
  if (enabled.icl) b.icl = icl_loss(in.v_student, in.s_student, in.v_teacher, in.s_teacher, t.task).value;
  if (enabled.hrd) {
    b.hrd = hrd_loss(in.v_teacher, in.s_teacher, in.v_student, in.s_student, t.teacher, t.student).value;
  }
  if (enabled.vrd) {
    auto v = vrd_loss(in.v_teacher, in.v_student, in.s_teacher, in.s_student, t.image, t.text);
    b.vrd_ce = v.ce.value;
    b.vrd_kl = v.kl.value;
    b.vrd = v.value;
  }
  if (enabled.xrd) b.xrd = xrd_loss(in.v_teacher, in.s_teacher, in.v_student, in.s_student, t.cross).value;
  b.total = weighted_total(b, weights);
  return b;
}

}  // namespace relkd
