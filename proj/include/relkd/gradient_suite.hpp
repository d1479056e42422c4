#pragma once

// Finite-difference validation of every objective's gradient with respect to
// student parameters and the learnable log-temperatures.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "relkd/autodiff.hpp"
#include "relkd/encoders.hpp"
#include "relkd/losses.hpp"

namespace relkd {

inline const std::vector<std::string>& gradient_suite_losses() {
  static const std::vector<std::string> names = {"clip", "fd", "icl", "hrd", "vrd_ce", "vrd_kl", "xrd", "combined"};
  return names;
}

struct GradSuiteEntry {
  std::string loss;
  double max_relative_error = 0.0;
  std::string worst_coordinate;
  std::size_t coordinates = 0;
};

// How the student side enters the loss.
enum class StudentInput {
  encoder,     // full student dual encoder
  embeddings,  // free B×d matrices, row-normalized inside the graph
};

namespace detail {

inline Tensor random_normal(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(Shape{r, c});
  for (double& v : t.data()) v = n(rng);
  return t;
}

inline Tensor normalized_rows(Tensor t) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    auto row = t.row(r);
    const double n = std::sqrt(dot(row, row));
    for (double& v : row) v /= n;
  }
  return t;
}

}  // namespace detail

inline ad::Var evaluate_named_loss(const std::string& name, const DistillInputs& in) {
  const auto& t = in.temperatures;
  if (name == "clip") return clip_loss(in.v_student, in.s_student, t.task).value;
  if (name == "fd") return fd_loss(in.v_teacher, in.s_teacher, in.v_student, in.s_student);
  if (name == "icl") return icl_loss(in.v_student, in.s_student, in.v_teacher, in.s_teacher, t.task).value;
  if (name == "hrd") return hrd_loss(in.v_teacher, in.s_teacher, in.v_student, in.s_student, t.teacher, t.student).value;
  if (name == "vrd_ce") return vrd_ce_loss(in.v_teacher, in.v_student, in.s_teacher, in.s_student, t.image, t.text).value;
  if (name == "vrd_kl") return vrd_kl_loss(in.v_teacher, in.v_student, in.s_teacher, in.s_student, t.image, t.text).value;
  if (name == "xrd") return xrd_loss(in.v_teacher, in.s_teacher, in.v_student, in.s_student, t.cross).value;
  if (name == "combined") return clip_rd_total(LossSet::clip_rd(), LossWeights{}, in).total;
  throw ConfigError("unknown loss '" + name + "'");
}

// Max relative error over `seeds` random problems of batch B and dimension d.
inline GradSuiteEntry check_loss_gradient(const std::string& name, StudentInput input, std::size_t seeds = 5,
                                          std::size_t batch = 4, std::size_t dim = 8) {
  GradSuiteEntry entry{name, 0.0, {}, 0};
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    std::mt19937_64 rng(seed * 7919 + 17);
    const Tensor v_t = detail::normalized_rows(detail::random_normal(rng, batch, dim));
    const Tensor s_t = detail::normalized_rows(detail::random_normal(rng, batch, dim));
    const Tensor img = detail::random_normal(rng, batch, 6);
    const Tensor txt = detail::random_normal(rng, batch, 5);

    DualEncoder student = init_dual_encoder(6, 5, 7, dim, seed, Network::student);
    ad::Parameter raw_v("student.image_embeddings", detail::random_normal(rng, batch, dim));
    ad::Parameter raw_s("student.text_embeddings", detail::random_normal(rng, batch, dim));

    std::uniform_real_distribution<double> tau(0.1, 1.0);
    TemperatureSet temps = TemperatureSet::initial(tau(rng), tau(rng));
    for (ad::Parameter* p : temps.parameters()) p->value[0] = std::log(1.0 / tau(rng));

    std::vector<ad::Parameter*> params;
    if (input == StudentInput::encoder) params = student.parameters();
    else params = {&raw_v, &raw_s};
    for (ad::Parameter* p : temps.parameters()) params.push_back(p);

    auto f = [&](ad::Graph& g) {
      EmbeddingBatch vs, ss;
      if (input == StudentInput::encoder) {
        vs = encode(g, student.image, img, Network::student, Modality::image);
        ss = encode(g, student.text, txt, Network::student, Modality::text);
      } else {
        vs = {ad::l2_normalize_rows(g.param(raw_v)), Network::student, Modality::image};
        ss = {ad::l2_normalize_rows(g.param(raw_s)), Network::student, Modality::text};
      }
      DistillInputs in{{g.constant(v_t), Network::teacher, Modality::image},
                       {g.constant(s_t), Network::teacher, Modality::text},
                       vs,
                       ss,
                       bind(g, temps)};
      return evaluate_named_loss(name, in);
    };
    const auto r = ad::grad_check(f, params);
    entry.coordinates += r.coordinates;
    if (r.max_relative_error >= entry.max_relative_error) {
      entry.max_relative_error = r.max_relative_error;
      entry.worst_coordinate = "seed " + std::to_string(seed) + " " + r.worst_coordinate;
    }
  }
  return entry;
}

// Both student parametrizations, worst case reported per loss.
inline std::vector<GradSuiteEntry> run_gradient_suite(std::size_t seeds = 5, std::size_t batch = 4,
                                                      std::size_t dim = 8) {
  std::vector<GradSuiteEntry> out;
  for (const auto& name : gradient_suite_losses()) {
    auto a = check_loss_gradient(name, StudentInput::encoder, seeds, batch, dim);
    auto b = check_loss_gradient(name, StudentInput::embeddings, seeds, batch, dim);
    if (b.max_relative_error > a.max_relative_error) {
      b.coordinates += a.coordinates;
      out.push_back(b);
    } else {
      a.coordinates += b.coordinates;
      out.push_back(a);
    }
  }
  return out;
}

}  // namespace relkd
