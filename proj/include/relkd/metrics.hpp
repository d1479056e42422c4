#pragma once

// Non-differentiable diagnostics of an embedding space: positive/negative
// pair similarity statistics, histograms and the InfoNCE lower bound on
// teacher/student mutual information.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "relkd/error.hpp"
#include "relkd/tensor.hpp"

namespace relkd {

struct PairSimilarityStats {
  double pos_mean = 0.0;
  double neg_mean = 0.0;
  double gap = 0.0;
  std::vector<double> pos_values;
  std::vector<double> neg_values;
};

namespace detail {

inline void require_paired(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace detail

// Positives are the diagonal of the image-text cosine matrix, negatives every
// off-diagonal entry (row-major order).
inline PairSimilarityStats pair_similarity_stats(const Tensor& images, const Tensor& texts) {
  detail::require_paired(images, texts, "pair_similarity_stats");
  const std::size_t n = images.rows();
  if (n < 2) throw ContractError("pair_similarity_stats: need B >= 2 for negatives, got " + std::to_string(n));
  const Tensor sim = similarity_matrix(images, texts);
  PairSimilarityStats s;
  s.pos_values.reserve(n);
  s.neg_values.reserve(n * (n - 1));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) s.pos_values.push_back(sim.at(i, j));
      else s.neg_values.push_back(sim.at(i, j));
    }
  }
  s.pos_mean = detail::mean_of(s.pos_values);
  s.neg_mean = detail::mean_of(s.neg_values);
  s.gap = s.pos_mean - s.neg_mean;
  return s;
}

inline constexpr std::size_t kDefaultHistogramBins = 50;

// Equal-width bins over [lo, hi]; intervals are right-open except the last.
inline std::vector<std::size_t> similarity_histogram(const std::vector<double>& values,
                                                     std::size_t bins = kDefaultHistogramBins, double lo = -1.0,
                                                     double hi = 1.0) {
  if (bins == 0) throw ConfigError("similarity_histogram: bins must be >= 1");
  if (!(hi > lo)) throw ConfigError("similarity_histogram: empty range");
  constexpr double tol = 1e-9;
  std::vector<std::size_t> counts(bins, 0);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double v : values) {
    if (!(v >= lo - tol && v <= hi + tol)) {
      throw DomainError("similarity_histogram: value " + std::to_string(v) + " outside [" + std::to_string(lo) +
                        ", " + std::to_string(hi) + "]");
    }
    const double pos = std::floor((v - lo) / width);
    std::size_t idx = pos <= 0.0 ? 0 : static_cast<std::size_t>(pos);
    if (idx >= bins) idx = bins - 1;
    ++counts[idx];
  }
  return counts;
}

struct MiBound {
  std::size_t n_negatives = 0;
  double infonce_teacher_to_student = 0.0;  // teacher anchors
  double infonce_student_to_teacher = 0.0;  // student anchors
  double bound = 0.0;
};

namespace detail {

// Mean over anchors k of -log softmax_j(a_k · b_j / tau)[k].
inline double infonce(const Tensor& anchors, const Tensor& targets, double tau) {
  const Tensor sim = similarity_matrix(anchors, targets);
  const std::size_t n = sim.rows();
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, sim.at(k, j) / tau);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(sim.at(k, j) / tau - mx);
    total += std::log(z) + mx - sim.at(k, k) / tau;
  }
  return total / static_cast<double>(n);
}

}  // namespace detail

// log(N) - ½(InfoNCE(T→S) + InfoNCE(S→T)) with N = B - 1 in-batch negatives.
inline MiBound mi_lower_bound(const Tensor& teacher, const Tensor& student, double tau) {
  detail::require_paired(teacher, student, "mi_lower_bound");
  if (teacher.rows() < 2) throw ContractError("mi_lower_bound: need B >= 2 so that N = B - 1 > 0");
  if (!(tau > 0.0)) throw DomainError("mi_lower_bound: temperature must be positive");
  MiBound m;
  m.n_negatives = teacher.rows() - 1;
  m.infonce_teacher_to_student = detail::infonce(teacher, student, tau);
  m.infonce_student_to_teacher = detail::infonce(student, teacher, tau);
  m.bound = std::log(static_cast<double>(m.n_negatives)) -
            0.5 * (m.infonce_teacher_to_student + m.infonce_student_to_teacher);
  return m;
}

}  // namespace relkd
