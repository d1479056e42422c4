#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "relkd/error.hpp"
#include "relkd/tensor.hpp"

namespace relkd {

struct RetrievalResult {
  double i2t_r1 = 0.0;
  double i2t_r5 = 0.0;
  double t2i_r1 = 0.0;
  double t2i_r5 = 0.0;
  std::size_t n_queries = 0;
};

// 0-based rank of column `truth` in row `q`: candidates with a strictly
// higher score, plus equal-scored candidates with a lower index.
inline std::size_t rank_of_truth(const Tensor& scores, std::size_t q, std::size_t truth) {
  const double target = scores.at(q, truth);
  std::size_t rank = 0;
  for (std::size_t j = 0; j < scores.cols(); ++j) {
    const double s = scores.at(q, j);
    if (s > target || (s == target && j < truth)) ++rank;
  }
  return rank;
}

// Fraction of rows whose diagonal entry ranks within the top k.
inline double recall_at_k(const Tensor& scores, std::size_t k) {
  const std::size_t n = scores.rows();
  if (n < k) throw ConfigError("recall_at_k: batch of " + std::to_string(n) + " is smaller than k=" + std::to_string(k));
  std::size_t hits = 0;
  for (std::size_t q = 0; q < n; ++q)
    if (rank_of_truth(scores, q, q) < k) ++hits;
  return static_cast<double>(hits) / static_cast<double>(n);
}

inline RetrievalResult retrieval_recall(const Tensor& images, const Tensor& texts) {
  if (images.rows() != texts.rows()) {
    throw ShapeError("retrieval_recall: " + to_string(images.shape()) + " vs " + to_string(texts.shape()));
  }
  const Tensor i2t = similarity_matrix(images, texts);
  const Tensor t2i = transpose_values(i2t);
  RetrievalResult r;
  r.n_queries = images.rows();
  r.i2t_r1 = recall_at_k(i2t, 1);
  r.t2i_r1 = recall_at_k(t2i, 1);
  r.i2t_r5 = recall_at_k(i2t, 5);
  r.t2i_r5 = recall_at_k(t2i, 5);
  return r;
}

// L2-normalized mean text embedding per class.
inline Tensor class_prototypes(const Tensor& texts, const std::vector<int>& labels, std::size_t n_classes) {
  if (labels.size() != texts.rows()) throw ShapeError("class_prototypes: label count mismatch");
  Tensor out(Shape{n_classes, texts.cols()});
  std::vector<std::size_t> counts(n_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes) {
      throw DataError("class_prototypes: label " + std::to_string(labels[i]) + " out of range");
    }
    auto dst = out.row(static_cast<std::size_t>(labels[i]));
    auto src = texts.row(i);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    ++counts[static_cast<std::size_t>(labels[i])];
  }
  for (std::size_t c = 0; c < n_classes; ++c) {
    auto row = out.row(c);
    const double norm = std::sqrt(dot(row, row));
    if (counts[c] == 0 || !(norm > 0.0)) {
      throw DataError("class_prototypes: class " + std::to_string(c) + " has no usable samples");
    }
    for (double& v : row) v /= norm;
  }
  return out;
}

inline std::vector<std::size_t> predict_classes(const Tensor& samples, const Tensor& prototypes) {
  const Tensor sim = similarity_matrix(samples, prototypes);
  std::vector<std::size_t> pred(sim.rows(), 0);
  for (std::size_t i = 0; i < sim.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < sim.cols(); ++c)
      if (sim.at(i, c) > sim.at(i, best)) best = c;
    pred[i] = best;
  }
  return pred;
}

// Accuracy of nearest-prototype prediction; ties go to the lower class index.
inline double zero_shot_classify(const Tensor& samples, const Tensor& prototypes, const std::vector<int>& labels) {
  if (labels.size() != samples.rows()) throw ShapeError("zero_shot_classify: label count mismatch");
  const std::size_t n_classes = prototypes.rows();
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= n_classes) {
      throw DataError("zero_shot_classify: label " + std::to_string(l) + " out of range [0, " +
                      std::to_string(n_classes) + ")");
    }
  }
  if (labels.empty()) return 0.0;
  const auto pred = predict_classes(samples, prototypes);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == static_cast<std::size_t>(labels[i])) ++correct;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace relkd
