#pragma once

// Paired "image"/"text" features drawn from a shared latent concept model.
//
// Each concept c owns a latent z_c ~ N(0, I). Fixed random linear maps A and B
// (drawn once from the seed) send it into the two feature spaces, and every
// sample adds independent Gaussian noise:
//   image = A z_c + sigma * eps,   text = B z_c + sigma * eps'

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relkd/error.hpp"
#include "relkd/tensor.hpp"

namespace relkd {

struct SyntheticSpec {
  std::size_t latent_dim = 16;
  std::size_t image_dim = 32;
  std::size_t text_dim = 24;
  std::size_t n_concepts = 200;
  std::size_t samples_per_concept = 50;
  double noise_sigma = 0.3;
  std::uint64_t seed = 0;

  void validate() const {
    if (latent_dim == 0 || image_dim == 0 || text_dim == 0 || n_concepts == 0 || samples_per_concept == 0) {
      throw ConfigError("synthetic spec: all dimensions and counts must be >= 1");
    }
    if (!std::isfinite(noise_sigma) || noise_sigma < 0.0) {
      throw ConfigError("synthetic spec: noise_sigma must be finite and >= 0");
    }
  }
};

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + s + "'");
}

struct PairedDataset {
  Tensor image;  // N × image_dim
  Tensor text;   // N × text_dim
  std::vector<int> labels;
  std::vector<Split> splits;
  std::size_t n_concepts = 0;

  std::size_t size() const { return labels.size(); }

  PairedDataset rows(const std::vector<std::size_t>& idx) const {
    PairedDataset out;
    out.image = image.gather_rows(idx);
    out.text = text.gather_rows(idx);
    out.n_concepts = n_concepts;
    for (std::size_t i : idx) {
      out.labels.push_back(labels[i]);
      out.splits.push_back(splits[i]);
    }
    return out;
  }

  PairedDataset subset(Split s) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < size(); ++i)
      if (splits[i] == s) idx.push_back(i);
    return rows(idx);
  }

  friend bool operator==(const PairedDataset&, const PairedDataset&) = default;
};

inline PairedDataset generate(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  auto random_map = [&](std::size_t out_dim) {
    Tensor m(Shape{out_dim, spec.latent_dim});
    const double s = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim));
    for (double& v : m.data()) v = s * normal(rng);
    return m;
  };
  const Tensor a = random_map(spec.image_dim);
  const Tensor b = random_map(spec.text_dim);

  Tensor latents(Shape{spec.n_concepts, spec.latent_dim});
  for (double& v : latents.data()) v = normal(rng);

  const std::size_t n = spec.n_concepts * spec.samples_per_concept;
  PairedDataset d;
  d.image = Tensor(Shape{n, spec.image_dim});
  d.text = Tensor(Shape{n, spec.text_dim});
  d.labels.reserve(n);
  d.splits.assign(n, Split::train);
  d.n_concepts = spec.n_concepts;

  std::size_t row = 0;
  for (std::size_t c = 0; c < spec.n_concepts; ++c) {
    const auto z = latents.row(c);
    for (std::size_t s = 0; s < spec.samples_per_concept; ++s, ++row) {
      for (std::size_t i = 0; i < spec.image_dim; ++i) d.image.at(row, i) = dot(a.row(i), z) + spec.noise_sigma * normal(rng);
      for (std::size_t i = 0; i < spec.text_dim; ++i) d.text.at(row, i) = dot(b.row(i), z) + spec.noise_sigma * normal(rng);
      d.labels.push_back(static_cast<int>(c));
    }
  }
  return d;
}

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct DatasetSplits {
  PairedDataset train, val, test;
};

// Concept-stratified split. Rows of each concept are shuffled, then cut at
// boundaries taken from the running row count so split sizes round globally.
// The input dataset's split tags are overwritten in the returned copies.
inline DatasetSplits split(const PairedDataset& data, const SplitFractions& f, std::uint64_t seed) {
  if (!(f.train > 0.0 && f.val > 0.0 && f.test > 0.0) || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be positive and sum to 1");
  }
  std::mt19937_64 rng(seed);
  std::size_t n_concepts = data.n_concepts;
  for (int l : data.labels) n_concepts = std::max(n_concepts, static_cast<std::size_t>(l) + 1);
  std::vector<std::vector<std::size_t>> by_concept(n_concepts);
  for (std::size_t i = 0; i < data.size(); ++i) by_concept[static_cast<std::size_t>(data.labels[i])].push_back(i);

  std::vector<Split> assign(data.size(), Split::train);
  std::size_t seen = 0;
  auto cut = [](std::size_t rows, double frac) { return static_cast<std::size_t>(std::llround(static_cast<double>(rows) * frac)); };
  for (auto& rows : by_concept) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const std::size_t before = seen, after = seen + rows.size();
    const std::size_t n_train = cut(after, f.train) - cut(before, f.train);
    const std::size_t n_train_val =
        std::max(n_train, cut(after, f.train + f.val) - cut(before, f.train + f.val));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (k < n_train) assign[rows[k]] = Split::train;
      else if (k < n_train_val) assign[rows[k]] = Split::val;
      else assign[rows[k]] = Split::test;
    }
    seen = after;
  }

  PairedDataset tagged = data;
  tagged.splits = assign;
  tagged.n_concepts = n_concepts;
  DatasetSplits out{tagged.subset(Split::train), tagged.subset(Split::val), tagged.subset(Split::test)};
  for (const auto* part : {&out.train, &out.val, &out.test}) {
    if (part->size() == 0) throw ConfigError("split: a split received zero rows");
  }
  return out;
}

inline PairedDataset merge(const DatasetSplits& s) {
  PairedDataset out;
  const PairedDataset* parts[] = {&s.train, &s.val, &s.test};
  std::size_t n = 0;
  for (const auto* p : parts) n += p->size();
  out.image = Tensor(Shape{n, s.train.image.cols()});
  out.text = Tensor(Shape{n, s.train.text.cols()});
  out.n_concepts = s.train.n_concepts;
  std::size_t row = 0;
  for (const auto* p : parts) {
    for (std::size_t i = 0; i < p->size(); ++i, ++row) {
      std::copy(p->image.row(i).begin(), p->image.row(i).end(), out.image.row(row).begin());
      std::copy(p->text.row(i).begin(), p->text.row(i).end(), out.text.row(row).begin());
      out.labels.push_back(p->labels[i]);
      out.splits.push_back(p->splits[i]);
    }
  }
  return out;
}

// ---- line-delimited JSON records -----------------------------------------
// One pair per line: {"img": [...], "txt": [...], "label": k, "split": "..."}

inline void save(const PairedDataset& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (std::size_t i = 0; i < d.size(); ++i) {
    nlohmann::ordered_json j;
    auto img = d.image.row(i);
    auto txt = d.text.row(i);
    j["img"] = std::vector<double>(img.begin(), img.end());
    j["txt"] = std::vector<double>(txt.begin(), txt.end());
    j["label"] = d.labels[i];
    j["split"] = to_string(d.splits[i]);
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("write to '" + path + "' failed");
}

inline PairedDataset load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  std::vector<double> img, txt;
  std::size_t img_dim = 0, txt_dim = 0;
  PairedDataset d;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto im = j.at("img").get<std::vector<double>>();
      const auto tx = j.at("txt").get<std::vector<double>>();
      const int label = j.at("label").get<int>();
      const Split sp = parse_split(j.at("split").get<std::string>());
      if (d.labels.empty()) {
        img_dim = im.size();
        txt_dim = tx.size();
      } else if (im.size() != img_dim || tx.size() != txt_dim) {
        throw DataError("feature width differs from earlier records");
      }
      if (label < 0) throw DataError("negative label");
      img.insert(img.end(), im.begin(), im.end());
      txt.insert(txt.end(), tx.begin(), tx.end());
      d.labels.push_back(label);
      d.splits.push_back(sp);
      d.n_concepts = std::max(d.n_concepts, static_cast<std::size_t>(label) + 1);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what());
    } catch (const DataError& e) {
      throw ParseError(line_no, e.what());
    }
  }
  const std::size_t n = d.labels.size();
  d.image = Tensor(Shape{n, img_dim}, std::move(img));
  d.text = Tensor(Shape{n, txt_dim}, std::move(txt));
  return d;
}

}  // namespace relkd
