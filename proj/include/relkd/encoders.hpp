#pragma once

// Toy dual encoders: per modality a two-layer perceptron followed by a linear
// projection into the shared embedding space and row-wise L2 normalization.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relkd/autodiff.hpp"
#include "relkd/error.hpp"
#include "relkd/tensor.hpp"

namespace relkd {

enum class Network { teacher, student };
enum class Modality { image, text };

// identity exists for tests that need the encoder to be linear.
enum class Activation { tanh, identity };

inline std::string to_string(Network n) { return n == Network::teacher ? "teacher" : "student"; }
inline std::string to_string(Modality m) { return m == Modality::image ? "image" : "text"; }

struct EncoderWidths {
  std::size_t input = 0;
  std::size_t hidden = 0;
  std::size_t embed = 0;

  friend bool operator==(const EncoderWidths&, const EncoderWidths&) = default;
};

struct DenseLayer {
  ad::Parameter weight;  // fan_in × fan_out
  ad::Parameter bias;    // fan_out
};

struct EncoderParams {
  EncoderWidths widths;
  std::uint64_t seed = 0;
  Activation activation = Activation::tanh;
  std::vector<DenseLayer> layers;
  ad::Parameter projection;  // hidden × embed, no bias

  std::vector<ad::Parameter*> parameters() {
    std::vector<ad::Parameter*> out;
    for (auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    out.push_back(&projection);
    return out;
  }
};

// Differentiable batch of unit-norm embeddings with provenance tags.
struct EmbeddingBatch {
  ad::Var rows;
  Network network = Network::student;
  Modality modality = Modality::image;

  std::size_t size() const { return rows.value().rows(); }
  std::size_t dim() const { return rows.value().cols(); }
  const Tensor& value() const { return rows.value(); }
};

namespace detail {

inline Tensor uniform_matrix(std::mt19937_64& rng, std::size_t fan_in, std::size_t fan_out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(Shape{fan_in, fan_out});
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace detail

inline EncoderParams init_encoder(std::size_t input_dim, std::size_t hidden_dim, std::size_t embed_dim,
                                  std::uint64_t seed, const std::string& prefix = "encoder") {
  if (input_dim == 0 || hidden_dim == 0 || embed_dim == 0) {
    throw ConfigError("init_encoder: dimensions must be >= 1 (got " + std::to_string(input_dim) + ", " +
                      std::to_string(hidden_dim) + ", " + std::to_string(embed_dim) + ")");
  }
  std::mt19937_64 rng(seed);
  EncoderParams p;
  p.widths = {input_dim, hidden_dim, embed_dim};
  p.seed = seed;
  const std::size_t fan_in[2] = {input_dim, hidden_dim};
  for (std::size_t l = 0; l < 2; ++l) {
    const std::string name = prefix + ".layer" + std::to_string(l);
    p.layers.push_back(DenseLayer{
        ad::Parameter(name + ".weight", detail::uniform_matrix(rng, fan_in[l], hidden_dim)),
        ad::Parameter(name + ".bias", Tensor(Shape{hidden_dim}, 0.0), true, false),
    });
  }
  p.projection = ad::Parameter(prefix + ".projection", detail::uniform_matrix(rng, hidden_dim, embed_dim));
  return p;
}

namespace detail {

inline void check_features(const EncoderParams& params, const Tensor& features) {
  if (features.rank() != 2 || features.cols() != params.widths.input) {
    throw ShapeError("encode: features " + to_string(features.shape()) + " do not match input width " +
                     std::to_string(params.widths.input));
  }
  if (features.rows() == 0) throw ShapeError("encode: empty batch");
  if (!features.all_finite()) throw DataError("encode: non-finite feature value");
}

template <typename Params, typename Bind>
ad::Var forward(ad::Graph& g, Params& params, const Tensor& features, Bind bind) {
  ad::Var h = g.constant(features);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    h = ad::add(ad::matmul(h, bind(params.layers[l].weight)), bind(params.layers[l].bias));
    if (params.activation == Activation::tanh) h = ad::tanh(h);
  }
  return ad::l2_normalize_rows(ad::matmul(h, bind(params.projection)));
}

}  // namespace detail

// Binds the encoder parameters into `g` so backward reaches them.
inline EmbeddingBatch encode(ad::Graph& g, EncoderParams& params, const Tensor& features, Network network,
                             Modality modality) {
  detail::check_features(params, features);
  ad::Var rows = detail::forward(g, params, features, [&g](ad::Parameter& p) { return g.param(p); });
  return {rows, network, modality};
}

// Plain evaluation without gradients.
inline Tensor embed(const EncoderParams& params, const Tensor& features) {
  detail::check_features(params, features);
  ad::Graph g;
  return detail::forward(g, params, features, [&g](const ad::Parameter& p) { return g.constant(p.value); })
      .value();
}

struct DualEncoder {
  EncoderParams image;
  EncoderParams text;
  Network network = Network::student;

  std::vector<ad::Parameter*> parameters() {
    auto out = image.parameters();
    auto t = text.parameters();
    out.insert(out.end(), t.begin(), t.end());
    return out;
  }
};

inline DualEncoder init_dual_encoder(std::size_t image_dim, std::size_t text_dim, std::size_t hidden_dim,
                                     std::size_t embed_dim, std::uint64_t seed, Network network) {
  const std::string tag = to_string(network);
  return DualEncoder{
      init_encoder(image_dim, hidden_dim, embed_dim, seed * 2, tag + ".image"),
      init_encoder(text_dim, hidden_dim, embed_dim, seed * 2 + 1, tag + ".text"),
      network,
  };
}

// ---- checkpoint serialization --------------------------------------------

namespace detail {

inline nlohmann::ordered_json matrix_to_json(const Tensor& t) {
  auto out = nlohmann::ordered_json::array();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    auto row = t.row(r);
    out.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return out;
}

inline Tensor matrix_from_json(const nlohmann::ordered_json& j, std::size_t rows, std::size_t cols,
                               const std::string& what) {
  if (!j.is_array() || j.size() != rows) throw DataError(what + ": expected " + std::to_string(rows) + " rows");
  Tensor t(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    if (!j[r].is_array() || j[r].size() != cols) {
      throw DataError(what + ": row " + std::to_string(r) + " should have " + std::to_string(cols) + " entries");
    }
    for (std::size_t c = 0; c < cols; ++c) t.at(r, c) = j[r][c].get<double>();
  }
  if (!t.all_finite()) throw DataError(what + ": non-finite entry");
  return t;
}

}  // namespace detail

inline nlohmann::ordered_json encoder_to_json(const EncoderParams& p) {
  nlohmann::ordered_json j;
  j["widths"] = {p.widths.input, p.widths.hidden, p.widths.embed};
  auto layers = nlohmann::ordered_json::array();
  for (const auto& l : p.layers) {
    nlohmann::ordered_json lj;
    lj["weight"] = detail::matrix_to_json(l.weight.value);
    lj["bias"] = l.bias.value.storage();
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  j["projection"] = detail::matrix_to_json(p.projection.value);
  j["seed"] = p.seed;
  j["activation"] = p.activation == Activation::tanh ? "tanh" : "identity";
  return j;
}

inline EncoderParams encoder_from_json(const nlohmann::ordered_json& j, const std::string& prefix) {
  try {
    const auto w = j.at("widths").get<std::vector<std::size_t>>();
    if (w.size() != 3) throw DataError("checkpoint: widths must have 3 entries");
    EncoderParams p = init_encoder(w[0], w[1], w[2], j.value("seed", std::uint64_t{0}), prefix);
    const auto& layers = j.at("layers");
    if (!layers.is_array() || layers.size() != p.layers.size()) throw DataError("checkpoint: expected 2 layers");
    const std::size_t fan_in[2] = {w[0], w[1]};
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      p.layers[l].weight.value =
          detail::matrix_from_json(layers[l].at("weight"), fan_in[l], w[1], "layer weight");
      auto bias = layers[l].at("bias").get<std::vector<double>>();
      if (bias.size() != w[1]) throw DataError("checkpoint: bias length mismatch");
      p.layers[l].bias.value = Tensor::vector(std::move(bias));
      p.layers[l].weight.zero_grad();
      p.layers[l].bias.zero_grad();
    }
    p.projection.value = detail::matrix_from_json(j.at("projection"), w[1], w[2], "projection");
    p.projection.zero_grad();
    p.activation = j.value("activation", std::string("tanh")) == "identity" ? Activation::identity
                                                                            : Activation::tanh;
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

}  // namespace relkd
