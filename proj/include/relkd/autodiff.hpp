#pragma once

// Reverse-mode differentiation over dense double tensors.
//
// A Graph records every operation of one forward pass in creation order;
// parents always precede children, so backward is a single reverse sweep.
// Graphs are meant to live for one forward/backward pass and are not
// thread-safe. Parameters live outside the graph and receive gradients
// when backward runs.

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "relkd/error.hpp"
#include "relkd/tensor.hpp"

namespace relkd::ad {

inline constexpr double kLogFloor = 1e-12;
inline constexpr double kNormFloor = 1e-12;

enum class Op {
  leaf,
  constant,
  matmul,
  transpose,
  add,
  add_row,
  sub,
  mul,
  scale,
  scale_by,
  exp,
  log,
  tanh,
  sum,
  mean,
  row_softmax,
  row_log_softmax,
  l2_normalize_rows,
  square,
  negate,
  select_diag,
  concat_rows,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::matmul: return "matmul";
    case Op::transpose: return "transpose";
    case Op::add: return "add";
    case Op::add_row: return "add_row";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::scale_by: return "scale_by";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::tanh: return "tanh";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::row_softmax: return "row_softmax";
    case Op::row_log_softmax: return "row_log_softmax";
    case Op::l2_normalize_rows: return "l2_normalize_rows";
    case Op::square: return "square";
    case Op::negate: return "negate";
    case Op::select_diag: return "select_diag";
    case Op::concat_rows: return "concat_rows";
  }
  return "unknown";
}

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
  // Decoupled weight decay applies only when set.
  bool decay = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool is_trainable = true, bool use_decay = true)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)),
        trainable(is_trainable), decay(use_decay) {}

  void zero_grad() { grad = Tensor::zeros_like(value); }
};

class Graph;

// Handle to a node in a Graph. Cheap to copy; valid while its Graph lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  Graph& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = delete;
  Graph& operator=(Graph&&) = delete;

  Var constant(Tensor value) {
    Node n;
    n.op = Op::constant;
    n.value = std::move(value);
    return push(std::move(n));
  }

  // Binds a parameter; non-trainable parameters behave as constants.
  Var param(Parameter& p) {
    Node n;
    n.op = Op::leaf;
    n.value = p.value;
    n.param = &p;
    n.requires_grad = p.trainable;
    return push(std::move(n));
  }

  Var apply(Op op, std::initializer_list<Var> inputs, double aux = 0.0);

  // Zeroes the gradient of every parameter bound in this graph, then
  // accumulates d(loss)/d(param) into them.
  void backward(Var loss) { backward(loss, {}); }

  // Same, but also zeroes `params` first so unreachable ones end at zero.
  void backward(Var loss, std::span<Parameter* const> params);

  const Tensor& value(Var v) const { return nodes_.at(v.id_).value; }
  const Tensor& grad(Var v) const { return nodes_.at(v.id_).grad; }
  bool requires_grad(Var v) const { return nodes_.at(v.id_).requires_grad; }
  Op op(Var v) const { return nodes_.at(v.id_).op; }
  std::vector<std::size_t> parents(Var v) const { return nodes_.at(v.id_).parents; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::constant;
    std::vector<std::size_t> parents;
    Tensor value;
    Tensor grad;
    Parameter* param = nullptr;
    double aux = 0.0;
    bool requires_grad = false;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Tensor forward(Op op, const std::vector<const Tensor*>& in, double aux) const;
  void propagate(std::size_t id);

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const {
  if (!graph_) throw ContractError("value() on an unbound Var");
  return graph_->value(*this);
}

namespace detail {

[[noreturn]] inline void shape_fail(Op op, const std::vector<const Tensor*>& in) {
  std::string msg = std::string(op_name(op)) + ": incompatible shapes";
  for (const Tensor* t : in) msg += " " + to_string(t->shape());
  throw ShapeError(msg);
}

inline void require_rank(Op op, const std::vector<const Tensor*>& in, std::size_t rank) {
  for (const Tensor* t : in)
    if (t->rank() != rank) shape_fail(op, in);
}

inline void require_same(Op op, const std::vector<const Tensor*>& in) {
  if (in[0]->shape() != in[1]->shape()) shape_fail(op, in);
}

inline std::size_t arity(Op op) {
  switch (op) {
    case Op::leaf:
    case Op::constant: return 0;
    case Op::matmul:
    case Op::add:
    case Op::add_row:
    case Op::sub:
    case Op::mul:
    case Op::scale_by:
    case Op::concat_rows: return 2;
    default: return 1;
  }
}

}  // namespace detail

inline Tensor Graph::forward(Op op, const std::vector<const Tensor*>& in, double aux) const {
  using detail::require_rank;
  using detail::require_same;
  using detail::shape_fail;

  switch (op) {
    case Op::matmul: {
      require_rank(op, in, 2);
      if (in[0]->cols() != in[1]->rows()) shape_fail(op, in);
      return matmul_values(*in[0], *in[1]);
    }
    case Op::transpose:
      require_rank(op, in, 2);
      return transpose_values(*in[0]);
    case Op::add:
    case Op::sub:
    case Op::mul: {
      require_same(op, in);
      Tensor out = *in[0];
      auto o = out.data();
      auto b = in[1]->data();
      for (std::size_t i = 0; i < o.size(); ++i) {
        if (op == Op::add) o[i] += b[i];
        else if (op == Op::sub) o[i] -= b[i];
        else o[i] *= b[i];
      }
      return out;
    }
    case Op::add_row: {
      if (in[0]->rank() != 2 || in[1]->rank() != 1 || in[0]->cols() != in[1]->size()) shape_fail(op, in);
      Tensor out = *in[0];
      const std::size_t m = out.cols();
      auto b = in[1]->data();
      for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t j = 0; j < m; ++j) out.at(r, j) += b[j];
      return out;
    }
    case Op::scale: {
      Tensor out = *in[0];
      for (double& v : out.data()) v *= aux;
      return out;
    }
    case Op::scale_by: {
      if (!in[1]->is_scalar()) shape_fail(op, in);
      Tensor out = *in[0];
      const double s = in[1]->item();
      for (double& v : out.data()) v *= s;
      return out;
    }
    case Op::exp: {
      Tensor out = *in[0];
      for (double& v : out.data()) v = std::exp(v);
      return out;
    }
    case Op::log: {
      Tensor out = *in[0];
      auto o = out.data();
      for (std::size_t i = 0; i < o.size(); ++i) {
        if (!(o[i] >= 0.0)) {
          throw DomainError("log: non-positive input " + std::to_string(o[i]) + " at index " +
                            std::to_string(i));
        }
        o[i] = std::log(std::max(o[i], kLogFloor));
      }
      return out;
    }
    case Op::tanh: {
      Tensor out = *in[0];
      for (double& v : out.data()) v = std::tanh(v);
      return out;
    }
    case Op::sum:
    case Op::mean: {
      double s = 0.0;
      for (double v : in[0]->data()) s += v;
      if (op == Op::mean) {
        if (in[0]->size() == 0) throw ShapeError("mean: empty tensor");
        s /= static_cast<double>(in[0]->size());
      }
      return Tensor::scalar(s);
    }
    case Op::row_softmax:
    case Op::row_log_softmax: {
      require_rank(op, in, 2);
      Tensor out = *in[0];
      const std::size_t m = out.cols();
      for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        double mx = -std::numeric_limits<double>::infinity();
        for (double v : row) mx = std::max(mx, v);
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) z += std::exp(row[j] - mx);
        if (op == Op::row_softmax) {
          for (std::size_t j = 0; j < m; ++j) row[j] = std::exp(row[j] - mx) / z;
        } else {
          const double lz = std::log(z) + mx;
          for (std::size_t j = 0; j < m; ++j) row[j] -= lz;
        }
      }
      return out;
    }
    case Op::l2_normalize_rows: {
      require_rank(op, in, 2);
      Tensor out = *in[0];
      for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        const double norm = std::sqrt(dot(row, row));
        if (!(norm >= kNormFloor)) {
          throw DegenerateEmbeddingError("l2_normalize_rows: row " + std::to_string(r) +
                                         " has norm " + std::to_string(norm));
        }
        for (double& v : row) v /= norm;
      }
      return out;
    }
    case Op::square: {
      Tensor out = *in[0];
      for (double& v : out.data()) v *= v;
      return out;
    }
    case Op::negate: {
      Tensor out = *in[0];
      for (double& v : out.data()) v = -v;
      return out;
    }
    case Op::select_diag: {
      require_rank(op, in, 2);
      if (in[0]->rows() != in[0]->cols()) shape_fail(op, in);
      const std::size_t n = in[0]->rows();
      Tensor out(Shape{n});
      for (std::size_t i = 0; i < n; ++i) out[i] = in[0]->at(i, i);
      return out;
    }
    case Op::concat_rows: {
      require_rank(op, in, 2);
      if (in[0]->cols() != in[1]->cols()) shape_fail(op, in);
      std::vector<double> data(in[0]->storage());
      data.insert(data.end(), in[1]->storage().begin(), in[1]->storage().end());
      return Tensor(Shape{in[0]->rows() + in[1]->rows(), in[0]->cols()}, std::move(data));
    }
    case Op::leaf:
    case Op::constant: break;
  }
  throw ContractError(std::string("apply: op ") + std::string(op_name(op)) + " is not applicable");
}

inline Var Graph::apply(Op op, std::initializer_list<Var> inputs, double aux) {
  if (inputs.size() != detail::arity(op)) {
    throw ContractError(std::string(op_name(op)) + ": expected " + std::to_string(detail::arity(op)) +
                        " inputs, got " + std::to_string(inputs.size()));
  }
  std::vector<const Tensor*> values;
  Node n;
  n.op = op;
  n.aux = aux;
  for (const Var& v : inputs) {
    if (v.graph_ != this) throw ContractError(std::string(op_name(op)) + ": input from another graph");
    values.push_back(&nodes_[v.id_].value);
    n.parents.push_back(v.id_);
    n.requires_grad = n.requires_grad || nodes_[v.id_].requires_grad;
  }
  n.value = forward(op, values, aux);
  return push(std::move(n));
}

inline void Graph::propagate(std::size_t id) {
  Node& n = nodes_[id];
  const Tensor& gy = n.grad;
  const Tensor& y = n.value;
  auto parent = [&](std::size_t k) -> Node& { return nodes_[n.parents[k]]; };
  auto wants = [&](std::size_t k) { return parent(k).requires_grad; };

  switch (n.op) {
    case Op::leaf:
    case Op::constant: return;
    case Op::matmul: {
      const Tensor& a = parent(0).value;
      const Tensor& b = parent(1).value;
      if (wants(0)) {
        Tensor ga = matmul_values(gy, transpose_values(b));
        auto dst = parent(0).grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += ga[i];
      }
      if (wants(1)) {
        Tensor gb = matmul_values(transpose_values(a), gy);
        auto dst = parent(1).grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gb[i];
      }
      return;
    }
    case Op::transpose: {
      if (!wants(0)) return;
      Tensor& g = parent(0).grad;
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) g.at(i, j) += gy.at(j, i);
      return;
    }
    case Op::add:
    case Op::sub: {
      const double sign = n.op == Op::add ? 1.0 : -1.0;
      if (wants(0)) {
        auto dst = parent(0).grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gy[i];
      }
      if (wants(1)) {
        auto dst = parent(1).grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += sign * gy[i];
      }
      return;
    }
    case Op::add_row: {
      if (wants(0)) {
        auto dst = parent(0).grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gy[i];
      }
      if (wants(1)) {
        auto dst = parent(1).grad.data();
        for (std::size_t r = 0; r < gy.rows(); ++r)
          for (std::size_t j = 0; j < gy.cols(); ++j) dst[j] += gy.at(r, j);
      }
      return;
    }
    case Op::mul: {
      const Tensor& a = parent(0).value;
      const Tensor& b = parent(1).value;
      if (wants(0)) {
        auto dst = parent(0).grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gy[i] * b[i];
      }
      if (wants(1)) {
        auto dst = parent(1).grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gy[i] * a[i];
      }
      return;
    }
    case Op::scale: {
      if (!wants(0)) return;
      auto dst = parent(0).grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.aux * gy[i];
      return;
    }
    case Op::scale_by: {
      const Tensor& x = parent(0).value;
      const double s = parent(1).value.item();
      if (wants(0)) {
        auto dst = parent(0).grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * gy[i];
      }
      if (wants(1)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * gy[i];
        parent(1).grad[0] += acc;
      }
      return;
    }
    case Op::exp: {
      if (!wants(0)) return;
      auto dst = parent(0).grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += y[i] * gy[i];
      return;
    }
    case Op::log: {
      if (!wants(0)) return;
      const Tensor& x = parent(0).value;
      auto dst = parent(0).grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i)
        if (x[i] > kLogFloor) dst[i] += gy[i] / x[i];
      return;
    }
    case Op::tanh: {
      if (!wants(0)) return;
      auto dst = parent(0).grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += (1.0 - y[i] * y[i]) * gy[i];
      return;
    }
    case Op::sum:
    case Op::mean: {
      if (!wants(0)) return;
      auto dst = parent(0).grad.data();
      const double g = n.op == Op::sum ? gy[0] : gy[0] / static_cast<double>(dst.size());
      for (double& v : dst) v += g;
      return;
    }
    case Op::row_softmax: {
      if (!wants(0)) return;
      Tensor& g = parent(0).grad;
      const std::size_t m = y.cols();
      for (std::size_t r = 0; r < y.rows(); ++r) {
        double inner = 0.0;
        for (std::size_t j = 0; j < m; ++j) inner += y.at(r, j) * gy.at(r, j);
        for (std::size_t j = 0; j < m; ++j) g.at(r, j) += y.at(r, j) * (gy.at(r, j) - inner);
      }
      return;
    }
    case Op::row_log_softmax: {
      if (!wants(0)) return;
      Tensor& g = parent(0).grad;
      const std::size_t m = y.cols();
      for (std::size_t r = 0; r < y.rows(); ++r) {
        double total = 0.0;
        for (std::size_t j = 0; j < m; ++j) total += gy.at(r, j);
        for (std::size_t j = 0; j < m; ++j) g.at(r, j) += gy.at(r, j) - std::exp(y.at(r, j)) * total;
      }
      return;
    }
    case Op::l2_normalize_rows: {
      if (!wants(0)) return;
      const Tensor& x = parent(0).value;
      Tensor& g = parent(0).grad;
      for (std::size_t r = 0; r < y.rows(); ++r) {
        const double norm = std::sqrt(dot(x.row(r), x.row(r)));
        const double proj = dot(y.row(r), gy.row(r));
        for (std::size_t j = 0; j < y.cols(); ++j) g.at(r, j) += (gy.at(r, j) - y.at(r, j) * proj) / norm;
      }
      return;
    }
    case Op::square: {
      if (!wants(0)) return;
      const Tensor& x = parent(0).value;
      auto dst = parent(0).grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += 2.0 * x[i] * gy[i];
      return;
    }
    case Op::negate: {
      if (!wants(0)) return;
      auto dst = parent(0).grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= gy[i];
      return;
    }
    case Op::select_diag: {
      if (!wants(0)) return;
      Tensor& g = parent(0).grad;
      for (std::size_t i = 0; i < gy.size(); ++i) g.at(i, i) += gy[i];
      return;
    }
    case Op::concat_rows: {
      const std::size_t split = parent(0).value.size();
      if (wants(0)) {
        auto dst = parent(0).grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gy[i];
      }
      if (wants(1)) {
        auto dst = parent(1).grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gy[split + i];
      }
      return;
    }
  }
}

inline void Graph::backward(Var loss, std::span<Parameter* const> params) {
  if (loss.graph_ != this) throw ContractError("backward: loss belongs to another graph");
  if (!nodes_[loss.id_].value.is_scalar()) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        to_string(nodes_[loss.id_].value.shape()));
  }
  for (Parameter* p : params) p->zero_grad();
  for (Node& n : nodes_) {
    if (n.param) n.param->zero_grad();
    n.grad = n.requires_grad ? Tensor::zeros_like(n.value) : Tensor(Shape{0});
  }
  if (!nodes_[loss.id_].requires_grad) return;
  nodes_[loss.id_].grad[0] = 1.0;
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    if (nodes_[id].requires_grad) propagate(id);
  }
  for (Node& n : nodes_) {
    if (n.param && n.requires_grad) {
      auto dst = n.param->grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
    }
  }
}

// ---- operation helpers ----------------------------------------------------

inline Var matmul(Var a, Var b) { return a.graph().apply(Op::matmul, {a, b}); }
inline Var transpose(Var a) { return a.graph().apply(Op::transpose, {a}); }

// Adds tensors of equal shape, or a length-m vector to every row of an n×m matrix.
inline Var add(Var a, Var b) {
  if (a.shape().size() == 2 && b.shape().size() == 1) return a.graph().apply(Op::add_row, {a, b});
  return a.graph().apply(Op::add, {a, b});
}
inline Var sub(Var a, Var b) { return a.graph().apply(Op::sub, {a, b}); }
inline Var mul(Var a, Var b) { return a.graph().apply(Op::mul, {a, b}); }
inline Var scale(Var a, double c) { return a.graph().apply(Op::scale, {a}, c); }
inline Var scale(Var a, Var s) { return a.graph().apply(Op::scale_by, {a, s}); }
inline Var exp(Var a) { return a.graph().apply(Op::exp, {a}); }
inline Var log(Var a) { return a.graph().apply(Op::log, {a}); }
inline Var tanh(Var a) { return a.graph().apply(Op::tanh, {a}); }
inline Var sum(Var a) { return a.graph().apply(Op::sum, {a}); }
inline Var mean(Var a) { return a.graph().apply(Op::mean, {a}); }
inline Var row_softmax(Var a) { return a.graph().apply(Op::row_softmax, {a}); }
inline Var row_log_softmax(Var a) { return a.graph().apply(Op::row_log_softmax, {a}); }
inline Var l2_normalize_rows(Var a) { return a.graph().apply(Op::l2_normalize_rows, {a}); }
inline Var square(Var a) { return a.graph().apply(Op::square, {a}); }
inline Var negate(Var a) { return a.graph().apply(Op::negate, {a}); }
inline Var select_diag(Var a) { return a.graph().apply(Op::select_diag, {a}); }
inline Var concat_rows(Var a, Var b) { return a.graph().apply(Op::concat_rows, {a, b}); }

inline Var stop_gradient(Var a) { return a.graph().constant(a.value()); }

// ---- gradient checking ----------------------------------------------------

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_coordinate;
  std::size_t coordinates = 0;
};

// Compares analytic gradients against central differences over every
// coordinate of every trainable parameter. Relative error per coordinate is
// |analytic - fd| / max(|analytic|, |fd|, 1e-8).
inline GradCheckResult grad_check(const std::function<Var(Graph&)>& f,
                                  std::span<Parameter* const> params, double h = 1e-5) {
  std::vector<Tensor> analytic;
  {
    Graph g;
    Var loss = f(g);
    g.backward(loss, params);
    for (Parameter* p : params) analytic.push_back(p->grad);
  }

  auto evaluate = [&f](std::size_t coordinate) {
    Graph g;
    const double v = f(g).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss", coordinate);
    return v;
  };

  GradCheckResult result;
  std::size_t coordinate = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    if (!p.trainable) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i, ++coordinate) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double plus = evaluate(coordinate);
      p.value[i] = saved - h;
      const double minus = evaluate(coordinate);
      p.value[i] = saved;

      const double fd = (plus - minus) / (2.0 * h);
      const double an = analytic[k][i];
      if (!std::isfinite(an)) throw NumericError("grad_check: non-finite analytic gradient", coordinate);
      const double denom = std::max({std::abs(an), std::abs(fd), 1e-8});
      const double err = std::abs(an - fd) / denom;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_coordinate = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  result.coordinates = coordinate;
  return result;
}

}  // namespace relkd::ad
