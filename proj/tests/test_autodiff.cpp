#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "relkd/autodiff.hpp"

using namespace relkd;
using Catch::Approx;

namespace {

Tensor random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(Shape{r, c});
  for (double& v : t.data()) v = n(rng);
  return t;
}

}  // namespace

TEST_CASE("row softmax of [2,1,0]") {
  ad::Graph g;
  auto p = ad::row_softmax(g.constant(Tensor::matrix({{2.0, 1.0, 0.0}})));
  const double z = std::exp(2.0) + std::exp(1.0) + 1.0;
  CHECK(p.value().at(0, 0) == Approx(std::exp(2.0) / z).epsilon(1e-14));
  CHECK(p.value().at(0, 0) == Approx(0.6652).margin(1e-4));
  CHECK(p.value().at(0, 1) == Approx(0.2447).margin(1e-4));
  CHECK(p.value().at(0, 2) == Approx(0.0900).margin(1e-4));
}

TEST_CASE("row normalization of [3,4]") {
  ad::Graph g;
  auto n = ad::l2_normalize_rows(g.constant(Tensor::matrix({{3.0, 4.0}})));
  CHECK(n.value().at(0, 0) == Approx(0.6).epsilon(1e-15));
  CHECK(n.value().at(0, 1) == Approx(0.8).epsilon(1e-15));
}

TEST_CASE("gradient of sum of squares is 2x") {
  ad::Parameter x("x", Tensor::matrix({{1.0, -2.0}, {0.5, 3.0}}));
  ad::Graph g;
  auto loss = ad::sum(ad::square(g.param(x)));
  std::vector<ad::Parameter*> ps{&x};
  g.backward(loss, ps);
  for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad[i] == 2.0 * x.value[i]);
}

TEST_CASE("gradient of mean is 1/n") {
  ad::Parameter x("x", Tensor::matrix({{1.0, 2.0, 3.0}, {4.0, 5.0, 6.0}}));
  ad::Graph g;
  std::vector<ad::Parameter*> ps{&x};
  g.backward(ad::mean(g.param(x)), ps);
  for (double v : x.grad.data()) CHECK(v == Approx(1.0 / 6.0).epsilon(1e-15));
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(3);
  ad::Parameter x("x", random_matrix(rng, 3, 4));
  std::vector<ad::Parameter*> ps{&x};
  auto f = [&](ad::Graph& g) { return ad::sum(ad::tanh(ad::matmul(g.param(x), ad::transpose(g.param(x))))); };

  ad::Graph g1;
  g1.backward(f(g1), ps);
  const Tensor base = x.grad;

  ad::Graph g2;
  g2.backward(ad::scale(f(g2), 3.0), ps);
  for (std::size_t i = 0; i < base.data().size(); ++i) CHECK(x.grad[i] == Approx(3.0 * base[i]).epsilon(1e-13));

  ad::Graph g3;
  g3.backward(ad::add(f(g3), f(g3)), ps);
  for (std::size_t i = 0; i < base.data().size(); ++i) CHECK(x.grad[i] == Approx(2.0 * base[i]).epsilon(1e-13));
}

TEST_CASE("identical graphs replay bitwise") {
  std::mt19937_64 rng(11);
  ad::Parameter a("a", random_matrix(rng, 4, 5));
  ad::Parameter b("b", random_matrix(rng, 5, 3));
  std::vector<ad::Parameter*> ps{&a, &b};
  auto run = [&] {
    ad::Graph g;
    auto y = ad::row_log_softmax(ad::l2_normalize_rows(ad::matmul(g.param(a), g.param(b))));
    auto loss = ad::mean(ad::exp(ad::scale(y, 0.5)));
    g.backward(loss, ps);
    return std::make_tuple(loss.item(), a.grad, b.grad);
  };
  const auto first = run();
  const auto second = run();
  CHECK(std::get<0>(first) == std::get<0>(second));
  CHECK(std::get<1>(first) == std::get<1>(second));
  CHECK(std::get<2>(first) == std::get<2>(second));
}

TEST_CASE("every op passes a finite-difference check") {
  std::mt19937_64 rng(5);
  ad::Parameter a("a", random_matrix(rng, 3, 4));
  ad::Parameter b("b", random_matrix(rng, 4, 3));
  ad::Parameter r("r", Tensor::vector({0.3, -0.2, 0.1}));
  ad::Parameter s("s", Tensor::scalar(0.7));
  std::vector<ad::Parameter*> ps{&a, &b, &r, &s};
  auto f = [&](ad::Graph& g) {
    auto m = ad::add(ad::matmul(g.param(a), g.param(b)), g.param(r));
    auto n = ad::l2_normalize_rows(ad::tanh(m));
    auto lp = ad::row_log_softmax(ad::scale(n, ad::exp(g.param(s))));
    auto p = ad::row_softmax(ad::sub(n, ad::transpose(n)));
    auto d = ad::select_diag(ad::mul(p, lp));
    auto c = ad::concat_rows(ad::square(n), ad::negate(p));
    auto lg = ad::log(ad::add(ad::exp(n), g.constant(Tensor(Shape{3, 3}, 0.1))));
    return ad::add(ad::add(ad::sum(d), ad::mean(c)), ad::scale(ad::sum(lg), 0.1));
  };
  const auto res = ad::grad_check(f, ps);
  CHECK(res.max_relative_error < 1e-6);
  CHECK(res.coordinates == 12 + 12 + 3 + 1);
}

TEST_CASE("stop_gradient blocks flow") {
  ad::Parameter x("x", Tensor::matrix({{1.0, 2.0}}));
  ad::Graph g;
  std::vector<ad::Parameter*> ps{&x};
  auto v = g.param(x);
  g.backward(ad::sum(ad::mul(v, ad::stop_gradient(v))), ps);
  CHECK(x.grad[0] == 1.0);
  CHECK(x.grad[1] == 2.0);
}

TEST_CASE("non-trainable parameters receive no gradient") {
  ad::Parameter x("x", Tensor::matrix({{1.0, 2.0}}), false);
  ad::Graph g;
  std::vector<ad::Parameter*> ps{&x};
  g.backward(ad::sum(ad::square(g.param(x))), ps);
  CHECK(x.grad[0] == 0.0);
  CHECK(x.grad[1] == 0.0);
}

TEST_CASE("error contracts") {
  ad::Graph g;
  auto a = g.constant(Tensor(Shape{2, 3}, 1.0));
  auto b = g.constant(Tensor(Shape{2, 3}, 1.0));
  CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
  CHECK_THROWS_AS(g.backward(a), ContractError);
  CHECK_THROWS_AS(ad::log(g.constant(Tensor::matrix({{-1.0}}))), DomainError);
  CHECK_THROWS_AS(ad::l2_normalize_rows(g.constant(Tensor(Shape{1, 3}, 0.0))), DegenerateEmbeddingError);

  ad::Graph other;
  auto c = other.constant(Tensor::scalar(1.0));
  CHECK_THROWS_AS(g.backward(c), ContractError);
}

TEST_CASE("log floors tiny inputs") {
  ad::Parameter x("x", Tensor::matrix({{0.0, 1e-20, 2.0}}));
  ad::Graph g;
  auto y = ad::log(g.param(x));
  CHECK(y.value()[0] == Approx(std::log(1e-12)));
  CHECK(y.value()[1] == Approx(std::log(1e-12)));
  std::vector<ad::Parameter*> ps{&x};
  g.backward(ad::sum(y), ps);
  CHECK(x.grad[0] == 0.0);
  CHECK(x.grad[2] == Approx(0.5));
}

TEST_CASE("grad_check rejects non-finite losses") {
  ad::Parameter x("x", Tensor::matrix({{1.0}}));
  std::vector<ad::Parameter*> ps{&x};
  auto f = [&](ad::Graph& g) { return ad::sum(ad::scale(g.param(x), std::numeric_limits<double>::infinity())); };
  CHECK_THROWS_AS(ad::grad_check(f, ps), NumericError);
}
