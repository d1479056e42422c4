#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "relkd/gradient_suite.hpp"
#include "relkd/losses.hpp"

using namespace relkd;
using Catch::Approx;

namespace {

EmbeddingBatch batch(ad::Graph& g, const oracle::Mat& m, Network n, Modality mod) {
  return {g.constant(oracle::to_tensor(m)), n, mod};
}

struct Quad {
  oracle::Mat vt, st, vs, ss;
};

Quad random_quad(std::mt19937_64& rng, std::size_t b, std::size_t d) {
  return {oracle::random_unit_rows(rng, b, d), oracle::random_unit_rows(rng, b, d), oracle::random_unit_rows(rng, b, d),
          oracle::random_unit_rows(rng, b, d)};
}

struct Taus {
  double task, teacher, student, image, text, cross;
};

Taus random_taus(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.5);
  return {u(rng), u(rng), u(rng), u(rng), u(rng), u(rng)};
}

struct Built {
  EmbeddingBatch vt, st, vs, ss;
};

Built build(ad::Graph& g, const Quad& q) {
  return {batch(g, q.vt, Network::teacher, Modality::image), batch(g, q.st, Network::teacher, Modality::text),
          batch(g, q.vs, Network::student, Modality::image), batch(g, q.ss, Network::student, Modality::text)};
}

// All seven loss values in a fixed order.
std::vector<double> library_losses(const Quad& q, const Taus& t) {
  ad::Graph g;
  auto e = build(g, q);
  return {
      clip_loss(e.vs, e.ss, fixed_temperature(g, t.task)).value.item(),
      fd_loss(e.vt, e.st, e.vs, e.ss).item(),
      icl_loss(e.vs, e.ss, e.vt, e.st, fixed_temperature(g, t.task)).value.item(),
      hrd_loss(e.vt, e.st, e.vs, e.ss, fixed_temperature(g, t.teacher), fixed_temperature(g, t.student)).value.item(),
      vrd_ce_loss(e.vt, e.vs, e.st, e.ss, fixed_temperature(g, t.image), fixed_temperature(g, t.text)).value.item(),
      vrd_kl_loss(e.vt, e.vs, e.st, e.ss, fixed_temperature(g, t.image), fixed_temperature(g, t.text)).value.item(),
      xrd_loss(e.vt, e.st, e.vs, e.ss, fixed_temperature(g, t.cross)).value.item(),
  };
}

std::vector<double> oracle_losses(const Quad& q, const Taus& t) {
  return {
      oracle::clip(q.vs, q.ss, t.task),
      oracle::fd(q.vt, q.st, q.vs, q.ss),
      oracle::icl(q.vs, q.ss, q.vt, q.st, t.task),
      oracle::hrd(q.vt, q.st, q.vs, q.ss, t.teacher, t.student),
      oracle::vrd_ce(q.vt, q.vs, q.st, q.ss, t.image, t.text),
      oracle::vrd_kl(q.vt, q.vs, q.st, q.ss, t.image, t.text),
      oracle::xrd(q.vt, q.st, q.vs, q.ss, t.cross),
  };
}

oracle::Mat permute(const oracle::Mat& m, const std::vector<std::size_t>& perm) {
  oracle::Mat out(m.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out[i] = m[perm[i]];
  return out;
}

const oracle::Mat kOrthoPair = {{1.0, 0.0}, {0.0, 1.0}};

}  // namespace

TEST_CASE("similarity distribution closed forms") {
  ad::Graph g;
  auto a = batch(g, kOrthoPair, Network::teacher, Modality::image);
  auto b = batch(g, kOrthoPair, Network::student, Modality::text);
  auto d = similarity_distribution(a, b, 1.0);
  const double e = std::exp(1.0);
  CHECK(d.probs.value().at(0, 0) == Approx(e / (e + 1.0)).epsilon(1e-14));
  CHECK(d.probs.value().at(0, 0) == Approx(0.7311).margin(1e-4));
  CHECK(d.probs.value().at(0, 1) == Approx(0.2689).margin(1e-4));
  CHECK(d.anchor == EmbeddingTag{Network::teacher, Modality::image});
  CHECK(d.target == EmbeddingTag{Network::student, Modality::text});
  CHECK(d.tau == 1.0);

  auto same = batch(g, {{1.0, 0.0}, {1.0, 0.0}, {1.0, 0.0}}, Network::student, Modality::image);
  auto u = similarity_distribution(same, same, 0.3);
  for (double v : u.probs.value().data()) CHECK(v == Approx(1.0 / 3.0).epsilon(1e-14));

  auto one = batch(g, {{0.6, 0.8}}, Network::student, Modality::image);
  CHECK(similarity_distribution(one, one, 0.07).probs.value().item() == 1.0);
}

TEST_CASE("similarity distribution errors") {
  ad::Graph g;
  auto a = batch(g, kOrthoPair, Network::teacher, Modality::image);
  auto b = batch(g, {{1.0, 0.0}}, Network::student, Modality::text);
  CHECK_THROWS_AS(similarity_distribution(a, b, 1.0), ShapeError);
  CHECK_THROWS_AS(similarity_distribution(a, a, 0.0), DomainError);
  CHECK_THROWS_AS(similarity_distribution(a, a, -1.0), DomainError);
}

TEST_CASE("kl_rows closed forms") {
  ad::Graph g;
  auto p = distribution_from_probabilities(g.constant(Tensor::matrix({{0.5, 0.5}})));
  auto q = distribution_from_probabilities(g.constant(Tensor::matrix({{0.25, 0.75}})));
  const double expected = 0.5 * std::log(2.0) + 0.5 * std::log(0.5 / 0.75);
  CHECK(kl_rows(p, q).item() == Approx(expected).epsilon(1e-14));
  CHECK(kl_rows(p, q).item() == Approx(0.143841).margin(1e-6));
  CHECK(kl_rows(p, p).item() == 0.0);
  auto wide = distribution_from_probabilities(g.constant(Tensor::matrix({{0.2, 0.3, 0.5}})));
  CHECK_THROWS(kl_rows(p, wide));
}

TEST_CASE("clip loss closed forms") {
  ad::Graph g;
  auto v = batch(g, kOrthoPair, Network::student, Modality::image);
  auto s = batch(g, kOrthoPair, Network::student, Modality::text);
  auto c = clip_loss(v, s, fixed_temperature(g, 1.0));
  CHECK(c.value.item() == Approx(std::log1p(std::exp(-1.0))).epsilon(1e-14));
  CHECK(c.value.item() == Approx(0.31326).margin(1e-5));
  CHECK(c.image_to_text.item() == c.text_to_image.item());

  auto one = batch(g, {{0.6, 0.8}}, Network::student, Modality::image);
  CHECK(clip_loss(one, one, fixed_temperature(g, 0.07)).value.item() == 0.0);
}

TEST_CASE("fd loss closed form on unnormalized rows") {
  ad::Graph g;
  auto vt = batch(g, {{1.0, 0.0}, {0.0, 1.0}}, Network::teacher, Modality::image);
  auto vs = batch(g, {{1.1, 0.0}, {0.0, 1.0}}, Network::student, Modality::image);
  auto st = batch(g, kOrthoPair, Network::teacher, Modality::text);
  auto ss = batch(g, kOrthoPair, Network::student, Modality::text);
  CHECK(fd_loss(vt, st, vs, ss).item() == Approx(0.005).epsilon(1e-12));
  CHECK(fd_loss(vt, st, vt, st).item() == 0.0);
  auto short_batch = batch(g, {{1.0, 0.0}}, Network::student, Modality::image);
  CHECK_THROWS_AS(fd_loss(vt, st, short_batch, ss), ShapeError);
}

TEST_CASE("vrd cross-entropy closed form") {
  ad::Graph g;
  auto vt = batch(g, kOrthoPair, Network::teacher, Modality::image);
  auto st = batch(g, kOrthoPair, Network::teacher, Modality::text);
  auto v = vrd_ce_loss(vt, vt, st, st, fixed_temperature(g, 1.0), fixed_temperature(g, 1.0));
  CHECK(v.value.item() == Approx(2.0 * std::log1p(std::exp(-1.0))).epsilon(1e-14));
  CHECK(v.value.item() == Approx(0.62652).margin(1e-5));
}

TEST_CASE("vrd is the sum of its parts") {
  std::mt19937_64 rng(8);
  const Quad q = random_quad(rng, 4, 5);
  ad::Graph g;
  auto e = build(g, q);
  auto v = vrd_loss(e.vt, e.vs, e.st, e.ss, fixed_temperature(g, 0.3), fixed_temperature(g, 0.6));
  CHECK(v.value.item() == v.ce.value.item() + v.kl.value.item());
  CHECK(v.value.item() == Approx(oracle::vrd_ce(q.vt, q.vs, q.st, q.ss, 0.3, 0.6) +
                                 oracle::vrd_kl(q.vt, q.vs, q.st, q.ss, 0.3, 0.6))
                              .margin(1e-12));
}

TEST_CASE("weighted total combines present components") {
  ad::Graph g;
  LossBundle b;
  b.task = g.constant(Tensor::scalar(1.0));
  for (auto* slot : {&b.fd, &b.icl, &b.hrd, &b.vrd, &b.xrd}) *slot = g.constant(Tensor::scalar(1.0));
  CHECK(weighted_total(b, LossWeights{}).item() == 2005.0);
  LossBundle only_task;
  only_task.task = b.task;
  CHECK(weighted_total(only_task, LossWeights{}).item() == 1.0);
  CHECK_THROWS_AS(weighted_total(b, LossWeights{-1.0, 1.0, 1.0}), ConfigError);
}

TEST_CASE("clip_rd_total respects the enabled set") {
  std::mt19937_64 rng(4);
  const Quad q = random_quad(rng, 4, 6);
  const Taus t = random_taus(rng);
  ad::Graph g;
  auto e = build(g, q);
  TemperatureVars tv{fixed_temperature(g, t.task), fixed_temperature(g, t.teacher), fixed_temperature(g, t.student),
                     fixed_temperature(g, t.image), fixed_temperature(g, t.text), fixed_temperature(g, t.cross)};
  DistillInputs in{e.vt, e.st, e.vs, e.ss, tv};

  auto none = clip_rd_total(LossSet{}, LossWeights{}, in);
  CHECK(none.total.item() == none.task.item());
  CHECK_FALSE(none.fd.has_value());
  CHECK_FALSE(none.xrd.has_value());

  auto kd = clip_rd_total(LossSet::clip_kd(), LossWeights{}, in);
  CHECK(kd.fd.has_value());
  CHECK(kd.icl.has_value());
  CHECK(kd.hrd.has_value());
  CHECK_FALSE(kd.vrd.has_value());
  CHECK_FALSE(kd.xrd.has_value());

  auto rd = clip_rd_total(LossSet::clip_rd(), LossWeights{}, in);
  const auto o = oracle_losses(q, t);
  const double expected = o[0] + 2000.0 * o[1] + o[2] + o[3] + (o[4] + o[5]) + o[6];
  CHECK(rd.total.item() == Approx(expected).epsilon(1e-12));
  const double recombined = rd.task.item() + 2000.0 * rd.fd->item() + rd.icl->item() + rd.hrd->item() +
                            rd.vrd->item() + rd.xrd->item();
  CHECK(std::abs(rd.total.item() - recombined) <= 1e-12 * std::max(1.0, std::abs(recombined)));
}

TEST_CASE("loss set parsing") {
  CHECK(LossSet::parse("FD,ICL,HRD") == LossSet::clip_kd());
  CHECK(LossSet::parse("") == LossSet{});
  CHECK(LossSet::parse("FD,ICL,HRD,VRD,XRD") == LossSet::clip_rd());
  CHECK_THROWS_AS(LossSet::parse("FD,CRD"), ConfigError);
}

TEST_CASE("every loss matches its scalar oracle") {
  for (std::size_t b = 2; b <= 5; ++b) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(seed * 31 + b);
      const Quad q = random_quad(rng, b, 6);
      const Taus t = random_taus(rng);
      const auto lib = library_losses(q, t);
      const auto ref = oracle_losses(q, t);
      for (std::size_t k = 0; k < lib.size(); ++k) {
        INFO("B=" << b << " seed=" << seed << " loss#" << k);
        CHECK(std::abs(lib[k] - ref[k]) <= 1e-10);
      }
    }
  }
}

TEST_CASE("distributions are row-stochastic and KL is non-negative") {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> bdist(1, 8);
  std::uniform_real_distribution<double> tdist(0.01, 5.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = bdist(rng);
    ad::Graph g;
    auto a = batch(g, oracle::random_unit_rows(rng, b, 4), Network::teacher, Modality::image);
    auto c = batch(g, oracle::random_unit_rows(rng, b, 4), Network::student, Modality::text);
    auto p = similarity_distribution(a, c, tdist(rng));
    auto q = similarity_distribution(c, a, tdist(rng));
    for (std::size_t r = 0; r < b; ++r) {
      double s = 0.0;
      for (double v : p.probs.value().row(r)) {
        CHECK(v > 0.0);
        CHECK(v <= 1.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
    CHECK(kl_rows(p, q).item() >= -1e-12);
  }
}

TEST_CASE("batch permutation leaves every loss unchanged") {
  std::mt19937_64 rng(19);
  const Quad q = random_quad(rng, 5, 6);
  const Taus t = random_taus(rng);
  const auto base = library_losses(q, t);
  std::vector<std::size_t> perm(5);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    const Quad p{permute(q.vt, perm), permute(q.st, perm), permute(q.vs, perm), permute(q.ss, perm)};
    const auto got = library_losses(p, t);
    for (std::size_t k = 0; k < base.size(); ++k) CHECK(std::abs(got[k] - base[k]) <= 1e-12);
  }
}

TEST_CASE("identity collapses") {
  std::mt19937_64 rng(2);
  const Quad r = random_quad(rng, 4, 6);
  const Quad q{r.vt, r.st, r.vt, r.st};
  ad::Graph g;
  auto e = build(g, q);
  CHECK(fd_loss(e.vt, e.st, e.vs, e.ss).item() == 0.0);
  CHECK(hrd_loss(e.vt, e.st, e.vs, e.ss, fixed_temperature(g, 0.2), fixed_temperature(g, 0.2)).value.item() == 0.0);
  auto x = xrd_loss(e.vt, e.st, e.vs, e.ss, fixed_temperature(g, 0.4));
  CHECK(x.teacher_to_student.item() == x.student_to_teacher.item());

  auto icl = icl_loss(e.vs, e.ss, e.vt, e.st, fixed_temperature(g, 0.3)).value.item();
  auto clip = clip_loss(e.vt, e.st, fixed_temperature(g, 0.3)).value.item();
  CHECK(icl == Approx(clip).epsilon(1e-14));

  // Same intra-network geometry in both modalities.
  auto kl = vrd_kl_loss(e.vt, e.vs, e.vt, e.vs, fixed_temperature(g, 0.5), fixed_temperature(g, 0.5));
  CHECK(kl.value.item() == 0.0);
}

TEST_CASE("single-pair batches give zero relational losses") {
  std::mt19937_64 rng(6);
  const Quad q = random_quad(rng, 1, 5);
  const auto lib = library_losses(q, random_taus(rng));
  CHECK(lib[0] == 0.0);  // clip
  CHECK(lib[2] == 0.0);  // icl
  CHECK(lib[3] == 0.0);  // hrd
  CHECK(lib[4] + lib[5] == 0.0);  // vrd
  CHECK(lib[6] == 0.0);  // xrd
}

TEST_CASE("xrd is symmetric under swapping teacher and student") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    const Quad q = random_quad(rng, 4, 6);
    ad::Graph g;
    auto e = build(g, q);
    auto tau = fixed_temperature(g, 0.25);
    CHECK(xrd_loss(e.vt, e.st, e.vs, e.ss, tau).value.item() == xrd_loss(e.vs, e.ss, e.vt, e.st, tau).value.item());
  }
}

TEST_CASE("high temperature flattens every distribution") {
  std::mt19937_64 rng(12);
  const Quad q = random_quad(rng, 4, 6);
  ad::Graph g;
  auto e = build(g, q);
  auto p = similarity_distribution(e.vt, e.ss, 1e6);
  for (double v : p.probs.value().data()) CHECK(std::abs(v - 0.25) <= 1e-6);
  CHECK(hrd_loss(e.vt, e.st, e.vs, e.ss, fixed_temperature(g, 1e6), fixed_temperature(g, 1e6)).value.item() < 1e-9);
}

TEST_CASE("temperature parametrization") {
  auto t = TemperatureSet::initial();
  for (auto* p : t.parameters()) {
    CHECK(p->value.item() == Approx(std::log(1.0 / 0.07)).epsilon(1e-15));
    CHECK(TemperatureSet::tau_of(*p) == Approx(0.07).epsilon(1e-14));
    CHECK_FALSE(p->decay);
  }
  t.cross.value[0] = 10.0;
  t.clamp();
  CHECK(std::exp(t.cross.value.item()) == Approx(100.0).epsilon(1e-14));
  CHECK_THROWS_AS(TemperatureSet::make("x", 0.0, true), ConfigError);
}

TEST_CASE("gradients of every loss pass the finite-difference check") {
  for (const auto& name : gradient_suite_losses()) {
    INFO(name);
    CHECK(check_loss_gradient(name, StudentInput::embeddings, 2).max_relative_error < 1e-4);
    CHECK(check_loss_gradient(name, StudentInput::encoder, 1).max_relative_error < 1e-4);
  }
}
