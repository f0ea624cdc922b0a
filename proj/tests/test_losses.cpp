#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "shike/errors.hpp"
#include "shike/losses.hpp"

using namespace shike;

namespace {

std::vector<DecoupledLogits> decouple_all(const ExpertLogits& z, std::size_t y) {
  std::vector<DecoupledLogits> out;
  for (const auto& row : z) out.push_back(decouple_logits(row, y));
  return out;
}

double nt_value(const ExpertLogits& z, std::size_t y, double tau) {
  const auto d = decouple_all(z, y);
  return loss_nt(elect_grand_teacher(d), d, tau).value;
}

}  // namespace

TEST_CASE("decouple_logits splits and reconstructs") {
  auto d = decouple_logits(std::vector<double>{3, 1, 2}, 0);
  CHECK(d.target == 3);
  CHECK(d.nontarget == std::vector<double>{1, 2});
  CHECK(d.index_map == std::vector<std::size_t>{1, 2});

  d = decouple_logits(std::vector<double>{5, 7}, 1);
  CHECK(d.target == 7);
  CHECK(d.nontarget == std::vector<double>{5});
  CHECK(d.index_map == std::vector<std::size_t>{0});

  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    auto z = oracle::random_logits(rng, 1, 2 + i % 9)[0];
    const std::size_t y = rng() % z.size();
    CHECK(decouple_logits(z, y).reconstruct() == z);
  }
  CHECK_THROWS_AS(decouple_logits(std::vector<double>{1, 2}, 2), InvalidArgument);
}

TEST_CASE("consensus mean and ties") {
  std::vector<DecoupledLogits> d{decouple_logits(std::vector<double>{0, 1, 3}, 0),
                                 decouple_logits(std::vector<double>{0, 3, 1}, 0)};
  CHECK(consensus_mean(d) == std::vector<double>{2, 2});
  CHECK(elect_grand_teacher(d).consensus_index == 0);

  std::vector<DecoupledLogits> one{decouple_logits(std::vector<double>{4, 1, 2}, 1)};
  CHECK(consensus_mean(one) == one[0].nontarget);

  std::vector<DecoupledLogits> mismatched{decouple_logits(std::vector<double>{0, 1, 3}, 0),
                                          decouple_logits(std::vector<double>{0, 1, 3}, 1)};
  CHECK_THROWS(consensus_mean(mismatched));
  CHECK_THROWS(elect_grand_teacher(std::span<const DecoupledLogits>{}));
}

TEST_CASE("grand teacher election") {
  std::vector<DecoupledLogits> d{decouple_logits(std::vector<double>{9, 5, 1, 0}, 0),
                                 decouple_logits(std::vector<double>{9, 1, 4, 0}, 0)};
  const auto t = elect_grand_teacher(d);
  CHECK(t.mean == std::vector<double>{3, 2.5, 0});
  CHECK(t.consensus_index == 0);
  CHECK(t.logits == std::vector<double>{3, 4, 0});

  std::vector<DecoupledLogits> same(3, decouple_logits(std::vector<double>{1, -2, 0.5, 7}, 3));
  CHECK(elect_grand_teacher(same).logits == same[0].nontarget);

  std::mt19937_64 rng(11);
  for (int i = 0; i < 500; ++i) {
    const auto z = oracle::random_logits(rng, 1 + i % 4, 2 + i % 9);
    const auto dd = decouple_all(z, i % z[0].size());
    const auto g = elect_grand_teacher(dd);
    for (std::size_t k = 0; k < g.logits.size(); ++k) CHECK(g.logits[k] >= g.mean[k]);
    CHECK(g.logits[g.consensus_index] == g.mean[g.consensus_index]);
  }
}

TEST_CASE("non-target softmax") {
  auto p = nontarget_softmax(std::vector<double>{2, 2, 2, 2});
  for (double v : p) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  p = nontarget_softmax(std::vector<double>{0.0, std::log(3.0)});
  CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-14));
  const auto q = nontarget_softmax(std::vector<double>{100.0, 100.0 + std::log(3.0)});
  CHECK(std::abs(q[0] - p[0]) < 1e-12);
  const auto big = nontarget_softmax(std::vector<double>{1000.0, 999.0, -1000.0});
  double s = 0.0;
  for (double v : big) s += v;
  CHECK(std::abs(s - 1.0) < 1e-12);
  CHECK_THROWS_AS(nontarget_softmax(std::vector<double>{1.0, NAN}), InvalidArgument);
  CHECK_THROWS_AS(nontarget_softmax(std::vector<double>{1.0, INFINITY}), InvalidArgument);
}

TEST_CASE("cross-entropy examples") {
  ExpertLogits z{{0, 0, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}};
  CHECK(loss_ce(z, 2).value == doctest::Approx(3 * std::log(4.0)).epsilon(1e-14));
  CHECK(loss_ce({{60, 0, 0}}, 0).value < 1e-6);
  const ExpertLogits a{{1.5, -0.3, 2.0}};
  const ExpertLogits b{{1.5, -0.3, 2.0}, {1.5, -0.3, 2.0}};
  CHECK(loss_ce(b, 1).value == 2 * loss_ce(a, 1).value);
  CHECK(loss_ce(b, 1, ExpertReduction::mean).value == doctest::Approx(loss_ce(a, 1).value));
  CHECK_THROWS(loss_ce(a, 3));
}

TEST_CASE("balanced softmax examples") {
  const std::vector<std::size_t> counts{9, 1};
  CHECK(loss_bsce({{0, 0}}, 1, counts).value == doctest::Approx(std::log(10.0)).epsilon(1e-14));
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    const auto z = oracle::random_logits(rng, 1 + i % 3, 5);
    const std::vector<std::size_t> flat(5, 37);
    const auto a = loss_bsce(z, i % 5, flat), b = loss_ce(z, i % 5);
    CHECK(std::abs(a.value - b.value) <= 1e-12);
    auto shifted = z;
    for (auto& row : shifted)
      for (auto& v : row) v += 4.25;
    const std::vector<std::size_t> lt{100, 40, 12, 5, 2};
    CHECK(std::abs(loss_bsce(shifted, i % 5, lt).value - loss_bsce(z, i % 5, lt).value) < 1e-12);
  }
  CHECK_THROWS(loss_bsce({{0, 0}}, 0, std::vector<std::size_t>{3, 0}));
}

TEST_CASE("mutual distillation examples") {
  CHECK(loss_mutual({{1, 2, 3}}).value == 0.0);
  CHECK(loss_mutual({{1, 2, 3}, {1, 2, 3}, {1, 2, 3}}).value == 0.0);
  const ExpertLogits z{{0, 0}, {0, std::log(3.0)}};
  const double k12 = 0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75);
  const double k21 = 0.25 * std::log(0.25 / 0.5) + 0.75 * std::log(0.75 / 0.5);
  CHECK(loss_mutual(z).value == doctest::Approx(k12 + k21).epsilon(1e-13));
  CHECK_THROWS(loss_mutual(ExpertLogits{}));
}

TEST_CASE("non-target distillation examples") {
  CHECK(nt_value({{1, 5, 2}, {1, 5, 2}}, 0, 1.0) == 0.0);
  CHECK(nt_value({{0.3, -1, 2, 4}}, 2, 1.0) == 0.0);
  const ExpertLogits z{{9, 5, 1, 0}, {9, 1, 4, 0}};
  CHECK(nt_value(z, 0, 1.0) == doctest::Approx(oracle::nt(z, 0, 1.0)).epsilon(1e-13));
  const auto d = decouple_all(z, 0);
  const auto teacher = elect_grand_teacher(d);
  const std::vector<DecoupledLogits> wrong{decouple_logits(std::vector<double>{1, 2}, 0)};
  CHECK_THROWS(loss_nt(teacher, wrong));
}

TEST_CASE("loss_total is affine in the weights") {
  CHECK(loss_total(2.0, 0.5, 0.7, {0.0, 0.0, 1.0}) == 2.0);
  CHECK(loss_total(2.0, 0.5, 0.0, {1.0, 0.0, 1.0}) == 2.5);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int i = 0; i < 50; ++i) {
    const double ce = u(rng), nt = u(rng), mu = u(rng), a1 = u(rng), a2 = u(rng), b = u(rng);
    const double slope = (loss_total(ce, nt, mu, {a2, b, 1.0}) - loss_total(ce, nt, mu, {a1, b, 1.0})) / (a2 - a1);
    CHECK(slope == doctest::Approx(nt).epsilon(1e-9));
  }
  CHECK_THROWS(LossWeights{-1.0, 0.0, 1.0}.validate());
  CHECK_THROWS(LossWeights{0.0, 0.0, 0.0}.validate());
  CHECK_THROWS(LossWeights{NAN, 0.0, 1.0}.validate());
}

TEST_CASE("losses match scalar oracles at random points") {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 300; ++i) {
    const std::size_t m = 1 + rng() % 4, c = 2 + rng() % 9, y = rng() % c;
    const double tau = (i % 3 == 0) ? 2.0 : 1.0;
    const auto z = oracle::random_logits(rng, m, c);
    std::vector<std::size_t> counts(c);
    for (auto& n : counts) n = 1 + rng() % 300;
    CHECK(std::abs(loss_ce(z, y).value - oracle::ce(z, y)) < 1e-10);
    CHECK(std::abs(loss_bsce(z, y, counts).value - oracle::bsce(z, y, counts)) < 1e-10);
    CHECK(std::abs(loss_mutual(z, tau).value - oracle::mutual(z, tau)) < 1e-10);
    CHECK(std::abs(nt_value(z, y, tau) - oracle::nt(z, y, tau)) < 1e-10);
    CHECK(loss_mutual(z, tau).value >= 0.0);
    CHECK(nt_value(z, y, tau) >= 0.0);
  }
}

TEST_CASE("gradients match central differences") {
  std::mt19937_64 rng(33);
  for (int i = 0; i < 40; ++i) {
    const std::size_t m = 1 + rng() % 4, c = 2 + rng() % 7, y = rng() % c;
    const double tau = (i % 2 == 0) ? 1.0 : 1.5;
    const auto z = oracle::random_logits(rng, m, c, 2.0);
    std::vector<std::size_t> counts(c);
    for (auto& n : counts) n = 1 + rng() % 50;

    auto fd_ce = oracle::numeric_grad([&](const oracle::Mat& v) { return oracle::ce(v, y); }, z);
    CHECK(oracle::relative_error(loss_ce(z, y).grad, fd_ce) < 1e-5);
    auto fd_bsce = oracle::numeric_grad([&](const oracle::Mat& v) { return oracle::bsce(v, y, counts); }, z);
    CHECK(oracle::relative_error(loss_bsce(z, y, counts).grad, fd_bsce) < 1e-5);

    // Students move; teachers stay at z.
    auto fd_mu = oracle::numeric_grad(
        [&](const oracle::Mat& v) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j)
            for (std::size_t k = 0; k < m; ++k)
              if (j != k) s += oracle::kl(z[j], v[k], tau);
          return s * oracle::scale(tau);
        },
        z);
    if (m > 1) CHECK(oracle::relative_error(loss_mutual(z, tau).grad, fd_mu) < 1e-5);

    const auto frozen = oracle::teacher(z, y);
    auto fd_nt = oracle::numeric_grad(
        [&](const oracle::Mat& v) {
          double s = 0.0;
          for (const auto& row : v) s += oracle::kl(frozen.logits, oracle::drop(row, y), tau);
          return s * oracle::scale(tau);
        },
        z);
    const auto d = decouple_all(z, y);
    const auto nt = loss_nt(elect_grand_teacher(d), d, tau);
    double worst = 0.0;
    for (std::size_t e = 0; e < m; ++e)
      for (std::size_t k = 0; k < c; ++k) worst = std::max(worst, std::abs(nt.grad[e][k] - fd_nt[e][k]));
    CHECK((oracle::relative_error(nt.grad, fd_nt) < 1e-5 || worst < 1e-9));
    for (std::size_t e = 0; e < m; ++e) CHECK(nt.grad[e][y] == 0.0);
  }
}

TEST_CASE("permutation equivariance") {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 50; ++i) {
    const std::size_t c = 5, y = rng() % c;
    const auto z = oracle::random_logits(rng, 3, c);
    std::vector<std::size_t> perm{0, 1, 2, 3, 4};
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::size_t> counts{50, 30, 20, 9, 3}, pcounts(c);
    ExpertLogits pz(3, std::vector<double>(c));
    for (std::size_t k = 0; k < c; ++k) {
      pcounts[perm[k]] = counts[k];
      for (std::size_t m = 0; m < 3; ++m) pz[m][perm[k]] = z[m][k];
    }
    const auto a = loss_bsce(z, y, counts), b = loss_bsce(pz, perm[y], pcounts);
    CHECK(std::abs(a.value - b.value) < 1e-12);
    for (std::size_t m = 0; m < 3; ++m)
      for (std::size_t k = 0; k < c; ++k) CHECK(std::abs(a.grad[m][k] - b.grad[m][perm[k]]) < 1e-12);
    CHECK(std::abs(loss_mutual(z).value - loss_mutual(pz).value) < 1e-12);
    CHECK(std::abs(nt_value(z, y, 1.0) - nt_value(pz, perm[y], 1.0)) < 1e-12);
  }
}
