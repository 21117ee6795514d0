#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fsens/errors.hpp"
#include "fsens/gradcheck.hpp"
#include "fsens/penalties.hpp"
#include "helpers.hpp"

using namespace fsens;
using fsens::test::random_simplex;
using fsens::test::softmax_oracle;

namespace {

std::vector<double> cond_oracle(const std::vector<double>& p, std::size_t y) {
  std::vector<double> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    if (i != y) out[i] = p[i] / (1.0 - p[y]);
  return out;
}

double cos_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

double symkl_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = std::max(a[i], 1e-12), y = std::max(b[i], 1e-12);
    s += 0.5 * (x * std::log(x / y) + y * std::log(y / x));
  }
  return s;
}

CondProbVector cond(std::vector<double> v, std::size_t gt) { return {std::move(v), gt}; }

}  // namespace

TEST_CASE("condition_non_gt examples") {
  const auto a = condition_non_gt(ProbVector{{0.7, 0.2, 0.1}}, 0).values;
  CHECK(a[0] == 0.0);
  CHECK(std::abs(a[1] - 2.0 / 3.0) < 1e-15);
  CHECK(std::abs(a[2] - 1.0 / 3.0) < 1e-15);
  const auto b = condition_non_gt(ProbVector{{0.25, 0.25, 0.25, 0.25}}, 2).values;
  CHECK(b[2] == 0.0);
  for (std::size_t i : {0, 1, 3}) CHECK(std::abs(b[i] - 1.0 / 3.0) < 1e-15);
}

TEST_CASE("condition_non_gt randomized invariants") {
  Rng rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 2 + rng.below(9);
    const auto p = random_simplex(d, rng);
    const std::size_t y = rng.below(d);
    const auto c = condition_non_gt(ProbVector{p}, y);
    CHECK(c.gt_index == y);
    CHECK(c.values[y] == 0.0);
    CHECK(std::abs(std::accumulate(c.values.begin(), c.values.end(), 0.0) - 1.0) < 1e-9);
    const auto o = cond_oracle(p, y);
    for (std::size_t i = 0; i < d; ++i) CHECK(std::abs(c.values[i] - o[i]) < 1e-12);
  }
}

TEST_CASE("condition_non_gt depends only on non-GT ratios") {
  Rng rng(22);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = random_simplex(5, rng);
    const auto base = condition_non_gt(ProbVector{p}, 1).values;
    // Move mass between the GT entry and the rest, keeping ratios.
    const double s = rng.uniform(0.2, 1.5);
    double rest = 0.0;
    for (std::size_t i = 0; i < 5; ++i)
      if (i != 1) rest += p[i];
    const double new_rest = std::min(rest * s, 0.999);
    for (std::size_t i = 0; i < 5; ++i)
      if (i != 1) p[i] *= new_rest / rest;
    p[1] = 1.0 - new_rest;
    const auto moved = condition_non_gt(ProbVector{p}, 1).values;
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(moved[i] - base[i]) < 1e-12);
  }
}

TEST_CASE("condition_non_gt floors a fully confident vector") {
  const auto c = condition_non_gt(ProbVector{{1.0, 0.0, 0.0}}, 0).values;
  for (double v : c) CHECK(std::isfinite(v));
}

TEST_CASE("phi_cosine examples and range") {
  const auto a = cond({0, 2.0 / 3.0, 1.0 / 3.0}, 0);
  const auto b = cond({0, 1.0 / 3.0, 2.0 / 3.0}, 0);
  CHECK(std::abs(phi_cosine(a, a) - 1.0) < 1e-12);
  CHECK(std::abs(phi_cosine(cond({0, 1, 0}, 0), cond({0, 0, 1}, 0))) < 1e-12);
  CHECK(std::abs(phi_cosine(a, b) - 0.8) < 1e-12);
  CHECK_THROWS_AS(phi_cosine(a, cond({0, 0.5, 0.25, 0.25}, 0)), DimensionError);
}

TEST_CASE("phi_symkl examples") {
  const auto a = cond({0, 0.5, 0.5}, 0);
  const auto b = cond({0, 0.9, 0.1}, 0);
  CHECK(std::abs(phi_symkl(a, a)) < 1e-12);
  CHECK(std::abs(phi_symkl(a, b) - symkl_oracle(a.values, b.values)) < 1e-12);
  CHECK(std::abs(phi_symkl(a, b) - 0.4394) < 1e-4);
  CHECK_THROWS_AS(phi_symkl(a, cond({0, 1}, 0)), DimensionError);
}

TEST_CASE("phi_l2 examples") {
  CHECK(phi_l2(cond({0, 1, 0}, 0), cond({0, 1, 0}, 0)) == 0.0);
  CHECK(std::abs(phi_l2(cond({0, 1, 0}, 0), cond({0, 0, 1}, 0)) - 2.0) < 1e-15);
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = condition_non_gt(ProbVector{random_simplex(6, rng)}, 3);
    const auto b = condition_non_gt(ProbVector{random_simplex(6, rng)}, 3);
    double s = 0.0;
    for (std::size_t i = 0; i < 6; ++i) s += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]);
    CHECK(std::abs(phi_l2(a, b) - s) < 1e-12);
  }
  CHECK_THROWS_AS(phi_l2(cond({0, 1, 0}, 0), cond({0, 1}, 0)), DimensionError);
}

TEST_CASE("relationship functions on random conditioned pairs") {
  Rng rng(24);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t d = 2 + rng.below(8);
    const std::size_t y = rng.below(d);
    const auto a = condition_non_gt(ProbVector{random_simplex(d, rng)}, y);
    const auto b = condition_non_gt(ProbVector{random_simplex(d, rng)}, y);
    const double c = phi_cosine(a, b);
    CHECK(c >= 0.0);
    CHECK(c <= 1.0 + 1e-12);
    CHECK(std::abs(c - cos_oracle(a.values, b.values)) < 1e-12);
    const double kab = phi_symkl(a, b), kba = phi_symkl(b, a);
    CHECK(kab >= 0.0);
    CHECK(kab == doctest::Approx(kba).epsilon(1e-12));
    CHECK(std::abs(kab - symkl_oracle(a.values, b.values)) < 1e-9);
  }
}

TEST_CASE("penalty tokens round trip") {
  for (auto k : {PenaltyKind::kNone, PenaltyKind::kCosineDiversity, PenaltyKind::kSymKLCooperation,
                 PenaltyKind::kL2Diversity, PenaltyKind::kL2Cooperation, PenaltyKind::kNegCosCooperation})
    CHECK(parse_penalty(penalty_token(k)) == k);
  CHECK(penalty_token(PenaltyKind::kCosineDiversity) == "cosine-diversity");
  CHECK(penalty_token(PenaltyKind::kSymKLCooperation) == "symkl-cooperation");
  CHECK(penalty_token(PenaltyKind::kL2Diversity) == "l2-diversity");
  CHECK(penalty_token(PenaltyKind::kL2Cooperation) == "l2-cooperation");
  CHECK(penalty_token(PenaltyKind::kNegCosCooperation) == "negcos-cooperation");
  CHECK(penalty_token(PenaltyKind::kNone) == "none");
  CHECK_THROWS_AS(parse_penalty("symkl-diversity"), ParameterError);
}

TEST_CASE("penalty signs") {
  CHECK(penalty_sign(PenaltyKind::kCosineDiversity) == 1.0);
  CHECK(penalty_sign(PenaltyKind::kSymKLCooperation) == 1.0);
  CHECK(penalty_sign(PenaltyKind::kL2Cooperation) == 1.0);
  CHECK(penalty_sign(PenaltyKind::kL2Diversity) == -1.0);
  CHECK(penalty_sign(PenaltyKind::kNegCosCooperation) == -1.0);
}

TEST_CASE("pairwise penalty with identical members") {
  const Tensor z({1, 4}, {1.0, -0.5, 2.0, 0.3});
  const std::vector<std::size_t> y{2};
  for (std::size_t k : {2, 3, 5}) {
    const std::vector<Tensor> logits(k, z);
    CHECK(std::abs(pairwise_penalty(logits, y, PenaltyKind::kSymKLCooperation)) < 1e-12);
    CHECK(std::abs(pairwise_penalty(logits, y, PenaltyKind::kCosineDiversity) - static_cast<double>(k)) < 1e-12);
  }
}

TEST_CASE("pairwise penalty equals the direct ordered-pair sum") {
  Rng rng(25);
  for (auto kind : {PenaltyKind::kCosineDiversity, PenaltyKind::kSymKLCooperation, PenaltyKind::kL2Diversity,
                    PenaltyKind::kL2Cooperation, PenaltyKind::kNegCosCooperation}) {
    const std::size_t k = 3, b = 4, d = 5;
    std::vector<Tensor> logits;
    for (std::size_t j = 0; j < k; ++j) {
      Tensor t({b, d});
      for (auto& v : t.data) v = rng.uniform(-2.0, 2.0);
      logits.push_back(t);
    }
    std::vector<std::size_t> y(b);
    for (auto& v : y) v = rng.below(d);
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t l = 0; l < k; ++l) {
          if (j == l) continue;
          auto row = [&](std::size_t m) {
            std::vector<double> z(logits[m].data.begin() + static_cast<std::ptrdiff_t>(i * d),
                                  logits[m].data.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
            return cond_oracle(softmax_oracle(z), y[i]);
          };
          const auto a = row(j), c = row(l);
          double phi = 0.0;
          if (kind == PenaltyKind::kCosineDiversity || kind == PenaltyKind::kNegCosCooperation) {
            phi = cos_oracle(a, c);
          } else if (kind == PenaltyKind::kSymKLCooperation) {
            phi = symkl_oracle(a, c);
          } else {
            for (std::size_t q = 0; q < d; ++q) phi += (a[q] - c[q]) * (a[q] - c[q]);
          }
          total += phi;
        }
    const double expected = penalty_sign(kind) * total / static_cast<double>(b * (k - 1));
    INFO(penalty_token(kind));
    CHECK(std::abs(pairwise_penalty(logits, y, kind) - expected) < 1e-10);
  }
}

TEST_CASE("pairwise penalty is permutation invariant in members") {
  Rng rng(26);
  std::vector<Tensor> logits;
  for (int j = 0; j < 4; ++j) {
    Tensor t({3, 6});
    for (auto& v : t.data) v = rng.uniform(-3.0, 3.0);
    logits.push_back(t);
  }
  const std::vector<std::size_t> y{0, 5, 2};
  for (auto kind : {PenaltyKind::kCosineDiversity, PenaltyKind::kSymKLCooperation, PenaltyKind::kL2Diversity}) {
    const double base = pairwise_penalty(logits, y, kind);
    auto perm = logits;
    std::rotate(perm.begin(), perm.begin() + 1, perm.end());
    std::swap(perm[0], perm[2]);
    CHECK(std::abs(pairwise_penalty(perm, y, kind) - base) < 1e-12);
  }
}

TEST_CASE("pairwise penalty errors") {
  const std::vector<Tensor> one{Tensor({1, 3})};
  const std::vector<std::size_t> y{0};
  CHECK_THROWS_AS(pairwise_penalty(one, y, PenaltyKind::kCosineDiversity), ParameterError);
  const std::vector<Tensor> mismatched{Tensor({1, 3}), Tensor({1, 4})};
  CHECK_THROWS_AS(pairwise_penalty(mismatched, y, PenaltyKind::kCosineDiversity), DimensionError);
}

TEST_CASE("temperature probe compares full softened vectors") {
  const Tensor a({1, 3}, {2.0, 0.0, -1.0});
  const Tensor b({1, 3}, {0.0, 1.0, 0.5});
  PenaltyOptions opts;
  opts.temperature_probe = 4.0;
  const std::vector<Tensor> logits{a, b};
  const std::vector<std::size_t> y{0};
  const auto pa = softmax_oracle({2.0, 0.0, -1.0}, 4.0), pb = softmax_oracle({0.0, 1.0, 0.5}, 4.0);
  const double expected = 2.0 * symkl_oracle(pa, pb) / 1.0;
  CHECK(std::abs(pairwise_penalty(logits, y, PenaltyKind::kSymKLCooperation, opts) - expected) < 1e-12);
}

TEST_CASE("pairwise penalty gradient matches finite differences") {
  Rng rng(27);
  const Tensor other({2, 3}, {0.3, -0.2, 1.0, -1.0, 0.5, 0.1});
  const std::vector<std::size_t> y{1, 2};
  for (auto kind : {PenaltyKind::kCosineDiversity, PenaltyKind::kSymKLCooperation, PenaltyKind::kL2Diversity,
                    PenaltyKind::kL2Cooperation, PenaltyKind::kNegCosCooperation}) {
    Tensor start({2, 3});
    for (auto& v : start.data) v = rng.uniform(-1.0, 1.0);
    const double err = grad_check(
        [&](Tape& t, Var z) {
          const std::vector<Var> logits{z, t.constant(other)};
          return pairwise_penalty(logits, y, kind);
        },
        start);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("a cosine-diversity step pushes near-identical members apart") {
  Rng rng(28);
  const std::size_t k = 3, b = 4, d = 5;
  Tensor base({b, d});
  for (auto& v : base.data) v = rng.uniform(-1.0, 1.0);
  std::vector<Tensor> members;
  for (std::size_t j = 0; j < k; ++j) {
    Tensor t = base;
    for (auto& v : t.data) v += rng.uniform(-1e-3, 1e-3);
    members.push_back(t);
  }
  const std::vector<std::size_t> y{0, 1, 2, 3};
  const double before = measure_pairwise(members, y).mean_cosine;
  Tape tape;
  std::vector<Var> vars;
  for (const auto& m : members) vars.push_back(tape.leaf(m));
  tape.backward(pairwise_penalty(vars, y, PenaltyKind::kCosineDiversity));
  for (std::size_t j = 0; j < k; ++j) {
    const auto g = vars[j].grad();
    for (std::size_t i = 0; i < members[j].numel(); ++i) members[j][i] -= 1e-2 * g[i];
  }
  CHECK(measure_pairwise(members, y).mean_cosine < before);
}

TEST_CASE("measure_pairwise averages unordered pairs") {
  const Tensor a({1, 3}, {1.0, 0.0, 0.0});
  const std::vector<Tensor> same{a, a, a};
  const std::vector<std::size_t> y{0};
  const auto m = measure_pairwise(same, y);
  CHECK(std::abs(m.mean_cosine - 1.0) < 1e-12);
  CHECK(std::abs(m.mean_symkl) < 1e-12);
}
