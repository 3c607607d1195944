#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "drfo/baselines.hpp"
#include "drfo/dro.hpp"
#include "drfo/errors.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace drfo;
using drfo::testing::rec;

namespace {

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += std::max(a[i] * a[i], b[i] * b[i]);
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

// Constraint over records [0, n): known {0, 1}, one part over the rest.
GroupConstraint toy_constraint(std::size_t n, const std::vector<double>& center, double rho, double lambda) {
  GroupConstraint c;
  c.s = 1;
  c.lambda = lambda;
  c.known = {0, 1};
  c.eta_k = 0.4;
  AdversarialPart part;
  for (RecordIndex i = 2; i < n; ++i) part.records.push_back(i);
  part.ball = AmbiguitySet(EmpiricalDistribution(Partition::Missing, center), rho);
  part.eta = 0.6;
  c.parts.push_back(part);
  return c;
}

std::vector<double> random_weights(std::mt19937_64& rng, std::size_t n, double zero_prob) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> w(n);
  for (double& x : w) x = u(rng) < zero_prob ? 0.0 : 0.1 + u(rng);
  if (std::all_of(w.begin(), w.end(), [](double x) { return x == 0.0; })) w[0] = 1.0;
  double s = 0.0;
  for (double x : w) s += x;
  for (double& x : w) x /= s;
  return w;
}

FairTrainConfig small_config() {
  FairTrainConfig cfg;
  cfg.optimizer.learning_rate = 1e-2;
  cfg.optimizer.max_epochs = 3;
  cfg.optimizer.batch_size = 16;
  cfg.optimizer.seed = 4;
  cfg.alpha_q = 0.05;
  return cfg;
}

}  // namespace

TEST_CASE("constraint value of a hand example") {
  const std::vector<double> pred = {0.6, 0.4, 0.5, 0.5};
  GroupConstraint c;
  c.known = {1};
  c.eta_k = 0.5;
  AdversarialPart part;
  part.records = {2, 3};
  part.eta = 0.5;
  part.ball = AmbiguitySet(EmpiricalDistribution(Partition::Missing, {0.5, 0.5}), 0.1);
  c.parts.push_back(part);
  const std::vector<EmpiricalDistribution> q = {part.ball.center};
  const auto v = fairness_term(pred, c, q, mean_of(pred));
  CHECK(v.signed_value == doctest::Approx(-0.05).epsilon(1e-12));
  CHECK(v.loss == doctest::Approx(0.05).epsilon(1e-12));

  const std::vector<double> flat(4, 0.37);
  CHECK(fairness_term(flat, c, q, mean_of(flat)).signed_value == doctest::Approx(0.0).scale(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(fairness_term(pred, c, std::vector<EmpiricalDistribution>{}, 0.5), UsageError);
}

TEST_CASE("model gradient of the fairness loss matches central differences") {
  std::mt19937_64 rng(8);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto ds = testing::toy_dataset(5, 4, seed, [](UserId u) { return u < 2; }, 0.8);
    auto model = testing::random_model(5, 4, 3, seed, 0.6);
    const std::size_t n = ds.size();
    GroupConstraint c;
    c.lambda = 2.5;
    c.known = {0, 1};
    c.eta_k = 0.3;
    AdversarialPart part;
    for (RecordIndex i = 2; i < n; ++i) part.records.push_back(i);
    part.eta = 0.7;
    part.ball = AmbiguitySet(EmpiricalDistribution(Partition::Missing, random_weights(rng, n - 2, 0.2)), 0.3);
    c.parts.push_back(part);
    const std::vector<EmpiricalDistribution> q = {part.ball.center};

    auto loss = [&] {
      const auto p = predict_all(model, ds.records());
      return c.lambda * fairness_term(p, c, q, mean_of(p)).loss;
    };
    const auto p0 = predict_all(model, ds.records());
    const double value = fairness_term(p0, c, q, mean_of(p0)).signed_value;
    REQUIRE(std::abs(value) > 1e-4);
    std::vector<double> analytic(model.n_params(), 0.0), numeric(model.n_params(), 0.0);
    accumulate_fairness_gradient(model, ds.records(), p0, c, q, value > 0 ? 1.0 : -1.0, analytic);
    const double h = 1e-6;
    for (std::size_t i = 0; i < model.n_params(); ++i) {
      const double keep = model.params()[i];
      model.params()[i] = keep + h;
      const double up = loss();
      model.params()[i] = keep - h;
      const double down = loss();
      model.params()[i] = keep;
      numeric[i] = (up - down) / (2.0 * h);
    }
    CHECK(relative_error(analytic, numeric) <= 1e-4);
  }
}

TEST_CASE("distribution gradient matches differences along the simplex") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 8;
    std::vector<double> pred(n);
    for (double& x : pred) x = u(rng);
    const auto center = random_weights(rng, n - 2, 0.0);
    const auto c = toy_constraint(n, center, 0.5, 1.7);
    const double mean = mean_of(pred);
    const std::vector<EmpiricalDistribution> q0 = {c.parts[0].ball.center};
    const double value = fairness_term(pred, c, q0, mean).signed_value;
    REQUIRE(value != 0.0);
    const auto g = constraint_gradient_q(pred, c.parts[0], value > 0 ? 1.0 : -1.0, c.lambda);
    const double h = 1e-6;
    for (std::size_t j = 0; j + 1 < center.size(); ++j) {
      const std::size_t k = j + 1;
      auto shifted = [&](double d) {
        auto w = center;
        w[j] += d;
        w[k] -= d;
        const std::vector<EmpiricalDistribution> q = {EmpiricalDistribution(Partition::Missing, w)};
        return c.lambda * fairness_term(pred, c, q, mean).loss;
      };
      const double numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
      CHECK(numeric == doctest::Approx(g[j] - g[k]).epsilon(1e-6).scale(1.0));
    }
  }
}

TEST_CASE("ascent step behaviour") {
  const std::size_t n = 6;
  const std::vector<double> center = {0.25, 0.25, 0.25, 0.25};
  auto c = toy_constraint(n, center, 0.2, 1.0);
  FairTrainConfig cfg;
  cfg.alpha_q = 0.5;
  cfg.ascent = AscentRule::Gradient;

  SUBCASE("a zero constraint leaves the distribution alone") {
    const std::vector<double> flat(n, 0.5);
    std::vector<EmpiricalDistribution> q = {c.parts[0].ball.center};
    CHECK_FALSE(ascend_constraint(c, q, flat, cfg));
    CHECK(q[0] == c.parts[0].ball.center);
    CHECK(ascend_Q(q[0], flat, c.parts[0], 0.0, 1.0, 0.5) == q[0]);
  }
  SUBCASE("a positive constraint moves mass toward the highest prediction") {
    const std::vector<double> pred = {0.9, 0.9, 0.3, 0.8, 0.5, 0.2};
    std::vector<EmpiricalDistribution> q = {c.parts[0].ball.center};
    REQUIRE(fairness_term(pred, c, q, mean_of(pred)).signed_value > 0.0);
    CHECK(ascend_constraint(c, q, pred, cfg));
    std::size_t best = 0;
    for (std::size_t j = 1; j < q[0].size(); ++j) {
      if (q[0][j] - center[j] > q[0][best] - center[best]) best = j;
    }
    CHECK(best == 1);  // record 3, prediction 0.8
    CHECK(tv_distance(q[0].weights(), center) <= 0.2 + 1e-12);
  }
  SUBCASE("no ball means no ascent") {
    c.parts[0].ball.radius = 0.0;
    const std::vector<double> pred = {0.9, 0.9, 0.3, 0.8, 0.5, 0.2};
    std::vector<EmpiricalDistribution> q = {c.parts[0].ball.center};
    CHECK_FALSE(ascend_constraint(c, q, pred, cfg));
  }
}

TEST_CASE("inner maximization reaches the closed-form worst case and grows with the radius") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  FairTrainConfig cfg;
  cfg.alpha_q = 1e4;
  for (int t = 0; t < 40; ++t) {
    const std::size_t m = 2 + t % 5;  // part size <= 6
    const std::size_t n = m + 2;
    std::vector<double> pred(n);
    for (double& x : pred) x = u(rng);
    const auto center = random_weights(rng, m, 0.3);
    const double mean = mean_of(pred);
    const double known = 0.4 * 0.5 * (pred[0] + pred[1]);
    std::vector<double> part_pred(pred.begin() + 2, pred.end());
    double previous = -1.0;
    for (int k = 0; k <= 10; ++k) {
      const double rho = 0.1 * k;
      const auto c = toy_constraint(n, center, rho, 1.0);
      std::vector<EmpiricalDistribution> q = {c.parts[0].ball.center};
      for (int step = 0; step < 4; ++step) ascend_constraint(c, q, pred, cfg);
      const double reached = fairness_term(pred, c, q, mean).loss;
      const double hi = known + 0.6 * oracle::extreme_expectation(part_pred, center, rho, true) - mean;
      const double lo = known + 0.6 * oracle::extreme_expectation(part_pred, center, rho, false) - mean;
      CHECK(reached == doctest::Approx(std::max(std::abs(hi), std::abs(lo))).epsilon(1e-6).scale(1.0));
      CHECK(reached >= previous - 1e-12);
      previous = reached;
    }
  }
}

TEST_CASE("reductions between trainers") {
  const auto base = testing::toy_dataset(12, 10, 3, [](UserId u) { return u < 6; }, 0.7);
  const auto train = testing::reconstructed(base, [](UserId u) { return u == 7 || u == 10; });
  const auto start = testing::random_model(12, 10, 4, 2, 0.3);
  const auto cfg = small_config();
  DROConfig dro;
  dro.lambda = {1.0, 1.0};
  dro.train = cfg;

  SUBCASE("zero radius is the uniform reconstructed constraint") {
    const auto a = drfo_train(start, train, {0.0, 0.0}, dro);
    const auto b = train_flrsa(start, train, {1.0, 1.0}, cfg);
    CHECK(a.model == b.model);
    auto frozen = dro;
    frozen.train.alpha_q = 0.0;
    CHECK(drfo_train(start, train, {0.3, 0.3}, frozen).model == a.model);
    auto wide = drfo_train(start, train, {0.3, 0.3}, dro);
    CHECK_FALSE(wide.model == a.model);
    for (const auto& row : wide.log) {
      for (double tv : row.tv[0]) CHECK(tv <= 0.3 + 1e-9);
    }
  }
  SUBCASE("zero lambda is plain training") {
    auto off = dro;
    off.lambda = {0.0, 0.0};
    const auto a = drfo_train(start, train, {0.4, 0.4}, off);
    const auto b = train_fair(start, base, {}, cfg);
    CHECK(a.model == b.model);
    CHECK(train_basic_mf(start, base, cfg).model == b.model);
  }
  SUBCASE("an empty forbidden partition adds nothing") {
    auto ext = dro;
    ext.forbidden_extension = true;
    CHECK(drfo_train(start, train, {0.2, 0.2}, ext).model == drfo_train(start, train, {0.2, 0.2}, dro).model);
  }
  SUBCASE("forbidden records get their own part") {
    const auto mixed = testing::with_status(base, [](UserId u) {
      return u < 6 ? AttrStatus::known(static_cast<int>(u % 2)) : u < 9 ? AttrStatus::reconstructable()
                                                                          : AttrStatus::forbidden();
    });
    const auto rtrain = testing::reconstructed(mixed, [](UserId) { return false; });
    auto ext = dro;
    ext.forbidden_extension = true;
    const auto cs = dro_constraints(rtrain, {0.1, 0.2}, ext);
    REQUIRE(cs.size() == 2);
    for (const auto& c : cs) {
      REQUIRE(c.parts.size() == 2);
      CHECK(c.parts[0].partition == Partition::Reconstructable);
      CHECK(c.parts[1].partition == Partition::Forbidden);
      CHECK(c.parts[1].ball.radius == 1.0);
      CHECK(c.eta_k + c.parts[0].eta + c.parts[1].eta == doctest::Approx(1.0));
    }
    CHECK(cs[1].parts[0].ball.radius == 0.2);
    auto omit = dro;
    omit.omit_forbidden = true;
    for (const auto& c : dro_constraints(rtrain, {0.1, 0.2}, omit)) {
      REQUIRE(c.parts.size() == 1);
      CHECK(c.parts[0].partition == Partition::Reconstructable);
      CHECK(c.eta_k + c.parts[0].eta == doctest::Approx(1.0));
    }
  }
}

TEST_CASE("training configuration errors") {
  const auto base = testing::toy_dataset(4, 4, 1, [](UserId) { return true; });
  auto cfg = small_config();
  cfg.inner_steps = 0;
  CHECK_THROWS_AS(train_fair(MFModel(4, 4, 2), base, {}, cfg), ConfigError);
  cfg = small_config();
  GroupConstraint bad;
  bad.lambda = -1.0;
  CHECK_THROWS_AS(train_fair(MFModel(4, 4, 2), base, {bad}, cfg), ConfigError);
  bad.lambda = 1.0;
  bad.known = {1000};
  CHECK_THROWS_AS(train_fair(MFModel(4, 4, 2), base, {bad}, cfg), UsageError);
}
