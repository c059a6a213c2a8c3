#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "mattn/attention.hpp"
#include "mattn/spectrum.hpp"

using namespace mattn;
using doctest::Approx;

namespace {

Point vec(std::initializer_list<double> xs) {
  Point p(xs.size());
  Eigen::Index i = 0;
  for (double x : xs) p(i++) = x;
  return p;
}

DiscreteMeasure random_measure(std::mt19937_64& rng, Eigen::Index n, Eigen::Index d) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), w(0.1, 1.0);
  Eigen::MatrixXd s(n, d);
  Eigen::VectorXd p(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < d; ++k) s(i, k) = u(rng);
    p(i) = w(rng);
  }
  return DiscreteMeasure(s, p / p.sum());
}

Eigen::MatrixXd random_matrix(std::mt19937_64& rng, Eigen::Index d) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::MatrixXd m(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = u(rng);
  return m;
}

AttnParams random_params(std::mt19937_64& rng, Eigen::Index d, std::size_t H) {
  AttnParams p;
  p.skip = random_matrix(rng, d);
  for (std::size_t h = 0; h < H; ++h)
    p.heads.push_back({random_matrix(rng, d), random_matrix(rng, d), random_matrix(rng, d), random_matrix(rng, d)});
  return p;
}

}  // namespace

TEST_CASE("softmax weights") {
  std::mt19937_64 rng(1);
  const auto mu = random_measure(rng, 5, 3);
  const Point x = vec({0.3, -0.2, 0.9});

  SUBCASE("zero query reproduces the measure") {
    AttnHead h{Eigen::MatrixXd::Identity(3, 3), Eigen::MatrixXd::Zero(3, 3), random_matrix(rng, 3),
               Eigen::MatrixXd::Identity(3, 3)};
    const auto w = softmax_weights(h, mu, x);
    CHECK((w - mu.weights()).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("single atom") {
    AttnHead h{random_matrix(rng, 3), random_matrix(rng, 3), random_matrix(rng, 3), random_matrix(rng, 3)};
    const auto w = softmax_weights(h, DiscreteMeasure::dirac(x), x);
    REQUIRE(w.size() == 1);
    CHECK(w(0) == 1.0);
  }
  SUBCASE("scores s and s + ln 3 on two equal atoms") {
    // <Q x, K y> = y for Q = K = 1, x = 1.
    Eigen::MatrixXd s(2, 1);
    const double base = 0.7;
    s << base, base + std::log(3.0);
    AttnHead h{Eigen::MatrixXd::Ones(1, 1), Eigen::MatrixXd::Ones(1, 1), Eigen::MatrixXd::Ones(1, 1),
               Eigen::MatrixXd::Ones(1, 1)};
    const auto w = softmax_weights(h, DiscreteMeasure::uniform(s), vec({1.0}));
    const double e0 = std::exp(base), e1 = std::exp(base + std::log(3.0));
    CHECK(w(0) == Approx(e0 / (e0 + e1)).epsilon(1e-14));
    CHECK(w(1) == Approx(e1 / (e0 + e1)).epsilon(1e-14));
    CHECK(w(0) == Approx(0.25).epsilon(1e-14));
  }
  SUBCASE("sums to one and ignores score shifts") {
    for (int rep = 0; rep < 50; ++rep) {
      const auto m = random_measure(rng, 6, 3);
      const AttnHead h{random_matrix(rng, 3), 5.0 * random_matrix(rng, 3), random_matrix(rng, 3), random_matrix(rng, 3)};
      const auto w = softmax_weights(h, m, x);
      CHECK(std::abs(w.sum() - 1.0) < 1e-12);
      CHECK((w.array() >= 0.0).all());
      // Adding a constant score c to every atom: append a coordinate fixed at 1 whose key pairs with a query 1.
      Eigen::MatrixXd s(m.size(), 4);
      s << m.support(), Eigen::VectorXd::Ones(m.size());
      AttnHead h4{Eigen::MatrixXd::Zero(4, 4), Eigen::MatrixXd::Zero(4, 4), Eigen::MatrixXd::Zero(4, 4),
                  Eigen::MatrixXd::Zero(4, 4)};
      h4.Q.topLeftCorner(3, 3) = h.Q;
      h4.K.topLeftCorner(3, 3) = h.K;
      h4.Q(3, 3) = 1.0;
      h4.K(3, 3) = 37.5;
      Point x4(4);
      x4 << x, 1.0;
      const auto w4 = softmax_weights(h4, DiscreteMeasure(s, m.weights()), x4);
      CHECK((w4 - w).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("large scores stay finite") {
    AttnHead h{Eigen::MatrixXd::Identity(3, 3), 1e3 * Eigen::MatrixXd::Identity(3, 3), Eigen::MatrixXd::Identity(3, 3),
               Eigen::MatrixXd::Identity(3, 3)};
    const auto w = softmax_weights(h, mu, x);
    CHECK(w.allFinite());
    CHECK(w.sum() == Approx(1.0));
  }
  SUBCASE("zero-weight atoms get no weight") {
    Eigen::MatrixXd s(2, 1);
    s << 0.0, 1000.0;
    AttnHead h{Eigen::MatrixXd::Ones(1, 1), Eigen::MatrixXd::Ones(1, 1), Eigen::MatrixXd::Ones(1, 1),
               Eigen::MatrixXd::Ones(1, 1)};
    const auto w = softmax_weights(h, DiscreteMeasure(s, vec({1.0, 0.0})), vec({1.0}));
    CHECK(w(0) == 1.0);
    CHECK(w(1) == 0.0);
  }
}

TEST_CASE("measure attention") {
  std::mt19937_64 rng(2);
  const auto mu = random_measure(rng, 5, 3);
  const Point x = vec({0.1, 0.5, -0.4});

  SUBCASE("pure skip") {
    auto p = AttnParams::zeros(3, 2);
    p.skip = Eigen::MatrixXd::Identity(3, 3);
    CHECK(measure_attention(p, mu, x) == x);
  }
  SUBCASE("single token passes through W = V = I") {
    auto p = AttnParams::zeros(3, 1);
    p.heads[0] = {Eigen::MatrixXd::Identity(3, 3), random_matrix(rng, 3), random_matrix(rng, 3),
                  Eigen::MatrixXd::Identity(3, 3)};
    const Point y = vec({0.2, -0.7, 0.4});
    CHECK((measure_attention(p, DiscreteMeasure::dirac(y), x) - y).norm() < 1e-15);
  }
  SUBCASE("matches a direct weighted sum") {
    const auto p = random_params(rng, 3, 2);
    Point expect = p.skip * x;
    for (const auto& h : p.heads) {
      Eigen::VectorXd s(mu.size());
      for (Eigen::Index t = 0; t < s.size(); ++t) s(t) = (h.Q * x).dot(h.K * mu.support().row(t).transpose());
      Eigen::VectorXd e = (s.array()).exp() * mu.weights().array();
      e /= e.sum();
      Point acc = Point::Zero(3);
      for (Eigen::Index t = 0; t < s.size(); ++t) acc += e(t) * (h.V * mu.support().row(t).transpose());
      expect += h.W * acc;
    }
    CHECK((measure_attention(p, mu, x) - expect).cwiseAbs().maxCoeff() < 1e-13);
  }
  SUBCASE("support order does not matter") {
    const auto p = random_params(rng, 3, 2);
    std::vector<int> perm(mu.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::MatrixXd s(mu.size(), 3);
    Eigen::VectorXd w(mu.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
      s.row(i) = mu.support().row(perm[i]);
      w(i) = mu.weights()(perm[i]);
    }
    CHECK((measure_attention(p, DiscreteMeasure(s, w), x) - measure_attention(p, mu, x)).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("linear in the skip") {
    auto p = AttnParams::zeros(3, 1);
    p.skip = random_matrix(rng, 3);
    const Point once = measure_attention(p, mu, x);
    p.skip *= 2.0;
    CHECK(measure_attention(p, mu, x) == 2.0 * once);
  }
  SUBCASE("dimension mismatch") {
    const auto p = random_params(rng, 2, 1);
    CHECK_THROWS(measure_attention(p, mu, x));
    AttnParams bad = random_params(rng, 3, 1);
    bad.heads[0].V = Eigen::MatrixXd::Zero(2, 2);
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  }
}

TEST_CASE("recall construction") {
  const double c = 2.5;
  const auto p = build_recall_params(2, 1, 4, c);
  REQUIRE(p.dim() == 7);
  REQUIRE(p.heads.size() == 4);
  const auto b = class_bounds(p);
  CHECK(b.head_max_abs == c);
  CHECK(b.head_max_nonzeros == 2);
  CHECK(b.skip_nonzeros == 3);
  CHECK(in_class(p, c, 3));
  CHECK_FALSE(in_class(p, c, 2));
  for (std::size_t h = 0; h < 4; ++h) {
    CHECK(p.heads[h].W(3 + h, 3 + h) == 1.0);
    CHECK(p.heads[h].W.cwiseAbs().sum() == 1.0);
    CHECK(p.heads[h].Q == p.heads[h].K);
    CHECK(p.heads[h].Q(0, 0) == c);
    CHECK(p.heads[h].Q(2, 2) == 0.0);
  }
  CHECK(p.skip.diagonal() == vec({1, 1, 1, 0, 0, 0, 0}));
  CHECK(recall_temperature(2, 1e-4) == Approx(std::sqrt(std::log(8.0 / 1e-4))));

  SUBCASE("extracted coordinates track the star component") {
    const MercerSpectrum spec(1.0, 1.0, 9, 32);
    std::mt19937_64 rng(7);
    const std::size_t I = 2, D = 4;
    const double cc = recall_temperature(I, 1e-4);
    const auto params = build_recall_params(2, 1, D, cc);
    // Tokens (tag | z | e_1(z)..e_D(z)) with tags e_1, e_2 in R^2.
    std::vector<Eigen::RowVectorXd> rows;
    std::vector<double> weights;
    std::vector<std::vector<double>> pmfs(I);
    for (std::size_t i = 0; i < I; ++i) {
      std::vector<double> z(9, 0.0);
      std::normal_distribution<double> g;
      for (std::size_t j = 1; j < 9; ++j) z[j] = g(rng);
      pmfs[i] = synth_density(spec, z);
      for (std::size_t t = 0; t < 32; ++t) {
        Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(7);
        r(i) = 1.0;
        r(2) = spec.grid()[t];
        for (std::size_t j = 1; j <= D; ++j) r(2 + j) = basis_eval(spec, j, spec.grid()[t]);
        rows.push_back(r);
        weights.push_back(pmfs[i][t] / I);
      }
    }
    Eigen::MatrixXd s(rows.size(), 7);
    Eigen::VectorXd w(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      s.row(k) = rows[k];
      w(k) = weights[k];
    }
    const Point q = vec({1, 0, 0, 0, 0, 0, 0});
    const Point out = measure_attention(params, DiscreteMeasure(s, w / w.sum()), q);
    for (std::size_t j = 1; j <= D; ++j) {
      double oracle = 0.0, emax = 0.0;
      for (std::size_t t = 0; t < 32; ++t) {
        oracle += pmfs[0][t] * basis_eval(spec, j, spec.grid()[t]);
        emax = std::max(emax, std::abs(basis_eval(spec, j, spec.grid()[t])));
      }
      CHECK(std::abs(out(2 + j) - oracle) <= I * std::exp(-cc * cc) * emax);
    }
    CHECK(out(0) == 1.0);
  }
}

TEST_CASE("composition") {
  std::mt19937_64 rng(4);
  const auto mu = random_measure(rng, 4, 3);
  const Point x = vec({0.2, 0.4, 0.6});
  SUBCASE("identity") {
    const auto id = MeasureMap::pointwise([](const Point& p) { return p; }, 3, 3);
    CHECK(compose(id, id)(mu, x) == x);
  }
  SUBCASE("projection then mean") {
    const auto proj = MeasureMap::pointwise([](const Point& p) { return Point(p.head(2)); }, 3, 2);
    const MeasureMap mean([](const DiscreteMeasure& nu, const Point&) { return nu.mean(); }, 2, 2);
    Point expect = Point::Zero(2);
    for (std::size_t t = 0; t < mu.size(); ++t) expect += mu.weights()(t) * mu.support().row(t).head(2).transpose();
    CHECK((compose(mean, proj)(mu, x) - expect).norm() < 1e-15);
  }
  SUBCASE("MLP after attention matches two-step evaluation") {
    const auto p = random_params(rng, 3, 2);
    const auto attn = MeasureMap::attention(p);
    const auto mlp = MeasureMap::pointwise([](const Point& y) { return Point(y.array().tanh()); }, 3, 3);
    // attn then MLP: the MLP is measure-independent, so composing is point evaluation.
    CHECK((compose(mlp, attn)(mu, x) - measure_attention(p, mu, x).array().tanh().matrix()).norm() < 1e-15);
    // MLP then attn: the measure is pushed through the MLP token by token.
    const auto pushed = pushforward(mu, [](const Point& y) { return Point(y.array().tanh()); });
    CHECK((compose(attn, mlp)(mu, x) - measure_attention(p, pushed, x.array().tanh().matrix())).norm() < 1e-15);
    // Two attention layers: the second sees attn(mu, .)_# mu.
    const auto p2 = random_params(rng, 3, 1);
    const auto two = compose(MeasureMap::attention(p2), attn)(mu, x);
    const auto mid = pushforward(mu, [&](const Point& y) { return measure_attention(p, mu, y); });
    CHECK((two - measure_attention(p2, mid, measure_attention(p, mu, x))).norm() < 1e-15);
  }
  SUBCASE("dimension mismatch") {
    const auto a = MeasureMap::pointwise([](const Point& p) { return p; }, 3, 3);
    const auto b = MeasureMap::pointwise([](const Point& p) { return Point(p.head(2)); }, 3, 2);
    CHECK_THROWS_AS(compose(a, b), std::invalid_argument);
  }
}

TEST_CASE("lipschitz probe") {
  SUBCASE("identical inputs are skipped") {
    std::mt19937_64 rng(5);
    const auto mu = random_measure(rng, 3, 1);
    LipschitzTrial t{random_params(rng, 1, 1), mu, mu, vec({0.1}), vec({0.1})};
    const auto r = lipschitz_probe(std::span(&t, 1));
    CHECK(r.skipped == 1);
    CHECK(r.violations == 0);
  }
  SUBCASE("zero params give ratio zero") {
    Eigen::MatrixXd s1(2, 1), s2(2, 1);
    s1 << 0.0, 1.0;
    s2 << 0.5, 0.2;
    LipschitzTrial t{AttnParams::zeros(1, 2), DiscreteMeasure::uniform(s1), DiscreteMeasure::uniform(s2), vec({0.3}),
                     vec({0.1})};
    const auto r = lipschitz_probe(std::span(&t, 1));
    CHECK(r.max_ratio == 0.0);
    CHECK(r.flagged == 0);
  }
  SUBCASE("bound formula") {
    LipschitzConstants k{0.5, 2, 1.0, 1.0};
    const double kk = 2.0 * 2.0 * 0.25 * 1.0 * 1.0;  // S^2 B^2 Bx By = 1
    const double quartic = 2 * 16 * 0.0625 * std::exp(4 * kk);
    const double meas = quartic + 2 * (1 + kk) * 4 * 0.25 * std::exp(2 * kk);
    CHECK(lipschitz_bound(2, k) == Approx(std::max(meas, std::max(1.0, quartic))));
  }
  SUBCASE("random instances respect the bound within 2x") {
    std::vector<LipschitzTrial> trials;
    for (std::uint64_t s = 0; s < 1000; ++s) trials.push_back(random_lipschitz_trial(s + 12345));
    const auto r = lipschitz_probe(trials);
    CHECK(r.trials == 1000);
    CHECK(r.violations == 0);
    for (const auto& t : trials) {
      CHECK(t.params.dim() <= 4);
      CHECK(t.mu1.size() <= 8);
      CHECK(class_bounds(t.params).B_a() <= 1.0);
    }
  }
}

TEST_CASE("params json round trip") {
  std::mt19937_64 rng(6);
  const auto p = random_params(rng, 3, 2);
  nlohmann::json j = p;
  CHECK(j["dim"] == 3);
  const auto back = j.get<AttnParams>();
  CHECK(back.skip == p.skip);
  REQUIRE(back.heads.size() == 2);
  CHECK(back.heads[1].K == p.heads[1].K);
}
