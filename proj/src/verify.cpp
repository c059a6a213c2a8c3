#include "mattn/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <stdexcept>

#include "mattn/attention.hpp"
#include "mattn/measures.hpp"
#include "mattn/model.hpp"
#include "mattn/rng.hpp"
#include "mattn/spectrum.hpp"

namespace mattn::verify {

namespace {

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

template <class Body>
SuiteResult timed(std::string name, Body&& body) {
  SuiteResult r;
  r.suite = std::move(name);
  const auto t0 = std::chrono::steady_clock::now();
  body(r);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

DensityCoeffs random_coeffs(std::size_t modes, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  DensityCoeffs b{std::vector<double>(modes, 0.0)};
  for (std::size_t j = 1; j < modes; ++j) b.coeffs[j] = normal(rng);
  return b;
}

}  // namespace

bool SuiteResult::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

const Check* SuiteResult::first_failure() const {
  for (const auto& c : checks)
    if (!c.passed) return &c;
  return nullptr;
}

SuiteResult orthonormality(const Options& opts) {
  return timed("orthonormality", [&](SuiteResult& r) {
    constexpr double tol = 1e-9;
    const MercerSpectrum spec(1.0, 1.0, 16, 32);
    auto basis = [&](std::size_t j, double x) {
      const double e = basis_eval(spec, j, x);
      return (opts.corrupt_basis && j == 3) ? 1.01 * e : e;
    };
    const double T = static_cast<double>(spec.grid_size());
    for (std::size_t j = 0; j < spec.modes(); ++j) {
      for (std::size_t k = j; k < spec.modes(); ++k) {
        double gram = 0.0;
        for (double x : spec.grid()) gram += basis(j, x) * basis(k, x);
        gram /= T;
        const double err = std::abs(gram - (j == k ? 1.0 : 0.0));
        if (j == 0 && k > 0) continue;  // the constant mode is not orthogonal to odd sines
        if (err > tol || (j == k && (j == 0 || j == 3 || j + 1 == spec.modes())) || (j == 1 && k == 2)) {
          r.checks.push_back({"gram(e_" + std::to_string(j) + ", e_" + std::to_string(k) + ")", err <= tol,
                              fmt("|G - delta| = %.3g", err)});
        }
      }
    }
  });
}

SuiteResult isometry(const Options&) {
  return timed("isometry", [&](SuiteResult& r) {
    Rng rng = make_rng(0x150);
    std::uniform_real_distribution<double> expo(-2.0, 2.0);
    double worst_norm = 0.0, worst_roundtrip = 0.0;
    bool ball_ok = true;
    for (double alpha : {0.5, 1.0, 2.0}) {
      const MercerSpectrum spec(alpha, 1.0, 16, 32);
      for (int trial = 0; trial < 50; ++trial) {
        const DensityCoeffs b = random_coeffs(spec.modes(), rng);
        const IsometryExponents e{expo(rng), expo(rng), expo(rng)};
        const DensityCoeffs img = isometry_map(spec, b, e);
        const double before = gen_norm_sq(spec, b, e.source);
        const double after = gen_norm_sq(spec, img, e.target);
        worst_norm = std::max(worst_norm, std::abs(after - before) / before);

        const DensityCoeffs back = isometry_map(spec, img, IsometryExponents{e.image_ball(), e.target, e.source});
        for (std::size_t j = 0; j < spec.modes(); ++j)
          worst_roundtrip = std::max(worst_roundtrip,
                                     std::abs(back.coeffs[j] - b.coeffs[j]) / std::max(1.0, std::abs(b.coeffs[j])));

        // Ball membership is preserved: ‖b‖_a and ‖phi(b)‖_{a-b+c} coincide.
        const double in_ball = gen_norm_sq(spec, b, e.ball);
        const double out_ball = gen_norm_sq(spec, img, e.image_ball());
        if (std::abs(in_ball - out_ball) > 1e-10 * std::max(in_ball, out_ball)) ball_ok = false;
      }
    }
    r.checks.push_back({"norm preservation (rel 1e-10)", worst_norm <= 1e-10, fmt("max rel err %.3g", worst_norm)});
    r.checks.push_back({"inverse map round trip (1e-12)", worst_roundtrip <= 1e-12, fmt("max err %.3g", worst_roundtrip)});
    r.checks.push_back({"unit ball maps onto unit ball", ball_ok, ""});
  });
}

SuiteResult truncation(const Options& opts) {
  return timed("truncation", [&](SuiteResult& r) {
    constexpr double gamma_f = -1.0, gamma_b = 1.0;
    Rng rng = make_rng(0x7C);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (double alpha : {0.5, 1.0, 2.0}) {
      const MercerSpectrum spec(alpha, 1.0, 16, 32);
      for (std::size_t D : {2, 4, 8}) {
        const double bound = truncation_bound(spec, D, gamma_f, gamma_b);
        double worst = 0.0;
        for (std::size_t draw = 0; draw < opts.truncation_draws; ++draw) {
          // b_j = lambda_j^{gamma_b/2} g_j spreads the gamma_b energy evenly over modes.
          DensityCoeffs b = random_coeffs(spec.modes(), rng);
          for (std::size_t j = 1; j < spec.modes(); ++j) b.coeffs[j] *= std::pow(eigenvalue(spec, j), 0.5 * gamma_b);
          // Every other draw pushes all energy into the tail, the hard case.
          if (draw % 2 == 1)
            for (std::size_t j = 1; j <= D; ++j) b.coeffs[j] = 0.0;
          const double radius = std::pow(unit(rng), 0.25);
          const double scale = radius / std::sqrt(gen_norm_sq(spec, b, gamma_b));
          for (double& x : b.coeffs) x *= scale;
          worst = std::max(worst, tail_norm(spec, b, D, gamma_f) / bound);
        }
        char name[96];
        std::snprintf(name, sizeof name, "alpha=%g D=%zu: tail <= bound over %zu draws", alpha, D,
                      opts.truncation_draws);
        r.checks.push_back({name, worst <= 1.0 + 1e-12, fmt("max tail/bound %.6f", worst)});
      }
    }
  });
}

SuiteResult recall(const Options&) {
  return timed("recall", [&](SuiteResult& r) {
    constexpr double eps2 = 1e-4;
    constexpr std::size_t D = 8;
    const MercerSpectrum spec(1.0, 1.0, 16, 32);
    const auto T = static_cast<Eigen::Index>(spec.grid_size());
    const Eigen::MatrixXd grid = Eigen::Map<const Eigen::VectorXd>(spec.grid().data(), T);
    Rng rng = make_rng(0xEC);
    std::normal_distribution<double> normal(0.0, 1.0);

    for (std::size_t I : {2, 4}) {
      const std::size_t d1 = I, d2 = 1;
      std::vector<DiscreteMeasure> comps;
      std::vector<Point> tags;
      for (std::size_t i = 0; i < I; ++i) {
        std::vector<double> z(spec.modes(), 0.0);
        for (std::size_t j = 1; j < spec.modes(); ++j) z[j] = normal(rng);
        const auto pmf = synth_density(spec, z);
        comps.emplace_back(grid, Eigen::Map<const Eigen::VectorXd>(pmf.data(), T));
        tags.push_back(Point::Unit(static_cast<Eigen::Index>(d1), static_cast<Eigen::Index>(i)));
      }
      auto features = [&](const Point& y) {
        Point out(static_cast<Eigen::Index>(d1 + d2 + D));
        out.head(static_cast<Eigen::Index>(d1 + d2)) = y;
        const double z = y(static_cast<Eigen::Index>(d1));
        for (std::size_t h = 1; h <= D; ++h) out(static_cast<Eigen::Index>(d1 + d2 + h - 1)) = basis_eval(spec, h, z);
        return out;
      };

      const double c = recall_temperature(I, eps2);
      const AttnParams params = build_recall_params(d1, d2, D, c);
      double worst = 0.0;
      for (std::size_t star = 0; star < I; ++star) {
        const auto mix = build_mixture(comps, tags, star);
        const DiscreteMeasure nu = pushforward(flatten(mix.context), features);
        const Point x = features(mix.query);
        const Point out = measure_attention(params, nu, x);

        bool skip_ok = out.head(static_cast<Eigen::Index>(d1 + d2)) == x.head(static_cast<Eigen::Index>(d1 + d2));
        for (std::size_t h = 1; h <= D; ++h) {
          double oracle = 0.0, max_abs = 0.0;
          for (Eigen::Index t = 0; t < T; ++t) {
            const double e = basis_eval(spec, h, spec.grid()[static_cast<std::size_t>(t)]);
            oracle += comps[star].weights()(t) * e;
            max_abs = std::max(max_abs, std::abs(e));
          }
          const double err = std::abs(out(static_cast<Eigen::Index>(d1 + d2 + h - 1)) - oracle);
          worst = std::max(worst, err / (5.0 * eps2 * max_abs));
        }
        if (!skip_ok)
          r.checks.push_back({"I=" + std::to_string(I) + " skip copies tag and content", false, ""});
      }
      r.checks.push_back({"I=" + std::to_string(I) + ": |extracted - oracle| <= 5 eps2 max|e_j|, j <= 8", worst <= 1.0,
                          fmt("max err / budget = %.3g (c^2 = %.4f)", worst, c * c)});
    }
  });
}

SuiteResult softmax_mass(const Options&) {
  return timed("softmax_mass", [&](SuiteResult& r) {
    // Two orthogonal tags, each component a pair of atoms.
    std::vector<DiscreteMeasure> comps;
    Eigen::MatrixXd s(2, 1);
    s << 0.2, 0.7;
    comps.emplace_back(s, Eigen::Vector2d(0.3, 0.7));
    s << 0.4, 0.9;
    comps.emplace_back(s, Eigen::Vector2d(0.5, 0.5));
    const std::vector<Point> tags{Point::Unit(2, 0), Point::Unit(2, 1)};
    const auto mix = build_mixture(comps, tags, 0);
    // One feature coordinate (the content itself) so a single recall head fits.
    auto lift = [](const Point& y) {
      Point out(y.size() + 1);
      out << y, y(y.size() - 1);
      return out;
    };
    const DiscreteMeasure nu = pushforward(flatten(mix.context), lift);
    const Point query = lift(mix.query);

    auto star_density = [&](double c) {
      const AttnParams p = build_recall_params(2, 1, 1, c);
      const Eigen::VectorXd w = softmax_weights(p.heads[0], nu, query);
      double per_unit = 0.0, star_mass = 0.0;
      for (Eigen::Index t = 0; t < w.size(); ++t)
        if (nu.support()(t, 0) == 1.0) {
          per_unit = w(t) / nu.weights()(t);
          star_mass += w(t);
        }
      return std::make_pair(per_unit, star_mass);
    };

    const double expected = 200.0 / 101.0;
    const double got = star_density(std::sqrt(std::log(100.0))).first;
    r.checks.push_back({"I=2, c^2=ln 100: per-unit-mass star weight = 200/101", std::abs(got - expected) <= 1e-10,
                        fmt("got %.15f, expected %.15f", got, expected)});

    double prev = 0.0;
    bool monotone = true;
    for (double c2 : {1.0, 4.0, 9.0, std::log(1e4)}) {
      const double m = star_density(std::sqrt(c2)).second;
      monotone = monotone && m > prev;
      prev = m;
    }
    r.checks.push_back({"star mass increases toward 1 with c", monotone && prev > 0.9998, fmt("mass at ln 1e4: %.8f", prev)});
  });
}

SuiteResult lipschitz(const Options& opts) {
  return timed("lipschitz", [&](SuiteResult& r) {
    std::vector<LipschitzTrial> trials;
    trials.reserve(opts.lipschitz_trials);
    for (std::size_t i = 0; i < opts.lipschitz_trials; ++i) trials.push_back(random_lipschitz_trial(derive_seed(0x119, {i})));
    const auto rep = lipschitz_probe(trials, 2.0);
    char detail[200];
    std::snprintf(detail, sizeof detail, "%zu trials, %zu skipped, %zu above bound, max ratio/bound %.3g",
                  rep.trials, rep.skipped, rep.flagged, rep.max_ratio_over_bound);
    r.checks.push_back({"no violations beyond 2x slack", rep.violations == 0, detail});
  });
}

SuiteResult gradients(const Options& opts) {
  return timed("gradients", [&](SuiteResult& r) {
    constexpr double step = 1e-5;
    constexpr double tol = 1e-4;
    double worst = 0.0;
    for (std::size_t seed = 0; seed < opts.grad_seeds; ++seed) {
      Rng rng = make_rng(derive_seed(0x6AD, {seed}));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      std::normal_distribution<double> normal(0.0, 1.0);

      StudentModel model = StudentModel::init(StudentConfig{}, seed);
      for (double& p : model.mutable_params()) p += 0.1 * normal(rng);  // nonzero biases too
      const Eigen::Index T = 3 + static_cast<Eigen::Index>(seed % 5);
      Eigen::MatrixXd ctx(T, 2);
      for (Eigen::Index t = 0; t < T; ++t) ctx.row(t) << unit(rng), unit(rng) < 0.5 ? -1.0 : 1.0;
      const Eigen::Vector2d query(0.0, unit(rng) < 0.5 ? -1.0 : 1.0);

      auto fwd = model.forward(ctx, query);
      model.backward(fwd.cache, 1.0);
      const std::vector<double> analytic(model.grads().begin(), model.grads().end());

      std::vector<std::size_t> coords(analytic.size());
      std::iota(coords.begin(), coords.end(), std::size_t{0});
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(std::min(opts.grad_coords, coords.size()));
      for (std::size_t i : coords) {
        const double saved = model.params()[i];
        model.mutable_params()[i] = saved + step;
        const double up = model.predict(ctx, query);
        model.mutable_params()[i] = saved - step;
        const double down = model.predict(ctx, query);
        model.mutable_params()[i] = saved;
        const double fd = (up - down) / (2.0 * step);
        const double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-6});
        worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
      }
    }
    char name[96];
    std::snprintf(name, sizeof name, "analytic vs central differences, %zu coords x %zu seeds", opts.grad_coords,
                  opts.grad_seeds);
    r.checks.push_back({name, worst <= tol, fmt("max rel err %.3g", worst)});
  });
}

const std::vector<SuiteEntry>& registry() {
  static const std::vector<SuiteEntry> suites{
      {"orthonormality", orthonormality}, {"isometry", isometry}, {"truncation", truncation},
      {"recall", recall},                 {"softmax_mass", softmax_mass}, {"lipschitz", lipschitz},
      {"gradients", gradients},
  };
  return suites;
}

SuiteResult run_suite(const std::string& name, const Options& opts) {
  for (const auto& s : registry())
    if (s.name == name) return s.run(opts);
  throw std::invalid_argument("unknown suite '" + name + "'");
}

}  // namespace mattn::verify
