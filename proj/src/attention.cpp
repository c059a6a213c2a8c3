#include "mattn/attention.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "mattn/rng.hpp"

namespace mattn {

void AttnParams::validate() const {
  const auto d = skip.rows();
  auto check = [d](const Eigen::MatrixXd& m, const char* name) {
    if (m.rows() != d || m.cols() != d)
      throw std::invalid_argument(std::string("attention matrix ") + name + " is " + std::to_string(m.rows()) +
                                  "x" + std::to_string(m.cols()) + ", expected " + std::to_string(d) + "x" +
                                  std::to_string(d));
  };
  check(skip, "A");
  for (const auto& h : heads) {
    check(h.W, "W");
    check(h.Q, "Q");
    check(h.K, "K");
    check(h.V, "V");
  }
}

AttnParams AttnParams::zeros(std::size_t dim, std::size_t n_heads) {
  const auto d = static_cast<Eigen::Index>(dim);
  const Eigen::MatrixXd z = Eigen::MatrixXd::Zero(d, d);
  return AttnParams{std::vector<AttnHead>(n_heads, AttnHead{z, z, z, z}), z};
}

ClassBounds class_bounds(const AttnParams& params) {
  ClassBounds b;
  auto visit = [&b](const Eigen::MatrixXd& m) {
    if (m.size() == 0) return;
    b.head_max_abs = std::max(b.head_max_abs, m.cwiseAbs().maxCoeff());
    b.head_max_nonzeros = std::max(b.head_max_nonzeros, static_cast<std::size_t>((m.array() != 0.0).count()));
  };
  for (const auto& h : params.heads) {
    visit(h.W);
    visit(h.Q);
    visit(h.K);
    visit(h.V);
  }
  if (params.skip.size() > 0) {
    b.skip_max_abs = params.skip.cwiseAbs().maxCoeff();
    b.skip_nonzeros = static_cast<std::size_t>((params.skip.array() != 0.0).count());
  }
  return b;
}

bool in_class(const AttnParams& params, double B_a, std::size_t S_a) {
  const auto b = class_bounds(params);
  return b.B_a() <= B_a && b.S_a() <= S_a;
}

Eigen::VectorXd softmax_weights(const AttnHead& head, const DiscreteMeasure& mu, const Point& x) {
  if (mu.size() == 0) throw std::invalid_argument("softmax over an empty support");
  if (static_cast<std::size_t>(x.size()) != mu.dim() || head.Q.cols() != x.size() || head.K.cols() != x.size())
    throw std::invalid_argument("softmax_weights: dimension mismatch");

  // s_t = <Q x, K y_t> = y_t^T (K^T Q x)
  const Eigen::VectorXd probe = head.K.transpose() * (head.Q * x);
  Eigen::VectorXd scores = mu.support() * probe;
  // Shift by the largest score among charged atoms; zero-weight atoms cannot
  // dominate the normalizer.
  double top = -INFINITY;
  for (Eigen::Index t = 0; t < scores.size(); ++t)
    if (mu.weights()(t) > 0.0) top = std::max(top, scores(t));
  Eigen::VectorXd w(scores.size());
  for (Eigen::Index t = 0; t < w.size(); ++t)
    w(t) = mu.weights()(t) > 0.0 ? mu.weights()(t) * std::exp(scores(t) - top) : 0.0;
  return w / w.sum();
}

Point measure_attention(const AttnParams& params, const DiscreteMeasure& mu, const Point& x) {
  if (static_cast<std::size_t>(x.size()) != params.dim() || mu.dim() != params.dim())
    throw std::invalid_argument("measure_attention: dimension mismatch");
  Point out = params.skip * x;
  for (const auto& h : params.heads) {
    const Eigen::VectorXd w = softmax_weights(h, mu, x);
    const Eigen::VectorXd pooled = mu.support().transpose() * w;  // ∫ y dπ(y)
    out += h.W * (h.V * pooled);
  }
  return out;
}

AttnParams build_recall_params(std::size_t d1, std::size_t d2, std::size_t D, double temperature_c) {
  if (!(temperature_c > 0.0)) throw std::invalid_argument("temperature must be positive");
  const std::size_t dim = d1 + d2 + D;
  const auto n = static_cast<Eigen::Index>(dim);
  AttnParams p = AttnParams::zeros(dim, D);

  Eigen::MatrixXd qk = Eigen::MatrixXd::Zero(n, n);
  qk.topLeftCorner(static_cast<Eigen::Index>(d1), static_cast<Eigen::Index>(d1)).diagonal().setConstant(temperature_c);
  for (std::size_t h = 0; h < D; ++h) {
    const auto k = static_cast<Eigen::Index>(d1 + d2 + h);
    p.heads[h].Q = qk;
    p.heads[h].K = qk;
    p.heads[h].W(k, k) = 1.0;
    p.heads[h].V(k, k) = 1.0;
  }
  p.skip.topLeftCorner(static_cast<Eigen::Index>(d1 + d2), static_cast<Eigen::Index>(d1 + d2)).setIdentity();
  return p;
}

double recall_temperature(std::size_t n_components, double eps2) {
  if (n_components == 0 || !(eps2 > 0.0)) throw std::invalid_argument("recall_temperature: bad arguments");
  const double i = static_cast<double>(n_components);
  const double c2 = std::log(i * i * i / eps2);
  if (!(c2 > 0.0)) throw std::invalid_argument("recall_temperature: eps2 too large for the component count");
  return std::sqrt(c2);
}

// ---------------------------------------------------------------------------

MeasureMap::MeasureMap(Fn fn, std::size_t in_dim, std::size_t out_dim)
    : fn_(std::move(fn)), in_dim_(in_dim), out_dim_(out_dim) {}

Point MeasureMap::operator()(const DiscreteMeasure& nu, const Point& x) const {
  if (static_cast<std::size_t>(x.size()) != in_dim_ || nu.dim() != in_dim_)
    throw std::invalid_argument("measure map input has wrong dimension");
  Point y = fn_(nu, x);
  if (static_cast<std::size_t>(y.size()) != out_dim_)
    throw std::logic_error("measure map produced wrong output dimension");
  return y;
}

MeasureMap MeasureMap::pointwise(std::function<Point(const Point&)> f, std::size_t in_dim, std::size_t out_dim) {
  return MeasureMap([f = std::move(f)](const DiscreteMeasure&, const Point& x) { return f(x); }, in_dim, out_dim);
}

MeasureMap MeasureMap::attention(AttnParams params) {
  params.validate();
  const std::size_t d = params.dim();
  return MeasureMap(
      [p = std::move(params)](const DiscreteMeasure& nu, const Point& x) { return measure_attention(p, nu, x); }, d,
      d);
}

MeasureMap compose(const MeasureMap& g2, const MeasureMap& g1) {
  if (g1.out_dim() != g2.in_dim())
    throw std::invalid_argument("compose: output dimension " + std::to_string(g1.out_dim()) +
                                " does not match input dimension " + std::to_string(g2.in_dim()));
  return MeasureMap(
      [g2, g1](const DiscreteMeasure& nu, const Point& x) {
        const DiscreteMeasure pushed = pushforward(nu, [&](const Point& y) { return g1(nu, y); });
        return g2(pushed, g1(nu, x));
      },
      g1.in_dim(), g2.out_dim());
}

// ---------------------------------------------------------------------------

LipschitzConstants declared_constants(const LipschitzTrial& trial) {
  const auto cb = class_bounds(trial.params);
  LipschitzConstants k;
  k.B_a = cb.B_a();
  k.S_a = cb.S_a();
  k.B_x = std::max(trial.x1.cwiseAbs().maxCoeff(), trial.x2.cwiseAbs().maxCoeff());
  k.B_y = std::max(trial.mu1.support().cwiseAbs().maxCoeff(), trial.mu2.support().cwiseAbs().maxCoeff());
  return k;
}

double lipschitz_bound(std::size_t n_heads, const LipschitzConstants& c) {
  const double H = static_cast<double>(n_heads);
  const double sb = static_cast<double>(c.S_a) * c.B_a;
  const double sb2 = sb * sb;
  const double k = sb2 * c.B_x * c.B_y;
  const double quartic = H * sb2 * sb2 * c.B_x * c.B_y * std::exp(4.0 * k);
  const double measure = quartic + H * (1.0 + k) * sb2 * std::exp(2.0 * k);
  const double query = std::max(sb, quartic);
  return std::max(measure, query);
}

LipschitzReport lipschitz_probe(std::span<const LipschitzTrial> trials, double slack) {
  LipschitzReport rep;
  for (const auto& t : trials) {
    ++rep.trials;
    const double denom = wasserstein1_1d(t.mu1, t.mu2) + (t.x1 - t.x2).norm();
    if (!(denom > 0.0)) {
      ++rep.skipped;
      continue;
    }
    const Point diff = measure_attention(t.params, t.mu1, t.x1) - measure_attention(t.params, t.mu2, t.x2);
    const double ratio = diff.cwiseAbs().maxCoeff() / denom;
    const double bound = lipschitz_bound(t.params.heads.size(), declared_constants(t));
    rep.max_ratio = std::max(rep.max_ratio, ratio);
    if (bound > 0.0) rep.max_ratio_over_bound = std::max(rep.max_ratio_over_bound, ratio / bound);
    if (ratio > bound) ++rep.flagged;
    if (ratio > slack * bound) ++rep.violations;
  }
  return rep;
}

LipschitzTrial random_lipschitz_trial(std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  const auto d = static_cast<Eigen::Index>(pick(1, 4));
  const auto n_heads = static_cast<std::size_t>(pick(1, 2));
  const double scale = coin(rng);  // B_a <= 1 with a spread of magnitudes
  auto random_matrix = [&] {
    Eigen::MatrixXd m(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < d; ++j) m(i, j) = coin(rng) < 0.3 ? 0.0 : scale * unit(rng);
    return m;
  };

  AttnParams params;
  params.skip = random_matrix();
  for (std::size_t h = 0; h < n_heads; ++h)
    params.heads.push_back(AttnHead{random_matrix(), random_matrix(), random_matrix(), random_matrix()});

  const auto axis = static_cast<Eigen::Index>(pick(0, static_cast<int>(d) - 1));
  Eigen::RowVectorXd base(d);
  for (Eigen::Index k = 0; k < d; ++k) base(k) = unit(rng);
  auto random_measure = [&] {
    const auto n = static_cast<Eigen::Index>(pick(1, 8));
    Eigen::MatrixXd s = base.replicate(n, 1);
    Eigen::VectorXd w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      s(i, axis) = unit(rng);
      w(i) = coin(rng) + 1e-3;
    }
    return DiscreteMeasure(std::move(s), w / w.sum());
  };
  auto random_point = [&] {
    Point x(d);
    for (Eigen::Index k = 0; k < d; ++k) x(k) = unit(rng);
    return x;
  };

  DiscreteMeasure mu1 = random_measure();
  const double mode = coin(rng);
  DiscreteMeasure mu2 = mode < 0.2 ? mu1 : random_measure();
  Point x1 = random_point();
  Point x2 = mode > 0.8 ? x1 : random_point();
  return LipschitzTrial{std::move(params), std::move(mu1), std::move(mu2), std::move(x1), std::move(x2)};
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto r = static_cast<Eigen::Index>(j.size());
  const auto c = r ? static_cast<Eigen::Index>(j.front().size()) : 0;
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    if (static_cast<Eigen::Index>(j[static_cast<std::size_t>(i)].size()) != c)
      throw std::invalid_argument("ragged matrix in JSON");
    for (Eigen::Index k = 0; k < c; ++k)
      m(i, k) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)].get<double>();
  }
  return m;
}

}  // namespace

void to_json(nlohmann::json& j, const AttnParams& p) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : p.heads)
    heads.push_back({{"W", matrix_to_json(h.W)}, {"Q", matrix_to_json(h.Q)}, {"K", matrix_to_json(h.K)},
                     {"V", matrix_to_json(h.V)}});
  j = nlohmann::json{{"dim", p.dim()}, {"skip", matrix_to_json(p.skip)}, {"heads", std::move(heads)}};
}

void from_json(const nlohmann::json& j, AttnParams& p) {
  p.skip = matrix_from_json(j.at("skip"));
  p.heads.clear();
  for (const auto& h : j.at("heads"))
    p.heads.push_back(AttnHead{matrix_from_json(h.at("W")), matrix_from_json(h.at("Q")), matrix_from_json(h.at("K")),
                               matrix_from_json(h.at("V"))});
  p.validate();
}

}  // namespace mattn
