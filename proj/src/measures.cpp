#include "mattn/measures.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "mattn/rng.hpp"

namespace mattn {

namespace {

constexpr double kMassTol = 1e-9;
constexpr double kSeparationTol = 1e-12;

void validate(const Eigen::MatrixXd& support, const Eigen::VectorXd& weights, bool normalized) {
  if (support.rows() == 0) throw std::invalid_argument("measure needs at least one atom");
  if (support.rows() != weights.size())
    throw std::invalid_argument("support has " + std::to_string(support.rows()) + " atoms but " +
                                std::to_string(weights.size()) + " weights");
  if ((weights.array() < 0.0).any()) throw std::invalid_argument("negative measure weight");
  if (!weights.allFinite() || !support.allFinite()) throw std::invalid_argument("non-finite measure data");
  if (normalized && std::abs(weights.sum() - 1.0) > kMassTol)
    throw std::invalid_argument("probability weights sum to " + std::to_string(weights.sum()));
}

}  // namespace

DiscreteMeasure::DiscreteMeasure(Eigen::MatrixXd support, Eigen::VectorXd weights)
    : DiscreteMeasure(std::move(support), std::move(weights), true) {}

DiscreteMeasure::DiscreteMeasure(Eigen::MatrixXd support, Eigen::VectorXd weights, bool normalized)
    : support_(std::move(support)), weights_(std::move(weights)), normalized_(normalized) {
  validate(support_, weights_, normalized_);
}

DiscreteMeasure DiscreteMeasure::unnormalized(Eigen::MatrixXd support, Eigen::VectorXd weights) {
  return DiscreteMeasure(std::move(support), std::move(weights), false);
}

DiscreteMeasure DiscreteMeasure::dirac(const Point& at) {
  return DiscreteMeasure(Eigen::MatrixXd(at.transpose()), Eigen::VectorXd::Ones(1));
}

DiscreteMeasure DiscreteMeasure::uniform(Eigen::MatrixXd support) {
  const auto n = support.rows();
  if (n == 0) throw std::invalid_argument("measure needs at least one atom");
  return DiscreteMeasure(std::move(support), Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n)));
}

Point DiscreteMeasure::mean() const { return support_.transpose() * weights_; }

DiscreteMeasure product_embed(const DiscreteMeasure& mu0, const Point& tag) {
  return pushforward(mu0, [&](const Point& z) {
    Point out(tag.size() + z.size());
    out << tag, z;
    return out;
  });
}

MixtureWithQuery build_mixture(std::vector<DiscreteMeasure> components, std::vector<Point> tags,
                               std::size_t star_index) {
  const std::size_t count = components.size();
  std::vector<double> w(count, count ? 1.0 / static_cast<double>(count) : 0.0);
  return build_mixture(std::move(components), std::move(tags), std::move(w), star_index);
}

MixtureWithQuery build_mixture(std::vector<DiscreteMeasure> components, std::vector<Point> tags,
                               std::vector<double> mix_weights, std::size_t star_index) {
  if (components.empty()) throw std::invalid_argument("mixture needs at least one component");
  if (tags.size() != components.size() || mix_weights.size() != components.size())
    throw std::invalid_argument("components, tags and mixing weights must have equal length");
  if (star_index >= components.size()) throw std::invalid_argument("star index out of range");

  const auto d1 = tags.front().size();
  const auto d2 = components.front().dim();
  for (std::size_t i = 0; i < components.size(); ++i) {
    if (tags[i].size() != d1) throw std::invalid_argument("tags disagree in dimension");
    if (components[i].dim() != d2) throw std::invalid_argument("components disagree in dimension");
    if (!components[i].normalized()) throw std::invalid_argument("mixture components must be probability measures");
    for (std::size_t k = 0; k < i; ++k)
      if (tags[i].dot(tags[k]) > kSeparationTol)
        throw std::invalid_argument("tags " + std::to_string(k) + " and " + std::to_string(i) +
                                    " are not separated");
  }
  const double total = std::accumulate(mix_weights.begin(), mix_weights.end(), 0.0);
  if (std::any_of(mix_weights.begin(), mix_weights.end(), [](double w) { return w < 0.0; }) ||
      std::abs(total - 1.0) > kMassTol)
    throw std::invalid_argument("mixing weights must be a probability vector");

  Point query = Point::Zero(d1 + static_cast<Eigen::Index>(d2));
  query.head(d1) = tags[star_index];
  return {MixtureContext{std::move(components), std::move(tags), std::move(mix_weights), star_index},
          std::move(query)};
}

DiscreteMeasure flatten(const MixtureContext& ctx) {
  const auto d1 = static_cast<Eigen::Index>(ctx.tag_dim());
  const auto d2 = static_cast<Eigen::Index>(ctx.content_dim());
  Eigen::Index total = 0;
  for (const auto& c : ctx.components) total += static_cast<Eigen::Index>(c.size());

  Eigen::MatrixXd support(total, d1 + d2);
  Eigen::VectorXd weights(total);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < ctx.components.size(); ++i) {
    const auto& comp = ctx.components[i];
    const auto n = static_cast<Eigen::Index>(comp.size());
    support.block(row, 0, n, d1).rowwise() = ctx.tags[i].transpose();
    support.block(row, d1, n, d2) = comp.support();
    weights.segment(row, n) = ctx.mix_weights[i] * comp.weights();
    row += n;
  }
  return DiscreteMeasure(std::move(support), std::move(weights));
}

DiscreteMeasure condition_on_tag(const DiscreteMeasure& flat, const Point& tag) {
  const auto d1 = tag.size();
  if (d1 > static_cast<Eigen::Index>(flat.dim())) throw std::invalid_argument("tag longer than atoms");
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < flat.support().rows(); ++i)
    if (flat.support().row(i).head(d1) == tag.transpose()) rows.push_back(i);
  if (rows.empty()) throw std::invalid_argument("no atom carries the requested tag");

  const auto d2 = static_cast<Eigen::Index>(flat.dim()) - d1;
  Eigen::MatrixXd support(static_cast<Eigen::Index>(rows.size()), d2);
  Eigen::VectorXd weights(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    support.row(static_cast<Eigen::Index>(k)) = flat.support().row(rows[k]).tail(d2);
    weights(static_cast<Eigen::Index>(k)) = flat.weights()(rows[k]);
  }
  weights /= weights.sum();
  return DiscreteMeasure(std::move(support), std::move(weights));
}

namespace {

std::vector<double> cumulative(const double* w, std::size_t n) {
  std::vector<double> cdf(n);
  std::partial_sum(w, w + n, cdf.begin());
  return cdf;
}

std::size_t draw(const std::vector<double>& cdf, double u) {
  const double target = u * cdf.back();
  auto it = std::upper_bound(cdf.begin(), cdf.end(), target);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

}  // namespace

Eigen::MatrixXd sample_tokens(const MixtureContext& ctx, std::size_t n_tokens, std::uint64_t seed) {
  if (n_tokens == 0) throw std::invalid_argument("n_tokens must be positive");
  const auto d1 = static_cast<Eigen::Index>(ctx.tag_dim());
  const auto d2 = static_cast<Eigen::Index>(ctx.content_dim());

  const auto mix_cdf = cumulative(ctx.mix_weights.data(), ctx.mix_weights.size());
  std::vector<std::vector<double>> comp_cdf;
  comp_cdf.reserve(ctx.components.size());
  for (const auto& c : ctx.components) comp_cdf.push_back(cumulative(c.weights().data(), c.size()));

  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::MatrixXd tokens(static_cast<Eigen::Index>(n_tokens), d1 + d2);
  for (Eigen::Index r = 0; r < tokens.rows(); ++r) {
    const std::size_t i = draw(mix_cdf, unif(rng));
    const std::size_t atom = draw(comp_cdf[i], unif(rng));
    tokens.row(r).head(d1) = ctx.tags[i].transpose();
    tokens.row(r).tail(d2) = ctx.components[i].support().row(static_cast<Eigen::Index>(atom));
  }
  return tokens;
}

double wasserstein1_1d(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
  if (mu.dim() != nu.dim()) throw std::invalid_argument("measures live in different dimensions");
  const Eigen::RowVectorXd ref = mu.support().row(0);
  int axis = -1;
  for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(mu.dim()); ++k) {
    const bool varies = (mu.support().col(k).array() != ref(k)).any() ||
                        (nu.support().col(k).array() != ref(k)).any();
    if (!varies) continue;
    if (axis >= 0) throw std::invalid_argument("wasserstein1_1d: atoms vary in more than one coordinate");
    axis = static_cast<int>(k);
  }
  if (axis < 0) return std::abs(mu.total_mass() - nu.total_mass()) > kMassTol ? INFINITY : 0.0;

  // Merge both supports; integrate |F_mu - F_nu| between consecutive breakpoints.
  struct Event {
    double x;
    double dmass;
  };
  std::vector<Event> events;
  events.reserve(mu.size() + nu.size());
  for (std::size_t i = 0; i < mu.size(); ++i)
    events.push_back({mu.support()(static_cast<Eigen::Index>(i), axis), mu.weights()(static_cast<Eigen::Index>(i))});
  for (std::size_t i = 0; i < nu.size(); ++i)
    events.push_back({nu.support()(static_cast<Eigen::Index>(i), axis), -nu.weights()(static_cast<Eigen::Index>(i))});
  std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.x < b.x; });

  double diff = 0.0;
  double dist = 0.0;
  for (std::size_t k = 0; k + 1 < events.size(); ++k) {
    diff += events[k].dmass;
    dist += std::abs(diff) * (events[k + 1].x - events[k].x);
  }
  return dist;
}

void to_json(nlohmann::json& j, const DiscreteMeasure& mu) {
  nlohmann::json support = nlohmann::json::array();
  for (Eigen::Index i = 0; i < mu.support().rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index k = 0; k < mu.support().cols(); ++k) row.push_back(mu.support()(i, k));
    support.push_back(std::move(row));
  }
  j = nlohmann::json{{"support", std::move(support)},
                     {"weights", std::vector<double>(mu.weights().data(), mu.weights().data() + mu.weights().size())}};
}

void from_json(const nlohmann::json& j, DiscreteMeasure& mu) {
  const auto& support = j.at("support");
  const auto weights = j.at("weights").get<std::vector<double>>();
  if (support.empty()) throw std::invalid_argument("measure JSON has empty support");
  const auto dim = support.front().size();
  Eigen::MatrixXd s(static_cast<Eigen::Index>(support.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < support.size(); ++i) {
    if (support[i].size() != dim) throw std::invalid_argument("ragged support in measure JSON");
    for (std::size_t k = 0; k < dim; ++k)
      s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = support[i][k].get<double>();
  }
  mu = DiscreteMeasure(std::move(s), Eigen::Map<const Eigen::VectorXd>(weights.data(),
                                                                       static_cast<Eigen::Index>(weights.size())));
}

}  // namespace mattn
