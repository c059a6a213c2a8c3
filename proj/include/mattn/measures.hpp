#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "json.hpp"

namespace mattn {

using Point = Eigen::VectorXd;

/// Weighted finite support in R^d. Row i of `support()` is the i-th atom.
class DiscreteMeasure {
 public:
  DiscreteMeasure() = default;
  /// Probability measure: weights must be nonnegative and sum to 1 within 1e-9.
  DiscreteMeasure(Eigen::MatrixXd support, Eigen::VectorXd weights);

  static DiscreteMeasure unnormalized(Eigen::MatrixXd support, Eigen::VectorXd weights);
  static DiscreteMeasure dirac(const Point& at);
  static DiscreteMeasure uniform(Eigen::MatrixXd support);

  const Eigen::MatrixXd& support() const { return support_; }
  const Eigen::VectorXd& weights() const { return weights_; }
  bool normalized() const { return normalized_; }
  std::size_t size() const { return static_cast<std::size_t>(support_.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(support_.cols()); }
  double total_mass() const { return weights_.sum(); }
  Point mean() const;

 private:
  DiscreteMeasure(Eigen::MatrixXd support, Eigen::VectorXd weights, bool normalized);

  Eigen::MatrixXd support_;
  Eigen::VectorXd weights_;
  bool normalized_ = true;
};

/// f_# mu on a discrete support: every atom is mapped, weights kept, images
/// are not merged.
template <class Map>
DiscreteMeasure pushforward(const DiscreteMeasure& mu, Map&& f) {
  if (mu.size() == 0) return mu;
  Point first = f(Point(mu.support().row(0).transpose()));
  Eigen::MatrixXd out(mu.size(), first.size());
  out.row(0) = first.transpose();
  for (Eigen::Index i = 1; i < mu.support().rows(); ++i) {
    Point img = f(Point(mu.support().row(i).transpose()));
    if (img.size() != first.size()) throw std::invalid_argument("pushforward map changed output dimension");
    out.row(i) = img.transpose();
  }
  return mu.normalized() ? DiscreteMeasure(std::move(out), mu.weights())
                         : DiscreteMeasure::unnormalized(std::move(out), mu.weights());
}

/// delta_v ⊗ mu0: each atom z becomes (v, z).
DiscreteMeasure product_embed(const DiscreteMeasure& mu0, const Point& tag);

/// I content measures over R^{d2}, each labelled by a tag in R^{d1}.
/// Tokens are laid out tag-first: (tag ‖ content).
struct MixtureContext {
  std::vector<DiscreteMeasure> components;
  std::vector<Point> tags;
  std::vector<double> mix_weights;
  std::size_t star_index = 0;

  std::size_t tag_dim() const { return static_cast<std::size_t>(tags.front().size()); }
  std::size_t content_dim() const { return components.front().dim(); }
};

struct MixtureWithQuery {
  MixtureContext context;
  Point query;  // (tags[star] ‖ 0_{d2})
};

/// Uniform mixing weights 1/I. Throws std::invalid_argument when two tags have
/// inner product above 1e-12 or the components disagree in dimension.
MixtureWithQuery build_mixture(std::vector<DiscreteMeasure> components, std::vector<Point> tags,
                               std::size_t star_index);

/// Same as build_mixture with caller-supplied mixing weights.
MixtureWithQuery build_mixture(std::vector<DiscreteMeasure> components, std::vector<Point> tags,
                               std::vector<double> mix_weights, std::size_t star_index);

/// sum_i w_i delta_{tag_i} ⊗ mu_i as a single measure over R^{d1+d2}.
DiscreteMeasure flatten(const MixtureContext& ctx);

/// Restriction of a flattened mixture to atoms whose first d1 coordinates equal
/// `tag`, renormalized, with the tag coordinates dropped.
DiscreteMeasure condition_on_tag(const DiscreteMeasure& flat, const Point& tag);

/// i.i.d. tokens (tag ‖ content) from the mixture, one per row. Deterministic in seed.
Eigen::MatrixXd sample_tokens(const MixtureContext& ctx, std::size_t n_tokens, std::uint64_t seed);

/// W1 between measures on a common line. Both supports may live in R^d as long
/// as at most one coordinate varies across all atoms of both measures.
double wasserstein1_1d(const DiscreteMeasure& mu, const DiscreteMeasure& nu);

void to_json(nlohmann::json& j, const DiscreteMeasure& mu);
void from_json(const nlohmann::json& j, DiscreteMeasure& mu);

}  // namespace mattn
