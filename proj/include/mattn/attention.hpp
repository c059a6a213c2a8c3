#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "json.hpp"
#include "mattn/measures.hpp"

namespace mattn {

struct AttnHead {
  Eigen::MatrixXd W, Q, K, V;
};

/// Parameters of Attn(nu, x) = A x + sum_h W^h ∫ softmax(<Q^h x, K^h y>) V^h y dnu(y).
/// All matrices are d_attn x d_attn.
struct AttnParams {
  std::vector<AttnHead> heads;
  Eigen::MatrixXd skip;  // A

  std::size_t dim() const { return static_cast<std::size_t>(skip.rows()); }
  /// Throws std::invalid_argument unless every matrix is square with the shared dimension.
  void validate() const;
  static AttnParams zeros(std::size_t dim, std::size_t n_heads);
};

/// Entry magnitude (‖·‖_∞ over entries) and nonzero counts of the head
/// matrices W, Q, K, V (B_a, S_a) and of the skip A (B'_a, S'_a).
struct ClassBounds {
  double head_max_abs = 0.0;
  std::size_t head_max_nonzeros = 0;  // densest single head matrix
  double skip_max_abs = 0.0;
  std::size_t skip_nonzeros = 0;

  /// Smallest B_a and S_a with params in A(d_attn, H, B_a, S_a), where the
  /// skip shares the head bounds.
  double B_a() const { return std::max(head_max_abs, skip_max_abs); }
  std::size_t S_a() const { return std::max(head_max_nonzeros, skip_nonzeros); }
};

ClassBounds class_bounds(const AttnParams& params);
/// Membership in A(d_attn, H, B_a, S_a) (skip bounded by the same constants).
bool in_class(const AttnParams& params, double B_a, std::size_t S_a);

/// Density of the softmax-tilted measure with respect to counting measure on
/// the support: w_t = p_t exp(s_t) / sum_u p_u exp(s_u), s_t = <Q x, K y_t>.
Eigen::VectorXd softmax_weights(const AttnHead& head, const DiscreteMeasure& mu, const Point& x);

/// Exact evaluation of the attention operator against a discrete measure.
Point measure_attention(const AttnParams& params, const DiscreteMeasure& mu, const Point& x);

/// Recall construction for tokens laid out as (tag[d1] ‖ content[d2] ‖ features[D]):
/// head h has Q = K = c·diag(1_{d1}, 0), W = V = e_{d1+d2+h} e_{d1+d2+h}^T, and
/// the skip copies the first d1 + d2 coordinates.
AttnParams build_recall_params(std::size_t d1, std::size_t d2, std::size_t D, double temperature_c);

/// c = sqrt(ln(I^3 / eps2)), the temperature that makes the recall head's
/// off-component leakage O(eps2 / I).
double recall_temperature(std::size_t n_components, double eps2);

/// A map (measure, point) -> point with fixed input/output dimensions.
class MeasureMap {
 public:
  using Fn = std::function<Point(const DiscreteMeasure&, const Point&)>;

  MeasureMap(Fn fn, std::size_t in_dim, std::size_t out_dim);

  Point operator()(const DiscreteMeasure& nu, const Point& x) const;
  std::size_t in_dim() const { return in_dim_; }
  std::size_t out_dim() const { return out_dim_; }

  static MeasureMap pointwise(std::function<Point(const Point&)> f, std::size_t in_dim, std::size_t out_dim);
  static MeasureMap attention(AttnParams params);

 private:
  Fn fn_;
  std::size_t in_dim_;
  std::size_t out_dim_;
};

/// (g2 ⋄ g1)(nu, x) = g2((g1(nu, ·))_# nu, g1(nu, x)).
MeasureMap compose(const MeasureMap& g2, const MeasureMap& g1);

// ---------------------------------------------------------------------------
// Lipschitz probe

struct LipschitzTrial {
  AttnParams params;
  DiscreteMeasure mu1, mu2;
  Point x1, x2;
};

/// B_a, S_a (skip included) for the parameters; B_x bounds ‖x‖_∞ and B_y bounds ‖y‖_∞ on the supports.
struct LipschitzConstants {
  double B_a = 0.0;
  std::size_t S_a = 0;
  double B_x = 0.0;
  double B_y = 0.0;
};

/// Tightest constants the trial satisfies.
LipschitzConstants declared_constants(const LipschitzTrial& trial);

/// Explicit-constant Lipschitz bound of the attention operator in (mu, x):
/// max(L_measure, L_query) with
///   k         = S_a^2 B_a^2 B_x B_y
///   L_measure = H S_a^4 B_a^4 B_x B_y e^{4k} + H (1 + k) S_a^2 B_a^2 e^{2k}
///   L_query   = max(S_a B_a, H S_a^4 B_a^4 B_x B_y e^{4k}).
double lipschitz_bound(std::size_t n_heads, const LipschitzConstants& k);

struct LipschitzReport {
  std::size_t trials = 0;
  std::size_t skipped = 0;     // identical inputs
  std::size_t flagged = 0;     // ratio > bound
  std::size_t violations = 0;  // ratio > slack * bound
  double max_ratio = 0.0;
  double max_ratio_over_bound = 0.0;
};

/// ratio = ‖Attn(mu1,x1) - Attn(mu2,x2)‖_∞ / (W1(mu1,mu2) + ‖x1 - x2‖_2) per trial,
/// compared to lipschitz_bound at the trial's declared constants.
LipschitzReport lipschitz_probe(std::span<const LipschitzTrial> trials, double slack = 2.0);

/// Random small instance: N <= 8 atoms, d_attn <= 4, entries in [-1, 1],
/// both measures varying along one shared coordinate.
LipschitzTrial random_lipschitz_trial(std::uint64_t seed);

void to_json(nlohmann::json& j, const AttnParams& p);
void from_json(const nlohmann::json& j, AttnParams& p);

}  // namespace mattn
