#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mattn {

/// Mercer eigen-spectrum lambda_j = exp(-c * j^alpha) paired with the sine
/// basis e_0 = 1, e_j(x) = sqrt(2) sin(pi j x) on [0, 1].
///
/// Mode 0 is the constant function with lambda_0 = 1. It never carries
/// signal: norms, isometries and truncation only look at modes j >= 1.
class MercerSpectrum {
 public:
  /// Uses the midpoint grid x_t = (t - 1/2) / T.
  MercerSpectrum(double alpha, double c, std::size_t modes, std::size_t grid_size);
  MercerSpectrum(double alpha, double c, std::size_t modes, std::vector<double> grid);

  double alpha() const { return alpha_; }
  double scale() const { return c_; }
  std::size_t modes() const { return modes_; }
  std::size_t grid_size() const { return grid_.size(); }
  const std::vector<double>& grid() const { return grid_; }

 private:
  double alpha_;
  double c_;
  std::size_t modes_;
  std::vector<double> grid_;
};

/// Coefficients of f = sum_j coeffs[j] e_j, one per retained mode.
struct DensityCoeffs {
  std::vector<double> coeffs;
};

std::vector<double> midpoint_grid(std::size_t size);

/// Throws std::out_of_range for j >= modes.
double eigenvalue(const MercerSpectrum& spec, std::size_t j);

/// Throws std::out_of_range for j >= modes, std::domain_error for x outside [0, 1].
double basis_eval(const MercerSpectrum& spec, std::size_t j, double x);

/// Clamp-and-normalize density synthesis on the grid:
///   raw(x_t) = sum_j lambda_j z_j e_j(x_t),  p(t) ∝ max(raw(x_t), clamp_eps).
/// Returns a pmf over grid indices. z[0] must be zero.
std::vector<double> synth_density(const MercerSpectrum& spec, std::span<const double> z,
                                  double clamp_eps = 1e-6);

/// sum_{j>=1} lambda_j^{-a} b_j^2
double gen_norm_sq(const MercerSpectrum& spec, const DensityCoeffs& b, double a);

/// Exponents (a, b, c) of the coefficient map phi_{a,b,c}: b_j -> lambda_j^{(c-b)/2} b_j.
/// It maps the H^a unit ball isometrically from the H^b metric onto the
/// H^{a-b+c} unit ball under the H^c metric.
struct IsometryExponents {
  double ball;    // a
  double source;  // b
  double target;  // c

  double image_ball() const { return ball - source + target; }
};

DensityCoeffs isometry_map(const MercerSpectrum& spec, const DensityCoeffs& b,
                           const IsometryExponents& exps);

/// lambda_{D+1}^{(-gamma_f + gamma_b)/2}: bound on the gamma_f-norm of the tail
/// beyond mode D for any element of the gamma_b unit ball.
/// Requires gamma_f < 0 < gamma_b and D + 1 < modes.
double truncation_bound(const MercerSpectrum& spec, std::size_t D, double gamma_f, double gamma_b);

/// sqrt(sum_{j>D} lambda_j^{-gamma_f} b_j^2), the quantity truncation_bound dominates.
double tail_norm(const MercerSpectrum& spec, const DensityCoeffs& b, std::size_t D, double gamma_f);

}  // namespace mattn
