#include "mattn/spectrum.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace mattn {

namespace {

void check_mode(const MercerSpectrum& spec, std::size_t j) {
  if (j >= spec.modes())
    throw std::out_of_range("mode index " + std::to_string(j) + " >= retained modes " +
                            std::to_string(spec.modes()));
}

void check_length(const MercerSpectrum& spec, std::size_t n) {
  if (n != spec.modes())
    throw std::invalid_argument("coefficient vector has length " + std::to_string(n) +
                                ", expected " + std::to_string(spec.modes()));
}

}  // namespace

std::vector<double> midpoint_grid(std::size_t size) {
  std::vector<double> grid(size);
  for (std::size_t t = 0; t < size; ++t) grid[t] = (static_cast<double>(t) + 0.5) / static_cast<double>(size);
  return grid;
}

MercerSpectrum::MercerSpectrum(double alpha, double c, std::size_t modes, std::size_t grid_size)
    : MercerSpectrum(alpha, c, modes, midpoint_grid(grid_size)) {}

MercerSpectrum::MercerSpectrum(double alpha, double c, std::size_t modes, std::vector<double> grid)
    : alpha_(alpha), c_(c), modes_(modes), grid_(std::move(grid)) {
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
  if (!(c > 0.0)) throw std::invalid_argument("decay scale must be positive");
  if (modes == 0) throw std::invalid_argument("need at least one mode");
  if (grid_.size() < modes) throw std::invalid_argument("grid must have at least as many points as modes");
  for (std::size_t t = 0; t < grid_.size(); ++t) {
    if (grid_[t] < 0.0 || grid_[t] > 1.0) throw std::invalid_argument("grid point outside [0,1]");
    if (t > 0 && !(grid_[t] > grid_[t - 1])) throw std::invalid_argument("grid must be strictly increasing");
  }
}

double eigenvalue(const MercerSpectrum& spec, std::size_t j) {
  check_mode(spec, j);
  if (j == 0) return 1.0;
  return std::exp(-spec.scale() * std::pow(static_cast<double>(j), spec.alpha()));
}

double basis_eval(const MercerSpectrum& spec, std::size_t j, double x) {
  check_mode(spec, j);
  if (!(x >= 0.0 && x <= 1.0)) throw std::domain_error("basis argument outside [0,1]");
  if (j == 0) return 1.0;
  return std::numbers::sqrt2 * std::sin(std::numbers::pi * static_cast<double>(j) * x);
}

std::vector<double> synth_density(const MercerSpectrum& spec, std::span<const double> z, double clamp_eps) {
  check_length(spec, z.size());
  if (z[0] != 0.0) throw std::invalid_argument("constant-mode coefficient z[0] must be zero");
  if (!(clamp_eps > 0.0)) throw std::invalid_argument("clamp_eps must be positive");

  std::vector<double> weight(spec.modes());
  for (std::size_t j = 1; j < spec.modes(); ++j) weight[j] = eigenvalue(spec, j) * z[j];

  std::vector<double> pmf(spec.grid_size());
  double total = 0.0;
  for (std::size_t t = 0; t < pmf.size(); ++t) {
    const double x = spec.grid()[t];
    double raw = 0.0;
    for (std::size_t j = 1; j < spec.modes(); ++j) raw += weight[j] * basis_eval(spec, j, x);
    pmf[t] = std::max(raw, clamp_eps);
    total += pmf[t];
  }
  for (double& p : pmf) p /= total;
  return pmf;
}

double gen_norm_sq(const MercerSpectrum& spec, const DensityCoeffs& b, double a) {
  check_length(spec, b.coeffs.size());
  double acc = 0.0;
  for (std::size_t j = 1; j < spec.modes(); ++j) {
    const double bj = b.coeffs[j];
    if (bj != 0.0) acc += std::pow(eigenvalue(spec, j), -a) * bj * bj;
  }
  return acc;
}

DensityCoeffs isometry_map(const MercerSpectrum& spec, const DensityCoeffs& b, const IsometryExponents& exps) {
  check_length(spec, b.coeffs.size());
  DensityCoeffs out{b.coeffs};
  const double power = 0.5 * (exps.target - exps.source);
  for (std::size_t j = 1; j < spec.modes(); ++j) out.coeffs[j] *= std::pow(eigenvalue(spec, j), power);
  return out;
}

double truncation_bound(const MercerSpectrum& spec, std::size_t D, double gamma_f, double gamma_b) {
  if (!(gamma_f < 0.0)) throw std::invalid_argument("gamma_f must be negative");
  if (!(gamma_b > 0.0)) throw std::invalid_argument("gamma_b must be positive");
  if (D == 0) throw std::invalid_argument("truncation dimension must be positive");
  return std::pow(eigenvalue(spec, D + 1), 0.5 * (gamma_b - gamma_f));
}

double tail_norm(const MercerSpectrum& spec, const DensityCoeffs& b, std::size_t D, double gamma_f) {
  check_length(spec, b.coeffs.size());
  double acc = 0.0;
  for (std::size_t j = D + 1; j < spec.modes(); ++j)
    acc += std::pow(eigenvalue(spec, j), -gamma_f) * b.coeffs[j] * b.coeffs[j];
  return std::sqrt(acc);
}

}  // namespace mattn
