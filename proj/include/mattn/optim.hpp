#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mattn/example.hpp"
#include "mattn/model.hpp"

namespace mattn {

struct AdamState {
  std::vector<double> m, v;
  std::uint64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr0 = 1e-2;
  double decay = 0.9;  // per-epoch multiplicative learning-rate decay

  static AdamState for_size(std::size_t n, double lr0, double decay);
  double learning_rate(std::size_t epoch) const;
};

/// One bias-corrected Adam update at learning rate lr0 * decay^epoch.
/// Throws std::domain_error (leaving params and state untouched) if any
/// gradient is non-finite.
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads, std::size_t epoch);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 0;  // 0 means min(32, n)
  double lr0 = 1e-2;
  double decay_per_epoch = 0.9;
  double noise_std = 0.01;
  std::uint64_t seed = 0;

  std::size_t effective_batch(std::size_t n) const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

/// Per-epoch mean squared loss against the noisy targets the optimizer saw.
using LossTrace = std::vector<double>;

/// Seeded per-epoch shuffling, fresh N(0, noise_std^2) target noise on every
/// presentation, squared loss, Adam on minibatch-mean gradients.
LossTrace train(StudentModel& model, std::span<const Example> data, const TrainConfig& cfg);

/// Mean squared error against clean targets.
double evaluate(StudentModel& model, std::span<const Example> data);

std::string loss_trace_csv(const LossTrace& trace);

}  // namespace mattn
