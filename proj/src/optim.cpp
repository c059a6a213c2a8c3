#include "mattn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "mattn/rng.hpp"

namespace mattn {

AdamState AdamState::for_size(std::size_t n, double lr0, double decay) {
  AdamState s;
  s.m.assign(n, 0.0);
  s.v.assign(n, 0.0);
  s.lr0 = lr0;
  s.decay = decay;
  return s;
}

double AdamState::learning_rate(std::size_t epoch) const {
  return lr0 * std::pow(decay, static_cast<double>(epoch));
}

void adam_step(AdamState& s, std::span<double> params, std::span<const double> grads, std::size_t epoch) {
  if (params.size() != grads.size() || s.m.size() != params.size() || s.v.size() != params.size())
    throw std::invalid_argument("adam_step: size mismatch");
  if (!std::all_of(grads.begin(), grads.end(), [](double g) { return std::isfinite(g); }))
    throw std::domain_error("adam_step: non-finite gradient, step rejected");

  ++s.t;
  const double lr = s.learning_rate(epoch);
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i] * grads[i];
    const double m_hat = s.m[i] / c1;
    const double v_hat = s.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + s.eps);
  }
}

std::size_t TrainConfig::effective_batch(std::size_t n) const {
  const std::size_t b = batch_size == 0 ? std::size_t{32} : batch_size;
  return std::max<std::size_t>(1, std::min(b, n));
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},   {"batch_size", c.batch_size}, {"lr0", c.lr0},
                     {"decay_per_epoch", c.decay_per_epoch}, {"noise_std", c.noise_std}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr0 = j.value("lr0", d.lr0);
  c.decay_per_epoch = j.value("decay_per_epoch", d.decay_per_epoch);
  c.noise_std = j.value("noise_std", d.noise_std);
  c.seed = j.value("seed", d.seed);
  if (c.noise_std < 0.0) throw std::invalid_argument("noise_std must be nonnegative");
}

LossTrace train(StudentModel& model, std::span<const Example> data, const TrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  const std::size_t n = data.size();
  const std::size_t batch = cfg.effective_batch(n);
  AdamState state = AdamState::for_size(model.params().size(), cfg.lr0, cfg.decay_per_epoch);

  Rng rng = make_rng(derive_seed(cfg.seed, {0x7472616EULL}));
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> accum(model.params().size());

  LossTrace trace;
  trace.reserve(cfg.epochs);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t stop = std::min(n, start + batch);
      const double inv = 1.0 / static_cast<double>(stop - start);
      std::fill(accum.begin(), accum.end(), 0.0);
      for (std::size_t k = start; k < stop; ++k) {
        const Example& ex = data[order[k]];
        const double y = ex.target + cfg.noise_std * noise(rng);
        auto fwd = model.forward(ex.context, ex.query);
        const double resid = fwd.prediction - y;
        epoch_loss += resid * resid;
        model.backward(fwd.cache, 2.0 * resid * inv);
        const auto g = model.grads();
        for (std::size_t i = 0; i < accum.size(); ++i) accum[i] += g[i];
      }
      adam_step(state, model.mutable_params(), accum, epoch);
    }
    trace.push_back(epoch_loss / static_cast<double>(n));
  }
  return trace;
}

double evaluate(StudentModel& model, std::span<const Example> data) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  double acc = 0.0;
  for (const auto& ex : data) {
    const double r = model.predict(ex.context, ex.query) - ex.target;
    acc += r * r;
  }
  return acc / static_cast<double>(data.size());
}

std::string loss_trace_csv(const LossTrace& trace) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,train_loss\n";
  for (std::size_t e = 0; e < trace.size(); ++e) os << e << ',' << trace[e] << '\n';
  return os.str();
}

}  // namespace mattn
