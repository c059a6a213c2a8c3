#include "mattn/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "mattn/measures.hpp"
#include "mattn/rng.hpp"

namespace mattn {

namespace fs = std::filesystem;

namespace {

enum Stream : std::uint64_t { kValidation = 1, kTraining = 2, kInit = 3, kOptimizer = 4, kShuffle = 5 };

std::uint64_t alpha_bits(double alpha) { return std::bit_cast<std::uint64_t>(alpha); }

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

MeanStd population_stats(const std::vector<double>& xs) {
  if (xs.empty()) return {};
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size()))};
}

}  // namespace

std::string format_double(double x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  if (ec != std::errc()) throw std::runtime_error("format_double failed");
  return std::string(buf, end);
}

// ---------------------------------------------------------------------------

ExperimentConfig ExperimentConfig::reduced() {
  ExperimentConfig c;
  c.n_tokens = 1000;
  c.n_val = 500;
  c.n_stats = 500;
  return c;
}

void ExperimentConfig::validate() const {
  if (alpha_list.empty()) throw std::invalid_argument("alpha_list is empty");
  for (double a : alpha_list)
    if (!(a > 0.0)) throw std::invalid_argument("alpha values must be positive");
  if (n_list.empty()) throw std::invalid_argument("n_list is empty");
  for (std::size_t i = 0; i < n_list.size(); ++i) {
    if (n_list[i] == 0) throw std::invalid_argument("n_list entries must be positive");
    if (i > 0 && n_list[i] <= n_list[i - 1]) throw std::invalid_argument("n_list must be strictly increasing");
  }
  if (2 * modes > grid) throw std::invalid_argument("need modes <= grid / 2");
  if (n_tokens == 0 || n_val == 0 || seeds == 0) throw std::invalid_argument("n_tokens, n_val and seeds must be positive");
  if (!(clamp_eps > 0.0)) throw std::invalid_argument("clamp_eps must be positive");
  student.validate();
  if (student.input_dim != 2) throw std::invalid_argument("the synthetic task feeds (x, v) tokens: input_dim must be 2");
}

MercerSpectrum ExperimentConfig::spectrum(double alpha) const { return MercerSpectrum(alpha, decay_scale, modes, grid); }

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"alpha_list", c.alpha_list}, {"decay_scale", c.decay_scale}, {"modes", c.modes},
                     {"grid", c.grid},             {"n_tokens", c.n_tokens},       {"n_list", c.n_list},
                     {"n_val", c.n_val},           {"n_stats", c.n_stats},         {"clamp_eps", c.clamp_eps},
                     {"seeds", c.seeds},           {"global_seed", c.global_seed}, {"student", c.student},
                     {"train", c.train}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c.alpha_list = j.value("alpha_list", c.alpha_list);
  c.decay_scale = j.value("decay_scale", c.decay_scale);
  c.modes = j.value("modes", c.modes);
  c.grid = j.value("grid", c.grid);
  c.n_tokens = j.value("n_tokens", c.n_tokens);
  c.n_list = j.value("n_list", c.n_list);
  c.n_val = j.value("n_val", c.n_val);
  c.n_stats = j.value("n_stats", c.n_stats);
  c.clamp_eps = j.value("clamp_eps", c.clamp_eps);
  c.seeds = j.value("seeds", c.seeds);
  c.global_seed = j.value("global_seed", c.global_seed);
  if (j.contains("student")) c.student = j.at("student").get<StudentConfig>();
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
}

// ---------------------------------------------------------------------------

double target_functional(const MercerSpectrum& spec, std::span<const double> z1, double tag) {
  double acc = 0.0;
  for (std::size_t j = 1; j < spec.modes(); ++j) acc += eigenvalue(spec, j) * z1[j] * z1[j];
  return tag * acc;
}

Example example_from_latents(const MercerSpectrum& spec, const ExperimentConfig& cfg, HiddenState hidden,
                             std::uint64_t token_seed) {
  const auto T = static_cast<Eigen::Index>(spec.grid_size());
  const Eigen::MatrixXd grid = Eigen::Map<const Eigen::VectorXd>(spec.grid().data(), T);

  auto component = [&](const std::vector<double>& z) {
    const auto pmf = synth_density(spec, z, cfg.clamp_eps);
    return DiscreteMeasure(grid, Eigen::Map<const Eigen::VectorXd>(pmf.data(), T));
  };
  const auto mix = build_mixture({component(hidden.z1), component(hidden.z2)},
                                 {Point::Constant(1, hidden.tag), Point::Constant(1, -hidden.tag)}, 0);
  const Eigen::MatrixXd tokens = sample_tokens(mix.context, cfg.n_tokens, token_seed);

  Example ex;
  // Mixture tokens are (v, x); the student reads (x, v).
  ex.context.resize(tokens.rows(), 2);
  ex.context.col(0) = tokens.col(1);
  ex.context.col(1) = tokens.col(0);
  ex.query = Eigen::Vector2d(0.0, hidden.tag);
  ex.target = target_functional(spec, hidden.z1, hidden.tag);
  ex.hidden = std::move(hidden);
  return ex;
}

Example gen_example(const MercerSpectrum& spec, const ExperimentConfig& cfg, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> normal(0.0, 1.0);

  HiddenState h;
  h.tag = coin(rng) ? 1.0 : -1.0;
  h.z1.assign(spec.modes(), 0.0);
  h.z2.assign(spec.modes(), 0.0);
  for (std::size_t j = 1; j < spec.modes(); ++j) h.z1[j] = normal(rng);
  for (std::size_t j = 1; j < spec.modes(); ++j) h.z2[j] = normal(rng);
  return example_from_latents(spec, cfg, std::move(h), derive_seed(seed, {0x746F6BULL}));
}

std::vector<Example> gen_dataset(const MercerSpectrum& spec, const ExperimentConfig& cfg, std::size_t count,
                                 std::uint64_t stream_seed) {
  std::vector<Example> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_example(spec, cfg, derive_seed(stream_seed, {i})));
  return out;
}

// ---------------------------------------------------------------------------

std::vector<HeadStats> mass_stats(std::span<const AttentionSnapshot> snaps) {
  if (snaps.empty()) throw std::invalid_argument("attention stats need at least one example");
  const auto H = snaps.front().rows.rows();
  std::vector<HeadStats> out(static_cast<std::size_t>(H));
  for (Eigen::Index h = 0; h < H; ++h) {
    std::vector<double> w_same, w_diff, m_same, m_diff;
    for (const auto& s : snaps) {
      if (s.rows.rows() != H || s.rows.cols() != s.token_tags.size())
        throw std::invalid_argument("attention snapshot shape mismatch");
      double same = 0.0, diff = 0.0;
      std::size_t n_same = 0, n_diff = 0;
      for (Eigen::Index t = 0; t < s.token_tags.size(); ++t) {
        if (s.token_tags(t) == s.query_tag) {
          same += s.rows(h, t);
          ++n_same;
        } else {
          diff += s.rows(h, t);
          ++n_diff;
        }
      }
      if (n_same > 0) {
        w_same.push_back(same / static_cast<double>(n_same));
        m_same.push_back(same);
      }
      if (n_diff > 0) {
        w_diff.push_back(diff / static_cast<double>(n_diff));
        m_diff.push_back(diff);
      }
    }
    HeadStats& hs = out[static_cast<std::size_t>(h)];
    const auto ws = population_stats(w_same), wd = population_stats(w_diff);
    const auto ms = population_stats(m_same), md = population_stats(m_diff);
    hs.w_same_mean = ws.mean;
    hs.w_same_std = ws.std;
    hs.w_diff_mean = wd.mean;
    hs.w_diff_std = wd.std;
    hs.m_same_mean = ms.mean;
    hs.m_same_std = ms.std;
    hs.m_diff_mean = md.mean;
    hs.m_diff_std = md.std;
    hs.same_count = m_same.size();
    hs.diff_count = m_diff.size();
  }
  return out;
}

std::vector<HeadStats> attention_mass_stats(StudentModel& model, std::span<const Example> examples) {
  std::vector<AttentionSnapshot> snaps;
  snaps.reserve(examples.size());
  for (const auto& ex : examples) {
    auto fwd = model.forward(ex.context, ex.query);
    snaps.push_back(AttentionSnapshot{attention_rows(fwd.cache), ex.context.col(1), ex.query(1)});
  }
  return mass_stats(snaps);
}

ShuffleResult query_shuffle_eval(StudentModel& model, std::span<const Example> examples,
                                 std::span<const std::size_t> perm) {
  if (examples.size() < 2) throw std::invalid_argument("query shuffle needs at least two examples");
  if (perm.size() != examples.size()) throw std::invalid_argument("permutation length mismatch");
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t k : perm) {
    if (k >= perm.size() || seen[k]) throw std::invalid_argument("query shuffle index list is not a permutation");
    seen[k] = true;
  }
  ShuffleResult r;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    const double a = model.predict(ex.context, ex.query) - ex.target;
    const double b = model.predict(ex.context, examples[perm[i]].query) - ex.target;
    r.mse_original += a * a;
    r.mse_shuffled += b * b;
  }
  r.mse_original /= static_cast<double>(examples.size());
  r.mse_shuffled /= static_cast<double>(examples.size());
  return r;
}

ShuffleResult query_shuffle_eval(StudentModel& model, std::span<const Example> examples, std::uint64_t seed) {
  std::vector<std::size_t> perm(examples.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng = make_rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  return query_shuffle_eval(model, examples, perm);
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const CellResult& c) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : c.heads)
    heads.push_back({{"w_same_mean", h.w_same_mean}, {"w_diff_mean", h.w_diff_mean},
                     {"w_same_std", h.w_same_std},   {"w_diff_std", h.w_diff_std},
                     {"m_same_mean", h.m_same_mean}, {"m_diff_mean", h.m_diff_mean},
                     {"m_same_std", h.m_same_std},   {"m_diff_std", h.m_diff_std},
                     {"same_count", h.same_count},   {"diff_count", h.diff_count}});
  j = nlohmann::json{{"alpha", c.alpha},
                     {"n", c.n},
                     {"seed", c.seed},
                     {"key", c.key},
                     {"ok", c.ok},
                     {"error", c.error},
                     {"val_mse", c.val_mse},
                     {"mse_original", c.shuffle.mse_original},
                     {"mse_shuffled", c.shuffle.mse_shuffled},
                     {"heads", std::move(heads)},
                     {"loss_trace", c.loss_trace}};
}

void from_json(const nlohmann::json& j, CellResult& c) {
  c.alpha = j.at("alpha").get<double>();
  c.n = j.at("n").get<std::size_t>();
  c.seed = j.at("seed").get<std::size_t>();
  c.key = j.at("key").get<std::string>();
  c.ok = j.at("ok").get<bool>();
  c.error = j.value("error", std::string());
  c.val_mse = j.at("val_mse").get<double>();
  c.shuffle.mse_original = j.value("mse_original", 0.0);
  c.shuffle.mse_shuffled = j.value("mse_shuffled", 0.0);
  c.heads.clear();
  for (const auto& h : j.at("heads")) {
    HeadStats s;
    s.w_same_mean = h.at("w_same_mean");
    s.w_diff_mean = h.at("w_diff_mean");
    s.w_same_std = h.at("w_same_std");
    s.w_diff_std = h.at("w_diff_std");
    s.m_same_mean = h.at("m_same_mean");
    s.m_diff_mean = h.at("m_diff_mean");
    s.m_same_std = h.at("m_same_std");
    s.m_diff_std = h.at("m_diff_std");
    s.same_count = h.at("same_count");
    s.diff_count = h.at("diff_count");
    c.heads.push_back(s);
  }
  c.loss_trace = j.value("loss_trace", LossTrace{});
}

std::string cell_key(double alpha, std::size_t n, std::size_t seed, const ExperimentConfig& cfg) {
  nlohmann::json j = cfg;
  j.erase("alpha_list");
  j.erase("n_list");
  j.erase("seeds");
  j["cell"] = {{"alpha", alpha}, {"n", n}, {"seed", seed}};
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

CellRun run_cell(double alpha, std::size_t n, std::size_t seed, const ExperimentConfig& cfg) {
  cfg.validate();
  const MercerSpectrum spec = cfg.spectrum(alpha);
  const std::uint64_t a = alpha_bits(alpha);
  const std::uint64_t g = cfg.global_seed;

  const auto train_set = gen_dataset(spec, cfg, n, derive_seed(g, {a, n, seed, kTraining}));
  const auto val_set = gen_dataset(spec, cfg, cfg.n_val, derive_seed(g, {a, seed, kValidation}));

  StudentModel model = StudentModel::init(cfg.student, derive_seed(g, {a, n, seed, kInit}));
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(g, {a, n, seed, kOptimizer, cfg.train.seed});

  CellResult r;
  r.alpha = alpha;
  r.n = n;
  r.seed = seed;
  r.key = cell_key(alpha, n, seed, cfg);
  r.loss_trace = train(model, train_set, tc);
  r.val_mse = evaluate(model, val_set);

  const std::span<const Example> stats_set(val_set.data(), std::min(cfg.n_stats, val_set.size()));
  r.heads = attention_mass_stats(model, stats_set);
  if (stats_set.size() >= 2) r.shuffle = query_shuffle_eval(model, stats_set, derive_seed(g, {a, n, seed, kShuffle}));
  r.ok = std::isfinite(r.val_mse);
  if (!r.ok) r.error = "non-finite validation loss";
  return CellRun{std::move(r), std::move(model)};
}

// ---------------------------------------------------------------------------

double transformed_axis(std::size_t n, double alpha) {
  return std::pow(std::log(static_cast<double>(n)), alpha / (alpha + 1.0));
}

FitResult fit_rate(const RiskCurve& curve, double alpha) {
  std::vector<double> t, y;
  FitResult fit;
  for (const auto& p : curve.points) {
    if (!(p.mean > 0.0)) throw std::invalid_argument("fit_rate: risk values must be positive");
    t.push_back(transformed_axis(p.n, alpha));
    y.push_back(std::log(p.mean));
    fit.n_list.push_back(p.n);
  }
  const double k = static_cast<double>(t.size());
  const double t_bar = std::accumulate(t.begin(), t.end(), 0.0) / k;
  const double y_bar = std::accumulate(y.begin(), y.end(), 0.0) / k;
  double stt = 0.0, sty = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    stt += (t[i] - t_bar) * (t[i] - t_bar);
    sty += (t[i] - t_bar) * (y[i] - y_bar);
  }
  if (t.size() < 2 || !(stt > 0.0)) throw std::invalid_argument("fit_rate: need at least two distinct n");
  const double slope = sty / stt;
  fit.C = -slope;
  fit.A = y_bar - slope * t_bar;
  double rss = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double r = y[i] - (fit.A - fit.C * t[i]);
    rss += r * r;
  }
  fit.residual_rms = std::sqrt(rss / k);
  return fit;
}

std::vector<RiskCurve> risk_curves(std::span<const CellResult> cells) {
  std::vector<double> alphas;
  std::map<std::pair<double, std::size_t>, std::vector<double>> groups;
  for (const auto& c : cells) {
    if (!c.ok) continue;
    if (std::find(alphas.begin(), alphas.end(), c.alpha) == alphas.end()) alphas.push_back(c.alpha);
    groups[{c.alpha, c.n}].push_back(c.val_mse);
  }
  std::vector<RiskCurve> out;
  for (double a : alphas) {
    RiskCurve curve{a, {}};
    for (const auto& [key, vals] : groups) {
      if (key.first != a) continue;
      RiskPoint p;
      p.n = key.second;
      p.count = vals.size();
      p.mean = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
      double ss = 0.0;
      for (double v : vals) ss += (v - p.mean) * (v - p.mean);
      p.std = vals.size() > 1 ? std::sqrt(ss / static_cast<double>(vals.size() - 1)) : 0.0;
      curve.points.push_back(p);
    }
    out.push_back(std::move(curve));
  }
  return out;
}

// ---------------------------------------------------------------------------

void write_file_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os << contents;
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string risk_curve_csv(std::span<const CellResult> cells) {
  std::ostringstream os;
  os << "alpha,n,seed,val_mse\n";
  for (const auto& c : cells)
    if (c.ok) os << format_double(c.alpha) << ',' << c.n << ',' << c.seed << ',' << format_double(c.val_mse) << '\n';
  return os.str();
}

std::string attention_stats_csv(std::span<const CellResult> cells) {
  // Average the per-seed head statistics of each (alpha, n).
  struct Acc {
    std::vector<HeadStats> sum;
    std::size_t count = 0;
  };
  std::vector<std::pair<std::pair<double, std::size_t>, Acc>> groups;
  for (const auto& c : cells) {
    if (!c.ok || c.heads.empty()) continue;
    auto it = std::find_if(groups.begin(), groups.end(),
                           [&](const auto& g) { return g.first == std::make_pair(c.alpha, c.n); });
    if (it == groups.end()) {
      groups.push_back({{c.alpha, c.n}, Acc{std::vector<HeadStats>(c.heads.size()), 0}});
      it = std::prev(groups.end());
    }
    Acc& acc = it->second;
    for (std::size_t h = 0; h < c.heads.size() && h < acc.sum.size(); ++h) {
      acc.sum[h].w_same_mean += c.heads[h].w_same_mean;
      acc.sum[h].w_diff_mean += c.heads[h].w_diff_mean;
      acc.sum[h].w_same_std += c.heads[h].w_same_std;
      acc.sum[h].w_diff_std += c.heads[h].w_diff_std;
      acc.sum[h].m_same_mean += c.heads[h].m_same_mean;
      acc.sum[h].m_diff_mean += c.heads[h].m_diff_mean;
    }
    ++acc.count;
  }
  std::ostringstream os;
  os << "alpha,n,head,w_same_mean,w_diff_mean,w_same_std,w_diff_std,m_same_mean,m_diff_mean\n";
  for (const auto& [key, acc] : groups) {
    const double k = static_cast<double>(acc.count);
    for (std::size_t h = 0; h < acc.sum.size(); ++h) {
      const auto& s = acc.sum[h];
      os << format_double(key.first) << ',' << key.second << ',' << h << ',' << format_double(s.w_same_mean / k) << ','
         << format_double(s.w_diff_mean / k) << ',' << format_double(s.w_same_std / k) << ','
         << format_double(s.w_diff_std / k) << ',' << format_double(s.m_same_mean / k) << ','
         << format_double(s.m_diff_mean / k) << '\n';
    }
  }
  return os.str();
}

nlohmann::json fits_json(std::span<const RiskCurve> curves, std::span<const std::optional<FitResult>> fits) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const std::string key = format_double(curves[i].alpha);
    if (fits[i]) {
      j[key] = {{"alpha", curves[i].alpha},
                {"A", fits[i]->A},
                {"C", fits[i]->C},
                {"residual_rms", fits[i]->residual_rms},
                {"n_list", fits[i]->n_list}};
    } else {
      std::vector<std::size_t> ns;
      for (const auto& p : curves[i].points) ns.push_back(p.n);
      j[key] = {{"alpha", curves[i].alpha}, {"error", "fewer than two distinct n"}, {"n_list", ns}};
    }
  }
  return j;
}

std::string scaling_axis_dat(std::span<const RiskCurve> curves, std::span<const std::optional<FitResult>> fits) {
  std::ostringstream os;
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const double a = curves[i].alpha;
    if (i > 0) os << "\n\n";
    os << "# alpha = " << format_double(a) << "\n# t=(log n)^(alpha/(alpha+1)) log_L fit_log_L n\n";
    for (const auto& p : curves[i].points) {
      const double t = transformed_axis(p.n, a);
      os << format_double(t) << ' ' << format_double(std::log(p.mean)) << ' '
         << (fits[i] ? format_double(fits[i]->A - fits[i]->C * t) : std::string("nan")) << ' ' << p.n << '\n';
    }
  }
  return os.str();
}

std::vector<CellResult> parse_risk_curve_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("alpha,n,seed,val_mse", 0) != 0)
    throw std::invalid_argument("risk curve CSV is missing its header");
  std::vector<CellResult> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f[4];
    for (auto& field : f)
      if (!std::getline(ls, field, ',')) throw std::invalid_argument("malformed risk curve row: " + line);
    CellResult c;
    c.alpha = std::stod(f[0]);
    c.n = std::stoul(f[1]);
    c.seed = std::stoul(f[2]);
    c.val_mse = std::stod(f[3]);
    c.ok = true;
    out.push_back(std::move(c));
  }
  return out;
}

SweepBundle sweep(const ExperimentConfig& cfg, const fs::path& out_dir, const SweepOptions& opts) {
  cfg.validate();
  fs::create_directories(out_dir / "cells");
  write_file_atomic(out_dir / "config_resolved.json", nlohmann::json(cfg).dump(2) + "\n");

  struct Job {
    double alpha;
    std::size_t n, seed;
  };
  std::vector<Job> jobs;
  for (double a : cfg.alpha_list)
    for (std::size_t n : cfg.n_list)
      for (std::size_t s = 0; s < cfg.seeds; ++s) jobs.push_back({a, n, s});

  SweepBundle bundle;
  bundle.cells.resize(jobs.size());
  std::vector<char> reused(jobs.size(), 0);
  std::atomic<std::size_t> next{0};
  std::mutex report;

  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const Job& job = jobs[i];
      const std::string key = cell_key(job.alpha, job.n, job.seed, cfg);
      const fs::path file = out_dir / "cells" / (key + ".json");
      CellResult result;
      bool from_disk = false;
      if (fs::exists(file)) {
        try {
          std::ifstream is(file);
          result = nlohmann::json::parse(is).get<CellResult>();
          from_disk = result.key == key && result.ok;
        } catch (const std::exception&) {
          from_disk = false;
        }
      }
      if (!from_disk) {
        try {
          result = run_cell(job.alpha, job.n, job.seed, cfg).result;
        } catch (const std::exception& e) {
          result = CellResult{};
          result.alpha = job.alpha;
          result.n = job.n;
          result.seed = job.seed;
          result.key = key;
          result.ok = false;
          result.error = e.what();
        }
        write_file_atomic(file, nlohmann::json(result).dump(2) + "\n");
      }
      bundle.cells[i] = std::move(result);
      reused[i] = from_disk ? 1 : 0;
      if (opts.on_cell) {
        std::lock_guard lock(report);
        opts.on_cell(bundle.cells[i], from_disk);
      }
    }
  };

  const std::size_t n_threads = std::max<std::size_t>(1, std::min(opts.jobs, jobs.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }

  bundle.reused = static_cast<std::size_t>(std::count(reused.begin(), reused.end(), 1));
  bundle.failed = static_cast<std::size_t>(
      std::count_if(bundle.cells.begin(), bundle.cells.end(), [](const CellResult& c) { return !c.ok; }));
  bundle.curves = risk_curves(bundle.cells);
  for (const auto& curve : bundle.curves) {
    try {
      bundle.fits.push_back(fit_rate(curve, curve.alpha));
    } catch (const std::invalid_argument&) {
      bundle.fits.push_back(std::nullopt);
    }
  }

  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& c : bundle.cells)
    manifest.push_back({{"alpha", c.alpha}, {"n", c.n}, {"seed", c.seed}, {"key", c.key},
                        {"status", c.ok ? "complete" : "incomplete"}, {"error", c.error}});

  write_file_atomic(out_dir / "risk_curve.csv", risk_curve_csv(bundle.cells));
  write_file_atomic(out_dir / "attention_stats.csv", attention_stats_csv(bundle.cells));
  write_file_atomic(out_dir / "fit.json", fits_json(bundle.curves, bundle.fits).dump(2) + "\n");
  write_file_atomic(out_dir / "scaling_axis.dat", scaling_axis_dat(bundle.curves, bundle.fits));
  write_file_atomic(out_dir / "cells.json", manifest.dump(2) + "\n");
  return bundle;
}

}  // namespace mattn
