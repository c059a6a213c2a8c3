// One PASS/FAIL line per acceptance criterion. Exit status is nonzero if any
// criterion fails.
//
//   mattn_acceptance [--work DIR] [--jobs N] [--keep]
//
// Sweeps are written under DIR (default ./acceptance_work) and wiped first
// unless --keep is given, in which case finished cells are reused.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <thread>
#include <string>
#include <vector>

#include "mattn/attention.hpp"
#include "mattn/experiment.hpp"
#include "mattn/measures.hpp"
#include "mattn/spectrum.hpp"
#include "mattn/verify.hpp"

using namespace mattn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(const std::string& id, const std::string& title, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s [%s] %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id.c_str(), title.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Feature-mapped mixture (tag e_i | z | e_1(z) .. e_D(z)) over I orthogonal tags.
struct RecallSetup {
  std::vector<std::vector<double>> pmfs;
  DiscreteMeasure nu;
  Point query;
};

RecallSetup recall_setup(const MercerSpectrum& spec, std::size_t I, std::size_t D, std::size_t star, std::mt19937_64& rng) {
  const std::size_t T = spec.grid_size(), dim = I + 1 + D;
  std::normal_distribution<double> g;
  RecallSetup s;
  Eigen::MatrixXd support(I * T, dim);
  Eigen::VectorXd weights(I * T);
  for (std::size_t i = 0; i < I; ++i) {
    std::vector<double> z(spec.modes(), 0.0);
    for (std::size_t j = 1; j < spec.modes(); ++j) z[j] = g(rng);
    s.pmfs.push_back(synth_density(spec, z));
    for (std::size_t t = 0; t < T; ++t) {
      const auto row = static_cast<Eigen::Index>(i * T + t);
      support.row(row).setZero();
      support(row, static_cast<Eigen::Index>(i)) = 1.0;
      support(row, static_cast<Eigen::Index>(I)) = spec.grid()[t];
      for (std::size_t j = 1; j <= D; ++j)
        support(row, static_cast<Eigen::Index>(I + j)) = basis_eval(spec, j, spec.grid()[t]);
      weights(row) = s.pmfs[i][t] / static_cast<double>(I);
    }
  }
  s.nu = DiscreteMeasure(support, weights);
  s.query = Point::Zero(static_cast<Eigen::Index>(dim));
  s.query(static_cast<Eigen::Index>(star)) = 1.0;
  return s;
}

std::vector<CellResult> cells_at(const SweepBundle& b, double alpha, std::size_t n) {
  std::vector<CellResult> out;
  for (const auto& c : b.cells)
    if (c.ok && c.alpha == alpha && c.n == n) out.push_back(c);
  return out;
}

double mean_mse(const std::vector<CellResult>& cells) {
  double s = 0.0;
  for (const auto& c : cells) s += c.val_mse;
  return cells.empty() ? NAN : s / static_cast<double>(cells.size());
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = "acceptance_work";
  std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  bool keep = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--jobs" && i + 1 < argc) {
      jobs = std::stoul(argv[++i]);
    } else if (a == "--keep") {
      keep = true;
    } else {
      std::fprintf(stderr, "usage: %s [--work DIR] [--jobs N] [--keep]\n", argv[0]);
      return 2;
    }
  }
  if (!keep) fs::remove_all(work);
  fs::create_directories(work);

  report("1", "one-hot recall selection, I in {2,4}, D = 8", [] {
    const MercerSpectrum spec(1.0, 1.0, 16, 32);
    const double eps2 = 1e-4;
    const std::size_t D = 8;
    std::mt19937_64 rng(2024);
    double worst = 0.0;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t I : {2u, 4u}) {
      const double c = std::sqrt(std::log(std::pow(double(I), 3) / eps2));
      const auto params = build_recall_params(I, 1, D, c);
      for (std::size_t star = 0; star < I; ++star) {
        const auto s = recall_setup(spec, I, D, star, rng);
        const Point out = measure_attention(params, s.nu, s.query);
        for (std::size_t j = 1; j <= D; ++j) {
          double oracle = 0.0, emax = 0.0;
          for (std::size_t t = 0; t < spec.grid_size(); ++t) {
            const double e = basis_eval(spec, j, spec.grid()[t]);
            oracle += s.pmfs[star][t] * e;
            emax = std::max(emax, std::abs(e));
          }
          worst = std::max(worst, std::abs(out(static_cast<Eigen::Index>(I + j)) - oracle) / (5 * eps2 * emax));
        }
      }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return Outcome{worst <= 1.0 && secs < 1.0, fmt("max |err| / (5 eps2 max|e_j|) = %.3g, %.3f s", worst, secs)};
  });

  report("2", "closed-form softmax mass 200/101 at I = 2, c^2 = ln 100", [] {
    const auto t0 = std::chrono::steady_clock::now();
    // Two components on orthogonal tags, content on a line; Q = K = c on the tag block.
    const double c = std::sqrt(std::log(100.0));
    const auto params = build_recall_params(2, 1, 1, c);
    Eigen::MatrixXd support(4, 4);
    support << 1, 0, 0.2, 0.2, 1, 0, 0.7, 0.7, 0, 1, 0.4, 0.4, 0, 1, 0.9, 0.9;
    Eigen::VectorXd weights(4);
    weights << 0.5 * 0.3, 0.5 * 0.7, 0.5 * 0.6, 0.5 * 0.4;
    const DiscreteMeasure nu(support, weights);
    Point q = Point::Zero(4);
    q(0) = 1.0;
    const auto w = softmax_weights(params.heads[0], nu, q);
    // Density of the tilted measure w.r.t. nu on a star token.
    const double got = w(0) / weights(0);
    const double expect = std::exp(c * c) / (0.5 * (std::exp(c * c) + 1.0));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double err = std::max(std::abs(got - 200.0 / 101.0), std::abs(expect - 200.0 / 101.0));
    return Outcome{err <= 1e-10 && secs < 1.0, fmt("per-unit-mass weight %.15f vs 200/101, |diff| = %.2g", got, err)};
  });

  report("3", "property suites: orthonormality, isometry, truncation, Lipschitz", [] {
    double secs = 0.0;
    std::string detail;
    bool ok = true;
    for (const char* name : {"orthonormality", "isometry", "truncation", "lipschitz"}) {
      const auto r = verify::run_suite(name);
      secs += r.seconds;
      ok = ok && r.passed();
      const auto* bad = r.first_failure();
      detail += std::string(name) + (bad ? " FAILED " + bad->name + " (" + bad->detail + ")" : " ok") + "; ";
    }
    const auto lip = verify::run_suite("lipschitz");
    detail += lip.checks.front().detail;
    return Outcome{ok && secs < 30.0, detail + fmt("; %.2f s", secs)};
  });

  report("4", "gradient check, 200 coordinates x 10 seeds", [] {
    const auto r = verify::run_suite("gradients");
    return Outcome{r.passed() && r.seconds < 30.0, r.checks.front().detail + fmt(", %.2f s", r.seconds)};
  });

  // Default-size grid at every alpha; criteria 5-8 read from it.
  ExperimentConfig full;
  SweepBundle full_bundle;
  const auto t_full = std::chrono::steady_clock::now();
  bool full_ok = true;
  try {
    std::printf("running default-size sweep (%zu cells, %zu jobs)\n",
                full.alpha_list.size() * full.n_list.size() * full.seeds, jobs);
    std::fflush(stdout);
    full_bundle = sweep(full, work / "full", {jobs, {}});
  } catch (const std::exception& e) {
    std::printf("default-size sweep failed: %s\n", e.what());
    full_ok = false;
  }
  const double full_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_full).count();

  report("5", "risk at n=64 <= 0.5 x risk at n=4, alpha = 1, default sizes", [&] {
    if (!full_ok) return Outcome{false, "sweep failed"};
    const double lo = mean_mse(cells_at(full_bundle, 1.0, 4)), hi = mean_mse(cells_at(full_bundle, 1.0, 64));
    return Outcome{hi <= 0.5 * lo, fmt("mean MSE n=4 %.4g, n=64 %.4g, ratio %.3f; full grid %.0f s", lo, hi, hi / lo,
                                       full_secs)};
  });

  report("5r", "same ratio on the reduced profile in < 5 min", [&] {
    auto reduced = ExperimentConfig::reduced();
    reduced.alpha_list = {1.0};
    reduced.n_list = {4, 64};
    const auto t0 = std::chrono::steady_clock::now();
    const auto b = sweep(reduced, work / "reduced", {jobs, {}});
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double lo = mean_mse(cells_at(b, 1.0, 4)), hi = mean_mse(cells_at(b, 1.0, 64));
    return Outcome{hi <= 0.5 * lo && secs < 300.0,
                   fmt("mean MSE n=4 %.4g, n=64 %.4g, ratio %.3f, %.0f s", lo, hi, hi / lo, secs)};
  });

  report("6", "fitted C_alpha > 0 for alpha in {0.5, 1, 2}; exact collinear recovery", [&] {
    if (!full_ok) return Outcome{false, "sweep failed"};
    std::string detail;
    bool ok = full_bundle.curves.size() == 3;
    for (std::size_t i = 0; i < full_bundle.curves.size(); ++i) {
      const auto& f = full_bundle.fits[i];
      ok = ok && f && f->C > 0.0;
      detail += fmt("alpha=%g C=%.4g; ", full_bundle.curves[i].alpha, f ? f->C : NAN);
    }
    RiskCurve line{1.0, {}};
    for (std::size_t n : {4, 8, 16, 32, 64}) line.points.push_back({n, std::exp(1.0 - 2.0 * transformed_axis(n, 1.0)), 0, 1});
    const auto f = fit_rate(line, 1.0);
    const bool exact = std::abs(f.A - 1.0) < 1e-10 && std::abs(f.C - 2.0) < 1e-10 && f.residual_rms < 1e-10;
    detail += fmt("collinear fit A=%.12f C=%.12f rms=%.1e", f.A, f.C, f.residual_rms);
    return Outcome{ok && exact, detail};
  });

  const auto at64 = cells_at(full_bundle, 1.0, 64);

  report("7", "attention specialization at alpha = 1, n = 64 (any of 3 seeds)", [&] {
    if (at64.empty()) return Outcome{false, "no cells"};
    bool any = false;
    std::string detail;
    for (const auto& c : at64) {
      double best = 0.0, same = 0.0, diff = 0.0;
      for (const auto& h : c.heads) {
        best = std::max(best, std::abs(h.m_same_mean - h.m_diff_mean));
        same += h.m_same_mean;
        diff += h.m_diff_mean;
      }
      const bool ok = best >= 0.9 && same > diff;
      any = any || ok;
      detail += fmt("seed %zu: max|m_same-m_diff| %.3f, mean m_same %.3f vs m_diff %.3f%s; ", c.seed, best,
                    same / c.heads.size(), diff / c.heads.size(), ok ? " ok" : "");
    }
    return Outcome{any, detail};
  });

  report("8", "query shuffle raises MSE >= 10x at alpha = 1, n = 64 (any of 3 seeds)", [&] {
    if (at64.empty()) return Outcome{false, "no cells"};
    bool any = false;
    std::string detail;
    for (const auto& c : at64) {
      const double ratio = c.shuffle.mse_shuffled / c.shuffle.mse_original;
      any = any || ratio >= 10.0;
      detail += fmt("seed %zu: %.4g -> %.4g (%.2fx); ", c.seed, c.shuffle.mse_original, c.shuffle.mse_shuffled, ratio);
    }
    return Outcome{any, detail};
  });

  report("9", "identical sweeps give byte-identical CSVs", [&] {
    auto cfg = ExperimentConfig::reduced();
    cfg.alpha_list = {0.5, 1.0};
    cfg.n_list = {4, 8};
    cfg.seeds = 2;
    cfg.n_tokens = 300;
    cfg.n_val = 100;
    cfg.n_stats = 100;
    fs::remove_all(work / "repro_a");
    fs::remove_all(work / "repro_b");
    sweep(cfg, work / "repro_a", {jobs, {}});
    sweep(cfg, work / "repro_b", {1, {}});
    bool same = true;
    std::string detail;
    for (const char* f : {"risk_curve.csv", "attention_stats.csv"}) {
      const auto a = slurp(work / "repro_a" / f), b = slurp(work / "repro_b" / f);
      same = same && !a.empty() && a == b;
      detail += fmt("%s %zu bytes %s; ", f, a.size(), a == b ? "identical" : "DIFFER");
    }
    return Outcome{same, detail};
  });

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
