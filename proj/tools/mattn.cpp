#include <bit>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mattn/experiment.hpp"
#include "mattn/model.hpp"
#include "mattn/optim.hpp"
#include "mattn/rng.hpp"
#include "mattn/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kFail = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw UsageError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Shared experiment flags. Unset optionals leave the config value alone.
struct ConfigFlags {
  std::string config_path;
  std::string profile = "default";
  std::vector<double> alpha;
  std::vector<std::size_t> n;
  std::optional<std::size_t> seeds, n_tokens, n_val, n_stats, epochs, batch, modes, grid;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr0, decay;
  std::string activation;

  void add_to(CLI::App* app, bool lists) {
    app->add_option("--config", config_path, "JSON experiment config; flags override its values");
    app->add_option("--profile", profile, "Base defaults before the config file is applied")
        ->check(CLI::IsMember({"default", "reduced"}));
    if (lists) {
      app->add_option("--alpha", alpha, "Spectral decay exponents, comma separated")->delimiter(',');
      app->add_option("--n", n, "Training set sizes, comma separated")->delimiter(',');
      app->add_option("--seeds", seeds, "Independent seeds per (alpha, n)");
    }
    app->add_option("--seed", seed, "Global seed (also settable through MEASURE_ATTN_SEED)");
    app->add_option("--n-tokens", n_tokens, "Context tokens per example");
    app->add_option("--n-val", n_val, "Validation examples per (alpha, seed)");
    app->add_option("--n-stats", n_stats, "Validation examples used for attention stats and the query shuffle");
    app->add_option("--modes", modes, "Retained Mercer modes including the constant");
    app->add_option("--grid", grid, "Density grid size");
    app->add_option("--epochs", epochs, "Training epochs");
    app->add_option("--batch", batch, "Minibatch size (0: min(32, n))");
    app->add_option("--lr", lr0, "Initial Adam learning rate");
    app->add_option("--lr-decay", decay, "Per-epoch learning-rate factor");
    app->add_option("--activation", activation, "Student MLP activation")->check(CLI::IsMember({"relu", "tanh"}));
  }

  // defaults < profile < config file < MEASURE_ATTN_SEED < flags
  mattn::ExperimentConfig resolve() const {
    mattn::ExperimentConfig cfg = profile == "reduced" ? mattn::ExperimentConfig::reduced() : mattn::ExperimentConfig{};
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) throw UsageError("config file not found: " + config_path);
      json j;
      try {
        j = json::parse(read_file(config_path));
      } catch (const json::parse_error& e) {
        throw UsageError("config file is not valid JSON: " + std::string(e.what()));
      }
      try {
        mattn::from_json(j, cfg);
      } catch (const json::exception& e) {
        throw UsageError("bad config value: " + std::string(e.what()));
      }
    }
    if (const char* env = std::getenv("MEASURE_ATTN_SEED"); env && *env) {
      try {
        std::size_t used = 0;
        cfg.global_seed = std::stoull(env, &used);
        if (env[used] != '\0') throw std::invalid_argument(env);
      } catch (const std::exception&) {
        throw UsageError(std::string("MEASURE_ATTN_SEED is not an unsigned integer: ") + env);
      }
    }
    if (!alpha.empty()) cfg.alpha_list = alpha;
    if (!n.empty()) cfg.n_list = n;
    if (seeds) cfg.seeds = *seeds;
    if (seed) cfg.global_seed = *seed;
    if (n_tokens) cfg.n_tokens = *n_tokens;
    if (n_val) cfg.n_val = *n_val;
    if (n_stats) cfg.n_stats = *n_stats;
    if (modes) cfg.modes = *modes;
    if (grid) cfg.grid = *grid;
    if (epochs) cfg.train.epochs = *epochs;
    if (batch) cfg.train.batch_size = *batch;
    if (lr0) cfg.train.lr0 = *lr0;
    if (decay) cfg.train.decay_per_epoch = *decay;
    if (!activation.empty()) cfg.student.activation = mattn::parse_activation(activation);
    try {
      cfg.validate();
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
    return cfg;
  }
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw UsageError("cannot create " + dir.string() + ": " + ec.message());
}

std::string sci(double x, int prec = 3) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(prec) << x;
  return os.str();
}

// ---------------------------------------------------------------------------

int cmd_verify(const std::string& suite, const std::string& fault) {
  mattn::verify::Options opts;
  if (fault == "corrupt-basis") opts.corrupt_basis = true;
  std::vector<std::string> names;
  if (suite.empty() || suite == "all") {
    for (const auto& e : mattn::verify::registry()) names.push_back(e.name);
  } else {
    names.push_back(suite);
  }
  bool all_ok = true;
  std::printf("%-16s %-6s %9s  %s\n", "suite", "result", "seconds", "detail");
  for (const auto& name : names) {
    const auto r = mattn::verify::run_suite(name, opts);
    const auto* bad = r.first_failure();
    std::string detail = bad ? "FAILED " + bad->name + ": " + bad->detail
                             : std::to_string(r.checks.size()) + " checks";
    std::printf("%-16s %-6s %9.3f  %s\n", r.suite.c_str(), r.passed() ? "PASS" : "FAIL", r.seconds, detail.c_str());
    all_ok = all_ok && r.passed();
  }
  return all_ok ? kOk : kFail;
}

int cmd_gen(const ConfigFlags& flags, double alpha, std::uint64_t index, const std::string& out) {
  auto cfg = flags.resolve();
  const auto spec = cfg.spectrum(alpha);
  const std::uint64_t seed = mattn::derive_seed(cfg.global_seed, {std::bit_cast<std::uint64_t>(alpha), index, 7});
  const auto ex = mattn::gen_example(spec, cfg, seed);
  json j;
  j["alpha"] = alpha;
  j["target"] = ex.target;
  j["query"] = std::vector<double>(ex.query.data(), ex.query.data() + ex.query.size());
  j["tag"] = ex.hidden.tag;
  j["z1"] = ex.hidden.z1;
  j["z2"] = ex.hidden.z2;
  json ctx = json::array();
  for (Eigen::Index t = 0; t < ex.context.rows(); ++t) ctx.push_back({ex.context(t, 0), ex.context(t, 1)});
  j["context"] = std::move(ctx);
  const std::string text = j.dump(2) + "\n";
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    mattn::write_file_atomic(out, text);
  }
  return kOk;
}

int cmd_train(const ConfigFlags& flags, double alpha, std::size_t n, std::size_t seed_index, const fs::path& out) {
  auto cfg = flags.resolve();
  ensure_dir(out);
  auto run = mattn::run_cell(alpha, n, seed_index, cfg);
  json resolved;
  mattn::to_json(resolved, cfg);
  mattn::write_file_atomic(out / "config_resolved.json", resolved.dump(2) + "\n");
  if (!run.result.ok) {
    std::cerr << "train: cell failed: " << run.result.error << "\n";
    return kFail;
  }
  mattn::write_file_atomic(out / "checkpoint.json", mattn::checkpoint_json(run.model).dump() + "\n");
  mattn::write_file_atomic(out / "loss_trace.csv", mattn::loss_trace_csv(run.result.loss_trace));
  json cell;
  mattn::to_json(cell, run.result);
  mattn::write_file_atomic(out / "cell.json", cell.dump(2) + "\n");
  std::printf("alpha=%g n=%zu seed=%zu val_mse=%s shuffled=%s\n", alpha, n, seed_index, sci(run.result.val_mse).c_str(),
              sci(run.result.shuffle.mse_shuffled).c_str());
  return kOk;
}

int cmd_sweep(const ConfigFlags& flags, const fs::path& out, std::size_t jobs, bool quiet) {
  auto cfg = flags.resolve();
  ensure_dir(out);
  mattn::SweepOptions opts;
  opts.jobs = jobs;
  opts.on_cell = [quiet](const mattn::CellResult& c, bool reused) {
    if (quiet) return;
    std::fprintf(stderr, "[%s] alpha=%g n=%zu seed=%zu %s\n", reused ? "reuse" : "done", c.alpha, c.n, c.seed,
                 c.ok ? ("val_mse=" + sci(c.val_mse)).c_str() : ("error: " + c.error).c_str());
  };
  const auto bundle = mattn::sweep(cfg, out, opts);
  std::printf("%zu cells (%zu reused, %zu failed) -> %s\n", bundle.cells.size(), bundle.reused, bundle.failed,
              out.string().c_str());
  return bundle.failed == 0 ? kOk : kFail;
}

// ---------------------------------------------------------------------------

struct StatsRow {
  double alpha = 0.0;
  std::size_t n = 0, head = 0;
  double w_same = 0, w_diff = 0, w_same_std = 0, w_diff_std = 0, m_same = 0, m_diff = 0;
};

std::vector<StatsRow> parse_stats_csv(const std::string& text) {
  std::vector<StatsRow> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line.rfind("alpha,n,head,", 0) != 0) throw UsageError("attention_stats.csv: unexpected header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 9) throw UsageError("attention_stats.csv: malformed row: " + line);
    StatsRow r;
    try {
      r.alpha = std::stod(f[0]);
      r.n = std::stoul(f[1]);
      r.head = std::stoul(f[2]);
      r.w_same = std::stod(f[3]);
      r.w_diff = std::stod(f[4]);
      r.w_same_std = std::stod(f[5]);
      r.w_diff_std = std::stod(f[6]);
      r.m_same = std::stod(f[7]);
      r.m_diff = std::stod(f[8]);
    } catch (const std::exception&) {
      throw UsageError("attention_stats.csv: malformed row: " + line);
    }
    rows.push_back(r);
  }
  return rows;
}

// Seed-averaged shuffle results from the per-cell files, if present.
std::map<std::pair<double, std::size_t>, std::pair<double, double>> load_shuffle(const fs::path& dir) {
  std::map<std::pair<double, std::size_t>, std::pair<double, double>> sums;
  std::map<std::pair<double, std::size_t>, std::size_t> counts;
  const fs::path cells = dir / "cells";
  if (!fs::is_directory(cells)) return sums;
  for (const auto& entry : fs::directory_iterator(cells)) {
    if (entry.path().extension() != ".json") continue;
    mattn::CellResult c;
    try {
      mattn::from_json(json::parse(read_file(entry.path())), c);
    } catch (const std::exception&) {
      continue;
    }
    if (!c.ok) continue;
    auto& s = sums[{c.alpha, c.n}];
    s.first += c.shuffle.mse_original;
    s.second += c.shuffle.mse_shuffled;
    ++counts[{c.alpha, c.n}];
  }
  for (auto& [k, s] : sums) {
    s.first /= static_cast<double>(counts[k]);
    s.second /= static_cast<double>(counts[k]);
  }
  return sums;
}

int cmd_analyze(const fs::path& dir, const std::string& format, std::optional<double> stats_alpha,
                std::optional<std::size_t> stats_n) {
  const fs::path curve_path = dir / "risk_curve.csv";
  const fs::path stats_path = dir / "attention_stats.csv";
  for (const auto& p : {curve_path, stats_path})
    if (!fs::exists(p)) throw UsageError("missing " + p.string());
  const auto cells = mattn::parse_risk_curve_csv(read_file(curve_path));
  const auto curves = mattn::risk_curves(cells);
  std::vector<std::optional<mattn::FitResult>> fits;
  for (const auto& c : curves) {
    try {
      fits.push_back(mattn::fit_rate(c, c.alpha));
    } catch (const std::invalid_argument&) {
      fits.push_back(std::nullopt);
    }
  }
  auto stats = parse_stats_csv(read_file(stats_path));
  // The table is reported for one (alpha, n): by default alpha = 1 if present and the largest n.
  if (!stats.empty()) {
    double a = stats_alpha.value_or(stats.front().alpha);
    if (!stats_alpha)
      for (const auto& r : stats)
        if (r.alpha == 1.0) a = 1.0;
    std::size_t n = 0;
    if (stats_n) {
      n = *stats_n;
    } else {
      for (const auto& r : stats)
        if (r.alpha == a) n = std::max(n, r.n);
    }
    std::erase_if(stats, [&](const StatsRow& r) { return r.alpha != a || r.n != n; });
  }
  const auto shuffle = load_shuffle(dir);
  std::optional<std::pair<double, double>> shuf;
  if (!stats.empty()) {
    auto it = shuffle.find({stats.front().alpha, stats.front().n});
    if (it != shuffle.end()) shuf = it->second;
  }

  if (format == "json") {
    json j;
    j["fits"] = mattn::fits_json(curves, fits);
    json table = json::array();
    for (const auto& r : stats)
      table.push_back({{"head", r.head},
                       {"w_same_mean", r.w_same},
                       {"w_diff_mean", r.w_diff},
                       {"w_same_std", r.w_same_std},
                       {"w_diff_std", r.w_diff_std},
                       {"m_same_mean", r.m_same},
                       {"m_diff_mean", r.m_diff}});
    json att;
    if (!stats.empty()) {
      att["alpha"] = stats.front().alpha;
      att["n"] = stats.front().n;
    }
    att["heads"] = std::move(table);
    if (shuf) att["shuffle"] = {{"mse_original", shuf->first}, {"mse_shuffled", shuf->second}};
    j["attention"] = std::move(att);
    std::cout << j.dump(2) << "\n";
    return kOk;
  }

  std::printf("Risk fit  log L = A - C (log n)^(alpha/(alpha+1))\n");
  std::printf("%8s %12s %12s %12s  %s\n", "alpha", "A", "C", "resid_rms", "n");
  for (std::size_t i = 0; i < curves.size(); ++i) {
    std::string ns;
    for (const auto& p : curves[i].points) ns += (ns.empty() ? "" : ",") + std::to_string(p.n);
    if (fits[i]) {
      std::printf("%8g %12.5f %12.5f %12.2e  %s\n", curves[i].alpha, fits[i]->A, fits[i]->C, fits[i]->residual_rms,
                  ns.c_str());
    } else {
      std::printf("%8g %12s %12s %12s  %s\n", curves[i].alpha, "-", "-", "-", ns.c_str());
    }
  }
  if (stats.empty()) return kOk;
  std::printf("\nAttention from the query token, alpha=%g n=%zu\n", stats.front().alpha, stats.front().n);
  std::printf("%6s %11s %11s %11s %11s %9s %9s\n", "head", "w_same", "w_diff", "std(w_same)", "std(w_diff)", "m_same",
              "m_diff");
  StatsRow mean;
  for (const auto& r : stats) {
    std::printf("%6zu %11s %11s %11s %11s %9.4f %9.4f\n", r.head, sci(r.w_same, 2).c_str(), sci(r.w_diff, 2).c_str(),
                sci(r.w_same_std, 2).c_str(), sci(r.w_diff_std, 2).c_str(), r.m_same, r.m_diff);
    mean.w_same += r.w_same;
    mean.w_diff += r.w_diff;
    mean.w_same_std += r.w_same_std;
    mean.w_diff_std += r.w_diff_std;
    mean.m_same += r.m_same;
    mean.m_diff += r.m_diff;
  }
  const double h = static_cast<double>(stats.size());
  std::printf("%6s %11s %11s %11s %11s %9.4f %9.4f\n", "mean", sci(mean.w_same / h, 2).c_str(),
              sci(mean.w_diff / h, 2).c_str(), sci(mean.w_same_std / h, 2).c_str(), sci(mean.w_diff_std / h, 2).c_str(),
              mean.m_same / h, mean.m_diff / h);
  if (shuf) {
    std::printf("\n%10s %18s %18s\n", "", "original queries", "shuffled queries");
    std::printf("%10s %18s %18s\n", "val MSE", sci(shuf->first, 2).c_str(), sci(shuf->second, 2).c_str());
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Measure-valued attention: property suites, synthetic scaling sweeps and analysis"};
  app.require_subcommand(1);

  auto* verify = app.add_subcommand("verify", "Run the property suites and print a pass/fail table");
  std::string suite, fault;
  std::vector<std::string> suite_names{"all"};
  for (const auto& e : mattn::verify::registry()) suite_names.push_back(e.name);
  verify->add_option("--suite", suite, "Run only this suite")->check(CLI::IsMember(suite_names));
  verify->add_option("--inject-fault", fault, "Deliberately break an input to exercise failure paths")
      ->check(CLI::IsMember({"corrupt-basis"}));

  auto* gen = app.add_subcommand("gen", "Generate one synthetic example as JSON");
  ConfigFlags gen_flags;
  gen_flags.add_to(gen, false);
  double gen_alpha = 1.0;
  std::uint64_t gen_index = 0;
  std::string gen_out;
  gen->add_option("--alpha", gen_alpha, "Spectral decay exponent");
  gen->add_option("--index", gen_index, "Example index within the seed stream");
  gen->add_option("--out", gen_out, "Output file (default stdout)");

  auto* trn = app.add_subcommand("train", "Train and evaluate a single (alpha, n, seed) cell");
  ConfigFlags trn_flags;
  trn_flags.add_to(trn, false);
  double trn_alpha = 1.0;
  std::size_t trn_n = 64, trn_seed_index = 0;
  std::string trn_out;
  trn->add_option("--alpha", trn_alpha, "Spectral decay exponent");
  trn->add_option("--n", trn_n, "Training set size");
  trn->add_option("--seed-index", trn_seed_index, "Seed replicate index");
  trn->add_option("--out", trn_out, "Output directory for checkpoint.json, loss_trace.csv, cell.json")->required();

  auto* swp = app.add_subcommand("sweep", "Run the (alpha, n, seed) grid and write the results bundle");
  ConfigFlags swp_flags;
  swp_flags.add_to(swp, true);
  std::string swp_out;
  std::size_t jobs = 1;
  bool quiet = false;
  swp->add_option("--out", swp_out, "Results directory; existing cells are reused")->required();
  swp->add_option("--jobs", jobs, "Cells trained in parallel")->check(CLI::PositiveNumber);
  swp->add_flag("--quiet", quiet, "No per-cell progress on stderr");

  auto* ana = app.add_subcommand("analyze", "Refit risk curves and print the fit and attention tables");
  std::string ana_dir, format = "table";
  std::optional<double> ana_alpha;
  std::optional<std::size_t> ana_n;
  ana->add_option("results_dir", ana_dir, "Directory written by sweep")->required();
  ana->add_option("--format", format, "Output format")->check(CLI::IsMember({"table", "json"}));
  ana->add_option("--alpha", ana_alpha, "Alpha of the attention table (default 1 if present)");
  ana->add_option("--n", ana_n, "n of the attention table (default largest)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*verify) return cmd_verify(suite, fault);
    if (*gen) return cmd_gen(gen_flags, gen_alpha, gen_index, gen_out);
    if (*trn) return cmd_train(trn_flags, trn_alpha, trn_n, trn_seed_index, trn_out);
    if (*swp) return cmd_sweep(swp_flags, swp_out, jobs, quiet);
    if (*ana) return cmd_analyze(ana_dir, format, ana_alpha, ana_n);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (*swp && swp_flags.config_path.size()) std::cerr << swp->help();
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
