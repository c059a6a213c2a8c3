#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mattn/example.hpp"
#include "mattn/model.hpp"
#include "mattn/optim.hpp"
#include "mattn/spectrum.hpp"

namespace mattn {

struct ExperimentConfig {
  std::vector<double> alpha_list{0.5, 1.0, 2.0};
  double decay_scale = 1.0;  // c in lambda_j = exp(-c j^alpha)
  std::size_t modes = 16;
  std::size_t grid = 32;
  std::size_t n_tokens = 5000;
  std::vector<std::size_t> n_list{4, 8, 16, 32, 64};
  std::size_t n_val = 2000;
  std::size_t n_stats = 1000;  // validation examples used for attention stats and the query shuffle
  double clamp_eps = 1e-6;
  std::size_t seeds = 3;
  std::uint64_t global_seed = 0;
  StudentConfig student;
  TrainConfig train;

  /// n_tokens = 1000, n_val = 500, n_stats = 500.
  static ExperimentConfig reduced();
  void validate() const;
  MercerSpectrum spectrum(double alpha) const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& cfg);
/// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, ExperimentConfig& cfg);

/// v * sum_{j>=1} lambda_j z_j^2
double target_functional(const MercerSpectrum& spec, std::span<const double> z1, double tag);

/// Builds the two-component example from fixed latents; tokens depend only on token_seed.
Example example_from_latents(const MercerSpectrum& spec, const ExperimentConfig& cfg, HiddenState hidden,
                             std::uint64_t token_seed);

/// Samples the query tag, both coefficient vectors and the context tokens.
Example gen_example(const MercerSpectrum& spec, const ExperimentConfig& cfg, std::uint64_t seed);

/// `count` examples; example i is gen_example(..., derive_seed(stream_seed, {i})).
std::vector<Example> gen_dataset(const MercerSpectrum& spec, const ExperimentConfig& cfg, std::size_t count,
                                 std::uint64_t stream_seed);

// ---------------------------------------------------------------------------
// Attention diagnostics

struct HeadStats {
  double w_same_mean = 0.0, w_diff_mean = 0.0;
  double w_same_std = 0.0, w_diff_std = 0.0;
  double m_same_mean = 0.0, m_diff_mean = 0.0;
  double m_same_std = 0.0, m_diff_std = 0.0;
  std::size_t same_count = 0, diff_count = 0;  // examples contributing to each side
};

/// One example's attention rows (n_heads x T_ctx), the tag of every context
/// token, and the query tag.
struct AttentionSnapshot {
  Eigen::MatrixXd rows;
  Eigen::VectorXd token_tags;
  double query_tag = 0.0;
};

/// Splits context tokens by whether their tag equals the query tag and
/// averages per-token weight and total mass over examples, per head.
std::vector<HeadStats> mass_stats(std::span<const AttentionSnapshot> snaps);

std::vector<HeadStats> attention_mass_stats(StudentModel& model, std::span<const Example> examples);

struct ShuffleResult {
  double mse_original = 0.0;
  double mse_shuffled = 0.0;
};

/// Evaluates with query i replaced by query perm[i]; targets and contexts stay.
ShuffleResult query_shuffle_eval(StudentModel& model, std::span<const Example> examples,
                                 std::span<const std::size_t> perm);
/// Uniform random permutation of queries across examples (fixed points allowed).
ShuffleResult query_shuffle_eval(StudentModel& model, std::span<const Example> examples, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Cells, curves, fits

struct CellResult {
  double alpha = 0.0;
  std::size_t n = 0;
  std::size_t seed = 0;
  std::string key;
  bool ok = false;
  std::string error;
  double val_mse = 0.0;
  ShuffleResult shuffle;
  std::vector<HeadStats> heads;
  LossTrace loss_trace;
};

void to_json(nlohmann::json& j, const CellResult& c);
void from_json(const nlohmann::json& j, CellResult& c);

struct CellRun {
  CellResult result;
  StudentModel model;
};

/// Content-addressed key of a cell: a hash of every setting the cell's result depends on.
std::string cell_key(double alpha, std::size_t n, std::size_t seed, const ExperimentConfig& cfg);

/// Trains on n fresh examples and evaluates on the (alpha, seed) validation set.
CellRun run_cell(double alpha, std::size_t n, std::size_t seed, const ExperimentConfig& cfg);

struct RiskPoint {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

struct RiskCurve {
  double alpha = 0.0;
  std::vector<RiskPoint> points;
};

/// Least-squares fit of log L = A - C t with t = (log n)^{alpha/(alpha+1)}.
struct FitResult {
  double A = 0.0;
  double C = 0.0;
  double residual_rms = 0.0;
  std::vector<std::size_t> n_list;
};

double transformed_axis(std::size_t n, double alpha);

/// Throws std::invalid_argument when fewer than two distinct n are present.
FitResult fit_rate(const RiskCurve& curve, double alpha);

/// Groups successful cells by (alpha, n); order follows first appearance of alpha and increasing n.
std::vector<RiskCurve> risk_curves(std::span<const CellResult> cells);

struct SweepBundle {
  std::vector<CellResult> cells;
  std::vector<RiskCurve> curves;
  std::vector<std::optional<FitResult>> fits;  // parallel to curves
  std::size_t reused = 0;                      // cells loaded from a previous run
  std::size_t failed = 0;
};

struct SweepOptions {
  std::size_t jobs = 1;
  std::function<void(const CellResult&, bool reused)> on_cell;
};

/// Runs every (alpha, n, seed) cell not already present in out_dir/cells and
/// writes risk_curve.csv, attention_stats.csv, fit.json, scaling_axis.dat,
/// cells.json and config_resolved.json into out_dir.
SweepBundle sweep(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, const SweepOptions& opts = {});

std::string risk_curve_csv(std::span<const CellResult> cells);
std::string attention_stats_csv(std::span<const CellResult> cells);
nlohmann::json fits_json(std::span<const RiskCurve> curves, std::span<const std::optional<FitResult>> fits);
std::string scaling_axis_dat(std::span<const RiskCurve> curves, std::span<const std::optional<FitResult>> fits);

/// Parses risk_curve.csv back into cell results (only alpha, n, seed, val_mse are set).
std::vector<CellResult> parse_risk_curve_csv(const std::string& text);

/// Writes via a temporary file and a rename, so readers never see partial files.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

std::string format_double(double x);

}  // namespace mattn
