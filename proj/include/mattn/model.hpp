#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace mattn {

enum class Activation { ReLU, Tanh };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);

struct StudentConfig {
  std::size_t d_model = 8;
  std::size_t d_hidden = 8;
  std::size_t n_heads = 4;
  std::size_t input_dim = 2;
  Activation activation = Activation::ReLU;

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;
};

/// Position of every weight block inside the flat parameter vector. Blocks
/// are stored row-major, in this order:
///   ctx.W1 ctx.b1 ctx.W2 ctx.b2  qry.W1 qry.b1 qry.W2 qry.b2
///   attn.Wq attn.Wk attn.Wv attn.Wo  head.W1 head.b1 head.W2 head.b2
struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
  bool is_bias() const { return name.ends_with(".b1") || name.ends_with(".b2"); }
};

struct ParamLayout {
  std::vector<ParamBlock> blocks;
  std::size_t total = 0;

  static ParamLayout for_config(const StudentConfig& cfg);
  const ParamBlock& at(const std::string& name) const;
};

/// Intermediates of one forward pass. Rows index context tokens.
struct ForwardCache {
  std::uint64_t epoch = 0;
  Eigen::MatrixXd tokens, ctx_pre, ctx_hidden, ctx_embed;
  Eigen::VectorXd query, qry_pre, qry_hidden, qry_embed;
  Eigen::VectorXd q_proj;
  Eigen::MatrixXd keys, values;
  Eigen::MatrixXd attn;  // n_heads x T_ctx
  Eigen::VectorXd pooled, mixed, head_pre, head_hidden;
  double prediction = 0.0;
};

struct ForwardResult {
  double prediction = 0.0;
  ForwardCache cache;
};

/// Context MLP and query MLP feed a single multi-head softmax attention from
/// the query to every context token; the pooled output goes through an output
/// projection and a two-layer head to a scalar.
class StudentModel {
 public:
  StudentModel(StudentConfig cfg, std::vector<double> params);

  /// Glorot-uniform weights, zero biases.
  static StudentModel init(const StudentConfig& cfg, std::uint64_t seed);

  const StudentConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<const double> params() const { return params_; }
  std::span<const double> grads() const { return grads_; }
  /// Invalidates caches from earlier forward passes.
  std::span<double> mutable_params();

  ForwardResult forward(const Eigen::MatrixXd& context, const Eigen::VectorXd& query);
  double predict(const Eigen::MatrixXd& context, const Eigen::VectorXd& query);

  /// Overwrites grads() with upstream * d prediction / d params. Throws
  /// std::logic_error if the cache did not come from the latest forward on the
  /// current parameters.
  void backward(const ForwardCache& cache, double upstream);

 private:
  StudentConfig cfg_;
  ParamLayout layout_;
  std::vector<double> params_;
  std::vector<double> grads_;
  std::uint64_t epoch_ = 0;
};

/// Per-head query-to-context attention rows of the pass that produced `cache`.
Eigen::MatrixXd attention_rows(const ForwardCache& cache);

void to_json(nlohmann::json& j, const StudentConfig& cfg);
void from_json(const nlohmann::json& j, StudentConfig& cfg);
nlohmann::json checkpoint_json(const StudentModel& model);
StudentModel model_from_checkpoint(const nlohmann::json& j);

}  // namespace mattn
