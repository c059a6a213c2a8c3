#include "mattn/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "mattn/rng.hpp"

namespace mattn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;
using MutMat = Eigen::Map<RowMat>;
using ConstVec = Eigen::Map<const Eigen::VectorXd>;
using MutVec = Eigen::Map<Eigen::VectorXd>;

ConstMat mat(std::span<const double> flat, const ParamBlock& b) {
  return ConstMat(flat.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols));
}
MutMat mat(std::span<double> flat, const ParamBlock& b) {
  return MutMat(flat.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols));
}
ConstVec vec(std::span<const double> flat, const ParamBlock& b) {
  return ConstVec(flat.data() + b.offset, static_cast<Eigen::Index>(b.size()));
}
MutVec vec(std::span<double> flat, const ParamBlock& b) {
  return MutVec(flat.data() + b.offset, static_cast<Eigen::Index>(b.size()));
}

template <class Derived>
auto activate(const Eigen::ArrayBase<Derived>& z, Activation a) {
  using Plain = typename Derived::PlainObject;
  return a == Activation::ReLU ? Plain(z.max(0.0)) : Plain(z.tanh());
}

// Derivative expressed through the pre-activation z.
template <class Derived>
auto activate_grad(const Eigen::ArrayBase<Derived>& z, Activation a) {
  using Plain = typename Derived::PlainObject;
  if (a == Activation::ReLU) return Plain((z > 0.0).template cast<double>());
  return Plain(1.0 - z.tanh().square());
}

}  // namespace

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::ReLU;
  if (name == "tanh") return Activation::Tanh;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string to_string(Activation a) { return a == Activation::ReLU ? "relu" : "tanh"; }

void StudentConfig::validate() const {
  if (d_model == 0 || d_hidden == 0 || n_heads == 0 || input_dim == 0)
    throw std::invalid_argument("student dimensions must be positive");
  if (d_model % n_heads != 0) throw std::invalid_argument("d_model must be divisible by n_heads");
}

ParamLayout ParamLayout::for_config(const StudentConfig& cfg) {
  cfg.validate();
  ParamLayout l;
  auto add = [&l](std::string name, std::size_t r, std::size_t c) {
    l.blocks.push_back(ParamBlock{std::move(name), l.total, r, c});
    l.total += r * c;
  };
  const auto in = cfg.input_dim, h = cfg.d_hidden, m = cfg.d_model;
  for (const char* mlp : {"ctx", "qry"}) {
    const std::string p(mlp);
    add(p + ".W1", h, in);
    add(p + ".b1", h, 1);
    add(p + ".W2", m, h);
    add(p + ".b2", m, 1);
  }
  add("attn.Wq", m, m);
  add("attn.Wk", m, m);
  add("attn.Wv", m, m);
  add("attn.Wo", m, m);
  add("head.W1", h, m);
  add("head.b1", h, 1);
  add("head.W2", 1, h);
  add("head.b2", 1, 1);
  return l;
}

const ParamBlock& ParamLayout::at(const std::string& name) const {
  for (const auto& b : blocks)
    if (b.name == name) return b;
  throw std::out_of_range("no parameter block named '" + name + "'");
}

StudentModel::StudentModel(StudentConfig cfg, std::vector<double> params)
    : cfg_(cfg), layout_(ParamLayout::for_config(cfg)), params_(std::move(params)) {
  if (params_.size() != layout_.total)
    throw std::invalid_argument("parameter vector has " + std::to_string(params_.size()) + " entries, layout needs " +
                                std::to_string(layout_.total));
  grads_.assign(params_.size(), 0.0);
}

StudentModel StudentModel::init(const StudentConfig& cfg, std::uint64_t seed) {
  const auto layout = ParamLayout::for_config(cfg);
  std::vector<double> p(layout.total, 0.0);
  Rng rng = make_rng(seed);
  for (const auto& b : layout.blocks) {
    if (b.is_bias()) continue;
    const double s = std::sqrt(6.0 / static_cast<double>(b.rows + b.cols));
    std::uniform_real_distribution<double> u(-s, s);
    for (std::size_t k = 0; k < b.size(); ++k) p[b.offset + k] = u(rng);
  }
  return StudentModel(cfg, std::move(p));
}

std::span<double> StudentModel::mutable_params() {
  ++epoch_;
  return params_;
}

ForwardResult StudentModel::forward(const Eigen::MatrixXd& context, const Eigen::VectorXd& query) {
  const auto in = static_cast<Eigen::Index>(cfg_.input_dim);
  if (context.rows() == 0) throw std::invalid_argument("forward needs at least one context token");
  if (context.cols() != in || query.size() != in) throw std::invalid_argument("token dimension mismatch");

  const std::span<const double> p = params_;
  const auto act = cfg_.activation;
  const auto T = context.rows();
  const auto H = static_cast<Eigen::Index>(cfg_.n_heads);
  const auto hd = static_cast<Eigen::Index>(cfg_.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  ForwardResult out;
  ForwardCache& c = out.cache;
  c.epoch = ++epoch_;
  c.tokens = context;
  c.query = query;

  c.ctx_pre = (context * mat(p, layout_.at("ctx.W1")).transpose()).rowwise() +
              vec(p, layout_.at("ctx.b1")).transpose();
  c.ctx_hidden = activate(c.ctx_pre.array(), act).matrix();
  c.ctx_embed = (c.ctx_hidden * mat(p, layout_.at("ctx.W2")).transpose()).rowwise() +
                vec(p, layout_.at("ctx.b2")).transpose();

  c.qry_pre = mat(p, layout_.at("qry.W1")) * query + vec(p, layout_.at("qry.b1"));
  c.qry_hidden = activate(c.qry_pre.array(), act).matrix();
  c.qry_embed = mat(p, layout_.at("qry.W2")) * c.qry_hidden + vec(p, layout_.at("qry.b2"));

  c.q_proj = mat(p, layout_.at("attn.Wq")) * c.qry_embed;
  c.keys = c.ctx_embed * mat(p, layout_.at("attn.Wk")).transpose();
  c.values = c.ctx_embed * mat(p, layout_.at("attn.Wv")).transpose();

  c.attn.resize(H, T);
  c.pooled.resize(static_cast<Eigen::Index>(cfg_.d_model));
  for (Eigen::Index h = 0; h < H; ++h) {
    Eigen::VectorXd s = scale * (c.keys.middleCols(h * hd, hd) * c.q_proj.segment(h * hd, hd));
    Eigen::ArrayXd e = (s.array() - s.maxCoeff()).exp();
    e /= e.sum();
    c.attn.row(h) = e.matrix().transpose();
    c.pooled.segment(h * hd, hd) = c.values.middleCols(h * hd, hd).transpose() * e.matrix();
  }

  c.mixed = mat(p, layout_.at("attn.Wo")) * c.pooled;
  c.head_pre = mat(p, layout_.at("head.W1")) * c.mixed + vec(p, layout_.at("head.b1"));
  c.head_hidden = activate(c.head_pre.array(), act).matrix();
  c.prediction = (mat(p, layout_.at("head.W2")) * c.head_hidden)(0) + p[layout_.at("head.b2").offset];
  out.prediction = c.prediction;
  return out;
}

double StudentModel::predict(const Eigen::MatrixXd& context, const Eigen::VectorXd& query) {
  return forward(context, query).prediction;
}

void StudentModel::backward(const ForwardCache& c, double upstream) {
  if (c.epoch != epoch_) throw std::logic_error("stale forward cache: parameters or pass changed since forward");

  const std::span<const double> p = params_;
  const std::span<double> g = grads_;
  const auto act = cfg_.activation;
  const auto T = c.tokens.rows();
  const auto H = static_cast<Eigen::Index>(cfg_.n_heads);
  const auto hd = static_cast<Eigen::Index>(cfg_.head_dim());
  const auto m = static_cast<Eigen::Index>(cfg_.d_model);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // Head MLP.
  mat(g, layout_.at("head.W2")) = upstream * c.head_hidden.transpose();
  g[layout_.at("head.b2").offset] = upstream;
  const Eigen::VectorXd d_head_pre =
      (upstream * mat(p, layout_.at("head.W2")).transpose()).array() * activate_grad(c.head_pre.array(), act);
  mat(g, layout_.at("head.W1")) = d_head_pre * c.mixed.transpose();
  vec(g, layout_.at("head.b1")) = d_head_pre;
  const Eigen::VectorXd d_mixed = mat(p, layout_.at("head.W1")).transpose() * d_head_pre;

  // Output projection.
  mat(g, layout_.at("attn.Wo")) = d_mixed * c.pooled.transpose();
  const Eigen::VectorXd d_pooled = mat(p, layout_.at("attn.Wo")).transpose() * d_mixed;

  // Softmax attention, head by head.
  Eigen::MatrixXd d_keys = Eigen::MatrixXd::Zero(T, m);
  Eigen::MatrixXd d_values = Eigen::MatrixXd::Zero(T, m);
  Eigen::VectorXd d_qproj = Eigen::VectorXd::Zero(m);
  for (Eigen::Index h = 0; h < H; ++h) {
    const Eigen::VectorXd a = c.attn.row(h).transpose();
    const auto d_out = d_pooled.segment(h * hd, hd);
    d_values.middleCols(h * hd, hd) = a * d_out.transpose();
    const Eigen::VectorXd d_a = c.values.middleCols(h * hd, hd) * d_out;
    const Eigen::VectorXd d_s = a.array() * (d_a.array() - a.dot(d_a));
    d_qproj.segment(h * hd, hd) = scale * (c.keys.middleCols(h * hd, hd).transpose() * d_s);
    d_keys.middleCols(h * hd, hd) = scale * d_s * c.q_proj.segment(h * hd, hd).transpose();
  }
  mat(g, layout_.at("attn.Wq")) = d_qproj * c.qry_embed.transpose();
  mat(g, layout_.at("attn.Wk")) = d_keys.transpose() * c.ctx_embed;
  mat(g, layout_.at("attn.Wv")) = d_values.transpose() * c.ctx_embed;
  const Eigen::VectorXd d_qembed = mat(p, layout_.at("attn.Wq")).transpose() * d_qproj;
  const Eigen::MatrixXd d_embed = d_keys * mat(p, layout_.at("attn.Wk")) + d_values * mat(p, layout_.at("attn.Wv"));

  // Context MLP.
  mat(g, layout_.at("ctx.W2")) = d_embed.transpose() * c.ctx_hidden;
  vec(g, layout_.at("ctx.b2")) = d_embed.colwise().sum().transpose();
  const Eigen::MatrixXd d_ctx_pre =
      ((d_embed * mat(p, layout_.at("ctx.W2"))).array() * activate_grad(c.ctx_pre.array(), act)).matrix();
  mat(g, layout_.at("ctx.W1")) = d_ctx_pre.transpose() * c.tokens;
  vec(g, layout_.at("ctx.b1")) = d_ctx_pre.colwise().sum().transpose();

  // Query MLP.
  mat(g, layout_.at("qry.W2")) = d_qembed * c.qry_hidden.transpose();
  vec(g, layout_.at("qry.b2")) = d_qembed;
  const Eigen::VectorXd d_qry_pre =
      (mat(p, layout_.at("qry.W2")).transpose() * d_qembed).array() * activate_grad(c.qry_pre.array(), act);
  mat(g, layout_.at("qry.W1")) = d_qry_pre * c.query.transpose();
  vec(g, layout_.at("qry.b1")) = d_qry_pre;
}

Eigen::MatrixXd attention_rows(const ForwardCache& cache) { return cache.attn; }

void to_json(nlohmann::json& j, const StudentConfig& cfg) {
  j = nlohmann::json{{"d_model", cfg.d_model},     {"d_hidden", cfg.d_hidden},
                     {"n_heads", cfg.n_heads},     {"input_dim", cfg.input_dim},
                     {"activation", to_string(cfg.activation)}};
}

void from_json(const nlohmann::json& j, StudentConfig& cfg) {
  StudentConfig d;
  cfg.d_model = j.value("d_model", d.d_model);
  cfg.d_hidden = j.value("d_hidden", d.d_hidden);
  cfg.n_heads = j.value("n_heads", d.n_heads);
  cfg.input_dim = j.value("input_dim", d.input_dim);
  cfg.activation = parse_activation(j.value("activation", to_string(d.activation)));
  cfg.validate();
}

nlohmann::json checkpoint_json(const StudentModel& model) {
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& b : model.layout().blocks)
    layout.push_back({{"name", b.name}, {"offset", b.offset}, {"rows", b.rows}, {"cols", b.cols}});
  return nlohmann::json{{"config", model.config()},
                        {"layout", std::move(layout)},
                        {"params", std::vector<double>(model.params().begin(), model.params().end())}};
}

StudentModel model_from_checkpoint(const nlohmann::json& j) {
  return StudentModel(j.at("config").get<StudentConfig>(), j.at("params").get<std::vector<double>>());
}

}  // namespace mattn
