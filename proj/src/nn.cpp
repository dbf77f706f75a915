#include "offrl/nn.hpp"

#include <atomic>
#include <cmath>

#include "json.hpp"

namespace offrl::nn {
namespace {

std::atomic<std::uint64_t> next_tree_id{1};

constexpr double kHalfLog2Pi = 0.91893853320467274178;
constexpr double kLn2 = 0.69314718055994530942;

std::string layer_key(std::size_t l, const char* what) {
  return "layer" + std::to_string(l) + "." + what;
}

// log(1 - tanh(u)^2), stable for large |u|.
double log1m_tanh2(double u) {
  const double a = std::abs(u);
  return 2.0 * (kLn2 - a - std::log1p(std::exp(-2.0 * a)));
}

double clamp_inside_unit(double a) {
  static const double hi = std::nextafter(1.0, 0.0);
  return std::clamp(a, -hi, hi);
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamTree

ParamTree::ParamTree() : id_(next_tree_id++) {}

ParamTree::ParamTree(const ParamTree& other)
    : leaves_(other.leaves_), id_(next_tree_id++), version_(0) {}

ParamTree& ParamTree::operator=(const ParamTree& other) {
  if (this != &other) {
    leaves_ = other.leaves_;
    touch();
  }
  return *this;
}

void ParamTree::add(std::string name, Matrix value) {
  if (contains(name)) throw ConfigError("duplicate parameter leaf " + name);
  leaves_.push_back({std::move(name), std::move(value)});
  touch();
}

std::size_t ParamTree::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < leaves_.size(); ++i) {
    if (leaves_[i].name == name) return i;
  }
  throw ConfigError("no parameter leaf named " + name);
}

bool ParamTree::contains(const std::string& name) const {
  for (const auto& l : leaves_) {
    if (l.name == name) return true;
  }
  return false;
}

Matrix& ParamTree::operator[](const std::string& name) { return leaves_[index_of(name)].value; }
const Matrix& ParamTree::operator[](const std::string& name) const {
  return leaves_[index_of(name)].value;
}

ParamTree ParamTree::zeros_like() const {
  ParamTree out;
  for (const auto& l : leaves_) out.add(l.name, Matrix::Zero(l.value.rows(), l.value.cols()));
  return out;
}

bool ParamTree::same_shape(const ParamTree& other) const {
  if (leaves_.size() != other.leaves_.size()) return false;
  for (std::size_t i = 0; i < leaves_.size(); ++i) {
    if (leaves_[i].name != other.leaves_[i].name ||
        leaves_[i].value.rows() != other.leaves_[i].value.rows() ||
        leaves_[i].value.cols() != other.leaves_[i].value.cols()) {
      return false;
    }
  }
  return true;
}

bool ParamTree::all_finite() const {
  for (const auto& l : leaves_) {
    if (!l.value.allFinite()) return false;
  }
  return true;
}

std::size_t ParamTree::num_scalars() const {
  std::size_t n = 0;
  for (const auto& l : leaves_) n += static_cast<std::size_t>(l.value.size());
  return n;
}

void ParamTree::touch() noexcept { ++version_; }

void axpy(ParamTree& a, const ParamTree& b, double scale) {
  if (!a.same_shape(b)) throw ConfigError("axpy: parameter trees differ in shape");
  for (std::size_t i = 0; i < a.size(); ++i) a.at(i) += scale * b.at(i);
  a.touch();
}

// ---------------------------------------------------------------------------
// MLP

void MLPConfig::validate() const {
  if (input_dim == 0 || output_dim == 0) throw ConfigError("MLP dims must be positive");
  if (hidden_dims.empty()) throw ConfigError("MLP needs at least one hidden layer");
  for (auto h : hidden_dims) {
    if (h == 0) throw ConfigError("hidden layer width must be positive");
  }
}

ParamTree init_mlp(const MLPConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamTree p;
  std::size_t fan_in = cfg.input_dim;
  for (std::size_t l = 0; l < cfg.num_layers(); ++l) {
    const bool last = l + 1 == cfg.num_layers();
    const std::size_t fan_out = last ? cfg.output_dim : cfg.hidden_dims[l];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix w(fan_out, fan_in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
    Matrix b(fan_out, 1);
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = u(rng);
    p.add(layer_key(l, "weight"), std::move(w));
    p.add(layer_key(l, "bias"), std::move(b));
    if (!last && cfg.layernorm) {
      p.add(layer_key(l, "ln_gain"), Matrix::Ones(fan_out, 1));
      p.add(layer_key(l, "ln_bias"), Matrix::Zero(fan_out, 1));
    }
    fan_in = fan_out;
  }
  return p;
}

Matrix forward(const ParamTree& params, const MLPConfig& cfg, const Matrix& x, Tape* tape) {
  if (static_cast<std::size_t>(x.rows()) != cfg.input_dim) {
    throw ConfigError("forward: input has " + std::to_string(x.rows()) + " features, expected " +
                      std::to_string(cfg.input_dim));
  }
  if (tape) {
    tape->params = &params;
    tape->params_id = params.id();
    tape->params_version = params.version();
    tape->config = cfg;
    tape->layers.clear();
    tape->layers.reserve(cfg.num_layers());
  }
  Matrix h = x;
  for (std::size_t l = 0; l < cfg.num_layers(); ++l) {
    const bool last = l + 1 == cfg.num_layers();
    const Matrix& w = params[layer_key(l, "weight")];
    const Matrix& b = params[layer_key(l, "bias")];
    if (w.cols() != h.rows()) throw ConfigError("forward: parameter shapes do not match config");
    Matrix z = w * h;
    z.colwise() += b.col(0);
    LayerRecord rec;
    if (tape) rec.input = h;
    if (last) {
      h = std::move(z);
      if (tape) tape->layers.push_back(std::move(rec));
      break;
    }
    Matrix pre;
    if (cfg.layernorm) {
      const double n = static_cast<double>(z.rows());
      const RowVector mean = z.colwise().sum() / n;
      Matrix centered = z.rowwise() - mean;
      const RowVector var = centered.array().square().colwise().sum() / n;
      const RowVector inv_std = (var.array() + cfg.layernorm_eps).rsqrt();
      Matrix normalized = centered.array().rowwise() * inv_std.array();
      const Matrix& g = params[layer_key(l, "ln_gain")];
      const Matrix& beta = params[layer_key(l, "ln_bias")];
      pre = normalized.array().colwise() * g.col(0).array();
      pre.colwise() += beta.col(0);
      if (tape) {
        rec.pre_norm = std::move(z);
        rec.normalized = std::move(normalized);
        rec.inv_std = inv_std;
      }
    } else {
      pre = std::move(z);
    }
    h = pre.cwiseMax(0.0);
    if (tape) {
      rec.pre_activation = std::move(pre);
      tape->layers.push_back(std::move(rec));
    }
  }
  if (tape) tape->output = h;
  return h;
}

Vector forward(const ParamTree& params, const MLPConfig& cfg, const Vector& x, Tape* tape) {
  Matrix in = x;
  return forward(params, cfg, in, tape).col(0);
}

Gradients backward(const Tape& tape, const Matrix& upstream) {
  if (!tape.params || tape.layers.empty()) throw StaleTapeError("backward on an empty tape");
  const ParamTree& params = *tape.params;
  if (params.id() != tape.params_id || params.version() != tape.params_version) {
    throw StaleTapeError("tape replayed after its parameters were modified");
  }
  if (upstream.rows() != tape.output.rows() || upstream.cols() != tape.output.cols()) {
    throw ConfigError("backward: upstream gradient shape does not match the output");
  }
  const MLPConfig& cfg = tape.config;
  Gradients out{params.zeros_like(), Matrix()};
  Matrix d = upstream;
  for (std::size_t l = cfg.num_layers(); l-- > 0;) {
    const bool last = l + 1 == cfg.num_layers();
    const LayerRecord& rec = tape.layers[l];
    Matrix dz;
    if (last) {
      dz = std::move(d);
    } else {
      Matrix dpre = (rec.pre_activation.array() > 0.0).select(d, 0.0);
      if (cfg.layernorm) {
        const Matrix& g = params[layer_key(l, "ln_gain")];
        out.params[layer_key(l, "ln_gain")] =
            (dpre.array() * rec.normalized.array()).rowwise().sum().matrix();
        out.params[layer_key(l, "ln_bias")] = dpre.rowwise().sum();
        const Matrix dxhat = dpre.array().colwise() * g.col(0).array();
        const double n = static_cast<double>(dxhat.rows());
        const RowVector mean_d = dxhat.colwise().sum() / n;
        const RowVector mean_dx = (dxhat.array() * rec.normalized.array()).colwise().sum() / n;
        Matrix t = (dxhat.rowwise() - mean_d);
        t -= (rec.normalized.array().rowwise() * mean_dx.array()).matrix();
        dz = t.array().rowwise() * rec.inv_std.array();
      } else {
        dz = std::move(dpre);
      }
    }
    const Matrix& w = params[layer_key(l, "weight")];
    out.params[layer_key(l, "weight")] = dz * rec.input.transpose();
    out.params[layer_key(l, "bias")] = dz.rowwise().sum();
    d = w.transpose() * dz;
  }
  out.input = std::move(d);
  return out;
}

Vector layernorm(const Vector& x, const Vector& gain, const Vector& bias, double eps) {
  if (x.size() == 0) throw ConfigError("layernorm of an empty vector");
  if (gain.size() != x.size() || bias.size() != x.size()) {
    throw ConfigError("layernorm gain/bias size mismatch");
  }
  const double mean = x.mean();
  const Vector centered = x.array() - mean;
  const double var = centered.squaredNorm() / static_cast<double>(x.size());
  const double denom = std::sqrt(var + eps);
  if (denom == 0.0) return bias;
  return (centered / denom).cwiseProduct(gain) + bias;
}

// ---------------------------------------------------------------------------
// Optimizers

void adam_step(OptimizerState& state, ParamTree& params, const ParamTree& grads) {
  if (!params.same_shape(grads)) throw ConfigError("adam: gradient tree does not match params");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads.at(i).allFinite()) {
      throw NonFiniteError(grads.name(i), "non-finite gradient in leaf " + grads.name(i));
    }
  }
  if (!state.first_moment) {
    state.first_moment = params.zeros_like();
    state.second_moment = params.zeros_like();
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& m = state.first_moment->at(i);
    Matrix& v = state.second_moment->at(i);
    const Matrix& g = grads.at(i);
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
    params.at(i).array() -=
        state.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + state.eps);
  }
  params.touch();
}

void polyak_update(ParamTree& target, const ParamTree& online, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
  if (!target.same_shape(online)) throw ConfigError("polyak: target and online differ in shape");
  for (std::size_t i = 0; i < target.size(); ++i) {
    target.at(i) = tau * target.at(i) + (1.0 - tau) * online.at(i);
  }
  target.touch();
}

// ---------------------------------------------------------------------------
// Squashed Gaussian

SquashedSample squash_with_noise(const Matrix& head_out, const Matrix& noise) {
  if (head_out.rows() % 2 != 0) throw ConfigError("gaussian head needs 2 * act_dim outputs");
  const Eigen::Index d = head_out.rows() / 2;
  if (noise.rows() != d || noise.cols() != head_out.cols()) {
    throw ConfigError("noise shape does not match the gaussian head");
  }
  SquashedSample s;
  const Matrix raw = head_out.bottomRows(d);
  const Matrix log_std = raw.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  s.log_std_live = ((raw.array() >= kLogStdMin) && (raw.array() <= kLogStdMax)).cast<double>();
  s.std = log_std.array().exp();
  s.noise = noise;
  const Matrix u = head_out.topRows(d).array() + s.std.array() * noise.array();
  s.action = u.unaryExpr([](double x) { return clamp_inside_unit(std::tanh(x)); });
  s.log_prob = RowVector::Zero(head_out.cols());
  for (Eigen::Index c = 0; c < head_out.cols(); ++c) {
    double lp = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) {
      lp += -0.5 * noise(i, c) * noise(i, c) - log_std(i, c) - kHalfLog2Pi - log1m_tanh2(u(i, c));
    }
    s.log_prob(c) = lp;
  }
  return s;
}

SquashedSample sample_squashed(const Matrix& head_out, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix noise(head_out.rows() / 2, head_out.cols());
  for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = normal(rng);
  return squash_with_noise(head_out, noise);
}

Matrix squashed_backward(const SquashedSample& s, const Matrix& d_action,
                         const RowVector& d_log_prob) {
  const Eigen::Index d = s.action.rows();
  const Eigen::Index b = s.action.cols();
  Matrix grad(2 * d, b);
  for (Eigen::Index c = 0; c < b; ++c) {
    for (Eigen::Index i = 0; i < d; ++i) {
      const double a = s.action(i, c);
      const double dadu = 1.0 - a * a;
      const double du = d_action(i, c) * dadu + d_log_prob(c) * 2.0 * a;
      const double sn = s.std(i, c) * s.noise(i, c);
      grad(i, c) = du;
      grad(d + i, c) = s.log_std_live(i, c) * (du * sn - d_log_prob(c));
    }
  }
  return grad;
}

ActionLogProb squashed_log_prob(const Matrix& head_out, const Matrix& actions) {
  const Eigen::Index d = head_out.rows() / 2;
  if (actions.rows() != d || actions.cols() != head_out.cols()) {
    throw ConfigError("action shape does not match the gaussian head");
  }
  ActionLogProb out;
  out.log_prob = RowVector::Zero(head_out.cols());
  out.grad = Matrix::Zero(2 * d, head_out.cols());
  constexpr double kEdge = 1.0 - 1e-6;
  for (Eigen::Index c = 0; c < head_out.cols(); ++c) {
    double lp = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) {
      const double a = std::clamp(actions(i, c), -kEdge, kEdge);
      const double u = std::atanh(a);
      const double raw = head_out(d + i, c);
      const double ls = std::clamp(raw, kLogStdMin, kLogStdMax);
      const double sd = std::exp(ls);
      const double eps = (u - head_out(i, c)) / sd;
      lp += -0.5 * eps * eps - ls - kHalfLog2Pi - std::log1p(-a * a);
      out.grad(i, c) = eps / sd;
      out.grad(d + i, c) = (raw >= kLogStdMin && raw <= kLogStdMax) ? eps * eps - 1.0 : 0.0;
    }
    out.log_prob(c) = lp;
  }
  return out;
}

Matrix squashed_mean_action(const Matrix& head_out) {
  const Eigen::Index d = head_out.rows() / 2;
  return head_out.topRows(d).unaryExpr([](double x) { return clamp_inside_unit(std::tanh(x)); });
}

std::pair<Vector, double> sample_squashed_gaussian(const GaussianPolicyHead& head,
                                                   std::uint64_t seed) {
  if (head.mean.size() != head.log_std.size() || head.mean.size() == 0) {
    throw ConfigError("gaussian head mean and log_std must have equal non-zero size");
  }
  Matrix out(2 * head.mean.size(), 1);
  out.col(0) << head.mean, head.log_std;
  Rng rng(seed);
  const SquashedSample s = sample_squashed(out, rng);
  return {s.action.col(0), s.log_prob(0)};
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

using nlohmann::json;

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j[r].size()) != cols) throw ConfigError("ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

json tree_to_json(const ParamTree& t) {
  json j = json::object();
  for (const auto& leaf : t) j[leaf.name] = matrix_to_json(leaf.value);
  return j;
}

ParamTree tree_from_json(const json& j, const ParamTree& like) {
  ParamTree out;
  for (const auto& leaf : like) {
    if (!j.contains(leaf.name)) throw ConfigError("checkpoint is missing leaf " + leaf.name);
    Matrix m = matrix_from_json(j.at(leaf.name));
    if (m.rows() != leaf.value.rows() || m.cols() != leaf.value.cols()) {
      throw ConfigError("checkpoint leaf " + leaf.name + " has the wrong shape");
    }
    out.add(leaf.name, std::move(m));
  }
  return out;
}

}  // namespace

std::string checkpoint_to_json(const ParamTree& params, const MLPConfig& cfg,
                               const OptimizerState* opt) {
  json j;
  j["config"] = {{"input_dim", cfg.input_dim},
                 {"hidden_dims", cfg.hidden_dims},
                 {"output_dim", cfg.output_dim},
                 {"layernorm", cfg.layernorm},
                 {"layernorm_eps", cfg.layernorm_eps}};
  j["leaves"] = tree_to_json(params);
  if (opt) {
    json o = {{"learning_rate", opt->learning_rate},
              {"beta1", opt->beta1},
              {"beta2", opt->beta2},
              {"eps", opt->eps},
              {"step", opt->step}};
    if (opt->first_moment) {
      o["first_moment"] = tree_to_json(*opt->first_moment);
      o["second_moment"] = tree_to_json(*opt->second_moment);
    }
    j["optimizer"] = std::move(o);
  }
  return j.dump();
}

void checkpoint_from_json(const std::string& text, ParamTree& params, MLPConfig& cfg,
                          OptimizerState* opt) {
  json j;
  try {
    j = json::parse(text);
    const auto& c = j.at("config");
    cfg.input_dim = c.at("input_dim").get<std::size_t>();
    cfg.hidden_dims = c.at("hidden_dims").get<std::vector<std::size_t>>();
    cfg.output_dim = c.at("output_dim").get<std::size_t>();
    cfg.layernorm = c.at("layernorm").get<bool>();
    cfg.layernorm_eps = c.value("layernorm_eps", 1e-5);
    cfg.validate();
    Rng rng(0);
    const ParamTree shape = init_mlp(cfg, rng);
    params = tree_from_json(j.at("leaves"), shape);
    if (opt && j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      opt->learning_rate = o.at("learning_rate").get<double>();
      opt->beta1 = o.at("beta1").get<double>();
      opt->beta2 = o.at("beta2").get<double>();
      opt->eps = o.at("eps").get<double>();
      opt->step = o.at("step").get<std::uint64_t>();
      if (o.contains("first_moment")) {
        opt->first_moment = tree_from_json(o["first_moment"], shape);
        opt->second_moment = tree_from_json(o["second_moment"], shape);
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid checkpoint: ") + e.what());
  }
}

}  // namespace offrl::nn
