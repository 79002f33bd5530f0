#pragma once

// Feature extractor G, label classifier C and adversarial branch D, plus the
// optimizer schedule used to train them.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "abas/numeric.hpp"

namespace abas {

/// One point of the auxiliary-branch search space.
struct BranchConfig {
  double lambda = 1.0;     // weight of the adversarial term
  double dropout_p = 0.5;  // dropout on the hidden layers of D
  int n_fc_layers = 2;
  int fc_h = 1024;
  int fc_b = 512;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda))
      throw std::invalid_argument("BranchConfig: lambda must be finite and >= 0");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0))
      throw std::invalid_argument("BranchConfig: dropout_p must lie in [0, 1)");
    if (n_fc_layers < 1) throw std::invalid_argument("BranchConfig: n_fc_layers must be >= 1");
    if (fc_h < 1 || fc_b < 1) throw std::invalid_argument("BranchConfig: widths must be >= 1");
  }

  friend bool operator==(const BranchConfig&, const BranchConfig&) = default;
};

inline std::string to_string(const BranchConfig& c) {
  std::ostringstream os;
  os << "lambda=" << c.lambda << " dropout=" << c.dropout_p << " n_fc_layers=" << c.n_fc_layers
     << " fc_h=" << c.fc_h << " fc_b=" << c.fc_b;
  return os.str();
}

struct NetworkDims {
  std::size_t input_dim = 16;
  std::size_t hidden_dim = 64;   // G's inner width
  std::size_t feature_dim = 32;  // G's output width, consumed by C and D
  std::size_t n_classes = 3;
  std::size_t branch_out_dim = 1;

  friend bool operator==(const NetworkDims&, const NetworkDims&) = default;
};

struct Dense {
  Matrix weight;  // fan_in x fan_out
  Matrix bias;    // 1 x fan_out

  friend bool operator==(const Dense&, const Dense&) = default;
};

enum class ParamGroup { backbone, head };

struct Network {
  NetworkDims dims;
  BranchConfig config;
  std::vector<Dense> extractor;  // G
  Dense classifier;              // C
  std::vector<Dense> branch;     // D: bottleneck, hidden layers, output head
  double grl_lambda = 0.0;

  friend bool operator==(const Network&, const Network&) = default;

  /// Visits every parameter matrix in a fixed canonical order.
  template <typename Fn>
  void for_each_param(Fn&& fn) {
    for (auto& l : extractor) {
      fn(l.weight, ParamGroup::backbone);
      fn(l.bias, ParamGroup::backbone);
    }
    fn(classifier.weight, ParamGroup::backbone);
    fn(classifier.bias, ParamGroup::backbone);
    for (auto& l : branch) {
      fn(l.weight, ParamGroup::head);
      fn(l.bias, ParamGroup::head);
    }
  }
  template <typename Fn>
  void for_each_param(Fn&& fn) const {
    const_cast<Network*>(this)->for_each_param(
        [&](Matrix& m, ParamGroup g) { fn(static_cast<const Matrix&>(m), g); });
  }
};

inline Dense glorot_dense(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Dense d{Matrix(fan_in, fan_out), Matrix(1, fan_out)};
  for (double& w : d.weight.data()) w = u(rng);
  return d;
}

/// Shapes of D's weight matrices, bottleneck first.
inline std::vector<std::pair<std::size_t, std::size_t>> branch_shapes(const BranchConfig& cfg,
                                                                      std::size_t feature_dim,
                                                                      std::size_t out_dim) {
  std::vector<std::pair<std::size_t, std::size_t>> s;
  s.emplace_back(feature_dim, static_cast<std::size_t>(cfg.fc_b));
  std::size_t prev = static_cast<std::size_t>(cfg.fc_b);
  for (int i = 0; i < cfg.n_fc_layers; ++i) {
    s.emplace_back(prev, static_cast<std::size_t>(cfg.fc_h));
    prev = static_cast<std::size_t>(cfg.fc_h);
  }
  s.emplace_back(prev, out_dim);
  return s;
}

inline std::size_t branch_parameter_count(const BranchConfig& cfg, std::size_t feature_dim,
                                          std::size_t out_dim) {
  std::size_t n = 0;
  for (auto [in, out] : branch_shapes(cfg, feature_dim, out_dim)) n += in * out + out;
  return n;
}

inline Network build_network(const BranchConfig& cfg, const NetworkDims& dims, std::uint64_t seed) {
  cfg.validate();
  if (dims.input_dim == 0 || dims.hidden_dim == 0 || dims.feature_dim == 0 ||
      dims.n_classes == 0 || dims.branch_out_dim == 0) {
    throw std::invalid_argument("build_network: all dimensions must be positive");
  }
  Rng rng(seed);
  Network net;
  net.dims = dims;
  net.config = cfg;
  net.extractor.push_back(glorot_dense(dims.input_dim, dims.hidden_dim, rng));
  net.extractor.push_back(glorot_dense(dims.hidden_dim, dims.feature_dim, rng));
  net.classifier = glorot_dense(dims.feature_dim, dims.n_classes, rng);
  for (auto [in, out] : branch_shapes(cfg, dims.feature_dim, dims.branch_out_dim))
    net.branch.push_back(glorot_dense(in, out, rng));
  return net;
}

// ---------------------------------------------------------------------------
// Schedule

struct TrainSchedule {
  double mu0 = 0.001;
  double alpha = 10.0;
  double beta = 0.75;
  double gamma = 10.0;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::size_t batch_size = 36;
  double head_lr_multiplier = 10.0;
  double head_weight_decay = 0.001;
};

inline void check_progress(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("training progress must lie in [0, 1]");
}

/// mu_p = mu0 / (1 + alpha p)^beta
inline double lr_at(const TrainSchedule& s, double p) {
  check_progress(p);
  return s.mu0 / std::pow(1.0 + s.alpha * p, s.beta);
}

/// rho = 2 / (1 + exp(-gamma p)) - 1, ramping the reversal weight from 0 to 1.
inline double grl_rho_at(const TrainSchedule& s, double p) {
  check_progress(p);
  return 2.0 / (1.0 + std::exp(-s.gamma * p)) - 1.0;
}

/// Momentum buffers, one per parameter in canonical order.
struct SgdState {
  std::vector<Matrix> velocity;
};

/// One momentum-SGD step with L2 weight decay:
///   v <- momentum * v + (g + wd * w);   w <- w - lr * v
/// Head parameters (all of D) use head_lr_multiplier * lr and head_weight_decay.
inline void sgd_step(Network& net, const std::vector<Matrix>& grads, SgdState& state,
                     const TrainSchedule& s, double p) {
  const double lr = lr_at(s, p);
  std::size_t idx = 0;
  bool fresh = state.velocity.empty();
  net.for_each_param([&](Matrix& w, ParamGroup group) {
    if (idx >= grads.size() || !grads[idx].same_shape(w))
      throw std::invalid_argument("sgd_step: gradient shapes do not match parameters");
    if (fresh) state.velocity.emplace_back(w.rows(), w.cols());
    Matrix& v = state.velocity.at(idx);
    const Matrix& g = grads[idx];
    const bool head = group == ParamGroup::head;
    const double rate = head ? lr * s.head_lr_multiplier : lr;
    const double wd = head ? s.head_weight_decay : s.weight_decay;
    for (std::size_t i = 0; i < w.size(); ++i) {
      double& vi = v.data()[i];
      vi = s.momentum * vi + (g.data()[i] + wd * w.data()[i]);
      w.data()[i] -= rate * vi;
    }
    ++idx;
  });
  if (idx != grads.size()) throw std::invalid_argument("sgd_step: too many gradients");
}

// ---------------------------------------------------------------------------
// Tape binding and forward passes

struct NetworkVars {
  std::vector<Var> params;  // canonical order, weight then bias per layer
  std::size_t n_extractor = 0;
  std::size_t n_branch = 0;

  Var extractor_w(std::size_t i) const { return params[2 * i]; }
  Var extractor_b(std::size_t i) const { return params[2 * i + 1]; }
  Var classifier_w() const { return params[2 * n_extractor]; }
  Var classifier_b() const { return params[2 * n_extractor + 1]; }
  Var branch_w(std::size_t i) const { return params[2 * (n_extractor + 1 + i)]; }
  Var branch_b(std::size_t i) const { return params[2 * (n_extractor + 1 + i) + 1]; }
};

inline NetworkVars bind(Tape& tape, const Network& net) {
  NetworkVars v;
  v.n_extractor = net.extractor.size();
  v.n_branch = net.branch.size();
  net.for_each_param([&](const Matrix& m, ParamGroup) { v.params.push_back(tape.leaf(m)); });
  return v;
}

inline std::vector<Matrix> collect_grads(const Tape& tape, const NetworkVars& v) {
  std::vector<Matrix> g;
  g.reserve(v.params.size());
  for (Var p : v.params) g.push_back(tape.grad(p));
  return g;
}

inline Var dense(Tape& t, Var x, Var w, Var b) { return t.add_row(t.matmul(x, w), b); }

/// G(x): two ReLU layers.
inline Var extractor_forward(Tape& t, const NetworkVars& v, Var x) {
  Var h = x;
  for (std::size_t i = 0; i < v.n_extractor; ++i)
    h = t.relu(dense(t, h, v.extractor_w(i), v.extractor_b(i)));
  return h;
}

inline Var classifier_forward(Tape& t, const NetworkVars& v, Var features) {
  return dense(t, features, v.classifier_w(), v.classifier_b());
}

/// Training-time dropout; a null rng or zero rate disables it.
struct Dropout {
  double p = 0.0;
  Rng* rng = nullptr;
};

/// D(GRL_rho(features)): bottleneck with ReLU, hidden ReLU layers each followed
/// by dropout, then a linear output head (logits).
inline Var branch_forward(Tape& t, const NetworkVars& v, Var features, double rho,
                          Dropout dropout = {}) {
  Var h = t.grl(features, rho);
  const std::size_t last = v.n_branch - 1;
  for (std::size_t i = 0; i < last; ++i) {
    h = t.relu(dense(t, h, v.branch_w(i), v.branch_b(i)));
    if (i > 0 && dropout.rng && dropout.p > 0.0) {
      const Matrix& hv = t.value(h);
      Matrix mask(hv.rows(), hv.cols());
      std::bernoulli_distribution keep(1.0 - dropout.p);
      const double inv = 1.0 / (1.0 - dropout.p);
      for (double& m : mask.data()) m = keep(*dropout.rng) ? inv : 0.0;
      h = t.mul(h, t.constant(std::move(mask)));
    }
  }
  return dense(t, h, v.branch_w(last), v.branch_b(last));
}

// Tape-free evaluation (dropout off).

inline Matrix dense_eval(const Matrix& x, const Dense& d, bool relu) {
  Matrix out = matmul(x, d.weight);
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) {
      double& o = out(i, j);
      o += d.bias(0, j);
      if (relu && !(o > 0.0)) o = 0.0;
    }
  return out;
}

inline Matrix extract_features(const Network& net, const Matrix& x) {
  Matrix h = x;
  for (const auto& l : net.extractor) h = dense_eval(h, l, true);
  return h;
}

inline Matrix classify_probs(const Network& net, const Matrix& features) {
  return softmax_rows(dense_eval(features, net.classifier, false));
}

inline Matrix branch_logits(const Network& net, const Matrix& features) {
  Matrix h = features;
  for (std::size_t i = 0; i + 1 < net.branch.size(); ++i) h = dense_eval(h, net.branch[i], true);
  return dense_eval(h, net.branch.back(), false);
}

// ---------------------------------------------------------------------------
// Checkpoints: line-oriented text, hexadecimal floats for exact round trips.

inline constexpr const char* kCheckpointMagic = "abas-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace detail {
inline std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}
inline double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw std::runtime_error("checkpoint: bad number '" + s + "'");
  return v;
}
}  // namespace detail

inline void save_checkpoint(const Network& net, std::ostream& os) {
  const auto& d = net.dims;
  const auto& c = net.config;
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  os << "dims " << d.input_dim << ' ' << d.hidden_dim << ' ' << d.feature_dim << ' '
     << d.n_classes << ' ' << d.branch_out_dim << '\n';
  os << "config " << detail::hexfloat(c.lambda) << ' ' << detail::hexfloat(c.dropout_p) << ' '
     << c.n_fc_layers << ' ' << c.fc_h << ' ' << c.fc_b << '\n';
  os << "grl " << detail::hexfloat(net.grl_lambda) << '\n';
  net.for_each_param([&](const Matrix& m, ParamGroup) {
    os << "param " << m.rows() << ' ' << m.cols();
    for (double v : m.data()) os << ' ' << detail::hexfloat(v);
    os << '\n';
  });
  os << "end\n";
}

inline Network load_checkpoint(std::istream& is) {
  auto expect = [&](const std::string& want) {
    std::string tok;
    if (!(is >> tok) || tok != want)
      throw std::runtime_error("checkpoint: expected '" + want + "', got '" + tok + "'");
  };
  auto read_double = [&] {
    std::string tok;
    if (!(is >> tok)) throw std::runtime_error("checkpoint: truncated");
    return detail::parse_double(tok);
  };
  expect(kCheckpointMagic);
  int version = 0;
  is >> version;
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  NetworkDims d;
  expect("dims");
  is >> d.input_dim >> d.hidden_dim >> d.feature_dim >> d.n_classes >> d.branch_out_dim;
  BranchConfig c;
  expect("config");
  c.lambda = read_double();
  c.dropout_p = read_double();
  is >> c.n_fc_layers >> c.fc_h >> c.fc_b;
  if (!is) throw std::runtime_error("checkpoint: malformed header");
  Network net = build_network(c, d, 0);
  expect("grl");
  net.grl_lambda = read_double();
  net.for_each_param([&](Matrix& m, ParamGroup) {
    expect("param");
    std::size_t r = 0, cols = 0;
    is >> r >> cols;
    if (r != m.rows() || cols != m.cols()) throw std::runtime_error("checkpoint: shape mismatch");
    for (double& v : m.data()) v = read_double();
  });
  expect("end");
  return net;
}

}  // namespace abas
