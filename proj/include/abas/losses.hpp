#pragma once

// Source cross-entropy and the two adversarial objectives (DANN and ALDA),
// as plain value functions and as fused tape primitives for training.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "abas/network.hpp"
#include "abas/numeric.hpp"

namespace abas {

enum class AdvMode { dann, alda };
enum class DannForm { log, reciprocal };

inline const char* to_string(AdvMode m) { return m == AdvMode::dann ? "dann" : "alda"; }

inline AdvMode parse_adv_mode(const std::string& s) {
  if (s == "dann") return AdvMode::dann;
  if (s == "alda") return AdvMode::alda;
  throw std::invalid_argument("unknown adversarial mode '" + s + "' (expected dann or alda)");
}

struct Batch {
  Matrix source_x;
  std::vector<int> source_y;
  Matrix target_x;
};

namespace detail {
inline constexpr double kProbFloor = 1e-12;

inline void check_labels(std::span<const int> labels, std::size_t rows, std::size_t k) {
  if (labels.size() != rows) throw std::invalid_argument("label count does not match rows");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw std::invalid_argument("label " + std::to_string(y) + " outside 0.." +
                                  std::to_string(k - 1));
}

inline double clamped_log(double p) { return std::log(std::clamp(p, kProbFloor, 1.0)); }
}  // namespace detail

/// Mean negative log-likelihood of the labelled class.
inline double cross_entropy(const Matrix& probs, std::span<const int> labels) {
  detail::check_labels(labels, probs.rows(), probs.cols());
  if (labels.empty()) throw std::invalid_argument("cross_entropy: empty batch");
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) s -= detail::clamped_log(probs(i, labels[i]));
  return s / static_cast<double>(labels.size());
}

/// Mean binary cross-entropy of sigmoid(logit) against the domain label
/// (1 = source, 0 = target).
inline double dann_loss(const Matrix& logits, std::span<const int> domain) {
  if (logits.cols() != 1 || logits.rows() != domain.size())
    throw std::invalid_argument("dann_loss: expected one logit per sample");
  double s = 0.0;
  for (std::size_t i = 0; i < domain.size(); ++i) {
    const double z = logits(i, 0);
    // -log sigmoid(z) = softplus(-z), -log(1 - sigmoid(z)) = softplus(z)
    s += domain[i] ? softplus(-z) : softplus(z);
  }
  return s / static_cast<double>(domain.size());
}

/// Literal reciprocal form d / D + (1 - d) / (1 - D), D = sigmoid(logit).
inline double dann_loss_reciprocal(const Matrix& logits, std::span<const int> domain) {
  if (logits.cols() != 1 || logits.rows() != domain.size())
    throw std::invalid_argument("dann_loss_reciprocal: expected one logit per sample");
  double s = 0.0;
  for (std::size_t i = 0; i < domain.size(); ++i) {
    const double d = sigmoid(logits(i, 0));
    s += domain[i] ? 1.0 / std::max(d, detail::kProbFloor)
                   : 1.0 / std::max(1.0 - d, detail::kProbFloor);
  }
  return s / static_cast<double>(domain.size());
}

/// Uniform mass over every class except `predicted`.
inline std::vector<double> opposite_distribution(int predicted, std::size_t k) {
  if (k < 2) throw std::invalid_argument("opposite_distribution: need at least 2 classes");
  std::vector<double> u(k, 1.0 / static_cast<double>(k - 1));
  u.at(static_cast<std::size_t>(predicted)) = 0.0;
  return u;
}

/// Column-stochastic confusion matrix built from per-class confidences xi:
/// M(j, j) = xi_j and M(i, j) = (1 - xi_j) / (K - 1) for i != j.
inline Matrix confusion_matrix(std::span<const double> xi) {
  const std::size_t k = xi.size();
  if (k < 2) throw std::invalid_argument("confusion_matrix: need at least 2 classes");
  Matrix m(k, k);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < k; ++i)
      m(i, j) = i == j ? xi[j] : (1.0 - xi[j]) / static_cast<double>(k - 1);
  return m;
}

/// Corrected pseudo-label vector c = M(xi) * onehot(predicted).
inline std::vector<double> corrected_vector(std::span<const double> xi, int predicted) {
  const std::size_t k = xi.size();
  if (k < 2) throw std::invalid_argument("corrected_vector: need at least 2 classes");
  const double x = xi[static_cast<std::size_t>(predicted)];
  std::vector<double> c(k, (1.0 - x) / static_cast<double>(k - 1));
  c[static_cast<std::size_t>(predicted)] = x;
  return c;
}

namespace detail {
// Mean elementwise BCE of the corrected vectors against per-row targets.
inline double corrected_bce(const Matrix& logits, std::span<const int> pseudo,
                            const std::vector<std::vector<double>>& targets) {
  const std::size_t k = logits.cols();
  double s = 0.0;
  std::vector<double> xi(k);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    for (std::size_t j = 0; j < k; ++j) xi[j] = sigmoid(logits(i, j));
    const auto c = corrected_vector(xi, pseudo[i]);
    for (std::size_t j = 0; j < k; ++j) {
      const double t = targets[i][j];
      s -= t * clamped_log(c[j]) + (1.0 - t) * clamped_log(1.0 - c[j]);
    }
  }
  return s / static_cast<double>(logits.rows() * k);
}

inline std::vector<std::vector<double>> onehot_targets(std::span<const int> y, std::size_t k) {
  std::vector<std::vector<double>> t(y.size(), std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < y.size(); ++i) t[i][static_cast<std::size_t>(y[i])] = 1.0;
  return t;
}

inline std::vector<std::vector<double>> opposite_targets(std::span<const int> y, std::size_t k) {
  std::vector<std::vector<double>> t;
  t.reserve(y.size());
  for (int v : y) t.push_back(opposite_distribution(v, k));
  return t;
}
}  // namespace detail

/// BCE(c(x_s), y_s) + BCE(c(x_t), u(yhat_t)), where c is built from D's
/// sigmoid outputs and the classifier's pseudo-labels.
inline double alda_loss(const Matrix& source_logits, const Matrix& target_logits,
                        std::span<const int> source_y, std::span<const int> source_pseudo,
                        std::span<const int> target_pseudo) {
  const std::size_t k = source_logits.cols();
  if (k < 2 || target_logits.cols() != k)
    throw std::invalid_argument("alda_loss: branch output must have K >= 2 columns");
  detail::check_labels(source_y, source_logits.rows(), k);
  detail::check_labels(source_pseudo, source_logits.rows(), k);
  detail::check_labels(target_pseudo, target_logits.rows(), k);
  return detail::corrected_bce(source_logits, source_pseudo, detail::onehot_targets(source_y, k)) +
         detail::corrected_bce(target_logits, target_pseudo,
                               detail::opposite_targets(target_pseudo, k));
}

// ---------------------------------------------------------------------------
// Tape primitives

inline Var tape_cross_entropy_logits(Tape& t, Var logits, std::vector<int> labels) {
  const Matrix& z = t.value(logits);
  detail::check_labels(labels, z.rows(), z.cols());
  const Matrix lp = log_softmax_rows(z);
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) s -= lp(i, labels[i]);
  const double n = static_cast<double>(labels.size());
  return t.custom(Matrix(1, 1, s / n), t.needs(logits),
                  [logits, labels = std::move(labels), lp, n](Tape& tp, const Matrix& g) {
                    Matrix gz(lp.rows(), lp.cols());
                    for (std::size_t i = 0; i < lp.rows(); ++i)
                      for (std::size_t j = 0; j < lp.cols(); ++j)
                        gz(i, j) = g(0, 0) * (std::exp(lp(i, j)) -
                                              (static_cast<int>(j) == labels[i] ? 1.0 : 0.0)) / n;
                    tp.accumulate(logits, gz);
                  });
}

inline Var tape_dann_loss(Tape& t, Var logits, std::vector<int> domain, DannForm form) {
  const Matrix& z = t.value(logits);
  const double value = form == DannForm::log ? dann_loss(z, domain) : dann_loss_reciprocal(z, domain);
  const double n = static_cast<double>(domain.size());
  return t.custom(Matrix(1, 1, value), t.needs(logits),
                  [logits, domain = std::move(domain), form, n](Tape& tp, const Matrix& g) {
                    const Matrix& zv = tp.value(logits);
                    Matrix gz(zv.rows(), 1);
                    for (std::size_t i = 0; i < zv.rows(); ++i) {
                      const double s = sigmoid(zv(i, 0));
                      double d;
                      if (form == DannForm::log) {
                        d = s - domain[i];
                      } else if (domain[i]) {
                        d = s > detail::kProbFloor ? -(1.0 - s) / s : 0.0;  // d(1/s)/dz
                      } else {
                        d = 1.0 - s > detail::kProbFloor ? s / (1.0 - s) : 0.0;
                      }
                      gz(i, 0) = g(0, 0) * d / n;
                    }
                    tp.accumulate(logits, gz);
                  });
}

namespace detail {
inline Var tape_corrected_bce(Tape& t, Var logits, std::vector<int> pseudo,
                              std::vector<std::vector<double>> targets) {
  const Matrix& z = t.value(logits);
  const double value = corrected_bce(z, pseudo, targets);
  return t.custom(
      Matrix(1, 1, value), t.needs(logits),
      [logits, pseudo = std::move(pseudo), targets = std::move(targets)](Tape& tp,
                                                                         const Matrix& g) {
        const Matrix& zv = tp.value(logits);
        const std::size_t k = zv.cols();
        const double norm = static_cast<double>(zv.rows() * k);
        const double off = 1.0 / static_cast<double>(k - 1);
        Matrix gz(zv.rows(), k);
        for (std::size_t i = 0; i < zv.rows(); ++i) {
          const std::size_t j = static_cast<std::size_t>(pseudo[i]);
          const double xi = sigmoid(zv(i, j));
          // dL/dxi summed over the corrected vector entries.
          double dxi = 0.0;
          for (std::size_t m = 0; m < k; ++m) {
            const double c = m == j ? xi : (1.0 - xi) * off;
            const double tm = targets[i][m];
            double dc = 0.0;
            if (c > kProbFloor && c < 1.0 - kProbFloor) dc = -(tm / c - (1.0 - tm) / (1.0 - c));
            dxi += dc * (m == j ? 1.0 : -off);
          }
          gz(i, j) = g(0, 0) * dxi * xi * (1.0 - xi) / norm;
        }
        tp.accumulate(logits, gz);
      });
}
}  // namespace detail

inline Var tape_alda_loss(Tape& t, Var source_logits, Var target_logits,
                          std::span<const int> source_y, std::vector<int> source_pseudo,
                          std::vector<int> target_pseudo) {
  const std::size_t k = t.value(source_logits).cols();
  if (k < 2) throw std::invalid_argument("alda_loss: branch output must have K >= 2 columns");
  detail::check_labels(source_y, t.value(source_logits).rows(), k);
  auto src_t = detail::onehot_targets(source_y, k);
  auto tgt_t = detail::opposite_targets(target_pseudo, k);
  Var a = detail::tape_corrected_bce(t, source_logits, std::move(source_pseudo), std::move(src_t));
  Var b = detail::tape_corrected_bce(t, target_logits, std::move(target_pseudo), std::move(tgt_t));
  return t.add(a, b);
}

struct LossTerms {
  Var total;
  Var ce;
  Var adv;
};

struct LossOptions {
  AdvMode mode = AdvMode::dann;
  DannForm dann_form = DannForm::log;
  double lambda = 1.0;
  double rho = 0.0;
  Dropout dropout;
};

/// CE(C(G(x_s)), y_s) + lambda * L_adv(D(GRL_rho(G(x_s u x_t)))).
inline LossTerms build_total_loss(Tape& t, const NetworkVars& v, const Batch& batch,
                                  const LossOptions& opt) {
  const std::size_t ns = batch.source_x.rows();
  const std::size_t nt = batch.target_x.rows();
  if (ns == 0 || nt == 0) throw std::invalid_argument("total_loss: empty source or target batch");
  Var x = t.concat_rows(t.constant(batch.source_x), t.constant(batch.target_x));
  Var feats = extractor_forward(t, v, x);
  Var logits = classifier_forward(t, v, feats);
  Var src_logits = t.slice_rows(logits, 0, ns);
  Var ce = tape_cross_entropy_logits(t, src_logits, batch.source_y);

  Var d_out = branch_forward(t, v, feats, opt.rho, opt.dropout);
  Var adv;
  if (opt.mode == AdvMode::dann) {
    std::vector<int> domain(ns + nt, 0);
    std::fill(domain.begin(), domain.begin() + static_cast<std::ptrdiff_t>(ns), 1);
    adv = tape_dann_loss(t, d_out, std::move(domain), opt.dann_form);
  } else {
    const std::vector<int> pred = argmax_rows(t.value(logits));
    std::vector<int> src_pseudo(pred.begin(), pred.begin() + static_cast<std::ptrdiff_t>(ns));
    std::vector<int> tgt_pseudo(pred.begin() + static_cast<std::ptrdiff_t>(ns), pred.end());
    adv = tape_alda_loss(t, t.slice_rows(d_out, 0, ns), t.slice_rows(d_out, ns, ns + nt),
                         batch.source_y, std::move(src_pseudo), std::move(tgt_pseudo));
  }
  Var total = t.add(ce, t.scale(adv, opt.lambda));
  return {total, ce, adv};
}

/// Scalar value of the joint objective at progress p (dropout off).
inline double total_loss(const Batch& batch, const Network& net, const BranchConfig& cfg,
                         AdvMode mode, double p, const TrainSchedule& schedule,
                         DannForm form = DannForm::log) {
  Tape t;
  NetworkVars v = bind(t, net);
  LossOptions opt;
  opt.mode = mode;
  opt.dann_form = form;
  opt.lambda = cfg.lambda;
  opt.rho = grl_rho_at(schedule, p);
  return t.value(build_total_loss(t, v, batch, opt).total)(0, 0);
}

}  // namespace abas
