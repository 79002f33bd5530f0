#pragma once

// Reproducible labelled-source / unlabelled-target pairs of Gaussian class
// clusters. The target is drawn from the source class-conditionals and then
// rotated, translated and re-weighted by a shift descriptor.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <memory>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "abas/numeric.hpp"

namespace abas {

struct ShiftSpec {
  double rotation_deg = 0.0;  // applied in every consecutive coordinate plane
  double translation = 0.0;   // length of a seeded random offset
  double prior_skew = 0.0;    // 0 = uniform target priors, towards 1 = favour low classes
};

struct PairSpec {
  ShiftSpec shift;
  std::size_t n_classes = 3;
  std::size_t n_source = 600;
  std::size_t n_target = 600;
  std::size_t dims = 16;
  double cluster_std = 1.0;
  double class_sep = 3.0;
  std::uint64_t seed = 0;
};

/// Target labels kept out of reach of training and selection code: the only
/// accessor is reveal(), and every call is counted process-wide.
class SealedLabels {
 public:
  SealedLabels() = default;
  explicit SealedLabels(std::vector<int> labels) : labels_(std::move(labels)) {}

  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }

  /// Evaluation and report code only.
  const std::vector<int>& reveal() const {
    read_counter().fetch_add(1, std::memory_order_relaxed);
    return labels_;
  }

  static std::size_t total_reads() { return read_counter().load(std::memory_order_relaxed); }

 private:
  static std::atomic<std::size_t>& read_counter() {
    static std::atomic<std::size_t> n{0};
    return n;
  }
  std::vector<int> labels_;
};

struct DomainPair {
  Matrix source_x;
  std::vector<int> source_y;
  Matrix target_x;
  SealedLabels hidden_target_labels;
  std::size_t n_classes = 0;
  ShiftSpec shift;

  bool has_target_labels() const noexcept { return !hidden_target_labels.empty(); }
  std::size_t dims() const noexcept { return source_x.cols(); }
};

/// Target class priors proportional to 1 - skew * k / (K - 1).
inline std::vector<double> target_priors(std::size_t k, double skew) {
  std::vector<double> p(k);
  double s = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    p[c] = 1.0 - skew * static_cast<double>(c) / static_cast<double>(k - 1);
    s += p[c];
  }
  for (double& v : p) v /= s;
  return p;
}

/// Class means: the first two coordinates lie on a circle of radius class_sep,
/// the rest are seeded Gaussian offsets of scale class_sep / 2.
inline Matrix class_means(const PairSpec& spec, Rng& rng) {
  Matrix m(spec.n_classes, spec.dims);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (std::size_t k = 0; k < spec.n_classes; ++k) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(spec.n_classes);
    m(k, 0) = spec.class_sep * std::cos(a);
    m(k, 1) = spec.class_sep * std::sin(a);
    for (std::size_t j = 2; j < spec.dims; ++j) m(k, j) = 0.5 * spec.class_sep * n01(rng);
  }
  return m;
}

/// Rotates x in place in the planes (0,1), (2,3), ... by `deg` degrees.
inline void rotate_planes(Matrix& x, double deg) {
  const double a = deg * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j + 1 < x.cols(); j += 2) {
      const double u = x(i, j), v = x(i, j + 1);
      x(i, j) = c * u - s * v;
      x(i, j + 1) = s * u + c * v;
    }
}

inline DomainPair make_pair(const PairSpec& spec) {
  if (spec.n_classes < 2) throw std::invalid_argument("make_pair: need at least 2 classes");
  if (spec.dims < 2) throw std::invalid_argument("make_pair: need at least 2 dimensions");
  if (spec.n_source == 0 || spec.n_target == 0) throw std::invalid_argument("make_pair: empty domain");
  if (!(spec.cluster_std > 0.0) || !std::isfinite(spec.cluster_std))
    throw std::invalid_argument("make_pair: cluster_std must be positive (zero variance is degenerate)");
  if (!(spec.shift.prior_skew >= 0.0 && spec.shift.prior_skew < 1.0))
    throw std::invalid_argument("make_pair: prior_skew must lie in [0, 1)");

  Rng rng(spec.seed);
  const Matrix means = class_means(spec, rng);
  std::normal_distribution<double> noise(0.0, spec.cluster_std);

  auto draw = [&](std::size_t n, const std::vector<double>& priors, Matrix& x, std::vector<int>& y) {
    std::discrete_distribution<int> cls(priors.begin(), priors.end());
    x = Matrix(n, spec.dims);
    y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = cls(rng);
      for (std::size_t j = 0; j < spec.dims; ++j) x(i, j) = means(static_cast<std::size_t>(y[i]), j) + noise(rng);
    }
  };

  DomainPair pair;
  pair.n_classes = spec.n_classes;
  pair.shift = spec.shift;
  draw(spec.n_source, std::vector<double>(spec.n_classes, 1.0), pair.source_x, pair.source_y);
  std::vector<int> ty;
  draw(spec.n_target, target_priors(spec.n_classes, spec.shift.prior_skew), pair.target_x, ty);

  rotate_planes(pair.target_x, spec.shift.rotation_deg);
  if (spec.shift.translation != 0.0) {
    std::vector<double> dir(spec.dims);
    double norm = 0.0;
    std::normal_distribution<double> n01(0.0, 1.0);
    for (double& v : dir) {
      v = n01(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < pair.target_x.rows(); ++i)
      for (std::size_t j = 0; j < spec.dims; ++j) pair.target_x(i, j) += spec.shift.translation * dir[j] / norm;
  }
  pair.hidden_target_labels = SealedLabels(std::move(ty));
  return pair;
}

// ---------------------------------------------------------------------------
// CSV export/import. Three files: source (features + label), target (features
// only) and the sealed target labels.

inline constexpr const char* kPairSchema = "abas-pair";
inline constexpr int kPairSchemaVersion = 1;

namespace detail {
inline void write_matrix_rows(std::ostream& os, const Matrix& x, const std::vector<int>* labels) {
  os << std::setprecision(17);
  for (std::size_t j = 0; j < x.cols(); ++j) os << (j ? "," : "") << 'x' << j;
  if (labels) os << ",label";
  os << '\n';
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) os << (j ? "," : "") << x(i, j);
    if (labels) os << ',' << (*labels)[i];
    os << '\n';
  }
}

inline void expect_pair_header(std::istream& is, const std::string& kind) {
  std::string line;
  std::getline(is, line);
  const std::string want = std::string("# ") + kPairSchema + " v" + std::to_string(kPairSchemaVersion) + " " + kind;
  if (line.rfind(want, 0) != 0) throw std::runtime_error("pair csv: expected header '" + want + "'");
}

inline std::pair<Matrix, std::vector<int>> read_matrix_rows(std::istream& is, bool with_labels) {
  std::string line;
  std::getline(is, line);  // column names
  std::vector<double> data;
  std::vector<int> labels;
  std::size_t cols = 0, rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    const std::size_t nf = with_labels ? cells.size() - 1 : cells.size();
    if (rows == 0) cols = nf;
    if (nf != cols || cells.empty()) throw std::runtime_error("pair csv: ragged row");
    for (std::size_t j = 0; j < nf; ++j) data.push_back(std::stod(cells[j]));
    if (with_labels) labels.push_back(std::stoi(cells.back()));
    ++rows;
  }
  return {Matrix(rows, cols, std::move(data)), std::move(labels)};
}
}  // namespace detail

inline void export_pair(const DomainPair& p, std::ostream& source, std::ostream& target, std::ostream& labels) {
  source << "# " << kPairSchema << " v" << kPairSchemaVersion << " source k=" << p.n_classes << '\n';
  detail::write_matrix_rows(source, p.source_x, &p.source_y);
  target << "# " << kPairSchema << " v" << kPairSchemaVersion << " target k=" << p.n_classes << '\n';
  detail::write_matrix_rows(target, p.target_x, nullptr);
  labels << "# " << kPairSchema << " v" << kPairSchemaVersion << " target-labels\nlabel\n";
  for (int y : p.hidden_target_labels.reveal()) labels << y << '\n';
}

/// `labels` may be null for a genuinely unlabelled target.
inline DomainPair import_pair(std::istream& source, std::istream& target, std::istream* labels) {
  DomainPair p;
  detail::expect_pair_header(source, "source");
  auto [sx, sy] = detail::read_matrix_rows(source, true);
  detail::expect_pair_header(target, "target");
  auto [tx, unused] = detail::read_matrix_rows(target, false);
  if (sx.cols() != tx.cols()) throw std::runtime_error("pair csv: source/target dimension mismatch");
  int kmax = 0;
  for (int y : sy) {
    if (y < 0) throw std::runtime_error("pair csv: negative label");
    kmax = std::max(kmax, y + 1);
  }
  p.source_x = std::move(sx);
  p.source_y = std::move(sy);
  p.target_x = std::move(tx);
  if (labels) {
    detail::expect_pair_header(*labels, "target-labels");
    std::string line;
    std::getline(*labels, line);
    std::vector<int> ty;
    while (std::getline(*labels, line))
      if (!line.empty()) ty.push_back(std::stoi(line));
    if (ty.size() != p.target_x.rows()) throw std::runtime_error("pair csv: target label count mismatch");
    for (int y : ty) kmax = std::max(kmax, y + 1);
    p.hidden_target_labels = SealedLabels(std::move(ty));
  }
  p.n_classes = static_cast<std::size_t>(kmax);
  if (p.n_classes < 2) throw std::runtime_error("pair csv: need at least 2 classes");
  return p;
}

}  // namespace abas
