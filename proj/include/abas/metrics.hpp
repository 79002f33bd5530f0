#pragma once

// Label-free model-selection metrics computed per training snapshot. Apart
// from the source metrics, everything here consumes target-domain outputs
// only; this header has no access to target labels.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "abas/numeric.hpp"

namespace abas {

enum class Metric { entropy, diversity, silhouette, calinski, source_loss, source_acc, pseudo_label_acc };

inline constexpr std::array<Metric, 7> kAllMetrics = {
    Metric::entropy,     Metric::diversity,  Metric::silhouette,      Metric::calinski,
    Metric::source_loss, Metric::source_acc, Metric::pseudo_label_acc};

inline constexpr std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::entropy: return "entropy";
    case Metric::diversity: return "diversity";
    case Metric::silhouette: return "silhouette";
    case Metric::calinski: return "calinski";
    case Metric::source_loss: return "source_loss";
    case Metric::source_acc: return "source_acc";
    case Metric::pseudo_label_acc: return "pseudo_label_acc";
  }
  return "?";
}

inline Metric parse_metric(std::string_view s) {
  for (Metric m : kAllMetrics)
    if (metric_name(m) == s) return m;
  throw std::invalid_argument("unknown metric '" + std::string(s) + "'");
}

/// Metric values for one snapshot. Cluster scores are empty when undefined
/// (fewer than two occupied clusters or zero dispersion); the pseudo-label
/// estimate only exists once the run has finished.
struct SnapshotMetrics {
  double entropy = 0.0;
  double diversity = 0.0;
  std::optional<double> silhouette;
  std::optional<double> calinski;
  double source_loss = 0.0;
  double source_acc = 0.0;
  std::optional<double> pseudo_label_acc;

  std::optional<double> get(Metric m) const {
    switch (m) {
      case Metric::entropy: return entropy;
      case Metric::diversity: return diversity;
      case Metric::silhouette: return silhouette;
      case Metric::calinski: return calinski;
      case Metric::source_loss: return source_loss;
      case Metric::source_acc: return source_acc;
      case Metric::pseudo_label_acc: return pseudo_label_acc;
    }
    return std::nullopt;
  }

  void set(Metric m, std::optional<double> v) {
    switch (m) {
      case Metric::entropy: entropy = v.value_or(0.0); break;
      case Metric::diversity: diversity = v.value_or(0.0); break;
      case Metric::silhouette: silhouette = v; break;
      case Metric::calinski: calinski = v; break;
      case Metric::source_loss: source_loss = v.value_or(0.0); break;
      case Metric::source_acc: source_acc = v.value_or(0.0); break;
      case Metric::pseudo_label_acc: pseudo_label_acc = v; break;
    }
  }

  friend bool operator==(const SnapshotMetrics&, const SnapshotMetrics&) = default;
};

/// Mean Shannon entropy (nats) of the predicted class distributions.
inline double target_entropy(const Matrix& probs) {
  if (probs.rows() == 0) throw std::invalid_argument("target_entropy: empty target set");
  double s = 0.0;
  for (double p : probs.data())
    if (p > 0.0) s -= p * std::log(p);
  return s / static_cast<double>(probs.rows());
}

/// Entropy of the mean predicted distribution, divided by the class count so
/// values are comparable across tasks with different K.
inline double diversity(const Matrix& probs) {
  if (probs.rows() == 0) throw std::invalid_argument("diversity: empty target set");
  const std::size_t k = probs.cols();
  std::vector<double> q(k, 0.0);
  for (std::size_t i = 0; i < probs.rows(); ++i)
    for (std::size_t j = 0; j < k; ++j) q[j] += probs(i, j);
  double h = 0.0;
  for (double& v : q) {
    v /= static_cast<double>(probs.rows());
    if (v > 0.0) h -= v * std::log(v);
  }
  return h / static_cast<double>(k);
}

struct ClusterScores {
  std::optional<double> silhouette;
  std::optional<double> calinski;
};

namespace detail {
inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}
}  // namespace detail

/// Lloyd's K-means from the given initial centroids. Stops when assignments
/// stop changing or after max_iter rounds; an empty cluster is respawned at
/// the point farthest from its current centroid. Returns the assignment.
inline std::vector<int> kmeans(const Matrix& x, Matrix centroids, int max_iter = 100) {
  const std::size_t n = x.rows(), k = centroids.rows(), d = x.cols();
  std::vector<int> assign(n, -1);
  for (int iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dist = detail::sq_dist(x.row(i), centroids.row(c));
        if (dist < best_d) {
          best_d = dist;
          best = static_cast<int>(c);
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed) break;

    Matrix sums(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = x.row(i);
      auto s = sums.row(static_cast<std::size_t>(assign[i]));
      for (std::size_t j = 0; j < d; ++j) s[j] += row[j];
      ++counts[static_cast<std::size_t>(assign[i])];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < d; ++j) centroids(c, j) = sums(c, j) / static_cast<double>(counts[c]);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dist =
            detail::sq_dist(x.row(i), centroids.row(static_cast<std::size_t>(assign[i])));
        if (dist > far_d) {
          far_d = dist;
          far = i;
        }
      }
      auto src = x.row(far);
      std::copy(src.begin(), src.end(), centroids.row(c).begin());
    }
  }
  return assign;
}

/// Mean silhouette coefficient (Euclidean). Points in singleton clusters score 0.
/// Requires at least two distinct labels.
inline std::optional<double> silhouette_score(const Matrix& x, std::span<const int> labels) {
  const std::size_t n = x.rows();
  if (n == 0 || labels.size() != n) return std::nullopt;
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::size_t> sizes(static_cast<std::size_t>(k), 0);
  for (int l : labels) ++sizes[static_cast<std::size_t>(l)];
  if (std::count_if(sizes.begin(), sizes.end(), [](std::size_t s) { return s > 0; }) < 2)
    return std::nullopt;

  double total = 0.0;
  std::vector<double> dsum(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(dsum.begin(), dsum.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      dsum[static_cast<std::size_t>(labels[j])] += std::sqrt(detail::sq_dist(x.row(i), x.row(j)));
    }
    const std::size_t own = static_cast<std::size_t>(labels[i]);
    if (sizes[own] <= 1) continue;
    const double a = dsum[own] / static_cast<double>(sizes[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < dsum.size(); ++c)
      if (c != own && sizes[c] > 0) b = std::min(b, dsum[c] / static_cast<double>(sizes[c]));
    const double m = std::max(a, b);
    if (m > 0.0) total += (b - a) / m;
  }
  return total / static_cast<double>(n);
}

/// Calinski-Harabasz index: between-cluster over within-cluster dispersion,
/// each normalised by its degrees of freedom. Undefined for a single cluster,
/// n == k, or zero within-cluster dispersion.
inline std::optional<double> calinski_harabasz_score(const Matrix& x, std::span<const int> labels) {
  const std::size_t n = x.rows(), d = x.cols();
  if (n == 0 || labels.size() != n) return std::nullopt;
  const std::size_t kmax = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end()) + 1);
  Matrix cent(kmax, d);
  std::vector<std::size_t> sizes(kmax, 0);
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    ++sizes[c];
    for (std::size_t j = 0; j < d; ++j) {
      cent(c, j) += x(i, j);
      mean[j] += x(i, j);
    }
  }
  std::size_t k = 0;
  for (std::size_t c = 0; c < kmax; ++c) {
    if (sizes[c] == 0) continue;
    ++k;
    for (std::size_t j = 0; j < d; ++j) cent(c, j) /= static_cast<double>(sizes[c]);
  }
  for (double& m : mean) m /= static_cast<double>(n);
  if (k < 2 || n <= k) return std::nullopt;
  double between = 0.0, within = 0.0;
  for (std::size_t c = 0; c < kmax; ++c)
    if (sizes[c] > 0) between += static_cast<double>(sizes[c]) * detail::sq_dist(cent.row(c), mean);
  for (std::size_t i = 0; i < n; ++i)
    within += detail::sq_dist(x.row(i), cent.row(static_cast<std::size_t>(labels[i])));
  if (!(within > 0.0)) return std::nullopt;
  return (between / static_cast<double>(k - 1)) / (within / static_cast<double>(n - k));
}

/// Assigns each target sample its argmax class, seeds K-means at the centroids
/// of the occupied predicted classes, and scores the converged clustering.
inline ClusterScores cluster_scores(const Matrix& features, const Matrix& probs) {
  if (features.rows() != probs.rows())
    throw std::invalid_argument("cluster_scores: features and probs disagree on sample count");
  const std::vector<int> pred = argmax_rows(probs);
  const std::size_t d = features.cols();
  std::vector<std::size_t> counts(probs.cols(), 0);
  Matrix sums(probs.cols(), d);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto c = static_cast<std::size_t>(pred[i]);
    ++counts[c];
    for (std::size_t j = 0; j < d; ++j) sums(c, j) += features(i, j);
  }
  std::vector<std::size_t> occupied;
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c] > 0) occupied.push_back(c);
  if (occupied.size() < 2) return {};
  Matrix init(occupied.size(), d);
  for (std::size_t r = 0; r < occupied.size(); ++r)
    for (std::size_t j = 0; j < d; ++j)
      init(r, j) = sums(occupied[r], j) / static_cast<double>(counts[occupied[r]]);
  const std::vector<int> assign = kmeans(features, std::move(init));
  return {silhouette_score(features, assign), calinski_harabasz_score(features, assign)};
}

struct SourceMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline SourceMetrics source_metrics(const Matrix& probs, std::span<const int> labels) {
  if (probs.rows() == 0) throw std::invalid_argument("source_metrics: empty source set");
  if (labels.size() != probs.rows()) throw std::invalid_argument("source_metrics: label count mismatch");
  SourceMetrics m;
  const std::vector<int> pred = argmax_rows(probs);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= probs.cols())
      throw std::invalid_argument("source_metrics: label out of range");
    m.loss -= std::log(std::max(probs(i, static_cast<std::size_t>(y)), 1e-12));
    hits += pred[i] == y;
  }
  m.loss /= static_cast<double>(labels.size());
  m.accuracy = static_cast<double>(hits) / static_cast<double>(labels.size());
  return m;
}

/// Target predictions, one vector of argmax classes per recorded epoch.
struct PredictionHistory {
  std::vector<std::vector<int>> epochs;
};

/// Per-sample mode over epochs; ties go to whichever tied class shows up first.
inline std::vector<int> time_consistent_labels(const PredictionHistory& h) {
  if (h.epochs.empty()) throw std::invalid_argument("pseudo labels: empty prediction history");
  const std::size_t n = h.epochs.front().size();
  int k = 0;
  for (const auto& e : h.epochs) {
    if (e.size() != n) throw std::invalid_argument("pseudo labels: ragged prediction history");
    for (int c : e) {
      if (c < 0) throw std::invalid_argument("pseudo labels: negative class");
      k = std::max(k, c + 1);
    }
  }
  std::vector<int> out(n);
  std::vector<int> count(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(count.begin(), count.end(), 0);
    for (const auto& e : h.epochs) ++count[static_cast<std::size_t>(e[i])];
    const int best = *std::max_element(count.begin(), count.end());
    for (const auto& e : h.epochs) {
      if (count[static_cast<std::size_t>(e[i])] == best) {
        out[i] = e[i];
        break;
      }
    }
  }
  return out;
}

/// Retroactive per-epoch agreement with the time-consistent pseudo-labels.
inline std::vector<double> pseudo_label_accuracy(const PredictionHistory& h) {
  const std::vector<int> pseudo = time_consistent_labels(h);
  std::vector<double> acc;
  acc.reserve(h.epochs.size());
  for (const auto& e : h.epochs) {
    std::size_t agree = 0;
    for (std::size_t i = 0; i < e.size(); ++i) agree += e[i] == pseudo[i];
    acc.push_back(e.empty() ? 1.0 : static_cast<double>(agree) / static_cast<double>(e.size()));
  }
  return acc;
}

}  // namespace abas
