#pragma once

// Ensemble-based model selection: a least-squares linear regressor over
// standardized label-free metrics, fit on one task corpus and transferred to
// rank runs and snapshots on another.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "abas/metrics.hpp"

namespace abas {

struct SnapshotRow {
  std::string run_id;
  int epoch = 0;
  SnapshotMetrics metrics;
  std::optional<double> target_acc;  // ground truth, corpora only
};

struct SnapshotDataset {
  std::string corpus_id;
  std::vector<SnapshotRow> rows;
};

// ---------------------------------------------------------------------------
// CSV (metrics-dump schema)

inline constexpr const char* kMetricsSchema = "abas-metrics";
inline constexpr int kMetricsSchemaVersion = 1;

namespace detail {
inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}
inline std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_double(*v) : "NA"; }
inline std::optional<double> parse_opt(const std::string& s) {
  if (s == "NA" || s.empty()) return std::nullopt;
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::runtime_error("csv: bad number '" + s + "'");
  return v;
}
inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}
}  // namespace detail

inline std::string metrics_csv_header() {
  std::string h = "trial_id,epoch";
  for (Metric m : kAllMetrics) h += "," + std::string(metric_name(m));
  return h + ",target_acc";
}

inline std::string metrics_csv_row(const SnapshotRow& r) {
  std::string s = r.run_id + "," + std::to_string(r.epoch);
  for (Metric m : kAllMetrics) s += "," + detail::fmt_opt(r.metrics.get(m));
  return s + "," + detail::fmt_opt(r.target_acc);
}

inline void write_metrics_csv(const SnapshotDataset& ds, std::ostream& os) {
  os << "# " << kMetricsSchema << " v" << kMetricsSchemaVersion << " corpus=" << ds.corpus_id << '\n';
  os << metrics_csv_header() << '\n';
  for (const auto& r : ds.rows) os << metrics_csv_row(r) << '\n';
}

inline SnapshotDataset read_metrics_csv(std::istream& is) {
  SnapshotDataset ds;
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("metrics csv: empty input");
  const std::string prefix = std::string("# ") + kMetricsSchema + " v";
  if (line.rfind(prefix, 0) != 0) throw std::runtime_error("metrics csv: missing schema header");
  std::istringstream hs(line.substr(prefix.size()));
  int version = 0;
  hs >> version;
  if (version != kMetricsSchemaVersion)
    throw std::runtime_error("metrics csv: unsupported schema version " + std::to_string(version));
  std::string tok;
  while (hs >> tok)
    if (tok.rfind("corpus=", 0) == 0) ds.corpus_id = tok.substr(7);
  if (!std::getline(is, line)) throw std::runtime_error("metrics csv: missing column header");
  const auto cols = detail::split(line, ',');
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < cols.size(); ++i) index[cols[i]] = i;
  for (const char* req : {"trial_id", "epoch"})
    if (!index.count(req)) throw std::runtime_error(std::string("metrics csv: missing column ") + req);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != cols.size()) throw std::runtime_error("metrics csv: ragged row: " + line);
    SnapshotRow r;
    r.run_id = f[index["trial_id"]];
    r.epoch = std::stoi(f[index["epoch"]]);
    for (Metric m : kAllMetrics) {
      auto it = index.find(std::string(metric_name(m)));
      if (it != index.end()) r.metrics.set(m, detail::parse_opt(f[it->second]));
    }
    if (auto it = index.find("target_acc"); it != index.end()) r.target_acc = detail::parse_opt(f[it->second]);
    ds.rows.push_back(std::move(r));
  }
  return ds;
}

inline bool has_target_accuracy(const SnapshotDataset& ds) {
  return !ds.rows.empty() &&
         std::all_of(ds.rows.begin(), ds.rows.end(), [](const SnapshotRow& r) { return r.target_acc.has_value(); });
}

// ---------------------------------------------------------------------------
// Regressor

struct EmsRegressor {
  std::vector<Metric> features;
  std::vector<double> means;
  std::vector<double> stds;
  std::vector<double> weights;  // on standardized features
  double bias = 0.0;
  std::string trained_on;
  bool rank_deficient = false;
  double r_squared = 0.0;
  std::vector<std::string> warnings;

  bool uses(Metric m) const { return std::find(features.begin(), features.end(), m) != features.end(); }

  /// Weights expressed on the original (unstandardized) feature scale.
  std::vector<double> raw_weights() const {
    std::vector<double> w(weights.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = weights[i] / stds[i];
    return w;
  }
};

namespace detail {
// Solves A x = b for symmetric positive definite A by Cholesky; returns
// nothing if a pivot collapses relative to the largest diagonal entry.
inline std::optional<std::vector<double>> cholesky_solve(std::vector<std::vector<double>> a,
                                                         std::vector<double> b, double rel_tol) {
  const std::size_t n = b.size();
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, a[i][i]);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j][j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j][k] * a[j][k];
    if (!(d > rel_tol * max_diag)) return std::nullopt;
    a[j][j] = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i][j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i][k] * a[j][k];
      a[i][j] = s / a[j][j];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= a[i][k] * b[k];
    b[i] = s / a[i][i];
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[k][i] * b[k];
    b[i] = s / a[i][i];
  }
  return b;
}
}  // namespace detail

/// Ordinary least squares on features standardized with the fit corpus's own
/// statistics. Missing values are imputed with the observed mean; features
/// with zero variance are dropped.
inline EmsRegressor fit(const SnapshotDataset& ds, const std::vector<Metric>& feature_subset) {
  if (ds.rows.size() < 2) throw std::invalid_argument("ems fit: need at least 2 rows");
  std::vector<double> y;
  y.reserve(ds.rows.size());
  for (const auto& r : ds.rows) {
    if (!r.target_acc) throw std::invalid_argument("ems fit: corpus lacks target accuracy");
    if (!(*r.target_acc >= 0.0 && *r.target_acc <= 1.0))
      throw std::invalid_argument("ems fit: target accuracy outside [0, 1]");
    y.push_back(*r.target_acc);
  }
  const double n = static_cast<double>(y.size());

  EmsRegressor reg;
  reg.trained_on = ds.corpus_id;
  std::vector<std::vector<double>> cols;
  for (Metric m : feature_subset) {
    double sum = 0.0;
    std::size_t seen = 0;
    for (const auto& r : ds.rows)
      if (auto v = r.metrics.get(m)) {
        sum += *v;
        ++seen;
      }
    if (seen == 0) {
      reg.warnings.push_back("feature " + std::string(metric_name(m)) + " never observed; dropped");
      continue;
    }
    const double mean = sum / static_cast<double>(seen);
    std::vector<double> col;
    col.reserve(ds.rows.size());
    for (const auto& r : ds.rows) col.push_back(r.metrics.get(m).value_or(mean));
    double var = 0.0;
    for (double v : col) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / n);
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
      reg.warnings.push_back("feature " + std::string(metric_name(m)) + " is constant; dropped");
      continue;
    }
    for (double& v : col) v = (v - mean) / sd;
    reg.features.push_back(m);
    reg.means.push_back(mean);
    reg.stds.push_back(sd);
    cols.push_back(std::move(col));
  }

  const double ybar = std::accumulate(y.begin(), y.end(), 0.0) / n;
  reg.bias = ybar;
  const std::size_t p = cols.size();
  reg.weights.assign(p, 0.0);
  if (p > 0) {
    std::vector<std::vector<double>> gram(p, std::vector<double>(p, 0.0));
    std::vector<double> rhs(p, 0.0);
    for (std::size_t a = 0; a < p; ++a) {
      for (std::size_t b = 0; b <= a; ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += cols[a][i] * cols[b][i];
        gram[a][b] = gram[b][a] = s / n;
      }
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += cols[a][i] * (y[i] - ybar);
      rhs[a] = s / n;
    }
    auto w = detail::cholesky_solve(gram, rhs, 1e-12);
    if (!w) {
      reg.rank_deficient = true;
      reg.warnings.push_back("design is rank deficient; using ridge-regularised minimum-norm solution");
      for (std::size_t a = 0; a < p; ++a) gram[a][a] += 1e-8;
      w = detail::cholesky_solve(gram, rhs, 0.0);
      if (!w) throw std::runtime_error("ems fit: normal equations could not be solved");
    }
    reg.weights = *w;
  }

  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    double pred = reg.bias;
    for (std::size_t a = 0; a < p; ++a) pred += reg.weights[a] * cols[a][i];
    ss_res += (y[i] - pred) * (y[i] - pred);
    ss_tot += (y[i] - ybar) * (y[i] - ybar);
  }
  reg.r_squared = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
  return reg;
}

/// Linear prediction. Used for ranking only; it is not an accuracy estimate.
inline double score(const EmsRegressor& reg, const SnapshotMetrics& m) {
  double s = reg.bias;
  for (std::size_t i = 0; i < reg.features.size(); ++i) {
    auto v = m.get(reg.features[i]);
    if (!v) {
      if (reg.features[i] == Metric::silhouette || reg.features[i] == Metric::calinski) {
        continue;  // imputed with the fit mean, i.e. zero after standardization
      }
      throw std::invalid_argument("ems score: metric " + std::string(metric_name(reg.features[i])) +
                                  " missing and not imputable");
    }
    s += reg.weights[i] * (*v - reg.means[i]) / reg.stds[i];
  }
  return s;
}

/// The two regressors: one for ranking runs against each other (never sees the
/// pseudo-label estimate, which is only meaningful inside one run) and one for
/// picking the best snapshot within a run.
struct EmsModel {
  EmsRegressor cross_run;
  EmsRegressor within_run;
};

inline const std::vector<Metric>& default_ems_features() {
  static const std::vector<Metric> f = {Metric::entropy,  Metric::diversity,  Metric::silhouette,
                                        Metric::calinski, Metric::source_acc, Metric::pseudo_label_acc};
  return f;
}

inline EmsModel fit_ems(const SnapshotDataset& ds, const std::vector<Metric>& features = default_ems_features()) {
  std::vector<Metric> cross, within;
  for (Metric m : features) {
    if (std::find(within.begin(), within.end(), m) != within.end()) continue;
    within.push_back(m);
    if (m != Metric::pseudo_label_acc) cross.push_back(m);
  }
  if (std::find(within.begin(), within.end(), Metric::pseudo_label_acc) == within.end())
    within.push_back(Metric::pseudo_label_acc);
  return {fit(ds, cross), fit(ds, within)};
}

/// Cross-run score of one finished run: the cross-run regressor applied to
/// its final snapshot.
inline double run_score(const EmsRegressor& cross_run, const std::vector<SnapshotMetrics>& history) {
  if (history.empty()) throw std::invalid_argument("run_score: empty snapshot history");
  if (cross_run.uses(Metric::pseudo_label_acc))
    throw std::invalid_argument("run_score: cross-run regressor must not use the pseudo-label metric");
  return score(cross_run, history.back());
}

/// Index of the best snapshot of one run under the within-run regressor; ties
/// go to the later snapshot.
inline std::size_t best_snapshot(const EmsRegressor& within_run, const std::vector<SnapshotMetrics>& history) {
  if (history.empty()) throw std::invalid_argument("best_snapshot: empty snapshot history");
  std::size_t best = 0;
  double best_s = -std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < history.size(); ++e) {
    const double s = score(within_run, history[e]);
    if (s >= best_s) {
      best_s = s;
      best = e;
    }
  }
  return best;
}

struct Selection {
  std::size_t trial = 0;
  std::size_t epoch = 0;
  double score = 0.0;
};

/// Picks the run with the highest cross-run score (ties to the earliest), then
/// its best snapshot. Empty histories are treated as unfinished and skipped.
inline Selection select_best(const EmsModel& model, const std::vector<std::vector<SnapshotMetrics>>& trials) {
  std::optional<Selection> best;
  for (std::size_t t = 0; t < trials.size(); ++t) {
    if (trials[t].empty()) continue;
    const double s = run_score(model.cross_run, trials[t]);
    if (!best || s > best->score) best = Selection{t, 0, s};
  }
  if (!best) throw std::invalid_argument("select_best: no completed trials");
  best->epoch = best_snapshot(model.within_run, trials[best->trial]);
  return *best;
}

// ---------------------------------------------------------------------------
// Correlations

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("pearson: need >= 2 paired values");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

/// 1-based ranks, ties share their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(average_ranks(a), average_ranks(b));
}

struct CorrelationRow {
  std::string name;
  double pearson = 0.0;
  double spearman = 0.0;
  std::size_t n = 0;
};

/// Correlation of every metric, and of the ensemble score, with the true target
/// accuracy on an evaluation corpus the regressor was not fit on. Metrics are
/// correlated over the rows where they are defined. `in_sample` permits the
/// fit corpus itself, for goodness-of-fit reports only.
inline std::vector<CorrelationRow> correlation_report(const EmsRegressor& reg, const SnapshotDataset& eval,
                                                      bool in_sample = false) {
  if (eval.rows.size() < 3) throw std::invalid_argument("correlation_report: need >= 3 rows");
  if (!has_target_accuracy(eval)) throw std::invalid_argument("correlation_report: corpus lacks target accuracy");
  if (!in_sample && !eval.corpus_id.empty() && eval.corpus_id == reg.trained_on)
    throw std::invalid_argument("correlation_report: evaluation corpus '" + eval.corpus_id +
                                "' is the fit corpus");
  std::vector<CorrelationRow> out;
  for (Metric m : kAllMetrics) {
    std::vector<double> x, y;
    for (const auto& r : eval.rows)
      if (auto v = r.metrics.get(m)) {
        x.push_back(*v);
        y.push_back(*r.target_acc);
      }
    if (x.size() < 3) continue;
    out.push_back({std::string(metric_name(m)), pearson(x, y), spearman(x, y), x.size()});
  }
  std::vector<double> s, y;
  for (const auto& r : eval.rows) {
    s.push_back(score(reg, r.metrics));
    y.push_back(*r.target_acc);
  }
  out.push_back({"ems", pearson(s, y), spearman(s, y), s.size()});
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr const char* kRegressorSchema = "abas-ems-regressor";
inline constexpr int kRegressorSchemaVersion = 1;

inline nlohmann::ordered_json regressor_to_json(const EmsRegressor& r) {
  nlohmann::ordered_json j;
  std::vector<std::string> names;
  for (Metric m : r.features) names.emplace_back(metric_name(m));
  j["features"] = names;
  j["means"] = r.means;
  j["stds"] = r.stds;
  j["weights"] = r.weights;
  j["bias"] = r.bias;
  j["trained_on"] = r.trained_on;
  j["rank_deficient"] = r.rank_deficient;
  j["r_squared"] = r.r_squared;
  return j;
}

inline EmsRegressor regressor_from_json(const nlohmann::json& j) {
  EmsRegressor r;
  for (const auto& n : j.at("features")) r.features.push_back(parse_metric(n.get<std::string>()));
  r.means = j.at("means").get<std::vector<double>>();
  r.stds = j.at("stds").get<std::vector<double>>();
  r.weights = j.at("weights").get<std::vector<double>>();
  r.bias = j.at("bias").get<double>();
  r.trained_on = j.at("trained_on").get<std::string>();
  r.rank_deficient = j.value("rank_deficient", false);
  r.r_squared = j.value("r_squared", 0.0);
  const std::size_t p = r.features.size();
  if (r.means.size() != p || r.stds.size() != p || r.weights.size() != p)
    throw std::runtime_error("regressor: feature/statistic length mismatch");
  for (double s : r.stds)
    if (!(s > 0.0)) throw std::runtime_error("regressor: non-positive standard deviation");
  return r;
}

inline void save_ems_model(const EmsModel& m, std::ostream& os) {
  nlohmann::ordered_json j;  // schema and version lead the file
  j["schema"] = kRegressorSchema;
  j["version"] = kRegressorSchemaVersion;
  j["cross_run"] = regressor_to_json(m.cross_run);
  j["within_run"] = regressor_to_json(m.within_run);
  os << j.dump(2) << '\n';
}

inline EmsModel load_ems_model(std::istream& is) {
  nlohmann::json j = nlohmann::json::parse(is);
  if (j.value("schema", "") != kRegressorSchema) throw std::runtime_error("regressor: wrong schema");
  if (j.value("version", 0) != kRegressorSchemaVersion) throw std::runtime_error("regressor: unsupported version");
  EmsModel m{regressor_from_json(j.at("cross_run")), regressor_from_json(j.at("within_run"))};
  if (m.cross_run.uses(Metric::pseudo_label_acc))
    throw std::runtime_error("regressor: cross-run model must not use pseudo_label_acc");
  return m;
}

}  // namespace abas
