#pragma once

// In-process implementations of the command-line subcommands. The tool in
// tools/ is a thin argument parser over these functions.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "abas/bohb.hpp"
#include "abas/config.hpp"
#include "abas/ems.hpp"
#include "abas/trainer.hpp"

namespace abas {

inline DomainPair load_data(const RunConfig& cfg) {
  if (!cfg.data.from_files()) return make_pair(cfg.data.generate);
  std::ifstream s(cfg.data.source), t(cfg.data.target);
  if (!s || !t) throw std::runtime_error("data: cannot open source/target CSV");
  if (cfg.data.target_labels.empty()) return import_pair(s, t, nullptr);
  std::ifstream l(cfg.data.target_labels);
  if (!l) throw std::runtime_error("data: cannot open target label CSV");
  return import_pair(s, t, &l);
}

inline TrialSpec base_trial_spec(const RunConfig& cfg, const DomainPair& pair) {
  TrialSpec t;
  t.mode = cfg.mode;
  t.dann_form = cfg.dann_form;
  t.max_budget = cfg.bohb.max_budget;
  t.schedule = cfg.schedule;
  t.hidden_dim = cfg.hidden_dim;
  t.feature_dim = cfg.feature_dim;
  t.snapshot_every = cfg.snapshot_every;
  t.divergence_margin = cfg.divergence_margin;
  t.pair = &pair;
  return t;
}

/// Label-free trainer for the search loop.
inline Trainer make_trainer(const RunConfig& cfg, const DomainPair& pair) {
  const TrialSpec base = base_trial_spec(cfg, pair);
  return [base](const BranchConfig& c, int budget, std::uint64_t seed) {
    TrialSpec t = base;
    t.config = c;
    t.budget = budget;
    t.seed = seed;
    t.evaluate_target = false;
    return run_trial(t);
  };
}

/// Cross-run score of the final snapshot; best snapshot by the within-run model.
inline Estimator make_estimator(const EmsModel& model) {
  return {[model](const TrialRecord& r) { return run_score(model.cross_run, r.snapshots); },
          [model](const TrialRecord& r) { return best_snapshot(model.within_run, r.snapshots); }};
}

inline EmsModel read_ems_model(const std::string& path) {
  if (path.empty())
    throw ConfigError("no EMS regressor configured: set [ems] regressor, after fitting one with `abas ems-fit`");
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open EMS regressor '" + path + "': fit one with `abas ems-fit`");
  return load_ems_model(is);
}

inline std::ofstream open_output(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

/// Snapshot rows of a set of trials in the metrics-dump schema.
inline SnapshotDataset trials_to_dataset(const std::vector<TrialRecord>& trials, const std::string& corpus_id) {
  SnapshotDataset ds;
  ds.corpus_id = corpus_id;
  for (const TrialRecord& t : trials)
    for (std::size_t e = 0; e < t.snapshots.size(); ++e) {
      SnapshotRow r;
      r.run_id = std::to_string(t.trial_id);
      r.epoch = static_cast<int>(e);
      r.metrics = t.snapshots[e];
      if (e < t.target_accuracy.size()) r.target_acc = t.target_accuracy[e];
      ds.rows.push_back(std::move(r));
    }
  return ds;
}

// ---------------------------------------------------------------------------
// search

struct SearchReport {
  SearchResult result;
  std::size_t label_reads_during_search = 0;
  std::optional<double> report_only_target_accuracy;  // at the selected snapshot
  std::filesystem::path ledger_path;
  std::filesystem::path report_path;
};

/// Writes <output_dir>/ledger.jsonl and <output_dir>/report.json.
inline SearchReport cmd_search(const RunConfig& cfg) {
  cfg.validate();
  const EmsModel model = read_ems_model(cfg.ems_regressor);
  const DomainPair pair = load_data(cfg);

  SearchReport rep;
  const std::filesystem::path dir(cfg.output_dir);
  rep.ledger_path = dir / "ledger.jsonl";
  rep.report_path = dir / "report.json";
  std::ofstream ledger_os = open_output(rep.ledger_path);
  Ledger ledger(&ledger_os);

  const std::size_t reads_before = SealedLabels::total_reads();
  rep.result = run_search(cfg.space, cfg.bohb, make_trainer(cfg, pair), make_estimator(model), &ledger);
  rep.label_reads_during_search = SealedLabels::total_reads() - reads_before;

  // Report-only ground truth, computed after selection is final.
  if (pair.has_target_labels()) {
    TrialRecord graded = rep.result.best;
    attach_target_accuracy(graded, pair.hidden_target_labels);
    rep.report_only_target_accuracy = graded.target_accuracy.at(rep.result.best_epoch);
  }

  const TrialRecord& b = rep.result.best;
  std::size_t diverged = 0;
  for (const TrialRecord& t : rep.result.trials) diverged += !t.completed();
  nlohmann::ordered_json j = {{"schema", "abas-search-report"},
                      {"version", 1},
                      {"seed", cfg.seed},
                      {"plan", plan_to_json(rep.result.plan)},
                      {"n_trials", rep.result.trials.size()},
                      {"n_diverged", diverged},
                      {"best_trial", b.trial_id},
                      {"best_config", to_json(b.config)},
                      {"best_budget", b.budget},
                      {"best_epoch", rep.result.best_epoch},
                      {"best_iteration", b.snapshot_iterations.at(rep.result.best_epoch)},
                      {"ems_score", b.ems_score},
                      {"ems_score_note", "ranking score of a transferred regressor; not an accuracy estimate"},
                      {"label_reads_during_search", rep.label_reads_during_search}};
  if (rep.report_only_target_accuracy)
    j["report_only"] = {{"target_accuracy", *rep.report_only_target_accuracy},
                        {"note", "ground truth from sealed labels, read after the search finished"}};
  std::ofstream ro = open_output(rep.report_path);
  ro << j.dump(2) << '\n';
  return rep;
}

// ---------------------------------------------------------------------------
// random-corpus

struct CorpusResult {
  std::vector<TrialRecord> trials;
  SnapshotDataset dataset;
};

/// Trains n uniformly sampled configurations at the full budget and grades
/// every snapshot against the target labels when the pair has them.
inline CorpusResult build_random_corpus(const RunConfig& cfg, const DomainPair& pair, int n,
                                        const std::string& corpus_id) {
  if (n < 1) throw std::invalid_argument("random-corpus: n must be >= 1");
  cfg.validate();
  Rng rng(cfg.seed);
  std::vector<detail::Job> jobs;
  for (int i = 0; i < n; ++i) jobs.push_back({i, cfg.space.sample_uniform(rng), cfg.bohb.max_budget, config_seed(cfg.seed, i)});
  const TrialSpec base = base_trial_spec(cfg, pair);
  const Trainer graded = [base](const BranchConfig& c, int budget, std::uint64_t seed) {
    TrialSpec t = base;
    t.config = c;
    t.budget = budget;
    t.seed = seed;
    t.evaluate_target = true;
    return run_trial(t);
  };
  CorpusResult out;
  out.trials = detail::run_jobs(jobs, graded, cfg.bohb.parallelism);
  for (int i = 0; i < n; ++i) out.trials[static_cast<std::size_t>(i)].trial_id = i;
  out.dataset = trials_to_dataset(out.trials, corpus_id);
  return out;
}

/// Final-snapshot accuracy counts in 0.05-wide bins.
inline void write_histogram_csv(const std::vector<TrialRecord>& trials, std::ostream& os) {
  os << "# abas-histogram v1\nbin_low,bin_high,count\n";
  std::vector<int> bins(20, 0);
  for (const TrialRecord& t : trials) {
    if (!t.completed() || t.target_accuracy.empty()) continue;
    const int b = std::min(19, static_cast<int>(t.target_accuracy.back() / 0.05));
    ++bins[static_cast<std::size_t>(b)];
  }
  os << std::setprecision(3);
  for (int b = 0; b < 20; ++b) os << b * 0.05 << ',' << (b + 1) * 0.05 << ',' << bins[static_cast<std::size_t>(b)] << '\n';
}

/// Mean/min/max final accuracy grouped by each parameter value (lambda and
/// dropout in quartile bins of the space).
inline void write_sensitivity_csv(const std::vector<TrialRecord>& trials, const SearchSpace& space, std::ostream& os) {
  os << "# abas-sensitivity v1\nparameter,value,count,mean_acc,min_acc,max_acc\n";
  struct Agg {
    int n = 0;
    double sum = 0.0, lo = 1.0, hi = 0.0;
  };
  std::map<std::pair<std::string, std::string>, Agg> agg;
  auto bin4 = [](double u) { return std::min(3, static_cast<int>(u * 4.0)); };
  for (const TrialRecord& t : trials) {
    if (!t.completed() || t.target_accuracy.empty()) continue;
    const double a = t.target_accuracy.back();
    const SearchSpace::Point x = space.encode(t.config);
    const std::pair<std::string, std::string> keys[] = {
        {"lambda", "q" + std::to_string(bin4(x[0]))},
        {"dropout", "q" + std::to_string(bin4(x[1]))},
        {"n_fc_layers", std::to_string(t.config.n_fc_layers)},
        {"fc_h", std::to_string(t.config.fc_h)},
        {"fc_b", std::to_string(t.config.fc_b)}};
    for (const auto& k : keys) {
      Agg& g = agg[k];
      ++g.n;
      g.sum += a;
      g.lo = std::min(g.lo, a);
      g.hi = std::max(g.hi, a);
    }
  }
  os << std::setprecision(6);
  for (const auto& [k, g] : agg)
    os << k.first << ',' << k.second << ',' << g.n << ',' << g.sum / g.n << ',' << g.lo << ',' << g.hi << '\n';
}

/// Writes the metrics CSV plus <stem>.histogram.csv and <stem>.sensitivity.csv.
inline CorpusResult cmd_random_corpus(const RunConfig& cfg, int n, const std::filesystem::path& out_csv,
                                      const std::string& corpus_id) {
  const DomainPair pair = load_data(cfg);
  CorpusResult res = build_random_corpus(cfg, pair, n, corpus_id);
  {
    std::ofstream os = open_output(out_csv);
    write_metrics_csv(res.dataset, os);
  }
  if (pair.has_target_labels()) {
    std::filesystem::path stem = out_csv;
    stem.replace_extension();
    std::ofstream h = open_output(stem.string() + ".histogram.csv");
    write_histogram_csv(res.trials, h);
    std::ofstream s = open_output(stem.string() + ".sensitivity.csv");
    write_sensitivity_csv(res.trials, cfg.space, s);
  }
  return res;
}

// ---------------------------------------------------------------------------
// ems-fit / ems-rank

inline void write_correlation_csv(const std::vector<CorrelationRow>& rows, const std::string& fit_on,
                                  const std::string& eval_on, std::ostream& os) {
  os << "# abas-correlation v1 fit=" << fit_on << " eval=" << eval_on << (fit_on == eval_on ? " in_sample" : "")
     << "\nname,pearson,spearman,n\n"
     << std::setprecision(17);
  for (const CorrelationRow& r : rows) os << r.name << ',' << r.pearson << ',' << r.spearman << ',' << r.n << '\n';
}

inline SnapshotDataset read_metrics_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_metrics_csv(is);
}

/// Fits both regressors on `corpus_csv`; the correlation report is computed on
/// `eval_csv` when given, otherwise in-sample and marked as such.
inline EmsModel cmd_ems_fit(const std::string& corpus_csv, const std::filesystem::path& model_out,
                            const std::vector<Metric>& features, const std::string& eval_csv,
                            const std::filesystem::path& report_out) {
  const SnapshotDataset ds = read_metrics_file(corpus_csv);
  if (!has_target_accuracy(ds))
    throw std::invalid_argument("ems-fit: corpus '" + corpus_csv + "' lacks a complete target_acc column");
  const EmsModel m = fit_ems(ds, features);
  {
    std::ofstream os = open_output(model_out);
    save_ems_model(m, os);
  }
  if (!report_out.empty()) {
    std::ofstream os = open_output(report_out);
    if (eval_csv.empty()) {
      write_correlation_csv(correlation_report(m.cross_run, ds, true), ds.corpus_id, ds.corpus_id, os);
    } else {
      const SnapshotDataset ev = read_metrics_file(eval_csv);
      write_correlation_csv(correlation_report(m.cross_run, ev), ds.corpus_id, ev.corpus_id, os);
    }
  }
  return m;
}

struct RankRow {
  std::string trial_id;
  double ems_score = 0.0;
  std::size_t best_epoch = 0;
};

/// Ranks the trials of a metrics CSV by cross-run score, best first.
inline std::vector<RankRow> cmd_ems_rank(const std::string& model_path, const std::string& metrics_csv,
                                         std::ostream& out) {
  const EmsModel m = read_ems_model(model_path);
  const SnapshotDataset ds = read_metrics_file(metrics_csv);
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::pair<int, SnapshotMetrics>>> runs;
  for (const SnapshotRow& r : ds.rows) {
    if (!runs.count(r.run_id)) order.push_back(r.run_id);
    runs[r.run_id].emplace_back(r.epoch, r.metrics);
  }
  std::vector<RankRow> rows;
  for (const std::string& id : order) {
    auto& v = runs[id];
    std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<SnapshotMetrics> hist;
    for (auto& [e, sm] : v) hist.push_back(sm);
    rows.push_back({id, run_score(m.cross_run, hist), static_cast<std::size_t>(v[best_snapshot(m.within_run, hist)].first)});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const RankRow& a, const RankRow& b) { return a.ems_score > b.ems_score; });
  out << "# abas-ranking v1 corpus=" << ds.corpus_id << "\nrank,trial_id,ems_score,best_epoch\n"
      << std::setprecision(17);
  for (std::size_t i = 0; i < rows.size(); ++i)
    out << i + 1 << ',' << rows[i].trial_id << ',' << rows[i].ems_score << ',' << rows[i].best_epoch << '\n';
  return rows;
}

// ---------------------------------------------------------------------------
// train-one / metrics-dump / make-pair

/// Runs one trial at `budget` (max budget when 0) and prints a snapshot table.
inline TrialRecord cmd_train_one(const RunConfig& cfg, const BranchConfig& branch, int budget, std::uint64_t seed,
                                 std::ostream& out, const std::filesystem::path& metrics_out = {}) {
  branch.validate();
  const DomainPair pair = load_data(cfg);
  TrialSpec t = base_trial_spec(cfg, pair);
  t.config = branch;
  t.budget = budget > 0 ? budget : cfg.bohb.max_budget;
  t.seed = seed;
  t.evaluate_target = pair.has_target_labels();
  TrialRecord r = run_trial(t);
  r.trial_id = 0;

  out << "config " << to_string(branch) << " budget " << t.budget << " status " << to_string(r.status);
  if (!r.completed()) out << " (" << r.divergence_reason << ")";
  out << '\n' << "iter     entropy  diversity silhouette   calinski  src_loss  src_acc  pl_acc";
  if (t.evaluate_target) out << "  tgt_acc[report-only]";
  out << '\n';
  auto opt = [](const std::optional<double>& v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4);
    if (v)
      s << *v;
    else
      s << "NA";
    return s.str();
  };
  for (std::size_t e = 0; e < r.snapshots.size(); ++e) {
    const SnapshotMetrics& m = r.snapshots[e];
    out << std::setw(5) << r.snapshot_iterations[e] << std::fixed << std::setprecision(4) << std::setw(11)
        << m.entropy << std::setw(11) << m.diversity << std::setw(11) << opt(m.silhouette) << std::setw(11)
        << std::setprecision(2) << (m.calinski ? *m.calinski : 0.0) << std::setprecision(4) << std::setw(10)
        << m.source_loss << std::setw(9) << m.source_acc << std::setw(8) << opt(m.pseudo_label_acc);
    if (t.evaluate_target) out << std::setw(9) << r.target_accuracy[e];
    out << '\n';
  }
  out.unsetf(std::ios::floatfield);
  if (!metrics_out.empty()) {
    std::ofstream os = open_output(metrics_out);
    write_metrics_csv(trials_to_dataset({r}, "train-one"), os);
  }
  return r;
}

/// Snapshot metrics of every finished trial in a ledger, as metrics CSV.
inline SnapshotDataset cmd_metrics_dump(const std::string& ledger_path, std::ostream& out) {
  std::ifstream is(ledger_path);
  if (!is) throw std::runtime_error("cannot open " + ledger_path);
  const std::vector<nlohmann::json> ev = read_ledger(is);
  std::vector<TrialRecord> trials;
  for (const nlohmann::json& e : ev)
    if (e.value("event", "") == "finished") trials.push_back(trial_from_json(e));
  const SnapshotDataset ds = trials_to_dataset(trials, std::filesystem::path(ledger_path).stem().string());
  write_metrics_csv(ds, out);
  return ds;
}

/// Generates the configured pair and writes <prefix>.source.csv,
/// <prefix>.target.csv and <prefix>.target-labels.csv.
inline void cmd_make_pair(const RunConfig& cfg, const std::string& prefix) {
  if (cfg.data.from_files()) throw ConfigError("make-pair: [data] must describe a generated pair, not files");
  const DomainPair p = make_pair(cfg.data.generate);
  std::ofstream s = open_output(prefix + ".source.csv");
  std::ofstream t = open_output(prefix + ".target.csv");
  std::ofstream l = open_output(prefix + ".target-labels.csv");
  export_pair(p, s, t, l);
}

}  // namespace abas
