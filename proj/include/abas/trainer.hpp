#pragma once

// Trial runner: trains one (G, C, D) network on a domain pair for a given
// iteration budget and records a metric snapshot at a fixed interval.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "abas/losses.hpp"
#include "abas/metrics.hpp"
#include "abas/network.hpp"
#include "abas/synthdata.hpp"
#include "abas/trial.hpp"

namespace abas {

struct TrialSpec {
  BranchConfig config;
  AdvMode mode = AdvMode::dann;
  DannForm dann_form = DannForm::log;
  int budget = 0;
  int max_budget = 0;  // progress denominator; 0 means budget
  TrainSchedule schedule;
  std::size_t hidden_dim = 64;
  std::size_t feature_dim = 32;
  int snapshot_every = 0;  // 0 means max(1, budget / 20)
  double divergence_margin = 0.05;
  std::uint64_t seed = 0;
  const DomainPair* pair = nullptr;
  // Evaluation corpora only: grade every snapshot against the sealed labels
  // once training has finished.
  bool evaluate_target = false;
};

inline int effective_snapshot_every(const TrialSpec& s) {
  return s.snapshot_every > 0 ? s.snapshot_every : std::max(1, s.budget / 20);
}

inline NetworkDims trial_dims(const TrialSpec& s) {
  NetworkDims d;
  d.input_dim = s.pair->dims();
  d.hidden_dim = s.hidden_dim;
  d.feature_dim = s.feature_dim;
  d.n_classes = s.pair->n_classes;
  d.branch_out_dim = s.mode == AdvMode::dann ? 1 : s.pair->n_classes;
  return d;
}

/// Label-free snapshot of a network on a pair, plus the target argmax.
inline SnapshotMetrics snapshot_metrics(const Network& net, const DomainPair& pair, std::vector<int>* target_pred) {
  const Matrix ft = extract_features(net, pair.target_x);
  const Matrix pt = classify_probs(net, ft);
  const Matrix ps = classify_probs(net, extract_features(net, pair.source_x));
  SnapshotMetrics m;
  m.entropy = target_entropy(pt);
  m.diversity = diversity(pt);
  const ClusterScores cs = cluster_scores(ft, pt);
  m.silhouette = cs.silhouette;
  m.calinski = cs.calinski;
  const SourceMetrics sm = source_metrics(ps, pair.source_y);
  m.source_loss = sm.loss;
  m.source_acc = sm.accuracy;
  if (target_pred) *target_pred = argmax_rows(pt);
  return m;
}

/// Fills the report-only per-snapshot target accuracy from stored predictions.
inline void attach_target_accuracy(TrialRecord& r, const SealedLabels& labels) {
  const std::vector<int>& y = labels.reveal();
  r.target_accuracy.clear();
  for (const auto& pred : r.predictions.epochs) {
    if (pred.size() != y.size()) throw std::invalid_argument("attach_target_accuracy: size mismatch");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < y.size(); ++i) hit += pred[i] == y[i];
    r.target_accuracy.push_back(static_cast<double>(hit) / static_cast<double>(y.size()));
  }
}

inline TrialRecord run_trial(const TrialSpec& spec) {
  if (!spec.pair) throw std::invalid_argument("run_trial: no domain pair");
  const int max_budget = spec.max_budget > 0 ? spec.max_budget : spec.budget;
  if (spec.budget <= 0) throw std::invalid_argument("run_trial: budget must be positive");
  if (spec.budget > max_budget) throw std::invalid_argument("run_trial: budget exceeds max_budget");
  if (spec.schedule.batch_size == 0) throw std::invalid_argument("run_trial: batch_size must be positive");
  spec.config.validate();

  const auto t0 = std::chrono::steady_clock::now();
  const DomainPair& pair = *spec.pair;
  TrialRecord rec;
  rec.config = spec.config;
  rec.budget = spec.budget;
  rec.seed = spec.seed;

  Network net = build_network(spec.config, trial_dims(spec), spec.seed);
  SgdState opt;
  Rng rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick_s(0, pair.source_x.rows() - 1);
  std::uniform_int_distribution<std::size_t> pick_t(0, pair.target_x.rows() - 1);
  const std::size_t bs = spec.schedule.batch_size;
  std::vector<std::size_t> si(bs), ti(bs);
  const int every = effective_snapshot_every(spec);

  Batch batch;
  batch.source_y.resize(bs);
  for (int it = 0; it < spec.budget; ++it) {
    const double p = static_cast<double>(it) / static_cast<double>(max_budget);
    for (std::size_t b = 0; b < bs; ++b) {
      si[b] = pick_s(rng);
      ti[b] = pick_t(rng);
      batch.source_y[b] = pair.source_y[si[b]];
    }
    batch.source_x = select_rows(pair.source_x, si);
    batch.target_x = select_rows(pair.target_x, ti);

    Tape tape;
    const NetworkVars vars = bind(tape, net);
    LossOptions lo;
    lo.mode = spec.mode;
    lo.dann_form = spec.dann_form;
    lo.lambda = spec.config.lambda;
    lo.rho = grl_rho_at(spec.schedule, p);
    lo.dropout = Dropout{spec.config.dropout_p, &rng};
    const LossTerms terms = build_total_loss(tape, vars, batch, lo);
    const double loss = tape.value(terms.total)(0, 0);
    rec.final_loss = loss;
    if (!std::isfinite(loss)) {
      rec.status = TrialStatus::diverged;
      rec.divergence_reason = "non-finite loss at iteration " + std::to_string(it);
      break;
    }
    tape.backward(terms.total);
    net.grl_lambda = lo.rho;
    sgd_step(net, collect_grads(tape, vars), opt, spec.schedule, p);

    if ((it + 1) % every == 0 || it + 1 == spec.budget) {
      bool finite = true;
      net.for_each_param([&](const Matrix& m, ParamGroup) { finite = finite && m.all_finite(); });
      if (!finite) {
        rec.status = TrialStatus::diverged;
        rec.divergence_reason = "non-finite parameters at iteration " + std::to_string(it + 1);
        break;
      }
      std::vector<int> pred;
      rec.snapshots.push_back(snapshot_metrics(net, pair, &pred));
      rec.predictions.epochs.push_back(std::move(pred));
      rec.snapshot_iterations.push_back(it + 1);
    }
  }

  if (!rec.predictions.epochs.empty()) {
    const std::vector<double> pl = pseudo_label_accuracy(rec.predictions);
    for (std::size_t e = 0; e < pl.size(); ++e) rec.snapshots[e].pseudo_label_acc = pl[e];
  }
  if (rec.completed() && spec.budget == max_budget) {
    const double chance = 1.0 / static_cast<double>(pair.n_classes);
    if (rec.snapshots.back().source_acc < chance + spec.divergence_margin) {
      rec.status = TrialStatus::diverged;
      rec.divergence_reason = "source accuracy at chance level";
    }
  }
  if (spec.evaluate_target && pair.has_target_labels()) attach_target_accuracy(rec, pair.hidden_target_labels);
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

}  // namespace abas
