#pragma once

#include <limits>
#include <string>
#include <vector>

#include "abas/metrics.hpp"
#include "abas/network.hpp"

namespace abas {

enum class TrialStatus { completed, diverged };

inline const char* to_string(TrialStatus s) { return s == TrialStatus::completed ? "completed" : "diverged"; }

/// Outcome of training one configuration at one budget.
struct TrialRecord {
  int trial_id = -1;
  BranchConfig config;
  int budget = 0;  // optimizer iterations
  std::uint64_t seed = 0;
  TrialStatus status = TrialStatus::completed;
  std::string divergence_reason;

  std::vector<int> snapshot_iterations;
  std::vector<SnapshotMetrics> snapshots;
  PredictionHistory predictions;  // target argmax per snapshot
  double final_loss = 0.0;

  double ems_score = -std::numeric_limits<double>::infinity();
  double wall_seconds = 0.0;

  // Report-only ground truth, one entry per snapshot. Filled only by
  // evaluation code paths; never consulted by training or selection.
  std::vector<double> target_accuracy;

  bool completed() const noexcept { return status == TrialStatus::completed; }
  double ranking_score() const noexcept {
    return completed() ? ems_score : -std::numeric_limits<double>::infinity();
  }
};

}  // namespace abas
