#pragma once

#include <cstdint>
#include <vector>

#include "hmmpanel/hmm.hpp"

namespace hmmpanel {

// Monte Carlo generating configuration: a balanced panel of n subjects over T
// occasions, cellwise intermittent missingness with probability p_miss, and
// dropout driven by the absorbing column of the true transition matrix.
struct ScenarioSpec {
  int k = 2;
  int n = 500;
  int T = 5;
  int r = 3;
  HmmParams true_params;
  double p_miss = 0.0;
  double p_drop = 0.0;
  int n_reps = 250;
  std::uint64_t seed = 1;

  void validate() const;
};

// The study grid: k in {2,3}, p level in {.01,.05,.10,.25} used for both the
// missingness and the dropout probability.
ScenarioSpec default_scenario(int k, int n, double p);

PanelDataset generate_panel(const ScenarioSpec& spec, int rep_index);
PanelDataset generate_panel_with_labels(const ScenarioSpec& spec, int rep_index,
                                        std::vector<std::vector<int>>* labels);

struct StudyOptions {
  HmmFitOptions fit;
  int workers = 1;
};

struct BlockSummary {
  double abs_bias = 0.0;  // mean over entries of |bias|
  double sd = 0.0;        // mean over entries of the replicate sd
  double rmse = 0.0;      // mean over entries of sqrt(bias^2 + sd^2)
};

struct StudyReport {
  int n_reps = 0;
  int n_completed = 0;
  int n_failed = 0;
  BlockSummary mu, sigma, pi, trans;
  MatrixXd avg_transition;       // (k+1)x(k+1), mean of aligned estimates
  MatrixXd true_transition;
  std::vector<VectorXd> avg_means;
  VectorXd avg_initial;
};

StudyReport run_study(const ScenarioSpec& spec, const StudyOptions& opts);

}  // namespace hmmpanel
