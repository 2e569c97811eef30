#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hmmpanel/hmm.hpp"

namespace hmmpanel {

std::vector<int> viterbi_decode(const SubjectRecord& rec,
                                const HmmParams& params);
double viterbi_path_score(const SubjectRecord& rec, const HmmParams& params,
                          const std::vector<int>& path);
std::vector<std::vector<int>> local_decode(const LatentPosterior& posterior);

struct DecodedPanel {
  std::vector<std::vector<int>> local;   // [subject][occasion], 0-based states
  std::vector<std::vector<int>> global;  // joint-MAP paths
  LatentPosterior posterior;
};

DecodedPanel decode_panel(const PanelDataset& data, const HmmParams& params,
                          const EmOptions& opts = {});

// Fills missing response cells on non-dropout occasions; dropout occasions
// are left untouched. Conditional mode uses the locally decoded state;
// unconditional mode weights by the smoothed substantive-state posterior.
PanelDataset impute_missing(const PanelDataset& data, const HmmParams& params,
                            const LatentPosterior& posterior, ImputeMode mode);

struct SelectionRow {
  int k = 0;
  double loglik = 0.0;
  int n_par = 0;
  double aic = 0.0, bic = 0.0;
  bool converged = false;
  bool fit_failed = false;
};

struct SelectionReport {
  std::vector<SelectionRow> rows;
  std::vector<double> bic_diff;      // successive differences over successes
  int best_k = -1;                   // argmin BIC over successes
  std::vector<int> nonmonotone_k;    // k where loglik dropped below a smaller k
};

SelectionReport select_k(const PanelDataset& data,
                         const std::vector<int>& k_range,
                         const HmmFitOptions& opts);

// Constrained-layout flattening (reporting layout for bootstrap SEs).
struct FlatParams {
  std::vector<std::string> names;
  VectorXd values;
};
FlatParams flatten_params(const HmmParams& params);

struct StdErrReport {
  std::string method;  // "bootstrap" | "information"
  std::vector<std::string> names;
  VectorXd estimate;
  VectorXd se;
  int replicates = 0;
  int converged_replicates = 0;
  int failed_replicates = 0;
  bool non_pd = false;
  std::vector<char> at_boundary;  // information method only
};

StdErrReport bootstrap_se(const PanelDataset& data, int k,
                          const FitResult& fitted, int b_reps,
                          std::uint64_t seed, const HmmFitOptions& opts);

// Unconstrained layout: raw means, log-Cholesky covariance, multinomial
// logits (or B/Gamma coefficients with covariates). Probabilities pinned at
// the boundary are excluded from differentiation and reported with SE 0.
struct PackedParams {
  VectorXd theta;
  std::vector<std::string> names;
  std::vector<char> at_boundary;
};

PackedParams pack_unconstrained(const HmmParams& params);
HmmParams unpack_unconstrained(const VectorXd& theta,
                               const HmmParams& reference);

// Observed-data score via the Oakes identity: E-step at `params`, then the
// gradient of the expected complete-data log-likelihood at the same point.
VectorXd observed_score(const PanelDataset& data, const HmmParams& params,
                        const EmOptions& opts = {});

StdErrReport info_matrix_se(const PanelDataset& data, const FitResult& fitted,
                            const EmOptions& opts = {});

}  // namespace hmmpanel
