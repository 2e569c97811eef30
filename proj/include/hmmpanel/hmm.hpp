#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "hmmpanel/gaussian.hpp"
#include "hmmpanel/multinomial.hpp"
#include "hmmpanel/panel.hpp"

namespace hmmpanel {

// Gaussian-emission hidden Markov model with k substantive states plus an
// absorbing dropout state (index k, 0-based). The shared covariance and the
// absorbing-state constraints follow the homoscedastic formulation. The
// latent model is either held as probabilities (initial/transition) or, with
// covariates, as multinomial-logit coefficients B and Gamma; in the latter
// case `initial` and `transition` are ignored.
struct HmmParams {
  int k = 1;
  std::vector<VectorXd> means;  // k vectors of length r
  MatrixXd cov;                 // r x r shared
  VectorXd initial;             // k+1, last entry exactly 0
  MatrixXd transition;          // (k+1)x(k+1), last row (0,...,0,1)
  std::optional<InitialLogitParams> B;
  std::optional<TransitionLogitParams> Gamma;

  int n_states() const { return k + 1; }
  int r() const { return means.empty() ? 0 : static_cast<int>(means[0].size()); }
  bool has_covariates() const { return B.has_value(); }
  void validate() const;

  VectorXd initial_for(const SubjectRecord& rec) const;
  // Transition matrix into occasion t (0-based, t >= 1).
  MatrixXd transition_for(const SubjectRecord& rec, int t) const;
};

struct SubjectPosterior {
  MatrixXd smoothed;               // T x (k+1)
  std::vector<MatrixXd> pairwise;  // T-1 slices, (k+1)x(k+1)
  double loglik = 0.0;
};

using LatentPosterior = std::vector<SubjectPosterior>;

// Conditional moments for one non-dropout occasion: expect row u holds
// E(Y_it | y_it^o, u); the variance correction is shared across states under
// the common covariance. Dropout occasions carry empty matrices.
struct OccasionMoments {
  MatrixXd expect;           // k x r
  MatrixXd var_correction;   // r x r
};

struct EStepResult {
  LatentPosterior posterior;
  std::vector<std::vector<OccasionMoments>> moments;  // [subject][occasion]
  double loglik = 0.0;
};

struct EmOptions {
  double tol = 1e-8;
  int max_iter = 5000;
  bool covariates = false;
  // Skips the missing-data machinery; valid only for panels with no missing
  // cells and no dropout (reduction testing).
  bool complete_fast_path = false;
  NewtonOptions newton;
  int workers = 1;
};

struct HmmFitOptions : EmOptions {
  bool deterministic_start = true;
  int n_random_starts = -1;  // -1 resolves to 5*k
  double h = 9.0;            // deterministic transition start constant
  std::uint64_t seed = 1;
};

struct FitResult {
  HmmParams params;
  double loglik = 0.0;
  std::vector<double> loglik_trace;  // winning start
  int n_par = 0;
  double aic = 0.0, bic = 0.0;
  int iterations = 0;
  bool converged = false;
  int best_start = -1;
  int n_starts = 0;
  int failed_starts = 0;
  bool separation = false;
};

double emission_logdensity(const SubjectRecord& rec, int t, int u,
                           const HmmParams& params);
// T x (k+1) log emission matrix including the dropout-indicator factor.
MatrixXd emission_log_matrix(const SubjectRecord& rec, const HmmParams& params,
                             const PatternedGaussian& pg);

SubjectPosterior forward_backward(const SubjectRecord& rec,
                                  const HmmParams& params);

EStepResult e_step(const PanelDataset& data, const HmmParams& params,
                   const EmOptions& opts = {});
// `separation`, when non-null, is set when a latent-model Newton solve hits
// the logit cap (quasi-separation).
HmmParams m_step(const PanelDataset& data, const EStepResult& e,
                 const HmmParams& params, const EmOptions& opts = {},
                 bool* separation = nullptr);

int hmm_n_par(int k, int r, int p, bool covariates);

HmmParams hmm_deterministic_start(const PanelDataset& data, int k, double h,
                                  bool covariates);
HmmParams hmm_random_start(const PanelDataset& data, int k,
                           std::mt19937_64& rng, bool covariates);

struct EmRun {
  HmmParams params;
  std::vector<double> trace;
  int iterations = 0;
  bool converged = false;
  bool separation = false;
};

EmRun run_em(const PanelDataset& data, const HmmParams& start,
             const EmOptions& opts);

FitResult fit_hmm(const PanelDataset& data, int k,
                  const HmmFitOptions& opts = {});

// Relabeling: perm[new] = old substantive index; the dropout state is fixed.
HmmParams apply_state_permutation(const HmmParams& params,
                                  const std::vector<int>& perm);
HmmParams sort_states_by_first_mean(const HmmParams& params);
// Permutation sigma with est[sigma[u]] closest to ref[u] in total squared
// distance.
std::vector<int> best_mean_permutation(const std::vector<VectorXd>& est,
                                       const std::vector<VectorXd>& ref);

// Pairwise-complete descriptive moments of the observed responses.
void observed_descriptives(const PanelDataset& data, VectorXd* mean,
                           VectorXd* sd, MatrixXd* cov);

}  // namespace hmmpanel
