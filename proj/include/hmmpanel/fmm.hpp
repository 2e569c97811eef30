#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "hmmpanel/gaussian.hpp"
#include "hmmpanel/multinomial.hpp"

namespace hmmpanel {

// Cross-sectional observations with per-row missingness. Missing cells hold
// NaN, mirrored by the pattern.
struct CrossSection {
  MatrixXd y;  // n x r
  std::vector<ObsPattern> patterns;
  std::optional<MatrixXd> covariates;  // n x p

  int n() const { return static_cast<int>(y.rows()); }
  int r() const { return static_cast<int>(y.cols()); }
  int p() const { return covariates ? static_cast<int>(covariates->cols()) : 0; }
  VectorXd observed_values(int i) const;
  void validate() const;
};

// Finite mixture of Gaussians under MAR. Component covariances are stored
// per component; a homoscedastic fit keeps them equal. Weights are either
// shared probabilities or multinomial-logit coefficients on covariates.
struct FmmParams {
  int k = 1;
  std::vector<VectorXd> means;
  std::vector<MatrixXd> covs;
  VectorXd weights;  // length k
  std::optional<InitialLogitParams> beta;

  int r() const { return means.empty() ? 0 : static_cast<int>(means[0].size()); }
  bool has_covariates() const { return beta.has_value(); }
  void validate() const;
  VectorXd weights_for(const CrossSection& data, int i) const;
};

struct FmmEStep {
  MatrixXd posterior;  // n x k
  std::vector<std::vector<ConditionalMoments>> moments;  // [i][u]
  double loglik = 0.0;
};

struct FmmOptions {
  bool homoscedastic = false;
  bool covariates = false;
  double tol = 1e-8;
  int max_iter = 5000;
  bool complete_fast_path = false;
  NewtonOptions newton;
};

struct FmmFitOptions : FmmOptions {
  bool deterministic_start = true;
  int n_random_starts = -1;  // -1 resolves to 5*k
  std::uint64_t seed = 1;
  int workers = 1;
};

struct FmmFitResult {
  FmmParams params;
  double loglik = 0.0;
  std::vector<double> loglik_trace;
  int n_par = 0;
  double aic = 0.0, bic = 0.0;
  int iterations = 0;
  bool converged = false;
  int best_start = -1;
  int n_starts = 0;
  int failed_starts = 0;
};

double fmm_loglik(const CrossSection& data, const FmmParams& params);
FmmEStep fmm_e_step(const CrossSection& data, const FmmParams& params);
FmmParams fmm_m_step(const CrossSection& data, const FmmEStep& e,
                     const FmmParams& params, const FmmOptions& opts = {});
int fmm_n_par(int k, int r, int p, bool homoscedastic, bool covariates);
FmmFitResult fit_fmm(const CrossSection& data, int k,
                     const FmmFitOptions& opts = {});
MatrixXd fmm_impute(const CrossSection& data, const FmmParams& params,
                    ImputeMode mode);
std::vector<int> fmm_map_labels(const MatrixXd& posterior);

}  // namespace hmmpanel
