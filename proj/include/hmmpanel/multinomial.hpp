#pragma once

#include <Eigen/Dense>
#include <vector>

#include "hmmpanel/errors.hpp"

namespace hmmpanel {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct NewtonOptions {
  int max_iter = 100;
  double grad_tol = 1e-6;
  int max_halvings = 30;
  double ridge = 1e-8;
  double logit_cap = 30.0;
};

struct MultinomialResult {
  MatrixXd coef;  // (C-1) x q, rows = categories != baseline in index order
  bool converged = false;
  bool separation = false;
  int iterations = 0;
  double objective = 0.0;
};

// Weighted multinomial log-likelihood maximization by Newton-Raphson with
// step halving. `weights` rows need not be normalized; zero-weight rows are
// inert. Linear predictors are capped at +-logit_cap (quasi-separation);
// hitting the cap sets the separation flag instead of failing. Throws
// NewtonFailed when neither convergence nor the cap explains the stall.
MultinomialResult maximize_multinomial(const MatrixXd& design,
                                       const MatrixXd& weights, int baseline,
                                       const MatrixXd& start,
                                       const NewtonOptions& opts = {});

MatrixXd multinomial_probs(const MatrixXd& design, const MatrixXd& coef,
                           int baseline);
double multinomial_objective(const MatrixXd& design, const MatrixXd& weights,
                             const MatrixXd& coef, int baseline);
VectorXd multinomial_gradient(const MatrixXd& design, const MatrixXd& weights,
                              const MatrixXd& coef, int baseline);

// Initial-probability logits: row u-2 holds (beta_0u, beta_1u') for states
// u = 2..k against reference state 1. The dropout state has probability 0 at
// the first occasion and carries no parameters.
struct InitialLogitParams {
  MatrixXd coef;  // (k-1) x (1+p)

  int k() const { return static_cast<int>(coef.rows()) + 1; }
  int n_covariates() const { return static_cast<int>(coef.cols()) - 1; }
};

// Transition logits per origin row: coef[ubar] is k x (1+p); its rows map to
// destinations u != ubar in increasing index order (the self-transition is
// the baseline). Destinations include the dropout state k (0-based); the
// dropout origin is fixed and has no parameters.
struct TransitionLogitParams {
  std::vector<MatrixXd> coef;

  int k() const { return static_cast<int>(coef.size()); }
  int n_covariates() const {
    return coef.empty() ? 0 : static_cast<int>(coef[0].cols()) - 1;
  }
  static int dest_row(int origin, int dest) {
    return dest < origin ? dest : dest - 1;
  }
  static int row_dest(int origin, int row) {
    return row < origin ? row : row + 1;
  }
};

// Probabilities over states 0..k (0-based; index k = dropout). x excludes
// the intercept, which is prepended internally.
VectorXd initial_probs(const VectorXd& x, const InitialLogitParams& params);
VectorXd transition_probs(const VectorXd& x, int origin,
                          const TransitionLogitParams& params);

struct InitialFit {
  InitialLogitParams params;
  bool converged = false;
  bool separation = false;
};

struct TransitionFit {
  TransitionLogitParams params;
  std::vector<char> row_converged;
  bool separation = false;
};

// design includes the intercept column; weights is n x k over substantive
// states. Throws NewtonFailed on non-convergence (caller keeps its start).
InitialFit maximize_initial(const MatrixXd& design, const MatrixXd& weights,
                            const InitialLogitParams& start,
                            const NewtonOptions& opts = {});

// design is R x (1+p) over all transition occasions; weights[ubar] is
// R x (k+1) of pairwise posteriors out of origin ubar. Per-origin Newton
// failures are non-fatal: the start row is kept and flagged.
TransitionFit maximize_transition(const MatrixXd& design,
                                  const std::vector<MatrixXd>& weights,
                                  const TransitionLogitParams& start,
                                  const NewtonOptions& opts = {});

}  // namespace hmmpanel
