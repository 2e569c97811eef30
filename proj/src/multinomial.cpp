#include "hmmpanel/multinomial.hpp"

#include <cmath>
#include <limits>

namespace hmmpanel {

static void check_shapes(const MatrixXd& design, const MatrixXd& weights,
                         int baseline, const MatrixXd& coef) {
  if (design.rows() != weights.rows())
    throw InvalidInput("design and weight row counts differ");
  const auto C = weights.cols();
  if (baseline < 0 || baseline >= C) throw InvalidInput("baseline out of range");
  if (coef.rows() != C - 1 || coef.cols() != design.cols())
    throw InvalidInput("coefficient matrix has wrong shape");
}

// n x C linear predictors with zero baseline column.
static MatrixXd linear_predictors(const MatrixXd& design, const MatrixXd& coef,
                                  int baseline) {
  const auto n = design.rows();
  const auto C = coef.rows() + 1;
  MatrixXd eta = MatrixXd::Zero(n, C);
  Eigen::Index row = 0;
  for (Eigen::Index c = 0; c < C; ++c) {
    if (c == baseline) continue;
    eta.col(c) = design * coef.row(row).transpose();
    ++row;
  }
  return eta;
}

static MatrixXd probs_from_eta(const MatrixXd& eta) {
  MatrixXd p(eta.rows(), eta.cols());
  for (Eigen::Index i = 0; i < eta.rows(); ++i) {
    double m = eta.row(i).maxCoeff();
    double s = 0.0;
    for (Eigen::Index c = 0; c < eta.cols(); ++c) {
      p(i, c) = std::exp(eta(i, c) - m);
      s += p(i, c);
    }
    p.row(i) /= s;
  }
  return p;
}

MatrixXd multinomial_probs(const MatrixXd& design, const MatrixXd& coef,
                           int baseline) {
  return probs_from_eta(linear_predictors(design, coef, baseline));
}

static double objective_from_eta(const MatrixXd& eta, const MatrixXd& weights) {
  double obj = 0.0;
  for (Eigen::Index i = 0; i < eta.rows(); ++i) {
    double m = eta.row(i).maxCoeff();
    double s = 0.0;
    for (Eigen::Index c = 0; c < eta.cols(); ++c) s += std::exp(eta(i, c) - m);
    double logz = m + std::log(s);
    for (Eigen::Index c = 0; c < eta.cols(); ++c) {
      double w = weights(i, c);
      if (w > 0.0) obj += w * (eta(i, c) - logz);
    }
  }
  return obj;
}

double multinomial_objective(const MatrixXd& design, const MatrixXd& weights,
                             const MatrixXd& coef, int baseline) {
  check_shapes(design, weights, baseline, coef);
  return objective_from_eta(linear_predictors(design, coef, baseline), weights);
}

static VectorXd gradient_from_probs(const MatrixXd& design,
                                    const MatrixXd& weights, const MatrixXd& p,
                                    const VectorXd& row_total, int baseline) {
  const auto q = design.cols();
  const auto C = weights.cols();
  VectorXd g((C - 1) * q);
  Eigen::Index row = 0;
  for (Eigen::Index c = 0; c < C; ++c) {
    if (c == baseline) continue;
    VectorXd resid = weights.col(c) - row_total.cwiseProduct(p.col(c));
    g.segment(row * q, q) = design.transpose() * resid;
    ++row;
  }
  return g;
}

VectorXd multinomial_gradient(const MatrixXd& design, const MatrixXd& weights,
                              const MatrixXd& coef, int baseline) {
  check_shapes(design, weights, baseline, coef);
  MatrixXd p = probs_from_eta(linear_predictors(design, coef, baseline));
  return gradient_from_probs(design, weights, p, weights.rowwise().sum(),
                             baseline);
}

// Negative Hessian of the weighted multinomial log-likelihood (PSD).
static MatrixXd neg_hessian(const MatrixXd& design, const VectorXd& row_total,
                            const MatrixXd& p, int baseline) {
  const auto q = design.cols();
  const auto C = p.cols();
  const auto D = (C - 1) * q;
  MatrixXd H = MatrixXd::Zero(D, D);
  std::vector<Eigen::Index> cats;
  for (Eigen::Index c = 0; c < C; ++c)
    if (c != baseline) cats.push_back(c);
  MatrixXd outer(q, q);
  for (Eigen::Index i = 0; i < design.rows(); ++i) {
    double w = row_total[i];
    if (w <= 0.0) continue;
    outer.noalias() = design.row(i).transpose() * design.row(i);
    for (std::size_t a = 0; a < cats.size(); ++a) {
      double pa = p(i, cats[a]);
      for (std::size_t b = a; b < cats.size(); ++b) {
        double pb = p(i, cats[b]);
        double c_ab = w * (a == b ? pa * (1.0 - pa) : -pa * pb);
        if (c_ab == 0.0) continue;
        H.block(a * q, b * q, q, q) += c_ab * outer;
        if (a != b) H.block(b * q, a * q, q, q) += c_ab * outer;
      }
    }
  }
  return H;
}

// Largest |eta| over rows that carry weight; the cap only applies there.
static double max_abs_eta(const MatrixXd& eta, const VectorXd& row_total) {
  double m = 0.0;
  for (Eigen::Index i = 0; i < eta.rows(); ++i) {
    if (row_total[i] <= 0.0) continue;
    m = std::max(m, eta.row(i).cwiseAbs().maxCoeff());
  }
  return m;
}

// Largest s <= t with max|eta + s*deta| <= cap over weighted rows; the
// binding entry lands on the boundary.
static double cap_scale(const MatrixXd& eta, const MatrixXd& deta,
                        const VectorXd& row_total, double cap, double t) {
  double s = t;
  for (Eigen::Index i = 0; i < eta.rows(); ++i) {
    if (row_total[i] <= 0.0) continue;
    for (Eigen::Index c = 0; c < eta.cols(); ++c) {
      double d = deta(i, c);
      if (d == 0.0) continue;
      double e0 = eta(i, c);
      if (std::abs(e0 + s * d) <= cap) continue;
      double bound = d > 0.0 ? (cap - e0) / d : (-cap - e0) / d;
      s = std::min(s, std::max(0.0, bound));
    }
  }
  return s;
}

MultinomialResult maximize_multinomial(const MatrixXd& design,
                                       const MatrixXd& weights, int baseline,
                                       const MatrixXd& start,
                                       const NewtonOptions& opts) {
  check_shapes(design, weights, baseline, start);
  const auto q = design.cols();
  const auto C = weights.cols();
  const auto D = (C - 1) * q;

  MultinomialResult res;
  res.coef = start;
  if (D == 0) {
    res.converged = true;
    return res;
  }
  VectorXd row_total = weights.rowwise().sum();
  MatrixXd eta = linear_predictors(design, res.coef, baseline);
  double obj = objective_from_eta(eta, weights);
  bool capped = max_abs_eta(eta, row_total) >= opts.logit_cap - 1e-9;
  bool stalled = false;
  // iterate well past the contract tolerance so the solution is sharp
  const double target_tol = opts.grad_tol * 1e-3;

  for (int it = 1; it <= opts.max_iter && !stalled; ++it) {
    res.iterations = it;
    MatrixXd p = probs_from_eta(eta);
    VectorXd g = gradient_from_probs(design, weights, p, row_total, baseline);
    if (g.cwiseAbs().maxCoeff() <= target_tol) {
      res.converged = true;
      break;
    }
    MatrixXd A = neg_hessian(design, row_total, p, baseline);
    VectorXd delta;
    double ridge = 0.0;
    for (;;) {
      Eigen::LLT<MatrixXd> llt(
          ridge == 0.0 ? A : MatrixXd(A + ridge * MatrixXd::Identity(D, D)));
      if (llt.info() == Eigen::Success) {
        delta = llt.solve(g);
        break;
      }
      ridge = ridge == 0.0 ? opts.ridge : ridge * 10.0;
      if (ridge > 1.0) {
        stalled = true;
        break;
      }
    }
    if (stalled) break;

    MatrixXd dcoef(C - 1, q);
    for (Eigen::Index r = 0; r < C - 1; ++r)
      dcoef.row(r) = delta.segment(r * q, q).transpose();
    MatrixXd deta = linear_predictors(design, dcoef, baseline);

    bool accepted = false;
    double step = 1.0;
    for (int h = 0; h <= opts.max_halvings; ++h, step *= 0.5) {
      double s = cap_scale(eta, deta, row_total, opts.logit_cap, step);
      if (s < step) capped = true;
      if (s < 1e-18) continue;
      double obj_new = objective_from_eta(eta + s * deta, weights);
      if (obj_new >= obj - 1e-12 * (1.0 + std::abs(obj))) {
        double improvement = obj_new - obj;
        res.coef += s * dcoef;
        eta += s * deta;
        obj = obj_new;
        accepted = true;
        if (improvement <= 1e-10 * (1.0 + std::abs(obj))) stalled = true;
        break;
      }
    }
    if (!accepted) stalled = true;
  }

  res.objective = obj;
  double final_max = max_abs_eta(eta, row_total);
  if (!res.converged) {
    VectorXd g = multinomial_gradient(design, weights, res.coef, baseline);
    if (g.cwiseAbs().maxCoeff() <= opts.grad_tol) {
      res.converged = true;
    } else if (!(capped && final_max >= opts.logit_cap - 1e-6)) {
      throw NewtonFailed("multinomial Newton-Raphson did not converge");
    }
  }
  // quasi-separation: the solution ran into (or close to) the logit cap
  if (final_max >= opts.logit_cap - 10.0) res.separation = true;
  return res;
}

static VectorXd with_intercept(const VectorXd& x) {
  VectorXd xt(x.size() + 1);
  xt[0] = 1.0;
  xt.tail(x.size()) = x;
  return xt;
}

VectorXd initial_probs(const VectorXd& x, const InitialLogitParams& params) {
  const int k = params.k();
  VectorXd probs = VectorXd::Zero(k + 1);
  if (k == 1) {
    probs[0] = 1.0;
    return probs;
  }
  if (x.size() + 1 != params.coef.cols())
    throw InvalidInput("covariate vector length does not match coefficients");
  VectorXd xt = with_intercept(x);
  VectorXd eta = VectorXd::Zero(k);
  for (int u = 1; u < k; ++u) eta[u] = params.coef.row(u - 1).dot(xt);
  double m = eta.maxCoeff();
  double s = 0.0;
  for (int u = 0; u < k; ++u) {
    probs[u] = std::exp(eta[u] - m);
    s += probs[u];
  }
  for (int u = 0; u < k; ++u) probs[u] /= s;
  probs[k] = 0.0;
  return probs;
}

VectorXd transition_probs(const VectorXd& x, int origin,
                          const TransitionLogitParams& params) {
  const int k = params.k();
  if (origin < 0 || origin > k) throw InvalidInput("origin out of range");
  VectorXd probs = VectorXd::Zero(k + 1);
  if (origin == k) {  // absorbing state
    probs[k] = 1.0;
    return probs;
  }
  if (x.size() + 1 != params.coef[origin].cols())
    throw InvalidInput("covariate vector length does not match coefficients");
  VectorXd xt = with_intercept(x);
  VectorXd eta = VectorXd::Zero(k + 1);
  for (int u = 0; u <= k; ++u) {
    if (u == origin) continue;
    eta[u] =
        params.coef[origin].row(TransitionLogitParams::dest_row(origin, u)).dot(xt);
  }
  double m = eta.maxCoeff();
  double s = 0.0;
  for (int u = 0; u <= k; ++u) {
    probs[u] = std::exp(eta[u] - m);
    s += probs[u];
  }
  for (int u = 0; u <= k; ++u) probs[u] /= s;
  return probs;
}

InitialFit maximize_initial(const MatrixXd& design, const MatrixXd& weights,
                            const InitialLogitParams& start,
                            const NewtonOptions& opts) {
  InitialFit fit;
  fit.params = start;
  if (start.k() == 1) {
    fit.converged = true;
    return fit;
  }
  MultinomialResult res =
      maximize_multinomial(design, weights, 0, start.coef, opts);
  fit.params.coef = res.coef;
  fit.converged = res.converged;
  fit.separation = res.separation;
  return fit;
}

TransitionFit maximize_transition(const MatrixXd& design,
                                  const std::vector<MatrixXd>& weights,
                                  const TransitionLogitParams& start,
                                  const NewtonOptions& opts) {
  const int k = start.k();
  if (static_cast<int>(weights.size()) != k)
    throw InvalidInput("one weight matrix per substantive origin is required");
  TransitionFit fit;
  fit.params = start;
  fit.row_converged.assign(k, 0);
  for (int ubar = 0; ubar < k; ++ubar) {
    try {
      MultinomialResult res = maximize_multinomial(design, weights[ubar], ubar,
                                                   start.coef[ubar], opts);
      fit.params.coef[ubar] = res.coef;
      fit.row_converged[ubar] = res.converged ? 1 : 0;
      fit.separation = fit.separation || res.separation;
    } catch (const NewtonFailed&) {
      fit.row_converged[ubar] = 0;  // keep the start row
    }
  }
  return fit;
}

}  // namespace hmmpanel
