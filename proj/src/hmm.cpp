#include "hmmpanel/hmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "hmmpanel/parallel.hpp"
#include "hmmpanel/rng.hpp"

namespace hmmpanel {

static constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void HmmParams::validate() const {
  if (k < 1) throw InvalidInput("k must be at least 1");
  if (static_cast<int>(means.size()) != k)
    throw InvalidInput("means must hold one vector per substantive state");
  const int dim = r();
  for (const auto& m : means)
    if (m.size() != dim) throw InvalidInput("state means have unequal lengths");
  GaussianParams gp{means[0], cov};
  gp.validate();
  if (has_covariates()) {
    if (!Gamma) throw InvalidInput("covariate parameters require both B and Gamma");
    if (B->k() != k) throw InvalidInput("B has the wrong number of rows");
    if (Gamma->k() != k) throw InvalidInput("Gamma has the wrong number of origins");
    for (const auto& g : Gamma->coef)
      if (g.rows() != k || g.cols() != B->coef.cols())
        throw InvalidInput("Gamma blocks have the wrong shape");
    return;
  }
  if (initial.size() != k + 1) throw InvalidInput("initial must have length k+1");
  if (initial[k] != 0.0)
    throw InvalidInput("initial probability of the dropout state must be 0");
  if (initial.minCoeff() < 0.0) throw InvalidInput("negative initial probability");
  if (std::abs(initial.sum() - 1.0) > 1e-12)
    throw InvalidInput("initial probabilities must sum to 1");
  if (transition.rows() != k + 1 || transition.cols() != k + 1)
    throw InvalidInput("transition matrix must be (k+1)x(k+1)");
  if (transition.minCoeff() < 0.0)
    throw InvalidInput("negative transition probability");
  for (int u = 0; u <= k; ++u)
    if (std::abs(transition.row(u).sum() - 1.0) > 1e-12)
      throw InvalidInput("transition rows must sum to 1");
  for (int u = 0; u < k; ++u)
    if (transition(k, u) != 0.0)
      throw InvalidInput("absorbing state must not leave");
  if (transition(k, k) != 1.0)
    throw InvalidInput("absorbing state must self-transition with probability 1");
}

VectorXd HmmParams::initial_for(const SubjectRecord& rec) const {
  if (!has_covariates()) return initial;
  VectorXd x = rec.covariates ? VectorXd(rec.covariates->row(0))
                              : VectorXd(VectorXd::Zero(0));
  return initial_probs(x, *B);
}

MatrixXd HmmParams::transition_for(const SubjectRecord& rec, int t) const {
  if (!has_covariates()) return transition;
  VectorXd x = rec.covariates ? VectorXd(rec.covariates->row(t))
                              : VectorXd(VectorXd::Zero(0));
  MatrixXd P(k + 1, k + 1);
  for (int ubar = 0; ubar <= k; ++ubar)
    P.row(ubar) = transition_probs(x, ubar, *Gamma).transpose();
  return P;
}

double emission_logdensity(const SubjectRecord& rec, int t, int u,
                           const HmmParams& params) {
  const int k = params.k;
  if (u < 0 || u > k) throw InvalidInput("state index out of range");
  if (t < 0 || t >= rec.n_occasions()) throw InvalidInput("occasion out of range");
  if (rec.dropout[t]) return u == k ? 0.0 : kNegInf;
  if (u == k) return kNegInf;
  if (rec.observed[t].none_observed()) return 0.0;
  GaussianParams gp{params.means[u], params.cov};
  return log_mvn_density(rec.observed_values(t), rec.observed[t], gp);
}

MatrixXd emission_log_matrix(const SubjectRecord& rec, const HmmParams& params,
                             const PatternedGaussian& pg) {
  const int k = params.k;
  const int T = rec.n_occasions();
  MatrixXd logE(T, k + 1);
  for (int t = 0; t < T; ++t) {
    if (rec.dropout[t]) {
      logE.row(t).setConstant(kNegInf);
      logE(t, k) = 0.0;
      continue;
    }
    logE(t, k) = kNegInf;
    if (rec.observed[t].none_observed()) {
      for (int u = 0; u < k; ++u) logE(t, u) = 0.0;
      continue;
    }
    VectorXd y_obs = rec.observed_values(t);
    if (const PatternOps* ops = pg.find(rec.observed[t])) {
      for (int u = 0; u < k; ++u)
        logE(t, u) = log_density_with(*ops, y_obs, params.means[u]);
    } else {
      PatternOps local = make_pattern_ops(pg.cov(), rec.observed[t]);
      for (int u = 0; u < k; ++u)
        logE(t, u) = log_density_with(local, y_obs, params.means[u]);
    }
  }
  return logE;
}

// Scaled forward-backward on one subject. Per occasion the emission logs are
// shifted by their maximum before exponentiating, so the recursion runs on
// well-scaled probabilities while the shift accumulates into the
// log-likelihood.
static SubjectPosterior fb_core(const MatrixXd& logE, const VectorXd& init,
                                const std::vector<const MatrixXd*>& trans,
                                const std::string& id) {
  const auto T = logE.rows();
  const auto S = logE.cols();
  SubjectPosterior post;
  MatrixXd ahat(T, S);
  MatrixXd estar(T, S);  // exp(logE - shift)
  VectorXd shift(T), ctilde(T);
  double loglik = 0.0;

  VectorXd v(S);
  for (Eigen::Index u = 0; u < S; ++u)
    v[u] = std::log(init[u]) + logE(0, u);
  double m = v.maxCoeff();
  if (!(m > kNegInf)) throw ImpossibleObservation(id, 1);
  shift[0] = m;
  double c = 0.0;
  for (Eigen::Index u = 0; u < S; ++u) {
    estar(0, u) = std::exp(logE(0, u) - m);
    ahat(0, u) = std::exp(v[u] - m);
    c += ahat(0, u);
  }
  ahat.row(0) /= c;
  ctilde[0] = c;
  loglik += m + std::log(c);

  VectorXd pred(S);
  for (Eigen::Index t = 1; t < T; ++t) {
    pred.noalias() = trans[t - 1]->transpose() * ahat.row(t - 1).transpose();
    m = kNegInf;
    for (Eigen::Index u = 0; u < S; ++u) {
      v[u] = std::log(pred[u]) + logE(t, u);
      m = std::max(m, v[u]);
    }
    if (!(m > kNegInf))
      throw ImpossibleObservation(id, static_cast<int>(t) + 1);
    shift[t] = m;
    c = 0.0;
    for (Eigen::Index u = 0; u < S; ++u) {
      estar(t, u) = std::exp(logE(t, u) - m);
      ahat(t, u) = std::exp(v[u] - m);
      c += ahat(t, u);
    }
    ahat.row(t) /= c;
    ctilde[t] = c;
    loglik += m + std::log(c);
  }

  MatrixXd bhat(T, S);
  bhat.row(T - 1).setOnes();
  for (Eigen::Index t = T - 2; t >= 0; --t) {
    VectorXd w = estar.row(t + 1).cwiseProduct(bhat.row(t + 1)).transpose();
    bhat.row(t) = (*trans[t] * w).transpose() / ctilde[t + 1];
  }

  post.smoothed = ahat.cwiseProduct(bhat);
  post.pairwise.reserve(T - 1);
  for (Eigen::Index t = 1; t < T; ++t) {
    MatrixXd slice(S, S);
    for (Eigen::Index a = 0; a < S; ++a)
      for (Eigen::Index b = 0; b < S; ++b)
        slice(a, b) = ahat(t - 1, a) * (*trans[t - 1])(a, b) * estar(t, b) *
                      bhat(t, b) / ctilde[t];
    post.pairwise.push_back(std::move(slice));
  }
  post.loglik = loglik;
  return post;
}

static std::vector<const MatrixXd*> transition_pointers(
    const SubjectRecord& rec, const HmmParams& params,
    std::vector<MatrixXd>& storage) {
  const int T = rec.n_occasions();
  std::vector<const MatrixXd*> trans(std::max(0, T - 1));
  if (!params.has_covariates()) {
    for (int t = 1; t < T; ++t) trans[t - 1] = &params.transition;
  } else {
    storage.reserve(T - 1);
    for (int t = 1; t < T; ++t) {
      storage.push_back(params.transition_for(rec, t));
      trans[t - 1] = &storage.back();
    }
  }
  return trans;
}

SubjectPosterior forward_backward(const SubjectRecord& rec,
                                  const HmmParams& params) {
  PatternedGaussian pg(params.cov);
  for (int t = 0; t < rec.n_occasions(); ++t)
    if (!rec.dropout[t]) pg.prepare(rec.observed[t]);
  MatrixXd logE = emission_log_matrix(rec, params, pg);
  std::vector<MatrixXd> storage;
  auto trans = transition_pointers(rec, params, storage);
  return fb_core(logE, params.initial_for(rec), trans, rec.id);
}

// Fast path for panels without missing cells or dropout: full-vector
// densities, identity moments.
static void e_step_complete(const PanelDataset& data, const HmmParams& params,
                            const EmOptions& opts, EStepResult& out) {
  const int k = params.k;
  const int r = data.r;
  Eigen::LLT<MatrixXd> llt(params.cov);
  if (llt.info() != Eigen::Success)
    throw SingularCovariance("shared covariance is not positive definite");
  MatrixXd chol = llt.matrixL();
  double logdet = 0.0;
  for (int j = 0; j < r; ++j) logdet += 2.0 * std::log(chol(j, j));

  parallel_for(data.subjects.size(), opts.workers, [&](std::size_t i) {
    const SubjectRecord& rec = data.subjects[i];
    const int T = rec.n_occasions();
    MatrixXd logE(T, k + 1);
    auto& mom = out.moments[i];
    mom.resize(T);
    for (int t = 0; t < T; ++t) {
      if (rec.dropout[t] || !rec.observed[t].all_observed())
        throw InvalidInput("complete_fast_path requires complete data");
      logE(t, k) = kNegInf;
      VectorXd y = rec.responses.row(t).transpose();
      for (int u = 0; u < k; ++u) {
        VectorXd z = chol.triangularView<Eigen::Lower>().solve(y - params.means[u]);
        logE(t, u) = -0.5 * (r * kLog2Pi + logdet + z.squaredNorm());
      }
      mom[t].expect.resize(k, r);
      for (int u = 0; u < k; ++u) mom[t].expect.row(u) = rec.responses.row(t);
      mom[t].var_correction = MatrixXd::Zero(r, r);
    }
    std::vector<MatrixXd> storage;
    auto trans = transition_pointers(rec, params, storage);
    out.posterior[i] = fb_core(logE, params.initial_for(rec), trans, rec.id);
  });
}

EStepResult e_step(const PanelDataset& data, const HmmParams& params,
                   const EmOptions& opts) {
  const int k = params.k;
  const int r = data.r;
  if (params.r() != r)
    throw InvalidInput("parameter dimension does not match the panel");
  EStepResult out;
  out.posterior.resize(data.n());
  out.moments.resize(data.n());

  if (opts.complete_fast_path) {
    e_step_complete(data, params, opts, out);
  } else {
    PatternedGaussian pg(params.cov);
    for (const auto& rec : data.subjects)
      for (int t = 0; t < rec.n_occasions(); ++t)
        if (!rec.dropout[t]) pg.prepare(rec.observed[t]);

    parallel_for(data.subjects.size(), opts.workers, [&](std::size_t i) {
      const SubjectRecord& rec = data.subjects[i];
      const int T = rec.n_occasions();
      MatrixXd logE = emission_log_matrix(rec, params, pg);
      std::vector<MatrixXd> storage;
      auto trans = transition_pointers(rec, params, storage);
      out.posterior[i] = fb_core(logE, params.initial_for(rec), trans, rec.id);
      auto& mom = out.moments[i];
      mom.resize(T);
      for (int t = 0; t < T; ++t) {
        if (rec.dropout[t]) continue;
        const PatternOps* ops = pg.find(rec.observed[t]);
        VectorXd y_obs = rec.observed_values(t);
        mom[t].expect.resize(k, r);
        for (int u = 0; u < k; ++u) {
          ConditionalMoments cm = moments_with(*ops, y_obs, params.means[u]);
          mom[t].expect.row(u) = cm.expect.transpose();
          if (u == 0) mom[t].var_correction = std::move(cm.var_correction);
        }
      }
    });
  }

  double total = 0.0;
  for (const auto& sp : out.posterior) total += sp.loglik;
  out.loglik = total;
  return out;
}

HmmParams m_step(const PanelDataset& data, const EStepResult& e,
                 const HmmParams& params, const EmOptions& opts,
                 bool* separation) {
  const int k = params.k;
  const int r = data.r;
  HmmParams next = params;

  VectorXd occupancy = VectorXd::Zero(k);
  std::vector<VectorXd> mean_acc(k, VectorXd::Zero(r));
  long n0 = 0;
  for (int i = 0; i < data.n(); ++i) {
    const SubjectRecord& rec = data.subjects[i];
    const MatrixXd& z = e.posterior[i].smoothed;
    for (int t = 0; t < rec.n_occasions(); ++t) {
      if (rec.dropout[t]) continue;
      ++n0;
      const MatrixXd& expect = e.moments[i][t].expect;
      for (int u = 0; u < k; ++u) {
        occupancy[u] += z(t, u);
        mean_acc[u] += z(t, u) * expect.row(u).transpose();
      }
    }
  }
  for (int u = 0; u < k; ++u) {
    if (occupancy[u] < 1e-10) throw DegenerateComponent(u);
    next.means[u] = mean_acc[u] / occupancy[u];
  }

  MatrixXd scatter = MatrixXd::Zero(r, r);
  VectorXd dev(r);
  for (int i = 0; i < data.n(); ++i) {
    const SubjectRecord& rec = data.subjects[i];
    const MatrixXd& z = e.posterior[i].smoothed;
    for (int t = 0; t < rec.n_occasions(); ++t) {
      if (rec.dropout[t]) continue;
      const OccasionMoments& mom = e.moments[i][t];
      double zsum = 0.0;
      for (int u = 0; u < k; ++u) {
        double w = z(t, u);
        zsum += w;
        if (w <= 0.0) continue;
        dev = mom.expect.row(u).transpose() - next.means[u];
        scatter.noalias() += w * (dev * dev.transpose());
      }
      scatter += zsum * mom.var_correction;
    }
  }
  MatrixXd cov_new = scatter / static_cast<double>(n0);
  cov_new = 0.5 * (cov_new + cov_new.transpose()).eval();
  Eigen::LLT<MatrixXd> llt(cov_new);
  if (llt.info() != Eigen::Success)
    cov_new = regularize(cov_new, std::max(default_jitter(cov_new), 1e-300));
  next.cov = cov_new;

  if (!params.has_covariates()) {
    VectorXd init = VectorXd::Zero(k + 1);
    for (int i = 0; i < data.n(); ++i)
      for (int u = 0; u < k; ++u) init[u] += e.posterior[i].smoothed(0, u);
    init /= static_cast<double>(data.n());
    init[k] = 0.0;
    double s = init.sum();
    init.head(k) /= s;  // exact row normalization against roundoff
    next.initial = init;

    MatrixXd counts = MatrixXd::Zero(k + 1, k + 1);
    for (int i = 0; i < data.n(); ++i)
      for (const MatrixXd& slice : e.posterior[i].pairwise) counts += slice;
    MatrixXd trans = params.transition;
    for (int ubar = 0; ubar < k; ++ubar) {
      double rowsum = counts.row(ubar).sum();
      if (rowsum > 1e-12) trans.row(ubar) = counts.row(ubar) / rowsum;
      // else: no information on this origin; keep the current row
    }
    trans.row(k).setZero();
    trans(k, k) = 1.0;
    next.transition = trans;
  } else {
    MatrixXd design(data.n(), 1 + data.p);
    MatrixXd init_w(data.n(), k);
    for (int i = 0; i < data.n(); ++i) {
      design(i, 0) = 1.0;
      if (data.p > 0)
        design.row(i).tail(data.p) = data.subjects[i].covariates->row(0);
      for (int u = 0; u < k; ++u)
        init_w(i, u) = e.posterior[i].smoothed(0, u);
    }
    try {
      InitialFit fit = maximize_initial(design, init_w, *params.B, opts.newton);
      next.B = fit.params;
      if (separation && fit.separation) *separation = true;
    } catch (const NewtonFailed&) {
      // keep the current B
    }

    long n_trans = 0;
    for (const auto& rec : data.subjects)
      n_trans += std::max(0, rec.n_occasions() - 1);
    MatrixXd tdesign(n_trans, 1 + data.p);
    std::vector<MatrixXd> tweights(k, MatrixXd::Zero(n_trans, k + 1));
    long row = 0;
    for (int i = 0; i < data.n(); ++i) {
      const SubjectRecord& rec = data.subjects[i];
      for (int t = 1; t < rec.n_occasions(); ++t, ++row) {
        tdesign(row, 0) = 1.0;
        if (data.p > 0) tdesign.row(row).tail(data.p) = rec.covariates->row(t);
        const MatrixXd& slice = e.posterior[i].pairwise[t - 1];
        for (int ubar = 0; ubar < k; ++ubar)
          for (int u = 0; u <= k; ++u) tweights[ubar](row, u) = slice(ubar, u);
      }
    }
    TransitionFit fit =
        maximize_transition(tdesign, tweights, *params.Gamma, opts.newton);
    next.Gamma = fit.params;
    if (separation && fit.separation) *separation = true;
  }
  return next;
}

int hmm_n_par(int k, int r, int p, bool covariates) {
  int measurement = k * r + r * (r + 1) / 2;
  int q = covariates ? 1 + p : 1;
  int latent = (k - 1) * q + k * k * q;
  return measurement + latent;
}

void observed_descriptives(const PanelDataset& data, VectorXd* mean,
                           VectorXd* sd, MatrixXd* cov) {
  const int r = data.r;
  VectorXd sum = VectorXd::Zero(r);
  VectorXd count = VectorXd::Zero(r);
  for (const auto& rec : data.subjects)
    for (int t = 0; t < rec.n_occasions(); ++t)
      for (int c = 0; c < r; ++c)
        if (rec.observed[t].observed[c]) {
          sum[c] += rec.responses(t, c);
          count[c] += 1.0;
        }
  VectorXd m(r);
  for (int c = 0; c < r; ++c) m[c] = count[c] > 0 ? sum[c] / count[c] : 0.0;

  MatrixXd cross = MatrixXd::Zero(r, r);
  MatrixXd pair_n = MatrixXd::Zero(r, r);
  for (const auto& rec : data.subjects)
    for (int t = 0; t < rec.n_occasions(); ++t)
      for (int a = 0; a < r; ++a) {
        if (!rec.observed[t].observed[a]) continue;
        for (int b = a; b < r; ++b) {
          if (!rec.observed[t].observed[b]) continue;
          double v = (rec.responses(t, a) - m[a]) * (rec.responses(t, b) - m[b]);
          cross(a, b) += v;
          pair_n(a, b) += 1.0;
        }
      }
  MatrixXd c(r, r);
  for (int a = 0; a < r; ++a)
    for (int b = a; b < r; ++b) {
      double v = pair_n(a, b) > 0 ? cross(a, b) / pair_n(a, b) : (a == b ? 1.0 : 0.0);
      if (a == b && v <= 0.0) v = 1.0;
      c(a, b) = v;
      c(b, a) = v;
    }
  if (mean) *mean = m;
  if (sd) {
    sd->resize(r);
    for (int j = 0; j < r; ++j) (*sd)[j] = std::sqrt(c(j, j));
  }
  if (cov) {
    try {
      *cov = regularize(c, std::max(default_jitter(c), 1e-12));
    } catch (const SingularCovariance&) {
      *cov = MatrixXd(c.diagonal().asDiagonal());
    }
  }
}

static MatrixXd h_rule_transition(int k, double h) {
  MatrixXd trans = MatrixXd::Zero(k + 1, k + 1);
  double diag = (h + 1.0) / (h + k + 1.0);
  double off = 1.0 / (h + k + 1.0);
  for (int ubar = 0; ubar < k; ++ubar)
    for (int u = 0; u <= k; ++u) trans(ubar, u) = (u == ubar) ? diag : off;
  trans(k, k) = 1.0;
  return trans;
}

static void attach_logit_params(HmmParams& params, int p) {
  const int k = params.k;
  InitialLogitParams b;
  b.coef = MatrixXd::Zero(std::max(0, k - 1), 1 + p);
  for (int u = 1; u < k; ++u)
    b.coef(u - 1, 0) = std::log(params.initial[u] / params.initial[0]);
  TransitionLogitParams g;
  g.coef.assign(k, MatrixXd::Zero(k, 1 + p));
  for (int ubar = 0; ubar < k; ++ubar)
    for (int u = 0; u <= k; ++u) {
      if (u == ubar) continue;
      g.coef[ubar](TransitionLogitParams::dest_row(ubar, u), 0) =
          std::log(params.transition(ubar, u) / params.transition(ubar, ubar));
    }
  params.B = std::move(b);
  params.Gamma = std::move(g);
}

HmmParams hmm_deterministic_start(const PanelDataset& data, int k, double h,
                                  bool covariates) {
  VectorXd m, s;
  MatrixXd c;
  observed_descriptives(data, &m, &s, &c);
  HmmParams params;
  params.k = k;
  params.cov = c;
  params.means.resize(k);
  for (int u = 0; u < k; ++u) {
    double q = normal_quantile(static_cast<double>(u + 1) / (k + 1));
    params.means[u] = m + q * s;
  }
  params.initial = VectorXd::Zero(k + 1);
  params.initial.head(k).setConstant(1.0 / k);
  params.transition = h_rule_transition(k, h);
  if (covariates) attach_logit_params(params, data.p);
  return params;
}

HmmParams hmm_random_start(const PanelDataset& data, int k,
                           std::mt19937_64& rng, bool covariates) {
  VectorXd m, s;
  MatrixXd c;
  observed_descriptives(data, &m, &s, &c);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  HmmParams params;
  params.k = k;
  params.cov = c;
  params.means.resize(k);
  for (int u = 0; u < k; ++u) {
    params.means[u].resize(data.r);
    for (int j = 0; j < data.r; ++j)
      params.means[u][j] = m[j] + s[j] * gauss(rng);
  }
  params.initial = VectorXd::Zero(k + 1);
  for (int u = 0; u < k; ++u) params.initial[u] = unif(rng);
  params.initial.head(k) /= params.initial.head(k).sum();
  params.transition = MatrixXd::Zero(k + 1, k + 1);
  for (int ubar = 0; ubar < k; ++ubar) {
    for (int u = 0; u <= k; ++u) params.transition(ubar, u) = unif(rng);
    params.transition.row(ubar) /= params.transition.row(ubar).sum();
  }
  params.transition(k, k) = 1.0;
  if (covariates) attach_logit_params(params, data.p);
  return params;
}

EmRun run_em(const PanelDataset& data, const HmmParams& start,
             const EmOptions& opts) {
  EmRun run;
  run.params = start;
  double prev = kNegInf;
  for (int iter = 1; iter <= opts.max_iter; ++iter) {
    EStepResult e = e_step(data, run.params, opts);
    run.trace.push_back(e.loglik);
    run.iterations = iter;
    if (iter > 1 &&
        std::abs(e.loglik - prev) <= opts.tol * std::abs(e.loglik)) {
      run.converged = true;
      return run;
    }
    prev = e.loglik;
    bool sep = false;
    run.params = m_step(data, e, run.params, opts, &sep);
    run.separation = run.separation || sep;
  }
  // max_iter exhausted: report the likelihood at the returned parameters
  EStepResult e = e_step(data, run.params, opts);
  run.trace.push_back(e.loglik);
  return run;
}

std::vector<int> best_mean_permutation(const std::vector<VectorXd>& est,
                                       const std::vector<VectorXd>& ref) {
  const int k = static_cast<int>(ref.size());
  if (static_cast<int>(est.size()) != k)
    throw InvalidInput("permutation requires equal numbers of states");
  std::vector<int> perm(k), best(k);
  std::iota(perm.begin(), perm.end(), 0);
  best = perm;
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double cost = 0.0;
    for (int u = 0; u < k; ++u) cost += (est[perm[u]] - ref[u]).squaredNorm();
    if (cost < best_cost) {
      best_cost = cost;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

HmmParams apply_state_permutation(const HmmParams& params,
                                  const std::vector<int>& perm) {
  const int k = params.k;
  if (static_cast<int>(perm.size()) != k)
    throw InvalidInput("permutation size must equal k");
  HmmParams out = params;
  for (int u = 0; u < k; ++u) out.means[u] = params.means[perm[u]];
  if (!params.has_covariates()) {
    for (int u = 0; u < k; ++u) out.initial[u] = params.initial[perm[u]];
    for (int a = 0; a < k; ++a) {
      for (int b = 0; b < k; ++b)
        out.transition(a, b) = params.transition(perm[a], perm[b]);
      out.transition(a, k) = params.transition(perm[a], k);
    }
    return out;
  }
  // Re-express B against the new reference state and re-index Gamma. Rows of
  // the old B are implicitly zero for the old reference.
  const auto beta_row = [&](int old_u) -> Eigen::RowVectorXd {
    if (old_u == 0) return Eigen::RowVectorXd::Zero(params.B->coef.cols());
    return params.B->coef.row(old_u - 1);
  };
  InitialLogitParams b;
  b.coef.resize(std::max(0, k - 1), params.B->coef.cols());
  for (int u = 1; u < k; ++u)
    b.coef.row(u - 1) = beta_row(perm[u]) - beta_row(perm[0]);
  out.B = std::move(b);

  const auto gamma_row = [&](int old_ubar, int old_u) -> Eigen::RowVectorXd {
    if (old_u == old_ubar)
      return Eigen::RowVectorXd::Zero(params.Gamma->coef[old_ubar].cols());
    return params.Gamma->coef[old_ubar].row(
        TransitionLogitParams::dest_row(old_ubar, old_u));
  };
  TransitionLogitParams g;
  g.coef.assign(k, MatrixXd());
  for (int a = 0; a < k; ++a) {
    g.coef[a].resize(k, params.Gamma->coef[0].cols());
    for (int bdest = 0; bdest <= k; ++bdest) {
      if (bdest == a) continue;
      int old_dest = bdest == k ? k : perm[bdest];
      g.coef[a].row(TransitionLogitParams::dest_row(a, bdest)) =
          gamma_row(perm[a], old_dest);
    }
  }
  out.Gamma = std::move(g);
  return out;
}

HmmParams sort_states_by_first_mean(const HmmParams& params) {
  std::vector<int> perm(params.k);
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) {
    return params.means[a][0] < params.means[b][0];
  });
  return apply_state_permutation(params, perm);
}

FitResult fit_hmm(const PanelDataset& data, int k, const HmmFitOptions& opts) {
  data.validate();
  if (k < 1) throw InvalidInput("k must be at least 1");
  if (data.n() <= k) throw InvalidInput("need more subjects than states");

  const int n_random = opts.n_random_starts >= 0 ? opts.n_random_starts : 5 * k;
  const int n_starts = (opts.deterministic_start ? 1 : 0) + n_random;
  if (n_starts < 1) throw InvalidInput("at least one start is required");

  std::vector<EmRun> runs(n_starts);
  std::vector<char> ok(n_starts, 0);
  std::vector<std::string> failures(n_starts);

  parallel_for(n_starts, opts.workers, [&](std::size_t idx) {
    try {
      HmmParams start;
      if (opts.deterministic_start && idx == 0) {
        start = hmm_deterministic_start(data, k, opts.h, opts.covariates);
      } else {
        std::uint64_t r_idx = idx - (opts.deterministic_start ? 1 : 0);
        auto rng = substream(opts.seed, stream::kStarts, r_idx);
        start = hmm_random_start(data, k, rng, opts.covariates);
      }
      EmOptions em = opts;
      em.workers = 1;  // starts already run in parallel
      runs[idx] = run_em(data, start, em);
      ok[idx] = 1;
    } catch (const Error& err) {
      failures[idx] = err.what();
    }
  });

  int best = -1;
  for (int i = 0; i < n_starts; ++i) {
    if (!ok[i]) continue;
    if (best < 0 || runs[i].trace.back() > runs[best].trace.back()) best = i;
  }
  if (best < 0) {
    std::string detail = failures.empty() ? "" : failures[0];
    throw FitFailed("all starts failed: " + detail);
  }

  FitResult res;
  res.params = sort_states_by_first_mean(runs[best].params);
  res.loglik = runs[best].trace.back();
  res.loglik_trace = runs[best].trace;
  res.iterations = runs[best].iterations;
  res.converged = runs[best].converged;
  res.separation = runs[best].separation;
  res.best_start = best;
  res.n_starts = n_starts;
  res.failed_starts = n_starts - static_cast<int>(std::count(ok.begin(), ok.end(), 1));
  res.n_par = hmm_n_par(k, data.r, data.p, opts.covariates);
  res.aic = -2.0 * res.loglik + 2.0 * res.n_par;
  res.bic = -2.0 * res.loglik + std::log(static_cast<double>(data.n())) * res.n_par;
  return res;
}

}  // namespace hmmpanel
