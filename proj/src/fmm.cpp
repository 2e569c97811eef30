#include "hmmpanel/fmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "hmmpanel/parallel.hpp"
#include "hmmpanel/rng.hpp"

namespace hmmpanel {

static constexpr double kNegInf = -std::numeric_limits<double>::infinity();

VectorXd CrossSection::observed_values(int i) const {
  const ObsPattern& pat = patterns[i];
  VectorXd v(pat.n_observed());
  int j = 0;
  for (int c = 0; c < pat.size(); ++c)
    if (pat.observed[c]) v[j++] = y(i, c);
  return v;
}

void CrossSection::validate() const {
  if (n() < 1) throw InvalidInput("cross-section has no rows");
  if (static_cast<int>(patterns.size()) != n())
    throw InvalidInput("one pattern per row is required");
  for (int i = 0; i < n(); ++i) {
    if (patterns[i].size() != r())
      throw InvalidInput("pattern length does not match response dimension");
    for (int c = 0; c < r(); ++c)
      if (patterns[i].observed[c] != std::isfinite(y(i, c)))
        throw InvalidInput("pattern and NaN mask disagree");
  }
  if (covariates) {
    if (covariates->rows() != n())
      throw InvalidInput("covariate rows do not match observations");
    if (!covariates->allFinite())
      throw InvalidInput("covariates must be complete");
  }
}

void FmmParams::validate() const {
  if (k < 1) throw InvalidInput("k must be at least 1");
  if (static_cast<int>(means.size()) != k ||
      static_cast<int>(covs.size()) != k)
    throw InvalidInput("means/covs must hold one entry per component");
  for (int u = 0; u < k; ++u) {
    GaussianParams gp{means[u], covs[u]};
    gp.validate();
  }
  if (has_covariates()) {
    if (beta->k() != k) throw InvalidInput("beta has the wrong number of rows");
    return;
  }
  if (weights.size() != k) throw InvalidInput("weights must have length k");
  if (weights.minCoeff() < 0.0) throw InvalidInput("negative mixture weight");
  if (std::abs(weights.sum() - 1.0) > 1e-12)
    throw InvalidInput("mixture weights must sum to 1");
}

VectorXd FmmParams::weights_for(const CrossSection& data, int i) const {
  if (!has_covariates()) return weights;
  VectorXd x = data.covariates ? VectorXd(data.covariates->row(i))
                               : VectorXd(VectorXd::Zero(0));
  return initial_probs(x, *beta).head(k);
}

double fmm_loglik(const CrossSection& data, const FmmParams& params) {
  std::vector<PatternedGaussian> pgs;
  pgs.reserve(params.k);
  for (int u = 0; u < params.k; ++u) pgs.emplace_back(params.covs[u]);
  for (int i = 0; i < data.n(); ++i)
    for (auto& pg : pgs) pg.prepare(data.patterns[i]);

  double total = 0.0;
  VectorXd v(params.k);
  for (int i = 0; i < data.n(); ++i) {
    if (data.patterns[i].none_observed()) continue;  // log sum_u pi_u * 1 = 0
    VectorXd w = params.weights_for(data, i);
    VectorXd y_obs = data.observed_values(i);
    double m = kNegInf;
    for (int u = 0; u < params.k; ++u) {
      v[u] = std::log(w[u]) +
             pgs[u].log_density(y_obs, data.patterns[i], params.means[u]);
      m = std::max(m, v[u]);
    }
    if (!(m > kNegInf))
      throw ImpossibleObservation("row " + std::to_string(i + 1), 1);
    double s = 0.0;
    for (int u = 0; u < params.k; ++u) s += std::exp(v[u] - m);
    total += m + std::log(s);
  }
  return total;
}

FmmEStep fmm_e_step(const CrossSection& data, const FmmParams& params) {
  const int k = params.k;
  std::vector<PatternedGaussian> pgs;
  pgs.reserve(k);
  for (int u = 0; u < k; ++u) pgs.emplace_back(params.covs[u]);
  for (int i = 0; i < data.n(); ++i)
    for (auto& pg : pgs) pg.prepare(data.patterns[i]);

  FmmEStep out;
  out.posterior.resize(data.n(), k);
  out.moments.resize(data.n());
  double total = 0.0;
  VectorXd v(k);
  for (int i = 0; i < data.n(); ++i) {
    VectorXd w = params.weights_for(data, i);
    VectorXd y_obs = data.observed_values(i);
    const bool empty = data.patterns[i].none_observed();
    double m = kNegInf;
    for (int u = 0; u < k; ++u) {
      double logd = empty ? 0.0
                          : pgs[u].log_density(y_obs, data.patterns[i],
                                               params.means[u]);
      v[u] = std::log(w[u]) + logd;
      m = std::max(m, v[u]);
    }
    if (!(m > kNegInf))
      throw ImpossibleObservation("row " + std::to_string(i + 1), 1);
    double s = 0.0;
    for (int u = 0; u < k; ++u) {
      out.posterior(i, u) = std::exp(v[u] - m);
      s += out.posterior(i, u);
    }
    out.posterior.row(i) /= s;
    total += m + std::log(s);
    out.moments[i].reserve(k);
    for (int u = 0; u < k; ++u)
      out.moments[i].push_back(
          pgs[u].moments(y_obs, data.patterns[i], params.means[u]));
  }
  out.loglik = total;
  return out;
}

FmmParams fmm_m_step(const CrossSection& data, const FmmEStep& e,
                     const FmmParams& params, const FmmOptions& opts) {
  const int k = params.k;
  const int r = data.r();
  FmmParams next = params;

  VectorXd occupancy = e.posterior.colwise().sum();
  for (int u = 0; u < k; ++u)
    if (occupancy[u] < 1e-10) throw DegenerateComponent(u);

  for (int u = 0; u < k; ++u) {
    VectorXd acc = VectorXd::Zero(r);
    for (int i = 0; i < data.n(); ++i)
      acc += e.posterior(i, u) * e.moments[i][u].expect;
    next.means[u] = acc / occupancy[u];
  }

  std::vector<MatrixXd> scatter(k, MatrixXd::Zero(r, r));
  VectorXd dev(r);
  for (int i = 0; i < data.n(); ++i)
    for (int u = 0; u < k; ++u) {
      double w = e.posterior(i, u);
      if (w <= 0.0) continue;
      dev = e.moments[i][u].expect - next.means[u];
      scatter[u].noalias() +=
          w * (e.moments[i][u].var_correction + dev * dev.transpose());
    }
  if (opts.homoscedastic) {
    MatrixXd pooled = MatrixXd::Zero(r, r);
    for (int u = 0; u < k; ++u) pooled += scatter[u];
    pooled /= static_cast<double>(data.n());
    pooled = 0.5 * (pooled + pooled.transpose()).eval();
    Eigen::LLT<MatrixXd> llt(pooled);
    if (llt.info() != Eigen::Success)
      pooled = regularize(pooled, std::max(default_jitter(pooled), 1e-300));
    for (int u = 0; u < k; ++u) next.covs[u] = pooled;
  } else {
    for (int u = 0; u < k; ++u) {
      MatrixXd c = scatter[u] / occupancy[u];
      c = 0.5 * (c + c.transpose()).eval();
      Eigen::LLT<MatrixXd> llt(c);
      if (llt.info() != Eigen::Success)
        c = regularize(c, std::max(default_jitter(c), 1e-300));
      next.covs[u] = c;
    }
  }

  if (!params.has_covariates()) {
    next.weights = occupancy / static_cast<double>(data.n());
    next.weights /= next.weights.sum();
  } else {
    MatrixXd design(data.n(), 1 + data.p());
    for (int i = 0; i < data.n(); ++i) {
      design(i, 0) = 1.0;
      if (data.p() > 0) design.row(i).tail(data.p()) = data.covariates->row(i);
    }
    try {
      InitialFit fit =
          maximize_initial(design, e.posterior, *params.beta, opts.newton);
      next.beta = fit.params;
    } catch (const NewtonFailed&) {
      // keep the current beta
    }
  }
  return next;
}

int fmm_n_par(int k, int r, int p, bool homoscedastic, bool covariates) {
  int cov_par = r * (r + 1) / 2;
  int total = k * r + (homoscedastic ? cov_par : k * cov_par);
  total += covariates ? (k - 1) * (1 + p) : (k - 1);
  return total;
}

static void cross_section_descriptives(const CrossSection& data, VectorXd* mean,
                                       VectorXd* sd, MatrixXd* cov) {
  const int r = data.r();
  VectorXd sum = VectorXd::Zero(r), count = VectorXd::Zero(r);
  for (int i = 0; i < data.n(); ++i)
    for (int c = 0; c < r; ++c)
      if (data.patterns[i].observed[c]) {
        sum[c] += data.y(i, c);
        count[c] += 1.0;
      }
  VectorXd m(r);
  for (int c = 0; c < r; ++c) m[c] = count[c] > 0 ? sum[c] / count[c] : 0.0;
  MatrixXd cross = MatrixXd::Zero(r, r), pair_n = MatrixXd::Zero(r, r);
  for (int i = 0; i < data.n(); ++i)
    for (int a = 0; a < r; ++a) {
      if (!data.patterns[i].observed[a]) continue;
      for (int b = a; b < r; ++b) {
        if (!data.patterns[i].observed[b]) continue;
        cross(a, b) += (data.y(i, a) - m[a]) * (data.y(i, b) - m[b]);
        pair_n(a, b) += 1.0;
      }
    }
  MatrixXd c(r, r);
  for (int a = 0; a < r; ++a)
    for (int b = a; b < r; ++b) {
      double v = pair_n(a, b) > 0 ? cross(a, b) / pair_n(a, b) : (a == b ? 1.0 : 0.0);
      if (a == b && v <= 0.0) v = 1.0;
      c(a, b) = c(b, a) = v;
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

static void attach_beta(FmmParams& params, int p) {
  InitialLogitParams b;
  b.coef = MatrixXd::Zero(std::max(0, params.k - 1), 1 + p);
  for (int u = 1; u < params.k; ++u)
    b.coef(u - 1, 0) = std::log(params.weights[u] / params.weights[0]);
  params.beta = std::move(b);
}

static FmmParams fmm_deterministic_start(const CrossSection& data, int k,
                                         const FmmFitOptions& opts) {
  VectorXd m, s;
  MatrixXd c;
  cross_section_descriptives(data, &m, &s, &c);
  FmmParams params;
  params.k = k;
  params.means.resize(k);
  for (int u = 0; u < k; ++u)
    params.means[u] = m + normal_quantile(static_cast<double>(u + 1) / (k + 1)) * s;
  params.covs.assign(k, c);
  params.weights = VectorXd::Constant(k, 1.0 / k);
  if (opts.covariates) attach_beta(params, data.p());
  return params;
}

static FmmParams fmm_random_start(const CrossSection& data, int k,
                                  std::mt19937_64& rng,
                                  const FmmFitOptions& opts) {
  VectorXd m, s;
  MatrixXd c;
  cross_section_descriptives(data, &m, &s, &c);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  FmmParams params;
  params.k = k;
  params.means.resize(k);
  for (int u = 0; u < k; ++u) {
    params.means[u].resize(data.r());
    for (int j = 0; j < data.r(); ++j)
      params.means[u][j] = m[j] + s[j] * gauss(rng);
  }
  params.covs.assign(k, c);
  params.weights.resize(k);
  for (int u = 0; u < k; ++u) params.weights[u] = unif(rng);
  params.weights /= params.weights.sum();
  if (opts.covariates) attach_beta(params, data.p());
  return params;
}

// Complete-data E-step: full-vector densities, identity moments. Valid only
// when nothing is missing (reduction testing).
static FmmEStep fmm_e_step_complete(const CrossSection& data,
                                    const FmmParams& params) {
  const int k = params.k;
  const int r = data.r();
  std::vector<MatrixXd> chol(k);
  std::vector<double> logdet(k, 0.0);
  for (int u = 0; u < k; ++u) {
    Eigen::LLT<MatrixXd> llt(params.covs[u]);
    if (llt.info() != Eigen::Success)
      throw SingularCovariance("component covariance is not positive definite");
    chol[u] = llt.matrixL();
    for (int j = 0; j < r; ++j) logdet[u] += 2.0 * std::log(chol[u](j, j));
  }
  FmmEStep out;
  out.posterior.resize(data.n(), k);
  out.moments.resize(data.n());
  double total = 0.0;
  VectorXd v(k);
  for (int i = 0; i < data.n(); ++i) {
    if (!data.patterns[i].all_observed())
      throw InvalidInput("complete_fast_path requires complete data");
    VectorXd y = data.y.row(i).transpose();
    VectorXd w = params.weights_for(data, i);
    double m = kNegInf;
    for (int u = 0; u < k; ++u) {
      VectorXd z = chol[u].triangularView<Eigen::Lower>().solve(y - params.means[u]);
      v[u] = std::log(w[u]) -
             0.5 * (r * kLog2Pi + logdet[u] + z.squaredNorm());
      m = std::max(m, v[u]);
    }
    double s = 0.0;
    for (int u = 0; u < k; ++u) {
      out.posterior(i, u) = std::exp(v[u] - m);
      s += out.posterior(i, u);
    }
    out.posterior.row(i) /= s;
    total += m + std::log(s);
    out.moments[i].assign(k, ConditionalMoments{y, MatrixXd::Zero(r, r)});
  }
  out.loglik = total;
  return out;
}

struct FmmEmRun {
  FmmParams params;
  std::vector<double> trace;
  int iterations = 0;
  bool converged = false;
};

static FmmEmRun fmm_run_em(const CrossSection& data, const FmmParams& start,
                           const FmmOptions& opts) {
  FmmEmRun run;
  run.params = start;
  double prev = kNegInf;
  for (int iter = 1; iter <= opts.max_iter; ++iter) {
    FmmEStep e = opts.complete_fast_path ? fmm_e_step_complete(data, run.params)
                                         : fmm_e_step(data, run.params);
    run.trace.push_back(e.loglik);
    run.iterations = iter;
    if (iter > 1 && std::abs(e.loglik - prev) <= opts.tol * std::abs(e.loglik)) {
      run.converged = true;
      return run;
    }
    prev = e.loglik;
    run.params = fmm_m_step(data, e, run.params, opts);
  }
  run.trace.push_back(fmm_loglik(data, run.params));
  return run;
}

static FmmParams sort_components(const FmmParams& params) {
  const int k = params.k;
  std::vector<int> perm(k);
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) {
    return params.means[a][0] < params.means[b][0];
  });
  FmmParams out = params;
  for (int u = 0; u < k; ++u) {
    out.means[u] = params.means[perm[u]];
    out.covs[u] = params.covs[perm[u]];
  }
  if (!params.has_covariates()) {
    for (int u = 0; u < k; ++u) out.weights[u] = params.weights[perm[u]];
  } else {
    const auto beta_row = [&](int old_u) -> Eigen::RowVectorXd {
      if (old_u == 0) return Eigen::RowVectorXd::Zero(params.beta->coef.cols());
      return params.beta->coef.row(old_u - 1);
    };
    InitialLogitParams b;
    b.coef.resize(std::max(0, k - 1), params.beta->coef.cols());
    for (int u = 1; u < k; ++u)
      b.coef.row(u - 1) = beta_row(perm[u]) - beta_row(perm[0]);
    out.beta = std::move(b);
  }
  return out;
}

FmmFitResult fit_fmm(const CrossSection& data, int k,
                     const FmmFitOptions& opts) {
  data.validate();
  if (k < 1) throw InvalidInput("k must be at least 1");
  if (data.n() <= k) throw InvalidInput("need more observations than components");

  const int n_random = opts.n_random_starts >= 0 ? opts.n_random_starts : 5 * k;
  const int n_starts = (opts.deterministic_start ? 1 : 0) + n_random;
  if (n_starts < 1) throw InvalidInput("at least one start is required");

  std::vector<FmmEmRun> runs(n_starts);
  std::vector<char> ok(n_starts, 0);
  parallel_for(n_starts, opts.workers, [&](std::size_t idx) {
    try {
      FmmParams start;
      if (opts.deterministic_start && idx == 0) {
        start = fmm_deterministic_start(data, k, opts);
      } else {
        std::uint64_t r_idx = idx - (opts.deterministic_start ? 1 : 0);
        auto rng = substream(opts.seed, stream::kStarts, r_idx);
        start = fmm_random_start(data, k, rng, opts);
      }
      runs[idx] = fmm_run_em(data, start, opts);
      ok[idx] = 1;
    } catch (const Error&) {
      // failed start
    }
  });

  int best = -1;
  for (int i = 0; i < n_starts; ++i) {
    if (!ok[i]) continue;
    if (best < 0 || runs[i].trace.back() > runs[best].trace.back()) best = i;
  }
  if (best < 0) throw FitFailed("all mixture starts failed");

  FmmFitResult res;
  res.params = sort_components(runs[best].params);
  res.loglik = runs[best].trace.back();
  res.loglik_trace = runs[best].trace;
  res.iterations = runs[best].iterations;
  res.converged = runs[best].converged;
  res.best_start = best;
  res.n_starts = n_starts;
  res.failed_starts = n_starts - static_cast<int>(std::count(ok.begin(), ok.end(), 1));
  res.n_par = fmm_n_par(k, data.r(), data.p(), opts.homoscedastic, opts.covariates);
  res.aic = -2.0 * res.loglik + 2.0 * res.n_par;
  res.bic = -2.0 * res.loglik + std::log(static_cast<double>(data.n())) * res.n_par;
  return res;
}

std::vector<int> fmm_map_labels(const MatrixXd& posterior) {
  std::vector<int> labels(posterior.rows());
  for (Eigen::Index i = 0; i < posterior.rows(); ++i) {
    Eigen::Index arg = 0;
    posterior.row(i).maxCoeff(&arg);
    labels[i] = static_cast<int>(arg);
  }
  return labels;
}

MatrixXd fmm_impute(const CrossSection& data, const FmmParams& params,
                    ImputeMode mode) {
  FmmEStep e = fmm_e_step(data, params);
  MatrixXd out = data.y;
  std::vector<int> map = fmm_map_labels(e.posterior);
  for (int i = 0; i < data.n(); ++i) {
    for (int c = 0; c < data.r(); ++c) {
      if (data.patterns[i].observed[c]) continue;
      if (mode == ImputeMode::Conditional) {
        out(i, c) = e.moments[i][map[i]].expect[c];
      } else {
        double v = 0.0;
        for (int u = 0; u < params.k; ++u)
          v += e.posterior(i, u) * e.moments[i][u].expect[c];
        out(i, c) = v;
      }
    }
  }
  return out;
}

}  // namespace hmmpanel
