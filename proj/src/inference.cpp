#include "hmmpanel/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hmmpanel/parallel.hpp"
#include "hmmpanel/rng.hpp"

namespace hmmpanel {

static constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<int> viterbi_decode(const SubjectRecord& rec,
                                const HmmParams& params) {
  const int k = params.k;
  const int S = k + 1;
  const int T = rec.n_occasions();
  PatternedGaussian pg(params.cov);
  for (int t = 0; t < T; ++t)
    if (!rec.dropout[t]) pg.prepare(rec.observed[t]);
  MatrixXd logE = emission_log_matrix(rec, params, pg);

  VectorXd init = params.initial_for(rec);
  MatrixXd delta(T, S);
  Eigen::MatrixXi argmax = Eigen::MatrixXi::Zero(T, S);
  for (int u = 0; u < S; ++u) delta(0, u) = std::log(init[u]) + logE(0, u);
  for (int t = 1; t < T; ++t) {
    MatrixXd P = params.transition_for(rec, t);
    for (int u = 0; u < S; ++u) {
      double best = kNegInf;
      int best_ubar = 0;
      for (int ubar = 0; ubar < S; ++ubar) {
        double cand = delta(t - 1, ubar) + std::log(P(ubar, u));
        if (cand > best) {  // ties keep the lowest origin index
          best = cand;
          best_ubar = ubar;
        }
      }
      delta(t, u) = best + logE(t, u);
      argmax(t, u) = best_ubar;
    }
  }
  double best = kNegInf;
  int last = 0;
  for (int u = 0; u < S; ++u) {
    if (delta(T - 1, u) > best) {
      best = delta(T - 1, u);
      last = u;
    }
  }
  if (!(best > kNegInf)) throw ImpossibleObservation(rec.id, T);
  std::vector<int> path(T);
  path[T - 1] = last;
  for (int t = T - 1; t > 0; --t) path[t - 1] = argmax(t, path[t]);
  return path;
}

double viterbi_path_score(const SubjectRecord& rec, const HmmParams& params,
                          const std::vector<int>& path) {
  const int T = rec.n_occasions();
  if (static_cast<int>(path.size()) != T)
    throw InvalidInput("path length does not match the record");
  VectorXd init = params.initial_for(rec);
  double score = std::log(init[path[0]]) + emission_logdensity(rec, 0, path[0], params);
  for (int t = 1; t < T; ++t) {
    MatrixXd P = params.transition_for(rec, t);
    score += std::log(P(path[t - 1], path[t])) +
             emission_logdensity(rec, t, path[t], params);
  }
  return score;
}

std::vector<std::vector<int>> local_decode(const LatentPosterior& posterior) {
  std::vector<std::vector<int>> states(posterior.size());
  for (std::size_t i = 0; i < posterior.size(); ++i) {
    const MatrixXd& z = posterior[i].smoothed;
    states[i].resize(z.rows());
    for (Eigen::Index t = 0; t < z.rows(); ++t) {
      int arg = 0;
      double best = z(t, 0);
      for (Eigen::Index u = 1; u < z.cols(); ++u)
        if (z(t, u) > best) {  // ties keep the lowest state index
          best = z(t, u);
          arg = static_cast<int>(u);
        }
      states[i][t] = arg;
    }
  }
  return states;
}

DecodedPanel decode_panel(const PanelDataset& data, const HmmParams& params,
                          const EmOptions& opts) {
  DecodedPanel out;
  EStepResult e = e_step(data, params, opts);
  out.posterior = std::move(e.posterior);
  out.local = local_decode(out.posterior);
  out.global.resize(data.n());
  parallel_for(data.subjects.size(), opts.workers, [&](std::size_t i) {
    out.global[i] = viterbi_decode(data.subjects[i], params);
  });
  return out;
}

PanelDataset impute_missing(const PanelDataset& data, const HmmParams& params,
                            const LatentPosterior& posterior, ImputeMode mode) {
  if (posterior.size() != data.subjects.size())
    throw InvalidInput("posterior does not match the panel");
  const int k = params.k;
  PanelDataset out = data;
  PatternedGaussian pg(params.cov);
  for (const auto& rec : data.subjects)
    for (int t = 0; t < rec.n_occasions(); ++t)
      if (!rec.dropout[t]) pg.prepare(rec.observed[t]);

  for (int i = 0; i < data.n(); ++i) {
    const SubjectRecord& rec = data.subjects[i];
    SubjectRecord& dst = out.subjects[i];
    const MatrixXd& z = posterior[i].smoothed;
    for (int t = 0; t < rec.n_occasions(); ++t) {
      if (rec.dropout[t] || rec.observed[t].all_observed()) continue;
      VectorXd y_obs = rec.observed_values(t);
      VectorXd fill;
      if (mode == ImputeMode::Conditional) {
        int u_hat = 0;
        double best = z(t, 0);
        for (int u = 1; u < k; ++u)
          if (z(t, u) > best) {
            best = z(t, u);
            u_hat = u;
          }
        fill = pg.moments(y_obs, rec.observed[t], params.means[u_hat]).expect;
      } else {
        double wsum = 0.0;
        for (int u = 0; u < k; ++u) wsum += z(t, u);
        fill = VectorXd::Zero(data.r);
        for (int u = 0; u < k; ++u)
          fill += (z(t, u) / wsum) *
                  pg.moments(y_obs, rec.observed[t], params.means[u]).expect;
      }
      for (int c = 0; c < data.r; ++c) {
        if (rec.observed[t].observed[c]) continue;
        dst.responses(t, c) = fill[c];
        dst.observed[t].observed[c] = true;
      }
    }
  }
  return out;
}

SelectionReport select_k(const PanelDataset& data,
                         const std::vector<int>& k_range,
                         const HmmFitOptions& opts) {
  if (k_range.empty()) throw InvalidInput("k range must be nonempty");
  SelectionReport report;
  for (int k : k_range) {
    SelectionRow row;
    row.k = k;
    try {
      FitResult fit = fit_hmm(data, k, opts);
      row.loglik = fit.loglik;
      row.n_par = fit.n_par;
      row.aic = fit.aic;
      row.bic = fit.bic;
      row.converged = fit.converged;
    } catch (const Error&) {
      row.fit_failed = true;
    }
    report.rows.push_back(row);
  }
  double prev_bic = 0.0, running_ll = kNegInf, best_bic = 0.0;
  bool have_prev = false;
  for (const auto& row : report.rows) {
    if (row.fit_failed) continue;
    if (have_prev) report.bic_diff.push_back(row.bic - prev_bic);
    if (have_prev && row.loglik < running_ll)
      report.nonmonotone_k.push_back(row.k);
    prev_bic = row.bic;
    running_ll = std::max(running_ll, row.loglik);
    have_prev = true;
    if (report.best_k < 0 || row.bic < best_bic) {
      report.best_k = row.k;
      best_bic = row.bic;
    }
  }
  return report;
}

FlatParams flatten_params(const HmmParams& params) {
  const int k = params.k;
  const int r = params.r();
  FlatParams flat;
  std::vector<double> vals;
  auto push = [&](const std::string& name, double v) {
    flat.names.push_back(name);
    vals.push_back(v);
  };
  for (int u = 0; u < k; ++u)
    for (int j = 0; j < r; ++j)
      push("mu[" + std::to_string(u + 1) + "][" + std::to_string(j + 1) + "]",
           params.means[u][j]);
  for (int a = 0; a < r; ++a)
    for (int b = 0; b <= a; ++b)
      push("Sigma[" + std::to_string(a + 1) + "][" + std::to_string(b + 1) + "]",
           params.cov(a, b));
  if (!params.has_covariates()) {
    for (int u = 0; u < k; ++u)
      push("pi[" + std::to_string(u + 1) + "]", params.initial[u]);
    for (int ubar = 0; ubar < k; ++ubar)
      for (int u = 0; u <= k; ++u)
        push("Pi[" + std::to_string(ubar + 1) + "][" + std::to_string(u + 1) + "]",
             params.transition(ubar, u));
  } else {
    const int q = static_cast<int>(params.B->coef.cols());
    for (int u = 1; u < k; ++u)
      for (int c = 0; c < q; ++c)
        push("B[" + std::to_string(u + 1) + "][" + std::to_string(c) + "]",
             params.B->coef(u - 1, c));
    for (int ubar = 0; ubar < k; ++ubar)
      for (int u = 0; u <= k; ++u) {
        if (u == ubar) continue;
        for (int c = 0; c < q; ++c)
          push("Gamma[" + std::to_string(ubar + 1) + "->" + std::to_string(u + 1) +
                   "][" + std::to_string(c) + "]",
               params.Gamma->coef[ubar](TransitionLogitParams::dest_row(ubar, u), c));
      }
  }
  flat.values = Eigen::Map<VectorXd>(vals.data(), vals.size());
  return flat;
}

StdErrReport bootstrap_se(const PanelDataset& data, int k,
                          const FitResult& fitted, int b_reps,
                          std::uint64_t seed, const HmmFitOptions& opts) {
  if (b_reps < 2) throw InvalidInput("bootstrap needs at least 2 replicates");
  if (fitted.params.k != k)
    throw InvalidInput("fitted parameters do not match the requested k");
  FlatParams original = flatten_params(fitted.params);
  const auto dim = original.values.size();

  std::vector<VectorXd> estimates(b_reps);
  std::vector<char> okay(b_reps, 0);
  parallel_for(static_cast<std::size_t>(b_reps), opts.workers, [&](std::size_t b) {
    auto rng = substream(seed, stream::kBootstrap, b);
    std::uniform_int_distribution<int> pick(0, data.n() - 1);
    PanelDataset resampled;
    resampled.r = data.r;
    resampled.p = data.p;
    resampled.response_names = data.response_names;
    resampled.covariate_names = data.covariate_names;
    resampled.subjects.reserve(data.n());
    for (int i = 0; i < data.n(); ++i) {
      SubjectRecord rec = data.subjects[pick(rng)];
      rec.id += "#b" + std::to_string(b + 1) + "." + std::to_string(i + 1);
      resampled.subjects.push_back(std::move(rec));
    }
    try {
      EmOptions em = opts;
      em.workers = 1;
      EmRun run = run_em(resampled, fitted.params, em);
      if (!run.converged) return;
      std::vector<int> perm =
          best_mean_permutation(run.params.means, fitted.params.means);
      HmmParams aligned = apply_state_permutation(run.params, perm);
      estimates[b] = flatten_params(aligned).values;
      okay[b] = 1;
    } catch (const Error&) {
      // failed replicate: counted below
    }
  });

  int m = 0;
  VectorXd mean = VectorXd::Zero(dim);
  for (int b = 0; b < b_reps; ++b)
    if (okay[b]) {
      mean += estimates[b];
      ++m;
    }
  if (m < 2)
    throw BootstrapFailed("fewer than 2 bootstrap replicates converged");
  mean /= m;
  VectorXd ss = VectorXd::Zero(dim);
  for (int b = 0; b < b_reps; ++b)
    if (okay[b]) ss += (estimates[b] - mean).cwiseAbs2();

  StdErrReport report;
  report.method = "bootstrap";
  report.names = original.names;
  report.estimate = original.values;
  report.se = (ss / (m - 1)).cwiseSqrt();
  report.replicates = b_reps;
  report.converged_replicates = m;
  report.failed_replicates = b_reps - m;
  return report;
}

// ---------------------------------------------------------------------------
// Unconstrained parameterization and the Oakes score.

static double safe_logit(double p_num, double p_den) {
  const double floor = 1e-300;
  return std::log(std::max(p_num, floor)) - std::log(std::max(p_den, floor));
}

static bool prob_at_boundary(double p) { return p < 1e-10; }

PackedParams pack_unconstrained(const HmmParams& params) {
  const int k = params.k;
  const int r = params.r();
  PackedParams out;
  std::vector<double> vals;
  auto push = [&](const std::string& name, double v, bool boundary = false) {
    out.names.push_back(name);
    vals.push_back(v);
    out.at_boundary.push_back(boundary ? 1 : 0);
  };
  for (int u = 0; u < k; ++u)
    for (int j = 0; j < r; ++j)
      push("mu[" + std::to_string(u + 1) + "][" + std::to_string(j + 1) + "]",
           params.means[u][j]);
  Eigen::LLT<MatrixXd> llt(params.cov);
  if (llt.info() != Eigen::Success)
    throw SingularCovariance("covariance is not positive definite");
  MatrixXd L = llt.matrixL();
  for (int a = 0; a < r; ++a)
    for (int b = 0; b <= a; ++b) {
      std::string nm = "lSigma[" + std::to_string(a + 1) + "][" +
                       std::to_string(b + 1) + "]";
      push(nm, a == b ? std::log(L(a, a)) : L(a, b));
    }
  if (!params.has_covariates()) {
    for (int u = 1; u < k; ++u)
      push("lambda[" + std::to_string(u + 1) + "]",
           safe_logit(params.initial[u], params.initial[0]),
           prob_at_boundary(params.initial[u]) ||
               prob_at_boundary(params.initial[0]));
    for (int ubar = 0; ubar < k; ++ubar)
      for (int u = 0; u <= k; ++u) {
        if (u == ubar) continue;
        push("omega[" + std::to_string(ubar + 1) + "][" + std::to_string(u + 1) + "]",
             safe_logit(params.transition(ubar, u), params.transition(ubar, ubar)),
             prob_at_boundary(params.transition(ubar, u)) ||
                 prob_at_boundary(params.transition(ubar, ubar)));
      }
  } else {
    const int q = static_cast<int>(params.B->coef.cols());
    for (int u = 1; u < k; ++u)
      for (int c = 0; c < q; ++c)
        push("B[" + std::to_string(u + 1) + "][" + std::to_string(c) + "]",
             params.B->coef(u - 1, c));
    for (int ubar = 0; ubar < k; ++ubar)
      for (int u = 0; u <= k; ++u) {
        if (u == ubar) continue;
        for (int c = 0; c < q; ++c)
          push("Gamma[" + std::to_string(ubar + 1) + "->" + std::to_string(u + 1) +
                   "][" + std::to_string(c) + "]",
               params.Gamma->coef[ubar](TransitionLogitParams::dest_row(ubar, u), c));
      }
  }
  out.theta = Eigen::Map<VectorXd>(vals.data(), vals.size());
  return out;
}

HmmParams unpack_unconstrained(const VectorXd& theta,
                               const HmmParams& reference) {
  const int k = reference.k;
  const int r = reference.r();
  HmmParams params = reference;
  Eigen::Index pos = 0;
  for (int u = 0; u < k; ++u)
    for (int j = 0; j < r; ++j) params.means[u][j] = theta[pos++];
  MatrixXd L = MatrixXd::Zero(r, r);
  for (int a = 0; a < r; ++a)
    for (int b = 0; b <= a; ++b) {
      double v = theta[pos++];
      L(a, b) = a == b ? std::exp(v) : v;
    }
  params.cov = L * L.transpose();
  params.cov = 0.5 * (params.cov + params.cov.transpose()).eval();
  if (!reference.has_covariates()) {
    VectorXd eta = VectorXd::Zero(k);
    for (int u = 1; u < k; ++u) eta[u] = theta[pos++];
    double m = eta.maxCoeff();
    VectorXd probs(k + 1);
    double s = 0.0;
    for (int u = 0; u < k; ++u) {
      probs[u] = std::exp(eta[u] - m);
      s += probs[u];
    }
    for (int u = 0; u < k; ++u) probs[u] /= s;
    probs[k] = 0.0;
    params.initial = probs;
    params.transition = MatrixXd::Zero(k + 1, k + 1);
    for (int ubar = 0; ubar < k; ++ubar) {
      VectorXd teta = VectorXd::Zero(k + 1);
      for (int u = 0; u <= k; ++u) {
        if (u == ubar) continue;
        teta[u] = theta[pos++];
      }
      double tm = teta.maxCoeff();
      double ts = 0.0;
      for (int u = 0; u <= k; ++u) {
        params.transition(ubar, u) = std::exp(teta[u] - tm);
        ts += params.transition(ubar, u);
      }
      params.transition.row(ubar) /= ts;
    }
    params.transition(k, k) = 1.0;
  } else {
    const int q = static_cast<int>(reference.B->coef.cols());
    InitialLogitParams b;
    b.coef.resize(std::max(0, k - 1), q);
    for (int u = 1; u < k; ++u)
      for (int c = 0; c < q; ++c) b.coef(u - 1, c) = theta[pos++];
    params.B = std::move(b);
    TransitionLogitParams g;
    g.coef.assign(k, MatrixXd::Zero(k, q));
    for (int ubar = 0; ubar < k; ++ubar)
      for (int u = 0; u <= k; ++u) {
        if (u == ubar) continue;
        for (int c = 0; c < q; ++c)
          g.coef[ubar](TransitionLogitParams::dest_row(ubar, u), c) = theta[pos++];
      }
    params.Gamma = std::move(g);
  }
  if (pos != theta.size())
    throw InvalidInput("theta length does not match the parameter layout");
  return params;
}

VectorXd observed_score(const PanelDataset& data, const HmmParams& params,
                        const EmOptions& opts) {
  const int k = params.k;
  const int r = data.r;
  EStepResult e = e_step(data, params, opts);

  VectorXd occupancy = VectorXd::Zero(k);
  std::vector<VectorXd> mean_acc(k, VectorXd::Zero(r));
  MatrixXd scatter = MatrixXd::Zero(r, r);
  long n0 = 0;
  VectorXd dev(r);
  for (int i = 0; i < data.n(); ++i) {
    const SubjectRecord& rec = data.subjects[i];
    const MatrixXd& z = e.posterior[i].smoothed;
    for (int t = 0; t < rec.n_occasions(); ++t) {
      if (rec.dropout[t]) continue;
      ++n0;
      const OccasionMoments& mom = e.moments[i][t];
      double zsum = 0.0;
      for (int u = 0; u < k; ++u) {
        double w = z(t, u);
        zsum += w;
        occupancy[u] += w;
        mean_acc[u] += w * mom.expect.row(u).transpose();
        if (w <= 0.0) continue;
        dev = mom.expect.row(u).transpose() - params.means[u];
        scatter.noalias() += w * (dev * dev.transpose());
      }
      scatter += zsum * mom.var_correction;
    }
  }

  Eigen::LLT<MatrixXd> llt(params.cov);
  if (llt.info() != Eigen::Success)
    throw SingularCovariance("covariance is not positive definite");
  MatrixXd L = llt.matrixL();
  MatrixXd cov_inv = llt.solve(MatrixXd::Identity(r, r));

  std::vector<double> score;
  for (int u = 0; u < k; ++u) {
    VectorXd g = cov_inv * (mean_acc[u] - occupancy[u] * params.means[u]);
    for (int j = 0; j < r; ++j) score.push_back(g[j]);
  }
  MatrixXd G = -0.5 * static_cast<double>(n0) * cov_inv +
               0.5 * cov_inv * scatter * cov_inv;
  MatrixXd GL = 2.0 * G * L;
  for (int a = 0; a < r; ++a)
    for (int b = 0; b <= a; ++b)
      score.push_back(a == b ? GL(a, a) * L(a, a) : GL(a, b));

  if (!params.has_covariates()) {
    VectorXd init_counts = VectorXd::Zero(k);
    double init_total = 0.0;
    MatrixXd trans_counts = MatrixXd::Zero(k + 1, k + 1);
    for (int i = 0; i < data.n(); ++i) {
      for (int u = 0; u < k; ++u) {
        init_counts[u] += e.posterior[i].smoothed(0, u);
        init_total += e.posterior[i].smoothed(0, u);
      }
      for (const MatrixXd& slice : e.posterior[i].pairwise) trans_counts += slice;
    }
    for (int u = 1; u < k; ++u)
      score.push_back(init_counts[u] - params.initial[u] * init_total);
    for (int ubar = 0; ubar < k; ++ubar) {
      double row_total = trans_counts.row(ubar).sum();
      for (int u = 0; u <= k; ++u) {
        if (u == ubar) continue;
        score.push_back(trans_counts(ubar, u) -
                        params.transition(ubar, u) * row_total);
      }
    }
  } else {
    MatrixXd design(data.n(), 1 + data.p);
    MatrixXd init_w(data.n(), k);
    for (int i = 0; i < data.n(); ++i) {
      design(i, 0) = 1.0;
      if (data.p > 0)
        design.row(i).tail(data.p) = data.subjects[i].covariates->row(0);
      for (int u = 0; u < k; ++u) init_w(i, u) = e.posterior[i].smoothed(0, u);
    }
    if (k > 1) {
      VectorXd g = multinomial_gradient(design, init_w, params.B->coef, 0);
      for (Eigen::Index j = 0; j < g.size(); ++j) score.push_back(g[j]);
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
    for (int ubar = 0; ubar < k; ++ubar) {
      VectorXd g = multinomial_gradient(tdesign, tweights[ubar],
                                        params.Gamma->coef[ubar], ubar);
      for (Eigen::Index j = 0; j < g.size(); ++j) score.push_back(g[j]);
    }
  }
  return Eigen::Map<VectorXd>(score.data(), score.size());
}

StdErrReport info_matrix_se(const PanelDataset& data, const FitResult& fitted,
                            const EmOptions& opts) {
  PackedParams packed = pack_unconstrained(fitted.params);
  const auto dim = packed.theta.size();
  std::vector<Eigen::Index> active;
  for (Eigen::Index j = 0; j < dim; ++j)
    if (!packed.at_boundary[j]) active.push_back(j);
  const auto m = static_cast<Eigen::Index>(active.size());

  EmOptions inner = opts;
  inner.workers = 1;  // the Jacobian columns already run in parallel
  auto score_at = [&](const VectorXd& theta_full) {
    HmmParams p = unpack_unconstrained(theta_full, fitted.params);
    VectorXd s = observed_score(data, p, inner);
    VectorXd out(m);
    for (Eigen::Index j = 0; j < m; ++j) out[j] = s[active[j]];
    return out;
  };

  MatrixXd J(m, m);
  std::vector<VectorXd> columns(m);
  parallel_for(static_cast<std::size_t>(m), opts.workers, [&](std::size_t jj) {
    const auto j = active[jj];
    double h = 1e-5 * std::max(1.0, std::abs(packed.theta[j]));
    VectorXd plus = packed.theta, minus = packed.theta;
    plus[j] += h;
    minus[j] -= h;
    columns[jj] = -(score_at(plus) - score_at(minus)) / (2.0 * h);
  });
  for (Eigen::Index j = 0; j < m; ++j) J.col(j) = columns[j];
  J = 0.5 * (J + J.transpose()).eval();

  StdErrReport report;
  report.method = "information";
  report.names = packed.names;
  report.estimate = packed.theta;
  report.se = VectorXd::Zero(dim);
  report.at_boundary = packed.at_boundary;

  MatrixXd J_inv;
  Eigen::LLT<MatrixXd> llt(J);
  if (llt.info() == Eigen::Success) {
    J_inv = llt.solve(MatrixXd::Identity(m, m));
  } else {
    report.non_pd = true;
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(J);
    VectorXd vals = eig.eigenvalues().cwiseMax(1e-10);
    J_inv = eig.eigenvectors() * vals.cwiseInverse().asDiagonal() *
            eig.eigenvectors().transpose();
  }
  for (Eigen::Index jj = 0; jj < m; ++jj) {
    double v = J_inv(jj, jj);
    report.se[active[jj]] = v > 0.0 ? std::sqrt(v) : 0.0;
    if (v <= 0.0) report.non_pd = true;
  }
  return report;
}

}  // namespace hmmpanel
