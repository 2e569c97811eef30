#include "support/oracles.hpp"

#include <cmath>
#include <limits>

namespace oracles {

static constexpr double kNegInf = -std::numeric_limits<double>::infinity();
static constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double oracle_emission_log(const SubjectRecord& rec, int t, int u,
                           const HmmParams& params) {
  const int k = params.k;
  if (rec.dropout[t]) return u == k ? 0.0 : kNegInf;
  if (u == k) return kNegInf;
  std::vector<int> obs = rec.observed[t].observed_indices();
  if (obs.empty()) return 0.0;
  const auto no = static_cast<Eigen::Index>(obs.size());
  VectorXd dev(no);
  MatrixXd s_oo(no, no);
  for (Eigen::Index a = 0; a < no; ++a) {
    dev[a] = rec.responses(t, obs[a]) - params.means[u][obs[a]];
    for (Eigen::Index b = 0; b < no; ++b)
      s_oo(a, b) = params.cov(obs[a], obs[b]);
  }
  MatrixXd inv = s_oo.inverse();
  double logdet = std::log(s_oo.determinant());
  double quad = dev.dot(inv * dev);
  return -0.5 * (static_cast<double>(no) * kLog2Pi + logdet + quad);
}

static VectorXd oracle_initial(const SubjectRecord& rec,
                               const HmmParams& params) {
  const int k = params.k;
  if (!params.has_covariates()) return params.initial;
  VectorXd x = rec.covariates ? VectorXd(rec.covariates->row(0))
                              : VectorXd(VectorXd::Zero(0));
  VectorXd eta = VectorXd::Zero(k);
  for (int u = 1; u < k; ++u) {
    eta[u] = params.B->coef(u - 1, 0);
    for (int c = 0; c < x.size(); ++c) eta[u] += params.B->coef(u - 1, c + 1) * x[c];
  }
  VectorXd probs = VectorXd::Zero(k + 1);
  double denom = 0.0;
  for (int u = 0; u < k; ++u) denom += std::exp(eta[u]);
  for (int u = 0; u < k; ++u) probs[u] = std::exp(eta[u]) / denom;
  return probs;
}

static MatrixXd oracle_transition(const SubjectRecord& rec, int t,
                                  const HmmParams& params) {
  const int k = params.k;
  if (!params.has_covariates()) return params.transition;
  VectorXd x = rec.covariates ? VectorXd(rec.covariates->row(t))
                              : VectorXd(VectorXd::Zero(0));
  MatrixXd P = MatrixXd::Zero(k + 1, k + 1);
  for (int ubar = 0; ubar < k; ++ubar) {
    VectorXd eta = VectorXd::Zero(k + 1);
    for (int u = 0; u <= k; ++u) {
      if (u == ubar) continue;
      int row = hmmpanel::TransitionLogitParams::dest_row(ubar, u);
      eta[u] = params.Gamma->coef[ubar](row, 0);
      for (int c = 0; c < x.size(); ++c)
        eta[u] += params.Gamma->coef[ubar](row, c + 1) * x[c];
    }
    double denom = 0.0;
    for (int u = 0; u <= k; ++u) denom += std::exp(eta[u]);
    for (int u = 0; u <= k; ++u) P(ubar, u) = std::exp(eta[u]) / denom;
  }
  P(k, k) = 1.0;
  return P;
}

EnumResult enumerate_posteriors(const SubjectRecord& rec,
                                const HmmParams& params) {
  const int k = params.k;
  const int S = k + 1;
  const int T = rec.n_occasions();
  MatrixXd logE(T, S);
  for (int t = 0; t < T; ++t)
    for (int u = 0; u < S; ++u) logE(t, u) = oracle_emission_log(rec, t, u, params);
  VectorXd init = oracle_initial(rec, params);
  std::vector<MatrixXd> trans;
  for (int t = 1; t < T; ++t) trans.push_back(oracle_transition(rec, t, params));

  long n_paths = 1;
  for (int t = 0; t < T; ++t) n_paths *= S;
  std::vector<double> logp(n_paths, kNegInf);
  std::vector<std::vector<int>> paths(n_paths);
  for (long idx = 0; idx < n_paths; ++idx) {
    std::vector<int> path(T);
    long rem = idx;
    for (int t = 0; t < T; ++t) {
      path[t] = static_cast<int>(rem % S);
      rem /= S;
    }
    double lp = std::log(init[path[0]]) + logE(0, path[0]);
    for (int t = 1; t < T; ++t)
      lp += std::log(trans[t - 1](path[t - 1], path[t])) + logE(t, path[t]);
    logp[idx] = lp;
    paths[idx] = std::move(path);
  }
  double m = kNegInf;
  for (double lp : logp) m = std::max(m, lp);
  double total = 0.0;
  for (double lp : logp) total += std::exp(lp - m);

  EnumResult res;
  res.loglik = m + std::log(total);
  res.smoothed = MatrixXd::Zero(T, S);
  res.pairwise.assign(std::max(0, T - 1), MatrixXd::Zero(S, S));
  for (long idx = 0; idx < n_paths; ++idx) {
    double w = std::exp(logp[idx] - m) / total;
    if (w == 0.0) continue;
    for (int t = 0; t < T; ++t) res.smoothed(t, paths[idx][t]) += w;
    for (int t = 1; t < T; ++t)
      res.pairwise[t - 1](paths[idx][t - 1], paths[idx][t]) += w;
  }
  return res;
}

std::vector<int> enumerate_viterbi(const SubjectRecord& rec,
                                   const HmmParams& params) {
  const int k = params.k;
  const int S = k + 1;
  const int T = rec.n_occasions();
  MatrixXd logE(T, S);
  for (int t = 0; t < T; ++t)
    for (int u = 0; u < S; ++u) logE(t, u) = oracle_emission_log(rec, t, u, params);
  VectorXd init = oracle_initial(rec, params);
  std::vector<MatrixXd> trans;
  for (int t = 1; t < T; ++t) trans.push_back(oracle_transition(rec, t, params));

  long n_paths = 1;
  for (int t = 0; t < T; ++t) n_paths *= S;
  double best = kNegInf;
  std::vector<int> best_path;
  for (long idx = 0; idx < n_paths; ++idx) {
    std::vector<int> path(T);
    long rem = idx;
    for (int t = 0; t < T; ++t) {
      path[t] = static_cast<int>(rem % S);
      rem /= S;
    }
    double lp = std::log(init[path[0]]) + logE(0, path[0]);
    for (int t = 1; t < T; ++t)
      lp += std::log(trans[t - 1](path[t - 1], path[t])) + logE(t, path[t]);
    if (lp > best) {
      best = lp;
      best_path = path;
    }
  }
  return best_path;
}

double log_space_loglik(const SubjectRecord& rec, const HmmParams& params) {
  const int k = params.k;
  const int S = k + 1;
  const int T = rec.n_occasions();
  auto logsumexp = [](const VectorXd& v) {
    double m = v.maxCoeff();
    if (!(m > kNegInf)) return kNegInf;
    double s = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) s += std::exp(v[i] - m);
    return m + std::log(s);
  };
  VectorXd init = oracle_initial(rec, params);
  VectorXd log_alpha(S);
  for (int u = 0; u < S; ++u)
    log_alpha[u] = std::log(init[u]) + oracle_emission_log(rec, 0, u, params);
  VectorXd next(S), terms(S);
  for (int t = 1; t < T; ++t) {
    MatrixXd P = oracle_transition(rec, t, params);
    for (int u = 0; u < S; ++u) {
      for (int ubar = 0; ubar < S; ++ubar)
        terms[ubar] = log_alpha[ubar] + std::log(P(ubar, u));
      next[u] = logsumexp(terms) + oracle_emission_log(rec, t, u, params);
    }
    log_alpha = next;
  }
  return logsumexp(log_alpha);
}

MatrixXd random_spd(int r, std::mt19937_64& rng, double base) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  MatrixXd a(r, r);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < r; ++j) a(i, j) = gauss(rng);
  MatrixXd s = a * a.transpose() / r + base * MatrixXd::Identity(r, r);
  return 0.5 * (s + s.transpose());
}

HmmParams random_hmm_params(int k, int r, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.05, 1.0);
  HmmParams params;
  params.k = k;
  params.means.resize(k);
  for (int u = 0; u < k; ++u) {
    params.means[u].resize(r);
    for (int j = 0; j < r; ++j) params.means[u][j] = 2.0 * gauss(rng);
  }
  params.cov = random_spd(r, rng);
  params.initial = VectorXd::Zero(k + 1);
  for (int u = 0; u < k; ++u) params.initial[u] = unif(rng);
  params.initial.head(k) /= params.initial.head(k).sum();
  params.transition = MatrixXd::Zero(k + 1, k + 1);
  for (int ubar = 0; ubar < k; ++ubar) {
    for (int u = 0; u <= k; ++u) params.transition(ubar, u) = unif(rng);
    params.transition.row(ubar) /= params.transition.row(ubar).sum();
  }
  params.transition(k, k) = 1.0;
  return params;
}

SubjectRecord make_record(const std::string& id, const MatrixXd& y,
                          const std::vector<char>& dropout) {
  SubjectRecord rec;
  rec.id = id;
  rec.responses = y;
  rec.dropout = dropout;
  for (Eigen::Index t = 0; t < y.rows(); ++t) {
    std::vector<bool> obs(y.cols());
    for (Eigen::Index c = 0; c < y.cols(); ++c) obs[c] = std::isfinite(y(t, c));
    rec.observed.emplace_back(std::move(obs));
  }
  return rec;
}

PanelDataset make_panel(std::vector<SubjectRecord> subjects, int r) {
  PanelDataset data;
  data.r = r;
  data.p = 0;
  for (int j = 0; j < r; ++j)
    data.response_names.push_back("y" + std::to_string(j + 1));
  data.subjects = std::move(subjects);
  return data;
}

SubjectRecord simulate_record(const HmmParams& params, int T, double p_miss,
                              std::mt19937_64& rng, const std::string& id) {
  const int k = params.k;
  const int r = params.r();
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::LLT<MatrixXd> llt(params.cov);
  MatrixXd chol = llt.matrixL();
  const double nan = std::numeric_limits<double>::quiet_NaN();

  auto draw = [&](const VectorXd& probs) {
    double u = unif(rng), acc = 0.0;
    for (Eigen::Index c = 0; c < probs.size(); ++c) {
      acc += probs[c];
      if (u <= acc) return static_cast<int>(c);
    }
    for (Eigen::Index c = probs.size() - 1; c >= 0; --c)
      if (probs[c] > 0.0) return static_cast<int>(c);
    return 0;
  };

  SubjectRecord rec;
  rec.id = id;
  rec.responses.resize(T, r);
  rec.dropout.resize(T);
  int state = draw(params.initial);
  for (int t = 0; t < T; ++t) {
    if (t > 0)
      state = state == k ? k : draw(params.transition.row(state).transpose());
    std::vector<bool> obs(r, false);
    if (state == k) {
      rec.dropout[t] = 1;
      for (int c = 0; c < r; ++c) rec.responses(t, c) = nan;
    } else {
      rec.dropout[t] = 0;
      VectorXd z(r);
      for (int c = 0; c < r; ++c) z[c] = gauss(rng);
      VectorXd y = params.means[state] + chol * z;
      for (int c = 0; c < r; ++c) {
        bool missing = unif(rng) < p_miss;
        obs[c] = !missing;
        rec.responses(t, c) = missing ? nan : y[c];
      }
    }
    rec.observed.emplace_back(std::move(obs));
  }
  return rec;
}

PanelDataset simulate_panel(const HmmParams& params, int n, int T,
                            double p_miss, std::mt19937_64& rng) {
  PanelDataset data;
  data.r = params.r();
  data.p = 0;
  for (int j = 0; j < data.r; ++j)
    data.response_names.push_back("y" + std::to_string(j + 1));
  for (int i = 0; i < n; ++i)
    data.subjects.push_back(
        simulate_record(params, T, p_miss, rng, "s" + std::to_string(i + 1)));
  return data;
}

}  // namespace oracles
