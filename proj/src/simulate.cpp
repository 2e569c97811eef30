#include "hmmpanel/simulate.hpp"

#include <cmath>
#include <string>

#include "hmmpanel/parallel.hpp"
#include "hmmpanel/rng.hpp"

namespace hmmpanel {

void ScenarioSpec::validate() const {
  if (k < 1 || n < 1 || T < 1 || r < 1)
    throw InvalidInput("scenario dimensions must be positive");
  if (!(p_miss >= 0.0 && p_miss < 1.0))
    throw InvalidInput("p_miss must lie in [0, 1)");
  if (!(p_drop >= 0.0 && p_drop < 1.0))
    throw InvalidInput("p_drop must lie in [0, 1)");
  if (n_reps < 1) throw InvalidInput("n_reps must be positive");
  true_params.validate();
  if (true_params.k != k || true_params.r() != r)
    throw InvalidInput("true parameters do not match the scenario dimensions");
}

ScenarioSpec default_scenario(int k, int n, double p) {
  if (k != 2 && k != 3) throw InvalidInput("default scenarios cover k = 2 or 3");
  bool on_grid = false;
  for (double level : {0.01, 0.05, 0.10, 0.25})
    if (std::abs(p - level) < 1e-12) on_grid = true;
  if (!on_grid) throw InvalidInput("p must be one of .01, .05, .10, .25");

  ScenarioSpec spec;
  spec.k = k;
  spec.n = n;
  spec.T = 5;
  spec.r = 3;
  spec.p_miss = p;
  spec.p_drop = p;

  HmmParams truth;
  truth.k = k;
  truth.means.resize(k);
  truth.means[0] = (VectorXd(3) << -2.0, -2.0, 0.0).finished();
  if (k == 2) {
    truth.means[1] = (VectorXd(3) << 0.0, 2.0, 2.0).finished();
  } else {
    truth.means[1] = (VectorXd(3) << 0.0, 0.0, 0.0).finished();
    truth.means[2] = (VectorXd(3) << 0.0, 2.0, 2.0).finished();
  }
  truth.cov = MatrixXd::Constant(3, 3, 0.5);
  truth.cov.diagonal().setOnes();
  truth.initial = VectorXd::Zero(k + 1);
  truth.initial.head(k).setConstant(1.0 / k);
  truth.transition = MatrixXd::Zero(k + 1, k + 1);
  if (k == 2) {
    truth.transition.row(0) << 1.0 - 0.10 - p, 0.10, p;
    truth.transition.row(1) << 0.10, 1.0 - 0.10 - p, p;
  } else {
    truth.transition.row(0) << 1.0 - 0.10 - p, 0.09, 0.01, p;
    truth.transition.row(1) << 0.08, 1.0 - 0.16 - p, 0.08, p;
    truth.transition.row(2) << 0.01, 0.09, 1.0 - 0.10 - p, p;
  }
  truth.transition(k, k) = 1.0;
  spec.true_params = truth;
  spec.validate();
  return spec;
}

static int draw_categorical(const VectorXd& probs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double u = unif(rng);
  double acc = 0.0;
  for (Eigen::Index c = 0; c < probs.size(); ++c) {
    acc += probs[c];
    if (u <= acc) return static_cast<int>(c);
  }
  // roundoff fallthrough: land on the last category with positive mass
  for (Eigen::Index c = probs.size() - 1; c >= 0; --c)
    if (probs[c] > 0.0) return static_cast<int>(c);
  return 0;
}

PanelDataset generate_panel_with_labels(const ScenarioSpec& spec, int rep_index,
                                        std::vector<std::vector<int>>* labels) {
  spec.validate();
  const int k = spec.k;
  const int r = spec.r;
  const HmmParams& truth = spec.true_params;
  auto rng = substream(spec.seed, stream::kSimulation,
                       static_cast<std::uint64_t>(rep_index));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::LLT<MatrixXd> llt(truth.cov);
  if (llt.info() != Eigen::Success)
    throw SingularCovariance("true covariance is not positive definite");
  MatrixXd chol = llt.matrixL();

  PanelDataset data;
  data.r = r;
  data.p = 0;
  for (int j = 0; j < r; ++j) data.response_names.push_back("y" + std::to_string(j + 1));
  if (labels) labels->assign(spec.n, {});

  const double nan = std::numeric_limits<double>::quiet_NaN();
  VectorXd z(r);
  for (int i = 0; i < spec.n; ++i) {
    SubjectRecord rec;
    rec.id = "s" + std::to_string(i + 1);
    rec.responses.resize(spec.T, r);
    rec.dropout.resize(spec.T);
    int state = draw_categorical(truth.initial, rng);
    std::vector<int> path;
    for (int t = 0; t < spec.T; ++t) {
      if (t > 0)
        state = state == k ? k
                           : draw_categorical(truth.transition.row(state), rng);
      path.push_back(state);
      std::vector<bool> obs(r, false);
      if (state == k) {
        rec.dropout[t] = 1;
        for (int c = 0; c < r; ++c) rec.responses(t, c) = nan;
      } else {
        rec.dropout[t] = 0;
        for (int c = 0; c < r; ++c) z[c] = gauss(rng);
        VectorXd y = truth.means[state] + chol * z;
        for (int c = 0; c < r; ++c) {
          bool missing = unif(rng) < spec.p_miss;
          obs[c] = !missing;
          rec.responses(t, c) = missing ? nan : y[c];
        }
      }
      rec.observed.emplace_back(std::move(obs));
    }
    if (labels) (*labels)[i] = std::move(path);
    data.subjects.push_back(std::move(rec));
  }
  data.validate();
  return data;
}

PanelDataset generate_panel(const ScenarioSpec& spec, int rep_index) {
  return generate_panel_with_labels(spec, rep_index, nullptr);
}

namespace {

// Flattened parameter blocks for a replicate, aligned to the truth.
struct RepEstimate {
  VectorXd mu;      // k*r
  VectorXd sigma;   // r(r+1)/2
  VectorXd pi;      // k
  VectorXd trans;   // (k+1)^2
  MatrixXd trans_mat;
};

RepEstimate flatten_aligned(const HmmParams& params) {
  const int k = params.k;
  const int r = params.r();
  RepEstimate est;
  est.mu.resize(k * r);
  for (int u = 0; u < k; ++u)
    for (int j = 0; j < r; ++j) est.mu[u * r + j] = params.means[u][j];
  est.sigma.resize(r * (r + 1) / 2);
  int pos = 0;
  for (int a = 0; a < r; ++a)
    for (int b = 0; b <= a; ++b) est.sigma[pos++] = params.cov(a, b);
  est.pi = params.initial.head(k);
  est.trans.resize((k + 1) * (k + 1));
  pos = 0;
  for (int a = 0; a <= k; ++a)
    for (int b = 0; b <= k; ++b) est.trans[pos++] = params.transition(a, b);
  est.trans_mat = params.transition;
  return est;
}

BlockSummary summarize_block(const std::vector<VectorXd>& reps,
                             const VectorXd& truth) {
  const auto m = static_cast<double>(reps.size());
  const auto dim = truth.size();
  VectorXd mean = VectorXd::Zero(dim);
  for (const auto& v : reps) mean += v;
  mean /= m;
  VectorXd var = VectorXd::Zero(dim);
  for (const auto& v : reps) var += (v - mean).cwiseAbs2();
  var /= m;  // population variance so rmse^2 = bias^2 + sd^2 exactly
  BlockSummary out;
  for (Eigen::Index j = 0; j < dim; ++j) {
    double bias = mean[j] - truth[j];
    double sd = std::sqrt(var[j]);
    out.abs_bias += std::abs(bias);
    out.sd += sd;
    out.rmse += std::sqrt(bias * bias + sd * sd);
  }
  out.abs_bias /= static_cast<double>(dim);
  out.sd /= static_cast<double>(dim);
  out.rmse /= static_cast<double>(dim);
  return out;
}

}  // namespace

StudyReport run_study(const ScenarioSpec& spec, const StudyOptions& opts) {
  spec.validate();
  const int k = spec.k;
  const int B = spec.n_reps;

  std::vector<RepEstimate> estimates(B);
  std::vector<char> okay(B, 0);
  parallel_for(static_cast<std::size_t>(B), opts.workers, [&](std::size_t b) {
    try {
      PanelDataset panel = generate_panel(spec, static_cast<int>(b));
      HmmFitOptions fit_opts = opts.fit;
      fit_opts.workers = 1;
      fit_opts.seed = spec.seed * 1000003ULL + b + 1;
      FitResult fit = fit_hmm(panel, k, fit_opts);
      std::vector<int> perm =
          best_mean_permutation(fit.params.means, spec.true_params.means);
      HmmParams aligned = apply_state_permutation(fit.params, perm);
      estimates[b] = flatten_aligned(aligned);
      okay[b] = 1;
    } catch (const Error&) {
      // failed replicate: excluded and counted
    }
  });

  StudyReport report;
  report.n_reps = B;
  RepEstimate truth = flatten_aligned(spec.true_params);
  std::vector<VectorXd> mu_reps, sigma_reps, pi_reps, trans_reps;
  MatrixXd avg_trans = MatrixXd::Zero(k + 1, k + 1);
  std::vector<VectorXd> avg_means(k, VectorXd::Zero(spec.r));
  VectorXd avg_init = VectorXd::Zero(k);
  for (int b = 0; b < B; ++b) {
    if (!okay[b]) continue;
    mu_reps.push_back(estimates[b].mu);
    sigma_reps.push_back(estimates[b].sigma);
    pi_reps.push_back(estimates[b].pi);
    trans_reps.push_back(estimates[b].trans);
    avg_trans += estimates[b].trans_mat;
    avg_init += estimates[b].pi;
    for (int u = 0; u < k; ++u)
      avg_means[u] += estimates[b].mu.segment(u * spec.r, spec.r);
  }
  report.n_completed = static_cast<int>(mu_reps.size());
  report.n_failed = B - report.n_completed;
  if (report.n_completed == 0) throw FitFailed("every study replicate failed");

  report.mu = summarize_block(mu_reps, truth.mu);
  report.sigma = summarize_block(sigma_reps, truth.sigma);
  report.pi = summarize_block(pi_reps, truth.pi);
  report.trans = summarize_block(trans_reps, truth.trans);
  report.avg_transition = avg_trans / report.n_completed;
  report.true_transition = spec.true_params.transition;
  report.avg_initial = avg_init / report.n_completed;
  report.avg_means.resize(k);
  for (int u = 0; u < k; ++u)
    report.avg_means[u] = avg_means[u] / report.n_completed;
  return report;
}

}  // namespace hmmpanel
