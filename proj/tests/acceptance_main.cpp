// Acceptance suite: runs every criterion at its stated tolerance and prints
// one PASS/FAIL line per criterion. Exit status is the number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hmmpanel/fmm.hpp"
#include "hmmpanel/inference.hpp"
#include "hmmpanel/simulate.hpp"
#include "support/oracles.hpp"

using namespace hmmpanel;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------- criterion 1
Outcome oracle_equivalence() {
  std::mt19937_64 rng(101);
  double worst_ll = 0.0, worst_post = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    int k = 1 + static_cast<int>(rng() % 3);
    int r = 1 + static_cast<int>(rng() % 2);
    int T = 1 + static_cast<int>(rng() % 4);
    HmmParams params = oracles::random_hmm_params(k, r, rng);
    SubjectRecord rec = oracles::simulate_record(params, T, 0.3, rng, "a");
    SubjectPosterior post = forward_backward(rec, params);
    oracles::EnumResult oracle = oracles::enumerate_posteriors(rec, params);
    worst_ll = std::max(worst_ll, std::abs(post.loglik - oracle.loglik) /
                                      std::abs(oracle.loglik));
    worst_post = std::max(
        worst_post, (post.smoothed - oracle.smoothed).cwiseAbs().maxCoeff());
    for (int t = 0; t + 1 < T; ++t)
      worst_post = std::max(
          worst_post,
          (post.pairwise[t] - oracle.pairwise[t]).cwiseAbs().maxCoeff());
  }
  std::ostringstream os;
  os << "200 instances; worst rel loglik err " << worst_ll
     << ", worst posterior err " << worst_post;
  return {worst_ll <= 1e-10 && worst_post <= 1e-8, os.str()};
}

// ---------------------------------------------------------------- criterion 2
Outcome em_monotonicity() {
  std::mt19937_64 rng(202);
  double worst_drop = 0.0;
  int fits = 0, iters = 0;
  for (int rep = 0; rep < 50; ++rep) {
    int k = 1 + static_cast<int>(rng() % 3);
    HmmParams truth = oracles::random_hmm_params(k, 2, rng);
    PanelDataset data = oracles::simulate_panel(truth, 200, 4, 0.2, rng);
    HmmFitOptions opts;
    opts.n_random_starts = 1;
    opts.seed = rep;
    opts.max_iter = 150;
    opts.workers = 2;
    try {
      FitResult fit = fit_hmm(data, k, opts);
      ++fits;
      for (std::size_t s = 1; s < fit.loglik_trace.size(); ++s) {
        double drop = (fit.loglik_trace[s - 1] - fit.loglik_trace[s]) /
                      std::abs(fit.loglik_trace[s]);
        worst_drop = std::max(worst_drop, drop);
        ++iters;
      }
    } catch (const Error&) {
      // failed start pair; still counts toward the 50 attempted fits
    }
  }
  std::ostringstream os;
  os << fits << "/50 fits, " << iters << " tracked iterations, worst relative"
     << " decrease " << worst_drop;
  return {fits >= 45 && worst_drop <= 1e-9, os.str()};
}

// ------------------------------------------------------------ criteria 3/4/5
StudyReport* table1_report() {
  static StudyReport report = [] {
    ScenarioSpec spec = default_scenario(2, 500, 0.10);
    spec.n_reps = 50;
    spec.seed = 2024;
    StudyOptions opts;
    opts.fit.n_random_starts = 1;
    opts.fit.max_iter = 1000;
    opts.workers = 2;
    return run_study(spec, opts);
  }();
  return &report;
}

StudyReport* table5_report() {
  static StudyReport report = [] {
    ScenarioSpec spec = default_scenario(3, 1000, 0.25);
    spec.n_reps = 50;
    spec.seed = 4048;
    StudyOptions opts;
    opts.fit.n_random_starts = 1;
    opts.fit.max_iter = 1000;
    opts.workers = 2;
    return run_study(spec, opts);
  }();
  return &report;
}

Outcome table1_recovery() {
  const StudyReport& rep = *table1_report();
  std::ostringstream os;
  os << "k=2 n=500 p=.10 B=50: mu |bias| " << rep.mu.abs_bias << " (<= 0.01), "
     << "mu rmse " << rep.mu.rmse << " (<= 0.05), completed "
     << rep.n_completed << "/50";
  return {rep.mu.abs_bias <= 0.01 && rep.mu.rmse <= 0.05 &&
              rep.n_completed >= 48,
          os.str()};
}

Outcome table5_recovery() {
  const StudyReport& rep = *table5_report();
  double worst_entry = 0.0, worst_drop = 0.0;
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      worst_entry = std::max(
          worst_entry,
          std::abs(rep.avg_transition(a, b) - rep.true_transition(a, b)));
  for (int a = 0; a < 3; ++a)
    worst_drop = std::max(worst_drop, std::abs(rep.avg_transition(a, 3) - 0.25));
  std::ostringstream os;
  os << "k=3 n=1000 p=.25 B=50: worst avg-transition error " << worst_entry
     << " (<= 0.03), worst dropout-column error " << worst_drop
     << " (<= 0.02), completed " << rep.n_completed << "/50";
  return {worst_entry <= 0.03 && worst_drop <= 0.02 && rep.n_completed >= 48,
          os.str()};
}

Outcome table34_bias() {
  const StudyReport& one = *table1_report();
  const StudyReport& five = *table5_report();
  std::ostringstream os;
  os << "initial |bias| " << one.pi.abs_bias << "/" << five.pi.abs_bias
     << " (<= 0.005), transition |bias| " << one.trans.abs_bias << "/"
     << five.trans.abs_bias << " (<= 0.005)";
  bool pass = one.pi.abs_bias <= 0.005 && five.pi.abs_bias <= 0.005 &&
              one.trans.abs_bias <= 0.005 && five.trans.abs_bias <= 0.005;
  return {pass, os.str()};
}

// ---------------------------------------------------------------- criterion 6
Outcome gradient_check() {
  std::mt19937_64 rng(606);
  double worst = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    int k = 1 + static_cast<int>(rng() % 2);
    HmmParams gen = oracles::random_hmm_params(k, 2, rng);
    PanelDataset data = oracles::simulate_panel(gen, 15, 3, 0.25, rng);
    HmmParams at = oracles::random_hmm_params(k, 2, rng);
    PackedParams packed = pack_unconstrained(at);
    VectorXd score = observed_score(data, at);
    VectorXd fd(packed.theta.size());
    for (Eigen::Index j = 0; j < packed.theta.size(); ++j) {
      double h = 1e-6 * std::max(1.0, std::abs(packed.theta[j]));
      VectorXd plus = packed.theta, minus = packed.theta;
      plus[j] += h;
      minus[j] -= h;
      fd[j] = (e_step(data, unpack_unconstrained(plus, at)).loglik -
               e_step(data, unpack_unconstrained(minus, at)).loglik) /
              (2 * h);
    }
    double err = (score - fd).cwiseAbs().maxCoeff() /
                 std::max(1.0, fd.cwiseAbs().maxCoeff());
    worst = std::max(worst, err);
  }
  std::ostringstream os;
  os << "20 random points; worst relative inf-norm error " << worst;
  return {worst <= 1e-5, os.str()};
}

// ---------------------------------------------------------------- criterion 7
Outcome closed_form_equivalence() {
  std::mt19937_64 rng(707);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double worst = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    int k = 2 + static_cast<int>(rng() % 2);
    int n = 30 + static_cast<int>(rng() % 40);
    MatrixXd design = MatrixXd::Ones(n, 1);
    MatrixXd init_w(n, k);
    for (int i = 0; i < n; ++i) {
      for (int u = 0; u < k; ++u) init_w(i, u) = unif(rng);
      init_w.row(i) /= init_w.row(i).sum();
    }
    InitialLogitParams b0;
    b0.coef = MatrixXd::Zero(k - 1, 1);
    InitialFit ifit = maximize_initial(design, init_w, b0);
    VectorXd closed = init_w.colwise().sum() / n;
    VectorXd probs = initial_probs(VectorXd(), ifit.params);
    for (int u = 0; u < k; ++u)
      worst = std::max(worst, std::abs(probs[u] - closed[u]));

    std::vector<MatrixXd> tw(k, MatrixXd::Zero(n, k + 1));
    for (int ubar = 0; ubar < k; ++ubar)
      for (int i = 0; i < n; ++i)
        for (int u = 0; u <= k; ++u) tw[ubar](i, u) = unif(rng);
    TransitionLogitParams g0;
    g0.coef.assign(k, MatrixXd::Zero(k, 1));
    TransitionFit tfit = maximize_transition(design, tw, g0);
    for (int ubar = 0; ubar < k; ++ubar) {
      VectorXd total = tw[ubar].colwise().sum();
      VectorXd share = total / total.sum();
      VectorXd tp = transition_probs(VectorXd(), ubar, tfit.params);
      for (int u = 0; u <= k; ++u)
        worst = std::max(worst, std::abs(tp[u] - share[u]));
    }
  }
  std::ostringstream os;
  os << "20 E-step inputs; worst probability gap vs closed form " << worst;
  return {worst <= 1e-8, os.str()};
}

// ---------------------------------------------------------------- criterion 8
Outcome viterbi_optimality() {
  std::mt19937_64 rng(808);
  int checked = 0, agreed = 0;
  for (int rep = 0; rep < 150; ++rep) {
    int k = 1 + static_cast<int>(rng() % 3);
    int S = k + 1;
    int max_T = static_cast<int>(std::floor(std::log(4096.0) / std::log(S)));
    int T = 1 + static_cast<int>(rng() % max_T);
    HmmParams params = oracles::random_hmm_params(k, 2, rng);
    SubjectRecord rec = oracles::simulate_record(params, T, 0.3, rng, "a");
    std::vector<int> mine = viterbi_decode(rec, params);
    std::vector<int> oracle = oracles::enumerate_viterbi(rec, params);
    ++checked;
    if (mine == oracle) ++agreed;
  }
  std::ostringstream os;
  os << agreed << "/" << checked << " exact joint-MAP agreements";
  return {agreed == checked, os.str()};
}

// ---------------------------------------------------------------- criterion 9
Outcome reduction_tests() {
  std::mt19937_64 rng(909);
  // (a) complete panels: regular vs disabled-machinery fit
  HmmParams truth = oracles::random_hmm_params(2, 2, rng);
  truth.transition.col(2).head(2).setZero();
  for (int ubar = 0; ubar < 2; ++ubar)
    truth.transition.row(ubar) /= truth.transition.row(ubar).sum();
  PanelDataset complete = oracles::simulate_panel(truth, 100, 4, 0.0, rng);
  HmmFitOptions opts;
  opts.n_random_starts = 2;
  opts.seed = 5;
  opts.max_iter = 400;
  FitResult regular = fit_hmm(complete, 2, opts);
  HmmFitOptions fast = opts;
  fast.complete_fast_path = true;
  FitResult quick = fit_hmm(complete, 2, fast);
  double gap = std::abs(regular.loglik - quick.loglik) / std::abs(regular.loglik);

  // (b) T=1 panels reproduce the mixture posterior
  double worst_post = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    int k = 1 + static_cast<int>(rng() % 3);
    HmmParams params = oracles::random_hmm_params(k, 2, rng);
    PanelDataset data = oracles::simulate_panel(params, 20, 1, 0.3, rng);
    EStepResult e = e_step(data, params);
    FmmParams fmm;
    fmm.k = k;
    fmm.means = params.means;
    fmm.covs.assign(k, params.cov);
    fmm.weights = params.initial.head(k);
    CrossSection cs;
    cs.y.resize(data.n(), 2);
    for (int i = 0; i < data.n(); ++i) {
      cs.y.row(i) = data.subjects[i].responses.row(0);
      cs.patterns.push_back(data.subjects[i].observed[0]);
    }
    FmmEStep fe = fmm_e_step(cs, fmm);
    for (int i = 0; i < data.n(); ++i)
      for (int u = 0; u < k; ++u)
        worst_post = std::max(worst_post,
                              std::abs(e.posterior[i].smoothed(0, u) -
                                       fe.posterior(i, u)));
  }
  std::ostringstream os;
  os << "complete-data rel loglik gap " << gap
     << " (<= 1e-10); T=1 posterior gap " << worst_post << " (exact)";
  return {gap <= 1e-10 && worst_post <= 1e-14, os.str()};
}

// --------------------------------------------------------------- criterion 10
PanelDataset synthetic_pbc_panel() {
  ScenarioSpec spec;
  spec.k = 5;
  spec.n = 312;
  spec.T = 29;
  spec.r = 7;
  spec.p_miss = 0.30;
  spec.seed = 1974;
  HmmParams truth;
  truth.k = 5;
  truth.means.resize(5);
  std::mt19937_64 mean_rng(7);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int u = 0; u < 5; ++u) {
    truth.means[u].resize(7);
    for (int j = 0; j < 7; ++j)
      truth.means[u][j] = 1.5 * (u - 2) + 0.5 * gauss(mean_rng);
  }
  truth.cov = MatrixXd::Constant(7, 7, 0.3);
  truth.cov.diagonal().setOnes();
  truth.initial = VectorXd::Zero(6);
  truth.initial.head(5).setConstant(0.2);
  truth.transition = MatrixXd::Zero(6, 6);
  for (int ubar = 0; ubar < 5; ++ubar) {
    double drop = 0.01 + 0.04 * ubar;  // later states drop out more
    for (int u = 0; u < 5; ++u)
      truth.transition(ubar, u) = u == ubar ? 0.80 : (0.20 - drop) / 4.0;
    truth.transition(ubar, 5) = drop;
  }
  truth.transition(5, 5) = 1.0;
  spec.true_params = truth;

  PanelDataset data = generate_panel(spec, 0);
  // administrative censoring: unbalanced follow-up lengths up to 29
  std::mt19937_64 rng(3141);
  std::uniform_int_distribution<int> follow(5, 29);
  std::normal_distribution<double> xg(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  data.p = 3;
  data.covariate_names = {"drug", "female", "age"};
  for (auto& rec : data.subjects) {
    int T_i = follow(rng);
    if (T_i < rec.n_occasions()) {
      rec.responses.conservativeResize(T_i, Eigen::NoChange);
      rec.observed.resize(T_i);
      rec.dropout.resize(T_i);
    }
    double drug = unif(rng) < 0.5 ? 1.0 : 0.0;
    double female = unif(rng) < 0.88 ? 1.0 : 0.0;
    double age0 = 50.0 + 10.0 * xg(rng);
    MatrixXd x(rec.n_occasions(), 3);
    for (int t = 0; t < rec.n_occasions(); ++t) {
      x(t, 0) = drug;
      x(t, 1) = female;
      x(t, 2) = (age0 + 0.5 * t - 50.0) / 10.0;  // standardized age
    }
    rec.covariates = x;
  }
  data.validate();
  return data;
}

Outcome pbc_scale_smoke() {
  PanelDataset data = synthetic_pbc_panel();

  HmmFitOptions opts;
  opts.covariates = true;
  opts.n_random_starts = 25;
  opts.deterministic_start = true;
  opts.tol = 1e-7;
  opts.max_iter = 400;
  opts.seed = 5;
  opts.workers = 2;
  FitResult fit = fit_hmm(data, 5, opts);

  bool structural = true;
  for (std::size_t s = 1; s < fit.loglik_trace.size(); ++s)
    if (fit.loglik_trace[s] <
        fit.loglik_trace[s - 1] - 1e-9 * std::abs(fit.loglik_trace[s]))
      structural = false;
  EStepResult e = e_step(data, fit.params, opts);
  for (int i = 0; i < data.n() && structural; ++i) {
    const MatrixXd& z = e.posterior[i].smoothed;
    for (Eigen::Index t = 0; t < z.rows(); ++t)
      if (std::abs(z.row(t).sum() - 1.0) > 1e-10) structural = false;
    for (const auto& slice : e.posterior[i].pairwise)
      if (std::abs(slice.sum() - 1.0) > 1e-10) structural = false;
  }
  VectorXd x0 = VectorXd::Zero(3);
  if (initial_probs(x0, *fit.params.B)[5] != 0.0) structural = false;
  if (transition_probs(x0, 5, *fit.params.Gamma)[5] != 1.0) structural = false;

  HmmFitOptions sel;
  sel.n_random_starts = 2;
  sel.tol = 1e-7;
  sel.max_iter = 300;
  sel.seed = 17;
  sel.workers = 2;
  SelectionReport report = select_k(data, {1, 2, 3, 4, 5}, sel);
  bool monotone = report.nonmonotone_k.empty();
  bool all_fit = true;
  for (const auto& row : report.rows) all_fit = all_fit && !row.fit_failed;

  std::ostringstream os;
  os << "k=5 fit with 26 starts: loglik " << fit.loglik << ", failed starts "
     << fit.failed_starts << ", structural invariants "
     << (structural ? "ok" : "VIOLATED") << "; select 1..5 "
     << (all_fit ? "complete" : "had failures") << ", loglik "
     << (monotone ? "monotone" : "NON-MONOTONE") << ", best k "
     << report.best_k;
  return {structural && monotone && all_fit, os.str()};
}

struct Criterion {
  int id;
  std::string name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> filter;
  for (int a = 1; a < argc; ++a) filter.insert(std::atoi(argv[a]));

  std::vector<Criterion> criteria = {
      {1, "forward-backward matches path enumeration", oracle_equivalence},
      {2, "EM monotonicity across random fits", em_monotonicity},
      {3, "Table-1 scale mean recovery", table1_recovery},
      {4, "Table-5 scale transition recovery", table5_recovery},
      {5, "Table-3/4 scale probability bias", table34_bias},
      {6, "Oakes score matches finite differences", gradient_check},
      {7, "Newton equals closed-form latent updates", closed_form_equivalence},
      {8, "Viterbi joint-MAP optimality", viterbi_optimality},
      {9, "complete-data and T=1 reductions", reduction_tests},
      {10, "PBC-scale covariate fit and selection", pbc_scale_smoke},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!filter.empty() && filter.find(c.id) == filter.end()) continue;
    auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("exception: ") + e.what();
    }
    double secs = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - start)
                      .count();
    std::printf("%s  criterion %2d: %s — %s (%.1fs)\n",
                out.pass ? "PASS" : "FAIL", c.id, c.name.c_str(),
                out.detail.c_str(), secs);
    std::fflush(stdout);
    if (!out.pass) ++failures;
  }
  return failures;
}
