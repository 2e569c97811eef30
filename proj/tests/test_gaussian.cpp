#include <doctest.h>

#include <cmath>
#include <random>

#include "hmmpanel/gaussian.hpp"
#include "support/oracles.hpp"

using namespace hmmpanel;

static GaussianParams bivariate_half() {
  GaussianParams gp;
  gp.mean = VectorXd::Zero(2);
  gp.cov = (MatrixXd(2, 2) << 1.0, 0.5, 0.5, 1.0).finished();
  return gp;
}

TEST_CASE("log density of the standard normal at its mode") {
  GaussianParams gp{VectorXd::Zero(1), MatrixXd::Identity(1, 1)};
  VectorXd y = VectorXd::Zero(1);
  CHECK(log_mvn_density(y, ObsPattern::all(1), gp) ==
        doctest::Approx(-0.9189385332046727).epsilon(1e-9));
}

TEST_CASE("marginal of a bivariate normal is univariate") {
  GaussianParams gp = bivariate_half();
  ObsPattern pat({std::vector<bool>{true, false}});
  VectorXd y(1);
  y << 1.0;
  CHECK(log_mvn_density(y, pat, gp) ==
        doctest::Approx(-0.5 * std::log(2 * M_PI) - 0.5).epsilon(1e-9));
}

TEST_CASE("bivariate density matches the hand-inverted quadratic form") {
  GaussianParams gp = bivariate_half();
  VectorXd y(2);
  y << 1.0, -1.0;
  // explicit 2x2 inverse of [[1,.5],[.5,1]]: (1/.75)*[[1,-.5],[-.5,1]]
  double det = 0.75;
  double quad = (y[0] * y[0] - 2 * 0.5 * y[0] * y[1] + y[1] * y[1]) / det;
  double expected = -0.5 * (2 * std::log(2 * M_PI) + std::log(det) + quad);
  CHECK(log_mvn_density(y, ObsPattern::all(2), gp) ==
        doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("density errors") {
  GaussianParams singular{VectorXd::Zero(2),
                          (MatrixXd(2, 2) << 1.0, 1.0, 1.0, 1.0).finished()};
  VectorXd y = VectorXd::Zero(2);
  CHECK_THROWS_AS(log_mvn_density(y, ObsPattern::all(2), singular),
                  SingularCovariance);
  GaussianParams gp = bivariate_half();
  VectorXd wrong = VectorXd::Zero(2);
  ObsPattern one_slot({std::vector<bool>{true, false}});
  CHECK_THROWS_AS(log_mvn_density(wrong, one_slot, gp), InvalidInput);
  CHECK_THROWS_AS(log_mvn_density(VectorXd(), ObsPattern::none(2), gp),
                  InvalidInput);
}

TEST_CASE("conditional moments: all observed is an exact identity") {
  GaussianParams gp = bivariate_half();
  VectorXd y(2);
  y << 0.3, -1.7;
  ConditionalMoments cm = conditional_moments(y, ObsPattern::all(2), gp);
  CHECK(cm.expect[0] == y[0]);
  CHECK(cm.expect[1] == y[1]);
  CHECK(cm.var_correction.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("conditional moments: all missing returns the prior") {
  GaussianParams gp{(VectorXd(2) << 1.0, 2.0).finished(),
                    MatrixXd::Identity(2, 2)};
  ConditionalMoments cm =
      conditional_moments(VectorXd(), ObsPattern::none(2), gp);
  CHECK(cm.expect[0] == doctest::Approx(1.0));
  CHECK(cm.expect[1] == doctest::Approx(2.0));
  CHECK((cm.var_correction - gp.cov).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("conditional moments match the Schur-complement formula") {
  GaussianParams gp = bivariate_half();
  ObsPattern pat({std::vector<bool>{true, false}});
  VectorXd y(1);
  y << 1.0;
  ConditionalMoments cm = conditional_moments(y, pat, gp);
  CHECK(cm.expect[0] == 1.0);
  CHECK(cm.expect[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(cm.var_correction(1, 1) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(cm.var_correction(0, 0) == 0.0);
  CHECK(cm.var_correction(0, 1) == 0.0);
}

TEST_CASE("regularize") {
  MatrixXd id = MatrixXd::Identity(3, 3);
  CHECK((regularize(id, 0.0) - id).cwiseAbs().maxCoeff() == 0.0);

  MatrixXd ones = MatrixXd::Constant(2, 2, 1.0);
  MatrixXd fixed = regularize(ones, 1e-8);
  CHECK((fixed - ones).cwiseAbs().maxCoeff() < 1e-7);
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(fixed);
  CHECK(eig.eigenvalues().minCoeff() > 0.0);

  MatrixXd asym = MatrixXd::Identity(2, 2);
  asym(0, 1) = 1e-13;
  MatrixXd sym = regularize(asym, 0.0);
  CHECK(sym(0, 1) == sym(1, 0));

  CHECK_THROWS_AS(regularize(ones, 0.0), SingularCovariance);
}

TEST_CASE("marginalization consistency on random covariances") {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int rep = 0; rep < 50; ++rep) {
    int r = 2 + static_cast<int>(rng() % 5);  // up to 6
    GaussianParams gp;
    gp.mean.resize(r);
    for (int j = 0; j < r; ++j) gp.mean[j] = gauss(rng);
    gp.cov = oracles::random_spd(r, rng);
    std::vector<bool> obs(r);
    int n_obs = 0;
    for (int j = 0; j < r; ++j) {
      obs[j] = unif(rng) < 0.6;
      n_obs += obs[j];
    }
    if (n_obs == 0) {
      obs[0] = true;
      n_obs = 1;
    }
    ObsPattern pat(obs);
    VectorXd y_obs(n_obs);
    for (int j = 0; j < n_obs; ++j) y_obs[j] = gauss(rng);

    // analytically marginalized Gaussian on the observed block
    GaussianParams marg;
    marg.mean.resize(n_obs);
    marg.cov.resize(n_obs, n_obs);
    std::vector<int> idx = pat.observed_indices();
    for (int a = 0; a < n_obs; ++a) {
      marg.mean[a] = gp.mean[idx[a]];
      for (int b = 0; b < n_obs; ++b) marg.cov(a, b) = gp.cov(idx[a], idx[b]);
    }
    double lhs = log_mvn_density(y_obs, pat, gp);
    double rhs = log_mvn_density(y_obs, ObsPattern::all(n_obs), marg);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
  }
}

TEST_CASE("law of total expectation via conditional draws") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int r = 3;
  GaussianParams gp;
  gp.mean = (VectorXd(3) << 0.5, -1.0, 2.0).finished();
  gp.cov = oracles::random_spd(r, rng);
  ObsPattern pat({std::vector<bool>{true, false, true}});
  PatternOps ops = make_pattern_ops(gp.cov, pat);
  Eigen::LLT<MatrixXd> schur_llt(ops.schur);
  MatrixXd schur_chol = schur_llt.matrixL();
  Eigen::LLT<MatrixXd> full_llt(gp.cov);
  MatrixXd full_chol = full_llt.matrixL();

  const int n = 100000;
  VectorXd mean_acc = VectorXd::Zero(r);
  MatrixXd cov_acc = MatrixXd::Zero(r, r);
  VectorXd z(r), y(r), w(1);
  for (int s = 0; s < n; ++s) {
    for (int j = 0; j < r; ++j) z[j] = gauss(rng);
    y = gp.mean + full_chol * z;
    VectorXd y_obs(2);
    y_obs << y[0], y[2];
    ConditionalMoments cm = moments_with(ops, y_obs, gp.mean);
    w[0] = gauss(rng);
    VectorXd fill = schur_chol * w;
    y[1] = cm.expect[1] + fill[0];
    y[0] = cm.expect[0];
    y[2] = cm.expect[2];
    mean_acc += y;
    cov_acc += y * y.transpose();
  }
  mean_acc /= n;
  cov_acc = cov_acc / n - mean_acc * mean_acc.transpose();
  for (int j = 0; j < r; ++j) {
    double se = std::sqrt(gp.cov(j, j) / n);
    CHECK(std::abs(mean_acc[j] - gp.mean[j]) < 3.5 * se);
  }
  for (int a = 0; a < r; ++a)
    for (int b = 0; b < r; ++b) {
      double se = std::sqrt(
          (gp.cov(a, a) * gp.cov(b, b) + gp.cov(a, b) * gp.cov(a, b)) / n);
      CHECK(std::abs(cov_acc(a, b) - gp.cov(a, b)) < 4.0 * se);
    }
}

TEST_CASE("GaussianParams validation") {
  GaussianParams gp = bivariate_half();
  CHECK_NOTHROW(gp.validate());
  gp.cov(0, 1) = 0.5 + 1e-9;
  CHECK_THROWS_AS(gp.validate(), InvalidInput);
}
