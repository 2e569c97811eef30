#include "hmmpanel/gaussian.hpp"

#include <cmath>
#include <limits>

namespace hmmpanel {

int ObsPattern::n_observed() const {
  int c = 0;
  for (bool b : observed) c += b ? 1 : 0;
  return c;
}

std::vector<int> ObsPattern::observed_indices() const {
  std::vector<int> idx;
  idx.reserve(observed.size());
  for (int j = 0; j < size(); ++j)
    if (observed[j]) idx.push_back(j);
  return idx;
}

std::vector<int> ObsPattern::missing_indices() const {
  std::vector<int> idx;
  idx.reserve(observed.size());
  for (int j = 0; j < size(); ++j)
    if (!observed[j]) idx.push_back(j);
  return idx;
}

std::uint64_t ObsPattern::key() const {
  if (size() > 64) throw InvalidInput("ObsPattern::key supports at most 64 slots");
  std::uint64_t k = 0;
  for (int j = 0; j < size(); ++j)
    if (observed[j]) k |= (std::uint64_t{1} << j);
  return k;
}

void GaussianParams::validate() const {
  if (cov.rows() != cov.cols())
    throw InvalidInput("covariance matrix must be square");
  if (cov.rows() != mean.size())
    throw InvalidInput("mean and covariance dimensions differ");
  double asym = (cov - cov.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-12)
    throw InvalidInput("covariance matrix asymmetry exceeds 1e-12");
  Eigen::LLT<MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success)
    throw SingularCovariance("covariance matrix is not positive definite");
}

static MatrixXd select_block(const MatrixXd& m, const std::vector<int>& rows,
                             const std::vector<int>& cols) {
  MatrixXd out(rows.size(), cols.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j)
      out(i, j) = m(rows[i], cols[j]);
  return out;
}

PatternOps make_pattern_ops(const MatrixXd& cov, const ObsPattern& pattern) {
  if (pattern.size() != cov.rows())
    throw InvalidInput("pattern length does not match covariance dimension");
  PatternOps ops;
  ops.obs = pattern.observed_indices();
  ops.mis = pattern.missing_indices();
  const auto no = static_cast<Eigen::Index>(ops.obs.size());
  const auto nm = static_cast<Eigen::Index>(ops.mis.size());
  if (no == 0) {
    ops.gain = MatrixXd::Zero(nm, 0);
    ops.schur = cov;
    return ops;
  }
  MatrixXd s_oo = select_block(cov, ops.obs, ops.obs);
  Eigen::LLT<MatrixXd> llt(s_oo);
  if (llt.info() != Eigen::Success)
    throw SingularCovariance("observed-block covariance is not positive definite");
  ops.chol_oo = llt.matrixL();
  ops.logdet_oo = 0.0;
  for (Eigen::Index j = 0; j < no; ++j)
    ops.logdet_oo += 2.0 * std::log(ops.chol_oo(j, j));
  if (nm > 0) {
    MatrixXd s_om = select_block(cov, ops.obs, ops.mis);
    MatrixXd s_mm = select_block(cov, ops.mis, ops.mis);
    ops.gain = llt.solve(s_om).transpose();  // nm x no
    ops.schur = s_mm - ops.gain * s_om;
    ops.schur = 0.5 * (ops.schur + ops.schur.transpose()).eval();
  } else {
    ops.gain = MatrixXd::Zero(0, no);
    ops.schur = MatrixXd::Zero(0, 0);
  }
  return ops;
}

double log_density_with(const PatternOps& ops, const VectorXd& y_obs,
                        const VectorXd& mean) {
  const auto no = static_cast<Eigen::Index>(ops.obs.size());
  if (y_obs.size() != no)
    throw InvalidInput("observed vector length does not match pattern");
  if (no == 0) return 0.0;
  VectorXd dev(no);
  for (Eigen::Index i = 0; i < no; ++i) dev[i] = y_obs[i] - mean[ops.obs[i]];
  VectorXd z = ops.chol_oo.triangularView<Eigen::Lower>().solve(dev);
  return -0.5 * (static_cast<double>(no) * kLog2Pi + ops.logdet_oo +
                 z.squaredNorm());
}

ConditionalMoments moments_with(const PatternOps& ops, const VectorXd& y_obs,
                                const VectorXd& mean) {
  const auto no = static_cast<Eigen::Index>(ops.obs.size());
  const auto nm = static_cast<Eigen::Index>(ops.mis.size());
  const auto r = no + nm;
  if (y_obs.size() != no)
    throw InvalidInput("observed vector length does not match pattern");
  ConditionalMoments cm;
  cm.expect.resize(r);
  cm.var_correction = MatrixXd::Zero(r, r);
  for (Eigen::Index i = 0; i < no; ++i) cm.expect[ops.obs[i]] = y_obs[i];
  if (nm == 0) return cm;
  if (no == 0) {
    cm.expect = mean;
    cm.var_correction = ops.schur;
    return cm;
  }
  VectorXd dev(no);
  for (Eigen::Index i = 0; i < no; ++i) dev[i] = y_obs[i] - mean[ops.obs[i]];
  VectorXd fill = ops.gain * dev;
  for (Eigen::Index i = 0; i < nm; ++i)
    cm.expect[ops.mis[i]] = mean[ops.mis[i]] + fill[i];
  for (Eigen::Index i = 0; i < nm; ++i)
    for (Eigen::Index j = 0; j < nm; ++j)
      cm.var_correction(ops.mis[i], ops.mis[j]) = ops.schur(i, j);
  return cm;
}

double log_mvn_density(const VectorXd& y_obs, const ObsPattern& pattern,
                       const GaussianParams& params) {
  if (pattern.size() != params.dim())
    throw InvalidInput("pattern length does not match parameter dimension");
  if (pattern.none_observed())
    throw InvalidInput("log_mvn_density requires at least one observed slot");
  PatternOps ops = make_pattern_ops(params.cov, pattern);
  return log_density_with(ops, y_obs, params.mean);
}

ConditionalMoments conditional_moments(const VectorXd& y_obs,
                                       const ObsPattern& pattern,
                                       const GaussianParams& params) {
  if (pattern.size() != params.dim())
    throw InvalidInput("pattern length does not match parameter dimension");
  PatternOps ops = make_pattern_ops(params.cov, pattern);
  return moments_with(ops, y_obs, params.mean);
}

MatrixXd regularize(const MatrixXd& cov, double jitter) {
  if (cov.rows() != cov.cols())
    throw InvalidInput("regularize requires a square matrix");
  if (jitter < 0) throw InvalidInput("jitter must be nonnegative");
  MatrixXd s = 0.5 * (cov + cov.transpose());
  double step = jitter;
  for (int attempt = 0; attempt <= 10; ++attempt) {
    Eigen::LLT<MatrixXd> llt(s);
    if (llt.info() == Eigen::Success) return s;
    if (step == 0.0) break;
    s += step * MatrixXd::Identity(s.rows(), s.cols());
    step *= 2.0;
  }
  throw SingularCovariance("matrix not positive definite after regularization");
}

double default_jitter(const MatrixXd& cov) {
  if (cov.rows() == 0) return 0.0;
  return 1e-10 * cov.trace() / static_cast<double>(cov.rows());
}

PatternedGaussian::PatternedGaussian(MatrixXd cov) : cov_(std::move(cov)) {
  if (cov_.rows() != cov_.cols())
    throw InvalidInput("covariance matrix must be square");
}

void PatternedGaussian::prepare(const ObsPattern& pattern) {
  std::uint64_t k = pattern.key();
  if (cache_.find(k) == cache_.end())
    cache_.emplace(k, make_pattern_ops(cov_, pattern));
}

const PatternOps* PatternedGaussian::find(const ObsPattern& pattern) const {
  auto it = cache_.find(pattern.key());
  return it == cache_.end() ? nullptr : &it->second;
}

double PatternedGaussian::log_density(const VectorXd& y_obs,
                                      const ObsPattern& pattern,
                                      const VectorXd& mean) const {
  if (const PatternOps* ops = find(pattern))
    return log_density_with(*ops, y_obs, mean);
  return log_density_with(make_pattern_ops(cov_, pattern), y_obs, mean);
}

ConditionalMoments PatternedGaussian::moments(const VectorXd& y_obs,
                                              const ObsPattern& pattern,
                                              const VectorXd& mean) const {
  if (const PatternOps* ops = find(pattern))
    return moments_with(*ops, y_obs, mean);
  return moments_with(make_pattern_ops(cov_, pattern), y_obs, mean);
}

// Acklam's rational approximation, refined with one Halley step.
double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw InvalidInput("normal_quantile requires p in (0, 1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double q, x;
  if (p < plow) {
    q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    q = p - 0.5;
    double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) *
        q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  double u = e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
  x = x - u / (1.0 + 0.5 * x * u);
  return x;
}

}  // namespace hmmpanel
