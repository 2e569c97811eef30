#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "hmmpanel/errors.hpp"

namespace hmmpanel {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Observed/missing split of a response vector. true = observed.
struct ObsPattern {
  std::vector<bool> observed;

  ObsPattern() = default;
  explicit ObsPattern(std::vector<bool> obs) : observed(std::move(obs)) {}
  static ObsPattern all(int r) { return ObsPattern(std::vector<bool>(r, true)); }
  static ObsPattern none(int r) { return ObsPattern(std::vector<bool>(r, false)); }

  int size() const { return static_cast<int>(observed.size()); }
  int n_observed() const;
  bool all_observed() const { return n_observed() == size(); }
  bool none_observed() const { return n_observed() == 0; }
  std::vector<int> observed_indices() const;
  std::vector<int> missing_indices() const;
  std::uint64_t key() const;  // bitmask; requires size() <= 64
  bool operator==(const ObsPattern&) const = default;
};

struct GaussianParams {
  VectorXd mean;
  MatrixXd cov;

  int dim() const { return static_cast<int>(mean.size()); }
  // Symmetry within 1e-12 elementwise and positive definiteness.
  void validate() const;
};

// E(Y | y^o, params) and the conditional-variance correction. Observed slots
// of `expect` carry the data unchanged; `var_correction` is zero outside the
// missing x missing block.
struct ConditionalMoments {
  VectorXd expect;
  MatrixXd var_correction;
};

enum class ImputeMode { Conditional, Unconditional };

double log_mvn_density(const VectorXd& y_obs, const ObsPattern& pattern,
                       const GaussianParams& params);
ConditionalMoments conditional_moments(const VectorXd& y_obs,
                                       const ObsPattern& pattern,
                                       const GaussianParams& params);

// Symmetrizes and, if needed, adds jitter*I with doubling (max 10 attempts)
// until the Cholesky factorization succeeds.
MatrixXd regularize(const MatrixXd& cov, double jitter);
double default_jitter(const MatrixXd& cov);  // 1e-10 * trace / r

// Factorization of one covariance matrix restricted to one observed pattern.
struct PatternOps {
  std::vector<int> obs, mis;
  MatrixXd chol_oo;       // lower Cholesky factor of cov^{oo}
  double logdet_oo = 0.0;
  MatrixXd gain;          // cov^{mo} (cov^{oo})^{-1}
  MatrixXd schur;         // cov^{mm} - gain cov^{om}
};

PatternOps make_pattern_ops(const MatrixXd& cov, const ObsPattern& pattern);
double log_density_with(const PatternOps& ops, const VectorXd& y_obs,
                        const VectorXd& mean);
ConditionalMoments moments_with(const PatternOps& ops, const VectorXd& y_obs,
                                const VectorXd& mean);

// Caches PatternOps per pattern for a fixed covariance. prepare() is not
// thread-safe; the const accessors are, so callers prepare all patterns up
// front and then share the object across workers. Lookups that miss the
// cache fall back to an uncached computation.
class PatternedGaussian {
 public:
  explicit PatternedGaussian(MatrixXd cov);

  const MatrixXd& cov() const { return cov_; }
  void prepare(const ObsPattern& pattern);
  const PatternOps* find(const ObsPattern& pattern) const;

  double log_density(const VectorXd& y_obs, const ObsPattern& pattern,
                     const VectorXd& mean) const;
  ConditionalMoments moments(const VectorXd& y_obs, const ObsPattern& pattern,
                             const VectorXd& mean) const;

 private:
  MatrixXd cov_;
  std::unordered_map<std::uint64_t, PatternOps> cache_;
};

double normal_quantile(double p);

}  // namespace hmmpanel
