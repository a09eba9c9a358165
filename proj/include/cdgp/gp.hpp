#pragma once

#include <Eigen/Dense>

#include <array>
#include <functional>

namespace cdgp {

// Diagonal jitter levels tried in order when a covariance fails to factorize.
inline constexpr std::array<double, 4> kJitterLadder{0.0, 1e-10, 1e-8, 1e-6};

// Lower-triangular Cholesky factor of K + jitter*I, where jitter is the first
// ladder level that succeeds.  Throws std::runtime_error naming the smallest
// eigenvalue if the ladder is exhausted.
struct CholFactor {
  Eigen::MatrixXd L;
  double jitter = 0.0;

  Eigen::VectorXd solve(const Eigen::Ref<const Eigen::VectorXd>& b) const;
  Eigen::MatrixXd solve_mat(const Eigen::Ref<const Eigen::MatrixXd>& B) const;
  double log_det() const;  // of K + jitter*I
};

CholFactor chol_jitter(const Eigen::Ref<const Eigen::MatrixXd>& K);

// log p(y | K, noise_var) of a zero-mean Gaussian with covariance
// K + noise_var*I.  If jitter_used is given, receives the jitter applied.
double log_marginal_likelihood(const Eigen::Ref<const Eigen::MatrixXd>& K,
                               const Eigen::Ref<const Eigen::VectorXd>& y, double noise_var,
                               double* jitter_used = nullptr);

struct Prediction {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;  // clamped at zero
};

// Posterior mean/variance at P query points given the training Gram K
// (noise-free), cross-covariances K_star (P x N), and prior variances
// k_ss_diag.  include_noise adds noise_var for predicting observations.
Prediction posterior_predict(const Eigen::Ref<const Eigen::MatrixXd>& K,
                             const Eigen::Ref<const Eigen::VectorXd>& y, double noise_var,
                             const Eigen::Ref<const Eigen::MatrixXd>& K_star,
                             const Eigen::Ref<const Eigen::VectorXd>& k_ss_diag,
                             bool include_noise = false);

// A regression task bundling data with a covariance provider, so plain and
// effective kernels share one interface.  kernel(X1, X2) returns the cross-
// Gram; prior_var(X) the prior variances at X.
struct RegressionProblem {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  double noise_var = 0.0;
  std::function<Eigen::MatrixXd(const Eigen::MatrixXd&, const Eigen::MatrixXd&)> kernel;
  std::function<Eigen::VectorXd(const Eigen::MatrixXd&)> prior_var;

  double logml() const;
  Prediction predict(const Eigen::MatrixXd& X_star, bool include_noise = false) const;
};

}  // namespace cdgp
