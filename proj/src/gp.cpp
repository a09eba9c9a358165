#include "cdgp/gp.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace cdgp {

Eigen::VectorXd CholFactor::solve(const Eigen::Ref<const Eigen::VectorXd>& b) const {
  Eigen::VectorXd x = L.triangularView<Eigen::Lower>().solve(b);
  return L.transpose().triangularView<Eigen::Upper>().solve(x);
}

Eigen::MatrixXd CholFactor::solve_mat(const Eigen::Ref<const Eigen::MatrixXd>& B) const {
  Eigen::MatrixXd X = L.triangularView<Eigen::Lower>().solve(B);
  return L.transpose().triangularView<Eigen::Upper>().solve(X);
}

double CholFactor::log_det() const { return 2.0 * L.diagonal().array().log().sum(); }

CholFactor chol_jitter(const Eigen::Ref<const Eigen::MatrixXd>& K) {
  if (K.rows() != K.cols()) throw std::invalid_argument("chol_jitter requires a square matrix");
  for (double jitter : kJitterLadder) {
    Eigen::MatrixXd Kj = K;
    if (jitter > 0.0) Kj.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(Kj);
    if (llt.info() == Eigen::Success) return {llt.matrixL(), jitter};
  }
  const double min_eig = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(
                             K, Eigen::EigenvaluesOnly)
                             .eigenvalues()
                             .minCoeff();
  std::ostringstream msg;
  msg << "covariance not positive definite after jitter ladder (smallest eigenvalue " << min_eig
      << ")";
  throw std::runtime_error(msg.str());
}

double log_marginal_likelihood(const Eigen::Ref<const Eigen::MatrixXd>& K,
                               const Eigen::Ref<const Eigen::VectorXd>& y, double noise_var,
                               double* jitter_used) {
  if (K.rows() != y.size()) throw std::invalid_argument("Gram size must match target count");
  if (noise_var < 0.0) throw std::invalid_argument("noise variance must be non-negative");
  Eigen::MatrixXd Kn = K;
  Kn.diagonal().array() += noise_var;
  const CholFactor chol = chol_jitter(Kn);
  if (jitter_used) *jitter_used = chol.jitter;
  const Eigen::VectorXd alpha = chol.solve(y);
  const double n = static_cast<double>(y.size());
  return -0.5 * y.dot(alpha) - 0.5 * chol.log_det() - 0.5 * n * std::log(2.0 * std::numbers::pi);
}

Prediction posterior_predict(const Eigen::Ref<const Eigen::MatrixXd>& K,
                             const Eigen::Ref<const Eigen::VectorXd>& y, double noise_var,
                             const Eigen::Ref<const Eigen::MatrixXd>& K_star,
                             const Eigen::Ref<const Eigen::VectorXd>& k_ss_diag,
                             bool include_noise) {
  if (K_star.cols() != K.rows()) throw std::invalid_argument("cross-Gram width must match training size");
  if (K_star.rows() != k_ss_diag.size())
    throw std::invalid_argument("prior variance count must match query count");
  Eigen::MatrixXd Kn = K;
  Kn.diagonal().array() += noise_var;
  const CholFactor chol = chol_jitter(Kn);
  Prediction out;
  out.mean = K_star * chol.solve(y);
  // var_i = k_ss_i - |L^-1 k_star_i|^2
  const Eigen::MatrixXd V = chol.L.triangularView<Eigen::Lower>().solve(K_star.transpose());
  out.var = (k_ss_diag.array() - V.colwise().squaredNorm().transpose().array()).cwiseMax(0.0);
  if (include_noise) out.var.array() += noise_var;
  return out;
}

double RegressionProblem::logml() const {
  return log_marginal_likelihood(kernel(X, X), y, noise_var);
}

Prediction RegressionProblem::predict(const Eigen::MatrixXd& X_star, bool include_noise) const {
  return posterior_predict(kernel(X, X), y, noise_var, kernel(X_star, X), prior_var(X_star),
                           include_noise);
}

}  // namespace cdgp
