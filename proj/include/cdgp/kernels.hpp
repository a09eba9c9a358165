#pragma once

#include <Eigen/Dense>

#include <array>
#include <string>
#include <vector>

namespace cdgp {

// Stationary kernel families evaluated on the Euclidean distance r = |x - x'|.
enum class KernelFamily { SE, PeriodicSE, RationalQuadratic, Mixture };

// A kernel family plus its hyperparameters.  Parameters are stored (and
// differentiated) in log space, so positivity holds by construction.
struct KernelSpec {
  KernelFamily family = KernelFamily::SE;
  Eigen::VectorXd log_params;

  // k(x,x') = sigma^2 exp(-r^2 / (2 ell^2))
  static KernelSpec se(double sigma, double ell);
  // k(x,x') = sigma^2 exp(-sin^2(r) / gamma^2); period fixed at pi
  static KernelSpec periodic_se(double sigma, double gamma);
  // k(x,x') = sigma^2 (1 + r^2 / beta^2)^(-alpha)
  static KernelSpec rational_quadratic(double sigma, double beta, double alpha);
  // theta1^2 exp(-r^2/theta2^2) + theta3^2 exp(-sin^2(r)/theta4^2)
  //   + theta5^2 (1 + r^2/theta6^2)^(-theta7)
  static KernelSpec mixture(const std::array<double, 7>& theta);

  int n_params() const { return static_cast<int>(log_params.size()); }
  double param(int i) const { return std::exp(log_params[i]); }
  // Value at zero distance: sigma^2, or theta1^2 + theta3^2 + theta5^2.
  double signal_variance() const;
  std::vector<std::string> param_names() const;
};

// Kernel value for a single input pair.  Throws std::invalid_argument on
// dimension mismatch.
double eval_kernel(const KernelSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& xi,
                   const Eigen::Ref<const Eigen::VectorXd>& xj);

// Cross-Gram K[i,j] = k(X1.row(i), X2.row(j)).  Rows are input points.
Eigen::MatrixXd gram(const KernelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& X1,
                     const Eigen::Ref<const Eigen::MatrixXd>& X2);

// Symmetric Gram over one set of points; exactly symmetric by construction
// and with signal_variance() on the diagonal.
Eigen::MatrixXd gram(const KernelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& X);

// Entrywise analytic derivative of the cross-Gram with respect to
// log_params[param_index].
Eigen::MatrixXd gram_param_grad(const KernelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& X1,
                                const Eigen::Ref<const Eigen::MatrixXd>& X2, int param_index);

// Square-Gram derivative, d gram(spec, X) / d log_params[param_index].
Eigen::MatrixXd kernel_param_grad(const KernelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& X,
                                  int param_index);

// Pairwise squared Euclidean distances between row sets, clamped at zero.
Eigen::MatrixXd squared_distances(const Eigen::Ref<const Eigen::MatrixXd>& X1,
                                  const Eigen::Ref<const Eigen::MatrixXd>& X2);

}  // namespace cdgp
