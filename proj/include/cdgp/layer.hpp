#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>

#include "cdgp/kernels.hpp"

namespace cdgp {

// Minimum Euclidean separation between conditioning inputs.
inline constexpr double kMinHyperdataSeparation = 1e-8;

// Conditioning set (Z, u): pseudo-observations u at inputs Z.  Rows of Z must
// be pairwise distinct; enforced at construction.
struct Hyperdata {
  Eigen::MatrixXd Z;  // M x d
  Eigen::VectorXd u;  // M

  Hyperdata() : Z(0, 1), u(0) {}
  Hyperdata(Eigen::MatrixXd Z_in, Eigen::VectorXd u_in);

  int size() const { return static_cast<int>(Z.rows()); }
};

// One-hidden-layer tanh network R^d -> R: u = v . tanh(A z + b) + c.
// Parameterizes hyperdata outputs so u values move smoothly with few weights.
struct HyperdataNet {
  Eigen::MatrixXd A;  // width x d
  Eigen::VectorXd b;  // width
  Eigen::VectorXd v;  // width
  double c = 0.0;

  // All weights drawn i.i.d. N(0, weight_std^2) from the given seed.
  static HyperdataNet init(int width, int input_dim, double weight_std, std::uint64_t seed);

  int width() const { return static_cast<int>(b.size()); }
  int input_dim() const { return static_cast<int>(A.cols()); }
  int n_weights() const { return width() * (input_dim() + 2) + 1; }

  // Packing order: A row-major, b, v, c.
  Eigen::VectorXd weights() const;
  void set_weights(const Eigen::Ref<const Eigen::VectorXd>& w);

  Eigen::VectorXd forward(const Eigen::Ref<const Eigen::MatrixXd>& Z) const;
  // Gradient of sum_m upstream[m] * u_m with respect to the packed weights.
  Eigen::VectorXd backward(const Eigen::Ref<const Eigen::MatrixXd>& Z,
                           const Eigen::Ref<const Eigen::VectorXd>& upstream) const;
  // Rows: d u_m / d weights.  backward == J^T upstream.
  Eigen::MatrixXd weight_jacobian(const Eigen::Ref<const Eigen::MatrixXd>& Z) const;
  // d u / d z at a single input.
  Eigen::VectorXd input_grad(const Eigen::Ref<const Eigen::VectorXd>& z) const;
};

// A GP layer conditioned on hyperdata.  M = 0 leaves the prior untouched.
// When a net is present it owns the u values: refresh_u() must follow any
// weight update, so u == net(Z) always holds at evaluation time.
struct ConditionedLayer {
  KernelSpec kernel;
  Hyperdata hyperdata;
  std::optional<HyperdataNet> net;

  void refresh_u();
};

// Mean of the conditioned layer at X: K_XZ K_ZZ^-1 u (zero prior mean).
Eigen::VectorXd conditional_mean(const ConditionedLayer& layer,
                                 const Eigen::Ref<const Eigen::MatrixXd>& X);

// Covariance of the conditioned layer at X: K_X - K_XZ K_ZZ^-1 K_ZX.
Eigen::MatrixXd conditional_cov(const ConditionedLayer& layer,
                                const Eigen::Ref<const Eigen::MatrixXd>& X);

// Per-pair statistics of a Gaussian layer, the inputs to moment matching.
// delta2 = Var[f_i - f_j] = c_ii + c_jj - 2 c_ij, clamped at zero and exactly
// zero on the diagonal.
struct PairMoments {
  double m_i = 0.0;
  double m_j = 0.0;
  double c_ii = 0.0;
  double c_jj = 0.0;
  double c_ij = 0.0;
  double delta2 = 0.0;

  static PairMoments from(double m_i, double m_j, double c_ii, double c_jj, double c_ij,
                          bool diagonal = false);
};

// Moment table over N points: means, covariance, and the clamped pair view.
struct MomentTable {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  int size() const { return static_cast<int>(mean.size()); }
  PairMoments pair(int i, int j) const;
};

// Conditional mean and covariance of a layer at X as a MomentTable.
MomentTable pair_moments(const ConditionedLayer& layer, const Eigen::Ref<const Eigen::MatrixXd>& X);

}  // namespace cdgp
