#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "cdgp/layer.hpp"

namespace cdgp {

// Moment-matched covariance of a squared-exponential layer fed by a Gaussian
// input pair: E[f(a) f(b)] for f ~ GP(0, SE(sigma, ell)) and (a, b) Gaussian
// with the given pair moments.  Exact for SE.
double effective_se_cov(const PairMoments& pm, double sigma, double ell);

// Closed form for an SE layer fed by an unconditioned zero-mean SE layer:
// sigma2^2 [1 + 2 (sigma1^2/ell2^2) (1 - exp(-|xi-xj|^2 / (2 ell1^2)))]^(-1/2).
double sese_kernel(const Eigen::Ref<const Eigen::VectorXd>& xi,
                   const Eigen::Ref<const Eigen::VectorXd>& xj, double sigma1, double ell1,
                   double sigma2, double ell2);

// Derivative bundle of a layer's mean/covariance functions at (m_i, m_j),
// consumed by the second-order Taylor covariance.
struct PairDerivs {
  double k = 0.0;      // k(m_i, m_j)
  double k_dii = 0.0;  // d^2 k / d m_i^2
  double k_djj = 0.0;  // d^2 k / d m_j^2
  double k_dij = 0.0;  // d^2 k / d m_i d m_j
  double mu_di = 0.0;  // mu'(m_i)
  double mu_dj = 0.0;  // mu'(m_j)
};

// Second-order Taylor covariance of a layer over a Gaussian input pair:
// [1 + (c_ii/2) d^2_mj + (c_jj/2) d^2_mi + c_ij d^2_mi_mj] k(m_i, m_j)
//   + c_ij mu'(m_i) mu'(m_j).
double taylor_cov(const PairMoments& pm, const PairDerivs& d);

// First-order limit of effective_se_cov in delta^2/ell^2 (dense-hyperdata
// regime): sigma^2 [1 + ((m_i-m_j)^2 - ell^2) / (2 ell^4) * delta^2]
//   * exp(-(m_i-m_j)^2 / (2 ell^2)).
double taylor_limit_cov(const PairMoments& pm, double sigma, double ell);

// A depth-L composition: L-1 conditioned inner layers feeding one exposed
// kernel, plus observation noise.  Inner layers and a depth >= 2 exposed
// kernel must be SE (the moment matching is SE-specific); a depth-1 stack may
// expose any family.
struct LayerStack {
  std::vector<ConditionedLayer> inner;
  KernelSpec exposed = KernelSpec::se(1.0, 1.0);
  double noise_var = 0.0;

  int depth() const { return static_cast<int>(inner.size()) + 1; }
  void refresh_u();
};

// Effective Gram over X plus the propagated per-layer moment tables
// (monitoring surface for the inner Taylor approximation).
struct StackEval {
  Eigen::MatrixXd K;                // N x N, noise-free, diagonal = exposed signal variance
  std::vector<MomentTable> layers;  // one per inner layer
};

// Propagates Gaussian moments through the stack and applies the exact SE
// moment matching at the exposed layer.  Layer 1 uses exact conditional
// moments; deeper inner layers use plug-in means and Taylor covariances
// (clamped to the PSD cone); depth 1 is the plain Gram.
StackEval propagate_stack(const LayerStack& stack, const Eigen::Ref<const Eigen::MatrixXd>& X);

// Flat parameter layout over a stack: per inner layer the kernel log-params,
// then net weights (or free u), then optionally Z; the exposed kernel
// log-params; finally log_noise_sigma.  noise_var = exp(2 log_noise_sigma).
struct ParamLayout {
  struct LayerSlice {
    int kernel_at = 0, kernel_n = 0;
    int value_at = 0, value_n = 0;  // net weights or free u
    bool via_net = false;
    int z_at = 0, z_n = 0;  // 0 unless with_z
  };
  std::vector<LayerSlice> inner;
  int exposed_at = 0, exposed_n = 0;
  int noise_at = 0;
  int total = 0;
  bool with_z = false;
  std::vector<std::string> names;

  static ParamLayout of(const LayerStack& stack, bool with_z = false);
  Eigen::VectorXd pack(const LayerStack& stack) const;
  // Writes theta into a copy of tmpl; refreshes u from nets.
  LayerStack unpack(const Eigen::Ref<const Eigen::VectorXd>& theta, const LayerStack& tmpl) const;
};

// Effective Gram and its analytic derivative with respect to every parameter
// in the layout.  dK[p] is d(K + noise_var I)/d theta_p; for the noise entry
// that is 2 noise_var I, all other entries differentiate the noise-free K.
struct StackGrads {
  Eigen::MatrixXd K;
  std::vector<Eigen::MatrixXd> dK;
  ParamLayout layout;
};

StackGrads effective_kernel_grads(const LayerStack& stack,
                                  const Eigen::Ref<const Eigen::MatrixXd>& X, bool with_z = false);

}  // namespace cdgp
