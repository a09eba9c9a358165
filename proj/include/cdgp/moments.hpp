#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <vector>

#include "cdgp/effective.hpp"

namespace cdgp {

// Excess of the true composite fourth moment over the moment-matched
// Gaussian's, in units of 2 sigma^4, as a function of the standardized mean
// separation m = (m_i - m_j)/ell and dispersion d2 = delta^2/ell^2.
// Non-negative everywhere: the composite marginal pair is heavier-tailed
// than its matched Gaussian.
double heavy_tail_gap(double m, double d2);

// E[f(x_a) f(x_b) f(x_c) f(x_d)] for f ~ GP(0, SE(sigma, ell)) and
// (x_a..x_d) jointly Gaussian with mean mu and covariance C: a sum over the
// three pairings of {a,b,c,d} into two doublets.  Throws if a pairing's
// 2x2 system is not positive definite (C must be a valid covariance).
double fourth_moment(const Eigen::Vector4d& mu, const Eigen::Matrix4d& C, double sigma,
                     double ell);

struct McOptions {
  std::int64_t n_samples = 100000;
  std::uint64_t seed = 0;
  int batches = 50;  // batch-means standard errors
  std::vector<std::array<int, 4>> quads;  // index quadruples for fourth moments
};

struct McMoments {
  Eigen::MatrixXd second;     // E[g_i g_j] estimate
  Eigen::MatrixXd second_se;  // batch-means standard error, entrywise
  Eigen::VectorXd fourth;     // E[g_a g_b g_c g_d] per requested quadruple
  Eigen::VectorXd fourth_se;
};

// Two-stage Monte Carlo oracle for an SE layer over Gaussian inputs: draws
// h ~ N(mean, cov), then g | h ~ N(0, K_exposed(h, h)), and accumulates raw
// second (and requested fourth) moments of g.  Deterministic for a fixed
// seed.  cov only needs to be PSD (exactly singular is fine).
McMoments mc_exposed_moments(const KernelSpec& exposed, const Eigen::VectorXd& mean,
                             const Eigen::MatrixXd& cov, const McOptions& opt);

// Monte Carlo oracle for a full stack at inputs X: propagates the Gaussian
// moment table to the penultimate layer and calls mc_exposed_moments.  A
// depth-1 stack has no input distribution; g ~ N(0, K(X)) directly.
McMoments mc_sample_composite(const LayerStack& stack, const Eigen::Ref<const Eigen::MatrixXd>& X,
                              const McOptions& opt);

}  // namespace cdgp
