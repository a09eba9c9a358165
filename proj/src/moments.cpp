#include "cdgp/moments.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

#include "cdgp/gp.hpp"
#include "cdgp/kernels.hpp"

namespace cdgp {

double heavy_tail_gap(double m, double d2) {
  if (d2 < 0.0) throw std::invalid_argument("dispersion must be non-negative");
  const double m2 = m * m;
  return std::exp(-m2 / (1.0 + 2.0 * d2)) / std::sqrt(1.0 + 2.0 * d2) -
         std::exp(-m2 / (1.0 + d2)) / (1.0 + d2);
}

namespace {

// One pairing term ((a,b),(c,d)): the SE fourth-moment integral over the
// bivariate Gaussian of (x_a - x_b, x_c - x_d).
double pairing_term(const Eigen::Vector4d& mu, const Eigen::Matrix4d& C, double tau, int a, int b,
                    int c, int d) {
  const double Dab = 1.0 + (C(a, a) + C(b, b) - 2.0 * C(a, b)) / tau;
  const double Dcd = 1.0 + (C(c, c) + C(d, d) - 2.0 * C(c, d)) / tau;
  const double V = (C(a, d) + C(b, c) - C(a, c) - C(b, d)) / tau;
  const double det = Dab * Dcd - V * V;
  if (det <= 0.0) {
    std::ostringstream msg;
    msg << "fourth_moment pairing (" << a << "," << b << ")(" << c << "," << d
        << ") is not positive definite";
    throw std::invalid_argument(msg.str());
  }
  const double dab = mu[a] - mu[b];
  const double dcd = mu[c] - mu[d];
  return std::exp(-dab * dab / (2.0 * tau * (Dab - V * V / Dcd))) *
         std::exp(-dcd * dcd / (2.0 * tau * (Dcd - V * V / Dab))) *
         std::exp(-dab * dcd * V / (tau * det)) / std::sqrt(det);
}

}  // namespace

double fourth_moment(const Eigen::Vector4d& mu, const Eigen::Matrix4d& C, double sigma,
                     double ell) {
  if (!(sigma > 0.0) || !(ell > 0.0))
    throw std::invalid_argument("kernel parameters must be positive");
  const double tau = ell * ell;
  const double s4 = sigma * sigma * sigma * sigma;
  return s4 * (pairing_term(mu, C, tau, 0, 1, 2, 3) + pairing_term(mu, C, tau, 0, 2, 1, 3) +
               pairing_term(mu, C, tau, 0, 3, 1, 2));
}

namespace {

struct Accumulator {
  int N = 0, B = 0;
  std::vector<std::array<int, 4>> quads;
  Eigen::MatrixXd second_sum;                 // running batch sum
  std::vector<Eigen::MatrixXd> second_means;  // one per finished batch
  Eigen::VectorXd fourth_sum;
  std::vector<Eigen::VectorXd> fourth_means;

  void start_batch() {
    second_sum = Eigen::MatrixXd::Zero(N, N);
    fourth_sum = Eigen::VectorXd::Zero(static_cast<int>(quads.size()));
  }
  void add(const Eigen::VectorXd& g) {
    second_sum.noalias() += g * g.transpose();
    for (std::size_t q = 0; q < quads.size(); ++q)
      fourth_sum[static_cast<int>(q)] +=
          g[quads[q][0]] * g[quads[q][1]] * g[quads[q][2]] * g[quads[q][3]];
  }
  void finish_batch(std::int64_t n_in_batch) {
    second_means.push_back(second_sum / static_cast<double>(n_in_batch));
    fourth_means.push_back(fourth_sum / static_cast<double>(n_in_batch));
  }

  McMoments result() const {
    McMoments out;
    out.second = Eigen::MatrixXd::Zero(N, N);
    for (const auto& m : second_means) out.second += m;
    out.second /= static_cast<double>(B);
    Eigen::MatrixXd var = Eigen::MatrixXd::Zero(N, N);
    for (const auto& m : second_means) var.array() += (m - out.second).array().square();
    out.second_se = (var / static_cast<double>(B - 1) / static_cast<double>(B)).cwiseSqrt();

    const int Q = static_cast<int>(quads.size());
    out.fourth = Eigen::VectorXd::Zero(Q);
    for (const auto& m : fourth_means) out.fourth += m;
    out.fourth /= static_cast<double>(B);
    Eigen::VectorXd fvar = Eigen::VectorXd::Zero(Q);
    for (const auto& m : fourth_means) fvar.array() += (m - out.fourth).array().square();
    out.fourth_se = (fvar / static_cast<double>(B - 1) / static_cast<double>(B)).cwiseSqrt();
    return out;
  }
};

void validate_options(const McOptions& opt, int N) {
  if (opt.n_samples < 1) throw std::invalid_argument("n_samples must be positive");
  if (opt.batches < 2) throw std::invalid_argument("at least two batches are required");
  if (opt.n_samples < opt.batches)
    throw std::invalid_argument("n_samples must be at least the batch count");
  for (const auto& q : opt.quads)
    for (int idx : q)
      if (idx < 0 || idx >= N) throw std::invalid_argument("quadruple index out of range");
}

}  // namespace

McMoments mc_exposed_moments(const KernelSpec& exposed, const Eigen::VectorXd& mean,
                             const Eigen::MatrixXd& cov, const McOptions& opt) {
  const int N = static_cast<int>(mean.size());
  if (cov.rows() != N || cov.cols() != N)
    throw std::invalid_argument("mean/cov size mismatch");
  validate_options(opt, N);

  const bool deterministic_input = cov.cwiseAbs().maxCoeff() == 0.0;
  Eigen::MatrixXd Lin;
  if (!deterministic_input) Lin = chol_jitter(cov).L;

  // Deterministic-input fast path: the exposed Gram is fixed.
  Eigen::MatrixXd Lg_fixed;
  if (deterministic_input) {
    Eigen::MatrixXd H(N, 1);
    H.col(0) = mean;
    Lg_fixed = chol_jitter(gram(exposed, H)).L;
  }

  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto draw = [&](Eigen::VectorXd& xi) {
    for (int i = 0; i < xi.size(); ++i) xi[i] = nd(rng);
  };

  Accumulator acc;
  acc.N = N;
  acc.B = opt.batches;
  acc.quads = opt.quads;

  Eigen::VectorXd xi(N), eta(N), g(N);
  Eigen::MatrixXd H(N, 1);
  const std::int64_t base = opt.n_samples / opt.batches;
  const std::int64_t rem = opt.n_samples % opt.batches;
  for (int b = 0; b < opt.batches; ++b) {
    const std::int64_t nb = base + (b < rem ? 1 : 0);
    acc.start_batch();
    for (std::int64_t s = 0; s < nb; ++s) {
      if (deterministic_input) {
        draw(eta);
        g.noalias() = Lg_fixed * eta;
      } else {
        draw(xi);
        H.col(0) = mean + Lin * xi;
        const Eigen::MatrixXd Lg = chol_jitter(gram(exposed, H)).L;
        draw(eta);
        g.noalias() = Lg * eta;
      }
      acc.add(g);
    }
    acc.finish_batch(nb);
  }
  return acc.result();
}

McMoments mc_sample_composite(const LayerStack& stack, const Eigen::Ref<const Eigen::MatrixXd>& X,
                              const McOptions& opt) {
  const int N = static_cast<int>(X.rows());
  if (stack.depth() == 1) {
    // No input distribution: g ~ N(0, K(X)).
    validate_options(opt, N);
    const Eigen::MatrixXd L = chol_jitter(gram(stack.exposed, X)).L;
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    Accumulator acc;
    acc.N = N;
    acc.B = opt.batches;
    acc.quads = opt.quads;
    Eigen::VectorXd eta(N), g(N);
    const std::int64_t base = opt.n_samples / opt.batches;
    const std::int64_t rem = opt.n_samples % opt.batches;
    for (int b = 0; b < opt.batches; ++b) {
      const std::int64_t nb = base + (b < rem ? 1 : 0);
      acc.start_batch();
      for (std::int64_t s = 0; s < nb; ++s) {
        for (int i = 0; i < N; ++i) eta[i] = nd(rng);
        g.noalias() = L * eta;
        acc.add(g);
      }
      acc.finish_batch(nb);
    }
    return acc.result();
  }
  const StackEval ev = propagate_stack(stack, X);
  const MomentTable& last = ev.layers.back();
  return mc_exposed_moments(stack.exposed, last.mean, last.cov, opt);
}

}  // namespace cdgp
