#include "cdgp/layer.hpp"

#include <random>
#include <sstream>
#include <stdexcept>

#include "cdgp/gp.hpp"

namespace cdgp {

Hyperdata::Hyperdata(Eigen::MatrixXd Z_in, Eigen::VectorXd u_in)
    : Z(std::move(Z_in)), u(std::move(u_in)) {
  if (Z.rows() != u.size()) throw std::invalid_argument("hyperdata Z and u sizes must match");
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < Z.rows(); ++j) {
      if ((Z.row(i) - Z.row(j)).norm() < kMinHyperdataSeparation) {
        std::ostringstream msg;
        msg << "hyperdata inputs " << i << " and " << j << " are closer than "
            << kMinHyperdataSeparation;
        throw std::invalid_argument(msg.str());
      }
    }
  }
}

HyperdataNet HyperdataNet::init(int width, int input_dim, double weight_std, std::uint64_t seed) {
  if (width <= 0 || input_dim <= 0) throw std::invalid_argument("net width and input_dim must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, weight_std);
  HyperdataNet net;
  net.A.resize(width, input_dim);
  net.b.resize(width);
  net.v.resize(width);
  for (int k = 0; k < width; ++k)
    for (int j = 0; j < input_dim; ++j) net.A(k, j) = normal(rng);
  for (int k = 0; k < width; ++k) net.b[k] = normal(rng);
  for (int k = 0; k < width; ++k) net.v[k] = normal(rng);
  net.c = normal(rng);
  return net;
}

Eigen::VectorXd HyperdataNet::weights() const {
  Eigen::VectorXd w(n_weights());
  int at = 0;
  for (int k = 0; k < width(); ++k)
    for (int j = 0; j < input_dim(); ++j) w[at++] = A(k, j);
  w.segment(at, width()) = b;
  at += width();
  w.segment(at, width()) = v;
  at += width();
  w[at] = c;
  return w;
}

void HyperdataNet::set_weights(const Eigen::Ref<const Eigen::VectorXd>& w) {
  if (w.size() != n_weights()) throw std::invalid_argument("weight vector size mismatch");
  int at = 0;
  for (int k = 0; k < width(); ++k)
    for (int j = 0; j < input_dim(); ++j) A(k, j) = w[at++];
  b = w.segment(at, width());
  at += width();
  v = w.segment(at, width());
  at += width();
  c = w[at];
}

Eigen::VectorXd HyperdataNet::forward(const Eigen::Ref<const Eigen::MatrixXd>& Z) const {
  if (Z.cols() != input_dim()) throw std::invalid_argument("net input dimension mismatch");
  // H[m,k] = tanh(A_k . z_m + b_k)
  const Eigen::MatrixXd H = ((Z * A.transpose()).rowwise() + b.transpose()).array().tanh();
  return (H * v).array() + c;
}

Eigen::MatrixXd HyperdataNet::weight_jacobian(const Eigen::Ref<const Eigen::MatrixXd>& Z) const {
  if (Z.cols() != input_dim()) throw std::invalid_argument("net input dimension mismatch");
  const int M = static_cast<int>(Z.rows());
  const int W = width(), d = input_dim();
  const Eigen::MatrixXd H = ((Z * A.transpose()).rowwise() + b.transpose()).array().tanh();
  const Eigen::MatrixXd dH = 1.0 - H.array().square();  // tanh'
  Eigen::MatrixXd J(M, n_weights());
  for (int m = 0; m < M; ++m) {
    int at = 0;
    for (int k = 0; k < W; ++k)
      for (int j = 0; j < d; ++j) J(m, at++) = v[k] * dH(m, k) * Z(m, j);
    for (int k = 0; k < W; ++k) J(m, at++) = v[k] * dH(m, k);
    for (int k = 0; k < W; ++k) J(m, at++) = H(m, k);
    J(m, at) = 1.0;
  }
  return J;
}

Eigen::VectorXd HyperdataNet::backward(const Eigen::Ref<const Eigen::MatrixXd>& Z,
                                       const Eigen::Ref<const Eigen::VectorXd>& upstream) const {
  if (upstream.size() != Z.rows()) throw std::invalid_argument("upstream size mismatch");
  return weight_jacobian(Z).transpose() * upstream;
}

Eigen::VectorXd HyperdataNet::input_grad(const Eigen::Ref<const Eigen::VectorXd>& z) const {
  if (z.size() != input_dim()) throw std::invalid_argument("net input dimension mismatch");
  const Eigen::VectorXd a = (A * z + b).array().tanh();
  // du/dz = A^T (v o tanh'(Az+b))
  return A.transpose() * (v.array() * (1.0 - a.array().square())).matrix();
}

void ConditionedLayer::refresh_u() {
  if (net) hyperdata.u = net->forward(hyperdata.Z);
}

namespace {

// Shared conditional algebra: alpha = K_ZZ^-1 u and B = K_ZZ^-1 K_ZX.
struct ConditionalSolve {
  Eigen::MatrixXd Kxz;
  Eigen::VectorXd alpha;
  CholFactor chol;
};

ConditionalSolve solve_hyperdata(const ConditionedLayer& layer,
                                 const Eigen::Ref<const Eigen::MatrixXd>& X) {
  ConditionalSolve s;
  s.Kxz = gram(layer.kernel, X, layer.hyperdata.Z);
  s.chol = chol_jitter(gram(layer.kernel, layer.hyperdata.Z));
  s.alpha = s.chol.solve(layer.hyperdata.u);
  return s;
}

}  // namespace

Eigen::VectorXd conditional_mean(const ConditionedLayer& layer,
                                 const Eigen::Ref<const Eigen::MatrixXd>& X) {
  if (layer.hyperdata.size() == 0) return Eigen::VectorXd::Zero(X.rows());
  const ConditionalSolve s = solve_hyperdata(layer, X);
  return s.Kxz * s.alpha;
}

Eigen::MatrixXd conditional_cov(const ConditionedLayer& layer,
                                const Eigen::Ref<const Eigen::MatrixXd>& X) {
  const Eigen::MatrixXd Kx = gram(layer.kernel, X);
  if (layer.hyperdata.size() == 0) return Kx;
  const ConditionalSolve s = solve_hyperdata(layer, X);
  const Eigen::MatrixXd B = s.chol.solve_mat(s.Kxz.transpose());
  Eigen::MatrixXd C = Kx - s.Kxz * B;
  // Exact symmetry despite the solve round trip.
  C = 0.5 * (C + C.transpose()).eval();
  return C;
}

PairMoments PairMoments::from(double m_i, double m_j, double c_ii, double c_jj, double c_ij,
                              bool diagonal) {
  PairMoments pm{m_i, m_j, c_ii, c_jj, c_ij, 0.0};
  if (!diagonal) pm.delta2 = std::max(0.0, c_ii + c_jj - 2.0 * c_ij);
  return pm;
}

PairMoments MomentTable::pair(int i, int j) const {
  return PairMoments::from(mean[i], mean[j], cov(i, i), cov(j, j), cov(i, j), i == j);
}

MomentTable pair_moments(const ConditionedLayer& layer, const Eigen::Ref<const Eigen::MatrixXd>& X) {
  return {conditional_mean(layer, X), conditional_cov(layer, X)};
}

}  // namespace cdgp
