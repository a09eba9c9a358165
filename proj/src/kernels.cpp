#include "cdgp/kernels.hpp"

#include <cmath>
#include <stdexcept>

namespace cdgp {

namespace {

void require_positive(std::initializer_list<double> vals) {
  for (double v : vals) {
    if (!(v > 0.0)) throw std::invalid_argument("kernel parameters must be positive");
  }
}

Eigen::VectorXd logs_of(std::initializer_list<double> vals) {
  Eigen::VectorXd lp(static_cast<Eigen::Index>(vals.size()));
  Eigen::Index i = 0;
  for (double v : vals) lp[i++] = std::log(v);
  return lp;
}

// Scalar kernel value from the squared distance r2.
double value_r2(const KernelSpec& s, double r2) {
  switch (s.family) {
    case KernelFamily::SE: {
      const double sig = s.param(0), ell = s.param(1);
      return sig * sig * std::exp(-r2 / (2.0 * ell * ell));
    }
    case KernelFamily::PeriodicSE: {
      const double sig = s.param(0), gam = s.param(1);
      const double sp = std::sin(std::sqrt(r2));
      return sig * sig * std::exp(-sp * sp / (gam * gam));
    }
    case KernelFamily::RationalQuadratic: {
      const double sig = s.param(0), beta = s.param(1), alpha = s.param(2);
      return sig * sig * std::pow(1.0 + r2 / (beta * beta), -alpha);
    }
    case KernelFamily::Mixture: {
      const double t1 = s.param(0), t2 = s.param(1), t3 = s.param(2), t4 = s.param(3);
      const double t5 = s.param(4), t6 = s.param(5), t7 = s.param(6);
      const double sp = std::sin(std::sqrt(r2));
      return t1 * t1 * std::exp(-r2 / (t2 * t2)) + t3 * t3 * std::exp(-sp * sp / (t4 * t4)) +
             t5 * t5 * std::pow(1.0 + r2 / (t6 * t6), -t7);
    }
  }
  throw std::logic_error("unknown kernel family");
}

// d value / d log_params[idx] from the squared distance r2.
double grad_r2(const KernelSpec& s, double r2, int idx) {
  if (idx < 0 || idx >= s.n_params()) throw std::invalid_argument("kernel parameter index out of range");
  switch (s.family) {
    case KernelFamily::SE: {
      const double v = value_r2(s, r2);
      const double ell = s.param(1);
      return idx == 0 ? 2.0 * v : v * r2 / (ell * ell);
    }
    case KernelFamily::PeriodicSE: {
      const double v = value_r2(s, r2);
      const double gam = s.param(1);
      const double sp = std::sin(std::sqrt(r2));
      return idx == 0 ? 2.0 * v : v * 2.0 * sp * sp / (gam * gam);
    }
    case KernelFamily::RationalQuadratic: {
      const double v = value_r2(s, r2);
      const double beta = s.param(1), alpha = s.param(2);
      const double q = 1.0 + r2 / (beta * beta);
      if (idx == 0) return 2.0 * v;
      if (idx == 1) return v * alpha * 2.0 * r2 / (beta * beta) / q;
      return -v * alpha * std::log(q);
    }
    case KernelFamily::Mixture: {
      const double t1 = s.param(0), t2 = s.param(1), t3 = s.param(2), t4 = s.param(3);
      const double t5 = s.param(4), t6 = s.param(5), t7 = s.param(6);
      const double sp = std::sin(std::sqrt(r2));
      const double se = t1 * t1 * std::exp(-r2 / (t2 * t2));
      const double per = t3 * t3 * std::exp(-sp * sp / (t4 * t4));
      const double q = 1.0 + r2 / (t6 * t6);
      const double rq = t5 * t5 * std::pow(q, -t7);
      switch (idx) {
        case 0: return 2.0 * se;
        case 1: return se * 2.0 * r2 / (t2 * t2);
        case 2: return 2.0 * per;
        case 3: return per * 2.0 * sp * sp / (t4 * t4);
        case 4: return 2.0 * rq;
        case 5: return rq * t7 * 2.0 * r2 / (t6 * t6) / q;
        case 6: return -rq * t7 * std::log(q);
      }
      break;
    }
  }
  throw std::logic_error("unknown kernel family");
}

}  // namespace

KernelSpec KernelSpec::se(double sigma, double ell) {
  require_positive({sigma, ell});
  return {KernelFamily::SE, logs_of({sigma, ell})};
}

KernelSpec KernelSpec::periodic_se(double sigma, double gamma) {
  require_positive({sigma, gamma});
  return {KernelFamily::PeriodicSE, logs_of({sigma, gamma})};
}

KernelSpec KernelSpec::rational_quadratic(double sigma, double beta, double alpha) {
  require_positive({sigma, beta, alpha});
  return {KernelFamily::RationalQuadratic, logs_of({sigma, beta, alpha})};
}

KernelSpec KernelSpec::mixture(const std::array<double, 7>& theta) {
  Eigen::VectorXd lp(7);
  for (int i = 0; i < 7; ++i) {
    if (!(theta[i] > 0.0)) throw std::invalid_argument("kernel parameters must be positive");
    lp[i] = std::log(theta[i]);
  }
  return {KernelFamily::Mixture, lp};
}

double KernelSpec::signal_variance() const {
  switch (family) {
    case KernelFamily::SE:
    case KernelFamily::PeriodicSE:
    case KernelFamily::RationalQuadratic: {
      const double sig = param(0);
      return sig * sig;
    }
    case KernelFamily::Mixture: {
      const double t1 = param(0), t3 = param(2), t5 = param(4);
      return t1 * t1 + t3 * t3 + t5 * t5;
    }
  }
  throw std::logic_error("unknown kernel family");
}

std::vector<std::string> KernelSpec::param_names() const {
  switch (family) {
    case KernelFamily::SE: return {"log_sigma", "log_ell"};
    case KernelFamily::PeriodicSE: return {"log_sigma", "log_gamma"};
    case KernelFamily::RationalQuadratic: return {"log_sigma", "log_beta", "log_alpha"};
    case KernelFamily::Mixture:
      return {"log_theta1", "log_theta2", "log_theta3", "log_theta4",
              "log_theta5", "log_theta6", "log_theta7"};
  }
  throw std::logic_error("unknown kernel family");
}

double eval_kernel(const KernelSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& xi,
                   const Eigen::Ref<const Eigen::VectorXd>& xj) {
  if (xi.size() != xj.size()) throw std::invalid_argument("kernel inputs must share a dimension");
  return value_r2(spec, (xi - xj).squaredNorm());
}

Eigen::MatrixXd squared_distances(const Eigen::Ref<const Eigen::MatrixXd>& X1,
                                  const Eigen::Ref<const Eigen::MatrixXd>& X2) {
  if (X1.cols() != X2.cols()) throw std::invalid_argument("input point sets must share a dimension");
  const Eigen::VectorXd n1 = X1.rowwise().squaredNorm();
  const Eigen::VectorXd n2 = X2.rowwise().squaredNorm();
  Eigen::MatrixXd D = n1.replicate(1, X2.rows()) + n2.transpose().replicate(X1.rows(), 1) -
                      2.0 * X1 * X2.transpose();
  return D.cwiseMax(0.0);
}

Eigen::MatrixXd gram(const KernelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& X1,
                     const Eigen::Ref<const Eigen::MatrixXd>& X2) {
  const Eigen::MatrixXd D = squared_distances(X1, X2);
  Eigen::MatrixXd K(D.rows(), D.cols());
  for (Eigen::Index j = 0; j < D.cols(); ++j)
    for (Eigen::Index i = 0; i < D.rows(); ++i) K(i, j) = value_r2(spec, D(i, j));
  return K;
}

Eigen::MatrixXd gram(const KernelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& X) {
  const Eigen::MatrixXd D = squared_distances(X, X);
  const Eigen::Index n = X.rows();
  Eigen::MatrixXd K(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    K(j, j) = spec.signal_variance();
    for (Eigen::Index i = j + 1; i < n; ++i) {
      const double v = value_r2(spec, D(i, j));
      K(i, j) = v;
      K(j, i) = v;
    }
  }
  return K;
}

Eigen::MatrixXd gram_param_grad(const KernelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& X1,
                                const Eigen::Ref<const Eigen::MatrixXd>& X2, int param_index) {
  const Eigen::MatrixXd D = squared_distances(X1, X2);
  Eigen::MatrixXd G(D.rows(), D.cols());
  for (Eigen::Index j = 0; j < D.cols(); ++j)
    for (Eigen::Index i = 0; i < D.rows(); ++i) G(i, j) = grad_r2(spec, D(i, j), param_index);
  return G;
}

Eigen::MatrixXd kernel_param_grad(const KernelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& X,
                                  int param_index) {
  const Eigen::MatrixXd D = squared_distances(X, X);
  const Eigen::Index n = X.rows();
  Eigen::MatrixXd G(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    G(j, j) = grad_r2(spec, 0.0, param_index);
    for (Eigen::Index i = j + 1; i < n; ++i) {
      const double g = grad_r2(spec, D(i, j), param_index);
      G(i, j) = g;
      G(j, i) = g;
    }
  }
  return G;
}

}  // namespace cdgp
