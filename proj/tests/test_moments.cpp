#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <numbers>
#include <random>

#include "cdgp/moments.hpp"
#include "doctest.h"

using namespace cdgp;

namespace {

Eigen::Matrix4d random_cov4(unsigned seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::Matrix4d A;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) A(i, j) = nd(rng);
  return scale * (A * A.transpose()) + 0.05 * Eigen::Matrix4d::Identity();
}

// Gauss-Hermite rule via the Golub-Welsch eigenvalue construction:
// integrates f against exp(-t^2) exactly for polynomial f up to degree 2n-1.
void gauss_hermite(int n, Eigen::VectorXd& nodes, Eigen::VectorXd& weights) {
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    const double b = std::sqrt(k / 2.0);
    J(k, k - 1) = J(k - 1, k) = b;
  }
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  nodes = es.eigenvalues();
  weights.resize(n);
  const double sqrt_pi = std::sqrt(std::numbers::pi);
  for (int i = 0; i < n; ++i) {
    const double v0 = es.eigenvectors()(0, i);
    weights[i] = sqrt_pi * v0 * v0;
  }
}

// Isserlis over GP values conditioned on the inputs: given (x_a..x_d),
// E[f_a f_b f_c f_d | x] = k_ab k_cd + k_ac k_bd + k_ad k_bc.  Averaging that
// over the input Gaussian with a tensor-product Gauss-Hermite rule gives an
// oracle that shares no code path with the closed form.
double quadrature_fourth(const Eigen::Vector4d& mu, const Eigen::Matrix4d& C,
                         double sigma, double ell) {
  Eigen::VectorXd gh_x, gh_w;
  const int n = 60;  // small length scales need a dense rule to resolve
  gauss_hermite(n, gh_x, gh_w);
  const Eigen::Matrix4d L = Eigen::LLT<Eigen::Matrix4d>(C).matrixL();
  const double tau = ell * ell;
  const double s2 = sigma * sigma;
  const double norm = std::pow(std::numbers::pi, -2.0);  // (1/sqrt(pi))^4
  double total = 0.0;
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < n; ++c)
        for (int d = 0; d < n; ++d) {
          // x = mu + L * sqrt(2) * t maps the weight exp(-|t|^2) onto N(mu, C).
          const Eigen::Vector4d t(gh_x[a], gh_x[b], gh_x[c], gh_x[d]);
          const Eigen::Vector4d x = mu + L * (std::sqrt(2.0) * t);
          auto k = [&](int i, int j) {
            const double r = x[i] - x[j];
            return s2 * std::exp(-r * r / (2.0 * tau));
          };
          const double isserlis =
              k(0, 1) * k(2, 3) + k(0, 2) * k(1, 3) + k(0, 3) * k(1, 2);
          total += gh_w[a] * gh_w[b] * gh_w[c] * gh_w[d] * isserlis;
        }
  return total * norm;
}

LayerStack one_net_stack(unsigned seed) {
  LayerStack stack;
  ConditionedLayer lay;
  lay.kernel = KernelSpec::se(1.1, 0.8);
  Eigen::MatrixXd Z(4, 1);
  Z << -1.5, -0.5, 0.5, 1.5;
  lay.hyperdata = Hyperdata(Z, Eigen::VectorXd::Zero(4));
  lay.net = HyperdataNet::init(4, 1, 0.5, seed);
  stack.inner.push_back(lay);
  stack.exposed = KernelSpec::se(0.9, 1.2);
  stack.refresh_u();
  return stack;
}

}  // namespace

TEST_CASE("heavy tail gap: closed-form anchor, zero line, and non-negativity") {
  CHECK(heavy_tail_gap(0.0, 1.0) ==
        doctest::Approx(1.0 / std::sqrt(3.0) - 0.5).epsilon(1e-12));
  for (double m : {0.0, 0.3, 1.0, 2.5}) {
    CHECK(heavy_tail_gap(m, 0.0) == 0.0);  // deterministic inputs: no excess
    CHECK(heavy_tail_gap(m, 1e-9) >= 0.0);
    CHECK(heavy_tail_gap(-m, 0.7) == doctest::Approx(heavy_tail_gap(m, 0.7)).epsilon(1e-15));
  }
  for (int i = 0; i <= 20; ++i)
    for (int j = 0; j <= 20; ++j) {
      const double m = -3.0 + 6.0 * i / 20.0;
      const double d2 = 4.0 * j / 20.0;
      CHECK(heavy_tail_gap(m, d2) >= 0.0);
    }
  CHECK(heavy_tail_gap(0.0, 1e6) < 1e-2);  // washes out for huge dispersion
  CHECK_THROWS_AS(heavy_tail_gap(0.0, -1e-9), std::invalid_argument);
}

TEST_CASE("fourth moment with deterministic inputs reduces to Isserlis") {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> nd(0.0, 1.3);
  const double sigma = 1.2, ell = 0.7;
  const double s2 = sigma * sigma, tau = ell * ell;
  for (int trial = 0; trial < 25; ++trial) {
    Eigen::Vector4d mu;
    for (int i = 0; i < 4; ++i) mu[i] = nd(rng);
    auto k = [&](int i, int j) {
      const double r = mu[i] - mu[j];
      return s2 * std::exp(-r * r / (2.0 * tau));
    };
    const double want = k(0, 1) * k(2, 3) + k(0, 2) * k(1, 3) + k(0, 3) * k(1, 2);
    CHECK(fourth_moment(mu, Eigen::Matrix4d::Zero(), sigma, ell) ==
          doctest::Approx(want).epsilon(1e-10));
  }
  // All four points coincident: E[f^4] = 3 sigma^4.
  CHECK(fourth_moment(Eigen::Vector4d::Constant(0.4), Eigen::Matrix4d::Zero(), sigma,
                      ell) == doctest::Approx(3.0 * s2 * s2).epsilon(1e-12));
}

TEST_CASE("fourth moment agrees with tensor quadrature over random input laws") {
  for (unsigned seed : {5u, 6u}) {
    std::mt19937_64 rng(seed * 91);
    std::normal_distribution<double> nd(0.0, 0.8);
    Eigen::Vector4d mu;
    for (int i = 0; i < 4; ++i) mu[i] = nd(rng);
    const Eigen::Matrix4d C = random_cov4(seed, 0.3);
    const double sigma = 1.1, ell = 0.9;
    const double got = fourth_moment(mu, C, sigma, ell);
    const double want = quadrature_fourth(mu, C, sigma, ell);
    CHECK(got == doctest::Approx(want).epsilon(1e-8));
  }
}

TEST_CASE("pairwise fourth moment excess equals the heavy tail gap exactly") {
  // fourth(a,b,a,b) - [k_aa k_bb + 2 k_ab^2] == 2 sigma^4 gap(dm/ell, delta2/ell^2)
  // for arbitrary pair moments; an analytic identity tying the two modules.
  std::mt19937_64 rng(77);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.3, 2.0);
  for (int trial = 0; trial < 40; ++trial) {
    const double sigma = unif(rng), ell = unif(rng);
    const double mi = nd(rng), mj = nd(rng);
    const double cii = unif(rng), cjj = unif(rng);
    const double rho = -0.9 + 1.8 * (trial / 39.0);
    const double cij = rho * std::sqrt(cii * cjj);
    const PairMoments pm = PairMoments::from(mi, mj, cii, cjj, cij, false);

    Eigen::Vector4d mu(mi, mj, mi, mj);
    Eigen::Matrix4d C;
    C << cii, cij, cii, cij,  //
        cij, cjj, cij, cjj,   //
        cii, cij, cii, cij,   //
        cij, cjj, cij, cjj;
    const double fourth = fourth_moment(mu, C, sigma, ell);

    const double s2 = sigma * sigma;
    const double kab = effective_se_cov(pm, sigma, ell);
    const double matched = s2 * s2 + 2.0 * kab * kab;
    const double gap =
        heavy_tail_gap((mi - mj) / ell, pm.delta2 / (ell * ell));
    CHECK(fourth - matched == doctest::Approx(2.0 * s2 * s2 * gap).epsilon(1e-10));
    CHECK(fourth - matched >= -1e-12);
  }
}

TEST_CASE("fourth moment rejects an indefinite input covariance") {
  Eigen::Matrix4d C;
  C << 1, 0, 0, 2,  //
      0, 1, 2, 0,   //
      0, 2, 1, 0,   //
      2, 0, 0, 1;
  CHECK_THROWS_AS(fourth_moment(Eigen::Vector4d::Zero(), C, 1.0, 1.0),
                  std::invalid_argument);
}

TEST_CASE("monte carlo second moments are deterministic and match the closed form") {
  const KernelSpec exposed = KernelSpec::se(1.2, 0.9);
  Eigen::VectorXd mean(3);
  mean << -0.5, 0.1, 0.8;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(3, 3);
  cov.diagonal() << 0.4, 0.3, 0.5;
  cov(0, 1) = cov(1, 0) = 0.2;

  McOptions opt;
  opt.n_samples = 60000;
  opt.seed = 42;
  const McMoments a = mc_exposed_moments(exposed, mean, cov, opt);
  const McMoments b = mc_exposed_moments(exposed, mean, cov, opt);
  CHECK((a.second - b.second).cwiseAbs().maxCoeff() == 0.0);  // same seed, same draw

  McOptions opt2 = opt;
  opt2.seed = 43;
  const McMoments c = mc_exposed_moments(exposed, mean, cov, opt2);
  CHECK((a.second - c.second).cwiseAbs().maxCoeff() > 0.0);

  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const PairMoments pm = PairMoments::from(
          mean[i], mean[j], cov(i, i), cov(j, j), cov(i, j), i == j);
      const double want = effective_se_cov(pm, 1.2, 0.9);
      CHECK(std::abs(a.second(i, j) - want) < 4.0 * a.second_se(i, j));
      CHECK(a.second_se(i, j) < 0.05);
    }
}

TEST_CASE("deterministic input covariance takes the noiseless path") {
  const KernelSpec exposed = KernelSpec::se(1.0, 1.1);
  Eigen::VectorXd mean(2);
  mean << 0.0, 0.7;
  McOptions opt;
  opt.n_samples = 50000;
  opt.seed = 7;
  const McMoments m =
      mc_exposed_moments(exposed, mean, Eigen::MatrixXd::Zero(2, 2), opt);
  Eigen::VectorXd a(1), b(1);
  a << 0.0;
  b << 0.7;
  const double k01 = eval_kernel(exposed, a, b);
  CHECK(std::abs(m.second(0, 1) - k01) < 4.0 * m.second_se(0, 1));
  CHECK(std::abs(m.second(0, 0) - 1.0) < 4.0 * m.second_se(0, 0));
}

TEST_CASE("composite sampling covers depth one directly") {
  LayerStack flat;
  flat.exposed = KernelSpec::se(1.3, 0.8);
  Eigen::MatrixXd X(3, 1);
  X << -1.0, 0.0, 0.9;
  McOptions opt;
  opt.n_samples = 80000;
  opt.seed = 11;
  const McMoments m = mc_sample_composite(flat, X, opt);
  const Eigen::MatrixXd K = gram(flat.exposed, X);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(std::abs(m.second(i, j) - K(i, j)) < 4.0 * m.second_se(i, j));
}

TEST_CASE("composite second moments match the effective kernel for a deep stack") {
  const LayerStack stack = one_net_stack(19);
  Eigen::MatrixXd X(4, 1);
  X << -1.2, -0.3, 0.4, 1.3;
  McOptions opt;
  opt.n_samples = 200000;
  opt.seed = 5;
  const McMoments m = mc_sample_composite(stack, X, opt);
  const StackEval ev = propagate_stack(stack, X);
  double max_z = 0.0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      const double se = std::max(m.second_se(i, j), 1e-12);
      max_z = std::max(max_z, std::abs(m.second(i, j) - ev.K(i, j)) / se);
    }
  CHECK(max_z < 4.0);
}

TEST_CASE("marginal of the composite at one point is exactly Gaussian") {
  // g | h ~ N(0, sigma2^2) independent of h, so the one-point marginal has
  // zero excess kurtosis even though joint moments are heavier than Gaussian.
  const LayerStack stack = one_net_stack(23);
  Eigen::MatrixXd X(1, 1);
  X << 0.4;
  McOptions opt;
  opt.n_samples = 300000;
  opt.seed = 3;
  opt.quads = {{0, 0, 0, 0}};
  const McMoments m = mc_sample_composite(stack, X, opt);
  const double s2 = stack.exposed.signal_variance();
  const double excess = m.fourth[0] - 3.0 * s2 * s2;
  CHECK(std::abs(excess) <= 4.0 * m.fourth_se[0]);
}

TEST_CASE("joint fourth moments of the composite exceed the matched Gaussian") {
  const LayerStack stack = one_net_stack(29);
  Eigen::MatrixXd X(2, 1);
  X << -0.6, 0.8;
  McOptions opt;
  opt.n_samples = 400000;
  opt.seed = 13;
  opt.quads = {{0, 1, 0, 1}};
  const McMoments m = mc_sample_composite(stack, X, opt);

  const StackEval ev = propagate_stack(stack, X);
  const double s2 = stack.exposed.signal_variance();
  const double matched = s2 * s2 + 2.0 * ev.K(0, 1) * ev.K(0, 1);

  // Closed-form fourth moment over the layer-1 law for the same quadruple.
  const MomentTable& t = ev.layers[0];
  Eigen::Vector4d mu(t.mean[0], t.mean[1], t.mean[0], t.mean[1]);
  Eigen::Matrix4d C;
  const double cii = t.cov(0, 0), cjj = t.cov(1, 1), cij = t.cov(0, 1);
  C << cii, cij, cii, cij,  //
      cij, cjj, cij, cjj,   //
      cii, cij, cii, cij,   //
      cij, cjj, cij, cjj;
  const double sigma2 = std::sqrt(stack.exposed.signal_variance());
  const double ell2 = stack.exposed.param(1);
  const double closed = fourth_moment(mu, C, sigma2, ell2);

  CHECK(std::abs(m.fourth[0] - closed) < 4.0 * m.fourth_se[0]);
  CHECK(closed > matched - 1e-12);  // heavier joint tails than the match
}

TEST_CASE("monte carlo options are validated") {
  const KernelSpec exposed = KernelSpec::se(1.0, 1.0);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(2);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Identity(2, 2);
  McOptions bad;
  bad.n_samples = 0;
  CHECK_THROWS_AS(mc_exposed_moments(exposed, mean, cov, bad), std::invalid_argument);
  McOptions badquad;
  badquad.quads = {{0, 1, 2, 0}};  // index 2 out of range for N = 2
  CHECK_THROWS_AS(mc_exposed_moments(exposed, mean, cov, badquad),
                  std::invalid_argument);
}
