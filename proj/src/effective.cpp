#include "cdgp/effective.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "cdgp/gp.hpp"

namespace cdgp {

namespace {

// ---------------------------------------------------------------------------
// Scalar SE helpers: phi(r) = s2 exp(-r^2/(2 tau)) with tau = ell^2, plus the
// r-derivatives to third order and the tau-derivatives needed for log-ell
// gradients of the derivative tables.
struct Se1d {
  double s2 = 1.0, tau = 1.0;

  double phi(double r) const { return s2 * std::exp(-r * r / (2.0 * tau)); }
  double d1(double r) const { return -phi(r) * r / tau; }
  double d2(double r) const { return phi(r) * (r * r - tau) / (tau * tau); }
  double d3(double r) const { return phi(r) * r * (3.0 * tau - r * r) / (tau * tau * tau); }

  double dtau_phi(double r) const { return phi(r) * r * r / (2.0 * tau * tau); }
  double dtau_d1(double r) const {
    return phi(r) * r * (2.0 * tau - r * r) / (2.0 * tau * tau * tau);
  }
  double dtau_d2(double r) const {
    const double t2 = tau * tau;
    return phi(r) * (r * r * (r * r - 5.0 * tau) + 2.0 * t2) / (2.0 * t2 * t2);
  }

  double deriv(int order, double r) const {
    switch (order) {
      case 0: return phi(r);
      case 1: return d1(r);
      case 2: return d2(r);
      case 3: return d3(r);
    }
    throw std::logic_error("unsupported derivative order");
  }
  double dtau(int order, double r) const {
    switch (order) {
      case 0: return dtau_phi(r);
      case 1: return dtau_d1(r);
      case 2: return dtau_d2(r);
    }
    throw std::logic_error("unsupported derivative order");
  }
};

Se1d se1d_of(const KernelSpec& k) {
  const double sig = k.param(0), ell = k.param(1);
  return {sig * sig, ell * ell};
}

void require_se(const KernelSpec& k, const char* where) {
  if (k.family != KernelFamily::SE) {
    std::ostringstream msg;
    msg << where << " requires a squared-exponential kernel";
    throw std::invalid_argument(msg.str());
  }
}

// Signed pairwise differences r_ij = a_i - b_j.
Eigen::MatrixXd outer_diff(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.replicate(1, b.size()) - b.transpose().replicate(a.size(), 1);
}

Eigen::MatrixXd apply_se(const Se1d& se, int order, const Eigen::MatrixXd& R) {
  Eigen::MatrixXd out(R.rows(), R.cols());
  for (Eigen::Index j = 0; j < R.cols(); ++j)
    for (Eigen::Index i = 0; i < R.rows(); ++i) out(i, j) = se.deriv(order, R(i, j));
  return out;
}

Eigen::MatrixXd apply_se_dtau(const Se1d& se, int order, const Eigen::MatrixXd& R) {
  Eigen::MatrixXd out(R.rows(), R.cols());
  for (Eigen::Index j = 0; j < R.cols(); ++j)
    for (Eigen::Index i = 0; i < R.rows(); ++i) out(i, j) = se.dtau(order, R(i, j));
  return out;
}

// ---------------------------------------------------------------------------
// Exposed-layer pair formulas: value and partials of the moment-matched SE
// covariance with respect to the mean difference and delta^2.
struct ExposedPair {
  double k, d_delta, d_s;  // value, d/d(m_i - m_j), d/d(delta^2)
};

ExposedPair exposed_pair(double delta_m, double s, double s2, double tau) {
  const double q = tau + s;
  const double k = s2 * std::sqrt(tau / q) * std::exp(-delta_m * delta_m / (2.0 * q));
  return {k, -k * delta_m / q, k * (delta_m * delta_m - q) / (2.0 * q * q)};
}

// ---------------------------------------------------------------------------
// First inner layer: exact conditional moments on the original inputs, with
// directional derivatives for every layer parameter.
struct Layer1Eval {
  const ConditionedLayer* layer = nullptr;
  Eigen::MatrixXd X;
  int M = 0;
  Eigen::VectorXd m;
  Eigen::MatrixXd C;

  // caches (M > 0)
  Eigen::MatrixXd Kx, Kxz, Kzz, Dx, Dxz, Dzz;
  Eigen::MatrixXd B;   // Kzz^-1 Kzx, M x N
  Eigen::VectorXd alpha;
  CholFactor cholZ;
  double tau = 1.0;

  void build(const ConditionedLayer& lay, const Eigen::Ref<const Eigen::MatrixXd>& Xin) {
    layer = &lay;
    X = Xin;
    M = lay.hyperdata.size();
    require_se(lay.kernel, "inner layer");
    const double ell = lay.kernel.param(1);
    tau = ell * ell;
    Dx = squared_distances(X, X);
    Kx = gram(lay.kernel, X);
    if (M == 0) {
      m = Eigen::VectorXd::Zero(X.rows());
      C = Kx;
      return;
    }
    if (lay.hyperdata.Z.cols() != X.cols())
      throw std::invalid_argument("hyperdata dimension must match layer inputs");
    Dxz = squared_distances(X, lay.hyperdata.Z);
    Dzz = squared_distances(lay.hyperdata.Z, lay.hyperdata.Z);
    Kxz = gram(lay.kernel, X, lay.hyperdata.Z);
    Kzz = gram(lay.kernel, lay.hyperdata.Z);
    cholZ = chol_jitter(Kzz);
    alpha = cholZ.solve(lay.hyperdata.u);
    B = cholZ.solve_mat(Kxz.transpose());
    m = Kxz * alpha;
    C = Kx - Kxz * B;
    C = 0.5 * (C + C.transpose()).eval();
  }

  // d(mean)/d(theta), d(cov)/d(theta) for a kernel log-parameter (0 = log
  // sigma, 1 = log ell), from block derivatives of the SE Grams.
  void kernel_param(int idx, Eigen::VectorXd& dm, Eigen::MatrixXd& dC) const {
    const Eigen::MatrixXd dKx =
        idx == 0 ? (2.0 * Kx).eval() : (Kx.array() * Dx.array() / tau).matrix().eval();
    if (M == 0) {
      dm = Eigen::VectorXd::Zero(X.rows());
      dC = dKx;
      return;
    }
    const Eigen::MatrixXd dKxz =
        idx == 0 ? (2.0 * Kxz).eval() : (Kxz.array() * Dxz.array() / tau).matrix().eval();
    const Eigen::MatrixXd dKzz =
        idx == 0 ? (2.0 * Kzz).eval() : (Kzz.array() * Dzz.array() / tau).matrix().eval();
    const Eigen::VectorXd dalpha = cholZ.solve((-(dKzz * alpha)).eval());
    dm = dKxz * alpha + Kxz * dalpha;
    const Eigen::MatrixXd T = dKxz * B;
    dC = dKx - T - T.transpose() + B.transpose() * dKzz * B;
  }

  // Directional derivatives for all hyperdata-output directions at once:
  // d(mean)/du = Kxz Kzz^-1; covariance is u-independent.
  Eigen::MatrixXd mean_u_jacobian() const { return B.transpose(); }

  // Derivatives for one hyperdata input coordinate Z(mz, jz).
  void z_param(int mz, int jz, Eigen::VectorXd& dm, Eigen::MatrixXd& dC) const {
    const auto& Z = layer->hyperdata.Z;
    const int N = static_cast<int>(X.rows());
    Eigen::MatrixXd dKzz = Eigen::MatrixXd::Zero(M, M);
    for (int b = 0; b < M; ++b) {
      if (b == mz) continue;
      const double g = Kzz(mz, b) * (Z(b, jz) - Z(mz, jz)) / tau;
      dKzz(mz, b) = g;
      dKzz(b, mz) = g;
    }
    Eigen::MatrixXd dKxz = Eigen::MatrixXd::Zero(N, M);
    for (int i = 0; i < N; ++i)
      dKxz(i, mz) = Kxz(i, mz) * (X(i, jz) - Z(mz, jz)) / tau;
    Eigen::VectorXd du = Eigen::VectorXd::Zero(M);
    if (layer->net) du[mz] = layer->net->input_grad(Z.row(mz).transpose())[jz];
    const Eigen::VectorXd dalpha = cholZ.solve((du - dKzz * alpha).eval());
    dm = dKxz * alpha + Kxz * dalpha;
    const Eigen::MatrixXd T = dKxz * B;
    dC = -T - T.transpose() + B.transpose() * dKzz * B;
  }
};

// ---------------------------------------------------------------------------
// Clamp a symmetric matrix to the PSD cone by zeroing negative eigenvalues.
// chain() is the exact directional derivative of that map (divided-difference
// form), the identity when no clamp fired.
struct PsdClip {
  bool clipped = false;
  Eigen::MatrixXd V;
  Eigen::VectorXd lam;

  Eigen::MatrixXd apply(const Eigen::MatrixXd& C) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> only(C, Eigen::EigenvaluesOnly);
    if (only.eigenvalues().minCoeff() >= 0.0) {
      clipped = false;
      return C;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
    clipped = true;
    V = es.eigenvectors();
    lam = es.eigenvalues();
    return V * lam.cwiseMax(0.0).asDiagonal() * V.transpose();
  }

  Eigen::MatrixXd chain(const Eigen::MatrixXd& dC) const {
    if (!clipped) return dC;
    const Eigen::Index n = lam.size();
    const double scale = std::max(lam.cwiseAbs().maxCoeff(), 1e-300);
    Eigen::MatrixXd E = V.transpose() * dC * V;
    for (Eigen::Index k = 0; k < n; ++k) {
      for (Eigen::Index l = 0; l < n; ++l) {
        double f;
        if (std::abs(lam[k] - lam[l]) <= 1e-12 * scale)
          f = lam[k] > 0.0 ? 1.0 : 0.0;
        else
          f = (std::max(lam[k], 0.0) - std::max(lam[l], 0.0)) / (lam[k] - lam[l]);
        E(k, l) *= f;
      }
    }
    return V * E * V.transpose();
  }
};

// ---------------------------------------------------------------------------
// Inner layer at depth >= 2: scalar inputs s (the propagated means), Taylor
// covariance over the propagated covariance, plug-in means.  Precomputes the
// derivative tables of the conditional mean/covariance so every parameter
// sweep is a cheap array combination.
struct InnerScalarEval {
  const ConditionedLayer* layer = nullptr;
  int M = 0, N = 0;
  Se1d se;
  Eigen::VectorXd s;    // inputs
  Eigen::MatrixXd Cin;
  Eigen::VectorXd cin_diag;

  Eigen::VectorXd zv, alpha;
  CholFactor cholZ;
  Eigen::MatrixXd Rsz, Rzz, Rss;           // signed differences
  std::array<Eigen::MatrixXd, 4> K;        // k^(a)(s_i, z_m)
  std::array<Eigen::MatrixXd, 3> G;        // K_a Kzz^-1
  std::array<Eigen::MatrixXd, 4> Phi;      // phi^(n)(s_i - s_j)
  Eigen::MatrixXd Kzz;
  Eigen::VectorXd mu0, mu1, mu2;           // mu, mu', mu'' at s_i
  Eigen::MatrixXd g00, g20, g02, g11;      // conditional covariance derivatives
  Eigen::MatrixXd Pi;                      // d C_raw(i,j) / d s_i
  Eigen::MatrixXd mu1_outer;               // mu' mu'^T

  Eigen::VectorXd m_out;
  Eigen::MatrixXd C_out;
  PsdClip clip;

  Eigen::MatrixXd cond_tab(int a, int b) const {
    // g_ab = (-1)^b phi^(a+b)(s_i - s_j) - K_a Kzz^-1 K_b^T
    const double sign = (b % 2 == 0) ? 1.0 : -1.0;
    Eigen::MatrixXd out = sign * Phi[a + b];
    if (M > 0) {
      if (a <= 2)
        out.noalias() -= G[a] * K[b].transpose();
      else
        out.noalias() -= (G[b] * K[a].transpose()).transpose();
    }
    return out;
  }

  void build(const ConditionedLayer& lay, const Eigen::VectorXd& s_in,
             const Eigen::MatrixXd& C_in, bool need_chain) {
    layer = &lay;
    require_se(lay.kernel, "inner layer");
    se = se1d_of(lay.kernel);
    s = s_in;
    Cin = C_in;
    cin_diag = C_in.diagonal();
    N = static_cast<int>(s.size());
    M = lay.hyperdata.size();
    if (M > 0 && lay.hyperdata.Z.cols() != 1)
      throw std::invalid_argument("inner layers past the first take scalar inputs");

    Rss = outer_diff(s, s);
    for (int n = 0; n < 4; ++n) Phi[n] = apply_se(se, n, Rss);

    if (M > 0) {
      zv = lay.hyperdata.Z.col(0);
      Rsz = outer_diff(s, zv);
      Rzz = outer_diff(zv, zv);
      Kzz = apply_se(se, 0, Rzz);
      cholZ = chol_jitter(Kzz);
      alpha = cholZ.solve(lay.hyperdata.u);
      for (int a = 0; a < 4; ++a) K[a] = apply_se(se, a, Rsz);
      for (int a = 0; a < 3; ++a) G[a] = cholZ.solve_mat(K[a].transpose()).transpose();
      mu0 = K[0] * alpha;
      mu1 = K[1] * alpha;
      mu2 = K[2] * alpha;
    } else {
      mu0 = Eigen::VectorXd::Zero(N);
      mu1 = mu0;
      mu2 = mu0;
    }

    g00 = cond_tab(0, 0);
    g20 = cond_tab(2, 0);
    g02 = g20.transpose();
    g11 = cond_tab(1, 1);
    mu1_outer = mu1 * mu1.transpose();

    Eigen::MatrixXd Craw = g00;
    Craw.array() += 0.5 * (g02.array().colwise() * cin_diag.array()) +
                    0.5 * (g20.array().rowwise() * cin_diag.transpose().array()) +
                    Cin.array() * (g11.array() + mu1_outer.array());
    Craw = 0.5 * (Craw + Craw.transpose()).eval();
    m_out = mu0;
    C_out = clip.apply(Craw);

    if (need_chain) {
      const Eigen::MatrixXd g10 = cond_tab(1, 0);
      const Eigen::MatrixXd g30 = cond_tab(3, 0);
      const Eigen::MatrixXd g21 = cond_tab(2, 1);
      Pi = g10;
      Pi.array() += 0.5 * (cond_tab(1, 2).array().colwise() * cin_diag.array()) +
                    0.5 * (g30.array().rowwise() * cin_diag.transpose().array()) +
                    Cin.array() * (g21.array() + (mu2 * mu1.transpose()).array());
    }
  }

  // Propagate input-direction derivatives (no own-parameter terms).
  void chain(const Eigen::VectorXd& ds, const Eigen::MatrixXd& dCin, Eigen::VectorXd& dm,
             Eigen::MatrixXd& dC) const {
    dm = mu1.cwiseProduct(ds);
    const Eigen::VectorXd ddiag = dCin.diagonal();
    Eigen::MatrixXd d = (Pi.array().colwise() * ds.array()).matrix();
    d += (Pi.array().colwise() * ds.array()).matrix().transpose();
    d.array() += 0.5 * (g02.array().colwise() * ddiag.array()) +
                 0.5 * (g20.array().rowwise() * ddiag.transpose().array()) +
                 dCin.array() * (g11.array() + mu1_outer.array());
    dC = clip.chain(d);
  }

  // Own-parameter derivative from block derivatives of the hyperdata solve
  // and the derivative tables.  dKa covers orders 0..2, dPhi orders 0..2.
  void own_param(const Eigen::MatrixXd& dKzz, const std::array<Eigen::MatrixXd, 3>& dKa,
                 const std::array<Eigen::MatrixXd, 3>& dPhi, const Eigen::VectorXd& du,
                 Eigen::VectorXd& dm, Eigen::MatrixXd& dC) const {
    Eigen::VectorXd dmu0, dmu1;
    std::array<Eigen::MatrixXd, 3> dG;  // of G[a] = K_a Kzz^-1
    if (M > 0) {
      const Eigen::VectorXd dalpha = cholZ.solve((du - dKzz * alpha).eval());
      dmu0 = dKa[0] * alpha + K[0] * dalpha;
      dmu1 = dKa[1] * alpha + K[1] * dalpha;
      for (int a = 0; a < 3; ++a)
        dG[a] = cholZ.solve_mat((dKa[a] - G[a] * dKzz).transpose()).transpose();
    } else {
      dmu0 = Eigen::VectorXd::Zero(N);
      dmu1 = dmu0;
    }

    auto dcond = [&](int a, int b) {
      const double sign = (b % 2 == 0) ? 1.0 : -1.0;
      Eigen::MatrixXd out = sign * dPhi[a + b];
      if (M > 0) {
        // d(K_a Kzz^-1 K_b^T) = dG_a K_b^T + G_a dK_b^T
        out.noalias() -= dG[a] * K[b].transpose();
        out.noalias() -= G[a] * dKa[b].transpose();
      }
      return out;
    };

    dm = dmu0;
    const Eigen::MatrixXd dg20 = dcond(2, 0);
    Eigen::MatrixXd d = dcond(0, 0);
    d.array() += 0.5 * (dg20.transpose().array().colwise() * cin_diag.array()) +
                 0.5 * (dg20.array().rowwise() * cin_diag.transpose().array()) +
                 Cin.array() * dcond(1, 1).array() +
                 Cin.array() * ((dmu1 * mu1.transpose() + mu1 * dmu1.transpose()).array());
    d = 0.5 * (d + d.transpose()).eval();
    dC = clip.chain(d);
  }

  void param_tables_log_sigma(Eigen::MatrixXd& dKzz, std::array<Eigen::MatrixXd, 3>& dKa,
                              std::array<Eigen::MatrixXd, 3>& dPhi) const {
    if (M > 0) {
      dKzz = 2.0 * Kzz;
      for (int a = 0; a < 3; ++a) dKa[a] = 2.0 * K[a];
    }
    for (int n = 0; n < 3; ++n) dPhi[n] = 2.0 * Phi[n];
  }

  void param_tables_log_ell(Eigen::MatrixXd& dKzz, std::array<Eigen::MatrixXd, 3>& dKa,
                            std::array<Eigen::MatrixXd, 3>& dPhi) const {
    const double two_tau = 2.0 * se.tau;
    if (M > 0) {
      dKzz = two_tau * apply_se_dtau(se, 0, Rzz);
      for (int a = 0; a < 3; ++a) dKa[a] = two_tau * apply_se_dtau(se, a, Rsz);
    }
    for (int n = 0; n < 3; ++n) dPhi[n] = two_tau * apply_se_dtau(se, n, Rss);
  }

  // Hyperdata input position z_m: moves row/col m of Kzz, column m of the K_a
  // tables, and u_m when a net generates it.
  void param_tables_z(int mz, Eigen::MatrixXd& dKzz, std::array<Eigen::MatrixXd, 3>& dKa,
                      std::array<Eigen::MatrixXd, 3>& dPhi, Eigen::VectorXd& du) const {
    dKzz = Eigen::MatrixXd::Zero(M, M);
    for (int b = 0; b < M; ++b) {
      if (b == mz) continue;
      const double g = se.d1(zv[mz] - zv[b]);
      dKzz(mz, b) = g;
      dKzz(b, mz) = g;
    }
    for (int a = 0; a < 3; ++a) {
      dKa[a] = Eigen::MatrixXd::Zero(N, M);
      for (int i = 0; i < N; ++i) dKa[a](i, mz) = -se.deriv(a + 1, Rsz(i, mz));
    }
    for (int n = 0; n < 3; ++n) dPhi[n] = Eigen::MatrixXd::Zero(N, N);
    du = Eigen::VectorXd::Zero(M);
    if (layer->net) du[mz] = layer->net->input_grad(zv.segment(mz, 1))[0];
  }
};

// ---------------------------------------------------------------------------
// Exposed-layer tables over the final moment table.
struct ExposedEval {
  double s2 = 1.0, tau = 1.0;
  Eigen::MatrixXd Kv, GD, GS;  // value, d/d(mean diff), d/d(delta^2)
  Eigen::MatrixXd Dm;          // mean differences
  Eigen::MatrixXd S;           // clamped delta^2

  void build(const KernelSpec& exposed, const MomentTable& tab) {
    const double sig = exposed.param(0), ell = exposed.param(1);
    s2 = sig * sig;
    tau = ell * ell;
    const int N = tab.size();
    Kv.resize(N, N);
    GD = Eigen::MatrixXd::Zero(N, N);
    GS = Eigen::MatrixXd::Zero(N, N);
    Dm.resize(N, N);
    S.resize(N, N);
    for (int j = 0; j < N; ++j) {
      Kv(j, j) = s2;
      Dm(j, j) = 0.0;
      S(j, j) = 0.0;
      for (int i = j + 1; i < N; ++i) {
        const PairMoments pm = tab.pair(i, j);
        const double raw = pm.c_ii + pm.c_jj - 2.0 * pm.c_ij;
        const double dm = pm.m_i - pm.m_j;
        const ExposedPair e = exposed_pair(dm, pm.delta2, s2, tau);
        Kv(i, j) = Kv(j, i) = e.k;
        Dm(i, j) = dm;
        Dm(j, i) = -dm;
        S(i, j) = S(j, i) = pm.delta2;
        GD(i, j) = e.d_delta;
        GD(j, i) = -e.d_delta;
        // Gradient through the clamp is zero where it engaged.
        const double gs = raw >= 0.0 ? e.d_s : 0.0;
        GS(i, j) = GS(j, i) = gs;
      }
    }
  }

  // dK from final moment-direction derivatives.
  Eigen::MatrixXd combine(const Eigen::VectorXd& dm, const Eigen::MatrixXd& dC) const {
    const Eigen::VectorXd dcd = dC.diagonal();
    Eigen::MatrixXd out =
        (GD.array() * (dm.replicate(1, dm.size()) - dm.transpose().replicate(dm.size(), 1)).array())
            .matrix();
    out.array() += GS.array() * (dcd.replicate(1, dcd.size()).array() +
                                 dcd.transpose().replicate(dcd.size(), 1).array() -
                                 2.0 * dC.array());
    return out;
  }

  Eigen::MatrixXd own_log_sigma() const { return 2.0 * Kv; }

  Eigen::MatrixXd own_log_ell() const {
    // dk/dlog ell = k (s/q + tau Delta^2 / q^2), q = tau + s; zero diagonal.
    const Eigen::ArrayXXd q = tau + S.array();
    return (Kv.array() * (S.array() / q + tau * Dm.array().square() / q.square())).matrix();
  }
};

// Shared forward pass.
struct StackForward {
  Layer1Eval layer1;
  std::vector<InnerScalarEval> deeper;
  ExposedEval exposed;
  std::vector<MomentTable> tables;

  void build(const LayerStack& stack, const Eigen::Ref<const Eigen::MatrixXd>& X,
             bool need_chain) {
    require_se(stack.exposed, "the exposed layer of a deep stack");
    layer1.build(stack.inner[0], X);
    tables.push_back({layer1.m, layer1.C});
    deeper.clear();
    deeper.resize(stack.inner.size() - 1);
    for (std::size_t l = 1; l < stack.inner.size(); ++l) {
      const MomentTable& prev = tables.back();
      deeper[l - 1].build(stack.inner[l], prev.mean, prev.cov, need_chain);
      tables.push_back({deeper[l - 1].m_out, deeper[l - 1].C_out});
    }
    exposed.build(stack.exposed, tables.back());
  }

  // Push a layer-1 output direction through the deeper layers and the exposed
  // combine.
  Eigen::MatrixXd push_from_layer1(Eigen::VectorXd dm, Eigen::MatrixXd dC) const {
    for (const auto& lay : deeper) {
      Eigen::VectorXd dm2;
      Eigen::MatrixXd dC2;
      lay.chain(dm, dC, dm2, dC2);
      dm = std::move(dm2);
      dC = std::move(dC2);
    }
    return exposed.combine(dm, dC);
  }

  Eigen::MatrixXd push_from(std::size_t after_deeper, Eigen::VectorXd dm,
                            Eigen::MatrixXd dC) const {
    for (std::size_t l = after_deeper; l < deeper.size(); ++l) {
      Eigen::VectorXd dm2;
      Eigen::MatrixXd dC2;
      deeper[l].chain(dm, dC, dm2, dC2);
      dm = std::move(dm2);
      dC = std::move(dC2);
    }
    return exposed.combine(dm, dC);
  }
};

}  // namespace

// ---------------------------------------------------------------------------

double effective_se_cov(const PairMoments& pm, double sigma, double ell) {
  if (!(sigma > 0.0) || !(ell > 0.0)) throw std::invalid_argument("kernel parameters must be positive");
  if (pm.delta2 < 0.0) throw std::invalid_argument("delta2 must be non-negative");
  return exposed_pair(pm.m_i - pm.m_j, pm.delta2, sigma * sigma, ell * ell).k;
}

double sese_kernel(const Eigen::Ref<const Eigen::VectorXd>& xi,
                   const Eigen::Ref<const Eigen::VectorXd>& xj, double sigma1, double ell1,
                   double sigma2, double ell2) {
  if (!(sigma1 > 0.0) || !(ell1 > 0.0) || !(sigma2 > 0.0) || !(ell2 > 0.0))
    throw std::invalid_argument("kernel parameters must be positive");
  if (xi.size() != xj.size()) throw std::invalid_argument("kernel inputs must share a dimension");
  const double r2 = (xi - xj).squaredNorm();
  const double inner = 1.0 - std::exp(-r2 / (2.0 * ell1 * ell1));
  return sigma2 * sigma2 /
         std::sqrt(1.0 + 2.0 * (sigma1 * sigma1) / (ell2 * ell2) * inner);
}

double taylor_cov(const PairMoments& pm, const PairDerivs& d) {
  return d.k + 0.5 * pm.c_ii * d.k_djj + 0.5 * pm.c_jj * d.k_dii + pm.c_ij * d.k_dij +
         pm.c_ij * d.mu_di * d.mu_dj;
}

double taylor_limit_cov(const PairMoments& pm, double sigma, double ell) {
  if (!(sigma > 0.0) || !(ell > 0.0)) throw std::invalid_argument("kernel parameters must be positive");
  const double tau = ell * ell;
  const double dm2 = (pm.m_i - pm.m_j) * (pm.m_i - pm.m_j);
  return sigma * sigma * (1.0 + (dm2 - tau) / (2.0 * tau * tau) * pm.delta2) *
         std::exp(-dm2 / (2.0 * tau));
}

void LayerStack::refresh_u() {
  for (auto& lay : inner) lay.refresh_u();
}

StackEval propagate_stack(const LayerStack& stack, const Eigen::Ref<const Eigen::MatrixXd>& X) {
  if (X.rows() == 0) throw std::invalid_argument("propagate_stack requires at least one input");
  if (stack.depth() == 1) return {gram(stack.exposed, X), {}};
  StackForward fwd;
  fwd.build(stack, X, /*need_chain=*/false);
  return {fwd.exposed.Kv, std::move(fwd.tables)};
}

// ---------------------------------------------------------------------------

ParamLayout ParamLayout::of(const LayerStack& stack, bool with_z) {
  ParamLayout lay;
  lay.with_z = with_z;
  int at = 0;
  for (std::size_t l = 0; l < stack.inner.size(); ++l) {
    const auto& layer = stack.inner[l];
    LayerSlice s;
    s.kernel_at = at;
    s.kernel_n = layer.kernel.n_params();
    const std::string prefix = "layer" + std::to_string(l + 1) + ".";
    for (const auto& n : layer.kernel.param_names()) lay.names.push_back(prefix + n);
    at += s.kernel_n;
    s.via_net = layer.net.has_value();
    s.value_at = at;
    if (layer.net) {
      s.value_n = layer.net->n_weights();
      for (int k = 0; k < s.value_n; ++k) lay.names.push_back(prefix + "w" + std::to_string(k));
    } else {
      s.value_n = layer.hyperdata.size();
      for (int k = 0; k < s.value_n; ++k) lay.names.push_back(prefix + "u" + std::to_string(k));
    }
    at += s.value_n;
    s.z_at = at;
    if (with_z) {
      const int M = layer.hyperdata.size();
      const int d = static_cast<int>(layer.hyperdata.Z.cols());
      s.z_n = M * d;
      for (int m = 0; m < M; ++m)
        for (int j = 0; j < d; ++j)
          lay.names.push_back(prefix + "z" + std::to_string(m) +
                              (d > 1 ? "_" + std::to_string(j) : ""));
      at += s.z_n;
    }
    lay.inner.push_back(s);
  }
  lay.exposed_at = at;
  lay.exposed_n = stack.exposed.n_params();
  for (const auto& n : stack.exposed.param_names()) lay.names.push_back("exposed." + n);
  at += lay.exposed_n;
  lay.noise_at = at;
  lay.names.push_back("log_noise_sigma");
  lay.total = at + 1;
  return lay;
}

Eigen::VectorXd ParamLayout::pack(const LayerStack& stack) const {
  if (!(stack.noise_var > 0.0))
    throw std::invalid_argument("noise variance must be positive to pack parameters");
  Eigen::VectorXd theta(total);
  for (std::size_t l = 0; l < inner.size(); ++l) {
    const auto& s = inner[l];
    const auto& layer = stack.inner[l];
    theta.segment(s.kernel_at, s.kernel_n) = layer.kernel.log_params;
    if (s.via_net)
      theta.segment(s.value_at, s.value_n) = layer.net->weights();
    else if (s.value_n > 0)
      theta.segment(s.value_at, s.value_n) = layer.hyperdata.u;
    if (with_z && s.z_n > 0) {
      const auto& Z = layer.hyperdata.Z;
      for (int m = 0, at = s.z_at; m < Z.rows(); ++m)
        for (int j = 0; j < Z.cols(); ++j) theta[at++] = Z(m, j);
    }
  }
  theta.segment(exposed_at, exposed_n) = stack.exposed.log_params;
  theta[noise_at] = 0.5 * std::log(stack.noise_var);
  return theta;
}

LayerStack ParamLayout::unpack(const Eigen::Ref<const Eigen::VectorXd>& theta,
                               const LayerStack& tmpl) const {
  if (theta.size() != total) throw std::invalid_argument("parameter vector size mismatch");
  LayerStack stack = tmpl;
  for (std::size_t l = 0; l < inner.size(); ++l) {
    const auto& s = inner[l];
    auto& layer = stack.inner[l];
    layer.kernel.log_params = theta.segment(s.kernel_at, s.kernel_n);
    if (with_z && s.z_n > 0) {
      auto& Z = layer.hyperdata.Z;
      for (int m = 0, at = s.z_at; m < Z.rows(); ++m)
        for (int j = 0; j < Z.cols(); ++j) Z(m, j) = theta[at++];
    }
    if (s.via_net) {
      layer.net->set_weights(theta.segment(s.value_at, s.value_n));
      layer.refresh_u();
    } else if (s.value_n > 0) {
      layer.hyperdata.u = theta.segment(s.value_at, s.value_n);
    }
  }
  stack.exposed.log_params = theta.segment(exposed_at, exposed_n);
  stack.noise_var = std::exp(2.0 * theta[noise_at]);
  return stack;
}

// ---------------------------------------------------------------------------

StackGrads effective_kernel_grads(const LayerStack& stack,
                                  const Eigen::Ref<const Eigen::MatrixXd>& X, bool with_z) {
  StackGrads out;
  out.layout = ParamLayout::of(stack, with_z);
  out.dK.resize(out.layout.total);
  const int N = static_cast<int>(X.rows());

  if (stack.depth() == 1) {
    out.K = gram(stack.exposed, X);
    for (int p = 0; p < out.layout.exposed_n; ++p)
      out.dK[out.layout.exposed_at + p] = kernel_param_grad(stack.exposed, X, p);
  } else {
    StackForward fwd;
    fwd.build(stack, X, /*need_chain=*/true);
    out.K = fwd.exposed.Kv;

    // Layer 1 parameters.
    {
      const auto& slice = out.layout.inner[0];
      const auto& l1 = fwd.layer1;
      Eigen::VectorXd dm;
      Eigen::MatrixXd dC;
      for (int p = 0; p < slice.kernel_n; ++p) {
        l1.kernel_param(p, dm, dC);
        out.dK[slice.kernel_at + p] = fwd.push_from_layer1(dm, dC);
      }
      if (slice.value_n > 0) {
        const Eigen::MatrixXd mean_jac = l1.mean_u_jacobian();  // N x M
        const Eigen::MatrixXd zeroC = Eigen::MatrixXd::Zero(N, N);
        if (slice.via_net) {
          const Eigen::MatrixXd J =
              stack.inner[0].net->weight_jacobian(stack.inner[0].hyperdata.Z);
          for (int w = 0; w < slice.value_n; ++w)
            out.dK[slice.value_at + w] = fwd.push_from_layer1(mean_jac * J.col(w), zeroC);
        } else {
          for (int m = 0; m < slice.value_n; ++m)
            out.dK[slice.value_at + m] = fwd.push_from_layer1(mean_jac.col(m), zeroC);
        }
      }
      if (with_z && slice.z_n > 0) {
        const int d = static_cast<int>(stack.inner[0].hyperdata.Z.cols());
        for (int m = 0, at = slice.z_at; m < stack.inner[0].hyperdata.size(); ++m) {
          for (int j = 0; j < d; ++j, ++at) {
            l1.z_param(m, j, dm, dC);
            out.dK[at] = fwd.push_from_layer1(dm, dC);
          }
        }
      }
    }

    // Deeper inner layers.
    for (std::size_t l = 1; l < stack.inner.size(); ++l) {
      const auto& slice = out.layout.inner[l];
      const auto& lay = fwd.deeper[l - 1];
      Eigen::VectorXd dm;
      Eigen::MatrixXd dC;
      Eigen::MatrixXd dKzz;
      std::array<Eigen::MatrixXd, 3> dKa, dPhi;
      Eigen::VectorXd du = Eigen::VectorXd::Zero(lay.M);

      lay.param_tables_log_sigma(dKzz, dKa, dPhi);
      lay.own_param(dKzz, dKa, dPhi, du, dm, dC);
      out.dK[slice.kernel_at] = fwd.push_from(l, dm, dC);

      lay.param_tables_log_ell(dKzz, dKa, dPhi);
      lay.own_param(dKzz, dKa, dPhi, du, dm, dC);
      out.dK[slice.kernel_at + 1] = fwd.push_from(l, dm, dC);

      if (slice.value_n > 0) {
        // Only the conditional mean depends on u: dmu_a = G_a du.
        auto push_u_direction = [&](const Eigen::VectorXd& duv, int slot) {
          const Eigen::VectorXd dmu0 = lay.G[0] * duv;
          const Eigen::VectorXd dmu1 = lay.G[1] * duv;
          Eigen::MatrixXd d = (lay.Cin.array() *
                               ((dmu1 * lay.mu1.transpose() + lay.mu1 * dmu1.transpose()).array()))
                                  .matrix();
          out.dK[slot] = fwd.push_from(l, dmu0, lay.clip.chain(d));
        };
        if (slice.via_net) {
          const Eigen::MatrixXd J =
              stack.inner[l].net->weight_jacobian(stack.inner[l].hyperdata.Z);
          for (int w = 0; w < slice.value_n; ++w)
            push_u_direction(J.col(w), slice.value_at + w);
        } else {
          for (int m = 0; m < slice.value_n; ++m)
            push_u_direction(Eigen::VectorXd::Unit(lay.M, m), slice.value_at + m);
        }
      }
      if (with_z && slice.z_n > 0) {
        for (int m = 0; m < slice.z_n; ++m) {
          lay.param_tables_z(m, dKzz, dKa, dPhi, du);
          lay.own_param(dKzz, dKa, dPhi, du, dm, dC);
          out.dK[slice.z_at + m] = fwd.push_from(l, dm, dC);
        }
      }
    }

    // Exposed layer.
    out.dK[out.layout.exposed_at] = fwd.exposed.own_log_sigma();
    out.dK[out.layout.exposed_at + 1] = fwd.exposed.own_log_ell();
  }

  out.dK[out.layout.noise_at] =
      (2.0 * stack.noise_var) * Eigen::MatrixXd::Identity(N, N);
  return out;
}

}  // namespace cdgp
