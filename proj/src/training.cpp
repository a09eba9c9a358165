#include "cdgp/training.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "cdgp/gp.hpp"

namespace cdgp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr std::uint64_t kRestartSalt = 0x9e3779b97f4a7c15ull;

Objective objective_at(const ParamLayout& layout, const Eigen::Ref<const Eigen::VectorXd>& theta,
                       const LayerStack& tmpl, const Eigen::Ref<const Eigen::MatrixXd>& X,
                       const Eigen::Ref<const Eigen::VectorXd>& y, bool with_z) {
  const LayerStack stack = layout.unpack(theta, tmpl);
  Objective obj;
  obj.grad = Eigen::VectorXd::Zero(layout.total);
  try {
    const StackGrads sg = effective_kernel_grads(stack, X, with_z);
    const int N = static_cast<int>(X.rows());
    Eigen::MatrixXd Ky = sg.K;
    Ky.diagonal().array() += stack.noise_var;
    const CholFactor chol = chol_jitter(Ky);
    obj.jitter = chol.jitter;
    const Eigen::VectorXd alpha = chol.solve(y);
    const double logml = -0.5 * y.dot(alpha) - 0.5 * chol.log_det() -
                         0.5 * N * std::log(2.0 * std::numbers::pi);
    obj.value = -logml;
    // d logML / d p = 0.5 tr((alpha alpha^T - K^-1) dK_p)
    const Eigen::MatrixXd Kinv = chol.solve_mat(Eigen::MatrixXd::Identity(N, N));
    const Eigen::MatrixXd W = alpha * alpha.transpose() - Kinv;
    for (int p = 0; p < layout.total; ++p)
      obj.grad[p] = -0.5 * (W.array() * sg.dK[p].array()).sum();
  } catch (const std::runtime_error&) {
    obj.value = kInf;
    obj.grad.setZero();
    obj.ok = false;
  }
  return obj;
}

// logML only (no gradient): used by the step-halving line search.
double logml_at(const ParamLayout& layout, const Eigen::Ref<const Eigen::VectorXd>& theta,
                const LayerStack& tmpl, const Eigen::Ref<const Eigen::MatrixXd>& X,
                const Eigen::Ref<const Eigen::VectorXd>& y, double* jitter_out) {
  const LayerStack stack = layout.unpack(theta, tmpl);
  try {
    const StackEval ev = propagate_stack(stack, X);
    Eigen::MatrixXd Ky = ev.K;
    Ky.diagonal().array() += stack.noise_var;
    double jit = 0.0;
    const double lm = log_marginal_likelihood(Ky, y, 0.0, &jit);
    if (jitter_out) *jitter_out = jit;
    return lm;
  } catch (const std::runtime_error&) {
    if (jitter_out) *jitter_out = 0.0;
    return -kInf;
  }
}

// Draw the restart-r starting point from the template: perturb every kernel
// log-parameter and the noise, and redraw net weights / free hyperdata
// outputs.  Restart 0 is the template exactly.
LayerStack restart_stack(const LayerStack& tmpl, int r, const TrainConfig& cfg) {
  if (r == 0) return tmpl;
  LayerStack st = tmpl;
  std::mt19937_64 rng(cfg.seed + kRestartSalt * static_cast<std::uint64_t>(r));
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& lay : st.inner) {
    for (int i = 0; i < lay.kernel.log_params.size(); ++i)
      lay.kernel.log_params[i] += cfg.restart_param_std * nd(rng);
    if (lay.net) {
      Eigen::VectorXd w(lay.net->n_weights());
      for (int i = 0; i < w.size(); ++i) w[i] = cfg.restart_weight_std * nd(rng);
      lay.net->set_weights(w);
      lay.refresh_u();
    } else if (lay.hyperdata.size() > 0) {
      for (int i = 0; i < lay.hyperdata.u.size(); ++i)
        lay.hyperdata.u[i] = cfg.restart_weight_std * nd(rng);
    }
  }
  for (int i = 0; i < st.exposed.log_params.size(); ++i)
    st.exposed.log_params[i] += cfg.restart_param_std * nd(rng);
  st.noise_var *= std::exp(2.0 * cfg.restart_param_std * nd(rng));
  return st;
}

struct RunResult {
  Eigen::VectorXd theta;
  double neg_logml = kInf;
  int iters = 0;
  long jitter_events = 0;
  bool failed = false;
};

RunResult run_adam(const ParamLayout& layout, const LayerStack& tmpl,
                   const Eigen::Ref<const Eigen::MatrixXd>& X,
                   const Eigen::Ref<const Eigen::VectorXd>& y, const Eigen::VectorXd& theta0,
                   const TrainConfig& cfg) {
  RunResult run;
  run.theta = theta0;
  std::vector<bool> frozen(layout.total, false);
  for (int p : cfg.frozen)
    if (p >= 0 && p < layout.total) frozen[p] = true;

  Objective obj = objective_at(layout, run.theta, tmpl, X, y, cfg.optimize_z);
  if (obj.jitter > 0.0) ++run.jitter_events;
  if (!obj.ok) {
    run.failed = true;
    return run;
  }
  run.neg_logml = obj.value;

  Eigen::VectorXd m = Eigen::VectorXd::Zero(layout.total);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(layout.total);
  int streak = 0;
  for (int it = 1; it <= cfg.max_iters; ++it) {
    Eigen::VectorXd g = obj.grad;
    for (int p = 0; p < layout.total; ++p)
      if (frozen[p]) g[p] = 0.0;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(cfg.beta1, it);
    const double bc2 = 1.0 - std::pow(cfg.beta2, it);
    const Eigen::VectorXd step =
        cfg.lr * (m / bc1).array() /
        ((v / bc2).array().sqrt() + cfg.adam_eps);

    // Halve the applied step until the objective improves.
    double scale = 1.0;
    bool accepted = false;
    Eigen::VectorXd cand;
    double cand_value = kInf;
    for (int h = 0; h <= cfg.max_halvings; ++h) {
      cand = run.theta - scale * step;
      double jit = 0.0;
      cand_value = -logml_at(layout, cand, tmpl, X, y, &jit);
      if (jit > 0.0) ++run.jitter_events;
      if (cand_value < run.neg_logml) {
        accepted = true;
        break;
      }
      scale *= 0.5;
    }

    double delta = 0.0;
    if (accepted) {
      delta = run.neg_logml - cand_value;
      run.theta = cand;
      run.neg_logml = cand_value;
      ++run.iters;
      obj = objective_at(layout, run.theta, tmpl, X, y, cfg.optimize_z);
      if (obj.jitter > 0.0) ++run.jitter_events;
      if (!obj.ok) break;  // keep the last good parameters
    }
    const double rel = delta / std::max(1.0, std::abs(run.neg_logml));
    streak = rel < cfg.rel_tol ? streak + 1 : 0;
    if (streak >= cfg.tol_streak) break;
  }
  return run;
}

}  // namespace

Objective objective(const LayerStack& stack, const Eigen::Ref<const Eigen::MatrixXd>& X,
                    const Eigen::Ref<const Eigen::VectorXd>& y, bool with_z) {
  const ParamLayout layout = ParamLayout::of(stack, with_z);
  return objective_at(layout, layout.pack(stack), stack, X, y, with_z);
}

FitResult fit(const LayerStack& tmpl, const Eigen::Ref<const Eigen::MatrixXd>& X,
              const Eigen::Ref<const Eigen::VectorXd>& y, const TrainConfig& cfg) {
  if (cfg.restarts < 1) throw std::invalid_argument("at least one restart is required");
  if (X.rows() != y.size()) throw std::invalid_argument("X/y size mismatch");
  const ParamLayout layout = ParamLayout::of(tmpl, cfg.optimize_z);

  FitResult out;
  out.logml = -kInf;
  for (int r = 0; r < cfg.restarts; ++r) {
    const LayerStack start = restart_stack(tmpl, r, cfg);
    const Eigen::VectorXd theta0 = layout.pack(start);
    const RunResult run = run_adam(layout, tmpl, X, y, theta0, cfg);
    out.jitter_events += run.jitter_events;
    std::ostringstream line;
    if (run.failed) {
      out.restart_logml.push_back(-kInf);
      line << "restart " << r << ": failed (covariance not positive definite at start)";
    } else {
      const double lm = -run.neg_logml;
      out.restart_logml.push_back(lm);
      line << "restart " << r << ": logML " << lm << " after " << run.iters
           << " accepted iterations";
      if (lm > out.logml) {
        out.logml = lm;
        out.best_restart = r;
        out.iters = run.iters;
        out.stack = layout.unpack(run.theta, tmpl);
      }
    }
    out.trace.push_back(line.str());
  }
  if (out.best_restart < 0) throw std::runtime_error("every restart failed to factorize");
  return out;
}

GradCheckResult grad_check(const LayerStack& stack, const Eigen::Ref<const Eigen::MatrixXd>& X,
                           const Eigen::Ref<const Eigen::VectorXd>& y, double step, bool with_z,
                           int corrupt_index) {
  const ParamLayout layout = ParamLayout::of(stack, with_z);
  const Eigen::VectorXd theta = layout.pack(stack);
  Objective obj = objective_at(layout, theta, stack, X, y, with_z);
  if (!obj.ok) throw std::runtime_error("gradient check requires a factorizable start");
  if (corrupt_index >= 0 && corrupt_index < layout.total) {
    double& a = obj.grad[corrupt_index];
    a = 1.5 * a + 0.05 * std::max(1.0, std::abs(a));
  }

  GradCheckResult res;
  for (int p = 0; p < layout.total; ++p) {
    Eigen::VectorXd tp = theta, tm = theta;
    tp[p] += step;
    tm[p] -= step;
    const double fp = -logml_at(layout, tp, stack, X, y, nullptr);
    const double fm = -logml_at(layout, tm, stack, X, y, nullptr);
    const double numeric = (fp - fm) / (2.0 * step);
    const double analytic = obj.grad[p];
    const double rel = std::abs(analytic - numeric) /
                       std::max(std::max(std::abs(analytic), std::abs(numeric)), 1e-6);
    res.entries.push_back({layout.names[p], analytic, numeric, rel});
    res.max_rel_err = std::max(res.max_rel_err, rel);
  }
  return res;
}

}  // namespace cdgp
