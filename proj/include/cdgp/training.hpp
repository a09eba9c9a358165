#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "cdgp/effective.hpp"

namespace cdgp {

struct TrainConfig {
  int max_iters = 2000;
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int max_halvings = 20;     // per-iteration step halvings before giving up
  double rel_tol = 1e-7;     // |delta logML| / max(1, |logML|) threshold
  int tol_streak = 10;       // consecutive sub-threshold iterations to stop
  int restarts = 1;          // independent optimization runs (restart 0 = template)
  std::uint64_t seed = 0;
  bool optimize_z = false;   // include hyperdata inputs in the parameter vector
  double restart_param_std = 0.5;   // log-hyperparameter perturbation, restarts >= 1
  double restart_weight_std = 0.5;  // net-weight / free-u redraw std, restarts >= 1
  std::vector<int> frozen;   // parameter indices held fixed (by layout index)
};

// Negative log marginal likelihood of y under the stack's effective kernel
// plus noise, with its analytic gradient in the stack's parameter layout.
// A Cholesky failure (even after the jitter ladder) yields +inf and a zero
// gradient rather than throwing.
struct Objective {
  double value = 0.0;               // -logML
  Eigen::VectorXd grad;             // d(-logML)/d(theta)
  double jitter = 0.0;              // jitter used by the factorization
  bool ok = true;                   // false when the factorization failed
};

Objective objective(const LayerStack& stack, const Eigen::Ref<const Eigen::MatrixXd>& X,
                    const Eigen::Ref<const Eigen::VectorXd>& y, bool with_z = false);

struct FitResult {
  LayerStack stack;                   // best-restart parameters
  double logml = 0.0;                 // best logML reached
  int best_restart = -1;
  int iters = 0;                      // accepted iterations of the best run
  long jitter_events = 0;             // factorizations that needed jitter > 0
  std::vector<double> restart_logml;  // final logML per restart (-inf on failure)
  std::vector<std::string> trace;     // one summary line per restart
};

// Maximizes logML with Adam on the flat parameter vector.  Restart 0 starts
// from the template exactly; restarts >= 1 perturb the log-hyperparameters
// and redraw net weights (or free hyperdata outputs) deterministically from
// the config seed.  Each iteration updates the Adam moments with the raw
// gradient, then halves the applied step until the objective improves; an
// iteration with no improving step leaves the parameters in place.  Stops
// after tol_streak consecutive iterations with relative objective change
// below rel_tol, or at max_iters.
FitResult fit(const LayerStack& tmpl, const Eigen::Ref<const Eigen::MatrixXd>& X,
              const Eigen::Ref<const Eigen::VectorXd>& y, const TrainConfig& cfg);

struct GradCheckEntry {
  std::string name;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::vector<GradCheckEntry> entries;
  bool pass(double tol) const { return max_rel_err <= tol; }
};

// Central finite-difference check of the -logML gradient, parameter by
// parameter; rel_err = |a - n| / max(max(|a|, |n|), 1e-6).  corrupt_index
// (fault-injection hook) perturbs one analytic entry before comparison so a
// broken gradient is guaranteed to be flagged.
GradCheckResult grad_check(const LayerStack& stack, const Eigen::Ref<const Eigen::MatrixXd>& X,
                           const Eigen::Ref<const Eigen::VectorXd>& y, double step = 1e-5,
                           bool with_z = false, int corrupt_index = -1);

}  // namespace cdgp
