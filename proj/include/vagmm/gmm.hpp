#pragma once

/**
 * \file gmm.hpp
 * \brief Generic stacked-moment GMM machinery: evaluation, Jacobians
 *        (analytic or finite-difference), minimization, sandwich
 *        covariance, two-step optimal weighting, and the Hansen J test.
 *
 * A MomentSystem is a set of J cluster-level moment functions
 * g(z_j, theta) of common dimension M over P parameters, clustered at the
 * teacher level (clusters are i.i.d.). Systems are built by the
 * model-specific code (longrun.hpp); this engine never looks inside z_j.
 */

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace vagmm {

/** Named parameter block in a MomentSystem layout. */
struct ParamBlock {
  std::string name;
  int dim = 0;
};

/**
 * Stacked cluster-level moment system.
 *
 * `moment_fn(j, theta, out)` writes g(z_j, theta) into `out` (size M).
 * `jacobian_fn` is optional; when absent the engine falls back to central
 * finite differences with step h_k = 1e-6 * max(1, |theta_k|).
 * `closed_form` optionally produces the sequential closed-form solution of
 * an exactly identified system (the paper-specific builders install it).
 */
struct MomentSystem {
  std::vector<ParamBlock> layout;
  int n_moments = 0;   ///< M
  int n_clusters = 0;  ///< J
  std::function<void(int, const Eigen::VectorXd&, Eigen::VectorXd&)> moment_fn;
  std::function<void(int, const Eigen::VectorXd&, Eigen::MatrixXd&)> jacobian_fn;
  std::function<Eigen::VectorXd()> closed_form;
  std::function<Eigen::VectorXd()> initial_guess;  ///< start for gmm_minimize

  int n_params() const {
    int p = 0;
    for (const auto& b : layout) p += b.dim;
    return p;
  }
  /** Offset of a named block inside the parameter vector; -1 if absent. */
  int block_offset(const std::string& name) const;
  bool exactly_identified() const { return n_moments == n_params(); }
};

/** Mean moments plus the plug-in S and G matrices at a parameter value. */
struct MomentEval {
  Eigen::VectorXd g_bar;  ///< (1/J) sum_j g_j
  Eigen::MatrixXd S_hat;  ///< (1/J) sum_j g_j g_j'   (uncentered)
  Eigen::MatrixXd G_hat;  ///< (1/J) sum_j dg_j/dtheta'
};

/** A completed GMM fit. */
struct GmmFit {
  Eigen::VectorXd theta_hat;
  Eigen::MatrixXd W;          ///< weighting matrix used
  Eigen::MatrixXd G_hat;      ///< M x P
  Eigen::MatrixXd S_hat;      ///< M x M
  Eigen::MatrixXd omega_hat;  ///< P x P sandwich, already divided by J
  std::optional<double> j_stat;  ///< present iff M > P and W was optimal
  int n_clusters = 0;
  Eigen::MatrixXd per_cluster_moments;  ///< J x M, at theta_hat
  int iterations = 0;
};

/**
 * Evaluate mean moments, S-hat, and G-hat at theta.
 *
 * `center_s` subtracts g-bar g-bar' from S-hat (only meaningful for
 * overidentified systems; the default matches the uncentered population
 * object E[g g']). Non-finite moment values raise an error naming the
 * cluster. `want_jacobian = false` skips G entirely.
 */
MomentEval evaluate(const MomentSystem& system, const Eigen::VectorXd& theta,
                    bool center_s = false, bool want_jacobian = true);

/**
 * Solve an exactly identified system through its sequential closed form
 * and verify that the mean moments vanish (1e-8 tolerance on a scale-free
 * norm). Fills the sandwich covariance G^-1 S G^-1' / J.
 */
GmmFit solve_exactly_identified(const MomentSystem& system);

/** Options for the iterative minimizer. */
struct GmmOptions {
  int max_iterations = 200;
  double step_tol = 1e-10;  ///< relative parameter step convergence
  bool center_s = false;
  std::optional<Eigen::VectorXd> start;
};

/**
 * Minimize g-bar(theta)' W g-bar(theta) by damped Gauss-Newton on the GMM
 * first-order conditions. Starts from options.start, else the system's
 * initial_guess, else zeros. Non-convergence throws with the objective
 * trajectory in the message.
 */
GmmFit gmm_minimize(const MomentSystem& system, const Eigen::MatrixXd& W,
                    const GmmOptions& options = {});

/**
 * Sandwich covariance (G'WG)^-1 G'W S W G (G'WG)^-1 / J, reducing to
 * G^-1 S G^-1' / J when M = P.
 */
Eigen::MatrixXd sandwich_covariance(const GmmFit& fit);

/**
 * Two-step optimal GMM: first step W = I, then W* = S-hat^-1 at the
 * first-step estimates; covariance (G' W* G)^-1 / J. Stores the J statistic
 * J * g-bar' W* g-bar on the fit.
 */
GmmFit optimal_gmm(const MomentSystem& system, const GmmOptions& options = {});

/** Hansen J test of overidentifying restrictions. */
struct JTest {
  double statistic = 0.0;
  int dof = 0;
  double p_value = 1.0;
};

/** J test from an optimal_gmm fit; error when the system is exactly identified. */
JTest j_test(const GmmFit& fit, const MomentSystem& system);

}  // namespace vagmm
