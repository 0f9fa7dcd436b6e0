#pragma once

/**
 * \file regression.hpp
 * \brief Closed-form linear building blocks: fixed-effects OLS via the
 *        within transform, plain OLS, 2SLS, and cluster-robust sandwich
 *        covariances.
 *
 * All solves go through a symmetric (LDLT) factorization with a relative
 * rank tolerance of 1e-10; singular designs throw with the offending column
 * indices rather than silently pseudo-inverting, since a rank-reduced fit
 * would corrupt the GMM Jacobians downstream.
 */

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace vagmm {

/**
 * Solve A x = b for symmetric positive semi-definite A, failing loudly.
 *
 * `label` names the system in error messages. Columns whose LDLT pivot falls
 * below 1e-10 times the largest pivot are reported as collinear.
 */
Eigen::MatrixXd sym_solve(const Eigen::MatrixXd& A, const Eigen::MatrixXd& b,
                          const std::string& label);

/** Inverse through the same guarded factorization. */
Eigen::MatrixXd sym_inverse(const Eigen::MatrixXd& A, const std::string& label);

/**
 * A fitted linear model.
 *
 * For fixed-effects fits, `design` holds the within-group demeaned
 * covariates and `residuals` are on the un-demeaned scale y - X beta (the
 * group effect is deliberately NOT removed: downstream the score residual
 * must keep the teacher effect). For plain OLS fits `design` is X itself.
 */
struct FeFit {
  Eigen::VectorXd beta;       ///< K
  std::vector<double> residuals;
  Eigen::MatrixXd xtx_inv;    ///< (design' design)^-1
  Eigen::MatrixXd design;     ///< n x K matrix entering the normal equations
  std::vector<std::int32_t> group;  ///< empty for plain OLS
};

/**
 * Fixed-effects OLS: beta = (Xdd' Xdd)^-1 Xdd' ydd with group demeaning.
 *
 * Requires every group to have >= 2 observations. Residuals are returned as
 * y - X beta (see FeFit). K = 0 is allowed and returns residuals = y.
 */
FeFit ols_fe(const std::vector<double>& y, const Eigen::MatrixXd& X,
             const std::vector<std::int32_t>& group);

/** Plain OLS, no intercept unless a constant column is supplied. */
FeFit ols(const std::vector<double>& y, const Eigen::MatrixXd& X);

/**
 * Cluster-robust sandwich covariance of a fit:
 *   (X'X)^-1 (sum_c X_c' u_c u_c' X_c) (X'X)^-1.
 *
 * With one observation per cluster this is the HC0 estimator. For FE fits
 * the cluster partition must be a union of demeaning groups (scores within
 * a group then sum exactly as they would with within-group residuals).
 * No degrees-of-freedom correction by default; `df_correct` applies the
 * C/(C-1) cluster factor for comparison runs.
 */
Eigen::MatrixXd cluster_sandwich(const FeFit& fit,
                                 const std::vector<std::int32_t>& cluster,
                                 bool df_correct = false);

/** Two-stage least squares output. */
struct TslsFit {
  Eigen::VectorXd coef;             ///< [endog coef, exog coefs]
  Eigen::VectorXd first_stage_coef; ///< projection of endog on [Z, exog]
  Eigen::MatrixXd cov_2sls;         ///< clustered 2SLS sandwich
  std::vector<double> residuals;    ///< y - [endog, exog] coef
};

/**
 * 2SLS with a single endogenous regressor.
 *
 * First stage projects `endog` on [instruments, exog]; second stage
 * regresses y on [fitted endog, exog]. The covariance is the standard
 * clustered 2SLS sandwich using residuals from the ORIGINAL (not fitted)
 * endogenous variable.
 */
TslsFit tsls(const std::vector<double>& y, const std::vector<double>& endog,
             const Eigen::MatrixXd& instruments, const Eigen::MatrixXd& exog,
             const std::vector<std::int32_t>& cluster);

}  // namespace vagmm
