#pragma once

/**
 * \file longrun.hpp
 * \brief Model-specific inference for long-run effects of estimated VA:
 *        the exactly identified and overidentified moment systems, the
 *        corrected variance of the multi-step OLS estimator built from its
 *        explicit gradient blocks, random-assignment 2SLS, the 3SLS (GLS)
 *        estimator, the VA-as-outcome regression with corrected covariance,
 *        the D'X orthogonality pretest, and the naive-vs-corrected variance
 *        decomposition.
 *
 * Moment stacking conventions (clustered by teacher):
 *   m1 (K)  student-level within-teacher normal equations of the score
 *           regression: sum_it xdd_it (robs_it - x_it' beta);
 *   m2 (p)  class-level BLP normal equations: D_j(beta)'(Rt_j - D_j phi),
 *           where Rt_jt = Rbar_jt - xbar_jt' beta and D_j is the gap-grouped
 *           (stationary) or positional (unrestricted) leave-out design;
 *   m3 (K)  as m1 for the outcome equation (outcome-observed students);
 *   g  (1)  (D_j phi)'(Yt_j - kappa D_j phi) over outcome-observed cells.
 *
 * The corrected variance is computed twice by design: once from the
 * explicit gradient blocks below and once as the kappa-kappa element of the
 * generic full-system sandwich; the test suite fails if they diverge.
 */

#include <Eigen/Dense>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vagmm/gmm.hpp"
#include "vagmm/panel.hpp"
#include "vagmm/va.hpp"

namespace vagmm {

/**
 * Plug-in gradient blocks of the exactly identified system, averaged over
 * teachers. Signs follow the Jacobian of the moments (so G_kappa < 0
 * whenever the shrunk VA has positive variance, and M1, M2phi, M3 are
 * negative definite Gram averages). M1 = M3 when every student has an
 * outcome; with missing outcomes M3 averages over the outcome subsample.
 */
struct GradientBlocks {
  double G_kappa = 0.0;
  Eigen::RowVectorXd G_beta;   ///< 1 x K
  Eigen::RowVectorXd G_phi;    ///< 1 x p
  Eigen::RowVectorXd G_betaY;  ///< 1 x K
  Eigen::MatrixXd M1;          ///< K x K
  Eigen::MatrixXd M2phi;       ///< p x p
  Eigen::MatrixXd M2beta;      ///< p x K
  Eigen::MatrixXd M3;          ///< K x K
};

/** Corrected inference output for the multi-step OLS estimator. */
struct CorrectedKappa {
  double kappa_hat = 0.0;
  double sigma2_hat = 0.0;  ///< corrected asymptotic variance (per-teacher scale)
  double naive_s2 = 0.0;    ///< uncorrected counterpart implied by g alone
  double corrected_se = 0.0;  ///< sqrt(sigma2_hat / J)
  double naive_se = 0.0;      ///< sqrt(naive_s2 / J)
  std::vector<double> influence;  ///< per-teacher bracketed contributions
  std::vector<double> g_raw;      ///< per-teacher uncorrected moments g_j
  GradientBlocks blocks;
};

/** VA-as-outcome regression with Theorem-style corrected covariance. */
struct VaOutcomeFit {
  Eigen::VectorXd alpha_hat;   ///< K_D
  Eigen::MatrixXd v1_hat;      ///< corrected covariance of alpha-hat (/J)
  Eigen::MatrixXd naive_cov;   ///< clustered OLS covariance (/J)
  Eigen::MatrixXd dx_cross;    ///< sample E(D'X), K_D x K
  double dx_stat = 0.0;        ///< Wald statistic for vec E(D'X) = 0
  double dx_p = 1.0;
  int n_cells = 0;
};

/** D'X orthogonality pretest result. */
struct DxTest {
  double statistic = 0.0;
  int dof = 0;
  double p_value = 1.0;
  Eigen::MatrixXd cross_moments;  ///< sample E(D'X)
};

/** Appendix-style decomposition of corrected minus naive variance. */
struct VarianceGap {
  double sigma2_corrected = 0.0;
  double sigma2_naive = 0.0;
  double cov_term = 0.0;  ///< 2 cov(g, correction)
  double var_term = 0.0;  ///< var(correction), always >= 0
};

/**
 * Build the exactly identified long-run system (blocks beta, phi, beta_Y,
 * kappa; M = 2K + p + 1) on a panel, with analytic Jacobian and a
 * closed-form pipeline solver attached. K = 0 panels reduce to (phi, kappa).
 */
MomentSystem build_longrun_system(const PanelData& panel,
                                  PhiMode mode = PhiMode::stationary,
                                  bool residualize_outcome = true);

/**
 * Build the overidentified system (blocks beta, beta_Y, kappa;
 * M = 2K + (T-1), instruments = positional leave-out rows). Requires a
 * balanced panel with T >= 3.
 */
MomentSystem build_overid_system(const PanelData& panel,
                                 bool residualize_outcome = true);

/**
 * Corrected variance of the multi-step OLS estimator from the explicit
 * gradient blocks: sigma2 = G_kappa^-2 mean[(g + G_betaY psi3 + G_phi psi2
 * + G_beta psi1 - G_phi M2phi^-1 M2beta psi1)^2], SE = sqrt(sigma2 / J).
 */
CorrectedKappa corrected_sigma2(const PanelData& panel,
                                const VaEstimates& estimates,
                                const KappaFit& kappa);

/**
 * Random-assignment 2SLS (valid-SE regime): year-demeaned class means, the
 * year-t preliminary VA instrumented by the leave-out years (unrestricted
 * first stage, as any 2SLS routine would produce). Balanced panels only.
 * `demean_years` exists for equivalence tests; leave it on for inference.
 */
KappaFit fit_2sls_random_assignment(const PanelData& panel,
                                    bool demean_years = true);

/** Options for fit_3sls. */
struct ThreeSlsOptions {
  /** Override the estimated E[uu'] (testing hook; e.g. block-diagonal). */
  std::optional<Eigen::MatrixXd> omega_override;
};

/**
 * 3SLS under random assignment + homoskedasticity: (1) OLS-FE for the
 * covariate coefficients, (2) 2SLS for kappa, (3) estimate E[uu'] from the
 * stacked residuals u = (within-demeaned score resid, within-demeaned
 * outcome resid, outcome - kappa score), (4) GLS re-estimation of the full
 * system: GMM on the stacked instrument moments Q_j' u_j(theta) with
 * Q_j = diag(Xdd_j, Xdd_j, Z_j) (Z_j = leave-out residualized class means)
 * weighted by [mean_j Q_j' E[uu'] Q_j]^-1. Balanced panels with outcomes
 * in every cell; errors if the GLS weight is singular.
 */
GmmFit fit_3sls(const PanelData& panel, const ThreeSlsOptions& options = {});

/**
 * Regression of preliminary VA (or its leave-year-out average when
 * `leaveout`) on teacher-year variables D, with the corrected covariance
 * V1 = E(D'D)^-1 E(Gamma Gamma') E(D'D)^-1',
 * Gamma_j = D_j'(R_j - D_j alpha) - E(D'X) E(Xdd'Xdd)^-1 m1_j.
 */
VaOutcomeFit va_outcome_fit(const PanelData& panel,
                            const TeacherYearVars& dvars, bool leaveout);

/**
 * Joint moment system behind va_outcome_fit: blocks (beta K, alpha K_D),
 * moments stacked the same way. Exactly identified; closed form runs the
 * two-step fit. Useful for cross-checking the corrected covariance against
 * the generic sandwich.
 */
MomentSystem build_va_outcome_system(const PanelData& panel,
                                     const TeacherYearVars& dvars,
                                     bool leaveout);

/**
 * Wald test of vec E(D'X) = 0 from per-teacher cross moments with a
 * clustered covariance; the K_D = K = 1 case equals the squared t statistic
 * of the mean cross moment.
 */
DxTest dx_orthogonality_test(const PanelData& panel,
                             const TeacherYearVars& dvars);

/**
 * Decompose sigma2_corrected - sigma2_naive into 2 cov(g, correction) and
 * var(correction) >= 0; the two components sum to the gap exactly.
 */
VarianceGap variance_gap_diagnostic(const CorrectedKappa& fit);

}  // namespace vagmm
