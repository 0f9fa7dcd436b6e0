#pragma once

/**
 * \file va.hpp
 * \brief The four-step value-added pipeline: residualize scores and
 *        outcomes with teacher fixed effects, aggregate to class means,
 *        fit the leave-year-out best linear predictor (BLP), build the
 *        shrunk VA measure, and run the multi-step OLS regression of
 *        residualized outcomes on shrunk VA.
 */

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vagmm/panel.hpp"

namespace vagmm {

/** How the BLP coefficients are parameterised. */
enum class PhiMode {
  stationary,   ///< one coefficient per distinct year gap |s-t| (default)
  unrestricted  ///< one coefficient per leave-out position (balanced only)
};

/**
 * Fitted BLP coefficients.
 *
 * Stationary mode: `gaps[g]` lists the distinct positive year gaps present
 * in the data and `coef[g]` the matching phi-hat. When several source years
 * share the same gap to the target year, the regressor is their SUM (this
 * preserves the shrunk-VA formula term by term; averaging would rescale
 * phi).
 *
 * Unrestricted mode: `coef[k]` attaches to the k-th leave-out position in
 * ascending-year order, pooled across target years; requires a balanced
 * panel. This is the projection E(R^(-t)'R^(-t))^-1 E(R^(-t)'R), i.e. the
 * first stage of the 2SLS estimator.
 */
struct PhiSpec {
  PhiMode mode = PhiMode::stationary;
  std::vector<std::int32_t> gaps;  ///< stationary only, ascending
  Eigen::VectorXd coef;

  /** Coefficient for gap g (stationary); throws if g is not covered. */
  double coef_for_gap(std::int32_t g) const;
};

/** Output of the residualization + BLP stages. */
struct VaEstimates {
  Eigen::VectorXd beta_hat;    ///< score equation covariate coefficients
  Eigen::VectorXd beta_y_hat;  ///< outcome equation covariate coefficients
  bool outcome_residualized = true;
  PhiSpec phi;
  std::vector<double> mu_star;  ///< shrunk VA per ClassPanel cell
  ClassPanel prelim;            ///< class means of the residualized data
};

/** Multi-step OLS estimate of the long-run effect kappa. */
struct KappaFit {
  double kappa_hat = 0.0;
  double naive_se = 0.0;  ///< cluster-robust (teacher), uncorrected
  std::optional<double> corrected_se;  ///< filled by corrected_sigma2
  std::int64_t n_teacheryears = 0;     ///< cells entering the regression
};

/**
 * Step 1: beta-hat from student-level OLS with teacher fixed effects;
 * residuals R-hat_it = Robs_it - X_it' beta-hat (teacher effect retained).
 */
std::pair<Eigen::VectorXd, std::vector<double>> residualize_scores(
    const PanelData& panel);

/**
 * Step 1': same for the long-run outcome, using the outcome-observed
 * subsample; residual is NaN where the outcome is absent. With
 * `residualize = false` the outcome passes through untouched (whether the
 * outcome needs residualizing is context-dependent).
 */
std::pair<Eigen::VectorXd, std::vector<double>> residualize_outcome(
    const PanelData& panel, bool residualize = true);

/**
 * Step 3: fit the BLP of R-bar_jt on other-year preliminary VA, pooled
 * across teacher-years. Stationary mode groups regressors by year gap;
 * unrestricted mode uses the positional leave-out row and requires a
 * balanced panel.
 */
PhiSpec fit_blp(const ClassPanel& cells, PhiMode mode = PhiMode::stationary);

/**
 * Shrunk VA: mu-hat_jt = sum_{s != t} phi_|s-t| R-bar_js (stationary) or
 * the positional equivalent. Errors if a needed gap has no coefficient.
 */
std::vector<double> shrunk_va(const ClassPanel& cells, const PhiSpec& phi);

/**
 * Step 4: kappa-hat = sum(Y-bar_jt mu-hat_jt) / sum(mu-hat_jt^2) over
 * outcome-observed cells, no intercept; naive SE clustered by teacher.
 * `weight_by_class_size` switches cell weights from 1 to n_jt.
 */
KappaFit multistep_ols_kappa(const ClassPanel& cells,
                             const std::vector<double>& mu_hat,
                             bool weight_by_class_size = false);

/** Appendix-style shrinkage factor Var(mu) / (Var(mu) + Var(eps-bar)). */
double analytic_shrinkage_factor(double var_mu, double var_epsbar);

/** Convenience: run steps 1-3 end to end. */
VaEstimates fit_va_pipeline(const PanelData& panel,
                            PhiMode mode = PhiMode::stationary,
                            bool residualize_outcome_flag = true);

}  // namespace vagmm
