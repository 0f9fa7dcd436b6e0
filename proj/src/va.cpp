#include "vagmm/va.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "vagmm/regression.hpp"

namespace vagmm {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

int gap_index(const std::vector<std::int32_t>& gaps, std::int32_t g) {
  const auto it = std::lower_bound(gaps.begin(), gaps.end(), g);
  if (it == gaps.end() || *it != g) return -1;
  return static_cast<int>(it - gaps.begin());
}

/** Gap-grouped leave-out design row for one cell (sums, not averages). */
Eigen::RowVectorXd stationary_row(const ClassPanel& cells,
                                  const std::vector<std::int32_t>& gaps,
                                  int j, int c) {
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(gaps.size());
  for (std::int32_t s = cells.cell_offset[j]; s < cells.cell_offset[j + 1];
       ++s) {
    if (s == c) continue;
    const int g = gap_index(gaps, std::abs(cells.year[s] - cells.year[c]));
    if (g < 0)
      fail("BLP design: year gap " +
           std::to_string(std::abs(cells.year[s] - cells.year[c])) +
           " has no coefficient");
    row[g] += cells.prelim_va[s];
  }
  return row;
}

}  // namespace

double PhiSpec::coef_for_gap(std::int32_t g) const {
  if (mode != PhiMode::stationary)
    fail("coef_for_gap: only meaningful for stationary phi");
  const int i = gap_index(gaps, g);
  if (i < 0) fail("coef_for_gap: gap " + std::to_string(g) + " not covered");
  return coef[i];
}

std::pair<Eigen::VectorXd, std::vector<double>> residualize_scores(
    const PanelData& panel) {
  const FeFit fit = ols_fe(panel.score, panel.X, panel.teacher);
  return {fit.beta, fit.residuals};
}

std::pair<Eigen::VectorXd, std::vector<double>> residualize_outcome(
    const PanelData& panel, bool residualize) {
  const std::int64_t n = panel.n_records();
  std::vector<double> resid(n, kNaN);

  if (!residualize || panel.K == 0) {
    for (std::int64_t r = 0; r < n; ++r)
      if (panel.row_has_outcome(r)) resid[r] = panel.outcome[r];
    return {Eigen::VectorXd(), resid};
  }

  std::vector<double> y_sub;
  std::vector<std::int32_t> group_sub;
  std::vector<std::int64_t> rows_sub;
  for (std::int64_t r = 0; r < n; ++r) {
    if (!panel.row_has_outcome(r)) continue;
    y_sub.push_back(panel.outcome[r]);
    group_sub.push_back(panel.teacher[r]);
    rows_sub.push_back(r);
  }
  if (y_sub.empty()) fail("residualize_outcome: no outcomes present");

  Eigen::MatrixXd x_sub(static_cast<Eigen::Index>(rows_sub.size()), panel.K);
  for (std::size_t i = 0; i < rows_sub.size(); ++i)
    x_sub.row(static_cast<Eigen::Index>(i)) = panel.X.row(rows_sub[i]);

  const FeFit fit = ols_fe(y_sub, x_sub, group_sub);
  for (std::size_t i = 0; i < rows_sub.size(); ++i)
    resid[rows_sub[i]] = fit.residuals[i];
  return {fit.beta, resid};
}

PhiSpec fit_blp(const ClassPanel& cells, PhiMode mode) {
  PhiSpec phi;
  phi.mode = mode;
  const int n = cells.n_cells();
  std::vector<double> target(cells.prelim_va.begin(), cells.prelim_va.end());

  if (mode == PhiMode::stationary) {
    phi.gaps = cells.gaps_present();
    if (phi.gaps.empty()) fail("fit_blp: no year gaps present");
    Eigen::MatrixXd design(n, phi.gaps.size());
    for (int j = 0; j < cells.n_teachers(); ++j)
      for (std::int32_t c = cells.cell_offset[j]; c < cells.cell_offset[j + 1];
           ++c)
        design.row(c) = stationary_row(cells, phi.gaps, j, c);
    phi.coef = ols(target, design).beta;
    return phi;
  }

  if (!cells.balanced())
    fail("fit_blp: unrestricted phi requires a balanced panel");
  const int T = cells.cells_of(0);
  Eigen::MatrixXd design(n, T - 1);
  for (int j = 0; j < cells.n_teachers(); ++j)
    for (std::int32_t c = cells.cell_offset[j]; c < cells.cell_offset[j + 1];
         ++c)
      design.row(c) = cells.leaveout_row(j, c).transpose();
  phi.coef = ols(target, design).beta;
  return phi;
}

std::vector<double> shrunk_va(const ClassPanel& cells, const PhiSpec& phi) {
  std::vector<double> mu(cells.n_cells());
  if (phi.mode == PhiMode::stationary) {
    for (int j = 0; j < cells.n_teachers(); ++j)
      for (std::int32_t c = cells.cell_offset[j]; c < cells.cell_offset[j + 1];
           ++c)
        mu[c] = stationary_row(cells, phi.gaps, j, c).dot(phi.coef);
    return mu;
  }
  if (!cells.balanced())
    fail("shrunk_va: unrestricted phi requires a balanced panel");
  for (int j = 0; j < cells.n_teachers(); ++j)
    for (std::int32_t c = cells.cell_offset[j]; c < cells.cell_offset[j + 1];
         ++c)
      mu[c] = cells.leaveout_row(j, c).dot(phi.coef);
  return mu;
}

KappaFit multistep_ols_kappa(const ClassPanel& cells,
                             const std::vector<double>& mu_hat,
                             bool weight_by_class_size) {
  if (mu_hat.size() != static_cast<std::size_t>(cells.n_cells()))
    fail("multistep_ols_kappa: mu_hat does not align with the cells");

  double num = 0.0, den = 0.0;
  std::int64_t used = 0;
  for (int c = 0; c < cells.n_cells(); ++c) {
    if (cells.n_y[c] == 0) continue;
    const double w = weight_by_class_size ? cells.n[c] : 1.0;
    num += w * mu_hat[c] * cells.outcome_resid[c];
    den += w * mu_hat[c] * mu_hat[c];
    ++used;
  }
  if (used == 0) fail("multistep_ols_kappa: no outcome-observed cells");
  if (den <= 0.0) fail("multistep_ols_kappa: shrunk VA has no variation");

  KappaFit fit;
  fit.kappa_hat = num / den;
  fit.n_teacheryears = used;

  double meat = 0.0;
  for (int j = 0; j < cells.n_teachers(); ++j) {
    double score = 0.0;
    for (std::int32_t c = cells.cell_offset[j]; c < cells.cell_offset[j + 1];
         ++c) {
      if (cells.n_y[c] == 0) continue;
      const double w = weight_by_class_size ? cells.n[c] : 1.0;
      score += w * mu_hat[c] *
               (cells.outcome_resid[c] - fit.kappa_hat * mu_hat[c]);
    }
    meat += score * score;
  }
  fit.naive_se = std::sqrt(meat) / den;
  return fit;
}

double analytic_shrinkage_factor(double var_mu, double var_epsbar) {
  if (var_mu < 0.0 || var_epsbar < 0.0 || var_mu + var_epsbar <= 0.0)
    fail("analytic_shrinkage_factor: variances must be non-negative and not both zero");
  return var_mu / (var_mu + var_epsbar);
}

VaEstimates fit_va_pipeline(const PanelData& panel, PhiMode mode,
                            bool residualize_outcome_flag) {
  VaEstimates est;
  auto [beta, score_resid] = residualize_scores(panel);
  auto [beta_y, outcome_resid] =
      residualize_outcome(panel, residualize_outcome_flag);
  est.beta_hat = std::move(beta);
  est.beta_y_hat = std::move(beta_y);
  est.outcome_residualized = residualize_outcome_flag && panel.K > 0;
  est.prelim = class_aggregate(panel, score_resid, outcome_resid);
  est.phi = fit_blp(est.prelim, mode);
  est.mu_star = shrunk_va(est.prelim, est.phi);
  return est;
}

}  // namespace vagmm
