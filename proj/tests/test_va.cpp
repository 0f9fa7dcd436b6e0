#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <vector>

#include "test_helpers.hpp"
#include "vagmm/mc.hpp"
#include "vagmm/panel.hpp"
#include "vagmm/regression.hpp"
#include "vagmm/va.hpp"

using namespace vagmm;

namespace {

PanelData fixture_panel() {
  return load_panel(testutil::fixture("fixture_panel.csv"));
}

double var_of(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / v.size();
}

}  // namespace

TEST_CASE("pipeline matches the frozen fixture reference", "[va]") {
  // All expected values were produced by an independent implementation of
  // the same pipeline (tools/oracle_pipeline.py) on the committed fixture.
  const PanelData p = fixture_panel();
  const VaEstimates va = fit_va_pipeline(p);

  REQUIRE(va.beta_hat.size() == 1);
  REQUIRE(va.beta_hat(0) == Catch::Approx(1.3224686261621839).margin(1e-8));
  REQUIRE(va.beta_y_hat(0) == Catch::Approx(8.4112354844834023).margin(1e-8));

  REQUIRE(va.phi.mode == PhiMode::stationary);
  REQUIRE(va.phi.gaps == std::vector<std::int32_t>{1, 2, 3});
  const double expect_phi[3] = {-0.035149903931750236, 0.019660210874698811,
                                0.3404724959479441};
  for (int g = 0; g < 3; ++g)
    REQUIRE(va.phi.coef(g) == Catch::Approx(expect_phi[g]).margin(1e-8));

  const double expect_mu[6] = {-0.11591328974838022,  -0.0047524639612838626,
                               0.01883047494274246,   -0.10906657537365617,
                               -0.017756879122281074, 0.025521030571472411};
  REQUIRE(va.mu_star.size() == static_cast<std::size_t>(p.n_teachers() * 4));
  for (int c = 0; c < 6; ++c)
    REQUIRE(va.mu_star[c] == Catch::Approx(expect_mu[c]).margin(1e-8));

  const KappaFit kf = multistep_ols_kappa(va.prelim, va.mu_star);
  REQUIRE(kf.kappa_hat == Catch::Approx(14.709263077166844).margin(1e-6));
  REQUIRE(kf.naive_se == Catch::Approx(6.8241171840862327).margin(1e-6));
  REQUIRE(kf.n_teacheryears == 120);

  // Shrinkage: the VA measure has to be less dispersed than the raw means.
  REQUIRE(var_of(va.prelim.prelim_va) ==
          Catch::Approx(0.16344954697558123).margin(1e-8));
  REQUIRE(var_of(va.mu_star) ==
          Catch::Approx(0.012908779342093122).margin(1e-8));

  // Unrestricted mode on the same panel (balanced, T = 4 -> 3 positions).
  const PhiSpec phi_u = fit_blp(va.prelim, PhiMode::unrestricted);
  const double expect_phi_u[3] = {0.055392262036960953, -0.076410865839438083,
                                  0.1106257442235631};
  REQUIRE(phi_u.coef.size() == 3);
  for (int k = 0; k < 3; ++k)
    REQUIRE(phi_u.coef(k) == Catch::Approx(expect_phi_u[k]).margin(1e-8));
}

TEST_CASE("residualization passes data through when K = 0", "[va]") {
  DgpConfig cfg;
  cfg.n_teachers = 12;
  cfg.class_size = 4;
  cfg.n_years = 3;
  cfg.include_covariates = false;
  cfg.seed = 31;
  const PanelData p = simulate_panel(cfg, 0);
  REQUIRE(p.K == 0);
  const auto [beta, resid] = residualize_scores(p);
  REQUIRE(beta.size() == 0);
  REQUIRE(resid == p.score);
  const auto [beta_y, yresid] = residualize_outcome(p);
  REQUIRE(beta_y.size() == 0);
  REQUIRE(yresid == p.outcome);
}

TEST_CASE("outcome pass-through mode skips residualization", "[va]") {
  const PanelData p = fixture_panel();
  const auto [beta_y, yresid] = residualize_outcome(p, false);
  REQUIRE(beta_y.size() == 0);
  REQUIRE(yresid == p.outcome);
  const VaEstimates va = fit_va_pipeline(p, PhiMode::stationary, false);
  REQUIRE_FALSE(va.outcome_residualized);
  // Class outcome means now aggregate the raw outcome.
  const ClassPanel raw = class_aggregate(p, p.score, p.outcome);
  for (int c = 0; c < raw.n_cells(); ++c)
    REQUIRE(va.prelim.outcome_resid[c] ==
            Catch::Approx(raw.outcome_resid[c]).margin(1e-12));
}

TEST_CASE("score residuals keep the teacher effect", "[va]") {
  // Per-teacher mean residual should track mu_j, not zero; with beta known
  // exactly the residual is mu_j + eps. Noiseless check: score = 2*x + mu_j.
  std::vector<testutil::Row> rows;
  const double mu[2] = {0.5, -0.25};
  int id = 0;
  for (int j = 0; j < 2; ++j)
    for (int t = 1; t <= 2; ++t)
      for (int i = 0; i < 3; ++i) {
        testutil::Row r;
        r.teacher = j == 0 ? "a" : "b";
        r.year = t;
        const double x = 0.1 * (++id) - 0.7;
        r.x = {x};
        r.score = 2.0 * x + mu[j];
        r.outcome = 1.0;
        rows.push_back(r);
      }
  const PanelData p = testutil::make_panel(rows);
  const auto [beta, resid] = residualize_scores(p);
  REQUIRE(beta(0) == Catch::Approx(2.0).margin(1e-10));
  for (std::int64_t r = 0; r < p.n_records(); ++r) {
    const int j = p.teacher[r];
    const std::string& label = p.teacher_ids[j];
    REQUIRE(resid[r] ==
            Catch::Approx(label == "a" ? mu[0] : mu[1]).margin(1e-10));
  }
}

TEST_CASE("BLP coefficients vanish for serially independent cells", "[va]") {
  // iid-per-year teacher effects: other-year class means carry no
  // information about year t, so every phi coefficient should be near zero.
  DgpConfig cfg;
  cfg.n_teachers = 4000;
  cfg.class_size = 10;
  cfg.n_years = 3;
  cfg.include_covariates = false;
  cfg.mu_model = MuModel::iid_per_year;
  cfg.seed = 404;
  const PanelData p = simulate_panel(cfg, 0);
  const ClassPanel cells = class_aggregate(p, p.score, p.outcome);
  const PhiSpec phi = fit_blp(cells);
  // Var(class mean) ~ 1.08/10 = 0.108; regression noise over 4000*3 cells
  // puts each phi-hat within ~3/sqrt(8000) ~ 0.034 of zero.
  for (int g = 0; g < phi.coef.size(); ++g)
    REQUIRE(std::abs(phi.coef(g)) < 0.05);
}

TEST_CASE("BLP residuals are orthogonal to the gap regressors", "[va]") {
  const PanelData p = fixture_panel();
  const VaEstimates va = fit_va_pipeline(p);
  const ClassPanel& cells = va.prelim;
  // Accumulate sum over cells of (Rbar_t - mu_star_t) * (sum of same-gap
  // class means) for every gap; zero is the normal equation of the BLP.
  std::vector<double> dots(va.phi.gaps.size(), 0.0);
  for (int j = 0; j < cells.n_teachers(); ++j)
    for (int c = cells.cell_offset[j]; c < cells.cell_offset[j + 1]; ++c) {
      const double e = cells.prelim_va[c] - va.mu_star[c];
      for (int c2 = cells.cell_offset[j]; c2 < cells.cell_offset[j + 1]; ++c2) {
        if (c2 == c) continue;
        const std::int32_t gap = std::abs(cells.year[c2] - cells.year[c]);
        for (std::size_t g = 0; g < va.phi.gaps.size(); ++g)
          if (va.phi.gaps[g] == gap) dots[g] += e * cells.prelim_va[c2];
      }
    }
  for (double d : dots) REQUIRE(std::abs(d) < 1e-8);
}

TEST_CASE("shrunk VA follows the explicit formula", "[va]") {
  const PanelData p = fixture_panel();
  const VaEstimates va = fit_va_pipeline(p);
  const ClassPanel& cells = va.prelim;
  for (int j = 0; j < cells.n_teachers(); ++j)
    for (int c = cells.cell_offset[j]; c < cells.cell_offset[j + 1]; ++c) {
      double mu = 0.0;
      for (int c2 = cells.cell_offset[j]; c2 < cells.cell_offset[j + 1]; ++c2) {
        if (c2 == c) continue;
        mu += va.phi.coef_for_gap(std::abs(cells.year[c2] - cells.year[c])) *
              cells.prelim_va[c2];
      }
      REQUIRE(va.mu_star[c] == Catch::Approx(mu).margin(1e-10));
    }
}

TEST_CASE("zero phi produces zero VA; missing gaps throw", "[va]") {
  const PanelData p = fixture_panel();
  const ClassPanel cells = class_aggregate(p, p.score, p.outcome);
  PhiSpec phi;
  phi.mode = PhiMode::stationary;
  phi.gaps = {1, 2, 3};
  phi.coef = Eigen::VectorXd::Zero(3);
  for (double m : shrunk_va(cells, phi)) REQUIRE(m == 0.0);

  PhiSpec missing;
  missing.mode = PhiMode::stationary;
  missing.gaps = {1, 2};  // gap 3 occurs in a T = 4 balanced panel
  missing.coef = Eigen::VectorXd::Zero(2);
  REQUIRE_THROWS(shrunk_va(cells, missing));
  REQUIRE_THROWS(phi.coef_for_gap(4));
}

TEST_CASE("T=2 symmetry: both years use the single gap coefficient", "[va]") {
  DgpConfig cfg;
  cfg.n_teachers = 50;
  cfg.class_size = 6;
  cfg.n_years = 2;
  cfg.include_covariates = false;
  cfg.seed = 17;
  const PanelData p = simulate_panel(cfg, 0);
  const ClassPanel cells = class_aggregate(p, p.score, p.outcome);
  const PhiSpec phi = fit_blp(cells);
  REQUIRE(phi.gaps == std::vector<std::int32_t>{1});
  const auto mu = shrunk_va(cells, phi);
  for (int j = 0; j < cells.n_teachers(); ++j) {
    const int c = cells.cell_offset[j];
    REQUIRE(mu[c] == Catch::Approx(phi.coef(0) * cells.prelim_va[c + 1])
                         .margin(1e-12));
    REQUIRE(mu[c + 1] ==
            Catch::Approx(phi.coef(0) * cells.prelim_va[c]).margin(1e-12));
  }
}

TEST_CASE("multistep OLS solves the no-intercept normal equation", "[va]") {
  const PanelData p = fixture_panel();
  const VaEstimates va = fit_va_pipeline(p);
  const KappaFit kf = multistep_ols_kappa(va.prelim, va.mu_star);
  double sxy = 0.0, sxx = 0.0;
  for (int c = 0; c < va.prelim.n_cells(); ++c) {
    if (va.prelim.n_y[c] == 0) continue;
    sxy += va.mu_star[c] * va.prelim.outcome_resid[c];
    sxx += va.mu_star[c] * va.mu_star[c];
  }
  REQUIRE(kf.kappa_hat == Catch::Approx(sxy / sxx).margin(1e-10));

  // Exact-fit degenerate case: Ybar = c * mu-hat -> kappa = c, SE = 0.
  std::vector<double> fake_y(va.prelim.n_cells());
  ClassPanel cells2 = va.prelim;
  for (int c = 0; c < cells2.n_cells(); ++c)
    cells2.outcome_resid[c] = 3.25 * va.mu_star[c];
  const KappaFit exact = multistep_ols_kappa(cells2, va.mu_star);
  REQUIRE(exact.kappa_hat == Catch::Approx(3.25).margin(1e-10));
  REQUIRE(exact.naive_se == Catch::Approx(0.0).margin(1e-10));
}

TEST_CASE("class-size weighting changes the kappa estimate", "[va]") {
  // Unequal information across cells: weighting is a different estimator.
  const PanelData p = fixture_panel();
  const VaEstimates va = fit_va_pipeline(p);
  const KappaFit unweighted = multistep_ols_kappa(va.prelim, va.mu_star);
  const KappaFit weighted = multistep_ols_kappa(va.prelim, va.mu_star, true);
  // Fixture classes all have 6 students, so the two must coincide here.
  REQUIRE(weighted.kappa_hat ==
          Catch::Approx(unweighted.kappa_hat).margin(1e-10));
}

TEST_CASE("analytic shrinkage factor", "[va]") {
  REQUIRE(analytic_shrinkage_factor(0.0, 0.5) == Catch::Approx(0.0));
  REQUIRE(analytic_shrinkage_factor(0.3, 0.3) == Catch::Approx(0.5));
  REQUIRE(analytic_shrinkage_factor(0.01, 0.027) ==
          Catch::Approx(0.27027027027027029).margin(1e-12));
}

TEST_CASE("leave-out VA never uses the own-year class mean", "[va]") {
  // Perturbing the scores of one class must leave that class's own VA
  // untouched (it only enters other years' predictions).
  DgpConfig cfg;
  cfg.n_teachers = 8;
  cfg.class_size = 5;
  cfg.n_years = 3;
  cfg.include_covariates = false;  // keeps beta-hat out of the picture
  cfg.seed = 88;
  PanelData p = simulate_panel(cfg, 0);
  const ClassPanel cells0 = class_aggregate(p, p.score, p.outcome);
  PhiSpec phi0;  // fixed coefficients so the induced movement is exact
  phi0.mode = PhiMode::stationary;
  phi0.gaps = {1, 2};
  phi0.coef = Eigen::Vector2d(0.5, 0.25);
  const auto mu0 = shrunk_va(cells0, phi0);

  // Bump every score in teacher 0's first-year class by +10.
  const std::int32_t target_year = cells0.year[cells0.cell_offset[0]];
  int cnt = 0;
  const std::int32_t* rows = p.rows_of(0, &cnt);
  for (int r = 0; r < cnt; ++r)
    if (p.year[rows[r]] == target_year) p.score[rows[r]] += 10.0;

  const ClassPanel cells1 = class_aggregate(p, p.score, p.outcome);
  const auto mu1 = shrunk_va(cells1, phi0);
  const int c0 = cells0.cell_offset[0];
  REQUIRE(mu1[c0] == Catch::Approx(mu0[c0]).margin(1e-12));
  // ... while the same teacher's other years move by phi_gap * 10.
  REQUIRE(mu1[c0 + 1] - mu0[c0 + 1] == Catch::Approx(5.0).margin(1e-10));
  REQUIRE(mu1[c0 + 2] - mu0[c0 + 2] == Catch::Approx(2.5).margin(1e-10));
  // Other teachers are unaffected entirely.
  for (int c = cells0.cell_offset[1]; c < cells0.n_cells(); ++c)
    REQUIRE(mu1[c] == Catch::Approx(mu0[c]).margin(1e-12));
}

TEST_CASE("forecast unbiasedness: Rbar regressed on mu-star has slope 1", "[va]") {
  // mu-star lies in the span of the BLP regressors and the BLP residual is
  // orthogonal to that span, so the pooled regression of Rbar on mu-star
  // has slope exactly 1 in sample. A weighting or gap-matching bug breaks
  // this identity immediately.
  DgpConfig cfg;
  cfg.n_teachers = 300;
  cfg.class_size = 8;
  cfg.n_years = 4;
  cfg.rho = 0.0;
  cfg.include_covariates = false;
  cfg.seed = 3141;
  const PanelData p = simulate_panel(cfg, 0);
  const ClassPanel cells = class_aggregate(p, p.score, p.outcome);
  const PhiSpec phi = fit_blp(cells);
  const auto mu = shrunk_va(cells, phi);
  double sxy = 0.0, sxx = 0.0;
  for (int c = 0; c < cells.n_cells(); ++c) {
    sxy += mu[c] * cells.prelim_va[c];
    sxx += mu[c] * mu[c];
  }
  REQUIRE(sxy / sxx == Catch::Approx(1.0).margin(1e-8));
}
