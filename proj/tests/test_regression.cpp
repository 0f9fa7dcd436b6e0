#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "test_helpers.hpp"
#include "vagmm/regression.hpp"
#include "vagmm/rng.hpp"

using namespace vagmm;

namespace {

// Hand-typed 9x2 fixed-effects design, 3 groups of 3. The expected numbers
// below were computed independently (dense linear algebra in double
// precision) and frozen; see tools/oracle_regression.py.
Eigen::MatrixXd fe_design() {
  Eigen::MatrixXd X(9, 2);
  X << 0.28, -1.10, -0.57, 0.43, 1.32, 0.27, -0.90, 1.68, 0.05, -0.34, 0.77,
      0.91, -1.45, -0.62, 0.36, 1.25, 2.01, -0.88;
  return X;
}
const std::vector<double> fe_y = {1.94, -0.42, 3.55, -2.10, 0.66,
                                  2.89, -3.02, 1.48, 5.34};
const std::vector<std::int32_t> fe_group = {0, 0, 0, 1, 1, 1, 2, 2, 2};

}  // namespace

TEST_CASE("fixed-effects OLS matches the frozen reference", "[regression]") {
  const FeFit fit = ols_fe(fe_y, fe_design(), fe_group);
  const double expect_beta[2] = {2.4234076033178429, -0.11510517066760118};
  REQUIRE(fit.beta(0) == Catch::Approx(expect_beta[0]).margin(1e-8));
  REQUIRE(fit.beta(1) == Catch::Approx(expect_beta[1]).margin(1e-8));

  // Residuals keep the group effect: y - X beta, not ydd - Xdd beta.
  const double expect_resid[9] = {
      1.1348301833366425,  1.0108375572782389,  0.38218035970069941,
      0.27444352970762864, 0.4996938618071235,  1.1287218507527781,
      0.42257581899695928, 0.75145472614007802, 0.36765816714364696};
  REQUIRE(fit.residuals.size() == 9);
  for (int i = 0; i < 9; ++i)
    REQUIRE(fit.residuals[i] == Catch::Approx(expect_resid[i]).margin(1e-8));

  // The demeaned design must be orthogonal to group indicators.
  for (int g = 0; g < 3; ++g) {
    Eigen::RowVectorXd s = Eigen::RowVectorXd::Zero(2);
    for (int i = 0; i < 9; ++i)
      if (fe_group[i] == g) s += fit.design.row(i);
    REQUIRE(s.cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("fixed-effects OLS recovers a noiseless model exactly", "[regression]") {
  // y = X beta + group effect, zero noise -> beta recovered to round-off.
  const Eigen::MatrixXd X = fe_design();
  const double alpha[3] = {5.0, -2.0, 0.5};
  std::vector<double> y(9);
  for (int i = 0; i < 9; ++i)
    y[i] = alpha[fe_group[i]] + 1.25 * X(i, 0) - 0.75 * X(i, 1);
  const FeFit fit = ols_fe(y, X, fe_group);
  REQUIRE(fit.beta(0) == Catch::Approx(1.25).margin(1e-10));
  REQUIRE(fit.beta(1) == Catch::Approx(-0.75).margin(1e-10));
  // Residuals equal the group effects themselves.
  for (int i = 0; i < 9; ++i)
    REQUIRE(fit.residuals[i] == Catch::Approx(alpha[fe_group[i]]).margin(1e-10));
}

TEST_CASE("K=1 within slope matches the textbook formula", "[regression]") {
  Eigen::MatrixXd X(5, 1);
  X << 1.0, 2.0, 4.0, 0.5, 1.5;
  const std::vector<double> y = {2.0, 3.5, 8.0, 1.0, 2.5};
  const std::vector<std::int32_t> g = {0, 0, 0, 1, 1};
  double sxy = 0.0, sxx = 0.0;
  const double xm0 = (1.0 + 2.0 + 4.0) / 3, ym0 = (2.0 + 3.5 + 8.0) / 3;
  const double xm1 = (0.5 + 1.5) / 2, ym1 = (1.0 + 2.5) / 2;
  for (int i = 0; i < 3; ++i) {
    sxy += (X(i, 0) - xm0) * (y[i] - ym0);
    sxx += (X(i, 0) - xm0) * (X(i, 0) - xm0);
  }
  for (int i = 3; i < 5; ++i) {
    sxy += (X(i, 0) - xm1) * (y[i] - ym1);
    sxx += (X(i, 0) - xm1) * (X(i, 0) - xm1);
  }
  const FeFit fit = ols_fe(y, X, g);
  REQUIRE(fit.beta(0) == Catch::Approx(sxy / sxx).margin(1e-12));
}

TEST_CASE("K=0 fixed-effects fit passes y through", "[regression]") {
  Eigen::MatrixXd X(4, 0);
  const std::vector<double> y = {1.0, 2.0, 3.0, 4.0};
  const FeFit fit = ols_fe(y, X, {0, 0, 1, 1});
  REQUIRE(fit.beta.size() == 0);
  REQUIRE(fit.residuals == y);
}

TEST_CASE("groups with a single observation are rejected", "[regression]") {
  Eigen::MatrixXd X(3, 1);
  X << 1, 2, 3;
  REQUIRE_THROWS(ols_fe({1.0, 2.0, 3.0}, X, {0, 0, 1}));
}

TEST_CASE("plain OLS and clustered covariance match the reference", "[regression]") {
  Eigen::MatrixXd X(4, 2);
  X << 1, 0.5, 1, -1, 1, 2, 1, 0;
  const std::vector<double> y = {2.3, -0.8, 4.6, 1.2};
  const FeFit fit = ols(y, X);
  REQUIRE(fit.beta(0) == Catch::Approx(1.1520000000000001).margin(1e-12));
  REQUIRE(fit.beta(1) == Catch::Approx(1.7946666666666666).margin(1e-12));
  REQUIRE(fit.group.empty());

  const Eigen::MatrixXd V2 = cluster_sandwich(fit, {0, 0, 1, 1});
  const double expect_crve[4] = {2.4780799999999992e-05, 0.00037196231111111234,
                                 0.00037196231111111217, 0.0055831918617284156};
  REQUIRE(V2(0, 0) == Catch::Approx(expect_crve[0]).margin(1e-12));
  REQUIRE(V2(0, 1) == Catch::Approx(expect_crve[1]).margin(1e-12));
  REQUIRE(V2(1, 0) == Catch::Approx(expect_crve[2]).margin(1e-12));
  REQUIRE(V2(1, 1) == Catch::Approx(expect_crve[3]).margin(1e-12));

  // One cluster per row = HC0.
  const Eigen::MatrixXd Vh = cluster_sandwich(fit, {0, 1, 2, 3});
  const double expect_hc0[4] = {0.007295590400000009, -0.0014325077333333354,
                                -0.0014325077333333356, 0.0045899169185185393};
  REQUIRE(Vh(0, 0) == Catch::Approx(expect_hc0[0]).margin(1e-12));
  REQUIRE(Vh(0, 1) == Catch::Approx(expect_hc0[1]).margin(1e-12));
  REQUIRE(Vh(1, 1) == Catch::Approx(expect_hc0[3]).margin(1e-12));

  // df correction scales by C/(C-1) = 2.
  const Eigen::MatrixXd Vdf = cluster_sandwich(fit, {0, 0, 1, 1}, true);
  REQUIRE(Vdf(1, 1) == Catch::Approx(2.0 * V2(1, 1)).margin(1e-12));
}

TEST_CASE("sandwich approaches sigma^2 (X'X)^-1 under homoskedasticity", "[regression]") {
  KeyedStream s{314, 0, 0, 0, static_cast<std::uint64_t>(Draw::generic)};
  const int n = 20000;
  Eigen::MatrixXd X(n, 2);
  std::vector<double> y(n);
  const double sigma2 = 0.49;
  for (int i = 0; i < n; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = s.normal();
    y[i] = 0.3 + 2.0 * X(i, 1) + s.normal(sigma2);
  }
  const FeFit fit = ols(y, X);
  std::vector<std::int32_t> own(n);
  for (int i = 0; i < n; ++i) own[i] = i;
  const Eigen::MatrixXd V = cluster_sandwich(fit, own);
  const Eigen::MatrixXd V0 = sigma2 * fit.xtx_inv;
  REQUIRE(V(0, 0) == Catch::Approx(V0(0, 0)).epsilon(0.10));
  REQUIRE(V(1, 1) == Catch::Approx(V0(1, 1)).epsilon(0.10));
}

TEST_CASE("clustered sandwich is symmetric and positive semidefinite", "[regression]") {
  KeyedStream s{2718, 0, 0, 0, static_cast<std::uint64_t>(Draw::generic)};
  const int n = 60;
  Eigen::MatrixXd X(n, 3);
  std::vector<double> y(n);
  std::vector<std::int32_t> cl(n);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = s.normal();
    X(i, 2) = s.uniform();
    cl[i] = i / 5;
    y[i] = X(i, 1) - X(i, 2) + (1.0 + 0.5 * (cl[i] % 3)) * s.normal();
  }
  const Eigen::MatrixXd V = cluster_sandwich(ols(y, X), cl);
  REQUIRE((V - V.transpose()).cwiseAbs().maxCoeff() < 1e-14);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(V);
  REQUIRE(es.eigenvalues().minCoeff() >= -1e-12);
}

TEST_CASE("cluster vector must align with the fit", "[regression]") {
  Eigen::MatrixXd X(4, 1);
  X << 1, 2, 3, 4;
  const FeFit fit = ols({1.0, 2.0, 2.5, 4.5}, X);
  REQUIRE_THROWS(cluster_sandwich(fit, {0, 0, 1}));
}

TEST_CASE("2SLS matches the frozen reference", "[regression]") {
  Eigen::MatrixXd Z(10, 2);
  Z << 0.9, -0.3, -0.4, 1.1, 1.5, 0.2, -1.2, -0.7, 0.3, 0.8, 0.6, -1.4, -0.8,
      0.5, 1.1, 1.3, -0.2, -0.9, 0.7, 0.4;
  Eigen::MatrixXd exog = Eigen::MatrixXd::Ones(10, 1);
  const std::vector<double> endog = {0.62,  0.35,  1.80, -1.95, 1.05,
                                     -0.52, -0.33, 2.41, -1.10, 1.12};
  const std::vector<double> y = {1.35,  0.80,  3.60,  -3.75, 2.20,
                                 -0.95, -0.45, 4.95,  -2.05, 2.35};
  const std::vector<std::int32_t> cl = {0, 0, 0, 0, 0, 1, 1, 1, 1, 1};

  const TslsFit fit = tsls(y, endog, Z, exog, cl);
  // first_stage_coef is ordered [Z cols, exog cols].
  const double expect_fs[3] = {1.1035322925097359, 0.88014094572024715,
                               -0.018897167699458348};
  REQUIRE(fit.first_stage_coef.size() == 3);
  for (int i = 0; i < 3; ++i)
    REQUIRE(fit.first_stage_coef(i) == Catch::Approx(expect_fs[i]).margin(1e-10));

  REQUIRE(fit.coef(0) == Catch::Approx(1.9788684177336902).margin(1e-10));
  REQUIRE(fit.coef(1) == Catch::Approx(0.12229039588187608).margin(1e-10));

  const double expect_cov[4] = {6.9702683965095977e-05, 0.00010811537182637551,
                                0.00010811537182637551, 0.0001676970377641229};
  REQUIRE(fit.cov_2sls(0, 0) == Catch::Approx(expect_cov[0]).margin(1e-12));
  REQUIRE(fit.cov_2sls(0, 1) == Catch::Approx(expect_cov[1]).margin(1e-12));
  REQUIRE(fit.cov_2sls(1, 0) == Catch::Approx(expect_cov[2]).margin(1e-12));
  REQUIRE(fit.cov_2sls(1, 1) == Catch::Approx(expect_cov[3]).margin(1e-12));

  // Residuals use the ORIGINAL endogenous variable.
  for (int i = 0; i < 10; ++i)
    REQUIRE(fit.residuals[i] ==
            Catch::Approx(y[i] - fit.coef(0) * endog[i] - fit.coef(1))
                .margin(1e-12));
}

TEST_CASE("2SLS with instrument == endog reduces to OLS", "[regression]") {
  KeyedStream s{55, 0, 0, 0, static_cast<std::uint64_t>(Draw::generic)};
  const int n = 40;
  std::vector<double> endog(n), y(n);
  Eigen::MatrixXd Z(n, 1), exog(n, 1);
  std::vector<std::int32_t> cl(n);
  for (int i = 0; i < n; ++i) {
    endog[i] = s.normal();
    Z(i, 0) = endog[i];
    exog(i, 0) = 1.0;
    y[i] = 0.5 + 2.5 * endog[i] + s.normal(0.2);
    cl[i] = i / 4;
  }
  const TslsFit iv = tsls(y, endog, Z, exog, cl);
  Eigen::MatrixXd X(n, 2);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = endog[i];
    X(i, 1) = 1.0;
  }
  const FeFit ls = ols(y, X);
  REQUIRE(iv.coef(0) == Catch::Approx(ls.beta(0)).margin(1e-10));
  REQUIRE(iv.coef(1) == Catch::Approx(ls.beta(1)).margin(1e-10));
}

TEST_CASE("just-identified IV without exog is the ratio of cross moments", "[regression]") {
  KeyedStream s{56, 0, 0, 0, static_cast<std::uint64_t>(Draw::generic)};
  const int n = 30;
  std::vector<double> endog(n), y(n);
  Eigen::MatrixXd Z(n, 1), exog(n, 0);
  std::vector<std::int32_t> cl(n, 0);
  double szy = 0.0, szx = 0.0;
  for (int i = 0; i < n; ++i) {
    Z(i, 0) = s.normal();
    endog[i] = 0.8 * Z(i, 0) + s.normal(0.3);
    y[i] = 3.0 * endog[i] + s.normal(0.5);
    cl[i] = i / 3;
    szy += Z(i, 0) * y[i];
    szx += Z(i, 0) * endog[i];
  }
  const TslsFit iv = tsls(y, endog, Z, exog, cl);
  REQUIRE(iv.coef.size() == 1);
  REQUIRE(iv.coef(0) == Catch::Approx(szy / szx).margin(1e-10));
}

TEST_CASE("FE estimates ignore group-constant shifts", "[regression]") {
  // Adding a per-group constant to y changes residuals but not beta.
  std::vector<double> y2 = fe_y;
  const double shift[3] = {10.0, -20.0, 30.0};
  for (int i = 0; i < 9; ++i) y2[i] += shift[fe_group[i]];
  const FeFit base = ols_fe(fe_y, fe_design(), fe_group);
  const FeFit moved = ols_fe(y2, fe_design(), fe_group);
  REQUIRE(moved.beta(0) == Catch::Approx(base.beta(0)).margin(1e-9));
  REQUIRE(moved.beta(1) == Catch::Approx(base.beta(1)).margin(1e-9));
}

TEST_CASE("collinear designs throw with column diagnostics", "[regression]") {
  Eigen::MatrixXd X(6, 2);
  for (int i = 0; i < 6; ++i) {
    X(i, 0) = i + 1.0;
    X(i, 1) = 2.0 * (i + 1.0);  // exact multiple of column 0
  }
  REQUIRE_THROWS_WITH(ols({1, 2, 3, 4, 5, 6}, X),
                      Catch::Matchers::ContainsSubstring("collinear"));
}
