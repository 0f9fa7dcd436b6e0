#include "vagmm/regression.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace vagmm {

namespace {

constexpr double kRankTol = 1e-10;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

Eigen::Map<const Eigen::VectorXd> as_vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(),
                                           static_cast<Eigen::Index>(v.size()));
}

/** Names the columns a rank-revealing QR rejects, for solve error messages. */
std::string collinear_columns(const Eigen::MatrixXd& A) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(kRankTol);
  const Eigen::Index rank = qr.rank();
  const auto& perm = qr.colsPermutation().indices();
  std::string cols;
  for (Eigen::Index i = rank; i < A.cols(); ++i) {
    if (!cols.empty()) cols += ", ";
    cols += std::to_string(perm[i]);
  }
  return cols.empty() ? "all" : cols;
}

}  // namespace

Eigen::MatrixXd sym_solve(const Eigen::MatrixXd& A, const Eigen::MatrixXd& b,
                          const std::string& label) {
  if (A.rows() != A.cols()) fail(label + ": matrix is not square");
  if (A.rows() != b.rows()) fail(label + ": right-hand side does not conform");
  if (A.rows() == 0) return Eigen::MatrixXd(0, b.cols());
  if (!A.allFinite() || !b.allFinite())
    fail(label + ": non-finite entries in the linear system");

  Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
  const Eigen::VectorXd d = ldlt.vectorD().cwiseAbs();
  const double dmax = d.maxCoeff();
  if (ldlt.info() != Eigen::Success || dmax <= 0.0 ||
      d.minCoeff() <= kRankTol * dmax)
    fail(label + ": singular system; collinear columns: " +
         collinear_columns(A));
  return ldlt.solve(b);
}

Eigen::MatrixXd sym_inverse(const Eigen::MatrixXd& A,
                            const std::string& label) {
  return sym_solve(A, Eigen::MatrixXd::Identity(A.rows(), A.rows()), label);
}

FeFit ols_fe(const std::vector<double>& y, const Eigen::MatrixXd& X,
             const std::vector<std::int32_t>& group) {
  const Eigen::Index n = static_cast<Eigen::Index>(y.size());
  const int K = static_cast<int>(X.cols());
  if (X.rows() != n) fail("ols_fe: X does not align with y");
  if (static_cast<Eigen::Index>(group.size()) != n)
    fail("ols_fe: group does not align with y");
  if (n == 0) fail("ols_fe: empty sample");

  std::int32_t g_max = 0;
  for (std::int32_t g : group) {
    if (g < 0) fail("ols_fe: negative group id");
    g_max = std::max(g_max, g);
  }
  const std::int64_t G = static_cast<std::int64_t>(g_max) + 1;

  std::vector<std::int64_t> count(G, 0);
  std::vector<double> ymean(G, 0.0);
  Eigen::MatrixXd xmean = Eigen::MatrixXd::Zero(G, K);
  for (Eigen::Index i = 0; i < n; ++i) {
    ++count[group[i]];
    ymean[group[i]] += y[i];
    if (K > 0) xmean.row(group[i]) += X.row(i);
  }
  for (std::int64_t g = 0; g < G; ++g) {
    if (count[g] == 1)
      fail("ols_fe: group " + std::to_string(g) +
           " has a single observation; the within transform needs >= 2");
    if (count[g] > 0) {
      ymean[g] /= static_cast<double>(count[g]);
      if (K > 0) xmean.row(g) /= static_cast<double>(count[g]);
    }
  }

  FeFit fit;
  fit.group = group;
  fit.design.resize(n, K);
  fit.residuals.resize(y.size());
  if (K == 0) {
    fit.beta.resize(0);
    fit.xtx_inv.resize(0, 0);
    std::copy(y.begin(), y.end(), fit.residuals.begin());
    return fit;
  }

  Eigen::VectorXd ydd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    fit.design.row(i) = X.row(i) - xmean.row(group[i]);
    ydd[i] = y[i] - ymean[group[i]];
  }
  const Eigen::MatrixXd xtx = fit.design.transpose() * fit.design;
  fit.beta = sym_solve(xtx, fit.design.transpose() * ydd, "ols_fe normal equations");
  fit.xtx_inv = sym_inverse(xtx, "ols_fe normal equations");
  const Eigen::VectorXd fitted = X * fit.beta;
  for (Eigen::Index i = 0; i < n; ++i) fit.residuals[i] = y[i] - fitted[i];
  return fit;
}

FeFit ols(const std::vector<double>& y, const Eigen::MatrixXd& X) {
  const Eigen::Index n = static_cast<Eigen::Index>(y.size());
  if (X.rows() != n) fail("ols: X does not align with y");
  if (n == 0) fail("ols: empty sample");
  FeFit fit;
  fit.design = X;
  fit.residuals.resize(y.size());
  if (X.cols() == 0) {
    fit.beta.resize(0);
    fit.xtx_inv.resize(0, 0);
    std::copy(y.begin(), y.end(), fit.residuals.begin());
    return fit;
  }
  const Eigen::MatrixXd xtx = X.transpose() * X;
  fit.beta = sym_solve(xtx, X.transpose() * as_vec(y), "ols normal equations");
  fit.xtx_inv = sym_inverse(xtx, "ols normal equations");
  const Eigen::VectorXd fitted = X * fit.beta;
  for (Eigen::Index i = 0; i < n; ++i) fit.residuals[i] = y[i] - fitted[i];
  return fit;
}

Eigen::MatrixXd cluster_sandwich(const FeFit& fit,
                                 const std::vector<std::int32_t>& cluster,
                                 bool df_correct) {
  const Eigen::Index n = fit.design.rows();
  const int K = static_cast<int>(fit.design.cols());
  if (static_cast<Eigen::Index>(cluster.size()) != n)
    fail("cluster_sandwich: cluster does not align with the fit");
  if (K == 0) return Eigen::MatrixXd(0, 0);

  // Demeaning groups must not straddle clusters: the un-demeaned residuals
  // only aggregate to the right within-group scores when each group's rows
  // share one cluster.
  if (!fit.group.empty()) {
    std::unordered_map<std::int32_t, std::int32_t> group_cluster;
    for (Eigen::Index i = 0; i < n; ++i) {
      auto [it, inserted] = group_cluster.emplace(fit.group[i], cluster[i]);
      if (!inserted && it->second != cluster[i])
        fail("cluster_sandwich: cluster partition splits demeaning group " +
             std::to_string(fit.group[i]));
    }
  }

  std::unordered_map<std::int32_t, Eigen::Index> cluster_index;
  std::vector<Eigen::VectorXd> scores;
  for (Eigen::Index i = 0; i < n; ++i) {
    auto [it, inserted] = cluster_index.emplace(
        cluster[i], static_cast<Eigen::Index>(scores.size()));
    if (inserted) scores.emplace_back(Eigen::VectorXd::Zero(K));
    scores[it->second] += fit.design.row(i).transpose() * fit.residuals[i];
  }
  const std::size_t C = scores.size();
  if (C < 2) fail("cluster_sandwich: need at least two clusters");

  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(K, K);
  for (const auto& s : scores) meat += s * s.transpose();
  Eigen::MatrixXd cov = fit.xtx_inv * meat * fit.xtx_inv;
  if (df_correct)
    cov *= static_cast<double>(C) / static_cast<double>(C - 1);
  return cov;
}

TslsFit tsls(const std::vector<double>& y, const std::vector<double>& endog,
             const Eigen::MatrixXd& instruments, const Eigen::MatrixXd& exog,
             const std::vector<std::int32_t>& cluster) {
  const Eigen::Index n = static_cast<Eigen::Index>(y.size());
  if (static_cast<Eigen::Index>(endog.size()) != n)
    fail("tsls: endog does not align with y");
  if (instruments.rows() != n) fail("tsls: instruments do not align with y");
  if (exog.rows() != n && exog.cols() > 0)
    fail("tsls: exog does not align with y");
  if (static_cast<Eigen::Index>(cluster.size()) != n)
    fail("tsls: cluster does not align with y");
  if (instruments.cols() < 1) fail("tsls: no instruments");

  const int L = static_cast<int>(instruments.cols());
  const int E = static_cast<int>(exog.cols());
  Eigen::MatrixXd Z(n, L + E);
  Z.leftCols(L) = instruments;
  if (E > 0) Z.rightCols(E) = exog;

  TslsFit fit;
  fit.first_stage_coef = sym_solve(Z.transpose() * Z,
                                   Z.transpose() * as_vec(endog),
                                   "tsls first stage");
  const Eigen::VectorXd fitted_endog = Z * fit.first_stage_coef;

  Eigen::MatrixXd What(n, 1 + E);
  What.col(0) = fitted_endog;
  if (E > 0) What.rightCols(E) = exog;
  const Eigen::MatrixXd wtw = What.transpose() * What;
  fit.coef = sym_solve(wtw, What.transpose() * as_vec(y), "tsls second stage");
  const Eigen::MatrixXd bread = sym_inverse(wtw, "tsls second stage");

  // Residuals from the original endogenous column.
  fit.residuals.resize(y.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    double f = endog[i] * fit.coef[0];
    if (E > 0) f += exog.row(i).dot(fit.coef.tail(E));
    fit.residuals[i] = y[i] - f;
  }

  std::unordered_map<std::int32_t, Eigen::Index> cluster_index;
  std::vector<Eigen::VectorXd> scores;
  for (Eigen::Index i = 0; i < n; ++i) {
    auto [it, inserted] = cluster_index.emplace(
        cluster[i], static_cast<Eigen::Index>(scores.size()));
    if (inserted) scores.emplace_back(Eigen::VectorXd::Zero(1 + E));
    scores[it->second] += What.row(i).transpose() * fit.residuals[i];
  }
  if (scores.size() < 2) fail("tsls: need at least two clusters");
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(1 + E, 1 + E);
  for (const auto& s : scores) meat += s * s.transpose();
  fit.cov_2sls = bread * meat * bread;
  return fit;
}

}  // namespace vagmm
