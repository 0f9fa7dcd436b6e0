#include "vagmm/longrun.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <utility>

#include "vagmm/regression.hpp"
#include "vagmm/stats.hpp"

namespace vagmm {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

int gap_index(const std::vector<std::int32_t>& gaps, std::int32_t g) {
  const auto it = std::lower_bound(gaps.begin(), gaps.end(), g);
  if (it == gaps.end() || *it != g) return -1;
  return static_cast<int>(it - gaps.begin());
}

/**
 * Everything the class- and student-level moments need for one teacher,
 * precomputed so that moment evaluations are parameter-only work.
 *
 * The class-level design column g is defined through `links[g]`: a list of
 * (target cell, source cell) pairs, so that D(t, g) = sum over pairs of the
 * source residual. In stationary mode g indexes the year gaps; in
 * unrestricted mode it indexes the ascending-year leave-out position.
 * `ax[g].row(t)` pre-sums the source-cell covariate means entering
 * dD(t, g)/dbeta'.
 */
struct TeacherData {
  int T = 0;
  Eigen::VectorXd rbar;    ///< raw class-mean scores
  Eigen::VectorXd ybar;    ///< raw class-mean outcomes (0 where absent)
  Eigen::MatrixXd xbar;    ///< T x K class-mean covariates
  Eigen::MatrixXd xbar_y;  ///< T x K, outcome subsample
  std::vector<char> has_y;
  Eigen::MatrixXd H1;  ///< within-teacher student-level X'X
  Eigen::VectorXd a1;  ///< within-teacher student-level X'score
  Eigen::MatrixXd H3;  ///< as H1 on the outcome subsample
  Eigen::VectorXd a3;
  std::vector<std::vector<std::pair<int, int>>> links;
  std::vector<Eigen::MatrixXd> ax;
};

struct Prep {
  int K = 0;
  int p = 0;
  bool resid_y = false;
  PhiMode mode = PhiMode::stationary;
  std::vector<std::int32_t> gaps;  ///< stationary mode only
  std::vector<std::string> teacher_ids;
  std::vector<TeacherData> teachers;
  Eigen::MatrixXd sum_H1, sum_H3;
  Eigen::VectorXd sum_a1, sum_a3;

  int n_teachers() const { return static_cast<int>(teachers.size()); }
};

/** Student-level within-teacher moment statistics for teacher j. */
void student_stats(const PanelData& panel, int j, Eigen::MatrixXd& H1,
                   Eigen::VectorXd& a1, Eigen::MatrixXd& H3,
                   Eigen::VectorXd& a3) {
  const int K = panel.K;
  H1.setZero(K, K);
  a1.setZero(K);
  H3.setZero(K, K);
  a3.setZero(K);
  if (K == 0) return;

  int count = 0;
  const std::int32_t* rows = panel.rows_of(j, &count);

  Eigen::RowVectorXd xm = Eigen::RowVectorXd::Zero(K);
  Eigen::RowVectorXd xmy = Eigen::RowVectorXd::Zero(K);
  int ny = 0;
  for (int i = 0; i < count; ++i) {
    xm += panel.X.row(rows[i]);
    if (panel.row_has_outcome(rows[i])) {
      xmy += panel.X.row(rows[i]);
      ++ny;
    }
  }
  xm /= count;
  if (ny > 0) xmy /= ny;

  for (int i = 0; i < count; ++i) {
    const std::int32_t r = rows[i];
    const Eigen::RowVectorXd xdd = panel.X.row(r) - xm;
    H1.selfadjointView<Eigen::Lower>().rankUpdate(xdd.transpose());
    a1 += xdd.transpose() * panel.score[r];
    if (panel.row_has_outcome(r)) {
      const Eigen::RowVectorXd xddy = panel.X.row(r) - xmy;
      H3.selfadjointView<Eigen::Lower>().rankUpdate(xddy.transpose());
      a3 += xddy.transpose() * panel.outcome[r];
    }
  }
  H1 = H1.selfadjointView<Eigen::Lower>();
  H3 = H3.selfadjointView<Eigen::Lower>();
}

std::shared_ptr<const Prep> make_prep(const PanelData& panel, PhiMode mode,
                                      bool residualize_outcome) {
  auto prep = std::make_shared<Prep>();
  const int K = panel.K;
  prep->K = K;
  prep->mode = mode;
  prep->resid_y = residualize_outcome && K > 0;
  prep->teacher_ids = panel.teacher_ids;

  const ClassPanel cells = class_aggregate(panel, panel.score, panel.outcome);
  if (mode == PhiMode::stationary) {
    prep->gaps = cells.gaps_present();
    prep->p = static_cast<int>(prep->gaps.size());
  } else {
    if (!cells.balanced())
      fail("moment system: unrestricted phi requires a balanced panel");
    prep->p = cells.cells_of(0) - 1;
  }
  if (prep->p < 1) fail("moment system: no leave-out years available");

  const int J = cells.n_teachers();
  prep->teachers.resize(J);
  prep->sum_H1.setZero(K, K);
  prep->sum_a1.setZero(K);
  prep->sum_H3.setZero(K, K);
  prep->sum_a3.setZero(K);

  for (int j = 0; j < J; ++j) {
    TeacherData& td = prep->teachers[j];
    const std::int32_t b = cells.cell_offset[j];
    const int T = cells.cells_of(j);
    td.T = T;
    td.rbar.resize(T);
    td.ybar.resize(T);
    td.xbar.resize(T, K);
    td.xbar_y.resize(T, K);
    td.has_y.resize(T);
    for (int t = 0; t < T; ++t) {
      td.rbar[t] = cells.prelim_va[b + t];
      td.ybar[t] = cells.outcome_resid[b + t];
      td.has_y[t] = cells.n_y[b + t] > 0;
      if (K > 0) {
        td.xbar.row(t) = cells.x_mean.row(b + t);
        td.xbar_y.row(t) = cells.x_mean_y.row(b + t);
      }
    }

    td.links.assign(prep->p, {});
    td.ax.assign(prep->p, Eigen::MatrixXd::Zero(T, K));
    for (int t = 0; t < T; ++t) {
      int pos = 0;
      for (int s = 0; s < T; ++s) {
        if (s == t) continue;
        int g;
        if (mode == PhiMode::stationary) {
          g = gap_index(prep->gaps,
                        std::abs(cells.year[b + s] - cells.year[b + t]));
          if (g < 0) fail("moment system: unindexed year gap");
        } else {
          g = pos++;
        }
        td.links[g].emplace_back(t, s);
        if (K > 0) td.ax[g].row(t) += td.xbar.row(s);
      }
    }

    student_stats(panel, j, td.H1, td.a1, td.H3, td.a3);
    prep->sum_H1 += td.H1;
    prep->sum_a1 += td.a1;
    prep->sum_H3 += td.H3;
    prep->sum_a3 += td.a3;
  }
  return prep;
}

/** Class-level residuals and leave-out design at a parameter point. */
struct CellState {
  Eigen::VectorXd rt;  ///< class score residual at beta
  Eigen::VectorXd yt;  ///< class outcome residual at beta_y
  Eigen::MatrixXd D;   ///< T x p leave-out design built from rt
};

void cell_state(const Prep& prep, const TeacherData& td,
                const Eigen::VectorXd& beta, const Eigen::VectorXd& beta_y,
                CellState& cs) {
  cs.rt = td.rbar;
  if (prep.K > 0) cs.rt -= td.xbar * beta;
  cs.yt = td.ybar;
  if (prep.resid_y) cs.yt -= td.xbar_y * beta_y;
  cs.D.setZero(td.T, prep.p);
  for (int g = 0; g < prep.p; ++g)
    for (const auto& [t, s] : td.links[g]) cs.D(t, g) += cs.rt[s];
}

/** Parameter layout of the exactly identified long-run system. */
struct LongrunLayout {
  int K = 0, p = 0;
  bool resid_y = false;
  int off_beta() const { return 0; }
  int off_phi() const { return K; }
  int off_betay() const { return K + p; }
  int off_kappa() const { return K + p + (resid_y ? K : 0); }
  int P() const { return off_kappa() + 1; }
  // moment rows mirror the blocks: m1, m2, m3, g
  int row_m1() const { return 0; }
  int row_m2() const { return K; }
  int row_m3() const { return K + p; }
  int row_g() const { return off_kappa(); }
};

LongrunLayout layout_of(const Prep& prep) {
  LongrunLayout lay;
  lay.K = prep.K;
  lay.p = prep.p;
  lay.resid_y = prep.resid_y;
  return lay;
}

void longrun_moments(const Prep& prep, const TeacherData& td,
                     const LongrunLayout& lay, const Eigen::VectorXd& theta,
                     Eigen::VectorXd& out) {
  const Eigen::VectorXd beta = theta.segment(lay.off_beta(), lay.K);
  const Eigen::VectorXd phi = theta.segment(lay.off_phi(), lay.p);
  const Eigen::VectorXd beta_y =
      lay.resid_y ? Eigen::VectorXd(theta.segment(lay.off_betay(), lay.K))
                  : Eigen::VectorXd();
  const double kappa = theta[lay.off_kappa()];

  CellState cs;
  cell_state(prep, td, beta, beta_y, cs);
  const Eigen::VectorXd mu = cs.D * phi;

  if (lay.K > 0) out.segment(lay.row_m1(), lay.K) = td.a1 - td.H1 * beta;
  out.segment(lay.row_m2(), lay.p) = cs.D.transpose() * (cs.rt - mu);
  if (lay.resid_y)
    out.segment(lay.row_m3(), lay.K) = td.a3 - td.H3 * beta_y;
  double g = 0.0;
  for (int t = 0; t < td.T; ++t)
    if (td.has_y[t]) g += mu[t] * (cs.yt[t] - kappa * mu[t]);
  out[lay.row_g()] = g;
}

void longrun_jacobian(const Prep& prep, const TeacherData& td,
                      const LongrunLayout& lay, const Eigen::VectorXd& theta,
                      Eigen::MatrixXd& out) {
  const Eigen::VectorXd beta = theta.segment(lay.off_beta(), lay.K);
  const Eigen::VectorXd phi = theta.segment(lay.off_phi(), lay.p);
  const Eigen::VectorXd beta_y =
      lay.resid_y ? Eigen::VectorXd(theta.segment(lay.off_betay(), lay.K))
                  : Eigen::VectorXd();
  const double kappa = theta[lay.off_kappa()];

  CellState cs;
  cell_state(prep, td, beta, beta_y, cs);
  const Eigen::VectorXd mu = cs.D * phi;

  out.setZero(lay.P(), lay.P());

  // dmu/dbeta' = -arows, row-wise.
  Eigen::MatrixXd arows;
  if (lay.K > 0) {
    arows.setZero(td.T, lay.K);
    for (int g = 0; g < lay.p; ++g) arows += phi[g] * td.ax[g];
  }

  if (lay.K > 0)
    out.block(lay.row_m1(), lay.off_beta(), lay.K, lay.K) = -td.H1;

  out.block(lay.row_m2(), lay.off_phi(), lay.p, lay.p) =
      -cs.D.transpose() * cs.D;
  if (lay.K > 0) {
    const Eigen::VectorXd resid = cs.rt - mu;
    for (int g = 0; g < lay.p; ++g) {
      Eigen::RowVectorXd acc = -resid.transpose() * td.ax[g];
      for (int t = 0; t < td.T; ++t)
        acc += cs.D(t, g) * (arows.row(t) - td.xbar.row(t));
      out.block(lay.row_m2() + g, lay.off_beta(), 1, lay.K) = acc;
    }
  }

  if (lay.resid_y)
    out.block(lay.row_m3(), lay.off_betay(), lay.K, lay.K) = -td.H3;

  double g_kappa = 0.0;
  Eigen::RowVectorXd g_phi = Eigen::RowVectorXd::Zero(lay.p);
  Eigen::RowVectorXd g_beta = Eigen::RowVectorXd::Zero(lay.K);
  Eigen::RowVectorXd g_betay = Eigen::RowVectorXd::Zero(lay.K);
  for (int t = 0; t < td.T; ++t) {
    if (!td.has_y[t]) continue;
    const double w = cs.yt[t] - 2.0 * kappa * mu[t];
    g_kappa -= mu[t] * mu[t];
    g_phi += w * cs.D.row(t);
    if (lay.K > 0) {
      g_beta -= w * arows.row(t);
      if (lay.resid_y) g_betay -= mu[t] * td.xbar_y.row(t);
    }
  }
  out(lay.row_g(), lay.off_kappa()) = g_kappa;
  out.block(lay.row_g(), lay.off_phi(), 1, lay.p) = g_phi;
  if (lay.K > 0) out.block(lay.row_g(), lay.off_beta(), 1, lay.K) = g_beta;
  if (lay.resid_y)
    out.block(lay.row_g(), lay.off_betay(), 1, lay.K) = g_betay;
}

/** Sequential pipeline solution from the prep's sufficient statistics. */
Eigen::VectorXd longrun_closed_form(const Prep& prep,
                                    const LongrunLayout& lay) {
  Eigen::VectorXd theta(lay.P());
  Eigen::VectorXd beta, beta_y;
  if (lay.K > 0) {
    beta = sym_solve(prep.sum_H1, prep.sum_a1, "score normal equations");
    theta.segment(lay.off_beta(), lay.K) = beta;
  }
  if (lay.resid_y) {
    beta_y = sym_solve(prep.sum_H3, prep.sum_a3, "outcome normal equations");
    theta.segment(lay.off_betay(), lay.K) = beta_y;
  }

  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(lay.p, lay.p);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(lay.p);
  CellState cs;
  for (const TeacherData& td : prep.teachers) {
    cell_state(prep, td, beta, beta_y, cs);
    A.selfadjointView<Eigen::Lower>().rankUpdate(cs.D.transpose());
    b += cs.D.transpose() * cs.rt;
  }
  A = A.selfadjointView<Eigen::Lower>();
  const Eigen::VectorXd phi = sym_solve(A, b, "BLP normal equations");
  theta.segment(lay.off_phi(), lay.p) = phi;

  double num = 0.0, den = 0.0;
  for (const TeacherData& td : prep.teachers) {
    cell_state(prep, td, beta, beta_y, cs);
    const Eigen::VectorXd mu = cs.D * phi;
    for (int t = 0; t < td.T; ++t) {
      if (!td.has_y[t]) continue;
      num += mu[t] * cs.yt[t];
      den += mu[t] * mu[t];
    }
  }
  if (den <= 0.0) fail("moment system: shrunk VA has no variation");
  theta[lay.off_kappa()] = num / den;
  return theta;
}

/** Parameter layout of the overidentified system. */
struct OveridLayout {
  int K = 0, p = 0;  ///< p = T - 1 instruments
  bool resid_y = false;
  int off_beta() const { return 0; }
  int off_betay() const { return K; }
  int off_kappa() const { return K + (resid_y ? K : 0); }
  int P() const { return off_kappa() + 1; }
  int row_m1() const { return 0; }
  int row_m3() const { return K; }
  int row_g1() const { return K + (resid_y ? K : 0); }
  int M() const { return row_g1() + p; }
};

OveridLayout overid_layout_of(const Prep& prep) {
  OveridLayout lay;
  lay.K = prep.K;
  lay.p = prep.p;
  lay.resid_y = prep.resid_y;
  return lay;
}

void overid_moments(const Prep& prep, const TeacherData& td,
                    const OveridLayout& lay, const Eigen::VectorXd& theta,
                    Eigen::VectorXd& out) {
  const Eigen::VectorXd beta = theta.segment(lay.off_beta(), lay.K);
  const Eigen::VectorXd beta_y =
      lay.resid_y ? Eigen::VectorXd(theta.segment(lay.off_betay(), lay.K))
                  : Eigen::VectorXd();
  const double kappa = theta[lay.off_kappa()];

  CellState cs;
  cell_state(prep, td, beta, beta_y, cs);

  if (lay.K > 0) out.segment(lay.row_m1(), lay.K) = td.a1 - td.H1 * beta;
  if (lay.resid_y)
    out.segment(lay.row_m3(), lay.K) = td.a3 - td.H3 * beta_y;
  for (int k = 0; k < lay.p; ++k) {
    double acc = 0.0;
    for (const auto& [t, s] : td.links[k])
      if (td.has_y[t]) acc += cs.rt[s] * (cs.yt[t] - kappa * cs.rt[t]);
    out[lay.row_g1() + k] = acc;
  }
}

void overid_jacobian(const Prep& prep, const TeacherData& td,
                     const OveridLayout& lay, const Eigen::VectorXd& theta,
                     Eigen::MatrixXd& out) {
  const Eigen::VectorXd beta = theta.segment(lay.off_beta(), lay.K);
  const Eigen::VectorXd beta_y =
      lay.resid_y ? Eigen::VectorXd(theta.segment(lay.off_betay(), lay.K))
                  : Eigen::VectorXd();
  const double kappa = theta[lay.off_kappa()];

  CellState cs;
  cell_state(prep, td, beta, beta_y, cs);

  out.setZero(lay.M(), lay.P());
  if (lay.K > 0)
    out.block(lay.row_m1(), lay.off_beta(), lay.K, lay.K) = -td.H1;
  if (lay.resid_y)
    out.block(lay.row_m3(), lay.off_betay(), lay.K, lay.K) = -td.H3;

  for (int k = 0; k < lay.p; ++k) {
    const int row = lay.row_g1() + k;
    double dk = 0.0;
    Eigen::RowVectorXd db = Eigen::RowVectorXd::Zero(lay.K);
    Eigen::RowVectorXd dby = Eigen::RowVectorXd::Zero(lay.K);
    for (const auto& [t, s] : td.links[k]) {
      if (!td.has_y[t]) continue;
      dk -= cs.rt[s] * cs.rt[t];
      if (lay.K > 0) {
        db += -td.xbar.row(s) * (cs.yt[t] - kappa * cs.rt[t]) +
              kappa * cs.rt[s] * td.xbar.row(t);
        if (lay.resid_y) dby -= cs.rt[s] * td.xbar_y.row(t);
      }
    }
    out(row, lay.off_kappa()) = dk;
    if (lay.K > 0) out.block(row, lay.off_beta(), 1, lay.K) = db;
    if (lay.resid_y) out.block(row, lay.off_betay(), 1, lay.K) = dby;
  }
}

}  // namespace

MomentSystem build_longrun_system(const PanelData& panel, PhiMode mode,
                                  bool residualize_outcome) {
  const std::shared_ptr<const Prep> prep =
      make_prep(panel, mode, residualize_outcome);
  const LongrunLayout lay = layout_of(*prep);

  MomentSystem sys;
  if (lay.K > 0) sys.layout.push_back({"beta", lay.K});
  sys.layout.push_back({"phi", lay.p});
  if (lay.resid_y) sys.layout.push_back({"beta_y", lay.K});
  sys.layout.push_back({"kappa", 1});
  sys.n_moments = lay.P();
  sys.n_clusters = prep->n_teachers();
  sys.moment_fn = [prep, lay](int j, const Eigen::VectorXd& theta,
                              Eigen::VectorXd& out) {
    longrun_moments(*prep, prep->teachers[j], lay, theta, out);
  };
  sys.jacobian_fn = [prep, lay](int j, const Eigen::VectorXd& theta,
                                Eigen::MatrixXd& out) {
    longrun_jacobian(*prep, prep->teachers[j], lay, theta, out);
  };
  sys.closed_form = [prep, lay]() { return longrun_closed_form(*prep, lay); };
  sys.initial_guess = sys.closed_form;
  return sys;
}

MomentSystem build_overid_system(const PanelData& panel,
                                 bool residualize_outcome) {
  const std::shared_ptr<const Prep> prep =
      make_prep(panel, PhiMode::unrestricted, residualize_outcome);
  const OveridLayout lay = overid_layout_of(*prep);

  MomentSystem sys;
  if (lay.K > 0) sys.layout.push_back({"beta", lay.K});
  if (lay.resid_y) sys.layout.push_back({"beta_y", lay.K});
  sys.layout.push_back({"kappa", 1});
  sys.n_moments = lay.M();
  sys.n_clusters = prep->n_teachers();
  sys.moment_fn = [prep, lay](int j, const Eigen::VectorXd& theta,
                              Eigen::VectorXd& out) {
    overid_moments(*prep, prep->teachers[j], lay, theta, out);
  };
  sys.jacobian_fn = [prep, lay](int j, const Eigen::VectorXd& theta,
                                Eigen::MatrixXd& out) {
    overid_jacobian(*prep, prep->teachers[j], lay, theta, out);
  };
  sys.initial_guess = [prep, lay]() {
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(lay.P());
    if (lay.K > 0)
      theta.segment(lay.off_beta(), lay.K) =
          sym_solve(prep->sum_H1, prep->sum_a1, "score normal equations");
    if (lay.resid_y)
      theta.segment(lay.off_betay(), lay.K) =
          sym_solve(prep->sum_H3, prep->sum_a3, "outcome normal equations");
    return theta;
  };
  return sys;
}

CorrectedKappa corrected_sigma2(const PanelData& panel,
                                const VaEstimates& estimates,
                                const KappaFit& kappa) {
  const std::shared_ptr<const Prep> prep = make_prep(
      panel, estimates.phi.mode, estimates.outcome_residualized);
  const LongrunLayout lay = layout_of(*prep);
  if (estimates.phi.mode == PhiMode::stationary &&
      estimates.phi.gaps != prep->gaps)
    fail("corrected_sigma2: phi gaps do not match the panel");
  if (estimates.phi.coef.size() != lay.p)
    fail("corrected_sigma2: phi has the wrong dimension");
  if (lay.K > 0 && estimates.beta_hat.size() != lay.K)
    fail("corrected_sigma2: beta has the wrong dimension");
  if (lay.resid_y && estimates.beta_y_hat.size() != lay.K)
    fail("corrected_sigma2: beta_y has the wrong dimension");

  Eigen::VectorXd theta(lay.P());
  if (lay.K > 0) theta.segment(lay.off_beta(), lay.K) = estimates.beta_hat;
  theta.segment(lay.off_phi(), lay.p) = estimates.phi.coef;
  if (lay.resid_y)
    theta.segment(lay.off_betay(), lay.K) = estimates.beta_y_hat;
  theta[lay.off_kappa()] = kappa.kappa_hat;

  const int J = prep->n_teachers();
  const int M = lay.P();
  Eigen::MatrixXd moments(J, M);
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(M, M);
  {
    Eigen::VectorXd m(M);
    Eigen::MatrixXd Gj(M, M);
    for (int j = 0; j < J; ++j) {
      longrun_moments(*prep, prep->teachers[j], lay, theta, m);
      longrun_jacobian(*prep, prep->teachers[j], lay, theta, Gj);
      moments.row(j) = m.transpose();
      G += Gj;
    }
    G /= J;
  }

  CorrectedKappa ck;
  ck.kappa_hat = kappa.kappa_hat;
  ck.blocks.G_kappa = G(lay.row_g(), lay.off_kappa());
  ck.blocks.G_phi = G.block(lay.row_g(), lay.off_phi(), 1, lay.p);
  ck.blocks.M2phi = G.block(lay.row_m2(), lay.off_phi(), lay.p, lay.p);
  if (lay.K > 0) {
    ck.blocks.G_beta = G.block(lay.row_g(), lay.off_beta(), 1, lay.K);
    ck.blocks.M1 = G.block(lay.row_m1(), lay.off_beta(), lay.K, lay.K);
    ck.blocks.M2beta = G.block(lay.row_m2(), lay.off_beta(), lay.p, lay.K);
  }
  if (lay.resid_y) {
    ck.blocks.G_betaY = G.block(lay.row_g(), lay.off_betay(), 1, lay.K);
    ck.blocks.M3 = G.block(lay.row_m3(), lay.off_betay(), lay.K, lay.K);
  }
  if (ck.blocks.G_kappa >= 0.0)
    fail("corrected_sigma2: G_kappa is not negative; no VA variation");

  // Correction row: g + G_betaY psi3 + G_phi psi2 + (G_beta - G_phi
  // M2phi^-1 M2beta) psi1 with psi_b = -Mb^-1 m_b.
  const Eigen::MatrixXd m2phi_inv =
      sym_inverse(ck.blocks.M2phi, "corrected_sigma2 M2phi");
  Eigen::RowVectorXd c_beta;
  Eigen::MatrixXd m1_inv, m3_inv;
  if (lay.K > 0) {
    m1_inv = sym_inverse(ck.blocks.M1, "corrected_sigma2 M1");
    c_beta = ck.blocks.G_beta -
             ck.blocks.G_phi * m2phi_inv * ck.blocks.M2beta;
  }
  if (lay.resid_y) m3_inv = sym_inverse(ck.blocks.M3, "corrected_sigma2 M3");

  ck.influence.resize(J);
  ck.g_raw.resize(J);
  double s2 = 0.0, s2_naive = 0.0;
  for (int j = 0; j < J; ++j) {
    const double g = moments(j, lay.row_g());
    double bracket = g;
    const Eigen::VectorXd m2 =
        moments.block(j, lay.row_m2(), 1, lay.p).transpose();
    bracket += ck.blocks.G_phi.dot(-(m2phi_inv * m2));
    if (lay.K > 0) {
      const Eigen::VectorXd m1 =
          moments.block(j, lay.row_m1(), 1, lay.K).transpose();
      bracket += c_beta.dot(-(m1_inv * m1));
    }
    if (lay.resid_y) {
      const Eigen::VectorXd m3 =
          moments.block(j, lay.row_m3(), 1, lay.K).transpose();
      bracket += ck.blocks.G_betaY.dot(-(m3_inv * m3));
    }
    ck.influence[j] = bracket;
    ck.g_raw[j] = g;
    s2 += bracket * bracket;
    s2_naive += g * g;
  }
  const double gk2 = ck.blocks.G_kappa * ck.blocks.G_kappa;
  ck.sigma2_hat = s2 / J / gk2;
  ck.naive_s2 = s2_naive / J / gk2;
  ck.corrected_se = std::sqrt(ck.sigma2_hat / J);
  ck.naive_se = std::sqrt(ck.naive_s2 / J);
  return ck;
}

KappaFit fit_2sls_random_assignment(const PanelData& panel,
                                    bool demean_years) {
  const ClassPanel cells = class_aggregate(panel, panel.score, panel.outcome);
  if (!cells.balanced())
    fail("fit_2sls_random_assignment: requires a balanced panel");
  const int T = cells.cells_of(0);
  if (T < 2) fail("fit_2sls_random_assignment: needs >= 2 years");

  std::vector<double> y, endog;
  std::vector<std::int32_t> cluster, yr;
  std::vector<Eigen::VectorXd> zrows;
  for (int j = 0; j < cells.n_teachers(); ++j) {
    for (std::int32_t c = cells.cell_offset[j]; c < cells.cell_offset[j + 1];
         ++c) {
      if (cells.n_y[c] == 0) continue;
      y.push_back(cells.outcome_resid[c]);
      endog.push_back(cells.prelim_va[c]);
      zrows.push_back(cells.leaveout_row(j, c));
      cluster.push_back(j);
      yr.push_back(cells.year[c]);
    }
  }
  const Eigen::Index n = static_cast<Eigen::Index>(y.size());
  if (n == 0) fail("fit_2sls_random_assignment: no outcome-observed cells");

  Eigen::MatrixXd Z(n, T - 1);
  for (Eigen::Index i = 0; i < n; ++i) Z.row(i) = zrows[i].transpose();

  if (demean_years) {
    // Year fixed effects by within-year demeaning of every column.
    std::unordered_map<std::int32_t, std::pair<double, Eigen::RowVectorXd>>
        acc;
    std::unordered_map<std::int32_t, std::pair<double, std::int64_t>> acc_y;
    for (Eigen::Index i = 0; i < n; ++i) {
      auto& a = acc[yr[i]];
      if (a.second.size() == 0) a.second = Eigen::RowVectorXd::Zero(T);
      a.first += endog[i];
      a.second.head(T - 1) += Z.row(i);
      auto& ay = acc_y[yr[i]];
      ay.first += y[i];
      ay.second += 1;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& a = acc.at(yr[i]);
      const auto& ay = acc_y.at(yr[i]);
      const double m = static_cast<double>(ay.second);
      y[i] -= ay.first / m;
      endog[i] -= a.first / m;
      Z.row(i) -= a.second.head(T - 1) / m;
    }
  }

  const TslsFit fit = tsls(y, endog, Z, Eigen::MatrixXd(n, 0), cluster);
  KappaFit out;
  out.kappa_hat = fit.coef[0];
  out.naive_se = std::sqrt(fit.cov_2sls(0, 0));
  out.corrected_se = out.naive_se;  // valid as-is in this regime
  out.n_teacheryears = n;
  return out;
}

GmmFit fit_3sls(const PanelData& panel, const ThreeSlsOptions& options) {
  const int K = panel.K;
  auto [beta, score_resid] = residualize_scores(panel);
  auto [beta_y, outcome_resid] = residualize_outcome(panel, true);
  const ClassPanel cells = class_aggregate(panel, score_resid, outcome_resid);
  if (!cells.balanced()) fail("fit_3sls: requires a balanced panel");
  const int T = cells.cells_of(0);
  const int J = cells.n_teachers();
  if (T < 2) fail("fit_3sls: needs >= 2 years");
  for (int c = 0; c < cells.n_cells(); ++c)
    if (cells.n_y[c] == 0)
      fail("fit_3sls: every teacher-year cell needs observed outcomes");

  // Stage 2: 2SLS for kappa on the residualized class means; its first
  // stage is the pooled unrestricted BLP.
  std::vector<double> y2, endog2;
  std::vector<std::int32_t> cluster2;
  Eigen::MatrixXd Z2(cells.n_cells(), T - 1);
  {
    int i = 0;
    for (int j = 0; j < J; ++j)
      for (std::int32_t c = cells.cell_offset[j];
           c < cells.cell_offset[j + 1]; ++c, ++i) {
        y2.push_back(cells.outcome_resid[c]);
        endog2.push_back(cells.prelim_va[c]);
        Z2.row(i) = cells.leaveout_row(j, c).transpose();
        cluster2.push_back(j);
      }
  }
  const TslsFit pre = tsls(y2, endog2, Z2, Eigen::MatrixXd(Z2.rows(), 0),
                           cluster2);
  const double kappa_pre = pre.coef[0];

  // Stage 3: the 3T x 3T second-moment matrix of the stacked residuals.
  Eigen::MatrixXd omega(3 * T, 3 * T);
  if (options.omega_override) {
    omega = *options.omega_override;
    if (omega.rows() != 3 * T || omega.cols() != 3 * T)
      fail("fit_3sls: omega override has the wrong dimension");
  } else {
    omega.setZero();
    Eigen::VectorXd u(3 * T);
    for (int j = 0; j < J; ++j) {
      const std::int32_t b = cells.cell_offset[j];
      Eigen::VectorXd r(T), yv(T);
      for (int t = 0; t < T; ++t) {
        r[t] = cells.prelim_va[b + t];
        yv[t] = cells.outcome_resid[b + t];
      }
      u.segment(0, T) = r.array() - r.mean();
      u.segment(T, T) = yv.array() - yv.mean();
      u.segment(2 * T, T) = yv - kappa_pre * r;
      omega.selfadjointView<Eigen::Lower>().rankUpdate(u);
    }
    omega /= J;
    omega = omega.selfadjointView<Eigen::Lower>();
  }
  // Stage 4: GLS re-estimation of the full system. Each teacher carries a
  // fixed instrument block Q_j = diag(Xdd_j, Xdd_j, Z_j): Xdd_j holds the
  // within-teacher demeaned covariate class means and row t of Z_j collects
  // the other years' residualized class means. The moments are Q_j' u_j and
  // the GLS weight is the inverse of their implied second-moment matrix
  // (1/J) sum_j Q_j' Omega Q_j, which both projects the third equation onto
  // the best linear combination of the leave-out instruments and pools
  // information across equations.
  const ClassPanel raw = class_aggregate(panel, panel.score, panel.outcome);
  const int M = 2 * K + (T - 1);
  struct Cluster3 {
    Eigen::VectorXd rbar, ybar;  // raw class means
    Eigen::MatrixXd xbar, xbar_y;
    Eigen::MatrixXd Q;  // 3T x M fixed instrument block
  };
  auto data = std::make_shared<std::vector<Cluster3>>(J);
  Eigen::MatrixXd weight_sum = Eigen::MatrixXd::Zero(M, M);
  for (int j = 0; j < J; ++j) {
    Cluster3& cl = (*data)[j];
    const std::int32_t b = raw.cell_offset[j];
    cl.rbar.resize(T);
    cl.ybar.resize(T);
    cl.xbar.resize(T, K);
    cl.xbar_y.resize(T, K);
    cl.Q = Eigen::MatrixXd::Zero(3 * T, M);
    for (int t = 0; t < T; ++t) {
      cl.rbar[t] = raw.prelim_va[b + t];
      cl.ybar[t] = raw.outcome_resid[b + t];
      if (K > 0) {
        cl.xbar.row(t) = raw.x_mean.row(b + t);
        cl.xbar_y.row(t) = raw.x_mean_y.row(b + t);
      }
      cl.Q.block(2 * T + t, 2 * K, 1, T - 1) =
          cells.leaveout_row(j, b + t).transpose();
    }
    if (K > 0) {
      const Eigen::RowVectorXd xm = cl.xbar.colwise().mean();
      cl.Q.block(0, 0, T, K) = cl.xbar.rowwise() - xm;
      cl.Q.block(T, K, T, K) = cl.xbar.rowwise() - xm;
    }
    weight_sum.noalias() += cl.Q.transpose() * omega * cl.Q;
  }
  const Eigen::MatrixXd W = sym_inverse(weight_sum / J, "fit_3sls GLS weight");

  MomentSystem sys;
  if (K > 0) {
    sys.layout.push_back({"beta", K});
    sys.layout.push_back({"beta_y", K});
  }
  sys.layout.push_back({"kappa", 1});
  sys.n_moments = M;
  sys.n_clusters = J;
  const int TT = T;
  const int KK = K;
  sys.moment_fn = [data, TT, KK](int j, const Eigen::VectorXd& theta,
                                 Eigen::VectorXd& out) {
    const Cluster3& cl = (*data)[j];
    const double kappa = theta[2 * KK];
    Eigen::VectorXd rt = cl.rbar, yt = cl.ybar;
    if (KK > 0) {
      rt -= cl.xbar * theta.segment(0, KK);
      yt -= cl.xbar_y * theta.segment(KK, KK);
    }
    Eigen::VectorXd u(3 * TT);
    u.segment(0, TT) = rt.array() - rt.mean();
    u.segment(TT, TT) = yt.array() - yt.mean();
    u.segment(2 * TT, TT) = yt - kappa * rt;
    out.noalias() = cl.Q.transpose() * u;
  };
  sys.jacobian_fn = [data, TT, KK](int j, const Eigen::VectorXd& theta,
                                   Eigen::MatrixXd& out) {
    const Cluster3& cl = (*data)[j];
    const double kappa = theta[2 * KK];
    Eigen::MatrixXd du = Eigen::MatrixXd::Zero(3 * TT, 2 * KK + 1);
    Eigen::VectorXd rt = cl.rbar;
    if (KK > 0) {
      rt -= cl.xbar * theta.segment(0, KK);
      const Eigen::RowVectorXd xm = cl.xbar.colwise().mean();
      const Eigen::RowVectorXd xmy = cl.xbar_y.colwise().mean();
      du.block(0, 0, TT, KK) = -(cl.xbar.rowwise() - xm);
      du.block(TT, KK, TT, KK) = -(cl.xbar_y.rowwise() - xmy);
      du.block(2 * TT, 0, TT, KK) = kappa * cl.xbar;
      du.block(2 * TT, KK, TT, KK) = -cl.xbar_y;
    }
    du.block(2 * TT, 2 * KK, TT, 1) = -rt;
    out.noalias() = cl.Q.transpose() * du;
  };
  sys.initial_guess = [KK, beta = beta, beta_y = beta_y, kappa_pre]() {
    Eigen::VectorXd theta(2 * KK + 1);
    if (KK > 0) {
      theta.segment(0, KK) = beta;
      theta.segment(KK, KK) = beta_y;
    }
    theta[2 * KK] = kappa_pre;
    return theta;
  };

  return gmm_minimize(sys, W);
}

namespace {

/** Shared assembly for the VA-as-outcome fit and its moment system. */
struct VaOutPrep {
  int K = 0, K_d = 0, J = 0;
  bool leaveout = false;
  // per teacher
  std::vector<Eigen::MatrixXd> D;    // T x K_d
  std::vector<Eigen::VectorXd> ybar; // regressand intercept part (raw scale)
  std::vector<Eigen::MatrixXd> xt;   // T x K, regressand covariate loadings
  std::vector<Eigen::MatrixXd> H1;
  std::vector<Eigen::VectorXd> a1;
  std::vector<std::int32_t> cell_teacher;  // per cell, for clustering
  Eigen::MatrixXd sum_H1;
  Eigen::VectorXd sum_a1;
  Eigen::MatrixXd sum_DD;  // K_d x K_d
};

std::shared_ptr<const VaOutPrep> make_va_out_prep(const PanelData& panel,
                                                  const TeacherYearVars& dvars,
                                                  bool leaveout) {
  auto prep = std::make_shared<VaOutPrep>();
  const ClassPanel raw = class_aggregate(panel, panel.score, panel.outcome);
  const int K = panel.K;
  const int J = raw.n_teachers();
  prep->K = K;
  prep->K_d = dvars.K_d;
  prep->J = J;
  prep->leaveout = leaveout;
  prep->D.resize(J);
  prep->ybar.resize(J);
  prep->xt.resize(J);
  prep->H1.resize(J);
  prep->a1.resize(J);
  prep->sum_H1.setZero(K, K);
  prep->sum_a1.setZero(K);
  prep->sum_DD.setZero(dvars.K_d, dvars.K_d);

  for (int j = 0; j < J; ++j) {
    const std::int32_t b = raw.cell_offset[j];
    const int T = raw.cells_of(j);
    Eigen::MatrixXd D(T, dvars.K_d);
    Eigen::VectorXd rb(T);
    Eigen::MatrixXd xb(T, K);
    for (int t = 0; t < T; ++t) {
      D.row(t) = dvars.lookup(raw.teacher_ids[j], raw.year[b + t]);
      rb[t] = raw.prelim_va[b + t];
      if (K > 0) xb.row(t) = raw.x_mean.row(b + t);
    }
    if (leaveout) {
      // Replace each cell by the mean over the teacher's other cells.
      const double rsum = rb.sum();
      const Eigen::RowVectorXd xsum =
          K > 0 ? Eigen::RowVectorXd(xb.colwise().sum())
                : Eigen::RowVectorXd();
      Eigen::VectorXd rlo(T);
      Eigen::MatrixXd xlo(T, K);
      for (int t = 0; t < T; ++t) {
        rlo[t] = (rsum - rb[t]) / (T - 1);
        if (K > 0) xlo.row(t) = (xsum - xb.row(t)) / (T - 1);
      }
      rb = rlo;
      xb = xlo;
    }
    prep->D[j] = std::move(D);
    prep->ybar[j] = std::move(rb);
    prep->xt[j] = std::move(xb);
    prep->sum_DD += prep->D[j].transpose() * prep->D[j];
    for (int t = 0; t < T; ++t) prep->cell_teacher.push_back(j);

    Eigen::MatrixXd H3;
    Eigen::VectorXd a3;
    student_stats(panel, j, prep->H1[j], prep->a1[j], H3, a3);
    prep->sum_H1 += prep->H1[j];
    prep->sum_a1 += prep->a1[j];
  }
  return prep;
}

}  // namespace

MomentSystem build_va_outcome_system(const PanelData& panel,
                                     const TeacherYearVars& dvars,
                                     bool leaveout) {
  const std::shared_ptr<const VaOutPrep> prep =
      make_va_out_prep(panel, dvars, leaveout);
  const int K = prep->K;
  const int K_d = prep->K_d;

  MomentSystem sys;
  if (K > 0) sys.layout.push_back({"beta", K});
  sys.layout.push_back({"alpha", K_d});
  sys.n_moments = K + K_d;
  sys.n_clusters = prep->J;
  sys.moment_fn = [prep, K, K_d](int j, const Eigen::VectorXd& theta,
                                 Eigen::VectorXd& out) {
    const Eigen::VectorXd alpha = theta.segment(K, K_d);
    Eigen::VectorXd yv = prep->ybar[j];
    if (K > 0) {
      const Eigen::VectorXd beta = theta.segment(0, K);
      yv -= prep->xt[j] * beta;
      out.segment(0, K) = prep->a1[j] - prep->H1[j] * beta;
    }
    out.segment(K, K_d) =
        prep->D[j].transpose() * (yv - prep->D[j] * alpha);
  };
  sys.jacobian_fn = [prep, K, K_d](int j, const Eigen::VectorXd&,
                                   Eigen::MatrixXd& out) {
    out.setZero(K + K_d, K + K_d);
    if (K > 0) {
      out.block(0, 0, K, K) = -prep->H1[j];
      out.block(K, 0, K_d, K) = -prep->D[j].transpose() * prep->xt[j];
    }
    out.block(K, K, K_d, K_d) = -prep->D[j].transpose() * prep->D[j];
  };
  sys.closed_form = [prep, K, K_d]() {
    Eigen::VectorXd theta(K + K_d);
    Eigen::VectorXd beta;
    if (K > 0) {
      beta = sym_solve(prep->sum_H1, prep->sum_a1, "score normal equations");
      theta.segment(0, K) = beta;
    }
    Eigen::VectorXd b = Eigen::VectorXd::Zero(K_d);
    for (int j = 0; j < prep->J; ++j) {
      Eigen::VectorXd yv = prep->ybar[j];
      if (K > 0) yv -= prep->xt[j] * beta;
      b += prep->D[j].transpose() * yv;
    }
    theta.segment(K, K_d) =
        sym_solve(prep->sum_DD, b, "VA-outcome normal equations");
    return theta;
  };
  sys.initial_guess = sys.closed_form;
  return sys;
}

VaOutcomeFit va_outcome_fit(const PanelData& panel,
                            const TeacherYearVars& dvars, bool leaveout) {
  const std::shared_ptr<const VaOutPrep> prep =
      make_va_out_prep(panel, dvars, leaveout);
  const int K = prep->K;
  const int K_d = prep->K_d;
  const int J = prep->J;

  Eigen::VectorXd beta;
  if (K > 0)
    beta = sym_solve(prep->sum_H1, prep->sum_a1, "score normal equations");

  // alpha from the pooled no-intercept OLS of the regressand on D.
  Eigen::VectorXd b = Eigen::VectorXd::Zero(K_d);
  std::vector<Eigen::VectorXd> yv(J);
  for (int j = 0; j < J; ++j) {
    yv[j] = prep->ybar[j];
    if (K > 0) yv[j] -= prep->xt[j] * beta;
    b += prep->D[j].transpose() * yv[j];
  }
  const Eigen::MatrixXd dd_inv =
      sym_inverse(prep->sum_DD, "VA-outcome normal equations");

  VaOutcomeFit fit;
  fit.alpha_hat = dd_inv * b;
  fit.n_cells = static_cast<int>(prep->cell_teacher.size());

  const Eigen::MatrixXd h1_inv =
      K > 0 ? sym_inverse(prep->sum_H1 / J, "corrected VA-outcome H1")
            : Eigen::MatrixXd();
  Eigen::MatrixXd edx = Eigen::MatrixXd::Zero(K_d, K);
  if (K > 0) {
    for (int j = 0; j < J; ++j)
      edx += prep->D[j].transpose() * prep->xt[j];
    edx /= J;
  }

  Eigen::MatrixXd meat_naive = Eigen::MatrixXd::Zero(K_d, K_d);
  Eigen::MatrixXd meat_corr = Eigen::MatrixXd::Zero(K_d, K_d);
  for (int j = 0; j < J; ++j) {
    const Eigen::VectorXd resid = yv[j] - prep->D[j] * fit.alpha_hat;
    const Eigen::VectorXd score = prep->D[j].transpose() * resid;
    meat_naive += score * score.transpose();
    Eigen::VectorXd gamma = score;
    if (K > 0) {
      const Eigen::VectorXd m1 = prep->a1[j] - prep->H1[j] * beta;
      gamma -= edx * (h1_inv * m1);
    }
    meat_corr += gamma * gamma.transpose();
  }
  fit.naive_cov = dd_inv * meat_naive * dd_inv;
  fit.v1_hat = dd_inv * meat_corr * dd_inv;

  if (K > 0) {
    const DxTest dx = dx_orthogonality_test(panel, dvars);
    fit.dx_cross = dx.cross_moments;
    fit.dx_stat = dx.statistic;
    fit.dx_p = dx.p_value;
  } else {
    fit.dx_cross = Eigen::MatrixXd(K_d, 0);
    fit.dx_stat = 0.0;
    fit.dx_p = 1.0;
  }
  return fit;
}

DxTest dx_orthogonality_test(const PanelData& panel,
                             const TeacherYearVars& dvars) {
  if (panel.K == 0)
    fail("dx_orthogonality_test: panel has no covariates");
  const ClassPanel raw = class_aggregate(panel, panel.score, panel.outcome);
  const int J = raw.n_teachers();
  if (J < 2) fail("dx_orthogonality_test: needs >= 2 teachers");
  const int dim = dvars.K_d * panel.K;

  Eigen::MatrixXd C(J, dim);
  for (int j = 0; j < J; ++j) {
    const std::int32_t b = raw.cell_offset[j];
    const int T = raw.cells_of(j);
    Eigen::MatrixXd cross = Eigen::MatrixXd::Zero(dvars.K_d, panel.K);
    for (int t = 0; t < T; ++t)
      cross += dvars.lookup(raw.teacher_ids[j], raw.year[b + t]).transpose() *
               raw.x_mean.row(b + t);
    C.row(j) = Eigen::Map<Eigen::VectorXd>(cross.data(), dim).transpose();
  }

  DxTest test;
  const Eigen::VectorXd cbar = C.colwise().mean().transpose();
  const Eigen::MatrixXd centered = C.rowwise() - cbar.transpose();
  const Eigen::MatrixXd sigma =
      centered.transpose() * centered / (J - 1);
  const Eigen::VectorXd solved =
      sym_solve(sigma, cbar, "dx_orthogonality_test covariance");
  test.statistic = J * cbar.dot(solved);
  test.dof = dim;
  test.p_value = chi2_tail(test.statistic, test.dof);
  test.cross_moments =
      Eigen::Map<const Eigen::MatrixXd>(cbar.data(), dvars.K_d, panel.K);
  return test;
}

VarianceGap variance_gap_diagnostic(const CorrectedKappa& fit) {
  const std::size_t J = fit.influence.size();
  if (J == 0 || fit.g_raw.size() != J)
    fail("variance_gap_diagnostic: fit carries no per-teacher moments");
  const double gk2 = fit.blocks.G_kappa * fit.blocks.G_kappa;
  double cov = 0.0, var = 0.0;
  for (std::size_t j = 0; j < J; ++j) {
    const double c = fit.influence[j] - fit.g_raw[j];
    cov += 2.0 * fit.g_raw[j] * c;
    var += c * c;
  }
  VarianceGap gap;
  gap.sigma2_corrected = fit.sigma2_hat;
  gap.sigma2_naive = fit.naive_s2;
  gap.cov_term = cov / J / gk2;
  gap.var_term = var / J / gk2;
  return gap;
}

}  // namespace vagmm
