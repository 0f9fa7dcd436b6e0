#include "vagmm/gmm.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "vagmm/regression.hpp"
#include "vagmm/stats.hpp"

namespace vagmm {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void check_system(const MomentSystem& system) {
  if (!system.moment_fn) fail("moment system has no moment_fn");
  if (system.n_moments <= 0 || system.n_clusters <= 0)
    fail("moment system has empty dimensions");
  if (system.n_params() <= 0) fail("moment system has no parameters");
  if (system.n_moments < system.n_params())
    fail("moment system is under-identified");
}

Eigen::VectorXd mean_moments(const MomentSystem& system,
                             const Eigen::VectorXd& theta) {
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(system.n_moments);
  Eigen::VectorXd g(system.n_moments);
  for (int j = 0; j < system.n_clusters; ++j) {
    system.moment_fn(j, theta, g);
    acc += g;
  }
  return acc / system.n_clusters;
}

Eigen::MatrixXd fd_jacobian(const MomentSystem& system,
                            const Eigen::VectorXd& theta) {
  const int P = system.n_params();
  Eigen::MatrixXd G(system.n_moments, P);
  Eigen::VectorXd tp = theta, tm = theta;
  for (int k = 0; k < P; ++k) {
    const double h = 1e-6 * std::max(1.0, std::fabs(theta[k]));
    tp[k] = theta[k] + h;
    tm[k] = theta[k] - h;
    G.col(k) = (mean_moments(system, tp) - mean_moments(system, tm)) / (2 * h);
    tp[k] = theta[k];
    tm[k] = theta[k];
  }
  return G;
}

Eigen::MatrixXd per_cluster(const MomentSystem& system,
                            const Eigen::VectorXd& theta) {
  Eigen::MatrixXd out(system.n_clusters, system.n_moments);
  Eigen::VectorXd g(system.n_moments);
  for (int j = 0; j < system.n_clusters; ++j) {
    system.moment_fn(j, theta, g);
    out.row(j) = g.transpose();
  }
  return out;
}

}  // namespace

int MomentSystem::block_offset(const std::string& name) const {
  int off = 0;
  for (const auto& b : layout) {
    if (b.name == name) return off;
    off += b.dim;
  }
  return -1;
}

MomentEval evaluate(const MomentSystem& system, const Eigen::VectorXd& theta,
                    bool center_s, bool want_jacobian) {
  check_system(system);
  if (theta.size() != system.n_params())
    fail("evaluate: theta has the wrong dimension");
  const int M = system.n_moments;
  const int J = system.n_clusters;

  MomentEval ev;
  ev.g_bar = Eigen::VectorXd::Zero(M);
  ev.S_hat = Eigen::MatrixXd::Zero(M, M);
  Eigen::VectorXd g(M);
  for (int j = 0; j < J; ++j) {
    system.moment_fn(j, theta, g);
    if (!g.allFinite())
      fail("evaluate: non-finite moments for cluster " + std::to_string(j));
    ev.g_bar += g;
    ev.S_hat.selfadjointView<Eigen::Lower>().rankUpdate(g);
  }
  ev.g_bar /= J;
  ev.S_hat /= J;
  ev.S_hat = ev.S_hat.selfadjointView<Eigen::Lower>();
  if (center_s) ev.S_hat -= ev.g_bar * ev.g_bar.transpose();

  if (want_jacobian) {
    if (system.jacobian_fn) {
      ev.G_hat = Eigen::MatrixXd::Zero(M, system.n_params());
      Eigen::MatrixXd Gj(M, system.n_params());
      for (int j = 0; j < J; ++j) {
        system.jacobian_fn(j, theta, Gj);
        if (!Gj.allFinite())
          fail("evaluate: non-finite Jacobian for cluster " +
               std::to_string(j));
        ev.G_hat += Gj;
      }
      ev.G_hat /= J;
    } else {
      ev.G_hat = fd_jacobian(system, theta);
    }
  }
  return ev;
}

GmmFit solve_exactly_identified(const MomentSystem& system) {
  check_system(system);
  if (!system.exactly_identified())
    fail("solve_exactly_identified: system is overidentified");
  if (!system.closed_form)
    fail("solve_exactly_identified: system has no closed form");

  GmmFit fit;
  fit.theta_hat = system.closed_form();
  if (fit.theta_hat.size() != system.n_params())
    fail("solve_exactly_identified: closed form has the wrong dimension");

  const MomentEval ev = evaluate(system, fit.theta_hat);
  for (int m = 0; m < system.n_moments; ++m) {
    const double scale = 1.0 + std::sqrt(std::max(0.0, ev.S_hat(m, m)));
    if (std::fabs(ev.g_bar[m]) > 1e-8 * scale)
      fail("solve_exactly_identified: closed form leaves mean moment " +
           std::to_string(m) + " at " + std::to_string(ev.g_bar[m]));
  }

  fit.W = Eigen::MatrixXd::Identity(system.n_moments, system.n_moments);
  fit.G_hat = ev.G_hat;
  fit.S_hat = ev.S_hat;
  fit.n_clusters = system.n_clusters;
  fit.per_cluster_moments = per_cluster(system, fit.theta_hat);
  fit.iterations = 0;

  Eigen::FullPivLU<Eigen::MatrixXd> lu(ev.G_hat);
  if (!lu.isInvertible())
    fail("solve_exactly_identified: Jacobian is singular");
  const Eigen::MatrixXd ginv = lu.inverse();
  fit.omega_hat = ginv * ev.S_hat * ginv.transpose() / system.n_clusters;
  return fit;
}

GmmFit gmm_minimize(const MomentSystem& system, const Eigen::MatrixXd& W,
                    const GmmOptions& options) {
  check_system(system);
  const int M = system.n_moments;
  const int P = system.n_params();
  if (W.rows() != M || W.cols() != M)
    fail("gmm_minimize: weighting matrix has the wrong dimension");

  Eigen::VectorXd theta;
  if (options.start)
    theta = *options.start;
  else if (system.initial_guess)
    theta = system.initial_guess();
  else
    theta = Eigen::VectorXd::Zero(P);
  if (theta.size() != P) fail("gmm_minimize: start has the wrong dimension");

  const auto objective = [&](const Eigen::VectorXd& th) {
    const Eigen::VectorXd gb = mean_moments(system, th);
    return gb.dot(W * gb);
  };

  std::vector<double> trajectory;
  double q = objective(theta);
  trajectory.push_back(q);

  int it = 0;
  for (; it < options.max_iterations; ++it) {
    const MomentEval ev = evaluate(system, theta, false, true);
    const Eigen::VectorXd grad = ev.G_hat.transpose() * (W * ev.g_bar);
    const Eigen::MatrixXd gwg = ev.G_hat.transpose() * W * ev.G_hat;
    const Eigen::VectorXd step =
        sym_solve(gwg, Eigen::MatrixXd(-grad), "gmm_minimize normal equations");

    // Armijo backtracking on the GMM objective.
    double alpha = 1.0;
    double q_new = q;
    Eigen::VectorXd theta_new = theta;
    const double slope = 2.0 * grad.dot(step);  // d/da Q(theta + a step)
    bool accepted = false;
    while (alpha >= 1e-12) {
      theta_new = theta + alpha * step;
      q_new = objective(theta_new);
      if (q_new <= q + 1e-4 * alpha * slope) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      // No descent left; accept convergence only if the full step is tiny.
      if (step.norm() <= options.step_tol * (1.0 + theta.norm())) break;
      std::ostringstream msg;
      msg << "gmm_minimize: line search failed; objective trajectory:";
      for (double v : trajectory) msg << " " << v;
      fail(msg.str());
    }

    const double move = (alpha * step).norm();
    theta = theta_new;
    q = q_new;
    trajectory.push_back(q);
    if (move <= options.step_tol * (1.0 + theta.norm())) {
      ++it;
      break;
    }
  }
  if (it >= options.max_iterations) {
    std::ostringstream msg;
    msg << "gmm_minimize: no convergence in " << options.max_iterations
        << " iterations; objective trajectory:";
    for (double v : trajectory) msg << " " << v;
    fail(msg.str());
  }

  GmmFit fit;
  fit.theta_hat = theta;
  fit.W = W;
  const MomentEval ev = evaluate(system, theta, options.center_s, true);
  fit.G_hat = ev.G_hat;
  fit.S_hat = ev.S_hat;
  fit.n_clusters = system.n_clusters;
  fit.per_cluster_moments = per_cluster(system, theta);
  fit.iterations = it;
  fit.omega_hat = sandwich_covariance(fit);
  return fit;
}

Eigen::MatrixXd sandwich_covariance(const GmmFit& fit) {
  const Eigen::MatrixXd gwg =
      fit.G_hat.transpose() * fit.W * fit.G_hat;
  const Eigen::MatrixXd bread = sym_inverse(gwg, "sandwich bread");
  const Eigen::MatrixXd gw = fit.G_hat.transpose() * fit.W;
  return bread * gw * fit.S_hat * gw.transpose() * bread.transpose() /
         fit.n_clusters;
}

GmmFit optimal_gmm(const MomentSystem& system, const GmmOptions& options) {
  check_system(system);
  const int M = system.n_moments;

  GmmFit first =
      gmm_minimize(system, Eigen::MatrixXd::Identity(M, M), options);
  const Eigen::MatrixXd w_star =
      sym_inverse(first.S_hat, "optimal weighting matrix");

  GmmOptions second_options = options;
  second_options.start = first.theta_hat;
  GmmFit fit = gmm_minimize(system, 0.5 * (w_star + w_star.transpose()),
                            second_options);

  const Eigen::MatrixXd gwg = fit.G_hat.transpose() * fit.W * fit.G_hat;
  fit.omega_hat = sym_inverse(gwg, "optimal GMM covariance") / fit.n_clusters;
  if (M > system.n_params()) {
    const Eigen::VectorXd g_bar =
        fit.per_cluster_moments.colwise().mean().transpose();
    fit.j_stat = fit.n_clusters * g_bar.dot(fit.W * g_bar);
  }
  return fit;
}

JTest j_test(const GmmFit& fit, const MomentSystem& system) {
  if (system.exactly_identified())
    fail("j_test: system is exactly identified; no overidentifying restrictions");
  if (!fit.j_stat)
    fail("j_test: fit does not carry a J statistic (use optimal_gmm)");
  JTest t;
  t.statistic = *fit.j_stat;
  t.dof = system.n_moments - system.n_params();
  t.p_value = chi2_tail(t.statistic, t.dof);
  return t;
}

}  // namespace vagmm
