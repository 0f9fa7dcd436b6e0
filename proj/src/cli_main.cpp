/**
 * \file cli_main.cpp
 * \brief `vagmm` command line tool: simulate panels, fit the long-run
 *        effect of teacher VA on outcomes, run the VA-as-outcome
 *        regression, run the overidentification test, and drive the
 *        Monte Carlo experiment profiles.
 *
 * Exit codes: 0 success, 1 usage error, 2 estimation failure.
 */

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vagmm/gmm.hpp"
#include "vagmm/jsonio.hpp"
#include "vagmm/longrun.hpp"
#include "vagmm/mc.hpp"
#include "vagmm/panel.hpp"
#include "vagmm/stats.hpp"
#include "vagmm/va.hpp"

namespace {

vagmm::JsonValue vec_json(const Eigen::VectorXd& v) {
  vagmm::JsonValue a = vagmm::JsonValue::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

vagmm::JsonValue vec_json(const std::vector<std::int32_t>& v) {
  vagmm::JsonValue a = vagmm::JsonValue::array();
  for (const std::int32_t x : v) a.push_back(static_cast<std::int64_t>(x));
  return a;
}

void emit(const vagmm::JsonValue& doc, const std::string& out_path) {
  const std::string text = doc.dump() + "\n";
  if (out_path.empty()) {
    std::cout << text;
  } else {
    vagmm::spit(out_path, text);
  }
}

struct FitArgs {
  std::string input;
  std::string phi_mode = "stationary";
  bool residualize_outcome = true;
  std::string estimator = "multistep";
  std::string se = "both";
  std::string cluster = "teacher";
  std::string out;
};

vagmm::PhiMode parse_phi_mode(const std::string& s) {
  return s == "unrestricted" ? vagmm::PhiMode::unrestricted
                             : vagmm::PhiMode::stationary;
}

void panel_counts(const vagmm::PanelData& panel, vagmm::JsonValue& doc) {
  vagmm::JsonValue sizes = vagmm::JsonValue::object();
  sizes.set("n_students", panel.n_records());
  sizes.set("n_teachers", panel.n_teachers());
  const vagmm::ClassPanel cells =
      vagmm::class_aggregate(panel, panel.score, panel.outcome);
  sizes.set("n_teacher_years", cells.n_cells());
  sizes.set("excluded_teachers", panel.excluded_teachers);
  doc.set("sample", std::move(sizes));
}

int run_fit_longrun(const FitArgs& args) {
  const vagmm::PanelData panel = vagmm::load_panel(args.input);
  const vagmm::PhiMode mode = parse_phi_mode(args.phi_mode);
  const bool want_naive = args.se != "corrected";
  const bool want_corrected = args.se != "naive";

  vagmm::JsonValue doc = vagmm::JsonValue::object();
  doc.set("tool", "fit-longrun");
  {
    vagmm::JsonValue cfg = vagmm::JsonValue::object();
    cfg.set("input", args.input);
    cfg.set("phi_mode", args.phi_mode);
    cfg.set("residualize_outcome", args.residualize_outcome);
    cfg.set("estimator", args.estimator);
    cfg.set("se", args.se);
    cfg.set("cluster", args.cluster);
    doc.set("config", std::move(cfg));
  }
  panel_counts(panel, doc);

  if (args.estimator == "multistep") {
    const vagmm::VaEstimates est =
        vagmm::fit_va_pipeline(panel, mode, args.residualize_outcome);
    const vagmm::KappaFit kf =
        vagmm::multistep_ols_kappa(est.prelim, est.mu_star);
    doc.set("beta", vec_json(est.beta_hat));
    doc.set("beta_y", vec_json(est.beta_y_hat));
    if (mode == vagmm::PhiMode::stationary)
      doc.set("phi_gaps", vec_json(est.phi.gaps));
    doc.set("phi", vec_json(est.phi.coef));
    doc.set("kappa", kf.kappa_hat);
    if (want_naive) doc.set("se_naive", kf.naive_se);
    if (want_corrected) {
      const vagmm::CorrectedKappa ck =
          vagmm::corrected_sigma2(panel, est, kf);
      doc.set("se_corrected", ck.corrected_se);
      doc.set("sigma2_corrected", ck.sigma2_hat);
      doc.set("sigma2_naive", ck.naive_s2);
    }
    doc.set("n_teacher_years_used", kf.n_teacheryears);
  } else if (args.estimator == "gmm") {
    const vagmm::MomentSystem sys =
        vagmm::build_longrun_system(panel, mode, args.residualize_outcome);
    const vagmm::GmmFit fit = vagmm::solve_exactly_identified(sys);
    const int off_beta = sys.block_offset("beta");
    const int off_phi = sys.block_offset("phi");
    const int off_by = sys.block_offset("beta_y");
    const int off_kappa = sys.block_offset("kappa");
    if (off_beta >= 0)
      doc.set("beta", vec_json(fit.theta_hat.segment(off_beta, panel.K)));
    doc.set("phi", vec_json(fit.theta_hat.segment(
                       off_phi, off_by >= 0 ? off_by - off_phi
                                            : off_kappa - off_phi)));
    if (off_by >= 0)
      doc.set("beta_y", vec_json(fit.theta_hat.segment(off_by, panel.K)));
    doc.set("kappa", fit.theta_hat[off_kappa]);
    const double se = std::sqrt(fit.omega_hat(off_kappa, off_kappa));
    if (want_naive) doc.set("se_naive", se);
    if (want_corrected) doc.set("se_corrected", se);
  } else if (args.estimator == "optimal-gmm") {
    const vagmm::MomentSystem sys =
        vagmm::build_overid_system(panel, args.residualize_outcome);
    const vagmm::GmmFit fit = vagmm::optimal_gmm(sys);
    const int off_beta = sys.block_offset("beta");
    const int off_by = sys.block_offset("beta_y");
    const int off_kappa = sys.block_offset("kappa");
    if (off_beta >= 0)
      doc.set("beta", vec_json(fit.theta_hat.segment(off_beta, panel.K)));
    if (off_by >= 0)
      doc.set("beta_y", vec_json(fit.theta_hat.segment(off_by, panel.K)));
    doc.set("kappa", fit.theta_hat[off_kappa]);
    const double se = std::sqrt(fit.omega_hat(off_kappa, off_kappa));
    if (want_naive) doc.set("se_naive", se);
    if (want_corrected) doc.set("se_corrected", se);
    if (fit.j_stat) {
      const vagmm::JTest jt = vagmm::j_test(fit, sys);
      vagmm::JsonValue j = vagmm::JsonValue::object();
      j.set("statistic", jt.statistic);
      j.set("dof", jt.dof);
      j.set("p_value", jt.p_value);
      doc.set("j_test", std::move(j));
    }
  } else if (args.estimator == "2sls") {
    const vagmm::KappaFit kf =
        vagmm::fit_2sls_random_assignment(panel, true);
    doc.set("kappa", kf.kappa_hat);
    if (want_naive) doc.set("se_naive", kf.naive_se);
    if (want_corrected && kf.corrected_se)
      doc.set("se_corrected", *kf.corrected_se);
    doc.set("n_teacher_years_used", kf.n_teacheryears);
  } else {  // 3sls
    const vagmm::GmmFit fit = vagmm::fit_3sls(panel);
    const int off_kappa = 2 * panel.K;
    if (panel.K > 0) {
      doc.set("beta", vec_json(fit.theta_hat.segment(0, panel.K)));
      doc.set("beta_y", vec_json(fit.theta_hat.segment(panel.K, panel.K)));
    }
    doc.set("kappa", fit.theta_hat[off_kappa]);
    const double se = std::sqrt(fit.omega_hat(off_kappa, off_kappa));
    if (want_naive) doc.set("se_naive", se);
    if (want_corrected) doc.set("se_corrected", se);
  }

  emit(doc, args.out);
  return 0;
}

struct VaOutArgs {
  std::string input;
  std::string dvars;
  bool leaveout = false;
  std::string out;
};

int run_fit_va_outcome(const VaOutArgs& args) {
  const vagmm::PanelData panel = vagmm::load_panel(args.input);
  const vagmm::TeacherYearVars dvars =
      vagmm::load_teacher_year_vars(args.dvars);
  const vagmm::VaOutcomeFit fit =
      vagmm::va_outcome_fit(panel, dvars, args.leaveout);

  vagmm::JsonValue doc = vagmm::JsonValue::object();
  doc.set("tool", "fit-va-outcome");
  {
    vagmm::JsonValue cfg = vagmm::JsonValue::object();
    cfg.set("input", args.input);
    cfg.set("dvars", args.dvars);
    cfg.set("leaveout", args.leaveout);
    doc.set("config", std::move(cfg));
  }
  panel_counts(panel, doc);

  doc.set("alpha", vec_json(fit.alpha_hat));
  vagmm::JsonValue se_n = vagmm::JsonValue::array();
  vagmm::JsonValue se_c = vagmm::JsonValue::array();
  for (Eigen::Index k = 0; k < fit.alpha_hat.size(); ++k) {
    se_n.push_back(std::sqrt(fit.naive_cov(k, k)));
    se_c.push_back(std::sqrt(fit.v1_hat(k, k)));
  }
  doc.set("se_naive", std::move(se_n));
  doc.set("se_corrected", std::move(se_c));
  doc.set("n_cells", fit.n_cells);

  if (panel.K > 0) {
    vagmm::JsonValue dx = vagmm::JsonValue::object();
    dx.set("statistic", fit.dx_stat);
    dx.set("dof", static_cast<std::int64_t>(fit.dx_cross.size()));
    dx.set("p_value", fit.dx_p);
    doc.set("dx_test", std::move(dx));
  }

  emit(doc, args.out);
  return 0;
}

struct OveridArgs {
  std::string input;
  bool residualize_outcome = true;
  std::string out;
};

int run_overid_test(const OveridArgs& args) {
  const vagmm::PanelData panel = vagmm::load_panel(args.input);
  const vagmm::MomentSystem sys =
      vagmm::build_overid_system(panel, args.residualize_outcome);
  if (sys.exactly_identified()) {
    std::cerr << "overid-test: the system is exactly identified (zero "
                 "degrees of freedom); need more than two years per teacher"
              << std::endl;
    return 2;
  }
  const vagmm::GmmFit fit = vagmm::optimal_gmm(sys);
  const vagmm::JTest jt = vagmm::j_test(fit, sys);

  vagmm::JsonValue doc = vagmm::JsonValue::object();
  doc.set("tool", "overid-test");
  {
    vagmm::JsonValue cfg = vagmm::JsonValue::object();
    cfg.set("input", args.input);
    cfg.set("residualize_outcome", args.residualize_outcome);
    doc.set("config", std::move(cfg));
  }
  panel_counts(panel, doc);
  const int off_kappa = sys.block_offset("kappa");
  doc.set("kappa", fit.theta_hat[off_kappa]);
  doc.set("se", std::sqrt(fit.omega_hat(off_kappa, off_kappa)));
  doc.set("statistic", jt.statistic);
  doc.set("dof", jt.dof);
  doc.set("p_value", jt.p_value);

  emit(doc, args.out);
  return 0;
}

struct SimArgs {
  vagmm::DgpConfig config;
  std::uint64_t rep = 0;
  std::string mu_model = "constant";
  std::string out;
  std::string dvars_out;
};

int run_simulate(const SimArgs& args) {
  vagmm::DgpConfig config = args.config;
  if (args.mu_model == "iid") config.mu_model = vagmm::MuModel::iid_per_year;
  else if (args.mu_model == "persistent")
    config.mu_model = vagmm::MuModel::persistent;
  else config.mu_model = vagmm::MuModel::constant;

  const vagmm::SimulatedPanel sim =
      vagmm::simulate_panel_full(config, args.rep);
  vagmm::write_panel_csv(sim.panel, args.out);
  if (!args.dvars_out.empty()) {
    vagmm::CsvWriter csv(args.dvars_out);
    std::vector<std::string> header = {"teacher_id", "year"};
    for (int k = 0; k < sim.dvars.K_d; ++k)
      header.push_back("d" + std::to_string(k + 1));
    csv.write_row(header);
    for (std::size_t r = 0; r < sim.dvars.teacher_id.size(); ++r) {
      std::vector<std::string> row = {sim.dvars.teacher_id[r],
                                      std::to_string(sim.dvars.year[r])};
      for (int k = 0; k < sim.dvars.K_d; ++k)
        row.push_back(vagmm::format_double(
            sim.dvars.D(static_cast<Eigen::Index>(r), k)));
      csv.write_row(row);
    }
  }
  std::cerr << "simulate: wrote " << sim.panel.n_records() << " students, "
            << sim.panel.n_teachers() << " teachers to " << args.out
            << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Estimated-value-added regression toolkit: VA construction, long-run "
      "effect estimation with corrected standard errors, specification "
      "tests, and the Monte Carlo experiment profiles."};
  app.require_subcommand(1);

  // simulate
  SimArgs sim;
  CLI::App* c_sim =
      app.add_subcommand("simulate", "Draw one synthetic panel to CSV");
  c_sim->add_option("--out", sim.out, "Output panel CSV path")->required();
  c_sim->add_option("--dvars-out", sim.dvars_out,
                    "Output CSV for teacher-year variables (with --num-dvars)");
  c_sim->add_option("--teachers", sim.config.n_teachers, "Teachers J");
  c_sim->add_option("--class-size", sim.config.class_size, "Students per class");
  c_sim->add_option("--years", sim.config.n_years, "Years T");
  c_sim->add_option("--kappa0", sim.config.kappa0, "True long-run effect");
  c_sim->add_option("--beta0", sim.config.beta0, "Score covariate slope");
  c_sim->add_option("--beta0-y", sim.config.beta0_y, "Outcome covariate slope");
  c_sim->add_option("--rho", sim.config.rho, "Sorting strength in [0,1]");
  c_sim->add_option("--var-mu", sim.config.var_mu, "Var of teacher effect");
  c_sim->add_option("--var-eps", sim.config.var_eps, "Score shock scale");
  c_sim->add_option("--var-eta", sim.config.var_eta, "Outcome shock scale");
  c_sim->add_flag("--no-covariates{false}", sim.config.include_covariates,
                  "Drop the covariate from the model (K = 0)");
  c_sim->add_flag("--no-uniform-scale{false}", sim.config.uniform_shock_scale,
                  "Disable the U[0,2] shock scaling");
  c_sim->add_flag("--het-effects", sim.config.het_effects,
                  "Student-specific long-run effects");
  c_sim->add_option("--het-sd", sim.config.het_effects_sd,
                    "SD of the student effect around kappa0");
  c_sim->add_option("--num-dvars", sim.config.num_dvars,
                    "Teacher-year variables to draw");
  c_sim->add_option("--eta-mu-coef", sim.config.eta_mu_coef,
                    "First-year outcome loading on the teacher effect");
  c_sim->add_option("--mu-model", sim.mu_model, "Teacher effect dynamics")
      ->check(CLI::IsMember({"constant", "iid", "persistent"}));
  c_sim->add_option("--sigma-omega", sim.config.sigma_omega,
                    "Innovation SD for --mu-model persistent");
  c_sim->add_option("--seed", sim.config.seed, "Design seed");
  c_sim->add_option("--rep", sim.rep, "Replication index");

  // fit-longrun
  FitArgs fit;
  CLI::App* c_fit = app.add_subcommand(
      "fit-longrun", "Estimate the long-run effect of teacher VA");
  c_fit->add_option("--input", fit.input, "Panel CSV")
      ->required()
      ->check(CLI::ExistingFile);
  c_fit->add_option("--phi-mode", fit.phi_mode, "Shrinkage coefficient model")
      ->check(CLI::IsMember({"stationary", "unrestricted"}));
  c_fit->add_option("--residualize-outcome", fit.residualize_outcome,
                    "Regress the outcome on covariates first (true|false)");
  c_fit->add_option("--estimator", fit.estimator, "Estimation strategy")
      ->check(CLI::IsMember(
          {"multistep", "gmm", "optimal-gmm", "2sls", "3sls"}));
  c_fit->add_option("--se", fit.se, "Which standard errors to report")
      ->check(CLI::IsMember({"naive", "corrected", "both"}));
  c_fit->add_option("--cluster", fit.cluster, "Cluster level")
      ->check(CLI::IsMember({"teacher"}));
  c_fit->add_option("--out", fit.out, "Output JSON path (default: stdout)");

  // fit-va-outcome
  VaOutArgs vao;
  CLI::App* c_vao = app.add_subcommand(
      "fit-va-outcome", "Regress estimated VA on teacher-year variables");
  c_vao->add_option("--input", vao.input, "Panel CSV")
      ->required()
      ->check(CLI::ExistingFile);
  c_vao->add_option("--dvars", vao.dvars, "Teacher-year variables CSV")
      ->required()
      ->check(CLI::ExistingFile);
  c_vao->add_option("--leaveout", vao.leaveout,
                    "Use the leave-one-year-out VA mean (true|false)");
  c_vao->add_option("--out", vao.out, "Output JSON path (default: stdout)");

  // overid-test
  OveridArgs ovr;
  CLI::App* c_ovr = app.add_subcommand(
      "overid-test", "Test the overidentifying restrictions");
  c_ovr->add_option("--input", ovr.input, "Panel CSV")
      ->required()
      ->check(CLI::ExistingFile);
  c_ovr->add_option("--residualize-outcome", ovr.residualize_outcome,
                    "Regress the outcome on covariates first (true|false)");
  c_ovr->add_option("--out", ovr.out, "Output JSON path (default: stdout)");

  // mc
  std::string profile;
  int reps = 0;
  std::uint64_t seed = 1;
  int jobs = 0;
  std::string out_dir = ".";
  CLI::App* c_mc =
      app.add_subcommand("mc", "Run a Monte Carlo experiment profile");
  c_mc->add_option("--profile", profile, "Experiment profile")
      ->required()
      ->check(CLI::IsMember({"table1", "fig1", "fig2", "het"}));
  c_mc->add_option("--reps", reps, "Replications (0 = profile default)");
  c_mc->add_option("--seed", seed, "Design seed");
  c_mc->add_option("--jobs", jobs,
                   "Worker threads (0 = VAGMM_JOBS env, default 1)");
  c_mc->add_option("--out-dir", out_dir, "Artifact directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (app.got_subcommand(c_sim)) return run_simulate(sim);
    if (app.got_subcommand(c_fit)) return run_fit_longrun(fit);
    if (app.got_subcommand(c_vao)) return run_fit_va_outcome(vao);
    if (app.got_subcommand(c_ovr)) return run_overid_test(ovr);
    if (app.got_subcommand(c_mc))
      return vagmm::run_profile(profile, out_dir, reps, seed, jobs);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << std::endl;
    return 2;
  }
  return 1;
}
