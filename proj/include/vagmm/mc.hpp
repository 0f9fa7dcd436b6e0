#pragma once

/**
 * \file mc.hpp
 * \brief Monte Carlo harness: the simulation design with sorting-on-VA
 *        covariates, per-replication estimator drivers, summary statistics
 *        (bias, average estimated variance, variance across replications,
 *        coverage), sweeps over the sorting strength, and deterministic
 *        artifact emission (CSV tables + JSON manifest).
 *
 * Reproducibility contract: every random draw is keyed by
 * (seed, replication, teacher, year, student, purpose), so results are
 * bit-identical regardless of scheduling or the number of workers.
 */

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vagmm/panel.hpp"

namespace vagmm {

/** How the teacher effect evolves over years. */
enum class MuModel {
  constant,      ///< one permanent draw per teacher (phi flat across gaps)
  iid_per_year,  ///< fresh draw every year (no persistence; for diagnostics)
  persistent,    ///< random walk: mu_j1 ~ N(0, var_mu), then + N(0, sigma_omega^2)
};

/** Simulation design. Defaults reproduce the headline experiment. */
struct DgpConfig {
  int n_teachers = 3000;
  int class_size = 30;
  int n_years = 10;
  double kappa0 = 100.0;
  double beta0 = 1.0;       ///< score equation covariate coefficient
  double beta0_y = 10.0;    ///< outcome equation covariate coefficient
  double score_intercept = 0.0;
  double outcome_intercept = 5.0;
  double rho = 0.0;         ///< sorting of the covariate on teacher VA
  double var_mu = 0.01;
  double var_eps = 0.81;    ///< scale of the score shock before the U[0,2] factor
  double var_eta = 100.0;   ///< scale of the outcome shock before the U[0,2] factor
  bool uniform_shock_scale = true;  ///< multiply shocks by independent U[0,2]
  bool include_covariates = true;   ///< K = 1 when true, K = 0 when false
  MuModel mu_model = MuModel::constant;
  double sigma_omega = 0.0;         ///< innovation sd for MuModel::persistent
  bool het_effects = false;         ///< student-specific kappa_i
  double het_effects_sd = 5.0;      ///< sd of kappa_i around kappa0
  int num_dvars = 0;                ///< extra teacher-year variables D (for the
                                    ///< VA-as-outcome designs), iid N(0,1)
  double eta_mu_coef = 0.0;         ///< first-year outcome shock loading on mu
                                    ///< (breaks leave-out instrument validity)
  uint64_t seed = 1;
};

/** A simulated panel plus the latent quantities that generated it. */
struct SimulatedPanel {
  PanelData panel;
  TeacherYearVars dvars;             ///< empty unless num_dvars > 0
  std::vector<double> mu;            ///< teacher-year effects, cell order
  double var_epsbar_class = 0.0;     ///< population Var(class mean shock)
};

/** Draw replication `rep` of the design. */
PanelData simulate_panel(const DgpConfig& config, uint64_t rep);

/** As simulate_panel but also exposing the latent truth. */
SimulatedPanel simulate_panel_full(const DgpConfig& config, uint64_t rep);

/** One estimator's output for one replication. */
struct EstimateRecord {
  double estimate = 0.0;
  double variance = 0.0;        ///< estimated Var(kappa-hat), i.e. SE^2
  double naive_variance = 0.0;  ///< uncorrected counterpart when distinct
  bool ok = false;
  std::string error;  ///< non-empty when ok == false
};

/** Named estimator applied to one simulated panel. */
using Estimator =
    std::function<EstimateRecord(const PanelData& panel, uint64_t rep)>;

/** Per-estimator Monte Carlo summary. */
struct McSummary {
  std::string name;
  int n_reps = 0;
  int n_failed = 0;
  double mean_estimate = 0.0;
  double bias = 0.0;            ///< mean_estimate - kappa0
  double avg_est_variance = 0.0;
  double avg_naive_variance = 0.0;
  double mc_variance = 0.0;     ///< across-replication variance of estimates
  double coverage = 0.0;        ///< nominal-95% CI coverage of kappa0
  double naive_coverage = 0.0;  ///< coverage using the naive SE
};

/** Full results: per-replication draws plus the summaries. */
struct McRun {
  DgpConfig config;
  std::vector<std::string> estimator_names;
  /** reps x estimators, row-major by replication. */
  std::vector<std::vector<EstimateRecord>> records;
  std::vector<McSummary> summaries;
};

/**
 * Run `n_reps` replications of the design through each estimator.
 * Replications are independent and keyed by index; `n_workers` <= 0 means
 * use the VAGMM_JOBS environment variable (default 1). Failed replications
 * are flagged, excluded from the summaries, and counted in n_failed.
 */
McRun run_replications(const DgpConfig& config,
                       const std::vector<std::pair<std::string, Estimator>>&
                           estimators,
                       int n_reps, int n_workers = 0);

/** Recompute summaries from records (exposed for tests). */
std::vector<McSummary> summarize(const McRun& run);

/** Stock estimators used by the experiment profiles. */
Estimator make_multistep_estimator(bool corrected);
Estimator make_optimal_gmm_estimator();
Estimator make_tsls_estimator();
Estimator make_3sls_estimator();

/** One row of a sweep over the sorting strength rho. */
struct SweepPoint {
  double rho = 0.0;
  std::vector<McSummary> summaries;
};

/** Re-run the design at each rho, all else equal. */
std::vector<SweepPoint> rho_sweep(const DgpConfig& base,
                                  const std::vector<double>& rhos,
                                  const std::vector<std::pair<std::string,
                                                              Estimator>>&
                                      estimators,
                                  int n_reps, int n_workers = 0);

/**
 * Named experiment profiles ("table1", "fig1", "fig2", "het") mapping to a
 * configured run; emits <name>.csv (+ <name>_sweep.csv for sweeps) and a
 * manifest.json with config echo, per-file SHA-1, and summary scalars into
 * `out_dir`. `n_reps` <= 0 uses each profile's default.
 */
int run_profile(const std::string& name, const std::string& out_dir,
                int n_reps, uint64_t seed, int n_workers);

}  // namespace vagmm
