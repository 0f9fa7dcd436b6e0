#include "vagmm/mc.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <utility>

#include "vagmm/gmm.hpp"
#include "vagmm/jsonio.hpp"
#include "vagmm/longrun.hpp"
#include "vagmm/rng.hpp"
#include "vagmm/stats.hpp"
#include "vagmm/va.hpp"

namespace vagmm {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void validate(const DgpConfig& c) {
  if (c.n_teachers < 2) fail("simulate_panel: need >= 2 teachers");
  if (c.class_size < 1) fail("simulate_panel: need >= 1 student per class");
  if (c.n_years < 2) fail("simulate_panel: need >= 2 years");
  if (c.var_mu <= 0 || c.var_eps < 0 || c.var_eta < 0)
    fail("simulate_panel: variances must be positive");
  if (c.mu_model == MuModel::persistent && c.sigma_omega < 0)
    fail("simulate_panel: sigma_omega must be >= 0");
  if (c.het_effects && c.het_effects_sd < 0)
    fail("simulate_panel: het_effects_sd must be >= 0");
  if (c.num_dvars < 0) fail("simulate_panel: num_dvars must be >= 0");
}

}  // namespace

SimulatedPanel simulate_panel_full(const DgpConfig& config, uint64_t rep) {
  validate(config);
  const int J = config.n_teachers;
  const int n = config.class_size;
  const int T = config.n_years;
  const int K = config.include_covariates ? 1 : 0;
  const std::int64_t N = static_cast<std::int64_t>(J) * T * n;
  const double x_scale = std::sqrt(config.rho * config.rho +
                                   (1.0 - config.rho) * (1.0 - config.rho));

  SimulatedPanel sim;
  PanelData& pd = sim.panel;
  pd.K = K;
  pd.teacher.reserve(N);
  pd.year.reserve(N);
  pd.score.reserve(N);
  pd.outcome.reserve(N);
  pd.X.resize(N, K);  // N x 0 when there are no covariates
  pd.teacher_ids.reserve(J);
  sim.mu.reserve(static_cast<std::size_t>(J) * T);
  sim.var_epsbar_class =
      config.var_eps * (config.uniform_shock_scale ? 4.0 / 3.0 : 1.0) / n;

  if (config.num_dvars > 0) {
    sim.dvars.K_d = config.num_dvars;
    sim.dvars.teacher_id.reserve(static_cast<std::size_t>(J) * T);
    sim.dvars.year.reserve(static_cast<std::size_t>(J) * T);
    sim.dvars.D.resize(static_cast<Eigen::Index>(J) * T, config.num_dvars);
  }

  std::int64_t r = 0;
  for (int j = 0; j < J; ++j) {
    pd.teacher_ids.push_back("t" + std::to_string(j + 1));

    // Teacher effects, one sequential stream per teacher.
    std::vector<double> mu_jt(T);
    {
      KeyedStream ks{config.seed, rep, static_cast<uint64_t>(j), 0, 0,
                     static_cast<uint64_t>(Draw::mu)};
      switch (config.mu_model) {
        case MuModel::constant: {
          const double m = ks.normal(config.var_mu);
          for (int t = 0; t < T; ++t) mu_jt[t] = m;
          break;
        }
        case MuModel::iid_per_year:
          for (int t = 0; t < T; ++t) mu_jt[t] = ks.normal(config.var_mu);
          break;
        case MuModel::persistent: {
          mu_jt[0] = ks.normal(config.var_mu);
          const double v = config.sigma_omega * config.sigma_omega;
          for (int t = 1; t < T; ++t) mu_jt[t] = mu_jt[t - 1] + ks.normal(v);
          break;
        }
      }
    }

    for (int t = 0; t < T; ++t) {
      sim.mu.push_back(mu_jt[t]);
      if (config.num_dvars > 0) {
        const Eigen::Index row = static_cast<Eigen::Index>(j) * T + t;
        sim.dvars.teacher_id.push_back(pd.teacher_ids.back());
        sim.dvars.year.push_back(t + 1);
        for (int k = 0; k < config.num_dvars; ++k) {
          KeyedStream ks{config.seed,
                         rep,
                         static_cast<uint64_t>(j),
                         static_cast<uint64_t>(t),
                         static_cast<uint64_t>(k),
                         static_cast<uint64_t>(Draw::dvar)};
          sim.dvars.D(row, k) = ks.normal();
        }
      }

      for (int i = 0; i < n; ++i, ++r) {
        // One stream per student; the draw order is part of the
        // reproducibility contract, with optional draws last.
        KeyedStream ks{config.seed,
                       rep,
                       static_cast<uint64_t>(j),
                       static_cast<uint64_t>(t),
                       static_cast<uint64_t>(i),
                       static_cast<uint64_t>(Draw::generic)};
        const double nu = ks.normal(config.var_mu);
        const double eps = ks.normal(config.var_eps);
        const double u_eps = ks.uniform(2.0);
        const double eta = ks.normal(config.var_eta);
        const double u_eta = ks.uniform(2.0);
        const double kappa_i =
            config.het_effects
                ? config.kappa0 +
                      ks.normal(config.het_effects_sd * config.het_effects_sd)
                : config.kappa0;

        const double x =
            (config.rho * mu_jt[t] + (1.0 - config.rho) * nu) / x_scale;
        double score = config.score_intercept + mu_jt[t] +
                       eps * (config.uniform_shock_scale ? u_eps : 1.0);
        double outcome = config.outcome_intercept + kappa_i * mu_jt[t] +
                         eta * (config.uniform_shock_scale ? u_eta : 1.0);
        if (K > 0) {
          score += config.beta0 * x;
          outcome += config.beta0_y * x;
          pd.X(r, 0) = x;
        }
        if (t == 0) outcome += config.eta_mu_coef * mu_jt[t];

        pd.teacher.push_back(j);
        pd.year.push_back(t + 1);
        pd.score.push_back(score);
        pd.outcome.push_back(outcome);
      }
    }
  }

  pd.finalize();
  return sim;
}

PanelData simulate_panel(const DgpConfig& config, uint64_t rep) {
  return simulate_panel_full(config, rep).panel;
}

namespace {

int resolve_workers(int n_workers, int n_reps) {
  int w = n_workers;
  if (w <= 0) {
    if (const char* env = std::getenv("VAGMM_JOBS")) w = std::atoi(env);
    if (w <= 0) w = 1;
  }
  return std::max(1, std::min(w, std::max(1, n_reps)));
}

}  // namespace

McRun run_replications(
    const DgpConfig& config,
    const std::vector<std::pair<std::string, Estimator>>& estimators,
    int n_reps, int n_workers) {
  if (n_reps < 1) fail("run_replications: need >= 1 replication");
  if (estimators.empty()) fail("run_replications: no estimators");

  McRun run;
  run.config = config;
  for (const auto& [name, est] : estimators) run.estimator_names.push_back(name);
  run.records.assign(n_reps,
                     std::vector<EstimateRecord>(estimators.size()));

  const int workers = resolve_workers(n_workers, n_reps);
  std::atomic<int> next{0};
  auto body = [&]() {
    for (;;) {
      const int rep = next.fetch_add(1);
      if (rep >= n_reps) return;
      try {
        const PanelData panel =
            simulate_panel(config, static_cast<uint64_t>(rep));
        for (std::size_t e = 0; e < estimators.size(); ++e) {
          EstimateRecord& rec = run.records[rep][e];
          try {
            rec = estimators[e].second(panel, static_cast<uint64_t>(rep));
            rec.ok = true;
          } catch (const std::exception& ex) {
            rec = EstimateRecord{};
            rec.error = ex.what();
          }
        }
      } catch (const std::exception& ex) {
        for (std::size_t e = 0; e < estimators.size(); ++e) {
          run.records[rep][e] = EstimateRecord{};
          run.records[rep][e].error = ex.what();
        }
      }
    }
  };

  if (workers == 1) {
    body();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) pool.emplace_back(body);
    for (auto& th : pool) th.join();
  }

  run.summaries = summarize(run);
  return run;
}

std::vector<McSummary> summarize(const McRun& run) {
  const int n_est = static_cast<int>(run.estimator_names.size());
  const int n_reps = static_cast<int>(run.records.size());
  std::vector<McSummary> out(n_est);
  for (int e = 0; e < n_est; ++e) {
    McSummary& s = out[e];
    s.name = run.estimator_names[e];
    s.n_reps = n_reps;
    double sum = 0.0, sum_v = 0.0, sum_nv = 0.0;
    int n_ok = 0, covered = 0, covered_naive = 0;
    for (int rep = 0; rep < n_reps; ++rep) {
      const EstimateRecord& rec = run.records[rep][e];
      if (!rec.ok) {
        ++s.n_failed;
        continue;
      }
      ++n_ok;
      sum += rec.estimate;
      sum_v += rec.variance;
      sum_nv += rec.naive_variance;
      const double err = std::abs(rec.estimate - run.config.kappa0);
      if (err <= z_975 * std::sqrt(rec.variance)) ++covered;
      if (err <= z_975 * std::sqrt(rec.naive_variance)) ++covered_naive;
    }
    if (n_ok == 0) continue;
    s.mean_estimate = sum / n_ok;
    s.bias = s.mean_estimate - run.config.kappa0;
    s.avg_est_variance = sum_v / n_ok;
    s.avg_naive_variance = sum_nv / n_ok;
    s.coverage = static_cast<double>(covered) / n_ok;
    s.naive_coverage = static_cast<double>(covered_naive) / n_ok;
    if (n_ok >= 2) {
      double ss = 0.0;
      for (int rep = 0; rep < n_reps; ++rep) {
        const EstimateRecord& rec = run.records[rep][e];
        if (!rec.ok) continue;
        const double d = rec.estimate - s.mean_estimate;
        ss += d * d;
      }
      s.mc_variance = ss / (n_ok - 1);
    }
  }
  return out;
}

Estimator make_multistep_estimator(bool corrected) {
  return [corrected](const PanelData& panel, uint64_t) {
    const VaEstimates est =
        fit_va_pipeline(panel, PhiMode::stationary, true);
    const KappaFit kf = multistep_ols_kappa(est.prelim, est.mu_star);
    EstimateRecord rec;
    rec.estimate = kf.kappa_hat;
    if (corrected) {
      const CorrectedKappa ck = corrected_sigma2(panel, est, kf);
      rec.variance = ck.corrected_se * ck.corrected_se;
      rec.naive_variance = ck.naive_se * ck.naive_se;
    } else {
      rec.variance = kf.naive_se * kf.naive_se;
      rec.naive_variance = rec.variance;
    }
    rec.ok = true;
    return rec;
  };
}

Estimator make_optimal_gmm_estimator() {
  return [](const PanelData& panel, uint64_t) {
    const MomentSystem sys = build_overid_system(panel, true);
    const GmmFit fit = optimal_gmm(sys);
    const int off = sys.block_offset("kappa");
    EstimateRecord rec;
    rec.estimate = fit.theta_hat[off];
    rec.variance = fit.omega_hat(off, off);
    rec.naive_variance = rec.variance;
    rec.ok = true;
    return rec;
  };
}

Estimator make_tsls_estimator() {
  return [](const PanelData& panel, uint64_t) {
    const KappaFit kf = fit_2sls_random_assignment(panel, true);
    EstimateRecord rec;
    rec.estimate = kf.kappa_hat;
    rec.variance = kf.naive_se * kf.naive_se;
    rec.naive_variance = rec.variance;
    rec.ok = true;
    return rec;
  };
}

Estimator make_3sls_estimator() {
  return [](const PanelData& panel, uint64_t) {
    const GmmFit fit = fit_3sls(panel);
    const int off = 2 * panel.K;  // kappa is the last parameter
    EstimateRecord rec;
    rec.estimate = fit.theta_hat[off];
    rec.variance = fit.omega_hat(off, off);
    rec.naive_variance = rec.variance;
    rec.ok = true;
    return rec;
  };
}

std::vector<SweepPoint> rho_sweep(
    const DgpConfig& base, const std::vector<double>& rhos,
    const std::vector<std::pair<std::string, Estimator>>& estimators,
    int n_reps, int n_workers) {
  std::vector<SweepPoint> out;
  out.reserve(rhos.size());
  for (const double rho : rhos) {
    DgpConfig config = base;
    config.rho = rho;
    SweepPoint pt;
    pt.rho = rho;
    pt.summaries =
        run_replications(config, estimators, n_reps, n_workers).summaries;
    out.push_back(std::move(pt));
  }
  return out;
}

namespace {

JsonValue config_json(const DgpConfig& c) {
  JsonValue j = JsonValue::object();
  j.set("n_teachers", c.n_teachers);
  j.set("class_size", c.class_size);
  j.set("n_years", c.n_years);
  j.set("kappa0", c.kappa0);
  j.set("rho", c.rho);
  j.set("var_mu", c.var_mu);
  j.set("var_eps", c.var_eps);
  j.set("var_eta", c.var_eta);
  j.set("uniform_shock_scale", c.uniform_shock_scale);
  j.set("include_covariates", c.include_covariates);
  j.set("het_effects", c.het_effects);
  j.set("het_effects_sd", c.het_effects_sd);
  j.set("seed", c.seed);
  return j;
}

void write_summary_rows(CsvWriter& csv, bool with_rho, double rho,
                        const std::vector<McSummary>& summaries) {
  for (const McSummary& s : summaries) {
    std::vector<std::string> row;
    if (with_rho) row.push_back(format_double(rho));
    row.push_back(s.name);
    row.push_back(std::to_string(s.n_reps));
    row.push_back(std::to_string(s.n_failed));
    row.push_back(format_double(s.mean_estimate));
    row.push_back(format_double(s.bias));
    row.push_back(format_double(s.avg_est_variance));
    row.push_back(format_double(s.avg_naive_variance));
    row.push_back(format_double(s.mc_variance));
    row.push_back(format_double(s.coverage));
    row.push_back(format_double(s.naive_coverage));
    csv.write_row(row);
  }
}

const std::vector<std::string> kSummaryHeader = {
    "estimator",       "n_reps",           "n_failed",
    "mean_estimate",   "bias",             "avg_est_variance",
    "avg_naive_variance", "mc_variance",   "coverage",
    "naive_coverage"};

JsonValue summary_json(const McSummary& s) {
  JsonValue j = JsonValue::object();
  j.set("estimator", s.name);
  j.set("n_reps", s.n_reps);
  j.set("n_failed", s.n_failed);
  j.set("mean_estimate", s.mean_estimate);
  j.set("bias", s.bias);
  j.set("avg_est_variance", s.avg_est_variance);
  j.set("avg_naive_variance", s.avg_naive_variance);
  j.set("mc_variance", s.mc_variance);
  j.set("coverage", s.coverage);
  j.set("naive_coverage", s.naive_coverage);
  return j;
}

}  // namespace

int run_profile(const std::string& name, const std::string& out_dir,
                int n_reps, uint64_t seed, int n_workers) {
  const bool is_table = (name == "table1" || name == "het");
  const bool is_sweep = (name == "fig1" || name == "fig2");
  if (!is_table && !is_sweep) return 2;

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);

  DgpConfig config;
  config.seed = seed;
  std::vector<std::pair<std::string, Estimator>> estimators;
  estimators.emplace_back("multistep_ols", make_multistep_estimator(false));
  estimators.emplace_back("optimal_gmm", make_optimal_gmm_estimator());

  JsonValue manifest = JsonValue::object();
  manifest.set("profile", name);
  manifest.set("seed", seed);
  JsonValue outputs = JsonValue::array();
  std::vector<std::filesystem::path> files;

  if (is_table) {
    if (n_reps <= 0) n_reps = name == "table1" ? 1000 : 500;
    config.rho = 0.5;
    if (name == "het") config.het_effects = true;
    manifest.set("n_reps", n_reps);
    manifest.set("config", config_json(config));

    const McRun run = run_replications(config, estimators, n_reps, n_workers);
    const std::filesystem::path table = dir / (name + ".csv");
    {
      // One row per estimator with the four headline metrics.
      CsvWriter csv(table.string());
      csv.write_row(
          {"estimator", "bias", "avg_est_variance", "mc_variance",
           "coverage"});
      for (const McSummary& s : run.summaries)
        csv.write_row({s.name, format_double(s.bias),
                       format_double(s.avg_est_variance),
                       format_double(s.mc_variance),
                       format_double(s.coverage)});
    }
    files.push_back(table);

    JsonValue sums = JsonValue::array();
    for (const McSummary& s : run.summaries) sums.push_back(summary_json(s));
    manifest.set("summaries", std::move(sums));
  } else {
    if (n_reps <= 0) n_reps = 500;
    manifest.set("n_reps", n_reps);
    manifest.set("config", config_json(config));
    const std::vector<double> rhos = {0.0, 0.25, 0.5, 0.75};

    const std::vector<SweepPoint> sweep =
        rho_sweep(config, rhos, estimators, n_reps, n_workers);

    const std::filesystem::path main_csv = dir / (name + ".csv");
    {
      CsvWriter csv(main_csv.string());
      if (name == "fig1") {
        csv.write_row({"rho", "estimator", "coverage", "naive_coverage"});
        for (const SweepPoint& pt : sweep)
          for (const McSummary& s : pt.summaries)
            csv.write_row({format_double(pt.rho), s.name,
                           format_double(s.coverage),
                           format_double(s.naive_coverage)});
      } else {
        csv.write_row({"rho", "estimator", "avg_naive_se", "avg_est_se",
                       "mc_sd"});
        for (const SweepPoint& pt : sweep)
          for (const McSummary& s : pt.summaries)
            csv.write_row({format_double(pt.rho), s.name,
                           format_double(std::sqrt(s.avg_naive_variance)),
                           format_double(std::sqrt(s.avg_est_variance)),
                           format_double(std::sqrt(s.mc_variance))});
      }
    }
    files.push_back(main_csv);

    const std::filesystem::path sweep_csv = dir / (name + "_sweep.csv");
    {
      CsvWriter csv(sweep_csv.string());
      std::vector<std::string> header = {"rho"};
      header.insert(header.end(), kSummaryHeader.begin(),
                    kSummaryHeader.end());
      csv.write_row(header);
      for (const SweepPoint& pt : sweep)
        write_summary_rows(csv, true, pt.rho, pt.summaries);
    }
    files.push_back(sweep_csv);

    JsonValue sums = JsonValue::array();
    for (const SweepPoint& pt : sweep) {
      JsonValue p = JsonValue::object();
      p.set("rho", pt.rho);
      JsonValue arr = JsonValue::array();
      for (const McSummary& s : pt.summaries) arr.push_back(summary_json(s));
      p.set("summaries", std::move(arr));
      sums.push_back(std::move(p));
    }
    manifest.set("sweep", std::move(sums));
  }

  for (const auto& f : files) {
    JsonValue entry = JsonValue::object();
    entry.set("path", f.filename().string());
    entry.set("sha1", blob_sha1_file(f.string()));
    outputs.push_back(std::move(entry));
  }
  manifest.set("outputs", std::move(outputs));
  spit((dir / "manifest.json").string(), manifest.dump() + "\n");
  return 0;
}

}  // namespace vagmm
