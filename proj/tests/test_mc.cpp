#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "test_helpers.hpp"
#include "vagmm/jsonio.hpp"
#include "vagmm/mc.hpp"
#include "vagmm/panel.hpp"

using namespace vagmm;

namespace {

/** Sample correlation between the covariate and the latent teacher effect. */
double x_mu_corr(const SimulatedPanel& sim, const DgpConfig& cfg) {
  const PanelData& p = sim.panel;
  const std::int64_t N = p.n_records();
  const int T = cfg.n_years;
  const int n = cfg.class_size;
  double sx = 0, sm = 0, sxx = 0, smm = 0, sxm = 0;
  for (std::int64_t r = 0; r < N; ++r) {
    // Rows are emitted teacher-major, year-ascending, student-minor.
    const std::int64_t cell = r / n;
    (void)T;
    const double x = p.X(r, 0);
    const double m = sim.mu[cell];
    sx += x;
    sm += m;
    sxx += x * x;
    smm += m * m;
    sxm += x * m;
  }
  const double cov = sxm / N - (sx / N) * (sm / N);
  const double vx = sxx / N - (sx / N) * (sx / N);
  const double vm = smm / N - (sm / N) * (sm / N);
  return cov / std::sqrt(vx * vm);
}

}  // namespace

TEST_CASE("simulated sorting strength matches the design", "[mc]") {
  DgpConfig cfg;
  cfg.n_teachers = 200;
  cfg.class_size = 10;
  cfg.n_years = 5;
  cfg.seed = 42;
  const double band = 3.0 / std::sqrt(200.0 * 10 * 5);

  cfg.rho = 0.0;
  REQUIRE(std::abs(x_mu_corr(simulate_panel_full(cfg, 0), cfg)) < band);

  cfg.rho = 0.5;
  // corr = rho / sqrt(rho^2 + (1-rho)^2) = 1/sqrt(2) at rho = 0.5.
  const double got = x_mu_corr(simulate_panel_full(cfg, 0), cfg);
  REQUIRE(got == Catch::Approx(1.0 / std::sqrt(2.0)).margin(3 * band));

  cfg.rho = 1.0;  // x is a deterministic rescaling of mu
  REQUIRE(x_mu_corr(simulate_panel_full(cfg, 0), cfg) ==
          Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("score variance matches its population value", "[mc]") {
  DgpConfig cfg;
  cfg.n_teachers = 2000;
  cfg.class_size = 30;
  cfg.n_years = 5;
  cfg.rho = 0.0;
  cfg.seed = 7;
  const PanelData p = simulate_panel(cfg, 0);
  double s = 0, ss = 0;
  for (double v : p.score) {
    s += v;
    ss += v * v;
  }
  const double N = static_cast<double>(p.n_records());
  const double var = ss / N - (s / N) * (s / N);
  // beta0^2 Var(x) + Var(mu) + Var(eps) E[U(0,2)^2] = 0.01 + 0.01 + 0.81*4/3.
  REQUIRE(var == Catch::Approx(1.10).epsilon(0.02));
}

TEST_CASE("population class-mean shock variance is reported", "[mc]") {
  DgpConfig cfg;
  cfg.class_size = 30;
  cfg.n_teachers = 2;
  cfg.n_years = 2;
  REQUIRE(simulate_panel_full(cfg, 0).var_epsbar_class ==
          Catch::Approx(0.81 * (4.0 / 3.0) / 30.0).margin(1e-15));
  cfg.uniform_shock_scale = false;
  REQUIRE(simulate_panel_full(cfg, 0).var_epsbar_class ==
          Catch::Approx(0.81 / 30.0).margin(1e-15));
}

TEST_CASE("latent teacher effects follow the chosen process", "[mc]") {
  DgpConfig cfg;
  cfg.n_teachers = 30;
  cfg.class_size = 3;
  cfg.n_years = 4;
  cfg.seed = 11;

  cfg.mu_model = MuModel::constant;
  const SimulatedPanel con = simulate_panel_full(cfg, 2);
  REQUIRE(con.mu.size() == 30u * 4u);
  for (int j = 0; j < 30; ++j)
    for (int t = 1; t < 4; ++t)
      REQUIRE(con.mu[j * 4 + t] == con.mu[j * 4]);

  // A random walk with zero innovation variance is the constant model.
  cfg.mu_model = MuModel::persistent;
  cfg.sigma_omega = 0.0;
  const SimulatedPanel rw = simulate_panel_full(cfg, 2);
  REQUIRE(rw.panel.score == con.panel.score);
  REQUIRE(rw.panel.outcome == con.panel.outcome);

  cfg.mu_model = MuModel::iid_per_year;
  const SimulatedPanel iid = simulate_panel_full(cfg, 2);
  bool any_differ = false;
  for (int j = 0; j < 30 && !any_differ; ++j)
    any_differ = iid.mu[j * 4] != iid.mu[j * 4 + 1];
  REQUIRE(any_differ);
}

TEST_CASE("degenerate heterogeneity reproduces the homogeneous panel", "[mc]") {
  DgpConfig cfg;
  cfg.n_teachers = 20;
  cfg.class_size = 5;
  cfg.n_years = 3;
  cfg.seed = 3;
  const PanelData base = simulate_panel(cfg, 1);
  cfg.het_effects = true;
  cfg.het_effects_sd = 0.0;
  const PanelData det = simulate_panel(cfg, 1);
  REQUIRE(det.score == base.score);
  REQUIRE(det.outcome == base.outcome);
  cfg.het_effects_sd = 5.0;
  const PanelData het = simulate_panel(cfg, 1);
  REQUIRE(het.outcome != base.outcome);
  REQUIRE(het.score == base.score);  // heterogeneity only hits the outcome
}

TEST_CASE("teacher-year variables are emitted on demand", "[mc]") {
  DgpConfig cfg;
  cfg.n_teachers = 6;
  cfg.class_size = 2;
  cfg.n_years = 3;
  cfg.num_dvars = 2;
  const SimulatedPanel sim = simulate_panel_full(cfg, 0);
  REQUIRE(sim.dvars.K_d == 2);
  REQUIRE(sim.dvars.D.rows() == 18);
  REQUIRE(sim.dvars.teacher_id.size() == 18u);
  const Eigen::RowVectorXd row = sim.dvars.lookup("t1", 1);
  REQUIRE(row.size() == 2);
  REQUIRE(row == sim.dvars.D.row(0));

  cfg.num_dvars = 0;
  REQUIRE(simulate_panel_full(cfg, 0).dvars.K_d == 0);
}

TEST_CASE("design validation", "[mc]") {
  DgpConfig cfg;
  cfg.n_teachers = 1;
  REQUIRE_THROWS_WITH(simulate_panel(cfg, 0),
                      Catch::Matchers::ContainsSubstring("teachers"));
  cfg = DgpConfig{};
  cfg.var_mu = 0.0;
  REQUIRE_THROWS_WITH(simulate_panel(cfg, 0),
                      Catch::Matchers::ContainsSubstring("variances"));
  cfg = DgpConfig{};
  cfg.n_years = 1;
  REQUIRE_THROWS_WITH(simulate_panel(cfg, 0),
                      Catch::Matchers::ContainsSubstring("years"));
}

TEST_CASE("failed replications are flagged and excluded", "[mc]") {
  DgpConfig cfg;
  cfg.n_teachers = 4;
  cfg.class_size = 2;
  cfg.n_years = 2;
  cfg.kappa0 = 4.0;
  // Deterministic estimator: estimate = rep, variance = 1; throws on
  // multiples of three.
  Estimator est = [](const PanelData&, uint64_t rep) -> EstimateRecord {
    if (rep % 3 == 0) throw std::runtime_error("boom " + std::to_string(rep));
    EstimateRecord rec;
    rec.estimate = static_cast<double>(rep);
    rec.variance = 1.0;
    rec.naive_variance = 1.0;
    rec.ok = true;
    return rec;
  };
  const McRun run = run_replications(cfg, {{"det", est}}, 10, 1);
  const McSummary& s = run.summaries[0];
  REQUIRE(s.n_reps == 10);
  REQUIRE(s.n_failed == 4);  // reps 0, 3, 6, 9
  // Surviving estimates {1,2,4,5,7,8}: mean 4.5, sample variance 7.5.
  REQUIRE(s.mean_estimate == Catch::Approx(4.5).margin(1e-12));
  REQUIRE(s.bias == Catch::Approx(0.5).margin(1e-12));
  REQUIRE(s.mc_variance == Catch::Approx(7.5).margin(1e-12));
  REQUIRE(s.avg_est_variance == Catch::Approx(1.0).margin(1e-12));
  // |rep - 4| <= 1.96 covers reps {3,4,5}; rep 3 failed.
  REQUIRE(s.coverage == Catch::Approx(2.0 / 6.0).margin(1e-12));
  REQUIRE_FALSE(run.records[0][0].ok);
  REQUIRE(run.records[0][0].error.find("boom") != std::string::npos);
  REQUIRE(run.records[1][0].ok);
}

TEST_CASE("results are identical across worker counts", "[mc]") {
  DgpConfig cfg;
  cfg.n_teachers = 60;
  cfg.class_size = 8;
  cfg.n_years = 3;
  cfg.rho = 0.5;
  cfg.seed = 12;
  const auto ests = std::vector<std::pair<std::string, Estimator>>{
      {"ms", make_multistep_estimator(false)}};
  const McRun a = run_replications(cfg, ests, 12, 1);
  const McRun b = run_replications(cfg, ests, 12, 3);
  for (int rep = 0; rep < 12; ++rep) {
    REQUIRE(a.records[rep][0].ok);
    REQUIRE(a.records[rep][0].estimate == b.records[rep][0].estimate);
    REQUIRE(a.records[rep][0].variance == b.records[rep][0].variance);
  }

  // n_workers <= 0 defers to the VAGMM_JOBS environment variable.
  ::setenv("VAGMM_JOBS", "3", 1);
  const McRun c = run_replications(cfg, ests, 12, 0);
  ::unsetenv("VAGMM_JOBS");
  for (int rep = 0; rep < 12; ++rep)
    REQUIRE(a.records[rep][0].estimate == c.records[rep][0].estimate);
}

TEST_CASE("summarize is a pure function of the records", "[mc]") {
  DgpConfig cfg;
  cfg.n_teachers = 40;
  cfg.class_size = 6;
  cfg.n_years = 3;
  cfg.seed = 5;
  const McRun run = run_replications(
      cfg, {{"ms", make_multistep_estimator(false)}}, 6, 1);
  const std::vector<McSummary> again = summarize(run);
  REQUIRE(again.size() == run.summaries.size());
  REQUIRE(again[0].mean_estimate == run.summaries[0].mean_estimate);
  REQUIRE(again[0].mc_variance == run.summaries[0].mc_variance);
  REQUIRE(again[0].coverage == run.summaries[0].coverage);
  REQUIRE(again[0].n_failed == run.summaries[0].n_failed);
}

TEST_CASE("rho_sweep evaluates each design point", "[mc]") {
  DgpConfig cfg;
  cfg.n_teachers = 40;
  cfg.class_size = 6;
  cfg.n_years = 3;
  cfg.seed = 9;
  const std::vector<SweepPoint> sweep =
      rho_sweep(cfg, {0.0, 0.3}, {{"ms", make_multistep_estimator(false)}}, 4, 1);
  REQUIRE(sweep.size() == 2);
  REQUIRE(sweep[0].rho == 0.0);
  REQUIRE(sweep[1].rho == 0.3);
  for (const SweepPoint& pt : sweep) {
    REQUIRE(pt.summaries.size() == 1);
    REQUIRE(pt.summaries[0].n_reps == 4);
    REQUIRE(pt.summaries[0].n_failed == 0);
  }
  // Different sorting, same seed: the draws differ through the design.
  REQUIRE(sweep[0].summaries[0].mean_estimate !=
          sweep[1].summaries[0].mean_estimate);
}

TEST_CASE("corrected intervals cover under sorting, naive ones do not",
          "[mc][slow]") {
  DgpConfig cfg;
  cfg.n_teachers = 800;
  cfg.class_size = 20;
  cfg.n_years = 6;
  cfg.rho = 0.5;
  cfg.seed = 31337;
  const McRun run = run_replications(
      cfg, {{"ms", make_multistep_estimator(true)}}, 200, 1);
  const McSummary& s = run.summaries[0];
  REQUIRE(s.n_failed == 0);
  REQUIRE(s.coverage > 0.90);
  REQUIRE(s.coverage < 0.98);
  REQUIRE(s.naive_coverage < s.coverage - 0.10);
  REQUIRE(std::abs(s.bias) < 3.0 * std::sqrt(s.mc_variance / s.n_reps));
}

TEST_CASE("optimal GMM coverage does not degrade with panel size",
          "[mc][slow]") {
  const auto ests = std::vector<std::pair<std::string, Estimator>>{
      {"gmm", make_optimal_gmm_estimator()}};
  double cov_small = 0.0, cov_large = 0.0;
  for (const int J : {500, 2000}) {
    DgpConfig cfg;
    cfg.n_teachers = J;
    cfg.class_size = 20;
    cfg.n_years = 5;
    cfg.rho = 0.5;
    cfg.seed = 99;
    const McRun run = run_replications(cfg, ests, 120, 1);
    REQUIRE(run.summaries[0].n_failed == 0);
    (J == 500 ? cov_small : cov_large) = run.summaries[0].coverage;
    if (J == 2000) REQUIRE(std::abs(run.summaries[0].bias) < 3.0);
  }
  REQUIRE(cov_large >= cov_small - 0.03);
  REQUIRE(cov_large > 0.86);
  REQUIRE(cov_large < 0.97);
}

TEST_CASE("heterogeneous long-run effects leave both estimators centered",
          "[mc][slow]") {
  DgpConfig cfg;
  cfg.n_teachers = 400;
  cfg.class_size = 20;
  cfg.n_years = 5;
  cfg.rho = 0.0;
  cfg.het_effects = true;  // kappa_i ~ N(kappa0, 25)
  cfg.seed = 777;
  const McRun run = run_replications(
      cfg,
      {{"ms", make_multistep_estimator(true)},
       {"gmm", make_optimal_gmm_estimator()}},
      120, 1);
  for (const McSummary& s : run.summaries) {
    REQUIRE(s.n_failed == 0);
    REQUIRE(std::abs(s.bias) < 3.0 * std::sqrt(s.mc_variance / s.n_reps));
    REQUIRE(s.coverage > 0.88);
    REQUIRE(s.coverage < 0.98);
  }
}

TEST_CASE("experiment profiles emit their artifacts", "[mc][slow]") {
  namespace fs = std::filesystem;
  const fs::path dir =
      fs::temp_directory_path() / "vagmm_profile_smoke";
  fs::remove_all(dir);

  REQUIRE(run_profile("bogus", dir.string(), 1, 5, 1) == 2);

  REQUIRE(run_profile("table1", dir.string(), 2, 5, 1) == 0);
  const fs::path table = dir / "table1.csv";
  const fs::path manifest = dir / "manifest.json";
  REQUIRE(fs::exists(table));
  REQUIRE(fs::exists(manifest));

  std::ifstream tin(table);
  std::string header, row1, row2, extra;
  REQUIRE(std::getline(tin, header));
  REQUIRE(header ==
          "estimator,bias,avg_est_variance,mc_variance,coverage");
  REQUIRE(std::getline(tin, row1));
  REQUIRE(std::getline(tin, row2));
  REQUIRE_FALSE(std::getline(tin, extra));
  REQUIRE(row1.rfind("multistep_ols,", 0) == 0);
  REQUIRE(row2.rfind("optimal_gmm,", 0) == 0);

  std::ifstream min(manifest);
  std::string json((std::istreambuf_iterator<char>(min)),
                   std::istreambuf_iterator<char>());
  REQUIRE(json.find("\"profile\": \"table1\"") != std::string::npos);
  REQUIRE(json.find("\"outputs\"") != std::string::npos);
  REQUIRE(json.find("\"sha1\"") != std::string::npos);
  REQUIRE(std::count(json.begin(), json.end(), '{') ==
          std::count(json.begin(), json.end(), '}'));

  // Determinism: rerunning the profile reproduces the files byte for byte.
  const std::string csv_before = slurp(table.string());
  REQUIRE(run_profile("table1", dir.string(), 2, 5, 1) == 0);
  REQUIRE(slurp(table.string()) == csv_before);
  REQUIRE(slurp(manifest.string()) == json);
  fs::remove_all(dir);
}
