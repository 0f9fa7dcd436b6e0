#pragma once

/**
 * \file panel.hpp
 * \brief Student-level panel container, CSV ingestion, class-level
 *        aggregation and the within-teacher transform.
 *
 * The estimators in this library all consume data organised as students
 * nested in (teacher, year) classes. PanelData stores the student records
 * column-oriented (no per-record allocation; the Monte Carlo harness builds
 * panels with ~10^6 rows per replication) together with a per-teacher
 * grouping index. ClassPanel holds the teacher-year aggregates the
 * class-level moments are built from.
 *
 * Teachers observed in fewer than two distinct years cannot enter any
 * leave-year-out construction and are excluded at build time (the count is
 * reported on the PanelData).
 */

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

namespace vagmm {

/** One student-year observation (row view into PanelData). */
struct StudentRecord {
  std::string_view student_id;  ///< empty for synthetic panels
  std::int32_t teacher = -1;    ///< dense teacher index
  std::int32_t year = 0;
  double score = 0.0;
  double outcome = 0.0;  ///< meaningful only when has_outcome
  bool has_outcome = false;
  Eigen::RowVectorXd covariates;
};

/**
 * Column-oriented student panel.
 *
 * Rows are stored in input order; `rows_of(j)` yields teacher j's rows
 * sorted by year (then input order). Only teachers with >= 2 distinct years
 * are retained; everything else is dropped during finalize() with
 * `excluded_teachers` counting the casualties.
 */
struct PanelData {
  // --- record columns -------------------------------------------------
  std::vector<std::string> student_ids;  ///< empty when synthetic
  std::vector<std::int32_t> teacher;     ///< dense index into teacher_ids
  std::vector<std::int32_t> year;
  std::vector<double> score;
  std::vector<double> outcome;  ///< NaN when absent
  Eigen::MatrixXd X;            ///< N x K covariates
  int K = 0;

  // --- grouping (built by finalize) ------------------------------------
  std::vector<std::string> teacher_ids;        ///< label per dense index
  std::vector<std::int32_t> row_perm;          ///< rows grouped by teacher
  std::vector<std::int32_t> teacher_offset;    ///< CSR into row_perm, size J+1
  std::vector<std::vector<std::int32_t>> teacher_years;  ///< sorted distinct
  int excluded_teachers = 0;  ///< teachers dropped for having < 2 years
  std::vector<std::string> excluded_teacher_ids;

  std::int64_t n_records() const { return static_cast<std::int64_t>(score.size()); }
  int n_teachers() const { return static_cast<int>(teacher_offset.size()) - 1; }

  /** Row indices of teacher j, sorted by year. */
  const std::int32_t* rows_of(int j, int* count) const {
    *count = teacher_offset[j + 1] - teacher_offset[j];
    return row_perm.data() + teacher_offset[j];
  }

  bool row_has_outcome(std::int64_t r) const { return !std::isnan(outcome[r]); }

  StudentRecord record(std::int64_t r) const;

  /** True if every retained teacher has the identical year set. */
  bool balanced() const;

  /**
   * Group rows by teacher, drop single-year teachers, build indexes.
   * Must be called after the record columns are filled; load_panel and the
   * simulator both do.
   */
  void finalize();
};

/** Teacher-year level explanatory variables for VA-as-outcome analyses. */
struct TeacherYearVars {
  int K_d = 0;
  // keyed by (teacher label, year); resolved against a panel on use
  std::vector<std::string> teacher_id;
  std::vector<std::int32_t> year;
  Eigen::MatrixXd D;  ///< rows aligned with (teacher_id, year)

  /**
   * D row for (teacher label, year); throws if absent.
   */
  Eigen::RowVectorXd lookup(const std::string& tid, std::int32_t yr) const;

 private:
  // lazily built (teacher label + '\x1f' + year) -> row index
  mutable std::unordered_map<std::string, std::int64_t> index_;
};

/** Column-name map for load_panel. Defaults follow the documented schema. */
struct CsvSchema {
  std::string student_id = "student_id";
  std::string teacher_id = "teacher_id";
  std::string year = "year";
  std::string score = "score";
  std::string outcome = "outcome";
  std::string covariate_prefix = "x";  ///< columns x1..xK in index order
};

/**
 * Read a student panel from CSV.
 *
 * Header is required. `outcome` may be empty on any row (student has a score
 * but no long-run outcome). Errors carry the 1-based line number. Duplicate
 * (student_id, year) pairs and inconsistent covariate counts are errors.
 */
PanelData load_panel(const std::string& path, const CsvSchema& schema = {});

/** Read a teacher-year variable file: header `teacher_id, year, d1..dKd`. */
TeacherYearVars load_teacher_year_vars(const std::string& path);

/** Write a panel back to CSV in the load_panel schema (synthetic ids filled in). */
void write_panel_csv(const PanelData& panel, const std::string& path);

/**
 * Teacher-year aggregates.
 *
 * Cells are stored teacher-major, year-ascending inside each teacher;
 * `cell_offset` is the CSR index. `prelim_va` / `outcome_resid` are class
 * means of the residualized score / outcome handed to class_aggregate;
 * `x_mean` averages covariates over the whole class while `x_mean_y`
 * averages over the outcome-observed students only (the two coincide on
 * complete panels; outcome-side moments need the latter).
 */
struct ClassPanel {
  int K = 0;
  std::vector<std::string> teacher_ids;
  std::vector<std::int32_t> cell_offset;  ///< size J+1
  std::vector<std::int32_t> year;         ///< per cell
  std::vector<std::int32_t> n;            ///< students in class
  std::vector<std::int32_t> n_y;          ///< outcome-observed students
  std::vector<double> prelim_va;          ///< R-bar_jt
  std::vector<double> outcome_resid;      ///< Y-bar_jt (0 when n_y = 0)
  Eigen::MatrixXd x_mean;                 ///< cells x K
  Eigen::MatrixXd x_mean_y;               ///< cells x K, outcome subsample

  int n_teachers() const { return static_cast<int>(cell_offset.size()) - 1; }
  int n_cells() const { return static_cast<int>(year.size()); }
  int cells_of(int j) const { return cell_offset[j + 1] - cell_offset[j]; }

  /**
   * Leave-out row for cell c of teacher j: the prelim_va of every other
   * cell of that teacher, ascending in year (the documented fixed order).
   */
  Eigen::VectorXd leaveout_row(int j, int c) const;

  /** True if all teachers share one year set. */
  bool balanced() const;

  /** Distinct positive year gaps |s-t| present, ascending. */
  std::vector<std::int32_t> gaps_present() const;
};

/**
 * Within-teacher demeaning of a cell-aligned series:
 * out_jt = v_jt - mean_t(v_jt) for each teacher. NaN input on a retained
 * cell is an error.
 */
std::vector<double> within_transform(const std::vector<double>& values,
                                     const ClassPanel& cells);

/**
 * Collapse per-student residuals to class means.
 *
 * `score_resid` must align with panel rows. `outcome_resid` may be empty
 * (no outcome side) or aligned with rows and NaN where the student has no
 * outcome.
 */
ClassPanel class_aggregate(const PanelData& panel,
                           const std::vector<double>& score_resid,
                           const std::vector<double>& outcome_resid);

}  // namespace vagmm
