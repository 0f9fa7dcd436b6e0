#include "vagmm/panel.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include "vagmm/jsonio.hpp"

namespace vagmm {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::string loc(const std::string& path, std::int64_t line) {
  return path + ":" + std::to_string(line) + ": ";
}

/** Split one CSV line; supports double-quoted fields with "" escapes. */
void split_csv(const std::string& line, std::vector<std::string>& out) {
  out.clear();
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"' && field.empty()) {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  out.push_back(std::move(field));
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& s, const std::string& where) {
  const std::string t = trim(s);
  double v = 0.0;
  const char* b = t.data();
  const char* e = b + t.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e) fail(where + "cannot parse number '" + s + "'");
  return v;
}

std::int32_t parse_year(const std::string& s, const std::string& where) {
  const std::string t = trim(s);
  std::int32_t v = 0;
  const char* b = t.data();
  const char* e = b + t.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e) fail(where + "cannot parse year '" + s + "'");
  return v;
}

/** Find the 1-based covariate columns `<prefix>1..<prefix>K` in a header. */
std::vector<int> covariate_columns(const std::vector<std::string>& header,
                                   const std::string& prefix,
                                   const std::string& where) {
  std::vector<std::pair<int, int>> found;  // (k, column index)
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string name = trim(header[c]);
    if (name.size() <= prefix.size() || name.compare(0, prefix.size(), prefix) != 0)
      continue;
    const std::string tail = name.substr(prefix.size());
    int k = 0;
    auto [p, ec] = std::from_chars(tail.data(), tail.data() + tail.size(), k);
    if (ec != std::errc() || p != tail.data() + tail.size() || k < 1) continue;
    found.emplace_back(k, static_cast<int>(c));
  }
  std::sort(found.begin(), found.end());
  std::vector<int> cols;
  for (std::size_t i = 0; i < found.size(); ++i) {
    if (found[i].first != static_cast<int>(i) + 1)
      fail(where + "covariate columns must be numbered " + prefix + "1.." +
           prefix + std::to_string(found.size()) + " without gaps");
    cols.push_back(found[i].second);
  }
  return cols;
}

int required_column(const std::vector<std::string>& header,
                    const std::string& name, const std::string& where) {
  for (std::size_t c = 0; c < header.size(); ++c)
    if (trim(header[c]) == name) return static_cast<int>(c);
  fail(where + "missing required column '" + name + "'");
}

int optional_column(const std::vector<std::string>& header,
                    const std::string& name) {
  for (std::size_t c = 0; c < header.size(); ++c)
    if (trim(header[c]) == name) return static_cast<int>(c);
  return -1;
}

}  // namespace

StudentRecord PanelData::record(std::int64_t r) const {
  StudentRecord rec;
  if (!student_ids.empty()) rec.student_id = student_ids[r];
  rec.teacher = teacher[r];
  rec.year = year[r];
  rec.score = score[r];
  rec.has_outcome = row_has_outcome(r);
  rec.outcome = rec.has_outcome ? outcome[r] : 0.0;
  if (K > 0) rec.covariates = X.row(r);
  return rec;
}

bool PanelData::balanced() const {
  for (std::size_t j = 1; j < teacher_years.size(); ++j)
    if (teacher_years[j] != teacher_years[0]) return false;
  return true;
}

void PanelData::finalize() {
  const std::int64_t n = n_records();
  if (static_cast<std::int64_t>(teacher.size()) != n ||
      static_cast<std::int64_t>(year.size()) != n ||
      static_cast<std::int64_t>(outcome.size()) != n)
    fail("finalize: record columns have inconsistent lengths");
  if (K > 0 && (X.rows() != n || X.cols() != K))
    fail("finalize: covariate matrix does not match n x K");
  if (!student_ids.empty() &&
      static_cast<std::int64_t>(student_ids.size()) != n)
    fail("finalize: student_ids length mismatch");

  const int j0 = static_cast<int>(teacher_ids.size());
  std::vector<std::vector<std::int32_t>> years(j0);
  for (std::int64_t r = 0; r < n; ++r) {
    const std::int32_t j = teacher[r];
    if (j < 0 || j >= j0) fail("finalize: teacher index out of range");
    years[j].push_back(year[r]);
  }
  for (auto& ys : years) {
    std::sort(ys.begin(), ys.end());
    ys.erase(std::unique(ys.begin(), ys.end()), ys.end());
  }

  // Drop teachers with < 2 distinct years; leave-out constructions need two.
  std::vector<std::int32_t> remap(j0, -1);
  std::vector<std::string> kept_ids;
  excluded_teachers = 0;
  excluded_teacher_ids.clear();
  teacher_years.clear();
  for (int j = 0; j < j0; ++j) {
    if (years[j].size() >= 2) {
      remap[j] = static_cast<std::int32_t>(kept_ids.size());
      kept_ids.push_back(teacher_ids[j]);
      teacher_years.push_back(std::move(years[j]));
    } else {
      ++excluded_teachers;
      excluded_teacher_ids.push_back(teacher_ids[j]);
    }
  }

  if (excluded_teachers > 0) {
    std::int64_t w = 0;
    for (std::int64_t r = 0; r < n; ++r) {
      if (remap[teacher[r]] < 0) continue;
      teacher[w] = remap[teacher[r]];
      year[w] = year[r];
      score[w] = score[r];
      outcome[w] = outcome[r];
      if (!student_ids.empty()) student_ids[w] = std::move(student_ids[r]);
      if (K > 0) X.row(w) = X.row(r);
      ++w;
    }
    teacher.resize(w);
    year.resize(w);
    score.resize(w);
    outcome.resize(w);
    if (!student_ids.empty()) student_ids.resize(w);
    if (K > 0) X.conservativeResize(w, K);
  }
  teacher_ids = std::move(kept_ids);

  const std::int64_t m = n_records();
  const int j1 = static_cast<int>(teacher_ids.size());
  if (m > std::numeric_limits<std::int32_t>::max())
    fail("finalize: panel exceeds the 2^31 row indexing limit");

  // Counting sort by teacher, then year-sort each teacher's slice (stable in
  // input order between equal years).
  teacher_offset.assign(j1 + 1, 0);
  for (std::int64_t r = 0; r < m; ++r) ++teacher_offset[teacher[r] + 1];
  for (int j = 0; j < j1; ++j) teacher_offset[j + 1] += teacher_offset[j];
  row_perm.assign(m, 0);
  std::vector<std::int32_t> cursor(teacher_offset.begin(),
                                   teacher_offset.end() - 1);
  for (std::int64_t r = 0; r < m; ++r)
    row_perm[cursor[teacher[r]]++] = static_cast<std::int32_t>(r);
  for (int j = 0; j < j1; ++j) {
    auto* b = row_perm.data() + teacher_offset[j];
    auto* e = row_perm.data() + teacher_offset[j + 1];
    std::stable_sort(b, e, [this](std::int32_t a, std::int32_t c) {
      return year[a] < year[c];
    });
  }
}

Eigen::RowVectorXd TeacherYearVars::lookup(const std::string& tid,
                                           std::int32_t yr) const {
  if (index_.empty() && !teacher_id.empty()) {
    for (std::size_t r = 0; r < teacher_id.size(); ++r)
      index_.emplace(teacher_id[r] + '\x1f' + std::to_string(year[r]),
                     static_cast<std::int64_t>(r));
  }
  const auto it = index_.find(tid + '\x1f' + std::to_string(yr));
  if (it == index_.end())
    fail("teacher-year variables: no row for teacher '" + tid + "', year " +
         std::to_string(yr));
  return D.row(it->second);
}

PanelData load_panel(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) fail("load_panel: cannot open '" + path + "'");

  std::string line;
  std::vector<std::string> fields;
  if (!std::getline(in, line)) fail(loc(path, 1) + "empty file");
  split_csv(line, fields);
  const std::string hwhere = loc(path, 1);
  const int c_sid = required_column(fields, schema.student_id, hwhere);
  const int c_tid = required_column(fields, schema.teacher_id, hwhere);
  const int c_year = required_column(fields, schema.year, hwhere);
  const int c_score = required_column(fields, schema.score, hwhere);
  const int c_outcome = optional_column(fields, schema.outcome);
  const std::vector<int> c_x =
      covariate_columns(fields, schema.covariate_prefix, hwhere);
  const std::size_t n_cols = fields.size();
  const int K = static_cast<int>(c_x.size());

  PanelData panel;
  panel.K = K;
  std::vector<std::vector<double>> xcols(K);
  std::unordered_map<std::string, std::int32_t> teacher_index;
  std::unordered_set<std::string> seen_student_year;

  std::int64_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
    split_csv(line, fields);
    const std::string where = loc(path, lineno);
    if (fields.size() != n_cols)
      fail(where + "expected " + std::to_string(n_cols) + " fields, got " +
           std::to_string(fields.size()));

    const std::string sid = trim(fields[c_sid]);
    const std::int32_t yr = parse_year(fields[c_year], where);
    if (!seen_student_year.insert(sid + '\x1f' + std::to_string(yr)).second)
      fail(where + "duplicate (student_id, year) = ('" + sid + "', " +
           std::to_string(yr) + ")");

    const std::string tid = trim(fields[c_tid]);
    auto [it, inserted] = teacher_index.emplace(
        tid, static_cast<std::int32_t>(panel.teacher_ids.size()));
    if (inserted) panel.teacher_ids.push_back(tid);

    panel.student_ids.push_back(sid);
    panel.teacher.push_back(it->second);
    panel.year.push_back(yr);
    panel.score.push_back(parse_double(fields[c_score], where));
    if (c_outcome >= 0 && !trim(fields[c_outcome]).empty())
      panel.outcome.push_back(parse_double(fields[c_outcome], where));
    else
      panel.outcome.push_back(kNaN);
    for (int k = 0; k < K; ++k)
      xcols[k].push_back(parse_double(fields[c_x[k]], where));
  }

  const std::int64_t n = static_cast<std::int64_t>(panel.score.size());
  if (n == 0) fail(loc(path, lineno) + "no data rows");
  panel.X.resize(n, K);
  for (int k = 0; k < K; ++k)
    panel.X.col(k) = Eigen::Map<Eigen::VectorXd>(xcols[k].data(), n);
  panel.finalize();
  return panel;
}

TeacherYearVars load_teacher_year_vars(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("load_teacher_year_vars: cannot open '" + path + "'");

  std::string line;
  std::vector<std::string> fields;
  if (!std::getline(in, line)) fail(loc(path, 1) + "empty file");
  split_csv(line, fields);
  const std::string hwhere = loc(path, 1);
  const int c_tid = required_column(fields, "teacher_id", hwhere);
  const int c_year = required_column(fields, "year", hwhere);
  const std::vector<int> c_d = covariate_columns(fields, "d", hwhere);
  if (c_d.empty()) fail(hwhere + "no d1..dK columns found");
  const std::size_t n_cols = fields.size();

  TeacherYearVars vars;
  vars.K_d = static_cast<int>(c_d.size());
  std::vector<std::vector<double>> dcols(vars.K_d);
  std::unordered_set<std::string> seen;

  std::int64_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
    split_csv(line, fields);
    const std::string where = loc(path, lineno);
    if (fields.size() != n_cols)
      fail(where + "expected " + std::to_string(n_cols) + " fields, got " +
           std::to_string(fields.size()));
    const std::string tid = trim(fields[c_tid]);
    const std::int32_t yr = parse_year(fields[c_year], where);
    if (!seen.insert(tid + '\x1f' + std::to_string(yr)).second)
      fail(where + "duplicate (teacher_id, year) = ('" + tid + "', " +
           std::to_string(yr) + ")");
    vars.teacher_id.push_back(tid);
    vars.year.push_back(yr);
    for (int k = 0; k < vars.K_d; ++k)
      dcols[k].push_back(parse_double(fields[c_d[k]], where));
  }

  const std::int64_t n = static_cast<std::int64_t>(vars.teacher_id.size());
  if (n == 0) fail(loc(path, lineno) + "no data rows");
  vars.D.resize(n, vars.K_d);
  for (int k = 0; k < vars.K_d; ++k)
    vars.D.col(k) = Eigen::Map<Eigen::VectorXd>(dcols[k].data(), n);
  return vars;
}

void write_panel_csv(const PanelData& panel, const std::string& path) {
  CsvWriter out(path);
  std::vector<std::string> row;
  row = {"student_id", "teacher_id", "year", "score", "outcome"};
  for (int k = 1; k <= panel.K; ++k) row.push_back("x" + std::to_string(k));
  out.write_row(row);

  const std::int64_t n = panel.n_records();
  for (std::int64_t r = 0; r < n; ++r) {
    row.clear();
    row.push_back(panel.student_ids.empty() ? "s" + std::to_string(r + 1)
                                            : panel.student_ids[r]);
    row.push_back(panel.teacher_ids[panel.teacher[r]]);
    row.push_back(std::to_string(panel.year[r]));
    row.push_back(format_double(panel.score[r]));
    row.push_back(panel.row_has_outcome(r) ? format_double(panel.outcome[r])
                                           : "");
    for (int k = 0; k < panel.K; ++k)
      row.push_back(format_double(panel.X(r, k)));
    out.write_row(row);
  }
  out.close();
}

Eigen::VectorXd ClassPanel::leaveout_row(int j, int c) const {
  const std::int32_t b = cell_offset[j];
  const std::int32_t e = cell_offset[j + 1];
  Eigen::VectorXd out(e - b - 1);
  int w = 0;
  for (std::int32_t cc = b; cc < e; ++cc)
    if (cc != c) out[w++] = prelim_va[cc];
  return out;
}

bool ClassPanel::balanced() const {
  const int j1 = n_teachers();
  if (j1 <= 1) return true;
  const std::int32_t t0 = cell_offset[1] - cell_offset[0];
  for (int j = 1; j < j1; ++j) {
    if (cell_offset[j + 1] - cell_offset[j] != t0) return false;
    for (std::int32_t c = 0; c < t0; ++c)
      if (year[cell_offset[j] + c] != year[cell_offset[0] + c]) return false;
  }
  return true;
}

std::vector<std::int32_t> ClassPanel::gaps_present() const {
  std::unordered_set<std::int32_t> gaps;
  for (int j = 0; j < n_teachers(); ++j) {
    for (std::int32_t a = cell_offset[j]; a < cell_offset[j + 1]; ++a)
      for (std::int32_t b = a + 1; b < cell_offset[j + 1]; ++b)
        gaps.insert(year[b] - year[a]);
  }
  std::vector<std::int32_t> out(gaps.begin(), gaps.end());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<double> within_transform(const std::vector<double>& values,
                                     const ClassPanel& cells) {
  if (values.size() != static_cast<std::size_t>(cells.n_cells()))
    fail("within_transform: series does not align with the cells");
  std::vector<double> out(values.size());
  for (int j = 0; j < cells.n_teachers(); ++j) {
    const std::int32_t b = cells.cell_offset[j];
    const std::int32_t e = cells.cell_offset[j + 1];
    double mean = 0.0;
    for (std::int32_t c = b; c < e; ++c) {
      if (std::isnan(values[c]))
        fail("within_transform: NaN cell for teacher '" +
             cells.teacher_ids[j] + "'");
      mean += values[c];
    }
    mean /= static_cast<double>(e - b);
    for (std::int32_t c = b; c < e; ++c) out[c] = values[c] - mean;
  }
  return out;
}

ClassPanel class_aggregate(const PanelData& panel,
                           const std::vector<double>& score_resid,
                           const std::vector<double>& outcome_resid) {
  const std::int64_t n = panel.n_records();
  if (static_cast<std::int64_t>(score_resid.size()) != n)
    fail("class_aggregate: score residuals do not align with the panel");
  const bool have_y = !outcome_resid.empty();
  if (have_y && static_cast<std::int64_t>(outcome_resid.size()) != n)
    fail("class_aggregate: outcome residuals do not align with the panel");

  ClassPanel cells;
  cells.K = panel.K;
  cells.teacher_ids = panel.teacher_ids;
  const int j1 = panel.n_teachers();
  cells.cell_offset.assign(1, 0);

  std::vector<double> xm_rows;    // accumulated row-major, K per cell
  std::vector<double> xmy_rows;
  for (int j = 0; j < j1; ++j) {
    int count = 0;
    const std::int32_t* rows = panel.rows_of(j, &count);
    int i = 0;
    while (i < count) {
      const std::int32_t yr = panel.year[rows[i]];
      std::int32_t nn = 0, ny = 0;
      double sr = 0.0, sy = 0.0;
      Eigen::RowVectorXd sx = Eigen::RowVectorXd::Zero(panel.K);
      Eigen::RowVectorXd sxy = Eigen::RowVectorXd::Zero(panel.K);
      for (; i < count && panel.year[rows[i]] == yr; ++i) {
        const std::int32_t r = rows[i];
        if (std::isnan(score_resid[r]))
          fail("class_aggregate: NaN score residual for teacher '" +
               panel.teacher_ids[j] + "', year " + std::to_string(yr));
        sr += score_resid[r];
        ++nn;
        if (panel.K > 0) sx += panel.X.row(r);
        if (panel.row_has_outcome(r)) {
          ++ny;
          if (have_y) {
            if (std::isnan(outcome_resid[r]))
              fail("class_aggregate: NaN outcome residual on an "
                   "outcome-observed row, teacher '" +
                   panel.teacher_ids[j] + "', year " + std::to_string(yr));
            sy += outcome_resid[r];
          }
          if (panel.K > 0) sxy += panel.X.row(r);
        }
      }
      cells.year.push_back(yr);
      cells.n.push_back(nn);
      cells.n_y.push_back(ny);
      cells.prelim_va.push_back(sr / nn);
      cells.outcome_resid.push_back((have_y && ny > 0) ? sy / ny : 0.0);
      for (int k = 0; k < panel.K; ++k) {
        xm_rows.push_back(sx[k] / nn);
        xmy_rows.push_back(ny > 0 ? sxy[k] / ny : 0.0);
      }
    }
    cells.cell_offset.push_back(static_cast<std::int32_t>(cells.year.size()));
  }

  const std::int64_t c = static_cast<std::int64_t>(cells.year.size());
  cells.x_mean.resize(c, panel.K);
  cells.x_mean_y.resize(c, panel.K);
  for (std::int64_t i = 0; i < c; ++i)
    for (int k = 0; k < panel.K; ++k) {
      cells.x_mean(i, k) = xm_rows[i * panel.K + k];
      cells.x_mean_y(i, k) = xmy_rows[i * panel.K + k];
    }
  return cells;
}

}  // namespace vagmm
