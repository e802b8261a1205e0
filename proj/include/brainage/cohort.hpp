#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "brainage/csv.hpp"
#include "brainage/errors.hpp"
#include "brainage/rng.hpp"

namespace brainage {

enum class Split { Train, Validation, Test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

/// One subject's region-of-interest time series (rows = time points,
/// columns = regions) with an optional chronological age and, once computed,
/// the subject's sample covariance.
struct SubjectRecord {
  std::string subject_id;
  Eigen::MatrixXd timeseries;            // n x p
  std::optional<double> age;             // years
  std::optional<Eigen::MatrixXd> covariance;  // p x p, set by compute_covariance

  Eigen::Index n_obs() const { return timeseries.rows(); }
  Eigen::Index p() const { return timeseries.cols(); }
};

/// Mean-center each column, then K = (1/n) Xc^T Xc. The 1/n normalizer keeps
/// the covariance consistent with the Gaussian likelihood the models maximize.
inline Eigen::MatrixXd compute_covariance(SubjectRecord& record) {
  const Eigen::Index n = record.timeseries.rows();
  if (n < 2) {
    throw InsufficientDataError("subject '" + record.subject_id + "' has " +
                                std::to_string(n) +
                                " time points; at least 2 are required");
  }
  Eigen::MatrixXd centered = record.timeseries;
  centered.rowwise() -= record.timeseries.colwise().mean();
  Eigen::MatrixXd k = (centered.transpose() * centered) / static_cast<double>(n);
  k = ((k + k.transpose()) * 0.5).eval();  // exact symmetry
  record.covariance = k;
  return k;
}

/// An ordered collection of subjects with uniform region count and, after
/// splitting, a train/validation/test label per subject. Immutable once
/// built; safe to share read-only across threads.
struct CohortDataset {
  std::vector<SubjectRecord> subjects;
  Eigen::Index p = 0;
  std::map<std::string, Split> split_labels;

  const SubjectRecord* find(const std::string& id) const {
    for (const auto& s : subjects)
      if (s.subject_id == id) return &s;
    return nullptr;
  }

  std::vector<const SubjectRecord*> subjects_in(Split split) const {
    std::vector<const SubjectRecord*> out;
    for (const auto& s : subjects) {
      auto it = split_labels.find(s.subject_id);
      if (it != split_labels.end() && it->second == split) out.push_back(&s);
    }
    return out;
  }

  void compute_all_covariances() {
    for (auto& s : subjects) {
      if (!s.covariance) compute_covariance(s);
    }
  }
};

enum class CohortFormat { CsvDir, SingleTable };

namespace detail {

inline std::map<std::string, std::optional<double>> read_manifest(
    const std::filesystem::path& manifest_path,
    std::vector<std::string>& order) {
  std::ifstream in(manifest_path);
  if (!in) {
    throw IngestError("missing manifest file: " + manifest_path.string());
  }
  std::map<std::string, std::optional<double>> ages;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line);
    if (line_no == 1) {
      if (fields.size() < 2 || trim(fields[0]) != "subject_id" ||
          trim(fields[1]) != "age") {
        throw ParseError(manifest_path.string() +
                         ": expected header 'subject_id,age'");
      }
      continue;
    }
    if (fields.size() < 2) {
      throw ParseError(manifest_path.string() + ": row " +
                       std::to_string(line_no) + " has fewer than 2 columns");
    }
    const std::string id = trim(fields[0]);
    if (id.empty()) {
      throw ParseError(manifest_path.string() + ": empty subject_id at row " +
                       std::to_string(line_no));
    }
    if (ages.count(id)) {
      throw ParseError(manifest_path.string() + ": duplicate subject_id '" +
                       id + "'");
    }
    std::optional<double> age;
    const std::string age_field = trim(fields[1]);
    if (!age_field.empty()) {
      double v = 0;
      if (!parse_double(age_field, v)) {
        throw ParseError(manifest_path.string() + ": non-numeric age at row " +
                         std::to_string(line_no) + ", column 2: '" +
                         age_field + "'");
      }
      if (v < 0) {
        throw ValidationError(manifest_path.string() + ": negative age for '" +
                              id + "'");
      }
      age = v;
    }
    ages.emplace(id, age);
    order.push_back(id);
  }
  return ages;
}

inline CohortDataset load_csv_dir(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.csv";
  std::vector<std::string> order;
  auto ages = read_manifest(manifest_path, order);

  // The manifest defines the cohort; any matrix file not listed there is an
  // error rather than silently ignored.
  std::set<std::string> listed(order.begin(), order.end());
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto& path = entry.path();
    if (path.extension() != ".csv" || path.filename() == "manifest.csv") continue;
    if (!listed.count(path.stem().string())) {
      throw IngestError("matrix file not listed in manifest: " + path.string());
    }
  }

  CohortDataset cohort;
  std::string first_id;
  for (const auto& id : order) {
    const auto matrix_path = dir / (id + ".csv");
    if (!std::filesystem::exists(matrix_path)) {
      throw IngestError("missing matrix file for subject '" + id +
                        "': " + matrix_path.string());
    }
    SubjectRecord rec;
    rec.subject_id = id;
    rec.timeseries = read_matrix_csv(matrix_path);
    rec.age = ages.at(id);
    if (rec.timeseries.rows() < 2) {
      throw InsufficientDataError("subject '" + id + "' has " +
                                  std::to_string(rec.timeseries.rows()) +
                                  " time points; at least 2 are required");
    }
    if (cohort.subjects.empty()) {
      cohort.p = rec.p();
      first_id = id;
    } else if (rec.p() != cohort.p) {
      throw DimensionError("region count mismatch: subject '" + first_id +
                           "' has " + std::to_string(cohort.p) +
                           " regions but subject '" + id + "' has " +
                           std::to_string(rec.p()));
    }
    cohort.subjects.push_back(std::move(rec));
  }
  return cohort;
}

inline CohortDataset load_single_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open table file: " + path.string());

  std::string line;
  if (!std::getline(in, line)) {
    throw IngestError("empty table file: " + path.string());
  }
  const auto header = split_csv_line(line);
  if (header.size() < 3 || trim(header[0]) != "subject_id" ||
      trim(header[1]) != "time_index") {
    throw ParseError(path.string() +
                     ": expected header 'subject_id,time_index,<regions...>'");
  }
  // Optional trailing 'age' column; everything else after time_index is a region.
  std::size_t first_region = 2;
  bool has_age = false;
  std::size_t age_col = 0;
  for (std::size_t c = first_region; c < header.size(); ++c) {
    if (trim(header[c]) == "age") {
      has_age = true;
      age_col = c;
    }
  }
  std::vector<std::size_t> region_cols;
  for (std::size_t c = first_region; c < header.size(); ++c) {
    if (!(has_age && c == age_col)) region_cols.push_back(c);
  }
  if (region_cols.empty()) {
    throw ParseError(path.string() + ": no region columns in header");
  }

  struct Accum {
    std::vector<std::pair<double, std::vector<double>>> rows;  // (time, values)
    std::optional<double> age;
  };
  std::map<std::string, Accum> by_subject;
  std::vector<std::string> order;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw ParseError(path.string() + ": row " + std::to_string(line_no) +
                       " has " + std::to_string(fields.size()) +
                       " columns, expected " + std::to_string(header.size()));
    }
    const std::string id = trim(fields[0]);
    double t = 0;
    if (!parse_double(fields[1], t)) {
      throw ParseError(path.string() + ": non-numeric time_index at row " +
                       std::to_string(line_no) + ", column 2");
    }
    std::vector<double> values(region_cols.size());
    for (std::size_t j = 0; j < region_cols.size(); ++j) {
      if (!parse_double(fields[region_cols[j]], values[j])) {
        throw ParseError(path.string() + ": non-numeric cell at row " +
                         std::to_string(line_no) + ", column " +
                         std::to_string(region_cols[j] + 1));
      }
    }
    auto [it, inserted] = by_subject.try_emplace(id);
    if (inserted) order.push_back(id);
    if (has_age) {
      const std::string age_field = trim(fields[age_col]);
      if (!age_field.empty()) {
        double a = 0;
        if (!parse_double(age_field, a)) {
          throw ParseError(path.string() + ": non-numeric age at row " +
                           std::to_string(line_no));
        }
        if (it->second.age && *it->second.age != a) {
          throw ParseError(path.string() + ": subject '" + id +
                           "' has inconsistent ages");
        }
        it->second.age = a;
      }
    }
    it->second.rows.emplace_back(t, std::move(values));
  }

  CohortDataset cohort;
  cohort.p = static_cast<Eigen::Index>(region_cols.size());
  for (const auto& id : order) {
    auto& acc = by_subject.at(id);
    std::stable_sort(acc.rows.begin(), acc.rows.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    SubjectRecord rec;
    rec.subject_id = id;
    rec.age = acc.age;
    rec.timeseries.resize(static_cast<Eigen::Index>(acc.rows.size()), cohort.p);
    for (std::size_t r = 0; r < acc.rows.size(); ++r)
      for (Eigen::Index c = 0; c < cohort.p; ++c)
        rec.timeseries(static_cast<Eigen::Index>(r), c) =
            acc.rows[r].second[static_cast<std::size_t>(c)];
    if (rec.timeseries.rows() < 2) {
      throw InsufficientDataError("subject '" + id + "' has " +
                                  std::to_string(rec.timeseries.rows()) +
                                  " time points; at least 2 are required");
    }
    cohort.subjects.push_back(std::move(rec));
  }
  if (cohort.subjects.empty()) {
    throw IngestError("table file contains no subjects: " + path.string());
  }
  return cohort;
}

}  // namespace detail

/// Load a cohort from disk. `csv_dir` expects one `<subject_id>.csv` matrix
/// per subject plus a `manifest.csv` with header `subject_id,age` (empty age
/// cell = prediction-only subject). `single_table` expects one long-format
/// file with subject_id, time_index and region columns. Covariances are not
/// computed here.
inline CohortDataset load_cohort(const std::filesystem::path& path,
                                 CohortFormat format) {
  if (!std::filesystem::exists(path)) {
    throw IngestError("cohort path does not exist: " + path.string());
  }
  switch (format) {
    case CohortFormat::CsvDir: return detail::load_csv_dir(path);
    case CohortFormat::SingleTable: return detail::load_single_table(path);
  }
  throw ConfigError("unknown cohort format");
}

struct SplitFractions {
  double train = 0.6;
  double validation = 0.2;
  double test = 0.2;
};

/// Subject-level random partition into train/validation/test. Assignment is
/// keyed on (subject_id hash, seed), never on list position, so enumeration
/// order cannot change results. Validation and test counts are the rounded
/// fractions (at least 1 each); the remainder goes to train.
inline CohortDataset split_cohort(CohortDataset cohort, SplitFractions fractions,
                                  std::uint64_t seed) {
  const double sum = fractions.train + fractions.validation + fractions.test;
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1, got " +
                      format_double(sum));
  }
  if (fractions.train <= 0 || fractions.validation <= 0 || fractions.test <= 0) {
    throw ConfigError("split fractions must all be positive");
  }
  const std::size_t n = cohort.subjects.size();
  if (n < 3) {
    throw ConfigError("cohort must have at least 3 subjects to split, got " +
                      std::to_string(n));
  }

  auto rounded = [n](double f) {
    return static_cast<std::size_t>(std::llround(f * static_cast<double>(n)));
  };
  const std::size_t n_val = std::max<std::size_t>(1, rounded(fractions.validation));
  const std::size_t n_test = std::max<std::size_t>(1, rounded(fractions.test));
  if (n_val + n_test >= n) {
    throw ConfigError("split fractions leave no training subjects");
  }
  const std::size_t n_train = n - n_val - n_test;

  // Order subjects by a seed-keyed hash of their id; ties broken by id.
  std::vector<std::pair<std::uint64_t, std::string>> keyed;
  keyed.reserve(n);
  for (const auto& s : cohort.subjects) {
    keyed.emplace_back(derive_seed(seed, {stage_tag("split"), fnv1a64(s.subject_id)}),
                       s.subject_id);
  }
  std::sort(keyed.begin(), keyed.end());

  cohort.split_labels.clear();
  for (std::size_t i = 0; i < n; ++i) {
    Split label = i < n_train                ? Split::Train
                  : i < n_train + n_val      ? Split::Validation
                                             : Split::Test;
    cohort.split_labels.emplace(keyed[i].second, label);
  }
  return cohort;
}

}  // namespace brainage
