#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <string>

#include "brainage/cohort.hpp"
#include "brainage/csv.hpp"
#include "brainage/synthetic.hpp"

namespace testutil {

/// Unique scratch directory, removed on destruction.
struct TempDir {
  std::filesystem::path path;

  TempDir() {
    static std::atomic<int> counter{0};
    path = std::filesystem::temp_directory_path() /
           ("brainage_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline void write_text(const std::filesystem::path& path, const std::string& s) {
  std::ofstream out(path);
  out << s;
}

/// Materialize a synthetic cohort in csv_dir layout (matrix per subject plus
/// manifest).
inline void write_cohort_dir(const std::filesystem::path& dir,
                             const brainage::CohortDataset& cohort,
                             bool with_ages = true) {
  std::filesystem::create_directories(dir);
  std::string manifest = "subject_id,age\n";
  for (const auto& subject : cohort.subjects) {
    brainage::write_matrix_csv(dir / (subject.subject_id + ".csv"),
                               subject.timeseries);
    manifest += subject.subject_id + ",";
    if (with_ages && subject.age) manifest += brainage::format_double(*subject.age);
    manifest += "\n";
  }
  write_text(dir / "manifest.csv", manifest);
}

}  // namespace testutil
