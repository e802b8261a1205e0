#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SVD>

#include <json.hpp>

#include "brainage/activity.hpp"
#include "brainage/cohort.hpp"
#include "brainage/csv.hpp"
#include "brainage/errors.hpp"
#include "brainage/fit.hpp"
#include "brainage/parallel.hpp"
#include "brainage/rng.hpp"

namespace brainage {

/// Linear brain-age model on network activities: age = intercept + beta . g.
struct AgeModel {
  Eigen::VectorXd coefficients;
  double intercept = 0.0;
  bool use_intercept = true;
  int k = 0;
  bool rank_deficient = false;
  std::string warning;
};

struct EvalReport {
  double mae_mean = 0.0;  // years
  double mae_std = 0.0;   // years
  int n_bootstrap = 0;
  int subset_size = 0;
  std::uint64_t seed = 0;
};

/// Ordinary least squares of ages on activity features, solved by SVD. Any
/// design without full column rank (a network with identically zero
/// activity, or fewer subjects than parameters) yields the minimum-norm
/// solution with a warning attached.
inline AgeModel fit_age_model(const Eigen::MatrixXd& features,
                              const Eigen::VectorXd& ages,
                              bool use_intercept = true) {
  const Eigen::Index n = features.rows();
  const Eigen::Index k = features.cols();
  if (ages.size() != n) {
    throw DimensionError("feature rows and age count differ");
  }
  if (n < 1 || k < 1) {
    throw ConfigError("age regression needs at least one subject and feature");
  }
  if (!ages.allFinite() || !features.allFinite()) {
    throw ValidationError("ages and features must be finite");
  }

  const Eigen::Index cols = k + (use_intercept ? 1 : 0);
  Eigen::MatrixXd design(n, cols);
  design.leftCols(k) = features;
  if (use_intercept) design.col(k).setOnes();

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(design,
                                        Eigen::ComputeThinU | Eigen::ComputeThinV);
  svd.setThreshold(Eigen::Default);
  Eigen::VectorXd solution = svd.solve(ages);

  AgeModel model;
  model.k = static_cast<int>(k);
  model.use_intercept = use_intercept;
  model.coefficients = solution.head(k);
  model.intercept = use_intercept ? solution(k) : 0.0;
  if (svd.rank() < cols) {
    model.rank_deficient = true;
    model.warning = "design matrix is rank-deficient (rank " +
                    std::to_string(svd.rank()) + " of " + std::to_string(cols) +
                    "); minimum-norm solution returned";
  }
  return model;
}

inline double predict_age(const AgeModel& model,
                          const Eigen::VectorXd& activities) {
  if (activities.size() != model.coefficients.size()) {
    throw DimensionError("activity vector length does not match model (got " +
                         std::to_string(activities.size()) + ", expected " +
                         std::to_string(model.coefficients.size()) + ")");
  }
  return model.intercept + model.coefficients.dot(activities);
}

/// Mean absolute error over random fixed-size cohorts: draw `n_bootstrap`
/// subsets of `subset_size` subjects without replacement, compute the MAE of
/// each, and report the mean and (population) standard deviation across
/// replicates. Each replicate's draw derives from (seed, replicate index),
/// so parallel execution is order-independent and deterministic.
inline EvalReport bootstrap_mae(const Eigen::VectorXd& predictions,
                                const Eigen::VectorXd& true_ages,
                                int subset_size = 30, int n_bootstrap = 1000,
                                std::uint64_t seed = 0,
                                std::size_t n_threads = 1) {
  const Eigen::Index m = predictions.size();
  if (true_ages.size() != m) {
    throw DimensionError("prediction and age vectors differ in length");
  }
  if (subset_size < 1 || n_bootstrap < 1) {
    throw ConfigError("subset_size and n_bootstrap must be positive");
  }
  if (m < subset_size) {
    throw ConfigError("cohort of " + std::to_string(m) +
                      " subjects is smaller than subset size " +
                      std::to_string(subset_size));
  }

  const Eigen::VectorXd abs_err = (predictions - true_ages).cwiseAbs();
  std::vector<double> replicate_mae(static_cast<std::size_t>(n_bootstrap), 0.0);
  parallel_for(static_cast<std::size_t>(n_bootstrap), n_threads,
               [&](std::size_t r) {
                 Rng rng(derive_seed(seed, {stage_tag("bootstrap"), r}));
                 std::vector<Eigen::Index> idx(static_cast<std::size_t>(m));
                 for (Eigen::Index i = 0; i < m; ++i)
                   idx[static_cast<std::size_t>(i)] = i;
                 double total = 0.0;
                 for (int i = 0; i < subset_size; ++i) {
                   const auto j =
                       i + static_cast<Eigen::Index>(rng.uniform_below(
                               static_cast<std::uint64_t>(m - i)));
                   std::swap(idx[static_cast<std::size_t>(i)],
                             idx[static_cast<std::size_t>(j)]);
                   total += abs_err(idx[static_cast<std::size_t>(i)]);
                 }
                 replicate_mae[r] = total / subset_size;
               });

  double mean = 0.0;
  for (double v : replicate_mae) mean += v;
  mean /= n_bootstrap;
  double var = 0.0;
  for (double v : replicate_mae) var += (v - mean) * (v - mean);
  var /= n_bootstrap;

  EvalReport report;
  report.mae_mean = mean;
  report.mae_std = std::sqrt(var);
  report.n_bootstrap = n_bootstrap;
  report.subset_size = subset_size;
  report.seed = seed;
  return report;
}

struct BootstrapOptions {
  int subset_size = 30;
  int n_bootstrap = 1000;
  std::uint64_t seed = 0;
  std::size_t n_threads = 1;
};

/// Predict ages for every subject of an unseen cohort with a frozen loading
/// matrix and age model (noise and activities via the unseen-subject
/// estimators), then score with bootstrap_mae. Neither model is updated.
inline EvalReport transfer_evaluate(const FittedModel& model,
                                    const AgeModel& age_model,
                                    const CohortDataset& unseen_cohort,
                                    const BootstrapOptions& opts = {}) {
  if (unseen_cohort.subjects.empty()) {
    throw ConfigError("unseen cohort is empty");
  }
  if (unseen_cohort.p != model.loading.p()) {
    throw DimensionError("unseen cohort has p=" + std::to_string(unseen_cohort.p) +
                         " regions but the model expects p=" +
                         std::to_string(model.loading.p()));
  }
  if (age_model.coefficients.size() != model.loading.k()) {
    throw DimensionError("age model rank does not match covariance model rank");
  }

  const double ortho_tol = regime_orthonormal(model.loading.regime)
                               ? 1e-3
                               : std::numeric_limits<double>::infinity();
  Eigen::VectorXd predictions(unseen_cohort.subjects.size());
  Eigen::VectorXd ages(unseen_cohort.subjects.size());
  Eigen::Index i = 0;
  for (const auto& subject : unseen_cohort.subjects) {
    if (!subject.age) {
      throw ValidationError("subject '" + subject.subject_id +
                            "' has no age; transfer evaluation needs true ages");
    }
    Eigen::MatrixXd sigma_hat;
    if (subject.covariance) {
      sigma_hat = *subject.covariance;
    } else {
      SubjectRecord tmp = subject;
      sigma_hat = compute_covariance(tmp);
    }
    const double noise =
        estimate_noise(model.loading, sigma_hat, ortho_tol);
    ActivityEstimate est = estimate_activities(model.loading, sigma_hat, noise,
                                               subject.subject_id, ortho_tol);
    predictions(i) = predict_age(age_model, est.clamped_activities);
    ages(i) = *subject.age;
    ++i;
  }
  return bootstrap_mae(predictions, ages, opts.subset_size, opts.n_bootstrap,
                       opts.seed, opts.n_threads);
}

// --- serialization ---------------------------------------------------------

inline constexpr int kAgeModelSchemaVersion = 1;

inline nlohmann::json to_json(const AgeModel& model) {
  nlohmann::json j;
  j["schema_version"] = kAgeModelSchemaVersion;
  j["kind"] = "age_model";
  j["k"] = model.k;
  j["coefficients"] = std::vector<double>(model.coefficients.begin(),
                                          model.coefficients.end());
  j["intercept"] = model.intercept;
  j["use_intercept"] = model.use_intercept;
  j["rank_deficient"] = model.rank_deficient;
  j["warning"] = model.warning;
  return j;
}

inline AgeModel age_model_from_json(const nlohmann::json& j) {
  if (!j.contains("schema_version") ||
      j.at("schema_version").get<int>() != kAgeModelSchemaVersion) {
    throw ConfigError("unsupported age-model schema version");
  }
  AgeModel model;
  model.k = j.at("k").get<int>();
  const auto coefs = j.at("coefficients").get<std::vector<double>>();
  if (coefs.size() != static_cast<std::size_t>(model.k)) {
    throw ConfigError("age-model coefficient count does not match k");
  }
  model.coefficients = Eigen::Map<const Eigen::VectorXd>(
      coefs.data(), static_cast<Eigen::Index>(coefs.size()));
  model.intercept = j.at("intercept").get<double>();
  model.use_intercept = j.at("use_intercept").get<bool>();
  model.rank_deficient = j.at("rank_deficient").get<bool>();
  model.warning = j.at("warning").get<std::string>();
  return model;
}

inline nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json j;
  j["mae_mean"] = report.mae_mean;
  j["mae_std"] = report.mae_std;
  j["n_bootstrap"] = report.n_bootstrap;
  j["subset_size"] = report.subset_size;
  j["seed"] = report.seed;
  return j;
}

/// Append one evaluation row to the shared results ledger, creating it with
/// a header when absent.
inline void ledger_append(const std::filesystem::path& path,
                          const std::string& run_id, const std::string& regime,
                          int k, const std::string& dataset,
                          const EvalReport& report) {
  const bool exists = std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw IngestError("cannot open results ledger: " + path.string());
  if (!exists) {
    out << "run_id,regime,k,dataset,mae_mean,mae_std,seed\n";
  }
  out << run_id << ',' << regime << ',' << k << ',' << dataset << ','
      << format_double(report.mae_mean) << ',' << format_double(report.mae_std)
      << ',' << report.seed << '\n';
}

}  // namespace brainage
