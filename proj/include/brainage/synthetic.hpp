#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "brainage/activity.hpp"
#include "brainage/age_regression.hpp"
#include "brainage/cohort.hpp"
#include "brainage/errors.hpp"
#include "brainage/fit.hpp"
#include "brainage/low_rank_model.hpp"
#include "brainage/parallel.hpp"
#include "brainage/rng.hpp"

namespace brainage {

/// Generative settings for the synthetic study: regions p, networks k,
/// N subjects with n observations each, truncated-normal activities,
/// uniform regression coefficients, isotropic subject noise v and age noise
/// variance epsilon.
struct SynthConfig {
  Eigen::Index p = 50;
  Eigen::Index k = 5;
  int n_subjects = 25;
  int n_obs = 100;
  double activity_mean = 2.5;
  double activity_std = 1.0;
  double beta_min = 0.0;
  double beta_max = 10.0;
  double subject_noise = 1.0;  // v
  double age_noise = 1.0;      // epsilon, variance of the age draw
  std::uint64_t seed = 0;

  void validate() const {
    if (k < 1 || k >= p) throw ConfigError("synthetic config requires 1 <= k < p");
    if (n_subjects < 1) throw ConfigError("n_subjects must be positive");
    if (n_obs < 2) throw ConfigError("n_obs must be at least 2");
    if (activity_std <= 0 || subject_noise <= 0 || age_noise <= 0) {
      throw ConfigError("scale parameters must be positive");
    }
    if (beta_max < beta_min) throw ConfigError("beta interval is empty");
  }
};

/// A generated cohort together with its hidden ground truth.
struct SynthCohort {
  LoadingMatrix ground_truth_loading;
  Eigen::VectorXd ground_truth_beta;
  CohortDataset cohort;
  std::map<std::string, Eigen::VectorXd> true_activities;
  std::map<std::string, double> true_noise;
};

/// Sample a loading matrix that is exactly feasible for the non-negative
/// orthonormal constraint set: dense U[0,1] entries, per-row argmax retained
/// (ties to the lowest column index), columns rescaled to unit norm.
/// Resampled wholesale if any column comes out empty.
inline LoadingMatrix sample_loading(Eigen::Index p, Eigen::Index k,
                                    std::uint64_t seed) {
  if (k < 1 || k >= p) throw ConfigError("sample_loading requires 1 <= k < p");
  for (int attempt = 0; attempt < 100; ++attempt) {
    Rng rng(derive_seed(seed, {stage_tag("loading"),
                               static_cast<std::uint64_t>(attempt)}));
    Eigen::MatrixXd w(p, k);
    for (Eigen::Index r = 0; r < p; ++r)
      for (Eigen::Index c = 0; c < k; ++c) w(r, c) = rng.uniform01();
    for (Eigen::Index r = 0; r < p; ++r) {
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < k; ++c) {
        if (w(r, c) > w(r, best)) best = c;  // strict: ties keep lowest index
      }
      const double kept = w(r, best);
      w.row(r).setZero();
      w(r, best) = kept;
    }
    bool any_empty = false;
    for (Eigen::Index c = 0; c < k; ++c) {
      const double norm = w.col(c).norm();
      if (norm == 0.0) {
        any_empty = true;
        break;
      }
      w.col(c) /= norm;
    }
    if (!any_empty) return LoadingMatrix{std::move(w), Regime::MHA};
  }
  throw NumericError("failed to sample a loading matrix with non-empty columns");
}

/// Generate a full synthetic cohort: truncated-normal activities, uniform
/// regression coefficients, Gaussian observations with covariance
/// W G W^T + v I, and ages drawn around beta . g with variance epsilon.
/// Deterministic given the seed.
inline SynthCohort sample_cohort(const SynthConfig& config) {
  config.validate();
  SynthCohort out;
  out.ground_truth_loading =
      sample_loading(config.p, config.k,
                     derive_seed(config.seed, {stage_tag("w")}));

  Rng beta_rng(derive_seed(config.seed, {stage_tag("beta")}));
  out.ground_truth_beta.resize(config.k);
  for (Eigen::Index j = 0; j < config.k; ++j) {
    out.ground_truth_beta(j) = beta_rng.uniform(config.beta_min, config.beta_max);
  }

  const Eigen::MatrixXd& w = out.ground_truth_loading.values;
  const double noise_sd = std::sqrt(config.subject_noise);
  const double age_sd = std::sqrt(config.age_noise);

  out.cohort.p = config.p;
  out.cohort.subjects.resize(static_cast<std::size_t>(config.n_subjects));
  for (int i = 0; i < config.n_subjects; ++i) {
    const auto idx = static_cast<std::uint64_t>(i);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "synth-%05d", i);
    SubjectRecord rec;
    rec.subject_id = buf;

    Rng g_rng(derive_seed(config.seed, {stage_tag("activities"), idx}));
    Eigen::VectorXd g(config.k);
    for (Eigen::Index j = 0; j < config.k; ++j) {
      g(j) = g_rng.positive_normal(config.activity_mean, config.activity_std);
    }

    Rng x_rng(derive_seed(config.seed, {stage_tag("observations"), idx}));
    const Eigen::VectorXd sqrt_g = g.cwiseSqrt();
    rec.timeseries.resize(config.n_obs, config.p);
    Eigen::VectorXd z(config.k);
    for (int t = 0; t < config.n_obs; ++t) {
      for (Eigen::Index j = 0; j < config.k; ++j)
        z(j) = sqrt_g(j) * x_rng.normal();
      Eigen::VectorXd row = w * z;
      for (Eigen::Index d = 0; d < config.p; ++d)
        row(d) += noise_sd * x_rng.normal();
      rec.timeseries.row(t) = row.transpose();
    }

    Rng age_rng(derive_seed(config.seed, {stage_tag("age"), idx}));
    rec.age = std::max(0.0, age_rng.normal(out.ground_truth_beta.dot(g), age_sd));

    out.true_activities.emplace(rec.subject_id, std::move(g));
    out.true_noise.emplace(rec.subject_id, config.subject_noise);
    out.cohort.subjects[static_cast<std::size_t>(i)] = std::move(rec);
  }
  return out;
}

/// Squared Frobenius distance between two loading matrices after the optimal
/// column assignment (and per-column sign for regimes permitting negative
/// entries), solved exactly over all assignments.
inline double recovery_error(const LoadingMatrix& w_true,
                             const LoadingMatrix& w_hat) {
  if (w_true.p() != w_hat.p() || w_true.k() != w_hat.k()) {
    throw DimensionError("loading matrices have different shapes");
  }
  const Eigen::Index k = w_true.k();
  if (k > 20) throw ConfigError("alignment supports at most k=20 columns");
  const bool allow_sign = !regime_nonnegative(w_hat.regime);

  Eigen::MatrixXd cost(k, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    for (Eigen::Index l = 0; l < k; ++l) {
      const double plus = (w_true.values.col(j) - w_hat.values.col(l)).squaredNorm();
      if (allow_sign) {
        const double minus =
            (w_true.values.col(j) + w_hat.values.col(l)).squaredNorm();
        cost(j, l) = std::min(plus, minus);
      } else {
        cost(j, l) = plus;
      }
    }
  }

  // Exact assignment by subset DP: dp[mask] assigns true-columns
  // 0..popcount(mask)-1 to the hat-column set in mask.
  const std::size_t full = (std::size_t{1} << k) - 1;
  std::vector<double> dp(full + 1, std::numeric_limits<double>::infinity());
  dp[0] = 0.0;
  for (std::size_t mask = 1; mask <= full; ++mask) {
    const int j = __builtin_popcountll(mask) - 1;
    for (Eigen::Index l = 0; l < k; ++l) {
      if (!(mask & (std::size_t{1} << l))) continue;
      const double candidate =
          dp[mask ^ (std::size_t{1} << l)] + cost(j, static_cast<Eigen::Index>(l));
      dp[mask] = std::min(dp[mask], candidate);
    }
  }
  return dp[full];
}

inline double mean_absolute_error(const Eigen::VectorXd& predictions,
                                  const Eigen::VectorXd& truth) {
  if (predictions.size() != truth.size() || predictions.size() == 0) {
    throw DimensionError("prediction and truth vectors must match and be non-empty");
  }
  return (predictions - truth).cwiseAbs().mean();
}

/// Linear-interpolation quantile of an unsorted sample (type-7).
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double h = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(values.size() - 1, lo + 1);
  const double frac = h - std::floor(h);
  return values[lo] + frac * (values[hi] - values[lo]);
}

inline double median(std::vector<double> values) {
  return quantile(std::move(values), 0.5);
}

enum class StudyAxis { VaryObservations, VaryTrainingSubjects };

inline std::string to_string(StudyAxis axis) {
  return axis == StudyAxis::VaryObservations ? "vary_n" : "vary_N";
}

inline StudyAxis study_axis_from_string(const std::string& s) {
  if (s == "vary_n") return StudyAxis::VaryObservations;
  if (s == "vary_N") return StudyAxis::VaryTrainingSubjects;
  throw ConfigError("unknown study axis '" + s + "' (expected vary_n|vary_N)");
}

struct StudyConfig {
  StudyAxis axis = StudyAxis::VaryObservations;
  std::vector<int> grid;
  std::vector<Regime> regimes;
  int repeats = 20;
  SynthConfig base;
  int heldout_subjects = 30;
  FitOptions fit_options;
  bool use_intercept = true;
  std::size_t n_threads = 1;
};

struct StudyRow {
  int axis_value = 0;
  Regime regime = Regime::MHA;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string message;
  double recovery = 0.0;
  double mae = 0.0;
};

namespace detail {

inline double heldout_mae(const FittedModel& model, const AgeModel& age_model,
                          const std::vector<SubjectCovariance>& test_covs,
                          const std::vector<double>& test_ages) {
  const double ortho_tol = regime_orthonormal(model.loading.regime)
                               ? 1e-3
                               : std::numeric_limits<double>::infinity();
  Eigen::VectorXd predictions(static_cast<Eigen::Index>(test_covs.size()));
  Eigen::VectorXd truth(static_cast<Eigen::Index>(test_covs.size()));
  for (std::size_t i = 0; i < test_covs.size(); ++i) {
    const double v = estimate_noise(model.loading, test_covs[i].covariance,
                                    ortho_tol);
    ActivityEstimate est =
        estimate_activities(model.loading, test_covs[i].covariance, v,
                            test_covs[i].subject_id, ortho_tol);
    predictions(static_cast<Eigen::Index>(i)) =
        predict_age(age_model, est.clamped_activities);
    truth(static_cast<Eigen::Index>(i)) = test_ages[i];
  }
  return mean_absolute_error(predictions, truth);
}

}  // namespace detail

/// Run the simulation study: for each grid point and repeat, draw one cohort
/// (shared across regimes so comparisons are paired), fit every regime,
/// and record loading recovery error plus held-out-subject age MAE.
/// vary_n keeps the training-subject count at its base value; vary_N keeps
/// the per-subject observation count at its base value. A failed fit yields
/// a flagged row and the study continues. Rows come back sorted by
/// (axis_value, regime, seed).
inline std::vector<StudyRow> run_study(const StudyConfig& config) {
  if (config.grid.empty()) throw ConfigError("study grid is empty");
  if (config.regimes.empty()) throw ConfigError("study regime list is empty");
  if (config.repeats < 1) throw ConfigError("repeats must be at least 1");
  if (config.heldout_subjects < 1) {
    throw ConfigError("heldout_subjects must be at least 1");
  }

  const std::size_t n_cells =
      config.grid.size() * static_cast<std::size_t>(config.repeats);
  std::vector<std::vector<StudyRow>> cell_rows(n_cells);

  parallel_for(n_cells, config.n_threads, [&](std::size_t cell) {
    const std::size_t gi = cell / static_cast<std::size_t>(config.repeats);
    const std::size_t rep = cell % static_cast<std::size_t>(config.repeats);
    const int axis_value = config.grid[gi];

    SynthConfig cell_config = config.base;
    if (config.axis == StudyAxis::VaryObservations) {
      cell_config.n_obs = axis_value;
    } else {
      cell_config.n_subjects = axis_value;
    }
    const int n_train = cell_config.n_subjects;
    cell_config.n_subjects = n_train + config.heldout_subjects;
    cell_config.seed = derive_seed(
        config.base.seed,
        {stage_tag("study"), static_cast<std::uint64_t>(axis_value), rep});

    SynthCohort synth = sample_cohort(cell_config);
    std::vector<SubjectCovariance> train_covs;
    std::vector<SubjectCovariance> test_covs;
    std::vector<double> train_ages;
    std::vector<double> test_ages;
    for (int i = 0; i < cell_config.n_subjects; ++i) {
      auto& rec = synth.cohort.subjects[static_cast<std::size_t>(i)];
      SubjectCovariance c{rec.subject_id, compute_covariance(rec),
                          cell_config.n_obs};
      if (i < n_train) {
        train_covs.push_back(std::move(c));
        train_ages.push_back(*rec.age);
      } else {
        test_covs.push_back(std::move(c));
        test_ages.push_back(*rec.age);
      }
    }

    FitOptions fit_opts = config.fit_options;
    fit_opts.n_threads = 1;  // parallelism lives at the cell level
    auto& rows = cell_rows[cell];
    for (Regime regime : config.regimes) {
      StudyRow row;
      row.axis_value = axis_value;
      row.regime = regime;
      row.seed = cell_config.seed;
      try {
        FittedModel model =
            fit(regime, static_cast<int>(config.base.k), train_covs, fit_opts);
        row.recovery = recovery_error(synth.ground_truth_loading, model.loading);

        Eigen::MatrixXd features(static_cast<Eigen::Index>(train_covs.size()),
                                 config.base.k);
        Eigen::VectorXd ages(static_cast<Eigen::Index>(train_covs.size()));
        for (std::size_t i = 0; i < train_covs.size(); ++i) {
          const auto& f = model.factors.at(train_covs[i].subject_id);
          features.row(static_cast<Eigen::Index>(i)) =
              f.activities.cwiseMax(0.0).transpose();
          ages(static_cast<Eigen::Index>(i)) = train_ages[i];
        }
        AgeModel age_model = fit_age_model(features, ages, config.use_intercept);
        row.mae = detail::heldout_mae(model, age_model, test_covs, test_ages);
        row.ok = true;
      } catch (const Error& e) {
        row.ok = false;
        row.message = e.what();
      }
      rows.push_back(std::move(row));
    }
  });

  std::vector<StudyRow> rows;
  rows.reserve(n_cells * config.regimes.size());
  for (auto& cell : cell_rows)
    for (auto& row : cell) rows.push_back(std::move(row));
  std::stable_sort(rows.begin(), rows.end(),
                   [](const StudyRow& a, const StudyRow& b) {
                     if (a.axis_value != b.axis_value)
                       return a.axis_value < b.axis_value;
                     const auto ra = to_string(a.regime);
                     const auto rb = to_string(b.regime);
                     if (ra != rb) return ra < rb;
                     return a.seed < b.seed;
                   });
  return rows;
}

/// Long-format study CSV: one row per (axis_value, regime, seed), with
/// failed fits flagged in the status column.
inline std::string study_rows_csv(const std::vector<StudyRow>& rows,
                                  StudyAxis axis) {
  std::string out = "axis,axis_value,regime,seed,status,recovery_error,mae\n";
  const std::string axis_name = to_string(axis);
  for (const auto& row : rows) {
    std::string status = row.ok ? "ok" : "failed: " + row.message;
    std::replace(status.begin(), status.end(), ',', ';');
    out += axis_name + "," + std::to_string(row.axis_value) + "," +
           to_string(row.regime) + "," + std::to_string(row.seed) + "," +
           status + ",";
    if (row.ok) {
      out += format_double(row.recovery) + "," + format_double(row.mae);
    } else {
      out += ",";
    }
    out += "\n";
  }
  return out;
}

/// Per-cell summary CSV: median and interquartile range of both metrics.
inline std::string study_summary_csv(const std::vector<StudyRow>& rows,
                                     StudyAxis axis) {
  std::map<std::pair<int, std::string>, std::vector<const StudyRow*>> cells;
  for (const auto& row : rows) {
    cells[{row.axis_value, to_string(row.regime)}].push_back(&row);
  }
  std::string out =
      "axis,axis_value,regime,n_ok,n_failed,recovery_median,recovery_q25,"
      "recovery_q75,mae_median,mae_q25,mae_q75\n";
  const std::string axis_name = to_string(axis);
  for (const auto& [key, cell_rows] : cells) {
    std::vector<double> recovery;
    std::vector<double> mae;
    int n_failed = 0;
    for (const auto* row : cell_rows) {
      if (row->ok) {
        recovery.push_back(row->recovery);
        mae.push_back(row->mae);
      } else {
        ++n_failed;
      }
    }
    out += axis_name + "," + std::to_string(key.first) + "," + key.second + "," +
           std::to_string(recovery.size()) + "," + std::to_string(n_failed);
    if (recovery.empty()) {
      out += ",,,,,,";
    } else {
      out += "," + format_double(quantile(recovery, 0.5)) + "," +
             format_double(quantile(recovery, 0.25)) + "," +
             format_double(quantile(recovery, 0.75)) + "," +
             format_double(quantile(mae, 0.5)) + "," +
             format_double(quantile(mae, 0.25)) + "," +
             format_double(quantile(mae, 0.75));
    }
    out += "\n";
  }
  return out;
}

}  // namespace brainage
