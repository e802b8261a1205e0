#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "brainage/csv.hpp"
#include "brainage/errors.hpp"
#include "brainage/low_rank_model.hpp"

namespace brainage {

/// Network-activity estimate for a subject not seen during fitting. Raw
/// values are kept alongside the non-negative copy used as regression
/// features.
struct ActivityEstimate {
  std::string subject_id;
  Eigen::VectorXd activities;          // raw, may be negative from sampling noise
  Eigen::VectorXd clamped_activities;  // max(activities, 0)
  double noise = 0.0;
};

inline double orthonormality_violation(const Eigen::MatrixXd& w) {
  const Eigen::Index k = w.cols();
  return (w.transpose() * w - Eigen::MatrixXd::Identity(k, k)).norm();
}

namespace detail {
inline void check_estimator_inputs(const LoadingMatrix& loading,
                                   const Eigen::MatrixXd& sigma_hat,
                                   double ortho_tol) {
  if (sigma_hat.rows() != loading.p() || sigma_hat.cols() != loading.p()) {
    throw DimensionError("covariance size does not match loading rows");
  }
  const double scale = std::max(1.0, sigma_hat.cwiseAbs().maxCoeff());
  if ((sigma_hat - sigma_hat.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw ValidationError("covariance estimate is not symmetric");
  }
  const double violation = orthonormality_violation(loading.values);
  if (violation >= ortho_tol) {
    throw ValidationError(
        "loading matrix is too far from orthonormal for activity estimation "
        "(violation " + format_double(violation) + " >= tolerance " +
        format_double(ortho_tol) + ")");
  }
}
}  // namespace detail

/// Observation-noise estimate for an unseen subject:
/// (tr Sigma_hat - tr(W^T Sigma_hat W)) / (p - k), floored at 0.
/// `ortho_tol` is the near-orthonormality precondition on W; callers working
/// with unconstrained loadings (FA, non-negative PCA) must relax it
/// explicitly.
inline double estimate_noise(const LoadingMatrix& loading,
                             const Eigen::MatrixXd& sigma_hat,
                             double ortho_tol = 1e-3) {
  detail::check_estimator_inputs(loading, sigma_hat, ortho_tol);
  const Eigen::Index p = loading.p();
  const Eigen::Index k = loading.k();
  if (p == k) {
    throw ConfigError("noise estimation requires k < p");
  }
  const double total = sigma_hat.trace();
  const double captured =
      (loading.values.transpose() * sigma_hat * loading.values).trace();
  return std::max(0.0, (total - captured) / static_cast<double>(p - k));
}

/// Per-network activity estimate for an unseen subject:
/// g_j = W_j^T Sigma_hat W_j - noise, with a clamped copy for use as
/// regression features.
inline ActivityEstimate estimate_activities(const LoadingMatrix& loading,
                                            const Eigen::MatrixXd& sigma_hat,
                                            double noise,
                                            std::string subject_id = {},
                                            double ortho_tol = 1e-3) {
  detail::check_estimator_inputs(loading, sigma_hat, ortho_tol);
  ActivityEstimate est;
  est.subject_id = std::move(subject_id);
  Eigen::MatrixXd sw = sigma_hat * loading.values;
  est.activities =
      (loading.values.cwiseProduct(sw)).colwise().sum().transpose().array() -
      noise;
  est.clamped_activities = est.activities.cwiseMax(0.0);
  est.noise = noise;
  return est;
}

/// Batch CSV: subject_id, clamped activities g_1..g_k, noise, then the raw
/// activities with a _raw suffix.
inline void write_activities_csv(const std::filesystem::path& path,
                                 const std::vector<ActivityEstimate>& estimates) {
  std::string out;
  const Eigen::Index k = estimates.empty() ? 0 : estimates.front().activities.size();
  out += "subject_id";
  for (Eigen::Index j = 0; j < k; ++j) out += ",g_" + std::to_string(j + 1);
  out += ",noise";
  for (Eigen::Index j = 0; j < k; ++j) out += ",g_" + std::to_string(j + 1) + "_raw";
  out += "\n";
  for (const auto& e : estimates) {
    out += e.subject_id;
    for (Eigen::Index j = 0; j < e.clamped_activities.size(); ++j)
      out += "," + format_double(e.clamped_activities(j));
    out += "," + format_double(e.noise);
    for (Eigen::Index j = 0; j < e.activities.size(); ++j)
      out += "," + format_double(e.activities(j));
    out += "\n";
  }
  write_file_atomic(path, out);
}

}  // namespace brainage
