#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "brainage/errors.hpp"
#include "brainage/parallel.hpp"

namespace brainage {

inline constexpr double kLog2Pi = 1.8378770664093454836;

/// Constraint regimes for the shared loading matrix.
enum class Regime { FA, PCA, NNPCA, MCF, MHA };

inline bool regime_nonnegative(Regime r) {
  return r == Regime::NNPCA || r == Regime::MCF || r == Regime::MHA;
}

inline bool regime_orthonormal(Regime r) {
  return r == Regime::PCA || r == Regime::MCF || r == Regime::MHA;
}

/// FA carries a per-dimension noise vector; all other regimes a scalar.
inline bool regime_isotropic_noise(Regime r) { return r != Regime::FA; }

inline std::string to_string(Regime r) {
  switch (r) {
    case Regime::FA: return "fa";
    case Regime::PCA: return "pca";
    case Regime::NNPCA: return "nnpca";
    case Regime::MCF: return "mcf";
    case Regime::MHA: return "mha";
  }
  return "?";
}

inline Regime regime_from_string(const std::string& s) {
  if (s == "fa") return Regime::FA;
  if (s == "pca") return Regime::PCA;
  if (s == "nnpca") return Regime::NNPCA;
  if (s == "mcf") return Regime::MCF;
  if (s == "mha") return Regime::MHA;
  throw ConfigError("unknown regime '" + s + "' (expected fa|pca|nnpca|mcf|mha)");
}

/// Shared p x k factor matrix whose columns encode networks.
struct LoadingMatrix {
  Eigen::MatrixXd values;
  Regime regime = Regime::MHA;

  Eigen::Index p() const { return values.rows(); }
  Eigen::Index k() const { return values.cols(); }
};

/// Per-subject network activities (diagonal of G) and observation noise.
/// `noise` holds one entry for isotropic regimes or p entries for FA.
struct SubjectFactors {
  Eigen::VectorXd activities;
  Eigen::VectorXd noise;

  bool isotropic() const { return noise.size() == 1; }
};

/// One subject's sample covariance with its observation count.
struct SubjectCovariance {
  std::string subject_id;
  Eigen::MatrixXd covariance;  // p x p
  int n_obs = 0;
};

/// Throw unless K is symmetric (1e-12 relative) and PSD
/// (lambda_min >= -1e-10 * lambda_max).
inline void validate_covariance(const Eigen::MatrixXd& k,
                                const std::string& subject_id) {
  if (k.rows() != k.cols()) {
    throw DimensionError("covariance for '" + subject_id + "' is not square");
  }
  if (!k.allFinite()) {
    throw ValidationError("covariance for '" + subject_id +
                          "' contains non-finite entries");
  }
  const double scale = k.cwiseAbs().maxCoeff();
  const double asym = (k - k.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-12 * std::max(1.0, scale)) {
    throw ValidationError("covariance for '" + subject_id + "' is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(k,
                                                    Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (lo < -1e-10 * std::max(1.0, hi)) {
    throw ValidationError("covariance for '" + subject_id +
                          "' is not positive semi-definite (min eigenvalue " +
                          std::to_string(lo) + ")");
  }
}

/// Woodbury factorization of Sigma = W diag(g) W^T + diag(noise). All solves
/// and determinants go through the k x k capacitance matrix
/// M = I + U^T D U with U = W diag(sqrt g), D = diag(noise)^-1, so no p x p
/// matrix is ever inverted. Valid for g >= 0 (including exact zeros).
class LowRankGaussian {
 public:
  LowRankGaussian(const Eigen::MatrixXd& loading, const Eigen::VectorXd& activities,
                  const Eigen::VectorXd& noise) {
    const Eigen::Index p = loading.rows();
    const Eigen::Index k = loading.cols();
    if (activities.size() != k) {
      throw DimensionError("activities length does not match loading columns");
    }
    if (noise.size() != 1 && noise.size() != p) {
      throw DimensionError("noise must be scalar or length-p");
    }
    if (noise.minCoeff() <= 0.0) {
      throw ValidationError("observation noise must be strictly positive");
    }
    if (activities.size() > 0 && activities.minCoeff() < 0.0) {
      throw ValidationError("activities must be non-negative");
    }

    d_ = noise.size() == 1
             ? Eigen::VectorXd::Constant(p, 1.0 / noise(0)).eval()
             : noise.cwiseInverse().eval();
    u_ = loading * activities.cwiseSqrt().asDiagonal();
    du_ = d_.asDiagonal() * u_;
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(k, k) + u_.transpose() * du_;
    m_llt_.compute(m);
    if (m_llt_.info() != Eigen::Success) {
      throw NumericError("low-rank covariance factorization failed");
    }

    double log_det_m = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) {
      log_det_m += 2.0 * std::log(m_llt_.matrixLLT()(j, j));
    }
    log_det_ = -d_.array().log().sum() + log_det_m;
  }

  Eigen::Index p() const { return d_.size(); }

  double log_det() const { return log_det_; }

  /// Sigma^-1 * B.
  Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const {
    Eigen::MatrixXd db = d_.asDiagonal() * b;
    return db - du_ * m_llt_.solve(du_.transpose() * b);
  }

  /// tr(Sigma^-1 K).
  double trace_solve(const Eigen::MatrixXd& k) const {
    const double direct = d_.dot(k.diagonal());
    Eigen::MatrixXd kdu = k * du_;                       // p x k
    Eigen::MatrixXd s = du_.transpose() * kdu;           // k x k
    return direct - m_llt_.solve(s).trace();
  }

 private:
  Eigen::MatrixXd u_;   // W diag(sqrt g)
  Eigen::MatrixXd du_;  // D U
  Eigen::VectorXd d_;   // 1 / noise, length p
  Eigen::LLT<Eigen::MatrixXd> m_llt_;
  double log_det_ = 0.0;
};

/// Gaussian log-likelihood of one subject's sample covariance:
/// -(n/2) [ p log 2pi + log det Sigma + tr(Sigma^-1 K) ].
inline double subject_log_likelihood(const Eigen::MatrixXd& loading,
                                     const SubjectFactors& factors,
                                     const Eigen::MatrixXd& k, double n_obs) {
  LowRankGaussian sigma(loading, factors.activities, factors.noise);
  const double quad = sigma.trace_solve(k);
  return -0.5 * n_obs *
         (static_cast<double>(sigma.p()) * kLog2Pi + sigma.log_det() + quad);
}

inline const SubjectFactors& factors_for(
    const std::map<std::string, SubjectFactors>& factors,
    const std::string& subject_id) {
  auto it = factors.find(subject_id);
  if (it == factors.end()) {
    throw ConfigError("no factors supplied for subject '" + subject_id + "'");
  }
  return it->second;
}

/// Total log-likelihood over a set of subjects; higher is better.
inline double log_likelihood(const Eigen::MatrixXd& loading,
                             const std::vector<SubjectCovariance>& covariances,
                             const std::map<std::string, SubjectFactors>& factors,
                             std::size_t n_threads = 1) {
  std::vector<double> per_subject(covariances.size(), 0.0);
  parallel_for(covariances.size(), n_threads, [&](std::size_t i) {
    const auto& c = covariances[i];
    per_subject[i] = subject_log_likelihood(loading, factors_for(factors, c.subject_id),
                                            c.covariance, c.n_obs);
  });
  double total = 0.0;
  for (std::size_t i = 0; i < covariances.size(); ++i) {
    if (!std::isfinite(per_subject[i])) {
      throw NumericError("non-finite log-likelihood for subject '" +
                         covariances[i].subject_id + "'");
    }
    total += per_subject[i];
  }
  return total;
}

/// Gradient of the total log-likelihood with respect to the loading matrix:
/// sum_i n_i (-Sigma_i^-1 + Sigma_i^-1 K_i Sigma_i^-1) W G_i.
inline Eigen::MatrixXd grad_loading(
    const Eigen::MatrixXd& loading,
    const std::vector<SubjectCovariance>& covariances,
    const std::map<std::string, SubjectFactors>& factors,
    std::size_t n_threads = 1) {
  std::vector<Eigen::MatrixXd> terms(covariances.size());
  parallel_for(covariances.size(), n_threads, [&](std::size_t i) {
    const auto& c = covariances[i];
    const auto& f = factors_for(factors, c.subject_id);
    LowRankGaussian sigma(loading, f.activities, f.noise);
    Eigen::MatrixXd a = sigma.solve(loading);                  // Sigma^-1 W
    Eigen::MatrixXd b = sigma.solve(c.covariance * a);         // Sigma^-1 K Sigma^-1 W
    terms[i] = static_cast<double>(c.n_obs) *
               ((b - a) * f.activities.asDiagonal());
  });
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(loading.rows(), loading.cols());
  for (const auto& t : terms) grad += t;
  if (!grad.allFinite()) {
    throw NumericError("non-finite loading gradient");
  }
  return grad;
}

/// Gradient of one subject's log-likelihood with respect to its activity
/// vector: (n/2) diag( W^T (-Sigma^-1 + Sigma^-1 K Sigma^-1) W ).
inline Eigen::VectorXd grad_activities(const Eigen::MatrixXd& loading,
                                       const Eigen::MatrixXd& k, double n_obs,
                                       const SubjectFactors& factors) {
  LowRankGaussian sigma(loading, factors.activities, factors.noise);
  Eigen::MatrixXd a = sigma.solve(loading);
  Eigen::MatrixXd b = sigma.solve(k * a);
  Eigen::VectorXd grad =
      0.5 * n_obs * (loading.cwiseProduct(b - a)).colwise().sum().transpose();
  if (!grad.allFinite()) {
    throw NumericError("non-finite activity gradient");
  }
  return grad;
}

/// Covariance-alignment objective maximized by MCF:
/// sum_i sum_j (W_j^T K_i W_j)^2, under W >= 0 and W^T W = I.
inline double mcf_objective(const Eigen::MatrixXd& loading,
                            const std::vector<SubjectCovariance>& covariances,
                            std::size_t n_threads = 1) {
  std::vector<double> per_subject(covariances.size(), 0.0);
  parallel_for(covariances.size(), n_threads, [&](std::size_t i) {
    Eigen::MatrixXd kw = covariances[i].covariance * loading;
    Eigen::VectorXd quads =
        (loading.cwiseProduct(kw)).colwise().sum().transpose();
    per_subject[i] = quads.squaredNorm();
  });
  double total = 0.0;
  for (double v : per_subject) total += v;
  return total;
}

/// Analytic gradient of mcf_objective: column j gets
/// 4 sum_i (W_j^T K_i W_j) K_i W_j.
inline Eigen::MatrixXd mcf_grad(const Eigen::MatrixXd& loading,
                                const std::vector<SubjectCovariance>& covariances,
                                std::size_t n_threads = 1) {
  std::vector<Eigen::MatrixXd> terms(covariances.size());
  parallel_for(covariances.size(), n_threads, [&](std::size_t i) {
    Eigen::MatrixXd kw = covariances[i].covariance * loading;
    Eigen::VectorXd quads =
        (loading.cwiseProduct(kw)).colwise().sum().transpose();
    terms[i] = 4.0 * (kw * quads.asDiagonal());
  });
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(loading.rows(), loading.cols());
  for (const auto& t : terms) grad += t;
  return grad;
}

/// Diagonal of W diag(g) W^T, used by the FA noise update.
inline Eigen::VectorXd model_diagonal(const Eigen::MatrixXd& loading,
                                      const Eigen::VectorXd& activities) {
  return (loading.cwiseProduct(loading * activities.asDiagonal()))
      .rowwise()
      .sum();
}

}  // namespace brainage
