#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <json.hpp>

#include "brainage/activity.hpp"
#include "brainage/errors.hpp"
#include "brainage/low_rank_model.hpp"
#include "brainage/parallel.hpp"

namespace brainage {

/// Optimizer settings. Defaults follow the reference configuration: fixed
/// penalty weight 10, multiplier refresh every 10 outer iterations, and a
/// halving line search started at 1e-2 on every loading step.
struct FitOptions {
  double step_size = 1e-2;        // line search start for the loading step
  double penalty_weight = 10.0;   // delta
  int max_outer = 5000;
  double tolerance = 1e-6;        // relative augmented-objective change
  double constraint_tol = 1e-4;   // ||W^T W - I||_F required at convergence
  int multiplier_interval = 10;   // Gamma update cadence, in outer iterations
  int max_halvings = 30;
  double value_floor = 1e-8;      // floor for noise and initial activities
  std::size_t n_threads = 1;
};

struct OptimizerState {
  Eigen::MatrixXd lagrange_multipliers;  // k x k, symmetric
  double penalty_weight = 10.0;
  double step_size = 0.0;  // last accepted loading step size
  int iteration = 0;
  std::vector<double> objective_trace;  // augmented objective per outer iteration
  double constraint_violation = 0.0;
  bool converged = false;
};

/// A fitted shared-loading covariance model: the loading matrix, per-subject
/// factors for every training subject, and the final optimizer state.
/// Immutable after fit; safe to share across threads.
struct FittedModel {
  LoadingMatrix loading;
  std::map<std::string, SubjectFactors> factors;
  int k = 0;
  OptimizerState optimizer_state;
  std::map<std::string, int> n_obs;
  // Training-subject activities come from the optimizer; the unseen-subject
  // estimators are used only for subjects outside the training set.
  std::string training_activity_source = "optimizer";
};

inline double log_likelihood(const FittedModel& model,
                             const std::vector<SubjectCovariance>& covariances,
                             const std::map<std::string, SubjectFactors>& factors,
                             std::size_t n_threads = 1) {
  return log_likelihood(model.loading.values, covariances, factors, n_threads);
}

namespace detail {

/// Spectral initialization from the top-k eigenvectors of the pooled
/// covariance, columns renormalized. Non-negative regimes take entrywise
/// absolute values (feasible and spectrally informed); unconstrained regimes
/// keep the eigenvectors with a deterministic sign convention, since an
/// absolute-value start discards the spectral basis and can park a column
/// outside the signal subspace for good. Also reports the pooled top
/// eigenvalue, used to normalize scale-free objectives.
inline Eigen::MatrixXd spectral_init(const std::vector<SubjectCovariance>& covs,
                                     Eigen::Index k, Regime regime,
                                     double& top_eigenvalue) {
  const Eigen::Index p = covs.front().covariance.rows();
  Eigen::MatrixXd pooled = Eigen::MatrixXd::Zero(p, p);
  for (const auto& c : covs) pooled += c.covariance;
  pooled /= static_cast<double>(covs.size());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(pooled);
  if (es.info() != Eigen::Success) {
    throw NumericError("eigendecomposition of pooled covariance failed");
  }
  top_eigenvalue = es.eigenvalues().maxCoeff();
  Eigen::MatrixXd w(p, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    w.col(j) = es.eigenvectors().col(p - 1 - j);
    if (regime_nonnegative(regime)) {
      w.col(j) = w.col(j).cwiseAbs();
    } else {
      Eigen::Index idx = 0;
      w.col(j).cwiseAbs().maxCoeff(&idx);
      if (w(idx, j) < 0) w.col(j) = -w.col(j);
    }
    const double norm = w.col(j).norm();
    if (norm > 0) w.col(j) /= norm;
  }
  return w;
}

/// Block-coordinate maximization with augmented-Lagrangian orthonormality
/// and projection onto the non-negative orthant. The likelihood part of the
/// internal objective is normalized by the total observation count so that
/// the fixed penalty weight and line-search scale are data-independent; the
/// reported log-likelihood elsewhere keeps its absolute normalization.
class Fitter {
 public:
  Fitter(Regime regime, Eigen::Index k,
         const std::vector<SubjectCovariance>& covariances,
         const FitOptions& opts)
      : regime_(regime), k_(k), covs_(covariances), opts_(opts) {
    if (covs_.empty()) throw ConfigError("fit requires at least one subject");
    p_ = covs_.front().covariance.rows();
    if (k_ < 1) throw ConfigError("k must be positive");
    if (k_ >= p_) {
      throw ConfigError("k must be smaller than the region count (k=" +
                        std::to_string(k_) + ", p=" + std::to_string(p_) + ")");
    }
    total_obs_ = 0.0;
    for (const auto& c : covs_) {
      if (c.n_obs < 1) {
        throw ConfigError("subject '" + c.subject_id +
                          "' has non-positive observation count");
      }
      if (c.covariance.rows() != p_ || c.covariance.cols() != p_) {
        throw DimensionError("covariance size mismatch for subject '" +
                             c.subject_id + "'");
      }
      validate_covariance(c.covariance, c.subject_id);
      total_obs_ += c.n_obs;
    }

    double top_eigenvalue = 0.0;
    w_ = spectral_init(covs_, k_, regime_, top_eigenvalue);
    // The covariance-alignment objective grows like ||W||^4, so it is made
    // dimensionless with the pooled spectral scale; otherwise the fixed
    // penalty weight cannot hold the orthonormality constraint.
    mcf_scale_ = std::max(1e-300, top_eigenvalue * top_eigenvalue);

    gamma_ = Eigen::MatrixXd::Zero(k_, k_);
    factors_.resize(covs_.size());
    activity_steps_.assign(covs_.size(), 0.1);
    for (std::size_t i = 0; i < covs_.size(); ++i) {
      init_subject_factors(i);
    }
  }

  FittedModel run() {
    double previous = augmented_objective(w_);
    if (!std::isfinite(previous)) {
      throw NumericError("initial objective is non-finite");
    }
    trace_.push_back(previous);

    int iteration = 0;
    bool converged = false;
    while (iteration < opts_.max_outer && !converged) {
      ++iteration;
      step_loading();
      if (regime_ != Regime::MCF) {
        step_activities();
        step_noise();
      }
      if (regime_orthonormal(regime_) &&
          iteration % opts_.multiplier_interval == 0) {
        gamma_ += opts_.penalty_weight * constraint_residual();
      }
      const double current = augmented_objective(w_);
      if (!std::isfinite(current)) {
        throw NumericError("fit diverged at iteration " +
                           std::to_string(iteration) + " (step size " +
                           format_double(last_eta_) + ")");
      }
      trace_.push_back(current);
      const double change = std::abs(current - previous);
      const bool objective_settled =
          change <= opts_.tolerance * std::max(1.0, std::abs(previous));
      const bool constraints_met =
          !regime_orthonormal(regime_) ||
          constraint_residual().norm() < opts_.constraint_tol;
      converged = objective_settled && constraints_met;
      previous = current;
    }
    return finalize(iteration, converged);
  }

  // The individual substeps are public so property tests can drive them
  // directly (e.g. monotonicity of the augmented objective across accepted
  // loading steps between multiplier updates).
  bool step_loading() {
    const Eigen::MatrixXd direction = augmented_gradient();
    const double base = augmented_objective(w_);
    double eta = opts_.step_size;
    for (int h = 0; h <= opts_.max_halvings; ++h) {
      Eigen::MatrixXd trial = project(w_ + eta * direction);
      const double value = guarded_augmented_objective(trial);
      if (std::isfinite(value) && value >= base) {
        w_ = std::move(trial);
        last_eta_ = eta;
        return true;
      }
      eta *= 0.5;
    }
    return false;
  }

  void step_activities() {
    parallel_for(covs_.size(), opts_.n_threads,
                 [this](std::size_t i) { step_activities_subject(i); });
  }

  void step_noise() {
    parallel_for(covs_.size(), opts_.n_threads,
                 [this](std::size_t i) { update_noise_subject(i); });
  }

  double augmented_objective(const Eigen::MatrixXd& w) const {
    double value = objective(w);
    if (regime_orthonormal(regime_)) {
      Eigen::MatrixXd r = w.transpose() * w - Eigen::MatrixXd::Identity(k_, k_);
      value -= 0.5 * opts_.penalty_weight * r.squaredNorm();
      value -= (gamma_.transpose() * r).trace();
    }
    return value;
  }

  const Eigen::MatrixXd& loading() const { return w_; }
  const Eigen::MatrixXd& multipliers() const { return gamma_; }

 private:
  Eigen::MatrixXd project(Eigen::MatrixXd w) const {
    return regime_nonnegative(regime_) ? w.cwiseMax(0.0).eval() : w;
  }

  /// Augmented objective with overflow-during-line-search treated as
  /// rejection rather than a hard error.
  double guarded_augmented_objective(const Eigen::MatrixXd& w) const {
    try {
      return augmented_objective(w);
    } catch (const Error&) {
      return -std::numeric_limits<double>::infinity();
    }
  }

  static double guarded_subject_log_likelihood(const Eigen::MatrixXd& w,
                                               const SubjectFactors& f,
                                               const Eigen::MatrixXd& k_mat,
                                               double n) {
    try {
      return subject_log_likelihood(w, f, k_mat, n);
    } catch (const Error&) {
      return -std::numeric_limits<double>::infinity();
    }
  }

  Eigen::MatrixXd constraint_residual() const {
    return w_.transpose() * w_ - Eigen::MatrixXd::Identity(k_, k_);
  }

  /// Internal objective: mean per-observation log-likelihood, or the
  /// covariance-alignment objective per subject for MCF.
  double objective(const Eigen::MatrixXd& w) const {
    if (regime_ == Regime::MCF) {
      return mcf_objective(w, covs_, opts_.n_threads) /
             (static_cast<double>(covs_.size()) * mcf_scale_);
    }
    std::vector<double> per_subject(covs_.size(), 0.0);
    parallel_for(covs_.size(), opts_.n_threads, [&](std::size_t i) {
      per_subject[i] = subject_log_likelihood(w, factors_[i], covs_[i].covariance,
                                              covs_[i].n_obs);
    });
    double total = 0.0;
    for (double v : per_subject) total += v;
    return total / total_obs_;
  }

  Eigen::MatrixXd objective_gradient() const {
    if (regime_ == Regime::MCF) {
      return mcf_grad(w_, covs_, opts_.n_threads) /
             (static_cast<double>(covs_.size()) * mcf_scale_);
    }
    std::vector<Eigen::MatrixXd> terms(covs_.size());
    parallel_for(covs_.size(), opts_.n_threads, [&](std::size_t i) {
      const auto& f = factors_[i];
      LowRankGaussian sigma(w_, f.activities, f.noise);
      Eigen::MatrixXd a = sigma.solve(w_);
      Eigen::MatrixXd b = sigma.solve(covs_[i].covariance * a);
      terms[i] = static_cast<double>(covs_[i].n_obs) *
                 ((b - a) * f.activities.asDiagonal());
    });
    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(p_, k_);
    for (const auto& t : terms) grad += t;
    return grad / total_obs_;
  }

  Eigen::MatrixXd augmented_gradient() const {
    Eigen::MatrixXd grad = objective_gradient();
    if (regime_orthonormal(regime_)) {
      Eigen::MatrixXd r = constraint_residual();
      grad -= 2.0 * opts_.penalty_weight * (w_ * r);
      grad -= w_ * (gamma_ + gamma_.transpose());
    }
    return grad;
  }

  void init_subject_factors(std::size_t i) {
    const auto& k_mat = covs_[i].covariance;
    SubjectFactors f;
    const double v = noise_estimate(k_mat);
    Eigen::MatrixXd kw = k_mat * w_;
    f.activities = ((w_.cwiseProduct(kw)).colwise().sum().transpose().array() - v)
                       .max(opts_.value_floor);
    if (regime_ == Regime::FA) {
      // Where the low-rank part already over-covers a dimension, starting at
      // the floor puts the likelihood into a near-singular spike; start at
      // half the dimension's variance instead and let the damped updates
      // shrink it.
      const Eigen::VectorXd residual =
          k_mat.diagonal() - model_diagonal(w_, f.activities);
      f.noise.resize(p_);
      for (Eigen::Index d = 0; d < p_; ++d) {
        f.noise(d) = residual(d) > opts_.value_floor
                         ? residual(d)
                         : std::max(opts_.value_floor, 0.5 * k_mat(d, d));
      }
    } else {
      f.noise = Eigen::VectorXd::Constant(1, v);
    }
    factors_[i] = std::move(f);
  }

  /// Eq.-style moment estimate of the isotropic noise, floored.
  double noise_estimate(const Eigen::MatrixXd& k_mat) const {
    const double captured = (w_.transpose() * k_mat * w_).trace();
    const double v =
        (k_mat.trace() - captured) / static_cast<double>(p_ - k_);
    return std::max(opts_.value_floor, v);
  }

  void step_activities_subject(std::size_t i) {
    auto& f = factors_[i];
    const auto& k_mat = covs_[i].covariance;
    const double n = covs_[i].n_obs;

    // For near-orthonormal loadings the quadratic-form activities are the
    // conditional optimum; jump there when it helps (damped acceptance), so
    // the factors do not lag behind the loading steps.
    if (regime_ != Regime::FA) {
      Eigen::MatrixXd kw = k_mat * w_;
      Eigen::VectorXd candidate =
          ((w_.cwiseProduct(kw)).colwise().sum().transpose().array() -
           f.noise(0))
              .max(0.0);
      const double base = subject_log_likelihood(w_, f, k_mat, n);
      double t = 1.0;
      for (int h = 0; h < 8; ++h) {
        SubjectFactors trial = f;
        trial.activities = f.activities + t * (candidate - f.activities);
        const double value = guarded_subject_log_likelihood(w_, trial, k_mat, n);
        if (std::isfinite(value) && value >= base) {
          f = std::move(trial);
          break;
        }
        t *= 0.5;
      }
    }

    // Projected-gradient ascent step on the per-observation likelihood; the
    // remembered step size is scale-free across subjects.
    Eigen::VectorXd direction = grad_activities(w_, k_mat, n, f) / n;
    if (direction.norm() == 0.0) return;
    const double base = subject_log_likelihood(w_, f, k_mat, n);
    double eta = std::min(activity_steps_[i] * 2.0, 1e6);
    for (int h = 0; h <= opts_.max_halvings; ++h) {
      SubjectFactors trial = f;
      trial.activities = (f.activities + eta * direction).cwiseMax(0.0);
      const double value = guarded_subject_log_likelihood(w_, trial, k_mat, n);
      if (std::isfinite(value) && value >= base) {
        f = std::move(trial);
        activity_steps_[i] = eta;
        return;
      }
      eta *= 0.5;
    }
  }

  /// Closed-form noise update, damped: the candidate is accepted only if it
  /// does not decrease the subject's likelihood, otherwise it is pulled
  /// geometrically back toward the current value. An unguarded jump to the
  /// floor drives the likelihood into a near-singular spike whose gradients
  /// overflow the loading step (the FA likelihood is unbounded in 1/noise).
  void update_noise_subject(std::size_t i) {
    auto& f = factors_[i];
    const auto& k_mat = covs_[i].covariance;
    const double n = covs_[i].n_obs;
    Eigen::VectorXd candidate;
    if (regime_ == Regime::FA) {
      candidate = (k_mat.diagonal() - model_diagonal(w_, f.activities))
                      .cwiseMax(opts_.value_floor);
    } else {
      candidate = Eigen::VectorXd::Constant(1, noise_estimate(k_mat));
    }
    const double base = subject_log_likelihood(w_, f, k_mat, n);
    double t = 1.0;
    for (int h = 0; h <= 20; ++h) {
      SubjectFactors trial = f;
      trial.noise = f.noise + t * (candidate - f.noise);
      const double value = guarded_subject_log_likelihood(w_, trial, k_mat, n);
      if (std::isfinite(value) && value >= base) {
        f = std::move(trial);
        return;
      }
      t *= 0.5;
    }
  }

  FittedModel finalize(int iterations, bool converged) {
    // FA/PCA columns are sign-indeterminate; force the largest-magnitude
    // entry of each column positive for deterministic output.
    if (!regime_nonnegative(regime_)) {
      for (Eigen::Index j = 0; j < k_; ++j) {
        Eigen::Index idx = 0;
        w_.col(j).cwiseAbs().maxCoeff(&idx);
        if (w_(idx, j) < 0) w_.col(j) = -w_.col(j);
      }
    }

    FittedModel model;
    model.loading = LoadingMatrix{w_, regime_};
    model.k = static_cast<int>(k_);
    if (regime_ == Regime::MCF) {
      // MCF optimizes W alone; per-subject factors come from the
      // unseen-subject estimators applied to the training covariances. The
      // orthonormality precondition is waived here: a non-converged loading
      // still reports its constraint violation in the optimizer state.
      const double tol = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < covs_.size(); ++i) {
        const double v =
            std::max(opts_.value_floor,
                     estimate_noise(model.loading, covs_[i].covariance, tol));
        ActivityEstimate est = estimate_activities(
            model.loading, covs_[i].covariance, v, covs_[i].subject_id, tol);
        SubjectFactors f;
        f.activities = est.clamped_activities;
        f.noise = Eigen::VectorXd::Constant(1, v);
        model.factors.emplace(covs_[i].subject_id, std::move(f));
      }
    } else {
      for (std::size_t i = 0; i < covs_.size(); ++i) {
        model.factors.emplace(covs_[i].subject_id, factors_[i]);
      }
    }
    for (const auto& c : covs_) model.n_obs.emplace(c.subject_id, c.n_obs);

    OptimizerState state;
    state.lagrange_multipliers = gamma_;
    state.penalty_weight = opts_.penalty_weight;
    state.step_size = last_eta_;
    state.iteration = iterations;
    state.objective_trace = trace_;
    state.constraint_violation =
        regime_orthonormal(regime_) ? constraint_residual().norm() : 0.0;
    state.converged = converged;
    model.optimizer_state = std::move(state);
    return model;
  }

  Regime regime_;
  Eigen::Index k_;
  Eigen::Index p_ = 0;
  const std::vector<SubjectCovariance>& covs_;
  FitOptions opts_;
  double total_obs_ = 0.0;
  double mcf_scale_ = 1.0;

  Eigen::MatrixXd w_;
  Eigen::MatrixXd gamma_;
  std::vector<SubjectFactors> factors_;
  std::vector<double> activity_steps_;
  std::vector<double> trace_;
  double last_eta_ = 0.0;
};

}  // namespace detail

/// Fit the shared-loading covariance model under the given constraint regime.
inline FittedModel fit(Regime regime, int k,
                       const std::vector<SubjectCovariance>& training_covariances,
                       const FitOptions& opts = {}) {
  detail::Fitter fitter(regime, k, training_covariances, opts);
  return fitter.run();
}

/// Total held-out log-likelihood of subjects not seen during fitting: noise
/// and activities come from the unseen-subject estimators. Works for any
/// regime; non-orthonormal loadings require the relaxed tolerance.
inline double heldout_log_likelihood(const LoadingMatrix& loading,
                                     const std::vector<SubjectCovariance>& subjects,
                                     double noise_floor = 1e-8) {
  const double ortho_tol = regime_orthonormal(loading.regime)
                               ? 1e-3
                               : std::numeric_limits<double>::infinity();
  double total = 0.0;
  for (const auto& c : subjects) {
    const double v =
        std::max(noise_floor, estimate_noise(loading, c.covariance, ortho_tol));
    ActivityEstimate est = estimate_activities(loading, c.covariance, v,
                                               c.subject_id, ortho_tol);
    SubjectFactors f;
    f.activities = est.clamped_activities;
    f.noise = Eigen::VectorXd::Constant(1, v);
    total += subject_log_likelihood(loading.values, f, c.covariance, c.n_obs);
  }
  if (!std::isfinite(total)) {
    throw NumericError("non-finite held-out log-likelihood");
  }
  return total;
}

struct KSelectionRow {
  int k = 0;
  double validation_log_likelihood = 0.0;
  bool ok = false;
  std::string message;
};

struct KSelection {
  int best_k = 0;
  std::vector<KSelectionRow> table;
};

/// Fit one model per candidate k on the training subjects and score each on
/// the validation subjects by held-out log-likelihood. Candidates whose fit
/// fails are excluded; ties resolve to the smallest k.
inline KSelection select_k(Regime regime, const std::vector<int>& candidate_ks,
                           const std::vector<SubjectCovariance>& train,
                           const std::vector<SubjectCovariance>& validation,
                           const FitOptions& opts = {}) {
  if (candidate_ks.empty()) throw ConfigError("no candidate ranks given");
  if (train.empty() || validation.empty()) {
    throw ConfigError("rank selection requires training and validation subjects");
  }
  const Eigen::Index p = train.front().covariance.rows();
  for (int k : candidate_ks) {
    if (k < 1 || k >= p) {
      throw ConfigError("candidate k=" + std::to_string(k) +
                        " is out of range for p=" + std::to_string(p));
    }
  }

  KSelection result;
  result.table.resize(candidate_ks.size());
  FitOptions inner = opts;
  inner.n_threads = 1;
  parallel_for(candidate_ks.size(), opts.n_threads, [&](std::size_t i) {
    KSelectionRow row;
    row.k = candidate_ks[i];
    try {
      FittedModel model = fit(regime, row.k, train, inner);
      row.validation_log_likelihood =
          heldout_log_likelihood(model.loading, validation, inner.value_floor);
      row.ok = true;
    } catch (const Error& e) {
      row.ok = false;
      row.message = e.what();
    }
    result.table[i] = std::move(row);
  });

  bool any_ok = false;
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& row : result.table) {
    if (row.ok && row.validation_log_likelihood > best) {
      best = row.validation_log_likelihood;
      result.best_k = row.k;
      any_ok = true;
    }
  }
  if (!any_ok) {
    throw NumericError("all candidate ranks failed to fit");
  }
  return result;
}

// --- serialization ---------------------------------------------------------

inline constexpr int kModelSchemaVersion = 1;

inline nlohmann::json to_json(const FittedModel& model) {
  nlohmann::json j;
  j["schema_version"] = kModelSchemaVersion;
  j["kind"] = "covariance_model";
  j["regime"] = to_string(model.loading.regime);
  j["k"] = model.k;
  j["p"] = model.loading.p();
  std::vector<double> loading;
  loading.reserve(static_cast<std::size_t>(model.loading.p() * model.k));
  for (Eigen::Index r = 0; r < model.loading.p(); ++r)
    for (Eigen::Index c = 0; c < model.loading.k(); ++c)
      loading.push_back(model.loading.values(r, c));
  j["loading_row_major"] = loading;

  nlohmann::json subjects = nlohmann::json::object();
  for (const auto& [id, f] : model.factors) {
    nlohmann::json s;
    s["activities"] = std::vector<double>(f.activities.begin(), f.activities.end());
    s["noise"] = std::vector<double>(f.noise.begin(), f.noise.end());
    s["n_obs"] = model.n_obs.at(id);
    subjects[id] = std::move(s);
  }
  j["subjects"] = std::move(subjects);

  const auto& st = model.optimizer_state;
  nlohmann::json opt;
  opt["iterations"] = st.iteration;
  opt["final_objective"] =
      st.objective_trace.empty() ? 0.0 : st.objective_trace.back();
  opt["constraint_violation"] = st.constraint_violation;
  opt["converged"] = st.converged;
  opt["penalty_weight"] = st.penalty_weight;
  opt["step_size"] = st.step_size;
  std::vector<double> gamma;
  for (Eigen::Index r = 0; r < st.lagrange_multipliers.rows(); ++r)
    for (Eigen::Index c = 0; c < st.lagrange_multipliers.cols(); ++c)
      gamma.push_back(st.lagrange_multipliers(r, c));
  opt["multipliers_row_major"] = gamma;
  j["optimizer"] = std::move(opt);
  j["training_activity_source"] = model.training_activity_source;
  return j;
}

inline FittedModel model_from_json(const nlohmann::json& j) {
  if (!j.contains("schema_version") ||
      j.at("schema_version").get<int>() != kModelSchemaVersion) {
    throw ConfigError("unsupported covariance-model schema version");
  }
  FittedModel model;
  model.loading.regime = regime_from_string(j.at("regime").get<std::string>());
  model.k = j.at("k").get<int>();
  const auto p = j.at("p").get<Eigen::Index>();
  const auto loading = j.at("loading_row_major").get<std::vector<double>>();
  if (loading.size() != static_cast<std::size_t>(p * model.k)) {
    throw ConfigError("loading size does not match declared p and k");
  }
  model.loading.values.resize(p, model.k);
  for (Eigen::Index r = 0; r < p; ++r)
    for (Eigen::Index c = 0; c < model.k; ++c)
      model.loading.values(r, c) =
          loading[static_cast<std::size_t>(r * model.k + c)];

  for (const auto& [id, s] : j.at("subjects").items()) {
    SubjectFactors f;
    const auto acts = s.at("activities").get<std::vector<double>>();
    const auto noise = s.at("noise").get<std::vector<double>>();
    f.activities = Eigen::Map<const Eigen::VectorXd>(acts.data(),
                                                     static_cast<Eigen::Index>(acts.size()));
    f.noise = Eigen::Map<const Eigen::VectorXd>(noise.data(),
                                                static_cast<Eigen::Index>(noise.size()));
    if (f.activities.size() != model.k) {
      throw ConfigError("activities length mismatch for subject '" + id + "'");
    }
    model.factors.emplace(id, std::move(f));
    model.n_obs.emplace(id, s.at("n_obs").get<int>());
  }

  const auto& opt = j.at("optimizer");
  OptimizerState st;
  st.iteration = opt.at("iterations").get<int>();
  st.objective_trace = {opt.at("final_objective").get<double>()};
  st.constraint_violation = opt.at("constraint_violation").get<double>();
  st.converged = opt.at("converged").get<bool>();
  st.penalty_weight = opt.at("penalty_weight").get<double>();
  st.step_size = opt.at("step_size").get<double>();
  const auto gamma = opt.at("multipliers_row_major").get<std::vector<double>>();
  st.lagrange_multipliers.resize(model.k, model.k);
  if (gamma.size() == static_cast<std::size_t>(model.k * model.k)) {
    for (Eigen::Index r = 0; r < model.k; ++r)
      for (Eigen::Index c = 0; c < model.k; ++c)
        st.lagrange_multipliers(r, c) =
            gamma[static_cast<std::size_t>(r * model.k + c)];
  } else {
    st.lagrange_multipliers.setZero();
  }
  model.optimizer_state = std::move(st);
  if (j.contains("training_activity_source")) {
    model.training_activity_source =
        j.at("training_activity_source").get<std::string>();
  }
  return model;
}

}  // namespace brainage
