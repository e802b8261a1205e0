#include <catch2/catch.hpp>

#include <random>

#include "brainage/fit.hpp"
#include "brainage/synthetic.hpp"
#include "oracles.hpp"

using namespace brainage;

namespace {

/// Exact covariances drawn from one shared orthonormal loading: the global
/// maximum of the shared-loading likelihood recovers span(W) exactly.
std::vector<SubjectCovariance> exact_shared_cohort(const Eigen::MatrixXd& w,
                                                   std::mt19937_64& rng,
                                                   int n_subjects, int n_obs) {
  std::uniform_real_distribution<double> g_dist(1.5, 6.0);
  std::uniform_real_distribution<double> v_dist(0.3, 1.0);
  std::vector<SubjectCovariance> covs;
  for (int i = 0; i < n_subjects; ++i) {
    Eigen::VectorXd g(w.cols());
    for (Eigen::Index j = 0; j < w.cols(); ++j) g(j) = g_dist(rng);
    covs.push_back({"s" + std::to_string(i),
                    oracles::make_sigma(w, g, Eigen::VectorXd::Constant(1, v_dist(rng))),
                    n_obs});
  }
  return covs;
}

}  // namespace

TEST_CASE("PCA on a diagonal covariance finds the dominant eigenvector") {
  Eigen::MatrixXd k_mat(2, 2);
  k_mat << 4, 0, 0, 1;
  std::vector<SubjectCovariance> covs{{"s", k_mat, 100}};
  FittedModel model = fit(Regime::PCA, 1, covs);

  const Eigen::MatrixXd& w = model.loading.values;
  CHECK(std::abs(w(0, 0)) == Approx(1.0).margin(1e-4));
  CHECK(std::abs(w(1, 0)) == Approx(0.0).margin(1e-3));

  // At the optimum v = (tr K - W^T K W)/(p - k) = 1 and g = 4 - v = 3.
  const auto& f = model.factors.at("s");
  CHECK(f.noise(0) == Approx(1.0).margin(1e-3));
  CHECK(f.activities(0) == Approx(3.0).margin(1e-2));
  CHECK(model.optimizer_state.converged);
}

TEST_CASE("optimizer PCA spans the pooled-covariance eigenspace") {
  std::mt19937_64 rng(211);
  const Eigen::Index p = 14, k = 3;
  const Eigen::MatrixXd w_true = oracles::random_orthonormal(p, k, rng);
  const auto covs = exact_shared_cohort(w_true, rng, 3, 200);

  FittedModel model = fit(Regime::PCA, static_cast<int>(k), covs);

  Eigen::MatrixXd pooled = Eigen::MatrixXd::Zero(p, p);
  for (const auto& c : covs) pooled += c.covariance;
  pooled /= static_cast<double>(covs.size());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(pooled);
  Eigen::MatrixXd top(p, k);
  for (Eigen::Index j = 0; j < k; ++j) top.col(j) = es.eigenvectors().col(p - 1 - j);

  const auto angles = oracles::principal_angles(model.loading.values, top);
  for (double angle : angles) CHECK(angle < 1e-3);
  CHECK(orthonormality_violation(model.loading.values) < 1e-4);
}

TEST_CASE("MHA recovers a feasible loading better than PCA") {
  SynthConfig config;
  config.p = 50;
  config.k = 5;
  config.n_subjects = 25;
  config.n_obs = 400;
  config.seed = 4242;
  SynthCohort synth = sample_cohort(config);
  std::vector<SubjectCovariance> covs;
  for (auto& rec : synth.cohort.subjects) {
    covs.push_back({rec.subject_id, compute_covariance(rec), config.n_obs});
  }

  FittedModel mha = fit(Regime::MHA, 5, covs);
  FittedModel pca = fit(Regime::PCA, 5, covs);
  const double err_mha = recovery_error(synth.ground_truth_loading, mha.loading);
  const double err_pca = recovery_error(synth.ground_truth_loading, pca.loading);
  CHECK(err_mha < err_pca);
}

TEST_CASE("converged loadings satisfy their regime constraints") {
  std::mt19937_64 rng(223);
  SynthConfig config;
  config.p = 16;
  config.k = 3;
  config.n_subjects = 4;
  config.n_obs = 300;
  config.seed = 91;
  SynthCohort synth = sample_cohort(config);
  std::vector<SubjectCovariance> covs;
  for (auto& rec : synth.cohort.subjects) {
    covs.push_back({rec.subject_id, compute_covariance(rec), config.n_obs});
  }

  for (Regime regime : {Regime::FA, Regime::PCA, Regime::NNPCA, Regime::MCF,
                        Regime::MHA}) {
    FittedModel model = fit(regime, 3, covs);
    const Eigen::MatrixXd& w = model.loading.values;
    if (regime_nonnegative(regime)) {
      CHECK(w.minCoeff() >= 0.0);
    }
    if (regime_orthonormal(regime)) {
      CHECK(orthonormality_violation(w) < 1e-4);
    }
    for (const auto& [id, f] : model.factors) {
      CHECK(f.activities.minCoeff() >= 0.0);
      CHECK(f.noise.minCoeff() > 0.0);
      CHECK(f.noise.size() == (regime == Regime::FA ? config.p : 1));
    }
    for (double v : model.optimizer_state.objective_trace) {
      CHECK(std::isfinite(v));
    }
  }
}

TEST_CASE("augmented objective is non-decreasing across accepted loading steps") {
  std::mt19937_64 rng(227);
  const Eigen::Index p = 12, k = 2;
  const Eigen::MatrixXd w_true = oracles::random_orthonormal(p, k, rng);
  const auto covs = exact_shared_cohort(w_true, rng, 3, 150);

  for (Regime regime : {Regime::PCA, Regime::MHA, Regime::MCF}) {
    detail::Fitter fitter(regime, k, covs, FitOptions{});
    // No multiplier updates in this window, so each accepted step must not
    // decrease the augmented objective.
    double previous = fitter.augmented_objective(fitter.loading());
    for (int step = 0; step < 25; ++step) {
      fitter.step_loading();
      const double current = fitter.augmented_objective(fitter.loading());
      CHECK(current >= previous - 1e-12 * std::abs(previous));
      previous = current;
    }
  }
}

TEST_CASE("likelihood does not increase along feasible perturbations at the optimum") {
  std::mt19937_64 rng(229);
  const Eigen::Index p = 10, k = 2;
  const Eigen::MatrixXd w_true = oracles::random_orthonormal(p, k, rng);
  const auto covs = exact_shared_cohort(w_true, rng, 2, 100);
  FitOptions opts;
  opts.tolerance = 1e-10;
  FittedModel model = fit(Regime::PCA, static_cast<int>(k), covs, opts);

  const double base = log_likelihood(model, covs, model.factors);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::MatrixXd direction(p, k);
    for (Eigen::Index r = 0; r < p; ++r)
      for (Eigen::Index c = 0; c < k; ++c) direction(r, c) = normal(rng);
    // Retract back onto the orthonormal manifold so the probe stays feasible.
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(model.loading.values +
                                             1e-3 * direction);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::MatrixXd perturbed = q.leftCols(k);
    const double probed =
        log_likelihood(perturbed, covs, model.factors);
    CHECK(probed <= base + 1e-6 * (1.0 + std::abs(base)));
  }
}

TEST_CASE("loading gradient is stationary at the generative optimum of noiseless data") {
  // K = W G W^T exactly; with the noise floored the gradient lives in
  // span(W) and shrinks with the floor.
  const Eigen::Index p = 20, k = 4;
  LoadingMatrix w = sample_loading(p, k, 5150);
  Eigen::VectorXd g(k);
  g << 2.0, 3.5, 1.25, 4.0;
  Eigen::MatrixXd k_mat = w.values * g.asDiagonal() * w.values.transpose();
  std::vector<SubjectCovariance> covs{{"s", k_mat, 1}};
  SubjectFactors f;
  f.activities = g;
  f.noise = Eigen::VectorXd::Constant(1, 1e-8);
  std::map<std::string, SubjectFactors> factors{{"s", f}};
  const Eigen::MatrixXd grad = grad_loading(w.values, covs, factors);
  CHECK(grad.cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("projected activity step leaves the boundary when the gradient points inward") {
  const Eigen::Index p = 6, k = 2;
  std::mt19937_64 rng(233);
  const Eigen::MatrixXd w = oracles::random_orthonormal(p, k, rng);
  Eigen::VectorXd g_true(k);
  g_true << 2.0, 1.0;
  const Eigen::MatrixXd k_mat =
      oracles::make_sigma(w, g_true, Eigen::VectorXd::Constant(1, 0.5));

  SubjectFactors f;
  f.activities = Eigen::VectorXd::Zero(k);  // start at the boundary
  f.noise = Eigen::VectorXd::Constant(1, 0.5);
  const Eigen::VectorXd grad = grad_activities(w, k_mat, 10.0, f);
  REQUIRE(grad.minCoeff() > 0.0);

  const Eigen::VectorXd stepped = (f.activities + 0.1 * grad).cwiseMax(0.0);
  CHECK(stepped.minCoeff() > 0.0);
}

TEST_CASE("MCF matches a brute-force grid over unit non-negative vectors") {
  // k=1, p=2: the feasible set is the quarter circle.
  std::mt19937_64 rng(239);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<SubjectCovariance> covs;
  for (int i = 0; i < 3; ++i) {
    Eigen::Matrix2d a;
    a << unif(rng) + 1.0, unif(rng), unif(rng), unif(rng) + 0.5;
    Eigen::MatrixXd k_mat = a * a.transpose();
    covs.push_back({"s" + std::to_string(i), k_mat, 50});
  }

  double best_angle = 0.0, best_value = -1.0;
  for (int step = 0; step <= 1571; ++step) {  // 1e-3 resolution over [0, pi/2]
    const double angle = 1e-3 * step;
    Eigen::MatrixXd w(2, 1);
    w << std::cos(angle), std::sin(angle);
    const double value = mcf_objective(w, covs);
    if (value > best_value) {
      best_value = value;
      best_angle = angle;
    }
  }
  Eigen::MatrixXd w_grid(2, 1);
  w_grid << std::cos(best_angle), std::sin(best_angle);

  FittedModel model = fit(Regime::MCF, 1, covs);
  CHECK((model.loading.values - w_grid).cwiseAbs().maxCoeff() < 1e-2);
}

TEST_CASE("select_k returns the single candidate and prefers the true rank") {
  SynthConfig config;
  config.p = 20;
  config.k = 3;
  config.n_subjects = 16;
  config.n_obs = 400;
  config.seed = 321;
  SynthCohort synth = sample_cohort(config);
  std::vector<SubjectCovariance> train, validation;
  for (int i = 0; i < config.n_subjects; ++i) {
    auto& rec = synth.cohort.subjects[static_cast<std::size_t>(i)];
    SubjectCovariance c{rec.subject_id, compute_covariance(rec), config.n_obs};
    (i < 10 ? train : validation).push_back(std::move(c));
  }

  const KSelection single = select_k(Regime::MHA, {3}, train, validation);
  CHECK(single.best_k == 3);
  REQUIRE(single.table.size() == 1);
  CHECK(single.table[0].ok);

  const KSelection pair = select_k(Regime::MHA, {1, 3}, train, validation);
  CHECK(pair.best_k == 3);
  REQUIRE(pair.table.size() == 2);
  CHECK(pair.table[1].validation_log_likelihood >
        pair.table[0].validation_log_likelihood);
}

TEST_CASE("fit input validation") {
  Eigen::MatrixXd bad(2, 2);
  bad << 1, 2, 2, 1;  // indefinite
  std::vector<SubjectCovariance> covs{{"s", bad, 10}};
  CHECK_THROWS_AS(fit(Regime::PCA, 1, covs), ValidationError);

  std::vector<SubjectCovariance> ok{{"s", Eigen::MatrixXd::Identity(3, 3), 10}};
  CHECK_THROWS_AS(fit(Regime::PCA, 3, ok), ConfigError);
  CHECK_THROWS_AS(fit(Regime::PCA, 0, ok), ConfigError);
}

TEST_CASE("fitted model JSON round-trips losslessly") {
  std::mt19937_64 rng(241);
  const Eigen::Index p = 8, k = 2;
  const Eigen::MatrixXd w_true = oracles::random_orthonormal(p, k, rng);
  const auto covs = exact_shared_cohort(w_true, rng, 2, 60);
  FittedModel model = fit(Regime::MHA, static_cast<int>(k), covs);

  const nlohmann::json first = to_json(model);
  FittedModel loaded = model_from_json(first);
  const nlohmann::json second = to_json(loaded);
  CHECK(first.dump() == second.dump());
  CHECK(loaded.loading.values == model.loading.values);  // bit-exact
  CHECK(loaded.factors.at("s0").activities ==
        model.factors.at("s0").activities);

  nlohmann::json wrong = first;
  wrong["schema_version"] = 999;
  CHECK_THROWS_AS(model_from_json(wrong), ConfigError);
}
