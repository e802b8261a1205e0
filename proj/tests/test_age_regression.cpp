#include <catch2/catch.hpp>

#include <random>

#include "brainage/age_regression.hpp"
#include "brainage/synthetic.hpp"
#include "oracles.hpp"

using namespace brainage;

TEST_CASE("a perfect line is fit exactly without an intercept") {
  Eigen::MatrixXd features(3, 1);
  features << 1, 2, 3;
  Eigen::VectorXd ages(3);
  ages << 2, 4, 6;
  const AgeModel model = fit_age_model(features, ages, /*use_intercept=*/false);
  CHECK(model.coefficients(0) == Approx(2.0).epsilon(1e-12));
  CHECK_FALSE(model.rank_deficient);
  const Eigen::VectorXd residuals = ages - features * model.coefficients;
  CHECK(residuals.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("noiseless synthetic coefficients are recovered") {
  std::mt19937_64 rng(301);
  std::uniform_real_distribution<double> unif(0.0, 5.0);
  const Eigen::Index n = 100, k = 4;
  Eigen::MatrixXd features(n, k);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < k; ++c) features(r, c) = unif(rng);
  Eigen::VectorXd beta(k);
  beta << 1.5, 0.25, 7.0, 3.0;
  const double intercept = 12.0;
  const Eigen::VectorXd ages = (features * beta).array() + intercept;

  const AgeModel model = fit_age_model(features, ages, true);
  CHECK((model.coefficients - beta).cwiseAbs().maxCoeff() < 1e-8);
  CHECK(model.intercept == Approx(intercept).margin(1e-8));
}

TEST_CASE("constant feature with intercept warns and stays finite") {
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> unif(0.0, 5.0);
  Eigen::MatrixXd features(10, 2);
  for (Eigen::Index r = 0; r < 10; ++r) {
    features(r, 0) = unif(rng);
    features(r, 1) = 1.0;  // collides with the intercept column
  }
  Eigen::VectorXd ages(10);
  for (Eigen::Index r = 0; r < 10; ++r) ages(r) = 30.0 + features(r, 0);

  const AgeModel model = fit_age_model(features, ages, true);
  CHECK(model.rank_deficient);
  CHECK(!model.warning.empty());
  Eigen::VectorXd predicted(10);
  for (Eigen::Index r = 0; r < 10; ++r) {
    predicted(r) = predict_age(model, features.row(r).transpose());
    CHECK(std::isfinite(predicted(r)));
  }
  // Minimum-norm least squares still reproduces the ages.
  CHECK((predicted - ages).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("residuals are orthogonal to the design") {
  std::mt19937_64 rng(305);
  std::normal_distribution<double> normal;
  const Eigen::Index n = 40, k = 3;
  Eigen::MatrixXd features(n, k);
  Eigen::VectorXd ages(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < k; ++c) features(r, c) = normal(rng);
    ages(r) = 50.0 + 3.0 * normal(rng);
  }
  const AgeModel model = fit_age_model(features, ages, true);
  Eigen::VectorXd residuals(n);
  for (Eigen::Index r = 0; r < n; ++r)
    residuals(r) = ages(r) - predict_age(model, features.row(r).transpose());
  for (Eigen::Index c = 0; c < k; ++c) {
    CHECK(std::abs(features.col(c).dot(residuals)) < 1e-8 * n);
  }
  CHECK(std::abs(residuals.sum()) < 1e-8 * n);  // ones column
}

TEST_CASE("predict_age applies the intercept and dot product") {
  AgeModel model;
  model.k = 2;
  model.coefficients = Eigen::VectorXd::Zero(2);
  model.intercept = 54.31;
  CHECK(predict_age(model, Eigen::VectorXd::Zero(2)) == Approx(54.31));

  AgeModel dot;
  dot.k = 2;
  dot.coefficients = Eigen::VectorXd::Ones(2);
  dot.intercept = 0.0;
  Eigen::VectorXd g(2);
  g << 2, 3;
  CHECK(predict_age(dot, g) == Approx(5.0));

  CHECK_THROWS_AS(predict_age(dot, Eigen::VectorXd::Zero(3)), DimensionError);
}

TEST_CASE("permuting features and coefficients together changes nothing") {
  std::mt19937_64 rng(307);
  std::uniform_real_distribution<double> unif(0.0, 4.0);
  const Eigen::Index n = 30, k = 3;
  Eigen::MatrixXd features(n, k);
  Eigen::VectorXd ages(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < k; ++c) features(r, c) = unif(rng);
    ages(r) = 20.0 + 2.0 * features(r, 0) + 0.5 * features(r, 2) + unif(rng);
  }
  const AgeModel model = fit_age_model(features, ages, true);

  Eigen::MatrixXd permuted_features = features;
  permuted_features.col(0).swap(permuted_features.col(2));
  const AgeModel permuted_model = fit_age_model(permuted_features, ages, true);

  for (Eigen::Index r = 0; r < n; ++r) {
    const double a = predict_age(model, features.row(r).transpose());
    const double b =
        predict_age(permuted_model, permuted_features.row(r).transpose());
    CHECK(a == Approx(b).margin(1e-12 * std::max(1.0, std::abs(a))));
  }
}

TEST_CASE("bootstrap of a perfect predictor is exactly zero") {
  Eigen::VectorXd ages(40);
  for (Eigen::Index i = 0; i < 40; ++i) ages(i) = 20.0 + i;
  const EvalReport report = bootstrap_mae(ages, ages, 30, 200, 7);
  CHECK(report.mae_mean == 0.0);
  CHECK(report.mae_std == 0.0);
}

TEST_CASE("constant absolute error bootstraps to (3, 0)") {
  Eigen::VectorXd ages(50);
  Eigen::VectorXd predictions(50);
  for (Eigen::Index i = 0; i < 50; ++i) {
    ages(i) = 30.0 + i;
    predictions(i) = ages(i) + (i % 2 == 0 ? 3.0 : -3.0);
  }
  const EvalReport report = bootstrap_mae(predictions, ages, 30, 500, 11);
  CHECK(report.mae_mean == Approx(3.0).epsilon(1e-12));
  CHECK(report.mae_std == Approx(0.0).margin(1e-12));
}

TEST_CASE("subset size equal to the cohort reproduces the full-sample MAE") {
  std::mt19937_64 rng(309);
  std::normal_distribution<double> normal;
  Eigen::VectorXd ages(25), predictions(25);
  for (Eigen::Index i = 0; i < 25; ++i) {
    ages(i) = 45.0 + 10.0 * normal(rng);
    predictions(i) = ages(i) + 2.0 * normal(rng);
  }
  const double full = (predictions - ages).cwiseAbs().mean();
  const EvalReport report = bootstrap_mae(predictions, ages, 25, 50, 19);
  CHECK(report.mae_mean == Approx(full).epsilon(1e-12));
  CHECK(report.mae_std == Approx(0.0).margin(1e-12));
}

TEST_CASE("bootstrap mean approaches the full-sample MAE") {
  std::mt19937_64 rng(311);
  std::normal_distribution<double> normal;
  Eigen::VectorXd ages(60), predictions(60);
  for (Eigen::Index i = 0; i < 60; ++i) {
    ages(i) = 50.0 + 12.0 * normal(rng);
    predictions(i) = ages(i) + 4.0 * normal(rng);
  }
  const double full = (predictions - ages).cwiseAbs().mean();
  const EvalReport report = bootstrap_mae(predictions, ages, 30, 4000, 23);
  const double standard_error = report.mae_std / std::sqrt(4000.0);
  CHECK(std::abs(report.mae_mean - full) <= 3.0 * standard_error);
}

TEST_CASE("bootstrap is deterministic and thread-count independent") {
  std::mt19937_64 rng(313);
  std::normal_distribution<double> normal;
  Eigen::VectorXd ages(35), predictions(35);
  for (Eigen::Index i = 0; i < 35; ++i) {
    ages(i) = 40.0 + 5.0 * normal(rng);
    predictions(i) = ages(i) + normal(rng);
  }
  const EvalReport a = bootstrap_mae(predictions, ages, 30, 300, 5, 1);
  const EvalReport b = bootstrap_mae(predictions, ages, 30, 300, 5, 4);
  CHECK(a.mae_mean == b.mae_mean);  // bit-identical
  CHECK(a.mae_std == b.mae_std);
}

TEST_CASE("bootstrap rejects undersized cohorts") {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(10);
  CHECK_THROWS_AS(bootstrap_mae(v, v, 30, 10, 0), ConfigError);
}

namespace {

struct TwoStage {
  FittedModel model;
  AgeModel age_model;
  CohortDataset heldout;          // with covariances computed
  double in_distribution_mae = 0.0;
};

/// Fit the two-stage pipeline on the first 25 subjects of a synthetic cohort
/// and keep the remaining subjects as a held-out slice.
TwoStage fit_two_stage(std::uint64_t seed) {
  SynthConfig config;
  config.p = 30;
  config.k = 3;
  config.n_subjects = 45;
  config.n_obs = 300;
  config.seed = seed;
  SynthCohort synth = sample_cohort(config);

  TwoStage out;
  std::vector<SubjectCovariance> train_covs;
  std::vector<double> train_ages;
  out.heldout.p = config.p;
  for (int i = 0; i < config.n_subjects; ++i) {
    auto& rec = synth.cohort.subjects[static_cast<std::size_t>(i)];
    compute_covariance(rec);
    if (i < 25) {
      train_covs.push_back(
          {rec.subject_id, *rec.covariance, config.n_obs});
      train_ages.push_back(*rec.age);
    } else {
      out.heldout.subjects.push_back(rec);
    }
  }
  out.model = fit(Regime::MHA, 3, train_covs);

  Eigen::MatrixXd features(static_cast<Eigen::Index>(train_covs.size()), 3);
  Eigen::VectorXd ages(static_cast<Eigen::Index>(train_covs.size()));
  for (std::size_t i = 0; i < train_covs.size(); ++i) {
    features.row(static_cast<Eigen::Index>(i)) =
        out.model.factors.at(train_covs[i].subject_id).activities.transpose();
    ages(static_cast<Eigen::Index>(i)) = train_ages[i];
  }
  out.age_model = fit_age_model(features, ages, true);

  Eigen::VectorXd predictions(
      static_cast<Eigen::Index>(out.heldout.subjects.size()));
  Eigen::VectorXd truth(static_cast<Eigen::Index>(out.heldout.subjects.size()));
  for (std::size_t i = 0; i < out.heldout.subjects.size(); ++i) {
    const auto& rec = out.heldout.subjects[i];
    const double v = estimate_noise(out.model.loading, *rec.covariance);
    const auto est = estimate_activities(out.model.loading, *rec.covariance, v);
    predictions(static_cast<Eigen::Index>(i)) =
        predict_age(out.age_model, est.clamped_activities);
    truth(static_cast<Eigen::Index>(i)) = *rec.age;
  }
  out.in_distribution_mae = mean_absolute_error(predictions, truth);
  return out;
}

}  // namespace

TEST_CASE("transfer onto a held-out slice stays within 2x of the test MAE") {
  TwoStage pipe = fit_two_stage(5151);
  BootstrapOptions opts;
  opts.subset_size = static_cast<int>(pipe.heldout.subjects.size());
  opts.n_bootstrap = 50;
  opts.seed = 99;
  const EvalReport report =
      transfer_evaluate(pipe.model, pipe.age_model, pipe.heldout, opts);
  CHECK(report.mae_mean <= 2.0 * pipe.in_distribution_mae + 1e-12);
  CHECK(report.mae_mean > 0.0);
}

TEST_CASE("transfer is deterministic and does not mutate the models") {
  TwoStage pipe = fit_two_stage(727);
  const std::string model_before = to_json(pipe.model).dump();
  const std::string age_before = to_json(pipe.age_model).dump();

  BootstrapOptions opts;
  opts.subset_size = 10;
  opts.n_bootstrap = 100;
  opts.seed = 4;
  const EvalReport a = transfer_evaluate(pipe.model, pipe.age_model, pipe.heldout, opts);
  const EvalReport b = transfer_evaluate(pipe.model, pipe.age_model, pipe.heldout, opts);
  CHECK(a.mae_mean == b.mae_mean);
  CHECK(a.mae_std == b.mae_std);
  CHECK(to_json(pipe.model).dump() == model_before);
  CHECK(to_json(pipe.age_model).dump() == age_before);
}

TEST_CASE("transfer rejects mismatched region counts and missing ages") {
  TwoStage pipe = fit_two_stage(31);
  CohortDataset wrong_p = pipe.heldout;
  wrong_p.p += 1;
  CHECK_THROWS_AS(transfer_evaluate(pipe.model, pipe.age_model, wrong_p),
                  DimensionError);

  CohortDataset no_age = pipe.heldout;
  no_age.subjects.front().age.reset();
  CHECK_THROWS_AS(transfer_evaluate(pipe.model, pipe.age_model, no_age),
                  ValidationError);
}

TEST_CASE("age model JSON round-trips and rejects foreign schema versions") {
  AgeModel model;
  model.k = 3;
  model.coefficients = Eigen::VectorXd(3);
  model.coefficients << 0.1, -2.5, 1.0 / 3.0;
  model.intercept = 54.31;
  model.use_intercept = true;

  const nlohmann::json j = to_json(model);
  const AgeModel loaded = age_model_from_json(j);
  CHECK(loaded.coefficients == model.coefficients);  // bit-exact
  CHECK(loaded.intercept == model.intercept);

  nlohmann::json wrong = j;
  wrong["schema_version"] = 2;
  CHECK_THROWS_AS(age_model_from_json(wrong), ConfigError);
}
