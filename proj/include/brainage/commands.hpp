#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "brainage/activity.hpp"
#include "brainage/age_regression.hpp"
#include "brainage/cohort.hpp"
#include "brainage/csv.hpp"
#include "brainage/errors.hpp"
#include "brainage/fit.hpp"
#include "brainage/synthetic.hpp"

namespace brainage {

inline constexpr int kConfigSchemaVersion = 1;

/// Exit codes: 0 success, 2 configuration/validation failure, 3 numeric
/// failure, 1 unexpected error.
enum ExitCode : int {
  kExitOk = 0,
  kExitUnexpected = 1,
  kExitConfig = 2,
  kExitNumeric = 3,
};

namespace detail {

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(v));
  return std::string(buf);
}

/// Content hash over the resolved config plus all regular files under the
/// given paths (sorted), making every run auditable.
inline std::string content_hash(const std::string& config_dump,
                                const std::vector<std::filesystem::path>& inputs) {
  std::uint64_t h = fnv1a64(config_dump);
  std::vector<std::filesystem::path> files;
  for (const auto& input : inputs) {
    if (std::filesystem::is_directory(input)) {
      for (const auto& entry : std::filesystem::recursive_directory_iterator(input)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
      }
    } else if (std::filesystem::is_regular_file(input)) {
      files.push_back(input);
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    h = splitmix64(h ^ fnv1a64(f.filename().string()));
    h = splitmix64(h ^ fnv1a64(read_file(f)));
  }
  return hex64(h);
}

inline void write_json_atomic(const std::filesystem::path& path,
                              const nlohmann::json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

inline nlohmann::json load_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse JSON in " + path.string() + ": " + e.what());
  }
}

template <typename T>
T get_field(const nlohmann::json& j, const std::string& field, T fallback) {
  if (!j.contains(field)) return fallback;
  try {
    return j.at(field).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("invalid config: field '" + field + "' has the wrong type");
  }
}

template <typename T>
T require_field(const nlohmann::json& j, const std::string& field) {
  if (!j.contains(field)) {
    throw ConfigError("invalid config: missing required field '" + field + "'");
  }
  try {
    return j.at(field).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("invalid config: field '" + field + "' has the wrong type");
  }
}

inline FitOptions fit_options_from_json(const nlohmann::json& j) {
  FitOptions opts;
  if (!j.is_object()) return opts;
  opts.step_size = get_field(j, "step_size", opts.step_size);
  opts.penalty_weight = get_field(j, "penalty_weight", opts.penalty_weight);
  opts.max_outer = get_field(j, "max_outer", opts.max_outer);
  opts.tolerance = get_field(j, "tolerance", opts.tolerance);
  opts.constraint_tol = get_field(j, "constraint_tol", opts.constraint_tol);
  opts.multiplier_interval =
      get_field(j, "multiplier_interval", opts.multiplier_interval);
  opts.max_halvings = get_field(j, "max_halvings", opts.max_halvings);
  opts.value_floor = get_field(j, "value_floor", opts.value_floor);
  return opts;
}

inline nlohmann::json fit_options_to_json(const FitOptions& opts) {
  nlohmann::json j;
  j["step_size"] = opts.step_size;
  j["penalty_weight"] = opts.penalty_weight;
  j["max_outer"] = opts.max_outer;
  j["tolerance"] = opts.tolerance;
  j["constraint_tol"] = opts.constraint_tol;
  j["multiplier_interval"] = opts.multiplier_interval;
  j["max_halvings"] = opts.max_halvings;
  j["value_floor"] = opts.value_floor;
  return j;
}

inline std::vector<int> parse_k_grid(const std::string& spec) {
  const auto dots = spec.find("..");
  if (dots == std::string::npos) {
    throw ConfigError("k grid must have the form a..b, got '" + spec + "'");
  }
  int lo = 0, hi = 0;
  try {
    lo = std::stoi(spec.substr(0, dots));
    hi = std::stoi(spec.substr(dots + 2));
  } catch (const std::exception&) {
    throw ConfigError("k grid must have the form a..b, got '" + spec + "'");
  }
  if (lo < 1 || hi < lo) {
    throw ConfigError("k grid bounds are invalid: '" + spec + "'");
  }
  std::vector<int> grid;
  for (int k = lo; k <= hi; ++k) grid.push_back(k);
  return grid;
}

inline void write_run_manifest(const std::filesystem::path& out_dir,
                               const std::string& command,
                               const nlohmann::json& resolved_config,
                               const std::string& input_hash,
                               const std::vector<std::string>& artifacts) {
  nlohmann::json manifest;
  manifest["schema_version"] = kConfigSchemaVersion;
  manifest["command"] = command;
  manifest["resolved_config"] = resolved_config;
  manifest["input_hash"] = input_hash;
  manifest["artifacts"] = artifacts;
  write_json_atomic(out_dir / "run_manifest.json", manifest);
}

}  // namespace detail

/// Rethrow an error with the pipeline stage prepended, preserving its type.
[[noreturn]] inline void throw_with_stage(const std::string& stage,
                                          const Error& e) {
  const std::string message = "[" + stage + "] " + e.what();
  if (dynamic_cast<const NumericError*>(&e)) throw NumericError(message);
  if (dynamic_cast<const ParseError*>(&e)) throw ParseError(message);
  if (dynamic_cast<const IngestError*>(&e)) throw IngestError(message);
  if (dynamic_cast<const DimensionError*>(&e)) throw DimensionError(message);
  if (dynamic_cast<const ValidationError*>(&e)) throw ValidationError(message);
  if (dynamic_cast<const InsufficientDataError*>(&e))
    throw InsufficientDataError(message);
  throw ConfigError(message);
}

// --- synth-bench -----------------------------------------------------------

struct SynthBenchRun {
  StudyConfig study;
  std::filesystem::path out_dir;
  nlohmann::json resolved_config;
};

inline SynthBenchRun parse_synth_bench_config(const nlohmann::json& j) {
  if (detail::get_field(j, "schema_version", kConfigSchemaVersion) !=
      kConfigSchemaVersion) {
    throw ConfigError("unsupported config schema_version");
  }
  SynthBenchRun run;
  run.study.axis =
      study_axis_from_string(detail::get_field<std::string>(j, "axis", "vary_n"));
  run.study.grid = detail::require_field<std::vector<int>>(j, "grid");
  for (const auto& name :
       detail::get_field<std::vector<std::string>>(
           j, "regimes", {"fa", "pca", "nnpca", "mcf", "mha"})) {
    run.study.regimes.push_back(regime_from_string(name));
  }
  run.study.repeats = detail::get_field(j, "repeats", 20);
  run.study.heldout_subjects = detail::get_field(j, "heldout_subjects", 30);
  run.study.use_intercept = detail::get_field(j, "use_intercept", true);

  const nlohmann::json synth =
      j.contains("synth") ? j.at("synth") : nlohmann::json::object();
  SynthConfig& base = run.study.base;
  base.p = detail::get_field<Eigen::Index>(synth, "p", base.p);
  base.k = detail::get_field<Eigen::Index>(synth, "k", base.k);
  base.n_subjects = detail::get_field(synth, "n_subjects", base.n_subjects);
  base.n_obs = detail::get_field(synth, "n_obs", base.n_obs);
  base.activity_mean = detail::get_field(synth, "activity_mean", base.activity_mean);
  base.activity_std = detail::get_field(synth, "activity_std", base.activity_std);
  base.beta_min = detail::get_field(synth, "beta_min", base.beta_min);
  base.beta_max = detail::get_field(synth, "beta_max", base.beta_max);
  base.subject_noise = detail::get_field(synth, "subject_noise", base.subject_noise);
  base.age_noise = detail::get_field(synth, "age_noise", base.age_noise);
  base.seed = detail::require_field<std::uint64_t>(j, "seed");

  run.study.fit_options = detail::fit_options_from_json(
      j.contains("fit") ? j.at("fit") : nlohmann::json::object());
  run.study.n_threads =
      static_cast<std::size_t>(std::max(1, detail::get_field(j, "threads", 1)));
  if (j.contains("out")) {
    run.out_dir = detail::require_field<std::string>(j, "out");
  }
  return run;
}

inline nlohmann::json synth_bench_config_to_json(const SynthBenchRun& run) {
  nlohmann::json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["command"] = "synth-bench";
  j["axis"] = to_string(run.study.axis);
  j["grid"] = run.study.grid;
  std::vector<std::string> regimes;
  for (Regime r : run.study.regimes) regimes.push_back(to_string(r));
  j["regimes"] = regimes;
  j["repeats"] = run.study.repeats;
  j["heldout_subjects"] = run.study.heldout_subjects;
  j["use_intercept"] = run.study.use_intercept;
  nlohmann::json synth;
  const SynthConfig& base = run.study.base;
  synth["p"] = base.p;
  synth["k"] = base.k;
  synth["n_subjects"] = base.n_subjects;
  synth["n_obs"] = base.n_obs;
  synth["activity_mean"] = base.activity_mean;
  synth["activity_std"] = base.activity_std;
  synth["beta_min"] = base.beta_min;
  synth["beta_max"] = base.beta_max;
  synth["subject_noise"] = base.subject_noise;
  synth["age_noise"] = base.age_noise;
  j["synth"] = synth;
  j["seed"] = base.seed;
  j["fit"] = detail::fit_options_to_json(run.study.fit_options);
  // The worker count is an execution detail with no effect on results and is
  // deliberately not part of the resolved config.
  j["out"] = run.out_dir.string();
  return j;
}

/// Run the synthetic study and write study_long.csv, study_summary.csv and
/// run_manifest.json into the output directory.
inline void run_synth_bench(SynthBenchRun run) {
  if (run.out_dir.empty()) throw ConfigError("no output directory given");
  std::filesystem::create_directories(run.out_dir);
  run.resolved_config = synth_bench_config_to_json(run);
  const std::string input_hash =
      detail::content_hash(run.resolved_config.dump(), {});

  const std::vector<StudyRow> rows = run_study(run.study);
  write_file_atomic(run.out_dir / "study_long.csv",
                    study_rows_csv(rows, run.study.axis));
  write_file_atomic(run.out_dir / "study_summary.csv",
                    study_summary_csv(rows, run.study.axis));
  detail::write_run_manifest(run.out_dir, "synth-bench", run.resolved_config,
                             input_hash,
                             {"study_long.csv", "study_summary.csv"});
}

// --- fit ---------------------------------------------------------------

struct FitRun {
  std::filesystem::path data_dir;
  CohortFormat format = CohortFormat::CsvDir;
  std::filesystem::path out_dir;
  Regime regime = Regime::MHA;
  std::optional<int> k;
  std::vector<int> k_grid;
  SplitFractions split;
  std::uint64_t seed = 0;
  bool use_intercept = true;
  FitOptions fit_options;
  int bootstrap_subset = 30;
  int n_bootstrap = 1000;
  std::size_t n_threads = 1;
  nlohmann::json resolved_config;
};

inline FitRun parse_fit_config(const nlohmann::json& j) {
  if (detail::get_field(j, "schema_version", kConfigSchemaVersion) !=
      kConfigSchemaVersion) {
    throw ConfigError("unsupported config schema_version");
  }
  FitRun run;
  if (j.contains("data")) run.data_dir = detail::require_field<std::string>(j, "data");
  if (j.contains("out")) run.out_dir = detail::require_field<std::string>(j, "out");
  const std::string format = detail::get_field<std::string>(j, "format", "csv_dir");
  if (format == "csv_dir") {
    run.format = CohortFormat::CsvDir;
  } else if (format == "single_table") {
    run.format = CohortFormat::SingleTable;
  } else {
    throw ConfigError("invalid config: field 'format' must be csv_dir or single_table");
  }
  if (j.contains("regime")) {
    run.regime = regime_from_string(detail::require_field<std::string>(j, "regime"));
  }
  if (j.contains("k")) run.k = detail::require_field<int>(j, "k");
  if (j.contains("k_grid")) {
    if (j.at("k_grid").is_string()) {
      run.k_grid = detail::parse_k_grid(j.at("k_grid").get<std::string>());
    } else {
      run.k_grid = detail::require_field<std::vector<int>>(j, "k_grid");
    }
  }
  if (j.contains("split")) {
    const auto& s = j.at("split");
    run.split.train = detail::get_field(s, "train", run.split.train);
    run.split.validation = detail::get_field(s, "validation", run.split.validation);
    run.split.test = detail::get_field(s, "test", run.split.test);
  }
  if (j.contains("seed")) run.seed = detail::require_field<std::uint64_t>(j, "seed");
  run.use_intercept = detail::get_field(j, "use_intercept", true);
  run.fit_options = detail::fit_options_from_json(
      j.contains("fit") ? j.at("fit") : nlohmann::json::object());
  if (j.contains("bootstrap")) {
    const auto& b = j.at("bootstrap");
    run.bootstrap_subset = detail::get_field(b, "subset_size", run.bootstrap_subset);
    run.n_bootstrap = detail::get_field(b, "n_bootstrap", run.n_bootstrap);
  }
  run.n_threads =
      static_cast<std::size_t>(std::max(1, detail::get_field(j, "threads", 1)));
  return run;
}

inline nlohmann::json fit_config_to_json(const FitRun& run) {
  nlohmann::json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["command"] = "fit";
  j["data"] = run.data_dir.string();
  j["format"] = run.format == CohortFormat::CsvDir ? "csv_dir" : "single_table";
  j["out"] = run.out_dir.string();
  j["regime"] = to_string(run.regime);
  if (run.k) j["k"] = *run.k;
  if (!run.k_grid.empty()) j["k_grid"] = run.k_grid;
  j["split"] = {{"train", run.split.train},
                {"validation", run.split.validation},
                {"test", run.split.test}};
  j["seed"] = run.seed;
  j["use_intercept"] = run.use_intercept;
  j["fit"] = detail::fit_options_to_json(run.fit_options);
  j["bootstrap"] = {{"subset_size", run.bootstrap_subset},
                    {"n_bootstrap", run.n_bootstrap}};
  return j;
}

struct FitArtifacts {
  FittedModel model;
  AgeModel age_model;
  EvalReport report;
  KSelection selection;  // table empty in fixed-k mode
  int selected_k = 0;
};

/// End-to-end two-stage pipeline on a cohort directory: ingest, split, fit
/// (or select k on the validation split first), extract activities, fit the
/// age regression on training subjects, and evaluate on the held-out test
/// split with bootstrap MAE.
inline FitArtifacts run_fit(FitRun run) {
  if (run.data_dir.empty()) throw ConfigError("no data path given");
  if (run.out_dir.empty()) throw ConfigError("no output directory given");
  if (!run.k && run.k_grid.empty()) {
    throw ConfigError("either k or a k grid must be given");
  }
  if (run.k && !run.k_grid.empty()) {
    throw ConfigError("k and k_grid are mutually exclusive");
  }
  run.fit_options.n_threads = run.n_threads;
  std::filesystem::create_directories(run.out_dir);
  run.resolved_config = fit_config_to_json(run);
  const std::string input_hash =
      detail::content_hash(run.resolved_config.dump(), {run.data_dir});
  const std::string run_id = "fit-" + input_hash;

  std::string stage = "ingest";
  try {
    CohortDataset cohort = load_cohort(run.data_dir, run.format);
    cohort.compute_all_covariances();
    cohort = split_cohort(std::move(cohort), run.split, run.seed);

    auto covariances_of = [&cohort](Split split) {
      std::vector<SubjectCovariance> covs;
      for (const auto* rec : cohort.subjects_in(split)) {
        if (!rec->age) {
          throw ValidationError("missing age for " + to_string(split) +
                                " subject '" + rec->subject_id + "'");
        }
        covs.push_back(SubjectCovariance{rec->subject_id, *rec->covariance,
                                         static_cast<int>(rec->n_obs())});
      }
      return covs;
    };
    const auto train_covs = covariances_of(Split::Train);
    const auto val_covs = covariances_of(Split::Validation);
    const auto test_covs = covariances_of(Split::Test);

    FitArtifacts artifacts;
    stage = "select";
    if (!run.k_grid.empty()) {
      artifacts.selection = select_k(run.regime, run.k_grid, train_covs,
                                     val_covs, run.fit_options);
      artifacts.selected_k = artifacts.selection.best_k;
    } else {
      artifacts.selected_k = *run.k;
    }

    stage = "fit";
    artifacts.model =
        fit(run.regime, artifacts.selected_k, train_covs, run.fit_options);

    stage = "regress";
    Eigen::MatrixXd features(static_cast<Eigen::Index>(train_covs.size()),
                             artifacts.selected_k);
    Eigen::VectorXd ages(static_cast<Eigen::Index>(train_covs.size()));
    for (std::size_t i = 0; i < train_covs.size(); ++i) {
      const auto& f = artifacts.model.factors.at(train_covs[i].subject_id);
      features.row(static_cast<Eigen::Index>(i)) =
          f.activities.cwiseMax(0.0).transpose();
      ages(static_cast<Eigen::Index>(i)) =
          *cohort.find(train_covs[i].subject_id)->age;
    }
    artifacts.age_model = fit_age_model(features, ages, run.use_intercept);

    stage = "evaluate";
    const double ortho_tol = regime_orthonormal(run.regime)
                                 ? 1e-3
                                 : std::numeric_limits<double>::infinity();
    Eigen::VectorXd predictions(static_cast<Eigen::Index>(test_covs.size()));
    Eigen::VectorXd test_ages(static_cast<Eigen::Index>(test_covs.size()));
    for (std::size_t i = 0; i < test_covs.size(); ++i) {
      const double v =
          estimate_noise(artifacts.model.loading, test_covs[i].covariance, ortho_tol);
      ActivityEstimate est =
          estimate_activities(artifacts.model.loading, test_covs[i].covariance,
                              v, test_covs[i].subject_id, ortho_tol);
      predictions(static_cast<Eigen::Index>(i)) =
          predict_age(artifacts.age_model, est.clamped_activities);
      test_ages(static_cast<Eigen::Index>(i)) =
          *cohort.find(test_covs[i].subject_id)->age;
    }
    const int subset = std::min<int>(run.bootstrap_subset,
                                     static_cast<int>(test_covs.size()));
    artifacts.report = bootstrap_mae(predictions, test_ages, subset,
                                     run.n_bootstrap, run.seed, run.n_threads);

    stage = "emit";
    detail::write_json_atomic(run.out_dir / "model.json", to_json(artifacts.model));
    detail::write_json_atomic(run.out_dir / "age_model.json",
                              to_json(artifacts.age_model));
    nlohmann::json report = to_json(artifacts.report);
    report["run_id"] = run_id;
    report["regime"] = to_string(run.regime);
    report["k"] = artifacts.selected_k;
    report["dataset"] = run.data_dir.filename().string();
    detail::write_json_atomic(run.out_dir / "eval_report.json", report);

    std::vector<std::string> artifact_names = {"model.json", "age_model.json",
                                               "eval_report.json"};
    if (!run.k_grid.empty()) {
      std::string table = "k,status,validation_log_likelihood\n";
      for (const auto& row : artifacts.selection.table) {
        std::string status = row.ok ? "ok" : "failed: " + row.message;
        std::replace(status.begin(), status.end(), ',', ';');
        table += std::to_string(row.k) + "," + status + ",";
        if (row.ok) table += format_double(row.validation_log_likelihood);
        table += "\n";
      }
      write_file_atomic(run.out_dir / "k_selection.csv", table);
      artifact_names.push_back("k_selection.csv");
    }
    detail::write_run_manifest(run.out_dir, "fit", run.resolved_config,
                               input_hash, artifact_names);
    ledger_append(run.out_dir / "results_ledger.csv", run_id,
                  to_string(run.regime), artifacts.selected_k,
                  run.data_dir.filename().string(), artifacts.report);
    return artifacts;
  } catch (Error& e) {
    throw_with_stage(stage, e);
  }
}

// --- transfer ----------------------------------------------------------

struct TransferRun {
  std::filesystem::path model_path;
  std::filesystem::path age_model_path;
  std::filesystem::path data_dir;
  CohortFormat format = CohortFormat::CsvDir;
  std::filesystem::path out_dir = ".";
  std::uint64_t seed = 0;
  int bootstrap_subset = 30;
  int n_bootstrap = 1000;
  std::size_t n_threads = 1;
};

/// Evaluate a frozen model on an entirely unseen cohort; nothing is refit.
inline EvalReport run_transfer(const TransferRun& run) {
  FittedModel model = model_from_json(detail::load_json(run.model_path));
  AgeModel age_model = age_model_from_json(detail::load_json(run.age_model_path));
  CohortDataset cohort = load_cohort(run.data_dir, run.format);
  cohort.compute_all_covariances();

  BootstrapOptions opts;
  opts.subset_size =
      std::min<int>(run.bootstrap_subset, static_cast<int>(cohort.subjects.size()));
  opts.n_bootstrap = run.n_bootstrap;
  opts.seed = run.seed;
  opts.n_threads = run.n_threads;
  EvalReport report = transfer_evaluate(model, age_model, cohort, opts);

  std::filesystem::create_directories(run.out_dir);
  nlohmann::json config;
  config["schema_version"] = kConfigSchemaVersion;
  config["command"] = "transfer";
  config["model"] = run.model_path.string();
  config["age_model"] = run.age_model_path.string();
  config["data"] = run.data_dir.string();
  config["seed"] = run.seed;
  config["bootstrap"] = {{"subset_size", opts.subset_size},
                         {"n_bootstrap", opts.n_bootstrap}};
  const std::string input_hash = detail::content_hash(
      config.dump(), {run.model_path, run.age_model_path, run.data_dir});
  const std::string run_id = "transfer-" + input_hash;

  nlohmann::json out = to_json(report);
  out["run_id"] = run_id;
  out["regime"] = to_string(model.loading.regime);
  out["k"] = model.k;
  out["dataset"] = run.data_dir.filename().string();
  detail::write_json_atomic(run.out_dir / "transfer_report.json", out);
  detail::write_run_manifest(run.out_dir, "transfer", config, input_hash,
                             {"transfer_report.json"});
  ledger_append(run.out_dir / "results_ledger.csv", run_id,
                to_string(model.loading.regime), model.k,
                run.data_dir.filename().string(), report);
  return report;
}

// --- predict -----------------------------------------------------------

struct PredictRun {
  std::filesystem::path model_path;
  std::filesystem::path age_model_path;
  std::filesystem::path data_dir;
  CohortFormat format = CohortFormat::CsvDir;
  std::filesystem::path out_dir = ".";
};

/// Predict ages for a cohort (ages optional); writes predictions.csv and the
/// per-subject activity CSV.
inline void run_predict(const PredictRun& run) {
  FittedModel model = model_from_json(detail::load_json(run.model_path));
  AgeModel age_model = age_model_from_json(detail::load_json(run.age_model_path));
  CohortDataset cohort = load_cohort(run.data_dir, run.format);
  cohort.compute_all_covariances();
  if (cohort.p != model.loading.p()) {
    throw DimensionError("cohort has p=" + std::to_string(cohort.p) +
                         " regions but the model expects p=" +
                         std::to_string(model.loading.p()));
  }

  const double ortho_tol = regime_orthonormal(model.loading.regime)
                               ? 1e-3
                               : std::numeric_limits<double>::infinity();
  std::filesystem::create_directories(run.out_dir);
  std::string predictions = "subject_id,predicted_age,age\n";
  std::vector<ActivityEstimate> estimates;
  for (const auto& subject : cohort.subjects) {
    const double v = estimate_noise(model.loading, *subject.covariance, ortho_tol);
    ActivityEstimate est = estimate_activities(
        model.loading, *subject.covariance, v, subject.subject_id, ortho_tol);
    const double predicted = predict_age(age_model, est.clamped_activities);
    predictions += subject.subject_id + "," + format_double(predicted) + ",";
    if (subject.age) predictions += format_double(*subject.age);
    predictions += "\n";
    estimates.push_back(std::move(est));
  }
  write_file_atomic(run.out_dir / "predictions.csv", predictions);
  write_activities_csv(run.out_dir / "activities.csv", estimates);
}

// --- CLI ---------------------------------------------------------------

namespace detail {

inline int exit_code_for(const Error& e) {
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  return kExitConfig;
}

inline void report_error(std::ostream& err, const std::string& kind,
                         const std::string& message) {
  nlohmann::json j;
  j["error"] = kind;
  j["message"] = message;
  err << j.dump() << "\n";
}

}  // namespace detail

/// Single-binary CLI with subcommands synth-bench, fit, transfer, predict.
/// Configuration comes from one declarative JSON file; command-line flags
/// take precedence over config fields.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out,
                   std::ostream& err) {
  CLI::App app{"Two-stage brain-age pipeline on shared low-rank covariance models"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, regime_name, k_grid_spec;
  std::string model_path, age_model_path, format_name = "csv_dir";
  std::uint64_t seed = 0;
  int k = 0, threads = 0, subset_size = 0, n_bootstrap = 0;

  auto* bench = app.add_subcommand("synth-bench", "Run the synthetic benchmark study");
  bench->add_option("--config", config_path, "JSON config file")->required();
  bench->add_option("--out", out_dir, "Output directory");
  bench->add_option("--seed", seed, "Override the base seed");
  bench->add_option("--threads", threads, "Worker thread count");

  auto* fit_cmd = app.add_subcommand("fit", "Fit, select, and evaluate on a cohort");
  fit_cmd->add_option("--config", config_path, "JSON config file");
  fit_cmd->add_option("--data", data_dir, "Cohort directory or table file");
  fit_cmd->add_option("--out", out_dir, "Output directory");
  fit_cmd->add_option("--format", format_name, "csv_dir or single_table");
  fit_cmd->add_option("--regime", regime_name, "fa|pca|nnpca|mcf|mha");
  fit_cmd->add_option("--k", k, "Number of networks");
  fit_cmd->add_option("--k-grid", k_grid_spec, "Rank grid a..b for selection");
  fit_cmd->add_option("--seed", seed, "Random seed");
  fit_cmd->add_option("--threads", threads, "Worker thread count");

  auto* transfer_cmd =
      app.add_subcommand("transfer", "Evaluate a frozen model on an unseen cohort");
  transfer_cmd->add_option("--model", model_path, "Covariance model JSON")->required();
  transfer_cmd->add_option("--age-model", age_model_path, "Age model JSON")->required();
  transfer_cmd->add_option("--data", data_dir, "Cohort directory")->required();
  transfer_cmd->add_option("--format", format_name, "csv_dir or single_table");
  transfer_cmd->add_option("--seed", seed, "Bootstrap seed");
  transfer_cmd->add_option("--out", out_dir, "Output directory");
  transfer_cmd->add_option("--subset-size", subset_size, "Bootstrap subset size");
  transfer_cmd->add_option("--n-bootstrap", n_bootstrap, "Bootstrap replicates");
  transfer_cmd->add_option("--threads", threads, "Worker thread count");

  auto* predict_cmd =
      app.add_subcommand("predict", "Predict ages for a cohort (ages optional)");
  predict_cmd->add_option("--model", model_path, "Covariance model JSON")->required();
  predict_cmd->add_option("--age-model", age_model_path, "Age model JSON")->required();
  predict_cmd->add_option("--data", data_dir, "Cohort directory")->required();
  predict_cmd->add_option("--format", format_name, "csv_dir or single_table");
  predict_cmd->add_option("--out", out_dir, "Output directory");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    detail::report_error(err, "cli", e.what());
    return kExitConfig;
  }

  auto parse_format = [&]() {
    if (format_name == "csv_dir") return CohortFormat::CsvDir;
    if (format_name == "single_table") return CohortFormat::SingleTable;
    throw ConfigError("unknown format '" + format_name + "'");
  };

  try {
    if (bench->parsed()) {
      SynthBenchRun run = parse_synth_bench_config(detail::load_json(config_path));
      if (!out_dir.empty()) run.out_dir = out_dir;
      if (bench->count("--seed")) run.study.base.seed = seed;
      if (bench->count("--threads")) {
        run.study.n_threads = static_cast<std::size_t>(std::max(1, threads));
      }
      run_synth_bench(run);
      out << "synthetic study written to " << run.out_dir.string() << "\n";
    } else if (fit_cmd->parsed()) {
      FitRun run = config_path.empty()
                       ? FitRun{}
                       : parse_fit_config(detail::load_json(config_path));
      if (!data_dir.empty()) run.data_dir = data_dir;
      if (!out_dir.empty()) run.out_dir = out_dir;
      if (fit_cmd->count("--format")) run.format = parse_format();
      if (!regime_name.empty()) run.regime = regime_from_string(regime_name);
      if (fit_cmd->count("--k")) {
        run.k = k;
        run.k_grid.clear();
      }
      if (!k_grid_spec.empty()) {
        run.k_grid = detail::parse_k_grid(k_grid_spec);
        run.k.reset();
      }
      if (fit_cmd->count("--seed")) run.seed = seed;
      if (fit_cmd->count("--threads")) {
        run.n_threads = static_cast<std::size_t>(std::max(1, threads));
      }
      FitArtifacts artifacts = run_fit(run);
      out << "fit complete: regime=" << to_string(run.regime)
          << " k=" << artifacts.selected_k
          << " test_mae=" << format_double(artifacts.report.mae_mean) << " ("
          << format_double(artifacts.report.mae_std) << ")\n";
    } else if (transfer_cmd->parsed()) {
      TransferRun run;
      run.model_path = model_path;
      run.age_model_path = age_model_path;
      run.data_dir = data_dir;
      run.format = parse_format();
      run.seed = seed;
      if (!out_dir.empty()) run.out_dir = out_dir;
      if (subset_size > 0) run.bootstrap_subset = subset_size;
      if (n_bootstrap > 0) run.n_bootstrap = n_bootstrap;
      if (threads > 0) run.n_threads = static_cast<std::size_t>(threads);
      EvalReport report = run_transfer(run);
      out << "transfer_mae=" << format_double(report.mae_mean) << " ("
          << format_double(report.mae_std) << ")\n";
    } else if (predict_cmd->parsed()) {
      PredictRun run;
      run.model_path = model_path;
      run.age_model_path = age_model_path;
      run.data_dir = data_dir;
      run.format = parse_format();
      if (!out_dir.empty()) run.out_dir = out_dir;
      run_predict(run);
      out << "predictions written to " << run.out_dir.string() << "\n";
    }
    return kExitOk;
  } catch (const Error& e) {
    detail::report_error(err, "brainage", e.what());
    return detail::exit_code_for(e);
  } catch (const std::exception& e) {
    detail::report_error(err, "unexpected", e.what());
    return kExitUnexpected;
  }
}

}  // namespace brainage
