#pragma once

// Experiment orchestration: configuration, the model-selection rule, the
// retention / noise-injection / forbidden-reconstruction sweeps and their
// report tables.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "drfo/baselines.hpp"
#include "drfo/dro.hpp"
#include "drfo/ingestion.hpp"
#include "drfo/mf.hpp"
#include "drfo/reconstruction.hpp"

namespace drfo {

struct DatasetSpec {
  // synthetic-ml, synthetic-tenrec or movielens
  std::string source = "synthetic-ml";
  std::filesystem::path ratings_path;  // movielens only
  std::filesystem::path users_path;    // movielens only
  std::size_t n_users = 800;           // synthetic only
  std::uint64_t synthetic_seed = 7;
  int rating_threshold = 3;
  int user_k = 50;
  int item_k = 10;
  SplitRatios split;
};

struct ModelSpec {
  std::size_t dim = 32;
  std::size_t batch_size = 1024;
  std::size_t pretrain_epochs = 50;
  std::size_t patience = 3;
  PretrainGrid grid;
};

struct FinetuneSpec {
  double learning_rate = 1e-3;
  std::size_t epochs = 20;
  double alpha_q = 1e-3;
  std::size_t inner_steps = 1;
  std::size_t refresh_interval = 1;
  ProjectionMethod projection = ProjectionMethod::DualBisection;
  std::vector<double> lambda_grid = {10.0};
  std::vector<double> cgl_thresholds = {0.5, 0.6, 0.7, 0.8, 0.9};
  CglPrior cgl_prior = CglPrior::ConfidentEmpirical;
};

struct ReconstructionSpec {
  double reg_strength = 1.0;
  double holdout_fraction = 0.2;
  RhoWeighting weighting = RhoWeighting::User;
  double rho_margin = 0.0;
  bool relaxed = false;  // widen rho for prior mismatch
};

struct ExperimentConfig {
  static constexpr int kSchemaVersion = 1;

  std::uint64_t master_seed = 2024;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  DatasetSpec dataset;
  ModelSpec model;
  FinetuneSpec finetune;
  ReconstructionSpec reconstruction;
  std::vector<Method> methods = {Method::BasicMF, Method::Oracle, Method::RegK,
                                 Method::FLrSA,   Method::CGL,    Method::DRFO};
  std::vector<double> retention_ratios = {0.1, 0.3, 0.5, 0.7, 0.9};
  std::vector<double> flip_ratios = {0.1, 0.2, 0.3, 0.4, 0.5};
  double noise_retention = 0.3;
  // Per-group flip counts instead of the pooled ratio for the radius.
  bool noise_rho_per_group = false;
  std::vector<double> forbid_fractions = {0.0, 0.25, 0.5, 0.75, 1.0};
  double forbid_retention = 0.3;
  double rmse_budget = 0.98;
  std::size_t jobs = 1;

  // Small synthetic setting that runs the sweeps on one core in minutes.
  static ExperimentConfig desk_preset();

  void validate() const;  // ConfigError naming the offending field
};

nlohmann::json to_json(const ExperimentConfig& config);
// Missing keys keep their defaults; unknown keys and wrong types are errors.
ExperimentConfig config_from_json(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);
// `dotted.key=value`; value is parsed as JSON when possible, else as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// ---- model selection ----

struct SelectionCandidate {
  double validation_rmse = 0.0;
  double validation_dp = 0.0;  // NaN ranks last
};

struct Selection {
  std::size_t index = 0;
  bool flagged = false;  // nothing met the budget; lowest RMSE returned
  double threshold = 0.0;
};

// Among candidates with validation RMSE <= baseline_rmse / budget, the one
// with the lowest validation DP (ties: lower RMSE, then earlier). Without any
// qualifying candidate, the lowest RMSE, flagged.
Selection select_model(std::span<const SelectionCandidate> candidates, double baseline_rmse, double budget);

// ---- data preparation ----

RatingTable load_dataset(const DatasetSpec& spec);

// Validation and test metrics of a model. Validation DP uses only validation
// records of users whose attribute is known (with their true attribute);
// `oracle_view` uses every validation record.
CheckpointEvaluator make_evaluator(const SplitDataset& masked, bool oracle_view);

// Users with missing attributes get their true attribute, except that k of
// them from each group are flipped, with 2k = round(flip_ratio * missing).
// Throws ConfigError if a group has fewer than k missing users.
struct InjectedNoise {
  std::vector<UserReconstruction> users;
  std::array<double, 2> per_group_rate{};  // flipped / missing in each group
  std::size_t flips_per_group = 0;
};
InjectedNoise inject_flips(const SplitDataset& masked, double flip_ratio, std::uint64_t seed);

// ---- reports ----

struct ReportRow {
  std::string experiment;  // retention, noise, forbidden
  std::string method;
  std::string scenario;    // name of the swept parameter
  double value = 0.0;      // its value
  std::uint64_t seed = 0;
  double dp = 0.0;
  double rmse = 0.0;
  // |group mean - global mean| for (s0 known, s0 unknown, s1 known, s1 unknown); NaN if empty.
  std::array<double, 4> deviation{};
  double lambda = 0.0;
  double tau = 0.0;
  std::size_t epoch = 0;
  bool flagged = false;
  std::string error;  // non-empty when the cell failed

  friend bool operator==(const ReportRow&, const ReportRow&);
};

struct ReportTable {
  std::vector<ReportRow> rows;

  // Stable order: experiment, method, scenario, value, seed.
  void sort();
};

enum class ReportFormat { Wide, Long };

void emit_report(const ReportTable& table, const std::filesystem::path& path, ReportFormat format = ReportFormat::Wide);
void emit_report(const ReportTable& table, std::ostream& out, ReportFormat format = ReportFormat::Wide);
// Parses the wide format.
ReportTable parse_report(const std::filesystem::path& path);
ReportTable parse_report(std::istream& in);

// Mean DP / RMSE over seeds of the successful rows matching the filter.
struct CellMean {
  double dp = 0.0, rmse = 0.0;
  std::size_t n = 0;
};
CellMean mean_over_seeds(const ReportTable& table, const std::string& experiment, const std::string& method,
                         double value);

// ---- sweeps ----

using ProgressSink = std::function<void(const std::string&)>;

ReportTable run_retention_sweep(const ExperimentConfig& config, const ProgressSink& progress = {});
ReportTable run_noise_injection(const ExperimentConfig& config, const ProgressSink& progress = {});
ReportTable run_forbidden_sweep(const ExperimentConfig& config, const ProgressSink& progress = {});

}  // namespace drfo
