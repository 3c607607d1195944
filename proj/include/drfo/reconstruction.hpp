#pragma once

// Inference of missing sensitive attributes from interaction histories, and
// the per-group error rates that size the ambiguity sets.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "drfo/dataset.hpp"
#include "drfo/ingestion.hpp"

namespace drfo {

// Sparse binary item-indicator vectors, one per user.
struct UserFeatures {
  std::size_t n_items = 0;
  std::vector<std::vector<ItemId>> items;  // sorted, unique

  std::vector<double> dense(UserId u) const;
};

// x_u[v] = 1 iff u interacted with v in `train`.
UserFeatures build_features(const PartitionedDataset& train);

struct AttrClassifier {
  std::vector<double> weights;  // one per item
  double intercept = 0.0;
  std::size_t iterations = 0;
  double gradient_norm = 0.0;

  double probability(const UserFeatures& features, UserId u) const;
};

struct ClassifierOptions {
  double reg_strength = 1.0;
  double tolerance = 1e-6;  // on the gradient norm
  std::size_t max_iterations = 5000;
  std::uint64_t seed = 0;
};

// L2-regularized logistic regression (intercept unpenalized) minimizing
// mean log-loss + reg/(2n) * ||w||^2, fit by accelerated gradient descent
// from zero. Throws DegenerateDataError if only one class is present.
AttrClassifier train_classifier(const UserFeatures& features, std::span<const UserId> users,
                                std::span<const std::int8_t> labels, const ClassifierOptions& options);

struct AttrPrediction {
  std::int8_t s_hat = 0;
  double confidence = 0.5;  // max(p, 1 - p)
};

// ŝ = 1 iff p > 0.5 (p = 0.5 goes to 0).
AttrPrediction attr_from_probability(double p);
std::vector<AttrPrediction> predict_attrs(const AttrClassifier& classifier, const UserFeatures& features,
                                          std::span<const UserId> users);

enum class RhoWeighting { User, Interaction };

struct RhoEstimate {
  std::array<double, 2> rho{};
  // confusion[s][ŝ]: held-out weight with true s predicted as ŝ (users, or
  // interactions under RhoWeighting::Interaction).
  std::array<std::array<double, 2>, 2> confusion{};
  std::optional<std::array<double, 2>> relaxed;
};

// rho[s] = wrong[s] / (wrong[s] + correct[s]) + margin, clamped to [0,1].
// Throws DegenerateDataError when a group has no held-out users.
RhoEstimate rho_from_confusion(const std::array<std::array<double, 2>, 2>& confusion, double margin = 0.0);

RhoEstimate estimate_rho(const AttrClassifier& classifier, const UserFeatures& features,
                         std::span<const UserId> held_out, std::span<const std::int8_t> labels,
                         RhoWeighting weighting = RhoWeighting::User, double margin = 0.0);

// Radius widened for mismatched priors: min(1, rho + k|δp|) with
// k = P(S=s, Ŝ=s) / (P(S=s) P(Ŝ=s)) and δp = P(Ŝ=s) - P(S=s).
double relaxed_rho(double rho, double prior_s, double prior_s_hat, double joint);
// Applies relaxed_rho to both groups using the estimate's confusion counts.
RhoEstimate with_relaxed_rho(const RhoEstimate& estimate);

struct ReconstructionConfig {
  ClassifierOptions classifier;
  double holdout_fraction = 0.2;  // share of known users used to estimate rho
  RhoWeighting weighting = RhoWeighting::User;
  double rho_margin = 0.0;
  std::uint64_t seed = 0;
};

struct UserReconstruction {
  std::int8_t s_hat = -1;     // -1 for known users
  double confidence = 1.0;
};

struct ReconstructionResult {
  ReconstructedDataset train;
  ReconstructedDataset validation;
  std::vector<UserReconstruction> users;
  RhoEstimate rho;
  AttrClassifier classifier;
};

// Trains the classifier on a random user-level split of the known users,
// estimates rho on the held-out part, predicts every reconstructable user
// and assigns forbidden users a fair coin flip with confidence 0.5.
ReconstructionResult reconstruct(const SplitDataset& split, const ReconstructionConfig& config);

// Builds reconstructed train/validation views from per-user attributes.
ReconstructedDataset attach_reconstruction(const PartitionedDataset& base,
                                           const std::vector<UserReconstruction>& users);

// Report file: `user\tstatus\ts_hat\tconfidence` preceded by `# rho0=..`
// summary lines.
void write_reconstruction_report(const ReconstructionResult& result, const SplitDataset& split,
                                 const std::filesystem::path& path);
struct ReconstructionReport {
  std::vector<UserReconstruction> users;
  std::array<double, 2> rho{};
  std::optional<std::array<double, 2>> relaxed;

  std::array<double, 2> radius() const { return relaxed ? *relaxed : rho; }
};
ReconstructionReport read_reconstruction_report(const std::filesystem::path& path);

}  // namespace drfo
