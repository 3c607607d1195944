#pragma once

// Fairness-constrained fine-tuning. Every method in the toolkit trains
// through the same gradient-descent/ascent loop; they differ only in the
// group constraints they pass in.
//
// For group s the constraint value is
//   c_s = eta_k * mean_{D_k^(s)} R̂ + sum_parts eta_p * E_{Q_p}[R̂] - E_D[R̂]
// and the loss adds lambda_s * |c_s|. Parts with a positive radius have
// their distribution Q_p moved by projected gradient ascent on |c_s|.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "drfo/ambiguity.hpp"
#include "drfo/dataset.hpp"
#include "drfo/metrics.hpp"
#include "drfo/mf.hpp"

namespace drfo {

// A distribution over some training records, weighted by eta inside the
// constraint. A zero radius keeps the weights fixed at the center.
struct AdversarialPart {
  Partition partition = Partition::Missing;
  std::vector<RecordIndex> records;  // index space of the distribution
  AmbiguitySet ball;
  double eta = 0.0;
};

struct GroupConstraint {
  int s = 0;
  double lambda = 0.0;
  std::vector<RecordIndex> known;  // uniform part; may be empty
  double eta_k = 0.0;
  std::vector<AdversarialPart> parts;
};

struct ConstraintValue {
  double signed_value = 0.0;  // c_s
  double loss = 0.0;          // |c_s|
};

// q[p] holds the current distribution of constraint.parts[p].
ConstraintValue fairness_term(std::span<const double> predictions, const GroupConstraint& constraint,
                              std::span<const EmpiricalDistribution> q, double global_mean);

// d(lambda * |c_s|)/d(q_j) = lambda * sign * eta * R̂(record_j).
std::vector<double> constraint_gradient_q(std::span<const double> predictions, const AdversarialPart& part,
                                          double sign, double lambda);

// One ascent step on |c_s| followed by projection back onto the part's ball:
// q_j += alpha * lambda * sign * eta * R̂(record_j).
EmpiricalDistribution ascend_Q(const EmpiricalDistribution& q, std::span<const double> predictions,
                               const AdversarialPart& part, double sign, double lambda, double alpha,
                               const ProjectionOptions& projection = {});

// Adds d(lambda * |c_s|)/d(theta) into grad. The subgradient at c_s = 0 is 0.
void accumulate_fairness_gradient(const MFModel& model, std::span<const InteractionRecord> records,
                                  std::span<const double> predictions, const GroupConstraint& constraint,
                                  std::span<const EmpiricalDistribution> q, double sign,
                                  std::span<double> grad);

struct CheckpointMetrics {
  double validation_rmse = 0.0;
  double validation_dp = 0.0;  // NaN when it cannot be measured
  double test_rmse = 0.0;
  double test_dp = 0.0;
  GroupDeviation test_deviation;
};

using CheckpointEvaluator = std::function<CheckpointMetrics(const MFModel&)>;

struct Checkpoint {
  std::size_t epoch = 0;  // 0 is the starting model
  std::size_t iteration = 0;
  CheckpointMetrics metrics;
  std::optional<MFModel> model;
};

struct TrainingLogRow {
  std::size_t iteration = 0;
  std::size_t epoch = 0;
  double bce = 0.0;
  std::array<double, 2> constraint{};  // c_s after the update
  // TV(Q, center) of the first and second adversarial part of each group;
  // NaN where the part does not exist.
  std::array<std::array<double, 2>, 2> tv{};
};

enum class AscentRule {
  // q += alpha * lambda * sign(c) * eta * R̂, then project.
  Gradient,
  // |c| is convex in Q, so the plain step can stay on the face of the ball
  // it started on after the other face has become the worse one. Take the
  // step in both directions and keep the one with the larger |c|.
  TwoSided,
};

struct FairTrainConfig {
  TrainConfig optimizer;  // learning rate, decay, batch size, epochs, seed
  double alpha_q = 1e-3;
  std::size_t inner_steps = 1;       // ascent steps per descent step
  AscentRule ascent = AscentRule::TwoSided;
  std::size_t refresh_interval = 1;  // descent steps between prediction refreshes
  ProjectionOptions projection;
  bool keep_models = false;
  bool keep_log = true;

  void validate() const;
};

// One ascent step of the constraint's distributions under config.ascent and
// config.alpha_q. Returns false when nothing moved (no part with a positive
// radius, or a zero subgradient under the plain rule).
bool ascend_constraint(const GroupConstraint& constraint, std::vector<EmpiricalDistribution>& q,
                       std::span<const double> predictions, const FairTrainConfig& config);

struct FairTrainResult {
  MFModel model;  // after the last epoch
  std::vector<Checkpoint> checkpoints;
  std::vector<TrainingLogRow> log;
  std::vector<std::vector<EmpiricalDistribution>> q;  // final Q per constraint and part
};

// Mini-batch BCE plus the full-data fairness terms, optimized with Adam;
// the shuffling protocol matches train_mf so that no constraints (or all
// lambdas zero) reproduces plain training exactly. The evaluator, when set,
// runs on the starting model and after each epoch.
FairTrainResult train_fair(const MFModel& start, const PartitionedDataset& train,
                           const std::vector<GroupConstraint>& constraints, const FairTrainConfig& config,
                           const CheckpointEvaluator& evaluator = {});

void write_training_log(const std::vector<TrainingLogRow>& log, const std::filesystem::path& path);

struct DROConfig {
  std::array<double, 2> lambda = {10.0, 10.0};
  FairTrainConfig train;
  // Split the missing records into reconstructable and forbidden parts; the
  // forbidden part gets its own ball of this radius.
  bool forbidden_extension = false;
  double forbidden_radius = 1.0;
  // Leave the forbidden records out of the constraint entirely (eta over
  // known and reconstructable records only).
  bool omit_forbidden = false;
};

// Known records of group s by their true attribute, and one adversarial part
// per missing partition centered on the reconstructed attributes. Empty
// partitions contribute nothing.
std::vector<GroupConstraint> dro_constraints(const ReconstructedDataset& train, const std::array<double, 2>& rho,
                                             const DROConfig& config);

FairTrainResult drfo_train(const MFModel& start, const ReconstructedDataset& train,
                           const std::array<double, 2>& rho, const DROConfig& config,
                           const CheckpointEvaluator& evaluator = {});

}  // namespace drfo
