#pragma once

// The comparison trainers. All of them fine-tune the same pretrained model
// through train_fair; only the group constraints differ.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "drfo/dro.hpp"
#include "drfo/ingestion.hpp"
#include "drfo/reconstruction.hpp"

namespace drfo {

enum class Method { BasicMF, Oracle, RegK, FLrSA, CGL, DRFO };

Method parse_method(std::string_view name);  // case-insensitive; UsageError otherwise
std::string_view method_name(Method m);

struct TrainerSpec {
  Method method = Method::BasicMF;
  std::array<double, 2> lambda = {0.0, 0.0};
  std::optional<double> cgl_threshold;  // required for CGL only

  void validate() const;
};

// Constraints over true groups of every training record (eta 1).
std::vector<GroupConstraint> oracle_constraints(const PartitionedDataset& train, std::span<const std::int8_t> true_attr,
                                                const std::array<double, 2>& lambda);
// Constraints over known records only; a group without known records gets none.
std::vector<GroupConstraint> regk_constraints(const PartitionedDataset& train, const std::array<double, 2>& lambda);

FairTrainResult train_basic_mf(const MFModel& start, const PartitionedDataset& train, const FairTrainConfig& config,
                               const CheckpointEvaluator& evaluator = {});

FairTrainResult train_oracle(const MFModel& start, const PartitionedDataset& train,
                             std::span<const std::int8_t> true_attr, const std::array<double, 2>& lambda,
                             const FairTrainConfig& config, const CheckpointEvaluator& evaluator = {});

FairTrainResult train_regk(const MFModel& start, const PartitionedDataset& train, const std::array<double, 2>& lambda,
                           const FairTrainConfig& config, const CheckpointEvaluator& evaluator = {});

// Uniform weights over the reconstructed groups. With omit_forbidden the
// forbidden records are left out of the constraints.
FairTrainResult train_flrsa(const MFModel& start, const ReconstructedDataset& train,
                            const std::array<double, 2>& lambda, const FairTrainConfig& config,
                            const CheckpointEvaluator& evaluator = {}, bool omit_forbidden = false);

enum class CglPrior {
  ConfidentEmpirical,  // P(Ŝ=1) among missing users at or above the threshold
  Uniform,
};

// Users whose reconstruction confidence is below tau get a fresh attribute
// drawn from the prior; everyone else keeps theirs. Known users are untouched.
// When no user is confident the prior falls back to all reconstructed users.
std::vector<UserReconstruction> cgl_replace(const std::vector<UserReconstruction>& users,
                                            std::span<const AttrStatus> status, double tau, std::uint64_t seed,
                                            CglPrior prior = CglPrior::ConfidentEmpirical);

FairTrainResult train_cgl(const MFModel& start, const PartitionedDataset& train,
                          const std::vector<UserReconstruction>& users, std::span<const AttrStatus> status,
                          double tau, std::uint64_t replacement_seed, const std::array<double, 2>& lambda,
                          const FairTrainConfig& config, const CheckpointEvaluator& evaluator = {},
                          CglPrior prior = CglPrior::ConfidentEmpirical);

}  // namespace drfo
