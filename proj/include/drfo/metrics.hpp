#pragma once

// Demographic-parity and accuracy metrics, group expectations and the
// partition-size mixing weights used by the fairness constraints.

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "drfo/dataset.hpp"
#include "drfo/mf.hpp"

namespace drfo {

// |mean(pred | S=0) - mean(pred | S=1)|. Throws MetricError if a group is empty.
double mad(std::span<const double> predictions, std::span<const std::int8_t> attrs);

double rmse(std::span<const double> predictions, std::span<const double> labels);

// Mean prediction over the indexed records.
double group_expectation(const MFModel& model, std::span<const InteractionRecord> records,
                         std::span<const RecordIndex> indices);
double group_expectation(std::span<const double> predictions, std::span<const RecordIndex> indices);

struct PartitionCounts {
  std::size_t known = 0;            // |D_k^(s)|
  std::size_t reconstructable = 0;  // |D̂_r^(s)| (or |D̂_m^(s)| with no forbidden part)
  std::size_t forbidden = 0;        // |D̂_b^(s)|
};

struct GroupWeights {
  std::array<double, 2> eta_k{}, eta_r{}, eta_b{};

  double eta_m(int s) const { return eta_r[s] + eta_b[s]; }
};

// eta_x[s] = count_x / (known + reconstructable + forbidden) for group s.
GroupWeights eta_weights(const std::array<PartitionCounts, 2>& counts);

// The four {S=0,1} x {known, unknown} groups of the case study.
struct GroupDeviation {
  double global_mean = 0.0;
  // deviation[s][unknown]: |mean over the group - global mean|; nullopt if
  // the group has no records.
  std::array<std::array<std::optional<double>, 2>, 2> deviation;
};

// known_user[u] tells whether u's attribute was known during training.
GroupDeviation group_deviation_report(std::span<const double> predictions,
                                      std::span<const InteractionRecord> records,
                                      std::span<const std::int8_t> true_attr,
                                      std::span<const bool> known_user);

struct FairnessReport {
  double dp = 0.0;
  double rmse = 0.0;
  GroupDeviation deviation;
};

// DP (with true attributes) and RMSE over a dataset, plus group deviations.
FairnessReport evaluate(const MFModel& model, const PartitionedDataset& data,
                        std::span<const std::int8_t> true_attr, std::span<const bool> known_user);

}  // namespace drfo
