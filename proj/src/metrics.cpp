#include "drfo/metrics.hpp"

#include <cmath>
#include <string>

#include "drfo/errors.hpp"

namespace drfo {

double mad(std::span<const double> predictions, std::span<const std::int8_t> attrs) {
  if (predictions.size() != attrs.size()) throw MetricError("mad: predictions and attributes differ in length");
  std::array<double, 2> sum{};
  std::array<std::size_t, 2> count{};
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int s = attrs[i];
    if (s != 0 && s != 1) throw MetricError("mad: attribute must be 0 or 1");
    sum[s] += predictions[i];
    ++count[s];
  }
  if (count[0] == 0 || count[1] == 0) throw MetricError("mad: both groups need at least one prediction");
  return std::abs(sum[0] / static_cast<double>(count[0]) - sum[1] / static_cast<double>(count[1]));
}

double rmse(std::span<const double> predictions, std::span<const double> labels) {
  if (predictions.empty()) throw MetricError("rmse of an empty set");
  if (predictions.size() != labels.size()) throw MetricError("rmse: predictions and labels differ in length");
  double sq = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double e = predictions[i] - labels[i];
    sq += e * e;
  }
  return std::sqrt(sq / static_cast<double>(predictions.size()));
}

double group_expectation(std::span<const double> predictions, std::span<const RecordIndex> indices) {
  if (indices.empty()) throw MetricError("group expectation over an empty index set");
  double sum = 0.0;
  for (RecordIndex i : indices) sum += predictions[i];
  return sum / static_cast<double>(indices.size());
}

double group_expectation(const MFModel& model, std::span<const InteractionRecord> records,
                         std::span<const RecordIndex> indices) {
  if (indices.empty()) throw MetricError("group expectation over an empty index set");
  double sum = 0.0;
  for (RecordIndex i : indices) sum += logistic(model.score(records[i].user, records[i].item));
  return sum / static_cast<double>(indices.size());
}

GroupWeights eta_weights(const std::array<PartitionCounts, 2>& counts) {
  GroupWeights w;
  for (int s = 0; s < 2; ++s) {
    const auto& c = counts[s];
    const std::size_t total = c.known + c.reconstructable + c.forbidden;
    if (total == 0) {
      throw ConfigError("no records of any partition carry attribute " + std::to_string(s) +
                        "; the fairness constraint for this group is undefined");
    }
    const double denom = static_cast<double>(total);
    w.eta_k[s] = static_cast<double>(c.known) / denom;
    w.eta_r[s] = static_cast<double>(c.reconstructable) / denom;
    w.eta_b[s] = static_cast<double>(c.forbidden) / denom;
  }
  return w;
}

GroupDeviation group_deviation_report(std::span<const double> predictions,
                                      std::span<const InteractionRecord> records,
                                      std::span<const std::int8_t> true_attr,
                                      std::span<const bool> known_user) {
  if (predictions.size() != records.size()) throw MetricError("one prediction per record is required");
  GroupDeviation out;
  if (records.empty()) return out;
  std::array<std::array<double, 2>, 2> sum{};
  std::array<std::array<std::size_t, 2>, 2> count{};
  double total = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const int s = true_attr[records[i].user];
    const int unknown = known_user[records[i].user] ? 0 : 1;
    sum[s][unknown] += predictions[i];
    ++count[s][unknown];
    total += predictions[i];
  }
  out.global_mean = total / static_cast<double>(records.size());
  for (int s = 0; s < 2; ++s) {
    for (int k = 0; k < 2; ++k) {
      if (count[s][k] > 0) {
        out.deviation[s][k] = std::abs(sum[s][k] / static_cast<double>(count[s][k]) - out.global_mean);
      }
    }
  }
  return out;
}

FairnessReport evaluate(const MFModel& model, const PartitionedDataset& data,
                        std::span<const std::int8_t> true_attr, std::span<const bool> known_user) {
  const auto records = data.records();
  const auto pred = predict_all(model, records);
  std::vector<std::int8_t> attrs(records.size());
  std::vector<double> labels(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    attrs[i] = true_attr[records[i].user];
    labels[i] = records[i].rating;
  }
  FairnessReport report;
  report.dp = mad(pred, attrs);
  report.rmse = rmse(pred, labels);
  report.deviation = group_deviation_report(pred, records, true_attr, known_user);
  return report;
}

}  // namespace drfo
