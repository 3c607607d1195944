#pragma once

// Matrix-factorization rating predictor trained with binary cross-entropy.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "drfo/dataset.hpp"

namespace drfo {

inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// R̂(u,v) = logistic(<p_u, q_v> + b_u + b_v + b). All parameters live in one
// flat vector laid out as [P | Q | b_user | b_item | b], so gradients and
// optimizer state share the same layout.
class MFModel {
 public:
  MFModel() = default;
  MFModel(std::size_t n_users, std::size_t n_items, std::size_t dim);

  std::size_t n_users() const { return n_users_; }
  std::size_t n_items() const { return n_items_; }
  std::size_t dim() const { return dim_; }
  std::size_t n_params() const { return params_.size(); }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  std::size_t user_offset(UserId u) const { return u * dim_; }
  std::size_t item_offset(ItemId v) const { return (n_users_ + v) * dim_; }
  std::size_t user_bias_offset(UserId u) const { return (n_users_ + n_items_) * dim_ + u; }
  std::size_t item_bias_offset(ItemId v) const { return (n_users_ + n_items_) * dim_ + n_users_ + v; }
  std::size_t global_bias_offset() const { return (n_users_ + n_items_) * (dim_ + 1); }

  std::span<const double> user_embedding(UserId u) const { return {params_.data() + user_offset(u), dim_}; }
  std::span<const double> item_embedding(ItemId v) const { return {params_.data() + item_offset(v), dim_}; }
  double& user_bias(UserId u) { return params_[user_bias_offset(u)]; }
  double& item_bias(ItemId v) { return params_[item_bias_offset(v)]; }
  double& global_bias() { return params_[global_bias_offset()]; }

  // Raw score without range checks; hot loops use this.
  double score_unchecked(UserId u, ItemId v) const;
  // Throws UsageError for out-of-range ids.
  double score(UserId u, ItemId v) const;

  friend bool operator==(const MFModel&, const MFModel&) = default;

 private:
  std::size_t n_users_ = 0, n_items_ = 0, dim_ = 0;
  std::vector<double> params_;
};

// Embeddings ~ N(0, 0.01^2), biases zero, reproducible from seed.
MFModel init_model(std::size_t n_users, std::size_t n_items, std::size_t dim, std::uint64_t seed);

double predict(const MFModel& model, UserId u, ItemId v);

// Predictions for every record, in record order.
std::vector<double> predict_all(const MFModel& model, std::span<const InteractionRecord> records);

// Mean binary cross-entropy; weight decay is not part of it.
double bce_loss(const MFModel& model, std::span<const InteractionRecord> batch);

// Adds coeff * d(score(u,v))/d(theta) into grad.
void accumulate_score_gradient(const MFModel& model, UserId u, ItemId v, double coeff,
                               std::span<double> grad);

// Gradient of the mean BCE over the batch, added into grad.
void accumulate_bce_gradient(const MFModel& model, std::span<const InteractionRecord> batch,
                             std::span<double> grad);

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.0;  // decoupled: theta -= lr * wd * theta
  std::size_t batch_size = 1024;
  std::size_t max_epochs = 50;
  std::size_t patience = 3;  // epochs without validation RMSE improvement
  std::uint64_t seed = 0;
  AdamSettings adam;

  void validate() const;
};

class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::size_t n_params) : m_(n_params, 0.0), v_(n_params, 0.0) {}

  // One decoupled-weight-decay Adam update. Throws TrainingError if the
  // gradient has a non-finite entry (parameters are left untouched).
  void step(std::span<double> params, std::span<const double> grad, const TrainConfig& config);

  std::size_t steps() const { return t_; }

 private:
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

// One optimizer update on the BCE of the batch.
void grad_step(MFModel& model, AdamOptimizer& optimizer, std::span<const InteractionRecord> batch,
               const TrainConfig& config);

// Iterates shuffled mini-batches of a dataset. The shuffle draws from the
// caller's generator, once per epoch.
class BatchIterator {
 public:
  BatchIterator(std::span<const InteractionRecord> records, std::size_t batch_size);
  void start_epoch(std::mt19937_64& rng);
  bool next(std::vector<InteractionRecord>& batch);

 private:
  std::span<const InteractionRecord> records_;
  std::size_t batch_size_;
  std::vector<RecordIndex> order_;
  std::size_t pos_ = 0;
};

double rmse_of(const MFModel& model, std::span<const InteractionRecord> records);

struct TrainResult {
  MFModel model;  // best-by-validation-RMSE epoch
  double validation_rmse = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
};

// Plain BCE training from `start`, with early stopping on validation RMSE.
TrainResult train_mf(const MFModel& start, const PartitionedDataset& train,
                     const PartitionedDataset& validation, const TrainConfig& config);

struct PretrainGrid {
  std::vector<double> learning_rates = {1e-2, 1e-3};
  std::vector<double> weight_decays = {1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7};
};

struct PretrainRun {
  double learning_rate, weight_decay, validation_rmse;
  std::size_t best_epoch;
};

struct PretrainResult {
  MFModel model;
  double learning_rate = 0.0;
  double weight_decay = 0.0;
  double validation_rmse = 0.0;
  std::vector<PretrainRun> runs;
};

// Grid search over (lr, decay); each run starts from init_model(seed).
// Equal validation RMSE is broken toward the smaller lr, then smaller decay.
PretrainResult pretrain(const PartitionedDataset& train, const PartitionedDataset& validation,
                        std::size_t dim, const TrainConfig& base, const PretrainGrid& grid);

// Plain-text checkpoint: header line, dims and seed, then every parameter as
// a hexadecimal float so that reading it back is bit-exact.
void save_checkpoint(const MFModel& model, std::uint64_t seed, const std::filesystem::path& path);
MFModel load_checkpoint(const std::filesystem::path& path, std::uint64_t* seed = nullptr);

}  // namespace drfo
