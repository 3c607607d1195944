#include "drfo/mf.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>

#include "drfo/errors.hpp"
#include "drfo/random.hpp"

namespace drfo {

MFModel::MFModel(std::size_t n_users, std::size_t n_items, std::size_t dim)
    : n_users_(n_users), n_items_(n_items), dim_(dim), params_((n_users + n_items) * (dim + 1) + 1, 0.0) {}

double MFModel::score_unchecked(UserId u, ItemId v) const {
  const double* p = params_.data() + user_offset(u);
  const double* q = params_.data() + item_offset(v);
  double dot = 0.0;
  for (std::size_t k = 0; k < dim_; ++k) dot += p[k] * q[k];
  return dot + params_[user_bias_offset(u)] + params_[item_bias_offset(v)] + params_[global_bias_offset()];
}

double MFModel::score(UserId u, ItemId v) const {
  if (u >= n_users_ || v >= n_items_) {
    throw UsageError("prediction for (user " + std::to_string(u) + ", item " + std::to_string(v) +
                     ") outside a " + std::to_string(n_users_) + "x" + std::to_string(n_items_) + " model");
  }
  return score_unchecked(u, v);
}

MFModel init_model(std::size_t n_users, std::size_t n_items, std::size_t dim, std::uint64_t seed) {
  if (n_users == 0 || n_items == 0 || dim == 0) throw UsageError("model dimensions must be positive");
  MFModel model(n_users, n_items, dim);
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 0.01);
  auto params = model.params();
  const std::size_t n_embed = (n_users + n_items) * dim;
  for (std::size_t i = 0; i < n_embed; ++i) params[i] = normal(rng);
  return model;
}

double predict(const MFModel& model, UserId u, ItemId v) { return logistic(model.score(u, v)); }

std::vector<double> predict_all(const MFModel& model, std::span<const InteractionRecord> records) {
  std::vector<double> out(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    out[i] = logistic(model.score_unchecked(records[i].user, records[i].item));
  }
  return out;
}

namespace {

// -log(logistic(x)) computed without overflow.
double softplus_neg(double x) { return x >= 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x)); }

void check_ids(const MFModel& model, const InteractionRecord& r) {
  if (r.user >= model.n_users() || r.item >= model.n_items()) {
    throw UsageError("record (user " + std::to_string(r.user) + ", item " + std::to_string(r.item) +
                     ") outside the model's index space");
  }
}

}  // namespace

double bce_loss(const MFModel& model, std::span<const InteractionRecord> batch) {
  if (batch.empty()) throw UsageError("bce_loss needs a non-empty batch");
  double total = 0.0;
  for (const auto& r : batch) {
    check_ids(model, r);
    const double x = model.score_unchecked(r.user, r.item);
    // -[r log σ(x) + (1-r) log(1-σ(x))], with 1-σ(x) = σ(-x).
    total += r.rating ? softplus_neg(x) : softplus_neg(-x);
  }
  return total / static_cast<double>(batch.size());
}

void accumulate_score_gradient(const MFModel& model, UserId u, ItemId v, double coeff,
                               std::span<double> grad) {
  const auto params = model.params();
  const std::size_t d = model.dim();
  const std::size_t pu = model.user_offset(u), qv = model.item_offset(v);
  for (std::size_t k = 0; k < d; ++k) {
    grad[pu + k] += coeff * params[qv + k];
    grad[qv + k] += coeff * params[pu + k];
  }
  grad[model.user_bias_offset(u)] += coeff;
  grad[model.item_bias_offset(v)] += coeff;
  grad[model.global_bias_offset()] += coeff;
}

void accumulate_bce_gradient(const MFModel& model, std::span<const InteractionRecord> batch,
                             std::span<double> grad) {
  if (batch.empty()) throw UsageError("gradient needs a non-empty batch");
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const auto& r : batch) {
    check_ids(model, r);
    const double p = logistic(model.score_unchecked(r.user, r.item));
    accumulate_score_gradient(model, r.user, r.item, scale * (p - r.rating), grad);
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0,1)");
  }
  if (!(adam.epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
}

void AdamOptimizer::step(std::span<double> params, std::span<const double> grad,
                         const TrainConfig& config) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw TrainingError("non-finite gradient at parameter " + std::to_string(i) + " (value " +
                          std::to_string(grad[i]) + ") on optimizer step " + std::to_string(t_ + 1));
    }
  }
  ++t_;
  const auto& a = config.adam;
  const double bc1 = 1.0 - std::pow(a.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(a.beta2, static_cast<double>(t_));
  const double lr = config.learning_rate;
  const double decay = lr * config.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = a.beta1 * m_[i] + (1.0 - a.beta1) * grad[i];
    v_[i] = a.beta2 * v_[i] + (1.0 - a.beta2) * grad[i] * grad[i];
    const double m_hat = m_[i] / bc1;
    const double v_hat = v_[i] / bc2;
    if (decay != 0.0) params[i] -= decay * params[i];
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + a.epsilon);
  }
}

void grad_step(MFModel& model, AdamOptimizer& optimizer, std::span<const InteractionRecord> batch,
               const TrainConfig& config) {
  std::vector<double> grad(model.n_params(), 0.0);
  accumulate_bce_gradient(model, batch, grad);
  optimizer.step(model.params(), grad, config);
}

BatchIterator::BatchIterator(std::span<const InteractionRecord> records, std::size_t batch_size)
    : records_(records), batch_size_(batch_size), order_(records.size()) {
  if (batch_size == 0) throw UsageError("batch size must be positive");
  std::iota(order_.begin(), order_.end(), RecordIndex{0});
}

void BatchIterator::start_epoch(std::mt19937_64& rng) {
  std::iota(order_.begin(), order_.end(), RecordIndex{0});
  shuffle_in_place(order_, rng);
  pos_ = 0;
}

bool BatchIterator::next(std::vector<InteractionRecord>& batch) {
  batch.clear();
  if (pos_ >= order_.size()) return false;
  const std::size_t end = std::min(order_.size(), pos_ + batch_size_);
  for (; pos_ < end; ++pos_) batch.push_back(records_[order_[pos_]]);
  return true;
}

double rmse_of(const MFModel& model, std::span<const InteractionRecord> records) {
  if (records.empty()) throw MetricError("RMSE of an empty record set");
  double sq = 0.0;
  for (const auto& r : records) {
    const double e = logistic(model.score_unchecked(r.user, r.item)) - r.rating;
    sq += e * e;
  }
  return std::sqrt(sq / static_cast<double>(records.size()));
}

TrainResult train_mf(const MFModel& start, const PartitionedDataset& train,
                     const PartitionedDataset& validation, const TrainConfig& config) {
  config.validate();
  if (train.empty()) throw UsageError("training set is empty");
  TrainResult result;
  MFModel model = start;
  result.model = model;
  result.validation_rmse = rmse_of(model, validation.records());
  AdamOptimizer optimizer(model.n_params());
  Rng rng(config.seed);
  BatchIterator batches(train.records(), config.batch_size);
  std::vector<InteractionRecord> batch;
  std::vector<double> grad(model.n_params());
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    batches.start_epoch(rng);
    while (batches.next(batch)) {
      std::fill(grad.begin(), grad.end(), 0.0);
      accumulate_bce_gradient(model, batch, grad);
      optimizer.step(model.params(), grad, config);
    }
    result.epochs_run = epoch;
    const double val = rmse_of(model, validation.records());
    if (val < result.validation_rmse) {
      result.validation_rmse = val;
      result.model = model;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  return result;
}

PretrainResult pretrain(const PartitionedDataset& train, const PartitionedDataset& validation,
                        std::size_t dim, const TrainConfig& base, const PretrainGrid& grid) {
  if (grid.learning_rates.empty() || grid.weight_decays.empty()) {
    throw ConfigError("pretraining grid must be non-empty");
  }
  // Visit in (lr, decay) ascending order so strict improvement implements the
  // lexicographic tie-break.
  auto lrs = grid.learning_rates;
  auto wds = grid.weight_decays;
  std::sort(lrs.begin(), lrs.end());
  std::sort(wds.begin(), wds.end());
  const MFModel start = init_model(train.n_users(), train.n_items(), dim, base.seed);
  PretrainResult best;
  bool have = false;
  for (double lr : lrs) {
    for (double wd : wds) {
      TrainConfig cfg = base;
      cfg.learning_rate = lr;
      cfg.weight_decay = wd;
      auto run = train_mf(start, train, validation, cfg);
      best.runs.push_back({lr, wd, run.validation_rmse, run.best_epoch});
      if (!have || run.validation_rmse < best.validation_rmse) {
        have = true;
        best.model = std::move(run.model);
        best.learning_rate = lr;
        best.weight_decay = wd;
        best.validation_rmse = run.validation_rmse;
      }
    }
  }
  return best;
}

void save_checkpoint(const MFModel& model, std::uint64_t seed, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  std::fprintf(f, "drfo-mf-checkpoint v1\n%zu %zu %zu %llu\n", model.n_users(), model.n_items(),
               model.dim(), static_cast<unsigned long long>(seed));
  for (double x : model.params()) std::fprintf(f, "%a\n", x);
  const bool ok = std::ferror(f) == 0;
  std::fclose(f);
  if (!ok) throw IoError("failed writing checkpoint " + path.string());
}

MFModel load_checkpoint(const std::filesystem::path& path, std::uint64_t* seed) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "drfo-mf-checkpoint v1") {
    throw ParseError(path.string() + ": not a drfo-mf-checkpoint v1 file");
  }
  std::size_t n_users = 0, n_items = 0, dim = 0;
  unsigned long long stored_seed = 0;
  if (!std::getline(in, line) ||
      std::sscanf(line.c_str(), "%zu %zu %zu %llu", &n_users, &n_items, &dim, &stored_seed) != 4) {
    throw ParseError(path.string() + ": malformed dimension line");
  }
  MFModel model(n_users, n_items, dim);
  auto params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!std::getline(in, line)) throw ParseError(path.string() + ": truncated parameter list");
    char* end = nullptr;
    params[i] = std::strtod(line.c_str(), &end);
    if (end == line.c_str()) throw ParseError(path.string() + ": bad parameter on line " + std::to_string(i + 3));
  }
  if (seed) *seed = stored_seed;
  return model;
}

}  // namespace drfo
