#include "drfo/dro.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>

#include "drfo/errors.hpp"
#include "drfo/random.hpp"

namespace drfo {

namespace {

double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

double mean_over(std::span<const double> predictions, std::span<const RecordIndex> index) {
  double sum = 0.0;
  for (RecordIndex i : index) sum += predictions[i];
  return sum / static_cast<double>(index.size());
}

void check_q(const GroupConstraint& constraint, std::span<const EmpiricalDistribution> q) {
  if (q.size() != constraint.parts.size()) throw UsageError("one distribution per adversarial part is required");
  for (std::size_t p = 0; p < q.size(); ++p) {
    if (q[p].size() != constraint.parts[p].records.size()) {
      throw UsageError("distribution and adversarial part differ in size");
    }
  }
}

// d(c_s)/d(R̂_i) scaled by `scale`, added into coef.
void add_coefficients(const GroupConstraint& constraint, std::span<const EmpiricalDistribution> q, double scale,
                      std::span<double> coef) {
  const double n = static_cast<double>(coef.size());
  for (double& c : coef) c -= scale / n;
  if (!constraint.known.empty()) {
    const double w = scale * constraint.eta_k / static_cast<double>(constraint.known.size());
    for (RecordIndex i : constraint.known) coef[i] += w;
  }
  for (std::size_t p = 0; p < constraint.parts.size(); ++p) {
    const auto& part = constraint.parts[p];
    const auto weights = q[p].weights();
    for (std::size_t j = 0; j < part.records.size(); ++j) coef[part.records[j]] += scale * part.eta * weights[j];
  }
}

void backprop(const MFModel& model, std::span<const InteractionRecord> records, std::span<const double> predictions,
              std::span<const double> coef, std::span<double> grad) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (coef[i] == 0.0) continue;
    const double p = predictions[i];
    accumulate_score_gradient(model, records[i].user, records[i].item, coef[i] * p * (1.0 - p), grad);
  }
}

double global_mean(std::span<const double> predictions) {
  double sum = 0.0;
  for (double p : predictions) sum += p;
  return sum / static_cast<double>(predictions.size());
}

}  // namespace

ConstraintValue fairness_term(std::span<const double> predictions, const GroupConstraint& constraint,
                              std::span<const EmpiricalDistribution> q, double mean) {
  check_q(constraint, q);
  double value = -mean;
  if (!constraint.known.empty()) value += constraint.eta_k * mean_over(predictions, constraint.known);
  for (std::size_t p = 0; p < constraint.parts.size(); ++p) {
    const auto& part = constraint.parts[p];
    const auto weights = q[p].weights();
    double expectation = 0.0;
    for (std::size_t j = 0; j < part.records.size(); ++j) expectation += weights[j] * predictions[part.records[j]];
    value += part.eta * expectation;
  }
  return {value, std::abs(value)};
}

std::vector<double> constraint_gradient_q(std::span<const double> predictions, const AdversarialPart& part,
                                          double sign, double lambda) {
  std::vector<double> g(part.records.size());
  const double scale = lambda * sign * part.eta;
  for (std::size_t j = 0; j < g.size(); ++j) g[j] = scale * predictions[part.records[j]];
  return g;
}

EmpiricalDistribution ascend_Q(const EmpiricalDistribution& q, std::span<const double> predictions,
                               const AdversarialPart& part, double sign, double lambda, double alpha,
                               const ProjectionOptions& projection) {
  if (q.size() != part.records.size()) throw UsageError("distribution and adversarial part differ in size");
  const auto g = constraint_gradient_q(predictions, part, sign, lambda);
  std::vector<double> raw(q.weights().begin(), q.weights().end());
  for (std::size_t j = 0; j < raw.size(); ++j) raw[j] += alpha * g[j];
  return project(raw, part.ball, projection);
}

void accumulate_fairness_gradient(const MFModel& model, std::span<const InteractionRecord> records,
                                  std::span<const double> predictions, const GroupConstraint& constraint,
                                  std::span<const EmpiricalDistribution> q, double sign, std::span<double> grad) {
  check_q(constraint, q);
  if (records.size() != predictions.size()) throw UsageError("one prediction per record is required");
  if (sign == 0.0 || constraint.lambda == 0.0) return;
  std::vector<double> coef(records.size(), 0.0);
  add_coefficients(constraint, q, constraint.lambda * sign, coef);
  backprop(model, records, predictions, coef, grad);
}

namespace {

bool has_ball(const GroupConstraint& c) {
  for (const auto& part : c.parts) {
    if (part.ball.radius > 0.0) return true;
  }
  return false;
}

}  // namespace

bool ascend_constraint(const GroupConstraint& c, std::vector<EmpiricalDistribution>& q,
                       std::span<const double> predictions, const FairTrainConfig& config) {
  if (!has_ball(c)) return false;
  const double mean = global_mean(predictions);
  const double sign = sign_of(fairness_term(predictions, c, q, mean).signed_value);
  auto step = [&](double direction) {
    auto moved = q;
    for (std::size_t p = 0; p < c.parts.size(); ++p) {
      if (c.parts[p].ball.radius <= 0.0) continue;
      moved[p] = ascend_Q(q[p], predictions, c.parts[p], direction, c.lambda, config.alpha_q, config.projection);
    }
    return moved;
  };
  if (config.ascent == AscentRule::Gradient) {
    if (sign == 0.0) return false;
    q = step(sign);
    return true;
  }
  const double first = sign == 0.0 ? 1.0 : sign;
  auto a = step(first);
  auto b = step(-first);
  const double la = fairness_term(predictions, c, a, mean).loss;
  const double lb = fairness_term(predictions, c, b, mean).loss;
  q = lb > la ? std::move(b) : std::move(a);
  return true;
}

void FairTrainConfig::validate() const {
  optimizer.validate();
  if (!(alpha_q >= 0.0) || !std::isfinite(alpha_q)) throw ConfigError("alpha_q must be a finite non-negative number");
  if (inner_steps == 0) throw ConfigError("inner_steps must be at least 1");
  if (refresh_interval == 0) throw ConfigError("refresh_interval must be at least 1");
}

FairTrainResult train_fair(const MFModel& start, const PartitionedDataset& train,
                           const std::vector<GroupConstraint>& constraints, const FairTrainConfig& config,
                           const CheckpointEvaluator& evaluator) {
  config.validate();
  if (train.empty()) throw UsageError("training set is empty");
  const auto records = train.records();
  for (const auto& c : constraints) {
    if (!std::isfinite(c.lambda) || c.lambda < 0.0) throw ConfigError("lambda must be finite and non-negative");
    for (RecordIndex i : c.known) {
      if (i >= records.size()) throw UsageError("constraint refers to a record outside the training set");
    }
    for (const auto& part : c.parts) {
      if (part.records.size() != part.ball.center.size()) throw UsageError("part center and records differ in size");
      for (RecordIndex i : part.records) {
        if (i >= records.size()) throw UsageError("constraint refers to a record outside the training set");
      }
    }
  }

  FairTrainResult result;
  MFModel model = start;
  const TrainConfig& opt_cfg = config.optimizer;
  AdamOptimizer optimizer(model.n_params());
  Rng rng(opt_cfg.seed);
  BatchIterator batches(records, opt_cfg.batch_size);
  std::vector<InteractionRecord> batch;
  std::vector<double> grad(model.n_params()), coef(records.size());

  bool any_fairness = false;
  for (const auto& c : constraints) any_fairness |= c.lambda != 0.0;

  for (const auto& c : constraints) {
    auto& qs = result.q.emplace_back();
    for (const auto& part : c.parts) qs.push_back(part.ball.center);
  }

  std::vector<double> predictions;
  if (any_fairness) predictions = predict_all(model, records);

  auto checkpoint = [&](std::size_t epoch, std::size_t iteration) {
    if (!evaluator) return;
    Checkpoint cp{epoch, iteration, evaluator(model), std::nullopt};
    if (config.keep_models) cp.model = model;
    result.checkpoints.push_back(std::move(cp));
  };
  checkpoint(0, 0);

  std::size_t iteration = 0;
  for (std::size_t epoch = 1; epoch <= opt_cfg.max_epochs; ++epoch) {
    batches.start_epoch(rng);
    while (batches.next(batch)) {
      std::fill(grad.begin(), grad.end(), 0.0);
      accumulate_bce_gradient(model, batch, grad);
      if (any_fairness) {
        const double mean = global_mean(predictions);
        std::fill(coef.begin(), coef.end(), 0.0);
        bool active = false;
        for (std::size_t k = 0; k < constraints.size(); ++k) {
          const auto& c = constraints[k];
          if (c.lambda == 0.0) continue;
          const double sign = sign_of(fairness_term(predictions, c, result.q[k], mean).signed_value);
          if (sign == 0.0) continue;
          add_coefficients(c, result.q[k], c.lambda * sign, coef);
          active = true;
        }
        if (active) backprop(model, records, predictions, coef, grad);
      }
      optimizer.step(model.params(), grad, opt_cfg);
      ++iteration;

      TrainingLogRow row;
      if (any_fairness) {
        if (iteration % config.refresh_interval == 0) predictions = predict_all(model, records);
        for (std::size_t k = 0; k < constraints.size(); ++k) {
          const auto& c = constraints[k];
          if (c.lambda == 0.0 || config.alpha_q == 0.0) continue;
          for (std::size_t step = 0; step < config.inner_steps; ++step) {
            if (!ascend_constraint(c, result.q[k], predictions, config)) break;
          }
        }
      }
      if (config.keep_log) {
        row.iteration = iteration;
        row.epoch = epoch;
        row.bce = bce_loss(model, batch);
        const double nan = std::numeric_limits<double>::quiet_NaN();
        row.constraint = {nan, nan};
        row.tv = {{{nan, nan}, {nan, nan}}};
        const double mean = any_fairness ? global_mean(predictions) : 0.0;
        for (std::size_t k = 0; k < constraints.size(); ++k) {
          const auto& c = constraints[k];
          if (c.s != 0 && c.s != 1) continue;
          if (any_fairness) row.constraint[c.s] = fairness_term(predictions, c, result.q[k], mean).signed_value;
          for (std::size_t p = 0; p < std::min<std::size_t>(2, c.parts.size()); ++p) {
            row.tv[p][c.s] = tv_distance(result.q[k][p], c.parts[p].ball.center);
          }
        }
        result.log.push_back(row);
      }
    }
    checkpoint(epoch, iteration);
  }
  result.model = std::move(model);
  return result;
}

void write_training_log(const std::vector<TrainingLogRow>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write training log " + path.string());
  out << "iteration\tepoch\tbce\tc0\tc1\ttv_a0\ttv_a1\ttv_b0\ttv_b1\n";
  out.precision(10);
  auto cell = [&](double x) -> std::ostream& {
    if (std::isnan(x)) return out << "";
    return out << x;
  };
  for (const auto& r : log) {
    out << r.iteration << '\t' << r.epoch << '\t' << r.bce << '\t';
    cell(r.constraint[0]) << '\t';
    cell(r.constraint[1]) << '\t';
    cell(r.tv[0][0]) << '\t';
    cell(r.tv[0][1]) << '\t';
    cell(r.tv[1][0]) << '\t';
    cell(r.tv[1][1]) << '\n';
  }
  if (!out) throw IoError("failed writing training log " + path.string());
}

std::vector<GroupConstraint> dro_constraints(const ReconstructedDataset& train, const std::array<double, 2>& rho,
                                             const DROConfig& config) {
  const auto& base = train.base();
  std::vector<Partition> missing_parts;
  if (config.omit_forbidden) {
    missing_parts = {Partition::Reconstructable};
  } else if (config.forbidden_extension) {
    missing_parts = {Partition::Reconstructable, Partition::Forbidden};
  } else {
    missing_parts = {Partition::Missing};
  }

  std::array<PartitionCounts, 2> counts{};
  for (int s = 0; s < 2; ++s) {
    counts[s].known = base.group_index(s).size();
    for (Partition p : missing_parts) {
      std::size_t n = 0;
      for (RecordIndex i : base.index(p)) n += train.attr(i) == s;
      (p == Partition::Forbidden ? counts[s].forbidden : counts[s].reconstructable) += n;
    }
  }
  const GroupWeights eta = eta_weights(counts);

  std::vector<GroupConstraint> out;
  for (int s = 0; s < 2; ++s) {
    GroupConstraint c;
    c.s = s;
    c.lambda = config.lambda[s];
    const auto known = base.group_index(s);
    c.known.assign(known.begin(), known.end());
    c.eta_k = eta.eta_k[s];
    for (Partition p : missing_parts) {
      const auto index = base.index(p);
      const double eta_p =
          p == Partition::Forbidden ? eta.eta_b[s] : (p == Partition::Reconstructable ? eta.eta_r[s] : eta.eta_m(s));
      // No record of group s here: eta_p is 0 and there is no center.
      if (index.empty() || eta_p == 0.0) continue;
      AdversarialPart part;
      part.partition = p;
      part.records.assign(index.begin(), index.end());
      const double radius = p == Partition::Forbidden ? config.forbidden_radius : rho[s];
      part.ball = AmbiguitySet(init_center(train, p, s), radius);
      part.eta = eta_p;
      c.parts.push_back(std::move(part));
    }
    out.push_back(std::move(c));
  }
  return out;
}

FairTrainResult drfo_train(const MFModel& start, const ReconstructedDataset& train, const std::array<double, 2>& rho,
                           const DROConfig& config, const CheckpointEvaluator& evaluator) {
  return train_fair(start, train.base(), dro_constraints(train, rho, config), config.train, evaluator);
}

}  // namespace drfo
