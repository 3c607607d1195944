#include "drfo/baselines.hpp"

#include <algorithm>
#include <cctype>
#include <random>
#include <string>

#include "drfo/errors.hpp"
#include "drfo/random.hpp"

namespace drfo {

namespace {
constexpr std::array<std::string_view, 6> kMethodNames = {"BasicMF", "Oracle", "RegK", "FLrSA", "CGL", "DRFO"};

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}
}  // namespace

Method parse_method(std::string_view name) {
  const std::string key = lower(name);
  for (std::size_t i = 0; i < kMethodNames.size(); ++i) {
    if (lower(kMethodNames[i]) == key) return static_cast<Method>(i);
  }
  throw UsageError("unknown method '" + std::string(name) + "' (expected basicmf, oracle, regk, flrsa, cgl or drfo)");
}

std::string_view method_name(Method m) { return kMethodNames.at(static_cast<std::size_t>(m)); }

void TrainerSpec::validate() const {
  for (double l : lambda) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("lambda must be finite and non-negative");
  }
  if (method == Method::CGL) {
    if (!cgl_threshold) throw ConfigError("CGL needs a confidence threshold");
    if (!(*cgl_threshold >= 0.0 && *cgl_threshold <= 1.0)) throw ConfigError("CGL threshold must lie in [0,1]");
  } else if (cgl_threshold) {
    throw ConfigError("a confidence threshold only applies to CGL");
  }
  if (method == Method::BasicMF && (lambda[0] != 0.0 || lambda[1] != 0.0)) {
    throw ConfigError("BasicMF takes no fairness weight");
  }
}

std::vector<GroupConstraint> oracle_constraints(const PartitionedDataset& train, std::span<const std::int8_t> true_attr,
                                                const std::array<double, 2>& lambda) {
  std::vector<GroupConstraint> out(2);
  for (int s = 0; s < 2; ++s) {
    out[s].s = s;
    out[s].lambda = lambda[s];
    out[s].eta_k = 1.0;
  }
  const auto records = train.records();
  for (RecordIndex i = 0; i < records.size(); ++i) {
    const int s = true_attr[records[i].user];
    if (s != 0 && s != 1) throw IntegrityError("true attribute must be 0 or 1");
    out[s].known.push_back(i);
  }
  std::erase_if(out, [](const GroupConstraint& c) { return c.known.empty(); });
  return out;
}

std::vector<GroupConstraint> regk_constraints(const PartitionedDataset& train, const std::array<double, 2>& lambda) {
  std::vector<GroupConstraint> out;
  for (int s = 0; s < 2; ++s) {
    const auto known = train.group_index(s);
    if (known.empty()) continue;
    GroupConstraint c;
    c.s = s;
    c.lambda = lambda[s];
    c.known.assign(known.begin(), known.end());
    c.eta_k = 1.0;
    out.push_back(std::move(c));
  }
  return out;
}

FairTrainResult train_basic_mf(const MFModel& start, const PartitionedDataset& train, const FairTrainConfig& config,
                               const CheckpointEvaluator& evaluator) {
  return train_fair(start, train, {}, config, evaluator);
}

FairTrainResult train_oracle(const MFModel& start, const PartitionedDataset& train,
                             std::span<const std::int8_t> true_attr, const std::array<double, 2>& lambda,
                             const FairTrainConfig& config, const CheckpointEvaluator& evaluator) {
  return train_fair(start, train, oracle_constraints(train, true_attr, lambda), config, evaluator);
}

FairTrainResult train_regk(const MFModel& start, const PartitionedDataset& train, const std::array<double, 2>& lambda,
                           const FairTrainConfig& config, const CheckpointEvaluator& evaluator) {
  return train_fair(start, train, regk_constraints(train, lambda), config, evaluator);
}

FairTrainResult train_flrsa(const MFModel& start, const ReconstructedDataset& train,
                            const std::array<double, 2>& lambda, const FairTrainConfig& config,
                            const CheckpointEvaluator& evaluator, bool omit_forbidden) {
  DROConfig dro;
  dro.lambda = lambda;
  dro.train = config;
  dro.omit_forbidden = omit_forbidden;
  return drfo_train(start, train, {0.0, 0.0}, dro, evaluator);
}

std::vector<UserReconstruction> cgl_replace(const std::vector<UserReconstruction>& users,
                                            std::span<const AttrStatus> status, double tau, std::uint64_t seed,
                                            CglPrior prior) {
  if (users.size() != status.size()) throw UsageError("one reconstruction per user is required");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("CGL threshold must lie in [0,1]");
  double p1 = 0.5;
  if (prior == CglPrior::ConfidentEmpirical) {
    std::size_t confident = 0, confident_ones = 0, all = 0, all_ones = 0;
    for (std::size_t u = 0; u < users.size(); ++u) {
      if (status[u].is_known()) continue;
      ++all;
      all_ones += users[u].s_hat == 1;
      if (users[u].confidence >= tau) {
        ++confident;
        confident_ones += users[u].s_hat == 1;
      }
    }
    if (confident > 0) {
      p1 = static_cast<double>(confident_ones) / static_cast<double>(confident);
    } else if (all > 0) {
      p1 = static_cast<double>(all_ones) / static_cast<double>(all);
    }
  }
  Rng rng(seed);
  std::bernoulli_distribution draw(p1);
  auto out = users;
  for (std::size_t u = 0; u < out.size(); ++u) {
    if (status[u].is_known() || out[u].confidence >= tau) continue;
    out[u].s_hat = draw(rng) ? 1 : 0;
  }
  return out;
}

FairTrainResult train_cgl(const MFModel& start, const PartitionedDataset& train,
                          const std::vector<UserReconstruction>& users, std::span<const AttrStatus> status,
                          double tau, std::uint64_t replacement_seed, const std::array<double, 2>& lambda,
                          const FairTrainConfig& config, const CheckpointEvaluator& evaluator, CglPrior prior) {
  const auto replaced = cgl_replace(users, status, tau, replacement_seed, prior);
  return train_flrsa(start, attach_reconstruction(train, replaced), lambda, config, evaluator);
}

}  // namespace drfo
