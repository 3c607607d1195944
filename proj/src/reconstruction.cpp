#include "drfo/reconstruction.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

#include "drfo/errors.hpp"
#include "drfo/mf.hpp"
#include "drfo/random.hpp"

namespace drfo {

std::vector<double> UserFeatures::dense(UserId u) const {
  std::vector<double> x(n_items, 0.0);
  for (ItemId v : items.at(u)) x[v] = 1.0;
  return x;
}

UserFeatures build_features(const PartitionedDataset& train) {
  if (train.empty()) throw UsageError("cannot build features from an empty training partition");
  UserFeatures f;
  f.n_items = train.n_items();
  f.items.resize(train.n_users());
  for (const auto& r : train.records()) f.items[r.user].push_back(r.item);
  for (auto& list : f.items) {
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
  }
  return f;
}

double AttrClassifier::probability(const UserFeatures& features, UserId u) const {
  double z = intercept;
  for (ItemId v : features.items.at(u)) z += weights[v];
  return logistic(z);
}

namespace {

struct LogisticProblem {
  const UserFeatures& features;
  std::span<const UserId> users;
  std::span<const std::int8_t> labels;
  double reg;

  std::size_t n() const { return users.size(); }

  // Objective and gradient at (w, b); grad has n_items + 1 entries (intercept last).
  double evaluate(std::span<const double> wb, std::span<double> grad) const {
    const std::size_t d = features.n_items;
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n());
    for (std::size_t i = 0; i < n(); ++i) {
      const auto& items = features.items[users[i]];
      double z = wb[d];
      for (ItemId v : items) z += wb[v];
      const double y = labels[i];
      loss += y ? std::log1p(std::exp(-std::abs(z))) + std::max(-z, 0.0)
                : std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0);
      const double r = (logistic(z) - y) * inv_n;
      for (ItemId v : items) grad[v] += r;
      grad[d] += r;
    }
    loss *= inv_n;
    double penalty = 0.0;
    for (std::size_t v = 0; v < d; ++v) {
      penalty += wb[v] * wb[v];
      grad[v] += reg * inv_n * wb[v];
    }
    return loss + 0.5 * reg * inv_n * penalty;
  }

  // Upper bound on the gradient's Lipschitz constant via power iteration on
  // the feature Gram matrix (intercept column included).
  double lipschitz() const {
    const std::size_t d = features.n_items;
    std::vector<double> x(d + 1, 1.0), y(d + 1);
    double lambda = 1.0;
    for (int it = 0; it < 50; ++it) {
      std::fill(y.begin(), y.end(), 0.0);
      for (std::size_t i = 0; i < n(); ++i) {
        const auto& items = features.items[users[i]];
        double z = x[d];
        for (ItemId v : items) z += x[v];
        for (ItemId v : items) y[v] += z;
        y[d] += z;
      }
      double norm = 0.0;
      for (double e : y) norm += e * e;
      norm = std::sqrt(norm);
      if (norm == 0.0) break;
      double xnorm = 0.0;
      for (double e : x) xnorm += e * e;
      lambda = norm / std::sqrt(xnorm);
      for (std::size_t k = 0; k <= d; ++k) x[k] = y[k] / norm;
    }
    return 1.1 * lambda / (4.0 * static_cast<double>(n())) + reg / static_cast<double>(n());
  }
};

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double e : v) s += e * e;
  return std::sqrt(s);
}

}  // namespace

AttrClassifier train_classifier(const UserFeatures& features, std::span<const UserId> users,
                                std::span<const std::int8_t> labels, const ClassifierOptions& options) {
  if (users.size() != labels.size()) throw UsageError("one label per training user is required");
  if (!(options.reg_strength >= 0.0)) throw ConfigError("classifier reg_strength must be non-negative");
  std::size_t positives = 0;
  for (auto y : labels) {
    if (y != 0 && y != 1) throw UsageError("classifier labels must be 0 or 1");
    positives += y;
  }
  if (users.empty() || positives == 0 || positives == labels.size()) {
    throw DegenerateDataError("attribute classifier needs both classes among the known users (got " +
                              std::to_string(positives) + " of " + std::to_string(labels.size()) +
                              " positive)");
  }
  LogisticProblem problem{features, users, labels, options.reg_strength};
  const std::size_t dim = features.n_items + 1;
  const double step = 1.0 / problem.lipschitz();

  // Nesterov acceleration with function-value restart.
  std::vector<double> x(dim, 0.0), x_prev(dim, 0.0), y(dim, 0.0), grad(dim);
  double t = 1.0;
  double f_prev = problem.evaluate(x, grad);
  AttrClassifier out;
  for (std::size_t it = 1; it <= options.max_iterations; ++it) {
    problem.evaluate(y, grad);
    x_prev = x;
    for (std::size_t k = 0; k < dim; ++k) x[k] = y[k] - step * grad[k];
    const double f = problem.evaluate(x, grad);
    out.iterations = it;
    out.gradient_norm = norm2(grad);
    if (out.gradient_norm <= options.tolerance) break;
    if (f > f_prev) {
      // Momentum overshot: restart from the previous iterate.
      t = 1.0;
      x = x_prev;
      y = x;
      continue;
    }
    f_prev = f;
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    const double beta = (t - 1.0) / t_next;
    for (std::size_t k = 0; k < dim; ++k) y[k] = x[k] + beta * (x[k] - x_prev[k]);
    t = t_next;
  }
  out.weights.assign(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(features.n_items));
  out.intercept = x[features.n_items];
  return out;
}

AttrPrediction attr_from_probability(double p) {
  AttrPrediction a;
  a.s_hat = p > 0.5 ? 1 : 0;
  a.confidence = std::max(p, 1.0 - p);
  return a;
}

std::vector<AttrPrediction> predict_attrs(const AttrClassifier& classifier, const UserFeatures& features,
                                          std::span<const UserId> users) {
  std::vector<AttrPrediction> out;
  out.reserve(users.size());
  for (UserId u : users) out.push_back(attr_from_probability(classifier.probability(features, u)));
  return out;
}

RhoEstimate rho_from_confusion(const std::array<std::array<double, 2>, 2>& confusion, double margin) {
  RhoEstimate est;
  est.confusion = confusion;
  for (int s = 0; s < 2; ++s) {
    const double total = confusion[s][0] + confusion[s][1];
    if (!(total > 0.0)) {
      throw DegenerateDataError("no held-out users with S=" + std::to_string(s) +
                                "; widen the held-out set or set rho=1 for this group");
    }
    est.rho[s] = std::clamp(confusion[s][1 - s] / total + margin, 0.0, 1.0);
  }
  return est;
}

RhoEstimate estimate_rho(const AttrClassifier& classifier, const UserFeatures& features,
                         std::span<const UserId> held_out, std::span<const std::int8_t> labels,
                         RhoWeighting weighting, double margin) {
  if (held_out.size() != labels.size()) throw UsageError("one label per held-out user is required");
  std::array<std::array<double, 2>, 2> confusion{};
  for (std::size_t i = 0; i < held_out.size(); ++i) {
    const auto pred = attr_from_probability(classifier.probability(features, held_out[i]));
    const double w = weighting == RhoWeighting::User
                         ? 1.0
                         : static_cast<double>(features.items[held_out[i]].size());
    confusion[labels[i]][pred.s_hat] += w;
  }
  return rho_from_confusion(confusion, margin);
}

double relaxed_rho(double rho, double prior_s, double prior_s_hat, double joint) {
  if (!(prior_s > 0.0 && prior_s < 1.0 && prior_s_hat > 0.0 && prior_s_hat < 1.0)) {
    throw UsageError("relaxed_rho needs priors strictly inside (0,1)");
  }
  const double k = joint / (prior_s * prior_s_hat);
  const double delta = prior_s_hat - prior_s;
  return std::min(1.0, rho + k * std::abs(delta));
}

RhoEstimate with_relaxed_rho(const RhoEstimate& estimate) {
  RhoEstimate out = estimate;
  const auto& c = estimate.confusion;
  const double total = c[0][0] + c[0][1] + c[1][0] + c[1][1];
  std::array<double, 2> relaxed{};
  for (int s = 0; s < 2; ++s) {
    const double p_s = (c[s][0] + c[s][1]) / total;
    const double p_hat = (c[0][s] + c[1][s]) / total;
    const double joint = c[s][s] / total;
    relaxed[s] = (p_hat > 0.0 && p_hat < 1.0) ? relaxed_rho(estimate.rho[s], p_s, p_hat, joint) : 1.0;
  }
  out.relaxed = relaxed;
  return out;
}

ReconstructedDataset attach_reconstruction(const PartitionedDataset& base,
                                           const std::vector<UserReconstruction>& users) {
  std::vector<std::int8_t> attr(base.size(), -1);
  std::vector<double> conf(base.size(), 1.0);
  for (RecordIndex i : base.index(Partition::Missing)) {
    const auto& u = users.at(base.record(i).user);
    attr[i] = u.s_hat;
    conf[i] = u.confidence;
  }
  return ReconstructedDataset(base, std::move(attr), std::move(conf));
}

ReconstructionResult reconstruct(const SplitDataset& split, const ReconstructionConfig& config) {
  const auto features = build_features(split.train);
  Rng rng(config.seed);

  // Stratified user-level holdout so both groups are represented in the
  // error-rate estimate.
  std::array<std::vector<UserId>, 2> known;
  for (UserId u = 0; u < split.n_users(); ++u) {
    if (split.user_status[u].is_known()) known[split.user_status[u].s].push_back(u);
  }
  std::vector<UserId> fit_users, held_users;
  for (int s = 0; s < 2; ++s) {
    shuffle_in_place(known[s], rng);
    auto n_hold = static_cast<std::size_t>(
        std::llround(config.holdout_fraction * static_cast<double>(known[s].size())));
    if (n_hold == 0 && known[s].size() >= 2) n_hold = 1;
    held_users.insert(held_users.end(), known[s].begin(), known[s].begin() + static_cast<std::ptrdiff_t>(n_hold));
    fit_users.insert(fit_users.end(), known[s].begin() + static_cast<std::ptrdiff_t>(n_hold), known[s].end());
  }
  std::sort(fit_users.begin(), fit_users.end());
  std::sort(held_users.begin(), held_users.end());
  auto labels_of = [&](const std::vector<UserId>& us) {
    std::vector<std::int8_t> y;
    for (UserId u : us) y.push_back(split.true_attr[u]);
    return y;
  };

  ReconstructionResult result;
  ClassifierOptions opts = config.classifier;
  result.classifier = train_classifier(features, fit_users, labels_of(fit_users), opts);
  result.rho = estimate_rho(result.classifier, features, held_users, labels_of(held_users),
                            config.weighting, config.rho_margin);

  result.users.assign(split.n_users(), UserReconstruction{});
  std::bernoulli_distribution coin(0.5);
  for (UserId u = 0; u < split.n_users(); ++u) {
    switch (split.user_status[u].state) {
      case AttrState::Known: break;
      case AttrState::MissingReconstructable: {
        const auto pred = attr_from_probability(result.classifier.probability(features, u));
        result.users[u] = {pred.s_hat, pred.confidence};
        break;
      }
      case AttrState::MissingForbidden:
        result.users[u] = {static_cast<std::int8_t>(coin(rng) ? 1 : 0), 0.5};
        break;
    }
  }
  result.train = attach_reconstruction(split.train, result.users);
  result.validation = attach_reconstruction(split.validation, result.users);
  return result;
}

void write_reconstruction_report(const ReconstructionResult& result, const SplitDataset& split,
                                 const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot write reconstruction report " + path.string());
  std::fprintf(f, "# drfo-reconstruction v1\n# rho0=%.17g\n# rho1=%.17g\n", result.rho.rho[0], result.rho.rho[1]);
  if (result.rho.relaxed) {
    std::fprintf(f, "# relaxed_rho0=%.17g\n# relaxed_rho1=%.17g\n", (*result.rho.relaxed)[0],
                 (*result.rho.relaxed)[1]);
  }
  std::fprintf(f, "user\tstatus\ts_hat\tconfidence\n");
  for (UserId u = 0; u < split.n_users(); ++u) {
    const auto st = split.user_status[u].state;
    const char* name = st == AttrState::Known ? "known" : st == AttrState::MissingForbidden ? "forbidden" : "missing";
    if (st == AttrState::Known) {
      std::fprintf(f, "%u\t%s\t\t\n", u, name);
    } else {
      std::fprintf(f, "%u\t%s\t%d\t%.17g\n", u, name, int(result.users[u].s_hat), result.users[u].confidence);
    }
  }
  std::fclose(f);
}

ReconstructionReport read_reconstruction_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open reconstruction report " + path.string());
  ReconstructionReport report;
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      double v = 0;
      if (std::sscanf(line.c_str(), "# rho0=%lf", &v) == 1) report.rho[0] = v;
      if (std::sscanf(line.c_str(), "# rho1=%lf", &v) == 1) report.rho[1] = v;
      if (std::sscanf(line.c_str(), "# relaxed_rho0=%lf", &v) == 1) report.relaxed.emplace()[0] = v;
      if (std::sscanf(line.c_str(), "# relaxed_rho1=%lf", &v) == 1) report.relaxed.value()[1] = v;
      continue;
    }
    if (!header) {
      if (line != "user\tstatus\ts_hat\tconfidence") throw ParseError(path.string() + ": unexpected header");
      header = true;
      continue;
    }
    std::istringstream fields(line);
    std::string user, status, s_hat, conf;
    std::getline(fields, user, '\t');
    std::getline(fields, status, '\t');
    std::getline(fields, s_hat, '\t');
    std::getline(fields, conf, '\t');
    const auto u = static_cast<std::size_t>(std::stoul(user));
    if (u != report.users.size()) throw ParseError(path.string() + " line " + std::to_string(line_no) + ": users out of order");
    UserReconstruction rec;
    if (status != "known") {
      if (s_hat.empty() || conf.empty()) throw ParseError(path.string() + " line " + std::to_string(line_no) + ": missing prediction");
      rec.s_hat = static_cast<std::int8_t>(std::stoi(s_hat));
      rec.confidence = std::stod(conf);
    }
    report.users.push_back(rec);
  }
  if (!header) throw ParseError(path.string() + ": no header line");
  return report;
}

}  // namespace drfo
