#include "drfo/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "drfo/errors.hpp"
#include "drfo/metrics.hpp"
#include "drfo/random.hpp"

namespace drfo {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---- strict JSON reading ----

class Reader {
 public:
  Reader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!node_.contains(key)) return;
    const json& v = node_.at(key);
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<long long>() < 0)) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(field(key) + " has the wrong type (got " + v.dump() + ")");
    }
  }

  template <typename T>
  void read_list(const char* key, std::vector<T>& out) {
    seen_.insert(key);
    if (!node_.contains(key)) return;
    const json& v = node_.at(key);
    if (!v.is_array()) throw ConfigError(field(key) + " must be a list");
    std::vector<T> tmp;
    for (const auto& item : v) {
      if constexpr (std::is_same_v<T, double>) {
        if (!item.is_number()) throw ConfigError(field(key) + " must contain numbers");
      } else {
        if (!item.is_number_unsigned()) throw ConfigError(field(key) + " must contain non-negative integers");
      }
      tmp.push_back(item.get<T>());
    }
    out = std::move(tmp);
  }

  Reader child(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Reader(node_.contains(key) ? node_.at(key) : empty, field(key));
  }

  bool has(const char* key) const { return node_.contains(key); }
  const json& at(const char* key) {
    seen_.insert(key);
    return node_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : node_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown configuration field " + field(k.c_str()));
    }
  }

  std::string field(const char* key) const { return "'" + (path_.empty() ? "" : path_ + ".") + key + "'"; }

 private:
  std::string where() const { return path_.empty() ? "configuration root" : "'" + path_ + "'"; }

  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string projection_name(ProjectionMethod m) {
  return m == ProjectionMethod::Dykstra ? "dykstra" : "dual-bisection";
}

std::string weighting_name(RhoWeighting w) { return w == RhoWeighting::Interaction ? "interaction" : "user"; }

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string short_fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

void check_ratio(const std::string& field, double x) {
  if (!(x >= 0.0 && x <= 1.0)) throw ConfigError("'" + field + "' values must lie in [0,1] (got " + fmt(x) + ")");
}

}  // namespace

// ---------------------------------------------------------------- config

ExperimentConfig ExperimentConfig::desk_preset() {
  ExperimentConfig c;
  c.dataset.source = "synthetic-ml";
  c.dataset.n_users = 800;
  c.model.grid.learning_rates = {1e-2};
  c.model.grid.weight_decays = {1e-3, 1e-4, 1e-5};
  c.finetune.epochs = 15;
  c.finetune.lambda_grid = {0.1, 1.0, 10.0};
  c.finetune.cgl_thresholds = {0.6, 0.8};
  return c;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("'seeds' needs at least one seed");
  if (methods.empty()) throw ConfigError("'experiments.methods' needs at least one method");
  if (dataset.source != "synthetic-ml" && dataset.source != "synthetic-tenrec" && dataset.source != "movielens") {
    throw ConfigError("'dataset.source' must be synthetic-ml, synthetic-tenrec or movielens (got '" +
                      dataset.source + "')");
  }
  if (dataset.source != "movielens" && dataset.n_users < 10) throw ConfigError("'dataset.n_users' must be at least 10");
  const double total = dataset.split.train + dataset.split.validation + dataset.split.test;
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("'dataset.split' ratios must sum to 1");
  if (model.dim == 0) throw ConfigError("'model.dim' must be positive");
  if (model.batch_size == 0) throw ConfigError("'model.batch_size' must be positive");
  if (model.grid.learning_rates.empty() || model.grid.weight_decays.empty()) {
    throw ConfigError("'model.learning_rates' and 'model.weight_decays' must be non-empty");
  }
  if (finetune.epochs == 0) throw ConfigError("'finetune.epochs' must be positive");
  if (!(finetune.learning_rate > 0.0)) throw ConfigError("'finetune.learning_rate' must be positive");
  if (finetune.inner_steps == 0) throw ConfigError("'finetune.inner_steps' must be positive");
  if (finetune.refresh_interval == 0) throw ConfigError("'finetune.refresh_interval' must be positive");
  if (finetune.lambda_grid.empty()) throw ConfigError("'finetune.lambda_grid' must be non-empty");
  for (double l : finetune.lambda_grid) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("'finetune.lambda_grid' values must be non-negative");
  }
  if (finetune.cgl_thresholds.empty()) throw ConfigError("'finetune.cgl_thresholds' must be non-empty");
  for (double t : finetune.cgl_thresholds) check_ratio("finetune.cgl_thresholds", t);
  for (double r : retention_ratios) check_ratio("experiments.retention_ratios", r);
  for (double r : flip_ratios) check_ratio("experiments.flip_ratios", r);
  for (double r : forbid_fractions) check_ratio("experiments.forbid_fractions", r);
  check_ratio("experiments.noise_retention", noise_retention);
  check_ratio("experiments.forbid_retention", forbid_retention);
  check_ratio("reconstruction.holdout_fraction", reconstruction.holdout_fraction);
  if (!(rmse_budget > 0.0 && rmse_budget <= 1.0)) throw ConfigError("'experiments.rmse_budget' must lie in (0,1]");
  if (jobs == 0) throw ConfigError("'experiments.jobs' must be at least 1");
}

json to_json(const ExperimentConfig& c) {
  json methods = json::array();
  for (Method m : c.methods) methods.push_back(std::string(method_name(m)));
  return json{
      {"version", ExperimentConfig::kSchemaVersion},
      {"master_seed", c.master_seed},
      {"seeds", c.seeds},
      {"dataset",
       {{"source", c.dataset.source},
        {"ratings_path", c.dataset.ratings_path.string()},
        {"users_path", c.dataset.users_path.string()},
        {"n_users", c.dataset.n_users},
        {"synthetic_seed", c.dataset.synthetic_seed},
        {"rating_threshold", c.dataset.rating_threshold},
        {"user_k", c.dataset.user_k},
        {"item_k", c.dataset.item_k},
        {"split", {c.dataset.split.train, c.dataset.split.validation, c.dataset.split.test}}}},
      {"model",
       {{"dim", c.model.dim},
        {"batch_size", c.model.batch_size},
        {"pretrain_epochs", c.model.pretrain_epochs},
        {"patience", c.model.patience},
        {"learning_rates", c.model.grid.learning_rates},
        {"weight_decays", c.model.grid.weight_decays}}},
      {"finetune",
       {{"learning_rate", c.finetune.learning_rate},
        {"epochs", c.finetune.epochs},
        {"alpha_q", c.finetune.alpha_q},
        {"inner_steps", c.finetune.inner_steps},
        {"refresh_interval", c.finetune.refresh_interval},
        {"projection", projection_name(c.finetune.projection)},
        {"lambda_grid", c.finetune.lambda_grid},
        {"cgl_thresholds", c.finetune.cgl_thresholds},
        {"cgl_prior", c.finetune.cgl_prior == CglPrior::Uniform ? "uniform" : "confident-empirical"}}},
      {"reconstruction",
       {{"reg_strength", c.reconstruction.reg_strength},
        {"holdout_fraction", c.reconstruction.holdout_fraction},
        {"weighting", weighting_name(c.reconstruction.weighting)},
        {"rho_margin", c.reconstruction.rho_margin},
        {"relaxed", c.reconstruction.relaxed}}},
      {"experiments",
       {{"methods", methods},
        {"retention_ratios", c.retention_ratios},
        {"flip_ratios", c.flip_ratios},
        {"noise_retention", c.noise_retention},
        {"noise_rho_per_group", c.noise_rho_per_group},
        {"forbid_fractions", c.forbid_fractions},
        {"forbid_retention", c.forbid_retention},
        {"rmse_budget", c.rmse_budget},
        {"jobs", c.jobs}}},
  };
}

ExperimentConfig config_from_json(const json& doc) {
  ExperimentConfig c;
  Reader root(doc, "");
  int version = ExperimentConfig::kSchemaVersion;
  root.read("version", version);
  if (version != ExperimentConfig::kSchemaVersion) {
    throw ConfigError("unsupported configuration version " + std::to_string(version) + " (expected " +
                      std::to_string(ExperimentConfig::kSchemaVersion) + ")");
  }
  root.read("master_seed", c.master_seed);
  root.read_list("seeds", c.seeds);

  {
    Reader r = root.child("dataset");
    r.read("source", c.dataset.source);
    std::string ratings = c.dataset.ratings_path.string(), users = c.dataset.users_path.string();
    r.read("ratings_path", ratings);
    r.read("users_path", users);
    c.dataset.ratings_path = ratings;
    c.dataset.users_path = users;
    r.read("n_users", c.dataset.n_users);
    r.read("synthetic_seed", c.dataset.synthetic_seed);
    r.read("rating_threshold", c.dataset.rating_threshold);
    r.read("user_k", c.dataset.user_k);
    r.read("item_k", c.dataset.item_k);
    std::vector<double> split;
    r.read_list("split", split);
    if (!split.empty()) {
      if (split.size() != 3) throw ConfigError("'dataset.split' must have three ratios");
      c.dataset.split = {split[0], split[1], split[2]};
    }
    r.finish();
  }
  {
    Reader r = root.child("model");
    r.read("dim", c.model.dim);
    r.read("batch_size", c.model.batch_size);
    r.read("pretrain_epochs", c.model.pretrain_epochs);
    r.read("patience", c.model.patience);
    r.read_list("learning_rates", c.model.grid.learning_rates);
    r.read_list("weight_decays", c.model.grid.weight_decays);
    r.finish();
  }
  {
    Reader r = root.child("finetune");
    r.read("learning_rate", c.finetune.learning_rate);
    r.read("epochs", c.finetune.epochs);
    r.read("alpha_q", c.finetune.alpha_q);
    r.read("inner_steps", c.finetune.inner_steps);
    r.read("refresh_interval", c.finetune.refresh_interval);
    std::string projection = projection_name(c.finetune.projection);
    r.read("projection", projection);
    if (projection == "dykstra") {
      c.finetune.projection = ProjectionMethod::Dykstra;
    } else if (projection == "dual-bisection") {
      c.finetune.projection = ProjectionMethod::DualBisection;
    } else {
      throw ConfigError("'finetune.projection' must be dual-bisection or dykstra");
    }
    r.read_list("lambda_grid", c.finetune.lambda_grid);
    r.read_list("cgl_thresholds", c.finetune.cgl_thresholds);
    std::string prior = "confident-empirical";
    r.read("cgl_prior", prior);
    if (prior == "uniform") {
      c.finetune.cgl_prior = CglPrior::Uniform;
    } else if (prior == "confident-empirical") {
      c.finetune.cgl_prior = CglPrior::ConfidentEmpirical;
    } else {
      throw ConfigError("'finetune.cgl_prior' must be confident-empirical or uniform");
    }
    r.finish();
  }
  {
    Reader r = root.child("reconstruction");
    r.read("reg_strength", c.reconstruction.reg_strength);
    r.read("holdout_fraction", c.reconstruction.holdout_fraction);
    std::string weighting = weighting_name(c.reconstruction.weighting);
    r.read("weighting", weighting);
    if (weighting == "user") {
      c.reconstruction.weighting = RhoWeighting::User;
    } else if (weighting == "interaction") {
      c.reconstruction.weighting = RhoWeighting::Interaction;
    } else {
      throw ConfigError("'reconstruction.weighting' must be user or interaction");
    }
    r.read("rho_margin", c.reconstruction.rho_margin);
    r.read("relaxed", c.reconstruction.relaxed);
    r.finish();
  }
  {
    Reader r = root.child("experiments");
    if (r.has("methods")) {
      const json& list = r.at("methods");
      if (!list.is_array()) throw ConfigError("'experiments.methods' must be a list");
      c.methods.clear();
      for (const auto& m : list) {
        if (!m.is_string()) throw ConfigError("'experiments.methods' must contain method names");
        try {
          c.methods.push_back(parse_method(m.get<std::string>()));
        } catch (const UsageError& e) {
          throw ConfigError(std::string("'experiments.methods': ") + e.what());
        }
      }
    }
    r.read_list("retention_ratios", c.retention_ratios);
    r.read_list("flip_ratios", c.flip_ratios);
    r.read("noise_retention", c.noise_retention);
    r.read("noise_rho_per_group", c.noise_rho_per_group);
    r.read_list("forbid_fractions", c.forbid_fractions);
    r.read("forbid_retention", c.forbid_retention);
    r.read("rmse_budget", c.rmse_budget);
    r.read("jobs", c.jobs);
    r.finish();
  }
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open configuration file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("configuration file " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(doc);
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("override '" + assignment + "' must look like key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw UsageError("override key '" + key + "' has an empty component");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw UsageError("override key '" + key + "' descends into a non-object");
    start = dot + 1;
  }
}

// ---------------------------------------------------------------- selection

Selection select_model(std::span<const SelectionCandidate> candidates, double baseline_rmse, double budget) {
  if (candidates.empty()) throw UsageError("model selection needs at least one checkpoint");
  if (!(budget > 0.0 && budget <= 1.0)) throw UsageError("RMSE budget must lie in (0,1]");
  Selection out;
  out.threshold = baseline_rmse / budget;
  auto dp_key = [](double dp) { return std::isnan(dp) ? std::numeric_limits<double>::infinity() : dp; };
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    if (!(c.validation_rmse <= out.threshold)) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& b = candidates[*best];
    const double dc = dp_key(c.validation_dp), db = dp_key(b.validation_dp);
    if (dc < db || (dc == db && c.validation_rmse < b.validation_rmse)) best = i;
  }
  if (best) {
    out.index = *best;
    return out;
  }
  out.flagged = true;
  out.index = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    if (candidates[i].validation_rmse < candidates[out.index].validation_rmse) out.index = i;
  }
  return out;
}

// ---------------------------------------------------------------- data

RatingTable load_dataset(const DatasetSpec& spec) {
  if (spec.source == "movielens") {
    if (spec.ratings_path.empty() || spec.users_path.empty()) {
      throw ConfigError("'dataset.ratings_path' and 'dataset.users_path' are required for movielens");
    }
    auto raw = parse_movielens(spec.ratings_path, spec.users_path);
    return k_core_filter(binarize(raw, spec.rating_threshold), spec.user_k, spec.item_k);
  }
  const auto cfg = spec.source == "synthetic-tenrec" ? SyntheticConfig::tenrec_like(spec.n_users, spec.synthetic_seed)
                                                      : SyntheticConfig::movielens_like(spec.n_users, spec.synthetic_seed);
  return generate_synthetic(cfg);
}

CheckpointEvaluator make_evaluator(const SplitDataset& masked, bool oracle_view) {
  struct View {
    std::vector<InteractionRecord> val, test;
    std::vector<double> val_labels, test_labels;
    std::vector<RecordIndex> val_dp_index;
    std::vector<std::int8_t> val_dp_attr, test_attr, true_attr;
    std::vector<bool> known_user_vec;
    std::unique_ptr<bool[]> known_user;
  };
  auto view = std::make_shared<View>();
  const auto val = masked.validation.records();
  const auto test = masked.test.records();
  view->val.assign(val.begin(), val.end());
  view->test.assign(test.begin(), test.end());
  view->true_attr = masked.true_attr;
  for (RecordIndex i = 0; i < val.size(); ++i) {
    view->val_labels.push_back(val[i].rating);
    if (oracle_view || masked.user_status[val[i].user].is_known()) {
      view->val_dp_index.push_back(i);
      view->val_dp_attr.push_back(masked.true_attr[val[i].user]);
    }
  }
  for (const auto& r : test) {
    view->test_labels.push_back(r.rating);
    view->test_attr.push_back(masked.true_attr[r.user]);
  }
  const std::size_t n = masked.n_users();
  view->known_user = std::make_unique<bool[]>(n);
  for (std::size_t u = 0; u < n; ++u) view->known_user[u] = masked.user_status[u].is_known();

  return [view, n](const MFModel& model) {
    CheckpointMetrics m;
    const auto vp = predict_all(model, view->val);
    m.validation_rmse = rmse(vp, view->val_labels);
    std::vector<double> dp_pred;
    dp_pred.reserve(view->val_dp_index.size());
    for (RecordIndex i : view->val_dp_index) dp_pred.push_back(vp[i]);
    const bool both = std::count(view->val_dp_attr.begin(), view->val_dp_attr.end(), 0) > 0 &&
                      std::count(view->val_dp_attr.begin(), view->val_dp_attr.end(), 1) > 0;
    m.validation_dp = both ? mad(dp_pred, view->val_dp_attr) : kNaN;
    const auto tp = predict_all(model, view->test);
    m.test_rmse = rmse(tp, view->test_labels);
    m.test_dp = mad(tp, view->test_attr);
    m.test_deviation = group_deviation_report(tp, view->test, view->true_attr,
                                              std::span<const bool>(view->known_user.get(), n));
    return m;
  };
}

InjectedNoise inject_flips(const SplitDataset& masked, double flip_ratio, std::uint64_t seed) {
  if (!(flip_ratio >= 0.0 && flip_ratio <= 1.0)) throw ConfigError("flip ratio must lie in [0,1]");
  InjectedNoise out;
  out.users.assign(masked.n_users(), UserReconstruction{});
  std::array<std::vector<UserId>, 2> missing;
  for (UserId u = 0; u < masked.n_users(); ++u) {
    if (masked.user_status[u].is_known()) continue;
    out.users[u] = {masked.true_attr[u], 1.0};
    missing[masked.true_attr[u]].push_back(u);
  }
  const std::size_t n_missing = missing[0].size() + missing[1].size();
  const auto k = static_cast<std::size_t>(std::llround(flip_ratio * static_cast<double>(n_missing) / 2.0));
  for (int s = 0; s < 2; ++s) {
    if (k > missing[s].size()) {
      throw ConfigError("flip ratio " + fmt(flip_ratio) + " needs " + std::to_string(k) +
                        " flips per group but group " + std::to_string(s) + " has only " +
                        std::to_string(missing[s].size()) + " users with missing attributes");
    }
  }
  Rng rng(seed);
  for (int s = 0; s < 2; ++s) {
    auto pool = missing[s];
    shuffle_in_place(pool, rng);
    for (std::size_t j = 0; j < k; ++j) out.users[pool[j]].s_hat = static_cast<std::int8_t>(1 - s);
    out.per_group_rate[s] = missing[s].empty() ? 0.0 : static_cast<double>(k) / static_cast<double>(missing[s].size());
  }
  out.flips_per_group = k;
  return out;
}

// ---------------------------------------------------------------- reports

namespace {

const std::vector<std::string> kWideHeader = {"experiment", "method", "scenario",  "value",     "seed",
                                              "dp",         "rmse",   "dev_s0_known", "dev_s0_unknown",
                                              "dev_s1_known", "dev_s1_unknown", "lambda", "tau", "epoch",
                                              "flagged", "error"};

int method_rank(const std::string& name) {
  try {
    return static_cast<int>(parse_method(name));
  } catch (const UsageError&) {
    return 100;
  }
}

std::string sanitize(std::string s) {
  for (char& c : s) {
    if (c == '\t' || c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

double parse_double(const std::string& s, std::size_t line) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ParseError("report line " + std::to_string(line) + ": '" + s + "' is not a number");
  }
  return v;
}

bool same_double(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

}  // namespace

bool operator==(const ReportRow& a, const ReportRow& b) {
  for (std::size_t k = 0; k < 4; ++k) {
    if (!same_double(a.deviation[k], b.deviation[k])) return false;
  }
  return a.experiment == b.experiment && a.method == b.method && a.scenario == b.scenario &&
         same_double(a.value, b.value) && a.seed == b.seed && same_double(a.dp, b.dp) &&
         same_double(a.rmse, b.rmse) && same_double(a.lambda, b.lambda) && same_double(a.tau, b.tau) &&
         a.epoch == b.epoch && a.flagged == b.flagged && a.error == b.error;
}

void ReportTable::sort() {
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    if (a.experiment != b.experiment) return a.experiment < b.experiment;
    const int ra = method_rank(a.method), rb = method_rank(b.method);
    if (ra != rb) return ra < rb;
    if (a.method != b.method) return a.method < b.method;
    if (a.scenario != b.scenario) return a.scenario < b.scenario;
    if (a.value != b.value) return a.value < b.value;
    return a.seed < b.seed;
  });
}

void emit_report(const ReportTable& table, std::ostream& out, ReportFormat format) {
  if (format == ReportFormat::Wide) {
    for (std::size_t k = 0; k < kWideHeader.size(); ++k) out << (k ? "\t" : "") << kWideHeader[k];
    out << '\n';
    for (const auto& r : table.rows) {
      out << sanitize(r.experiment) << '\t' << sanitize(r.method) << '\t' << sanitize(r.scenario) << '\t'
          << fmt(r.value) << '\t' << r.seed << '\t' << fmt(r.dp) << '\t' << fmt(r.rmse);
      for (double d : r.deviation) out << '\t' << fmt(d);
      out << '\t' << fmt(r.lambda) << '\t' << fmt(r.tau) << '\t' << r.epoch << '\t' << (r.flagged ? 1 : 0) << '\t'
          << sanitize(r.error) << '\n';
    }
    return;
  }
  out << "experiment\tmethod\tscenario\tvalue\tseed\tmetric\tmetric_value\n";
  static const std::array<const char*, 6> names = {"dp",           "rmse",         "dev_s0_known",
                                                   "dev_s0_unknown", "dev_s1_known", "dev_s1_unknown"};
  for (const auto& r : table.rows) {
    const std::array<double, 6> values = {r.dp, r.rmse, r.deviation[0], r.deviation[1], r.deviation[2], r.deviation[3]};
    for (std::size_t k = 0; k < names.size(); ++k) {
      out << sanitize(r.experiment) << '\t' << sanitize(r.method) << '\t' << sanitize(r.scenario) << '\t'
          << fmt(r.value) << '\t' << r.seed << '\t' << names[k] << '\t' << fmt(values[k]) << '\n';
    }
  }
}

void emit_report(const ReportTable& table, const std::filesystem::path& path, ReportFormat format) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report " + path.string());
  emit_report(table, out, format);
  if (!out) throw IoError("failed writing report " + path.string());
}

ReportTable parse_report(std::istream& in) {
  ReportTable table;
  std::string line;
  if (!std::getline(in, line)) throw ParseError("report is empty (no header)");
  if (split_tabs(line) != kWideHeader) throw ParseError("report header does not match the wide format");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != kWideHeader.size()) {
      throw ParseError("report line " + std::to_string(line_no) + " has " + std::to_string(f.size()) +
                       " fields, expected " + std::to_string(kWideHeader.size()));
    }
    ReportRow r;
    r.experiment = f[0];
    r.method = f[1];
    r.scenario = f[2];
    r.value = parse_double(f[3], line_no);
    r.seed = std::stoull(f[4]);
    r.dp = parse_double(f[5], line_no);
    r.rmse = parse_double(f[6], line_no);
    for (std::size_t k = 0; k < 4; ++k) r.deviation[k] = parse_double(f[7 + k], line_no);
    r.lambda = parse_double(f[11], line_no);
    r.tau = parse_double(f[12], line_no);
    r.epoch = std::stoull(f[13]);
    r.flagged = f[14] == "1";
    r.error = f[15];
    table.rows.push_back(std::move(r));
  }
  return table;
}

ReportTable parse_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open report " + path.string());
  return parse_report(in);
}

CellMean mean_over_seeds(const ReportTable& table, const std::string& experiment, const std::string& method,
                         double value) {
  CellMean m;
  for (const auto& r : table.rows) {
    if (r.experiment != experiment || r.method != method || r.value != value || !r.error.empty()) continue;
    m.dp += r.dp;
    m.rmse += r.rmse;
    ++m.n;
  }
  if (m.n > 0) {
    m.dp /= static_cast<double>(m.n);
    m.rmse /= static_cast<double>(m.n);
  } else {
    m.dp = m.rmse = kNaN;
  }
  return m;
}

// ---------------------------------------------------------------- sweeps

namespace {

std::string seed_tag(const char* stream, std::uint64_t seed, double scenario = -1.0) {
  std::string tag = std::string(stream) + "/" + std::to_string(seed);
  if (scenario >= 0.0) tag += "/" + short_fmt(scenario);
  return tag;
}

// One seed's shared state: split, pretrained model and the BasicMF / Oracle
// runs, which do not depend on the attribute scenario.
struct Replicate {
  std::uint64_t seed = 0;
  SplitDataset split;
  MFModel pretrained;
  FairTrainConfig finetune;
  double baseline_rmse = 0.0;
  MFModel basic_model;
  ReportRow basic_row;
  std::optional<MFModel> oracle_model;
  ReportRow oracle_row;
};

struct RunCandidate {
  double lambda = 0.0, tau = 0.0;
  Checkpoint checkpoint;
};

ReportRow row_from(const RunCandidate& c, bool flagged) {
  ReportRow row;
  row.dp = c.checkpoint.metrics.test_dp;
  row.rmse = c.checkpoint.metrics.test_rmse;
  const auto& dev = c.checkpoint.metrics.test_deviation.deviation;
  row.deviation = {dev[0][0].value_or(kNaN), dev[0][1].value_or(kNaN), dev[1][0].value_or(kNaN),
                   dev[1][1].value_or(kNaN)};
  row.lambda = c.lambda;
  row.tau = c.tau;
  row.epoch = c.checkpoint.epoch;
  row.flagged = flagged;
  return row;
}

std::size_t select_from(const std::vector<RunCandidate>& pool, double baseline_rmse, double budget, bool& flagged) {
  std::vector<SelectionCandidate> cands;
  for (const auto& c : pool) cands.push_back({c.checkpoint.metrics.validation_rmse, c.checkpoint.metrics.validation_dp});
  const auto sel = select_model(cands, baseline_rmse, budget);
  flagged = sel.flagged;
  return sel.index;
}

FairTrainConfig finetune_config(const ExperimentConfig& cfg, double weight_decay, std::uint64_t seed) {
  FairTrainConfig f;
  f.optimizer.learning_rate = cfg.finetune.learning_rate;
  f.optimizer.weight_decay = weight_decay;
  f.optimizer.batch_size = cfg.model.batch_size;
  f.optimizer.max_epochs = cfg.finetune.epochs;
  f.optimizer.patience = cfg.finetune.epochs;
  f.optimizer.seed = seed;
  f.alpha_q = cfg.finetune.alpha_q;
  f.inner_steps = cfg.finetune.inner_steps;
  f.refresh_interval = cfg.finetune.refresh_interval;
  f.projection.method = cfg.finetune.projection;
  f.keep_log = false;
  return f;
}

// Retains the model of the selected checkpoint so that scenario-specific
// group deviations can be recomputed for the scenario-independent methods.
std::pair<ReportRow, MFModel> select_and_keep(std::vector<RunCandidate>& pool, double baseline_rmse, double budget) {
  bool flagged = false;
  const auto idx = select_from(pool, baseline_rmse, budget, flagged);
  ReportRow row = row_from(pool[idx], flagged);
  return {row, *pool[idx].checkpoint.model};
}

Replicate prepare_replicate(const RatingTable& table, const ExperimentConfig& cfg, std::uint64_t seed,
                            const ProgressSink& progress) {
  Replicate rep;
  rep.seed = seed;
  rep.split = split(table, cfg.dataset.split, derive_seed(cfg.master_seed, seed_tag("split", seed)));

  TrainConfig base;
  base.batch_size = cfg.model.batch_size;
  base.max_epochs = cfg.model.pretrain_epochs;
  base.patience = cfg.model.patience;
  base.seed = derive_seed(cfg.master_seed, seed_tag("pretrain", seed));
  const auto pre = pretrain(rep.split.train, rep.split.validation, cfg.model.dim, base, cfg.model.grid);
  rep.pretrained = pre.model;
  rep.finetune = finetune_config(cfg, pre.weight_decay, derive_seed(cfg.master_seed, seed_tag("finetune", seed)));
  if (progress) {
    progress("seed " + std::to_string(seed) + ": pretrained (lr " + short_fmt(pre.learning_rate) + ", decay " +
             short_fmt(pre.weight_decay) + ", val rmse " + short_fmt(pre.validation_rmse) + ")");
  }

  auto ft = rep.finetune;
  ft.keep_models = true;
  const auto oracle_eval = make_evaluator(rep.split, true);
  {
    auto run = train_basic_mf(rep.pretrained, rep.split.train, ft, oracle_eval);
    std::vector<RunCandidate> pool;
    for (auto& cp : run.checkpoints) pool.push_back({0.0, 0.0, std::move(cp)});
    std::size_t best = 0;
    for (std::size_t i = 1; i < pool.size(); ++i) {
      if (pool[i].checkpoint.metrics.validation_rmse < pool[best].checkpoint.metrics.validation_rmse) best = i;
    }
    rep.baseline_rmse = pool[best].checkpoint.metrics.validation_rmse;
    rep.basic_row = row_from(pool[best], false);
    rep.basic_model = *pool[best].checkpoint.model;
  }
  if (std::find(cfg.methods.begin(), cfg.methods.end(), Method::Oracle) != cfg.methods.end()) {
    std::vector<RunCandidate> pool;
    for (double lambda : cfg.finetune.lambda_grid) {
      auto run = train_oracle(rep.pretrained, rep.split.train, rep.split.true_attr, {lambda, lambda}, ft, oracle_eval);
      for (auto& cp : run.checkpoints) pool.push_back({lambda, 0.0, std::move(cp)});
    }
    auto [row, model] = select_and_keep(pool, rep.baseline_rmse, cfg.rmse_budget);
    rep.oracle_row = row;
    rep.oracle_model = std::move(model);
  }
  return rep;
}

// A training scenario for the attribute-dependent methods.
struct Scenario {
  std::string experiment, name;
  double value = 0.0;
  SplitDataset masked;
  std::vector<UserReconstruction> users;  // ŝ of missing users
  std::array<double, 2> rho{};
  bool forbidden_mode = false;
};

// Recomputes scenario-specific test group deviations for a fixed model.
void fill_deviation(ReportRow& row, const MFModel& model, const SplitDataset& masked) {
  const auto test = masked.test.records();
  const auto pred = predict_all(model, test);
  std::unique_ptr<bool[]> known(new bool[masked.n_users()]);
  for (std::size_t u = 0; u < masked.n_users(); ++u) known[u] = masked.user_status[u].is_known();
  const auto dev =
      group_deviation_report(pred, test, masked.true_attr, std::span<const bool>(known.get(), masked.n_users())).deviation;
  row.deviation = {dev[0][0].value_or(kNaN), dev[0][1].value_or(kNaN), dev[1][0].value_or(kNaN),
                   dev[1][1].value_or(kNaN)};
}

ReportRow run_cell(const Replicate& rep, Method method, const Scenario& sc, const ExperimentConfig& cfg) {
  ReportRow row;
  if (method == Method::BasicMF || method == Method::Oracle) {
    row = method == Method::BasicMF ? rep.basic_row : rep.oracle_row;
    fill_deviation(row, method == Method::BasicMF ? rep.basic_model : *rep.oracle_model, sc.masked);
  } else {
    const auto evaluator = make_evaluator(sc.masked, false);
    const auto& train = sc.masked.train;
    std::vector<RunCandidate> pool;
    auto collect = [&](FairTrainResult run, double lambda, double tau) {
      for (auto& cp : run.checkpoints) pool.push_back({lambda, tau, std::move(cp)});
    };
    for (double lambda : cfg.finetune.lambda_grid) {
      const std::array<double, 2> lam = {lambda, lambda};
      switch (method) {
        case Method::RegK:
          collect(train_regk(rep.pretrained, train, lam, rep.finetune, evaluator), lambda, 0.0);
          break;
        case Method::FLrSA:
          collect(train_flrsa(rep.pretrained, attach_reconstruction(train, sc.users), lam, rep.finetune, evaluator,
                              sc.forbidden_mode),
                  lambda, 0.0);
          break;
        case Method::DRFO: {
          DROConfig dro;
          dro.lambda = lam;
          dro.train = rep.finetune;
          dro.forbidden_extension = sc.forbidden_mode;
          collect(drfo_train(rep.pretrained, attach_reconstruction(train, sc.users), sc.rho, dro, evaluator), lambda,
                  0.0);
          break;
        }
        case Method::CGL:
          for (double tau : cfg.finetune.cgl_thresholds) {
            const auto seed = derive_seed(cfg.master_seed, seed_tag("cgl", rep.seed, sc.value) + "/" + sc.experiment +
                                                               "/" + short_fmt(tau));
            collect(train_cgl(rep.pretrained, train, sc.users, sc.masked.user_status, tau, seed, lam, rep.finetune,
                              evaluator, cfg.finetune.cgl_prior),
                    lambda, tau);
          }
          break;
        default:
          break;
      }
    }
    bool flagged = false;
    const auto idx = select_from(pool, rep.baseline_rmse, cfg.rmse_budget, flagged);
    row = row_from(pool[idx], flagged);
  }
  row.experiment = sc.experiment;
  row.method = std::string(method_name(method));
  row.scenario = sc.name;
  row.value = sc.value;
  row.seed = rep.seed;
  return row;
}

struct Job {
  std::function<ReportRow()> run;
  std::string label;
};

ReportTable run_jobs(std::vector<Job>& jobs, std::size_t threads, const ProgressSink& progress) {
  ReportTable table;
  table.rows.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    while (true) {
      const std::size_t k = next.fetch_add(1);
      if (k >= jobs.size()) return;
      ReportRow row;
      try {
        row = jobs[k].run();
      } catch (const std::exception& e) {
        row.error = e.what();
        row.dp = row.rmse = kNaN;
        row.deviation = {kNaN, kNaN, kNaN, kNaN};
      }
      table.rows[k] = std::move(row);
      if (progress) {
        std::lock_guard<std::mutex> lock(log_mutex);
        const auto& r = table.rows[k];
        progress(jobs[k].label + (r.error.empty() ? " dp=" + short_fmt(r.dp) + " rmse=" + short_fmt(r.rmse)
                                                  : " FAILED: " + r.error));
      }
    }
  };
  const std::size_t n = std::min(threads, jobs.size());
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return table;
}

// Labels for a job whose row fields are filled in even if it throws.
Job make_job(std::shared_ptr<const Replicate> rep, Method method, std::shared_ptr<const Scenario> sc,
             const ExperimentConfig& cfg) {
  Job job;
  job.label = sc->experiment + " " + std::string(method_name(method)) + " " + sc->name + "=" + short_fmt(sc->value) +
              " seed=" + std::to_string(rep->seed);
  job.run = [rep, method, sc, &cfg]() {
    ReportRow row;
    try {
      row = run_cell(*rep, method, *sc, cfg);
    } catch (const std::exception& e) {
      row.error = e.what();
      row.dp = row.rmse = kNaN;
      row.deviation = {kNaN, kNaN, kNaN, kNaN};
    }
    row.experiment = sc->experiment;
    row.method = std::string(method_name(method));
    row.scenario = sc->name;
    row.value = sc->value;
    row.seed = rep->seed;
    return row;
  };
  return job;
}

SplitDataset mask_for(const Replicate& rep, const ExperimentConfig& cfg, double retention, double forbid) {
  MaskPlan plan;
  plan.retention_ratio = retention;
  plan.forbid_fraction = forbid;
  plan.seed = derive_seed(cfg.master_seed, seed_tag("mask", rep.seed, retention));
  return apply_mask_plan(rep.split, plan);
}

ReconstructionResult reconstruct_for(const Replicate& rep, const SplitDataset& masked, const ExperimentConfig& cfg,
                                     double retention) {
  ReconstructionConfig rc;
  rc.classifier.reg_strength = cfg.reconstruction.reg_strength;
  rc.holdout_fraction = cfg.reconstruction.holdout_fraction;
  rc.weighting = cfg.reconstruction.weighting;
  rc.rho_margin = cfg.reconstruction.rho_margin;
  rc.seed = derive_seed(cfg.master_seed, seed_tag("reconstruct", rep.seed, retention));
  rc.classifier.seed = rc.seed;
  auto result = reconstruct(masked, rc);
  if (cfg.reconstruction.relaxed) result.rho = with_relaxed_rho(result.rho);
  return result;
}

std::array<double, 2> radius_of(const RhoEstimate& rho) { return rho.relaxed ? *rho.relaxed : rho.rho; }

bool wants(const ExperimentConfig& cfg, Method m) {
  return std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end();
}

std::vector<std::shared_ptr<const Replicate>> prepare_all(const ExperimentConfig& cfg, const ProgressSink& progress) {
  cfg.validate();
  const auto table = load_dataset(cfg.dataset);
  if (progress) {
    progress("dataset: " + std::to_string(table.n_users()) + " users, " + std::to_string(table.n_items()) +
             " items, " + std::to_string(table.rows.size()) + " interactions");
  }
  std::vector<std::shared_ptr<const Replicate>> reps;
  for (std::uint64_t seed : cfg.seeds) {
    reps.push_back(std::make_shared<const Replicate>(prepare_replicate(table, cfg, seed, progress)));
  }
  return reps;
}

ReportTable finish(std::vector<Job>& jobs, const ExperimentConfig& cfg, const ProgressSink& progress) {
  auto table = run_jobs(jobs, cfg.jobs, progress);
  table.sort();
  return table;
}

}  // namespace

ReportTable run_retention_sweep(const ExperimentConfig& cfg, const ProgressSink& progress) {
  const auto reps = prepare_all(cfg, progress);
  std::vector<Job> jobs;
  for (const auto& rep : reps) {
    for (double retention : cfg.retention_ratios) {
      auto sc = std::make_shared<Scenario>();
      sc->experiment = "retention";
      sc->name = "retention";
      sc->value = retention;
      sc->masked = mask_for(*rep, cfg, retention, 0.0);
      const bool needs_recon = wants(cfg, Method::FLrSA) || wants(cfg, Method::CGL) || wants(cfg, Method::DRFO);
      if (needs_recon && retention < 1.0) {
        try {
          auto recon = reconstruct_for(*rep, sc->masked, cfg, retention);
          sc->users = std::move(recon.users);
          sc->rho = radius_of(recon.rho);
        } catch (const Error& e) {
          if (progress) progress("reconstruction failed at retention " + short_fmt(retention) + ": " + e.what());
        }
      } else {
        sc->users.assign(rep->split.n_users(), UserReconstruction{});
      }
      for (Method m : cfg.methods) jobs.push_back(make_job(rep, m, sc, cfg));
    }
  }
  return finish(jobs, cfg, progress);
}

ReportTable run_noise_injection(const ExperimentConfig& cfg, const ProgressSink& progress) {
  const auto reps = prepare_all(cfg, progress);
  std::vector<Job> jobs;
  for (const auto& rep : reps) {
    const auto masked = mask_for(*rep, cfg, cfg.noise_retention, 0.0);
    for (double ratio : cfg.flip_ratios) {
      auto sc = std::make_shared<Scenario>();
      sc->experiment = "noise";
      sc->name = "flip_ratio";
      sc->value = ratio;
      sc->masked = masked;
      try {
        auto noise = inject_flips(masked, ratio, derive_seed(cfg.master_seed, seed_tag("flip", rep->seed, ratio)));
        sc->users = std::move(noise.users);
        sc->rho = cfg.noise_rho_per_group ? noise.per_group_rate : std::array<double, 2>{ratio, ratio};
      } catch (const Error& e) {
        if (progress) progress("noise injection failed at flip ratio " + short_fmt(ratio) + ": " + e.what());
      }
      for (Method m : cfg.methods) {
        if (m == Method::RegK || m == Method::FLrSA || m == Method::DRFO || m == Method::BasicMF ||
            m == Method::Oracle) {
          jobs.push_back(make_job(rep, m, sc, cfg));
        }
      }
    }
  }
  return finish(jobs, cfg, progress);
}

ReportTable run_forbidden_sweep(const ExperimentConfig& cfg, const ProgressSink& progress) {
  const auto reps = prepare_all(cfg, progress);
  std::vector<Job> jobs;
  for (const auto& rep : reps) {
    for (double forbid : cfg.forbid_fractions) {
      auto sc = std::make_shared<Scenario>();
      sc->experiment = "forbidden";
      sc->name = "forbid_fraction";
      sc->value = forbid;
      sc->forbidden_mode = true;
      sc->masked = mask_for(*rep, cfg, cfg.forbid_retention, forbid);
      try {
        auto recon = reconstruct_for(*rep, sc->masked, cfg, cfg.forbid_retention);
        sc->users = std::move(recon.users);
        sc->rho = radius_of(recon.rho);
      } catch (const Error& e) {
        if (progress) progress("reconstruction failed at forbid fraction " + short_fmt(forbid) + ": " + e.what());
      }
      for (Method m : cfg.methods) jobs.push_back(make_job(rep, m, sc, cfg));
    }
  }
  return finish(jobs, cfg, progress);
}

}  // namespace drfo
