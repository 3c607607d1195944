// drfo: stage-by-stage command line for the fair-recommendation toolkit.
//
// Stages communicate only through files under the output directory:
//   ingest       dataset/{train,validation,test,users}.tsv
//   pretrain     pretrained.ckpt
//   reconstruct  reconstruction.tsv
//   train        model_<tag>.ckpt, log_<tag>.tsv, checkpoints_<tag>.tsv
//   evaluate     metrics_<tag>.tsv
//   sweep        report_<experiment>.tsv
// Every artifact gets a `<file>.manifest.json` with the resolved config and seed.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "drfo/baselines.hpp"
#include "drfo/errors.hpp"
#include "drfo/experiment.hpp"
#include "drfo/random.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace drfo;

namespace {

class MissingArtifact : public Error {
 public:
  explicit MissingArtifact(const std::string& what) : Error("missing-artifact", what) {}
};

int exit_code(const std::string& category) {
  if (category == "usage") return 2;
  if (category == "config") return 3;
  if (category == "parse" || category == "io" || category == "integrity") return 4;
  if (category == "missing-artifact") return 5;
  return 1;
}

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;
};

struct Context {
  ExperimentConfig config;
  json config_doc;
  fs::path out;
  std::uint64_t seed = 0;
};

Context resolve(const Common& c) {
  Context ctx;
  json doc = c.config_path.empty() ? to_json(ExperimentConfig::desk_preset()) : [&] {
    std::ifstream in(c.config_path);
    if (!in) throw IoError("cannot open config file '" + c.config_path + "'");
    try {
      return json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config file '" + c.config_path + "' is not valid JSON: " + e.what());
    }
  }();
  for (const auto& o : c.overrides) apply_override(doc, o);
  if (c.seed) doc["seeds"] = json::array({*c.seed});
  ctx.config = config_from_json(doc);
  ctx.config.validate();
  ctx.config_doc = to_json(ctx.config);
  ctx.seed = ctx.config.seeds.front();
  if (!c.out.empty()) {
    ctx.out = c.out;
  } else if (const char* env = std::getenv("DRFO_DATA_DIR"); env && *env) {
    ctx.out = env;
  } else {
    ctx.out = "drfo-out";
  }
  fs::create_directories(ctx.out);
  return ctx;
}

void write_manifest(const Context& ctx, const fs::path& artifact, const std::string& stage, json extra = json::object()) {
  json m;
  m["artifact"] = artifact.filename().string();
  m["stage"] = stage;
  m["seed"] = ctx.seed;
  m["config"] = ctx.config_doc;
  m["details"] = std::move(extra);
  std::ofstream out(artifact.string() + ".manifest.json");
  if (!out) throw IoError("cannot write manifest for '" + artifact.string() + "'");
  out << m.dump(2) << "\n";
}

json read_manifest(const fs::path& artifact) {
  std::ifstream in(artifact.string() + ".manifest.json");
  if (!in) throw MissingArtifact("manifest of '" + artifact.string() + "' is missing");
  return json::parse(in);
}

void require(const fs::path& path, const std::string& stage) {
  if (!fs::exists(path)) {
    throw MissingArtifact("'" + path.string() + "' not found; run `drfo " + stage + "` with the same --out first");
  }
}

fs::path dataset_dir(const Context& ctx) { return ctx.out / "dataset"; }

SplitDataset load_split(const Context& ctx) {
  require(dataset_dir(ctx) / "users.tsv", "ingest");
  return read_split_dataset(dataset_dir(ctx));
}

// ---------------------------------------------------------------- stages

void run_ingest(const Context& ctx, double retention, double forbid) {
  const auto table = load_dataset(ctx.config.dataset);
  const auto s = split(table, ctx.config.dataset.split,
                       derive_seed(ctx.config.master_seed, "split/" + std::to_string(ctx.seed)));
  MaskPlan plan;
  plan.retention_ratio = retention;
  plan.forbid_fraction = forbid;
  plan.seed = derive_seed(ctx.config.master_seed, "mask/" + std::to_string(ctx.seed));
  plan.validate();
  const auto masked = apply_mask_plan(s, plan);
  const auto dir = dataset_dir(ctx);
  write_split_dataset(masked, dir);
  write_manifest(ctx, dir / "users.tsv", "ingest",
                 {{"retention", retention}, {"forbid_fraction", forbid}, {"users", masked.n_users()},
                  {"items", masked.n_items()},
                  {"records", masked.train.size() + masked.validation.size() + masked.test.size()}});
  std::cout << "dataset: " << masked.n_users() << " users, " << masked.n_items() << " items -> " << dir.string()
            << "\n";
}

void run_pretrain(const Context& ctx) {
  const auto data = load_split(ctx);
  TrainConfig base;
  base.batch_size = ctx.config.model.batch_size;
  base.max_epochs = ctx.config.model.pretrain_epochs;
  base.patience = ctx.config.model.patience;
  base.seed = derive_seed(ctx.config.master_seed, "pretrain/" + std::to_string(ctx.seed));
  const auto pre = pretrain(data.train, data.validation, ctx.config.model.dim, base, ctx.config.model.grid);
  const auto path = ctx.out / "pretrained.ckpt";
  save_checkpoint(pre.model, base.seed, path);
  json runs = json::array();
  for (const auto& r : pre.runs) {
    runs.push_back({{"learning_rate", r.learning_rate},
                    {"weight_decay", r.weight_decay},
                    {"validation_rmse", r.validation_rmse},
                    {"best_epoch", r.best_epoch}});
  }
  write_manifest(ctx, path, "pretrain",
                 {{"learning_rate", pre.learning_rate},
                  {"weight_decay", pre.weight_decay},
                  {"validation_rmse", pre.validation_rmse},
                  {"grid", runs}});
  std::cout << "pretrained: lr " << pre.learning_rate << ", decay " << pre.weight_decay << ", validation rmse "
            << pre.validation_rmse << "\n";
}

void run_reconstruct(const Context& ctx) {
  const auto data = load_split(ctx);
  ReconstructionConfig rc;
  rc.classifier.reg_strength = ctx.config.reconstruction.reg_strength;
  rc.holdout_fraction = ctx.config.reconstruction.holdout_fraction;
  rc.weighting = ctx.config.reconstruction.weighting;
  rc.rho_margin = ctx.config.reconstruction.rho_margin;
  rc.seed = derive_seed(ctx.config.master_seed, "reconstruct/" + std::to_string(ctx.seed));
  rc.classifier.seed = rc.seed;
  auto result = reconstruct(data, rc);
  if (ctx.config.reconstruction.relaxed) result.rho = with_relaxed_rho(result.rho);
  const auto radius = result.rho.relaxed ? *result.rho.relaxed : result.rho.rho;
  const auto path = ctx.out / "reconstruction.tsv";
  write_reconstruction_report(result, data, path);
  write_manifest(ctx, path, "reconstruct", {{"rho", {radius[0], radius[1]}}});
  std::cout << "reconstruction: rho " << radius[0] << " " << radius[1] << "\n";
}

struct TrainOptions {
  std::string method = "drfo";
  std::optional<double> lambda;
  std::optional<double> tau;
  std::vector<double> rho;
  std::string tag;
};

FairTrainConfig finetune_for(const Context& ctx, double weight_decay) {
  FairTrainConfig f;
  const auto& ft = ctx.config.finetune;
  f.optimizer.learning_rate = ft.learning_rate;
  f.optimizer.weight_decay = weight_decay;
  f.optimizer.batch_size = ctx.config.model.batch_size;
  f.optimizer.max_epochs = ft.epochs;
  f.optimizer.patience = ft.epochs;
  f.optimizer.seed = derive_seed(ctx.config.master_seed, "finetune/" + std::to_string(ctx.seed));
  f.alpha_q = ft.alpha_q;
  f.inner_steps = ft.inner_steps;
  f.refresh_interval = ft.refresh_interval;
  f.projection.method = ft.projection;
  return f;
}

void write_checkpoint_table(const std::vector<Checkpoint>& cps, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "epoch\titeration\tvalidation_rmse\tvalidation_dp\ttest_rmse\ttest_dp\n";
  char buf[256];
  for (const auto& c : cps) {
    std::snprintf(buf, sizeof buf, "%zu\t%zu\t%.17g\t%.17g\t%.17g\t%.17g\n", c.epoch, c.iteration,
                  c.metrics.validation_rmse, c.metrics.validation_dp, c.metrics.test_rmse, c.metrics.test_dp);
    out << buf;
  }
}

void run_train(const Context& ctx, const TrainOptions& opt) {
  const Method method = parse_method(opt.method);
  const auto data = load_split(ctx);
  const auto pre_path = ctx.out / "pretrained.ckpt";
  require(pre_path, "pretrain");
  const MFModel start = load_checkpoint(pre_path);
  const double decay = read_manifest(pre_path).at("details").at("weight_decay").get<double>();
  const auto config = finetune_for(ctx, decay);

  const double l = method == Method::BasicMF ? 0.0 : opt.lambda.value_or(ctx.config.finetune.lambda_grid.front());
  TrainerSpec spec;
  spec.method = method;
  spec.lambda = {l, l};
  if (method == Method::CGL) spec.cgl_threshold = opt.tau.value_or(ctx.config.finetune.cgl_thresholds.front());
  spec.validate();

  std::optional<ReconstructionReport> recon;
  if (method == Method::FLrSA || method == Method::CGL || method == Method::DRFO) {
    const auto path = ctx.out / "reconstruction.tsv";
    require(path, "reconstruct");
    recon = read_reconstruction_report(path);
  }
  std::array<double, 2> rho = recon ? recon->radius() : std::array<double, 2>{0.0, 0.0};
  if (!opt.rho.empty()) {
    if (method != Method::DRFO) throw UsageError("--rho applies to --method drfo only");
    if (opt.rho.size() > 2) throw UsageError("--rho takes one value or two (one per group)");
    rho = {opt.rho.front(), opt.rho.back()};
  }

  const auto evaluator = make_evaluator(data, method == Method::Oracle);
  FairTrainResult run;
  switch (method) {
    case Method::BasicMF:
      run = train_basic_mf(start, data.train, config, evaluator);
      break;
    case Method::Oracle:
      run = train_oracle(start, data.train, data.true_attr, spec.lambda, config, evaluator);
      break;
    case Method::RegK:
      run = train_regk(start, data.train, spec.lambda, config, evaluator);
      break;
    case Method::FLrSA:
      run = train_flrsa(start, attach_reconstruction(data.train, recon->users), spec.lambda, config, evaluator);
      break;
    case Method::CGL:
      run = train_cgl(start, data.train, recon->users, data.user_status, *spec.cgl_threshold,
                      derive_seed(ctx.config.master_seed, "cgl/" + std::to_string(ctx.seed)), spec.lambda, config,
                      evaluator, ctx.config.finetune.cgl_prior);
      break;
    case Method::DRFO: {
      DROConfig dro;
      dro.lambda = spec.lambda;
      dro.train = config;
      run = drfo_train(start, attach_reconstruction(data.train, recon->users), rho, dro, evaluator);
      break;
    }
  }

  const std::string tag = opt.tag.empty() ? std::string(method_name(method)) : opt.tag;
  const json details = {{"method", method_name(method)},
                        {"lambda", l},
                        {"tau", spec.cgl_threshold ? json(*spec.cgl_threshold) : json(nullptr)},
                        {"rho", {rho[0], rho[1]}},
                        {"weight_decay", decay},
                        {"finetune_seed", config.optimizer.seed}};
  const auto model_path = ctx.out / ("model_" + tag + ".ckpt");
  save_checkpoint(run.model, config.optimizer.seed, model_path);
  write_manifest(ctx, model_path, "train", details);
  const auto log_path = ctx.out / ("log_" + tag + ".tsv");
  write_training_log(run.log, log_path);
  write_manifest(ctx, log_path, "train", details);
  const auto cp_path = ctx.out / ("checkpoints_" + tag + ".tsv");
  write_checkpoint_table(run.checkpoints, cp_path);
  write_manifest(ctx, cp_path, "train", details);
  const auto& last = run.checkpoints.back().metrics;
  std::cout << method_name(method) << ": test dp " << last.test_dp << ", test rmse " << last.test_rmse << " -> "
            << model_path.string() << "\n";
}

void run_evaluate(const Context& ctx, const std::string& model_arg) {
  const auto data = load_split(ctx);
  fs::path model_path = model_arg;
  if (!fs::exists(model_path) && fs::exists(ctx.out / model_path)) model_path = ctx.out / model_path;
  require(model_path, "train");
  const MFModel model = load_checkpoint(model_path);
  std::unique_ptr<bool[]> known(new bool[data.n_users()]);
  for (std::size_t u = 0; u < data.n_users(); ++u) known[u] = data.user_status[u].is_known();
  const auto report = evaluate(model, data.test, data.true_attr, std::span<const bool>(known.get(), data.n_users()));
  std::string stem = model_path.stem().string();
  if (stem.rfind("model_", 0) == 0) stem = stem.substr(6);
  const auto path = ctx.out / ("metrics_" + stem + ".tsv");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "metric\tvalue\n";
  char buf[128];
  auto line = [&](const char* name, double v) {
    std::snprintf(buf, sizeof buf, "%s\t%.17g\n", name, v);
    out << buf;
  };
  line("dp", report.dp);
  line("rmse", report.rmse);
  line("global_mean", report.deviation.global_mean);
  const char* names[2][2] = {{"dev_s0_known", "dev_s0_unknown"}, {"dev_s1_known", "dev_s1_unknown"}};
  for (int s = 0; s < 2; ++s) {
    for (int k = 0; k < 2; ++k) line(names[s][k], report.deviation.deviation[s][k].value_or(std::nan("")));
  }
  out.close();
  write_manifest(ctx, path, "evaluate", {{"model", model_path.string()}});
  std::cout << "dp " << report.dp << ", rmse " << report.rmse << " -> " << path.string() << "\n";
}

void run_sweep(const Context& ctx, const std::string& experiment, const std::string& format, bool quiet) {
  const ReportFormat fmt = format == "long" ? ReportFormat::Long : ReportFormat::Wide;
  ProgressSink progress;
  if (!quiet) progress = [](const std::string& s) { std::cerr << s << "\n"; };
  std::vector<std::string> which;
  if (experiment == "all") {
    which = {"retention", "noise", "forbidden"};
  } else {
    which = {experiment};
  }
  for (const auto& e : which) {
    ReportTable table;
    if (e == "retention") {
      table = run_retention_sweep(ctx.config, progress);
    } else if (e == "noise") {
      table = run_noise_injection(ctx.config, progress);
    } else {
      table = run_forbidden_sweep(ctx.config, progress);
    }
    const auto path = ctx.out / ("report_" + e + ".tsv");
    emit_report(table, path, fmt);
    std::size_t failed = 0;
    for (const auto& r : table.rows) failed += !r.error.empty();
    write_manifest(ctx, path, "sweep",
                   {{"experiment", e}, {"format", format}, {"rows", table.rows.size()}, {"failed_cells", failed}});
    std::cout << e << ": " << table.rows.size() << " rows (" << failed << " failed) -> " << path.string() << "\n";
  }
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "JSON config file (default: desk-scale preset)");
  sub->add_option("--set", c.overrides, "Override a config field, dotted.key=value (repeatable)");
  sub->add_option("--out", c.out, "Artifact directory (default: $DRFO_DATA_DIR or ./drfo-out)");
  sub->add_option("--seed", c.seed, "Replicate seed (replaces the config's seed list)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fair recommendation with partially known sensitive attributes"};
  app.require_subcommand(1);
  Common common;

  double retention = 1.0, forbid = 0.0;
  auto* ingest = app.add_subcommand("ingest", "Load, filter, split and mask the dataset");
  add_common(ingest, common);
  ingest->add_option("--retention", retention, "Share of users whose attribute stays known")->check(CLI::Range(0.0, 1.0));
  ingest->add_option("--forbid", forbid, "Share of the other users whose attribute may not be reconstructed")
      ->check(CLI::Range(0.0, 1.0));

  auto* pre = app.add_subcommand("pretrain", "Grid-searched BCE pretraining");
  add_common(pre, common);

  auto* recon = app.add_subcommand("reconstruct", "Infer missing attributes and estimate the error radius");
  add_common(recon, common);

  TrainOptions topt;
  auto* train = app.add_subcommand("train", "Fine-tune the pretrained model with one method");
  add_common(train, common);
  train->add_option("--method", topt.method, "basicmf, oracle, regk, flrsa, cgl or drfo");
  train->add_option("--lambda", topt.lambda, "Fairness weight (default: first value of the grid)");
  train->add_option("--tau", topt.tau, "CGL confidence threshold");
  train->add_option("--rho", topt.rho, "DRFO radius override, one value or one per group")->delimiter(',');
  train->add_option("--tag", topt.tag, "Artifact name (default: method name)");

  std::string model_arg;
  auto* eval = app.add_subcommand("evaluate", "Test DP, RMSE and group deviations of a checkpoint");
  add_common(eval, common);
  eval->add_option("--model", model_arg, "Checkpoint path (absolute or relative to --out)")->required();

  std::string experiment = "all", format = "wide";
  bool quiet = false;
  auto* sweep = app.add_subcommand("sweep", "Run the retention, noise and forbidden-reconstruction sweeps");
  add_common(sweep, common);
  sweep->add_option("--experiment", experiment, "retention, noise, forbidden or all")
      ->check(CLI::IsMember({"retention", "noise", "forbidden", "all"}));
  sweep->add_option("--format", format, "wide or long")->check(CLI::IsMember({"wide", "long"}));
  sweep->add_flag("--quiet", quiet, "No progress lines");

  if (argc > 1 && argv[1][0] != '-') {
    bool known = false;
    for (const auto* sub : app.get_subcommands({})) known |= sub->get_name() == argv[1];
    if (!known) {
      std::cerr << "unknown subcommand '" << argv[1] << "'\n" << app.help();
      return 2;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    const Context ctx = resolve(common);
    if (*ingest) run_ingest(ctx, retention, forbid);
    if (*pre) run_pretrain(ctx);
    if (*recon) run_reconstruct(ctx);
    if (*train) run_train(ctx, topt);
    if (*eval) run_evaluate(ctx, model_arg);
    if (*sweep) run_sweep(ctx, experiment, format, quiet);
  } catch (const Error& e) {
    std::cerr << "error [" << e.category() << "]: " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const json::exception& e) {
    std::cerr << "error [parse]: " << e.what() << "\n";
    return exit_code("parse");
  } catch (const std::exception& e) {
    std::cerr << "error [internal]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
