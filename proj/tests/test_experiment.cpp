#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

#include "drfo/errors.hpp"
#include "drfo/experiment.hpp"
#include "support.hpp"

using namespace drfo;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

ExperimentConfig tiny_config() {
  auto c = ExperimentConfig::desk_preset();
  c.seeds = {1};
  c.dataset.n_users = 80;
  c.model.dim = 4;
  c.model.pretrain_epochs = 2;
  c.model.grid.weight_decays = {1e-4};
  c.finetune.epochs = 2;
  c.finetune.lambda_grid = {1.0};
  c.finetune.cgl_thresholds = {0.7};
  c.retention_ratios = {0.5};
  return c;
}

ReportRow sample_row(const std::string& method, std::uint64_t seed, double dp) {
  ReportRow r;
  r.experiment = "retention";
  r.method = method;
  r.scenario = "retention";
  r.value = 0.3;
  r.seed = seed;
  r.dp = dp;
  r.rmse = 0.41;
  r.deviation = {0.01, kNaN, 0.02, 0.03};
  r.lambda = 10;
  r.epoch = 4;
  return r;
}

}  // namespace

TEST_CASE("model selection under an RMSE budget") {
  SUBCASE("lowest DP among qualifying checkpoints") {
    const std::vector<SelectionCandidate> c = {{0.4147, 0.030}, {0.4200, 0.010}, {0.4300, 0.001}, {0.4220, 0.012}};
    const auto s = select_model(c, 0.4147, 0.98);
    CHECK(s.threshold == doctest::Approx(0.4232).epsilon(1e-4));
    CHECK(s.index == 1);
    CHECK_FALSE(s.flagged);
  }
  SUBCASE("ties go to lower RMSE, then to the earlier checkpoint") {
    const std::vector<SelectionCandidate> c = {{0.41, 0.02}, {0.40, 0.02}, {0.40, 0.02}};
    CHECK(select_model(c, 0.41, 0.98).index == 1);
  }
  SUBCASE("NaN DP ranks last") {
    const std::vector<SelectionCandidate> c = {{0.40, kNaN}, {0.41, 0.5}};
    CHECK(select_model(c, 0.41, 0.98).index == 1);
    const std::vector<SelectionCandidate> only = {{0.40, kNaN}};
    CHECK(select_model(only, 0.41, 0.98).index == 0);
  }
  SUBCASE("nothing qualifies: lowest RMSE, flagged") {
    const std::vector<SelectionCandidate> c = {{0.50, 0.0}, {0.45, 0.1}, {0.47, 0.0}};
    const auto s = select_model(c, 0.40, 0.98);
    CHECK(s.flagged);
    CHECK(s.index == 1);
  }
  CHECK_THROWS_AS(select_model({}, 0.4, 0.98), UsageError);
  const std::vector<SelectionCandidate> one = {{0.4, 0.0}};
  CHECK_THROWS_AS(select_model(one, 0.4, 0.0), UsageError);
}

TEST_CASE("configuration round trip, overrides and errors") {
  const auto preset = ExperimentConfig::desk_preset();
  CHECK_NOTHROW(preset.validate());
  const auto back = config_from_json(to_json(preset));
  CHECK(to_json(back) == to_json(preset));

  auto doc = to_json(preset);
  apply_override(doc, "finetune.epochs=7");
  apply_override(doc, "dataset.source=synthetic-tenrec");
  apply_override(doc, "experiments.retention_ratios=[0.2,0.4]");
  const auto c = config_from_json(doc);
  CHECK(c.finetune.epochs == 7);
  CHECK(c.dataset.source == "synthetic-tenrec");
  CHECK(c.retention_ratios == std::vector<double>{0.2, 0.4});
  CHECK_THROWS_AS(apply_override(doc, "novalue"), UsageError);
  CHECK_THROWS_AS(apply_override(doc, "a..b=1"), UsageError);

  auto bad = to_json(preset);
  bad["finetune"]["epochs"] = "many";
  CHECK_THROWS_AS(config_from_json(bad), ConfigError);
  bad = to_json(preset);
  bad["finetune"]["bogus"] = 1;
  CHECK_THROWS_AS(config_from_json(bad), ConfigError);
  bad = to_json(preset);
  bad["experiments"]["retention_ratios"] = {0.5, 1.5};
  CHECK_THROWS_AS(config_from_json(bad), ConfigError);
  bad = to_json(preset);
  bad["seeds"] = nlohmann::json::array();
  CHECK_THROWS_AS(config_from_json(bad), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), IoError);
}

TEST_CASE("reports round-trip and sort stably") {
  ReportTable t;
  t.rows = {sample_row("DRFO", 2, 0.01), sample_row("BasicMF", 1, 0.03), sample_row("DRFO", 1, 0.02)};
  t.rows[2].error = "diverged";
  t.sort();
  CHECK(t.rows[0].method == "BasicMF");
  CHECK(t.rows[1].seed == 1);
  CHECK(t.rows[2].seed == 2);

  std::stringstream wide;
  emit_report(t, wide);
  const auto back = parse_report(wide);
  REQUIRE(back.rows.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(back.rows[i] == t.rows[i]);

  const auto m = mean_over_seeds(t, "retention", "DRFO", 0.3);
  CHECK(m.n == 1);
  CHECK(m.dp == 0.01);

  std::stringstream empty;
  emit_report(ReportTable{}, empty);
  CHECK(parse_report(empty).rows.empty());

  std::stringstream lng;
  emit_report(t, lng, ReportFormat::Long);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(lng, line)) ++lines;
  CHECK(lines == 1 + 3 * 6);

  std::stringstream junk("not a header\n");
  CHECK_THROWS_AS(parse_report(junk), ParseError);
  std::stringstream none("");
  CHECK_THROWS_AS(parse_report(none), ParseError);
}

TEST_CASE("flip injection") {
  const auto t = testing::small_table(200, 6);
  const auto masked = apply_mask_plan(split(t, {}, 1), {0.3, 0.0, 2});
  std::size_t missing = 0;
  for (const auto& st : masked.user_status) missing += !st.is_known();
  const auto n = inject_flips(masked, 0.2, 9);
  CHECK(n.flips_per_group == static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(missing) / 2.0)));
  std::array<std::size_t, 2> flipped{}, group{};
  for (UserId u = 0; u < masked.n_users(); ++u) {
    if (masked.user_status[u].is_known()) {
      CHECK(n.users[u].s_hat == -1);
      continue;
    }
    const int s = masked.true_attr[u];
    ++group[s];
    flipped[s] += n.users[u].s_hat != s;
  }
  for (int s = 0; s < 2; ++s) {
    CHECK(flipped[s] == n.flips_per_group);
    CHECK(n.per_group_rate[s] == doctest::Approx(static_cast<double>(flipped[s]) / static_cast<double>(group[s])));
  }
  const auto none = inject_flips(masked, 0.0, 9);
  for (UserId u = 0; u < masked.n_users(); ++u) {
    if (!masked.user_status[u].is_known()) CHECK(none.users[u].s_hat == masked.true_attr[u]);
  }
  CHECK_THROWS_AS(inject_flips(masked, 1.5, 9), ConfigError);
}

TEST_CASE("a tiny retention sweep produces one row per method and seed") {
  const auto cfg = tiny_config();
  const auto table = run_retention_sweep(cfg);
  CHECK(table.rows.size() == cfg.methods.size());
  for (const auto& r : table.rows) {
    CHECK(r.error.empty());
    CHECK(r.experiment == "retention");
    CHECK(r.value == 0.5);
    CHECK(std::isfinite(r.dp));
    CHECK(std::isfinite(r.rmse));
  }
  const auto again = run_retention_sweep(cfg);
  REQUIRE(again.rows.size() == table.rows.size());
  for (std::size_t i = 0; i < table.rows.size(); ++i) CHECK(again.rows[i] == table.rows[i]);
}
