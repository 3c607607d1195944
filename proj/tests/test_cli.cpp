#include <doctest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

std::string binary() {
  const char* p = std::getenv("DRFO_CLI");
  REQUIRE_MESSAGE(p != nullptr, "DRFO_CLI must point at the command-line binary");
  return p;
}

Run run(const std::string& args) {
  const std::string cmd = "'" + binary() + "' " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string kSmall =
    " --set dataset.n_users=60 --set model.dim=4 --set model.pretrain_epochs=1"
    " --set 'model.weight_decays=[0.0001]' --set finetune.epochs=1 --set 'finetune.lambda_grid=[1.0]'";

}  // namespace

TEST_CASE("usage errors") {
  const auto none = run("");
  CHECK(none.code != 0);
  const auto unknown = run("frobnicate");
  CHECK(unknown.code == 2);
  CHECK(unknown.output.find("frobnicate") != std::string::npos);
  const auto help = run("--help");
  CHECK(help.code == 0);
  CHECK(help.output.find("sweep") != std::string::npos);
}

TEST_CASE("a missing artifact names the stage to run first") {
  const auto dir = fs::temp_directory_path() / "drfo_cli_missing";
  fs::remove_all(dir);
  const auto r = run("pretrain --out '" + dir.string() + "'");
  CHECK(r.code == 5);
  CHECK(r.output.find("ingest") != std::string::npos);
  const auto t = run("train --method drfo --out '" + dir.string() + "'");
  CHECK(t.code == 5);
  fs::remove_all(dir);
}

TEST_CASE("config errors exit with the config code") {
  const auto r = run("ingest --set finetune.epochs=0 --out '" + (fs::temp_directory_path() / "drfo_cli_cfg").string() + "'");
  CHECK(r.code == 3);
  CHECK(r.output.find("finetune.epochs") != std::string::npos);
  fs::remove_all(fs::temp_directory_path() / "drfo_cli_cfg");
}

TEST_CASE("staged pipeline with manifests; zero radius reproduces the uniform reconstruction") {
  const auto dir = fs::temp_directory_path() / "drfo_cli_pipeline";
  fs::remove_all(dir);
  const std::string out = " --out '" + dir.string() + "'" + kSmall;
  REQUIRE(run("ingest --retention 0.4" + out).code == 0);
  CHECK(fs::exists(dir / "dataset" / "train.tsv"));
  CHECK(fs::exists(dir / "dataset" / "users.tsv.manifest.json"));
  REQUIRE(run("pretrain" + out).code == 0);
  CHECK(fs::exists(dir / "pretrained.ckpt.manifest.json"));
  REQUIRE(run("reconstruct" + out).code == 0);
  CHECK(fs::exists(dir / "reconstruction.tsv"));

  REQUIRE(run("train --method drfo --rho 0 --tag zero" + out).code == 0);
  REQUIRE(run("train --method flrsa --tag plain" + out).code == 0);
  CHECK(slurp(dir / "model_zero.ckpt") == slurp(dir / "model_plain.ckpt"));
  CHECK(fs::exists(dir / "log_zero.tsv"));
  CHECK(fs::exists(dir / "checkpoints_zero.tsv.manifest.json"));

  const auto bad = run("train --method svm" + out);
  CHECK(bad.code == 2);

  REQUIRE(run("evaluate --model model_zero.ckpt" + out).code == 0);
  const auto metrics = slurp(dir / "metrics_zero.tsv");
  CHECK(metrics.find("dp") != std::string::npos);
  fs::remove_all(dir);
}
