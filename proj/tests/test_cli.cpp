#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include <gtest/gtest.h>

#include "cbm_align/cli.hpp"
#include "oracles.hpp"

using namespace cbm_align;
namespace fs = std::filesystem;

namespace {

std::string binary() {
  const char* p = std::getenv("CBM_ALIGN_BIN");
  return p ? p : "cbm-align";
}

int run_cli(const std::string& args) {
  const std::string cmd = binary() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const fs::path& dir, const std::string& name, const json& j) {
  fs::create_directories(dir);
  const fs::path p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

int run_sub(const std::string& sub, const fs::path& config, const fs::path& out) {
  return run_cli(sub + " --config " + config.string() + " --out " + out.string());
}

json read_json(const fs::path& p) { return json::parse(io::read_text(p)); }

json small_synth() { return {{"k", 4}, {"c", 8}, {"samples_per_class", 10}, {"d_joint", 40}, {"d_patch", 16}, {"seed", 3}}; }

}  // namespace

class CliFlow : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    tmp_ = new oracle::TempDir("cli");
    const fs::path root = tmp_->path();
    ASSERT_EQ(run_sub("synth", write_config(root, "synth.json", {{"synth", small_synth()}}), root / "synth"), 0);
    json train{{"bundle", "synth/bundle"}, {"label_budget", {{"per_class", 3}}}, {"train", {{"epochs", 20}}}};
    ASSERT_EQ(run_sub("train", write_config(root, "train.json", train), root / "train"), 0);
  }
  static void TearDownTestSuite() {
    delete tmp_;
    tmp_ = nullptr;
  }
  static fs::path root() { return tmp_->path(); }
  static oracle::TempDir* tmp_;
};

oracle::TempDir* CliFlow::tmp_ = nullptr;

TEST_F(CliFlow, SynthWritesBundleTruthAndCandidates) {
  const fs::path out = root() / "synth";
  EXPECT_NO_THROW(load_bundle(out / "bundle"));
  EXPECT_TRUE(fs::exists(out / "truth.json"));
  EXPECT_EQ(load_candidates(out / "candidates").size(), 16u);
  json m = read_json(out / "run_manifest.json");
  EXPECT_EQ(m.at("subcommand"), "synth");
  EXPECT_EQ(m.at("version"), cli::kVersion);
  EXPECT_EQ(m.at("config").at("synth").at("seed"), 3);
}

TEST_F(CliFlow, TrainWritesModelAndReports) {
  const fs::path out = root() / "train";
  ConceptModel m = load_model(out / "model");
  EXPECT_EQ(m.w_k.cols(), 4u);
  json r = read_json(out / "train_report.json");
  EXPECT_EQ(r.at("epochs").size(), 20u);
  EXPECT_TRUE(fs::exists(out / "train_report.csv"));
  EXPECT_TRUE(fs::exists(out / "timing.json"));
}

TEST_F(CliFlow, ScoreWritesMatricesAndTopConcepts) {
  const fs::path out = root() / "score";
  json cfg{{"bundle", "synth/bundle"}, {"model", "train/model"}, {"score", {{"top_n", 3}}}};
  ASSERT_EQ(run_sub("score", write_config(root(), "score.json", cfg), out), 0);
  EXPECT_EQ(fs::file_size(out / "raw_scores.f32"), 40u * 8u * 4u);
  EXPECT_EQ(fs::file_size(out / "enhanced_scores.f32"), 40u * 8u * 4u);
  const std::string csv = io::read_text(out / "top_concepts.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 40 * 3);
  EXPECT_EQ(read_json(out / "scores.json").at("top_n"), 3);
}

TEST_F(CliFlow, EvalWritesReportsWithBaselineNote) {
  const fs::path out = root() / "eval";
  json cfg{{"bundle", "synth/bundle"}, {"model", "train/model"}};
  ASSERT_EQ(run_sub("eval", write_config(root(), "eval.json", cfg), out), 0);
  auto rows = metrics::read_reports(out / "eval_report.json");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].name, "train");
  EXPECT_TRUE(rows[1].eval.concept_accuracy.has_value());
  EXPECT_FALSE(read_json(out / "eval_report.json").contains("notes"));

  // Without a model the frozen baseline is evaluated and flagged.
  const fs::path base = root() / "eval_base";
  ASSERT_EQ(run_sub("eval", write_config(root(), "eval_base.json", {{"bundle", "synth/bundle"}}), base), 0);
  EXPECT_TRUE(read_json(base / "eval_report.json").contains("notes"));
}

TEST_F(CliFlow, AnalyzeWritesErrorMatrix) {
  const fs::path out = root() / "analyze";
  json cfg{{"bundle", "synth/bundle"}, {"model", "train/model"}, {"analyze", {{"split", "all"}}}};
  ASSERT_EQ(run_sub("analyze", write_config(root(), "analyze.json", cfg), out), 0);
  json a = read_json(out / "analysis.json");
  EXPECT_EQ(a.at("n_evaluated"), 40);
  EXPECT_EQ(a.at("error_matrix").size(), 4u);
  // Either pairs were found or the absence is explained.
  EXPECT_TRUE(!a.at("confounding_pairs").empty() || a.contains("note"));
  EXPECT_TRUE(fs::exists(out / "error_matrix.csv"));
}

TEST_F(CliFlow, IntervenePipelineOnConfoundedBundle) {
  json synth = small_synth();
  synth["confounder"] = {{"classes", {0, 1}}, {"overlap", 1.0}};
  ASSERT_EQ(run_sub("synth", write_config(root(), "synth_conf.json", {{"synth", synth}}), root() / "conf"), 0);
  json cfg{{"bundle", "conf/bundle"},
           {"candidates", "conf/candidates"},
           {"train", {{"epochs", 40}, {"lr", 0.01}}},
           {"intervention", {{"per_class", 4}, {"epochs", 10}}}};
  const fs::path out = root() / "intervene";
  ASSERT_EQ(run_sub("intervene", write_config(root(), "intervene.json", cfg), out), 0);
  json r = read_json(out / "intervention_report.json");
  EXPECT_EQ(r.at("confounding_pairs").size(), 1u);
  EXPECT_EQ(r.at("confusions").size(), 2u);
  EXPECT_TRUE(fs::exists(out / "head" / "w_prime.f64"));
  EXPECT_TRUE(fs::exists(out / "base_model"));
  EXPECT_EQ(r.at("config").at("per_class"), 4);
}

TEST_F(CliFlow, SweepWritesSummary) {
  json cfg{{"synth", {{"k", 3}, {"c", 6}, {"samples_per_class", 8}, {"d_joint", 30}, {"d_patch", 8}}},
           {"train", {{"epochs", 5}}},
           {"sweep", {{"grid", {0, 2}}, {"seeds", {0, 1}}}}};
  const fs::path out = root() / "sweep";
  ASSERT_EQ(run_sub("sweep", write_config(root(), "sweep.json", cfg), out), 0);
  const std::string csv = io::read_text(out / "sweep.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  json s = read_json(out / "sweep.json");
  EXPECT_EQ(s.at("runs").size(), 4u);
  EXPECT_EQ(s.at("runs")[0].at("concept_loss_enabled"), false);
}

TEST_F(CliFlow, RepeatRunsAreBitwiseIdentical) {
  json train{{"bundle", "synth/bundle"}, {"label_budget", {{"per_class", 3}}}, {"train", {{"epochs", 20}}}};
  const fs::path out = root() / "train_again";
  ASSERT_EQ(run_sub("train", write_config(root(), "train.json", train), out), 0);
  for (const char* f : {"model/w_cp.f64", "model/w_k.f64", "train_report.json", "train_report.csv", "run_manifest.json"})
    EXPECT_EQ(io::read_text(out / f), io::read_text(root() / "train" / f)) << f;
}

TEST(CliErrors, ExitCodesAndErrorJson) {
  oracle::TempDir tmp("cli_err");
  const fs::path root = tmp.path();

  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("bogus --config x --out y"), 2);
  EXPECT_EQ(run_cli("train --out " + (root / "o").string()), 2);

  const fs::path unknown = root / "unknown";
  EXPECT_EQ(run_sub("synth", write_config(root, "u.json", {{"synth", small_synth()}, {"sythn", 1}}), unknown), 2);
  json err = read_json(unknown / "error.json");
  EXPECT_EQ(err.at("error").at("kind"), "invalid_argument");
  EXPECT_EQ(err.at("error").at("subcommand"), "synth");
  EXPECT_FALSE(fs::exists(unknown / "run_manifest.json"));

  EXPECT_EQ(run_sub("train", write_config(root, "m.json", {{"bundle", "nowhere"}}), root / "missing"), 3);

  std::ofstream(root / "broken.json") << "{";
  EXPECT_EQ(run_sub("train", root / "broken.json", root / "broken"), 4);

  json infeasible = small_synth();
  infeasible["d_joint"] = 5;
  EXPECT_EQ(run_sub("synth", write_config(root, "i.json", {{"synth", infeasible}}), root / "infeasible"), 5);
  EXPECT_EQ(read_json(root / "infeasible" / "error.json").at("error").at("kind"), "infeasible");
}

TEST(CliErrors, SuccessClearsStaleErrorJson) {
  oracle::TempDir tmp("cli_stale");
  const fs::path out = tmp.path() / "out";
  fs::create_directories(out);
  std::ofstream(out / "error.json") << "{}";
  ASSERT_EQ(run_sub("synth", write_config(tmp.path(), "s.json", {{"synth", small_synth()}}), out), 0);
  EXPECT_FALSE(fs::exists(out / "error.json"));
}
