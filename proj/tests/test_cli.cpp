#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "panfuse/metrics.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& root() {
  static const fs::path r = [] {
    auto d = fs::temp_directory_path() / "panfuse_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return r;
}

int run(const std::string& args) {
  const std::string cmd = std::string(PANFUSE_CLI_PATH) + " " + args + " 2>" + (root() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string dir(const std::string& name) { return (root() / name).string(); }

// synth 64/256 scene, reduce it, fuse with exp, evaluate against the reference.
void pipeline(const std::string& tag) {
  ASSERT_EQ(run("synth --seed 7 --size 256 --bands 4 --ratio 4 --out " + dir(tag + "/scene")), 0);
  ASSERT_EQ(run("degrade --in " + dir(tag + "/scene") + " --ratio 4 --out " + dir(tag + "/reduced")), 0);
  ASSERT_EQ(run("fuse --in " + dir(tag + "/reduced") + " --method exp --out " + dir(tag + "/fused")), 0);
  ASSERT_EQ(run("eval --mode reduced --fused " + dir(tag + "/fused/fused.pfr") + " --in " + dir(tag + "/reduced") +
                " --out " + dir(tag + "/eval")),
            0);
}

}  // namespace

TEST(Cli, ExpPipelineLosesDetail) {
  pipeline("p1");
  const auto csv = slurp(root() / "p1/eval/eval_reduced.csv");
  ASSERT_EQ(csv.substr(0, csv.find('\n')), "SAM,ERGAS,CC,UIQI,Q4");
  const auto rep = panfuse::metrics::parse_keyvalue_report(slurp(root() / "p1/eval/eval_reduced.txt"));
  EXPECT_LT(rep.at("CC"), 1.0);
  EXPECT_GT(rep.at("CC"), 0.5);
  EXPECT_GT(rep.at("ERGAS"), 0.0);
  EXPECT_EQ(rep.config.ratio_den, 4);
}

TEST(Cli, PipelineIsByteReproducible) {
  pipeline("r1");
  pipeline("r2");
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(root() / "r1")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root() / "r1");
    EXPECT_EQ(slurp(e.path()), slurp(root() / "r2" / rel)) << rel;
    ++compared;
  }
  EXPECT_GE(compared, 10u);
}

TEST(Cli, SelfComparisonIsIdeal) {
  ASSERT_EQ(run("synth --seed 3 --size 64 --out " + dir("self/scene")), 0);
  const auto gt = dir("self/scene/gt.pfr");
  ASSERT_EQ(run("eval --mode reduced --fused " + gt + " --reference " + gt + " --out " + dir("self/eval")), 0);
  EXPECT_EQ(slurp(root() / "self/eval/eval_reduced.csv"), "SAM,ERGAS,CC,UIQI,Q4\n0,0,1,1,1\n");
}

TEST(Cli, UnknownFlagWritesNothing) {
  EXPECT_EQ(run("synth --seed 7 --bogus 1 --out " + dir("bad1")), 2);
  EXPECT_FALSE(fs::exists(root() / "bad1"));
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run(""), 2);
}

TEST(Cli, ValidationErrorsExitTwo) {
  EXPECT_EQ(run("fuse --in " + dir("missing") + " --method exp --out " + dir("bad2")), 2);
  EXPECT_FALSE(fs::exists(root() / "bad2"));
  EXPECT_EQ(run("synth --seed 7 --size 30 --ratio 4 --out " + dir("bad3")), 2);
  EXPECT_FALSE(fs::exists(root() / "bad3"));
  EXPECT_EQ(run("eval --mode sideways --fused x.pfr --out " + dir("bad4")), 2);
  EXPECT_EQ(run("synth --seed 7"), 2);  // no --out
}

TEST(Cli, ConfigUnknownKeyIsNamed) {
  const auto cfg = root() / "bad.cfg";
  std::ofstream(cfg) << "# comment\nwindow = 16\nwindw = 8\n";
  EXPECT_EQ(run("synth --config " + cfg.string() + " --out " + dir("bad5")), 2);
  EXPECT_NE(slurp(root() / "stderr.txt").find("'windw'"), std::string::npos);
  EXPECT_FALSE(fs::exists(root() / "bad5"));
}

TEST(Cli, ConfigValuesEchoedAndFlagsOverride) {
  ASSERT_EQ(run("synth --seed 5 --size 128 --out " + dir("cfg/scene")), 0);
  const auto cfg = root() / "good.cfg";
  std::ofstream(cfg) << "window = 16   # smaller windows\nstride = 8\nalpha = 2\nmethod = ignored\n";
  ASSERT_EQ(run("fuse --config " + cfg.string() + " --in " + dir("cfg/scene") + " --method cs --out " + dir("cfg/fused")), 0);
  EXPECT_NE(slurp(root() / "cfg/fused/fuse.txt").find("method = cs"), std::string::npos);
  ASSERT_EQ(run("eval --config " + cfg.string() + " --mode full --fused " + dir("cfg/fused/fused.pfr") + " --in " +
                dir("cfg/scene") + " --method cs --out " + dir("cfg/eval")),
            0);
  const auto rep = panfuse::metrics::parse_keyvalue_report(slurp(root() / "cfg/eval/eval_full.txt"));
  EXPECT_EQ(rep.config.window, 16);
  EXPECT_EQ(rep.config.stride, 8);
  EXPECT_EQ(rep.config.alpha, 2.0);
  EXPECT_NEAR(rep.at("QNR"), std::pow(1 - rep.at("D_lambda"), 2.0) * (1 - rep.at("D_s")), 1e-12);
}

TEST(Cli, ReportAggregates) {
  pipeline("agg");
  ASSERT_EQ(run("fuse --in " + dir("agg/reduced") + " --method glp --out " + dir("agg/glp")), 0);
  ASSERT_EQ(run("eval --mode reduced --fused " + dir("agg/glp/fused.pfr") + " --in " + dir("agg/reduced") +
                " --method glp --out " + dir("agg/eval_glp")),
            0);
  ASSERT_EQ(run("report --out " + dir("agg/table") + " " + dir("agg/eval/eval_reduced.txt") + " " +
                dir("agg/eval_glp/eval_reduced.txt")),
            0);
  const auto csv = slurp(root() / "agg/table/reduced.csv");
  EXPECT_NE(csv.find("\nfused,"), std::string::npos);
  EXPECT_NE(csv.find("\nglp,"), std::string::npos);
  EXPECT_NE(csv.find("\nIdeal,0,0,1,1,1\n"), std::string::npos);
  EXPECT_FALSE(fs::exists(root() / "agg/table/full.csv"));
  EXPECT_EQ(run("report --out " + dir("agg/none")), 2);
}

TEST(Cli, TrainAndFuseGan) {
  ASSERT_EQ(run("synth --seed 7 --size 64 --out " + dir("gan/scene")), 0);
  const auto cfg = root() / "train.cfg";
  std::ofstream(cfg) << "iterations = 3\n";
  ASSERT_EQ(run("train --config " + cfg.string() + " --in " + dir("gan/scene") + " --out " + dir("gan/model")), 0);
  const auto log = slurp(root() / "gan/model/train_log.csv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 4);
  EXPECT_NE(slurp(root() / "gan/model/train.txt").find("iterations = 3"), std::string::npos);
  EXPECT_EQ(run("fuse --in " + dir("gan/scene") + " --method gan --out " + dir("gan/nockpt")), 2);
  ASSERT_EQ(run("fuse --in " + dir("gan/scene") + " --method gan --checkpoint " + dir("gan/model/generator.pfck") +
                " --out " + dir("gan/fused")),
            0);
  EXPECT_NE(slurp(root() / "gan/fused/fuse.txt").find("checkpoint_hash = "), std::string::npos);
}

TEST(Cli, TrainingDivergenceExitsThree) {
  ASSERT_EQ(run("synth --seed 7 --size 64 --out " + dir("div/scene")), 0);
  EXPECT_EQ(run("train --in " + dir("div/scene") + " --iterations 3 --lr_g 1e308 --out " + dir("div/model")), 3);
  EXPECT_FALSE(fs::exists(root() / "div/model"));
}
