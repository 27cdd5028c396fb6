#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "affect/objectives.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

// Runs the CLI through the shell; stderr is appended to out when `merge` is set.
Run run(const std::string& args, bool merge = false) {
  const std::string cmd = std::string(AFFECT_CLI) + " " + args + (merge ? " 2>&1" : " 2>/dev/null");
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.out.append(buf, n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

const char* kSmallModel =
    "--set model.d_model=8 --set model.n_heads=2 --set model.n_layers=1 --set model.d_ff=16 "
    "--set model.max_len=4 --set train.lr=0.01 --set train.batch_size=16 --set train.seed=1";

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("affect_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void synth(const std::string& name, const std::string& extra = "") {
    const auto r = run("synth --seed 3 --frames 300 --streams a:6,b:4 --out " + path(name) + " " + extra);
    ASSERT_EQ(r.code, 0) << r.out;
  }

  fs::path dir_;
};

}  // namespace

TEST(Cli, ScoreMatchesTableRows) {
  const auto eac = run("score 0.414 0.425 0.249 0.433");
  EXPECT_EQ(eac.code, 0);
  EXPECT_NEAR(std::stod(eac.out), 1.1015, 5e-4);
  EXPECT_NEAR(std::stod(run("score 0.420 0.451 0.266 0.454").out), 1.1555, 5e-4);
  EXPECT_EQ(run("score 0.1 0.2 0.3").code, 2);
  EXPECT_EQ(run("score a b c d").code, 2);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("nonsense").code, 2);
  EXPECT_EQ(run("gradcheck --op nope").code, 2);
}

TEST(Cli, Gradcheck) {
  const auto r = run("gradcheck --op softmax --seeds 5");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("softmax"), std::string::npos);
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  EXPECT_NE(run("gradcheck --op matmul --seeds 3 --tol 1e-12").code, 0);
  const auto list = run("gradcheck --list");
  EXPECT_EQ(list.code, 0);
  EXPECT_NE(list.out.find("model_au"), std::string::npos);
}

TEST_F(CliTest, SynthZeroFramesIsUsageError) {
  const auto r = run("synth --frames 0 --out " + path("x"), true);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("frames"), std::string::npos) << r.out;
}

TEST_F(CliTest, SynthRerunIsByteIdenticalAndRefusesOverwrite) {
  synth("one");
  synth("two");
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "one")) {
    EXPECT_EQ(slurp(e.path()), slurp(dir_ / "two" / e.path().filename())) << e.path();
    ++files;
  }
  EXPECT_GE(files, 4u);
  EXPECT_EQ(run("synth --seed 3 --frames 300 --streams a:6,b:4 --out " + path("one")).code, 2);
  EXPECT_EQ(run("synth --seed 3 --frames 300 --streams a:6,b:4 --force --out " + path("one")).code, 0);
}

TEST_F(CliTest, CorruptedManifestReportsLine) {
  synth("d");
  write_text(dir_ / "d" / "manifest.json", "{\n  \"streams\": [\n    {\"name\": \"a\",, }\n");
  const auto r = run("train --data " + path("d/manifest.json") + " --out " + path("run"), true);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("manifest.json:3"), std::string::npos) << r.out;
}

TEST_F(CliTest, UnknownConfigKeyIsUsageError) {
  synth("d");
  const auto r = run("train --data " + path("d/manifest.json") + " --out " + path("run") + " --set train.lrr=1", true);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("lrr"), std::string::npos) << r.out;
}

TEST_F(CliTest, TrainThenEvalAgree) {
  synth("d");
  const std::string data = path("d/manifest.json");
  const auto t = run("train --task expr --data " + data + " --out " + path("run") + " --set train.epochs=8 " + kSmallModel);
  ASSERT_EQ(t.code, 0) << t.out;
  EXPECT_NE(t.out.find("\"lr\": 0.01"), std::string::npos);
  for (const char* f : {"best.ckpt", "runlog.jsonl", "config.json", "report.txt"}) {
    EXPECT_TRUE(fs::exists(dir_ / "run" / f)) << f;
  }

  const auto kv = run("eval --checkpoint " + path("run/best.ckpt") + " --data " + data + " --format kv");
  ASSERT_EQ(kv.code, 0);
  EXPECT_EQ(kv.out, slurp(dir_ / "run" / "report.txt"));

  // The run log's "best" record is the evaluation of the saved checkpoint.
  std::ifstream log(dir_ / "run" / "runlog.jsonl");
  nlohmann::json last;
  for (std::string line; std::getline(log, line);) last = nlohmann::json::parse(line);
  ASSERT_EQ(last["type"], "done");
  const auto report = affect::obj::EvalReport::parse_kv(kv.out);
  EXPECT_EQ(affect::obj::format_metric(last["best"]["fer"].get<double>()), affect::obj::format_metric(report.f1_expr));

  const auto table = run("eval --checkpoint " + path("run/best.ckpt") + " --data " + data);
  ASSERT_EQ(table.code, 0);
  std::istringstream lines(kv.out);
  for (std::string line; std::getline(lines, line);) {
    EXPECT_NE(table.out.find(line.substr(line.find('=') + 1)), std::string::npos) << line << "\n" << table.out;
  }
}

TEST_F(CliTest, TrainRerunWritesIdenticalLogAndCheckpoint) {
  synth("d");
  const std::string data = path("d/manifest.json");
  for (const char* out : {"r1", "r2"}) {
    const auto t = run("train --task all --data " + data + " --out " + path(out) + " --set train.epochs=2 " +
                       kSmallModel + " --set train.min_loss_drop=0");
    ASSERT_EQ(t.code, 0) << t.out;
  }
  EXPECT_EQ(slurp(dir_ / "r1" / "runlog.jsonl"), slurp(dir_ / "r2" / "runlog.jsonl"));
  EXPECT_EQ(slurp(dir_ / "r1" / "best.ckpt"), slurp(dir_ / "r2" / "best.ckpt"));
}

TEST_F(CliTest, EvalRejectsMismatchedStreams) {
  synth("d");
  const auto t = run("train --task va --data " + path("d/manifest.json") + " --out " + path("run") +
                     " --set train.epochs=1 --set train.min_loss_drop=0 " + kSmallModel);
  ASSERT_EQ(t.code, 0) << t.out;
  ASSERT_EQ(run("synth --seed 3 --frames 300 --streams a:6,b:5 --out " + path("other")).code, 0);
  EXPECT_EQ(run("eval --checkpoint " + path("run/best.ckpt") + " --data " + path("other/manifest.json")).code, 2);
}

TEST_F(CliTest, NotConvergedExitsOne) {
  synth("d");
  const auto t = run("train --task expr --data " + path("d/manifest.json") + " --out " + path("run") +
                     " --set train.epochs=1 " + kSmallModel + " --set train.lr=0");
  EXPECT_EQ(t.code, 1);
}

TEST_F(CliTest, AblateRanksSubsets) {
  synth("d", "--signal a");
  const auto r = run("ablate --data " + path("d/manifest.json") + " --subsets 'a;b;a,b' --out " + path("t.txt") +
                     " --set train.epochs=3 --set train.task=all " + kSmallModel);
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string table = slurp(dir_ / "t.txt");
  EXPECT_NE(table.find("a+b"), std::string::npos);
  EXPECT_NE(r.out.find(table), std::string::npos);
  EXPECT_EQ(run("ablate --data " + path("d/manifest.json") + " --subsets 'zzz' " + kSmallModel).code, 2);
}
