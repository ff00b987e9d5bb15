#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tint/checkpoint.hpp"
#include "tint/tensor.hpp"

#ifndef TINT_CLI_PATH
#error "TINT_CLI_PATH must point at the tint executable"
#endif

namespace tint {
namespace {

namespace fs = std::filesystem;

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("tint_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Runs the CLI with stdout captured to a file; returns the exit status.
  int run(const std::string& args, std::string* out = nullptr) {
    const fs::path log = dir_ / "stdout.txt";
    const std::string cmd = std::string(TINT_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    if (out != nullptr) {
      std::ifstream in(log);
      std::stringstream ss;
      ss << in.rdbuf();
      *out = ss.str();
    }
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  Tensor logits(const std::string& sub) {
    return read_tensor_bundle(dir_ / sub / "logits").tensors.at(0).second;
  }

  fs::path dir_;
};

TEST_F(Cli, CountPrintsTotals) {
  std::string out;
  ASSERT_EQ(run("count --preset opt125m", &out), 0) << out;
  EXPECT_NE(out.find("total 1.276b"), std::string::npos) << out;
  EXPECT_NE(out.find("c1=85 c2=91 c3=63"), std::string::npos) << out;
  ASSERT_EQ(run("count --preset toy-16 --set stack=1", &out), 0) << out;
  EXPECT_NE(out.find("D_sim=16 H_sim=1"), std::string::npos) << out;
}

TEST_F(Cli, BuildPrintsSchedule) {
  std::string out;
  ASSERT_EQ(run("build --preset toy-8", &out), 0) << out;
  EXPECT_NE(out.find("charged_parameters="), std::string::npos);
  EXPECT_NE(out.find("readout"), std::string::npos);
}

TEST_F(Cli, EtaZeroMatchesPlainForward) {
  const std::string common = "--preset toy-16 --seed 3 --set eta=0 ";
  ASSERT_EQ(run("simulate " + common + "--out " + (dir_ / "sim").string()), 0);
  ASSERT_EQ(run("simulate " + common + "--no-tint --out " + (dir_ / "plain").string()), 0);
  EXPECT_LE(max_abs_diff(logits("sim"), logits("plain")), 1e-4f);
}

TEST_F(Cli, SimulateMatchesOracleAndIsDeterministic) {
  const std::string common = "--preset toy-16 --seed 5 --set eta=0.05 ";
  ASSERT_EQ(run("simulate " + common + "--out " + (dir_ / "a").string()), 0);
  ASSERT_EQ(run("simulate " + common + "--out " + (dir_ / "b").string()), 0);
  ASSERT_EQ(run("oracle " + common + "--regime simulated --out " + (dir_ / "o").string()), 0);
  ASSERT_EQ(run("oracle " + common + "--regime exact --out " + (dir_ / "x").string()), 0);
  EXPECT_TRUE(logits("a").bitwise_equal(logits("b")));
  EXPECT_LE(max_abs_diff(logits("a"), logits("o")), 1e-3f);
  EXPECT_GT(max_abs_diff(logits("o"), logits("x")), 0.0f);

  // The updated checkpoint feeds back into the next run.
  ASSERT_EQ(run("simulate " + common + "--checkpoint " + (dir_ / "a" / "checkpoint").string() +
                " --out " + (dir_ / "c").string()),
            0);
}

TEST_F(Cli, TokenFileInput) {
  std::ofstream(dir_ / "tokens.txt") << "1 2 3 1 2 3 1 2 3 1 2 3\n";
  std::string out;
  ASSERT_EQ(run("simulate --preset toy-16 --tokens " + (dir_ / "tokens.txt").string() + " --out " +
                    (dir_ / "t").string(),
                &out),
            0)
      << out;
  EXPECT_EQ(logits("t").rows(), 4u);
  std::ofstream(dir_ / "big.txt") << "1 99\n";
  EXPECT_EQ(run("simulate --preset toy-16 --tokens " + (dir_ / "big.txt").string()), 2);
}

TEST_F(Cli, ExitCodes) {
  std::ofstream(dir_ / "bad.cfg") << "colour = blue\n";
  EXPECT_EQ(run("count --config " + (dir_ / "bad.cfg").string()), 2);
  EXPECT_EQ(run("count --config " + (dir_ / "missing.cfg").string()), 3);
  EXPECT_EQ(run("count --set split=40"), 2);
  EXPECT_EQ(run("verify --only no_such_check"), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("simulate --checkpoint " + (dir_ / "nowhere").string()), 3);
  EXPECT_EQ(run("simulate --preset toy-16 --set stack=3 --out " + (dir_ / "s3").string()), 2);
}

TEST_F(Cli, VerifyFilterAndFaultInjection) {
  std::string out;
  ASSERT_EQ(run("verify --only ln_firstorder", &out), 0) << out;
  EXPECT_NE(out.find("\"check\":\"ln_firstorder\""), std::string::npos);
  EXPECT_EQ(out.find("\"check\":\"act_firstorder\""), std::string::npos);
  ASSERT_EQ(run("verify --only linear_modules --inject-fault", &out), 1) << out;
  EXPECT_NE(out.find("\"status\":\"fail\""), std::string::npos);
  EXPECT_NE(out.find("\"bound\":1e-05"), std::string::npos);
}

TEST_F(Cli, VerifyReportsAreReproducible) {
  const std::string a = (dir_ / "a.jsonl").string(), b = (dir_ / "b.jsonl").string();
  ASSERT_EQ(run("verify --only linear_modules,determinism --seed 11 --report " + a), 0);
  ASSERT_EQ(run("verify --only linear_modules,determinism --seed 11 --report " + b), 0);
  std::ifstream fa(a), fb(b);
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  EXPECT_FALSE(sa.str().empty());
  EXPECT_EQ(sa.str(), sb.str());
}

}  // namespace
}  // namespace tint
