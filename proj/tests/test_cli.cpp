#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include "kpat/io.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("kpat_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" +
            std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Outcome run(const std::string& args) {
    const auto log = dir_ / "out.txt";
    const std::string cmd = "cd '" + dir_.string() + "' && '" KPAT_CLI_PATH "' --out-dir res " + args + " > '" +
                            log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, kpat::read_file(log)};
  }

  fs::path dir_;
};

const char* kOgdMeta = R"({"type":"meta","theta1_norm":0,"comparator_norm":0})";

std::string ogd_step(int step, double loss, double cmp) {
  return R"({"type":"step","step":)" + std::to_string(step) + R"(,"loss":)" + std::to_string(loss) +
         R"(,"accuracy":0,"readout_norms":[0],"first_layer_drift":0,"grad_readout_norm":0.1,"grad_first_norm":0,"eta":1,"comparator_loss":)" +
         std::to_string(cmp) + "}\n";
}

}  // namespace

TEST_F(Cli, BoundsThm2PrintsBothBounds) {
  const auto r = run("bounds thm2 --n 10 --k 3 --q 4 --c 1");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("0.476190"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("0.033333"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(dir_ / "res" / "bounds_thm2.csv"));
}

TEST_F(Cli, JsonlFormatSwitch) {
  EXPECT_EQ(run("--format jsonl bounds thm1 --n 16 --k 3 --q 1024 --T 1000").code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "res" / "bounds_thm1.jsonl"));
}

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("bounds thm2 --n ten").code, 1);
  EXPECT_EQ(run("--threads 0 bounds thm2 --n 10 --k 3 --q 4").code, 1);
  EXPECT_EQ(run("bounds thm2 --n 3 --k 5 --q 4").code, 1);
  const auto h = run("--help");
  EXPECT_EQ(h.code, 0);
  EXPECT_NE(h.out.find("bounds"), std::string::npos);
}

TEST_F(Cli, TheoremModeReluIsAValidationError) {
  const auto r = run("train --arch cnn --n 8 --k 2 --q 16 --steps 5 --theorem-mode --activation relu");
  EXPECT_EQ(r.code, 1) << r.out;
}

TEST_F(Cli, FailedRegretCheckExitsTwo) {
  kpat::write_file(dir_ / "bad.jsonl", std::string(kOgdMeta) + "\n" + ogd_step(0, 5, 0) + ogd_step(1, 5, 0) +
                                           ogd_step(2, 5, 0));
  const auto r = run("verify ogd --trajectory bad.jsonl");
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_NE(r.out.find("FAILED"), std::string::npos) << r.out;
  kpat::write_file(dir_ / "good.jsonl", std::string(kOgdMeta) + "\n" + ogd_step(0, 0.5, 0.5) +
                                            ogd_step(1, 0.5, 0.5) + ogd_step(2, 0.5, 0.5));
  EXPECT_EQ(run("verify ogd --trajectory good.jsonl").code, 0);
}

TEST_F(Cli, OfflineEmptyCacheExitsThree) {
  const auto r = run("--offline mnist fetch --cache-dir empty_cache");
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_EQ(run("verify ogd --trajectory missing.jsonl").code, 3);
}

TEST_F(Cli, TrainThenVerifyDriftOnTheTrajectory) {
  const auto t = run("--seed 3 train --arch cnn --n 8 --k 2 --q 32 --steps 40 --eta 0.5 --theorem-mode");
  ASSERT_EQ(t.code, 0) << t.out;
  const auto traj = dir_ / "res" / "train_cnn.jsonl";
  ASSERT_TRUE(fs::exists(traj));
  EXPECT_TRUE(fs::exists(dir_ / "res" / "train_cnn_summary.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "res" / "train_cnn.params.json"));
  const auto first = kpat::read_file(traj);
  const auto v = run("verify drift --trajectory res/train_cnn.jsonl");
  EXPECT_EQ(v.code, 0) << v.out;
  ASSERT_EQ(run("--seed 3 --threads 2 train --arch cnn --n 8 --k 2 --q 32 --steps 40 --eta 0.5 --theorem-mode").code, 0);
  EXPECT_EQ(kpat::read_file(traj), first);
}

TEST_F(Cli, ConstructSmallStudyPasses) {
  const auto r = run("construct --n 8 --k 2 --trials 10");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("PASSED"), std::string::npos) << r.out;
}

TEST_F(Cli, PlotFromCsv) {
  kpat::write_file(dir_ / "c.csv", "x,y\n0,1\n1,2\n");
  const auto r = run("plot --csv c.csv --x x --y y --out c.svg");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(kpat::read_file(dir_ / "c.svg").rfind("<?xml", 0), 0u);
  EXPECT_EQ(run("plot --csv c.csv --x x --y z --out c.svg").code, 1);
}
