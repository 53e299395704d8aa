#include <gtest/gtest.h>

#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "iff/checkpoint.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    fs::path d = fs::path(testing::TempDir()) / "iffdet_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string path(const std::string& name) { return (work() / name).string(); }

// Runs iffdet with args; stdout and stderr go to <work>/last.out and last.err.
int iffdet(const std::string& args) {
  const std::string cmd = std::string(IFFDET_PATH) + " " + args + " >" + path("last.out") + " 2>" + path("last.err");
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& p) {
  std::istringstream is(slurp(p));
  std::vector<std::string> out;
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

// Small shared dataset and checkpoint, made once.
class Cli : public testing::Test {
 protected:
  static void SetUpTestSuite() {
    ASSERT_EQ(iffdet("gen --count 120 --seed 4 --out " + path("small.txt")), 0);
    ASSERT_EQ(iffdet("train --data " + path("small.txt") + " --mi 1 --epochs 2 --seed 3 --out " + path("m1.ckpt")), 0);
  }
};

}  // namespace

TEST_F(Cli, GenIsDeterministic) {
  ASSERT_EQ(iffdet("gen --count 50 --seed 9 --out " + path("a.txt")), 0);
  ASSERT_EQ(iffdet("gen --count 50 --seed 9 --out " + path("b.txt")), 0);
  EXPECT_EQ(slurp(path("a.txt")), slurp(path("b.txt")));
  ASSERT_EQ(iffdet("gen --count 50 --seed 10 --out " + path("c.txt")), 0);
  EXPECT_NE(slurp(path("a.txt")), slurp(path("c.txt")));
}

TEST_F(Cli, GenWritesOneRecordPerScene) {
  ASSERT_EQ(iffdet("gen --count 2000 --seed 1 --out " + path("big.txt")), 0);
  std::size_t records = 0;
  for (const auto& l : lines(path("big.txt"))) records += l.rfind("scene ", 0) == 0;
  EXPECT_EQ(records, 2000u);
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(iffdet(""), 2);
  EXPECT_EQ(iffdet("gen --count 0 --out " + path("zero.txt")), 2);
  EXPECT_EQ(iffdet("gen --count 10"), 2);
  EXPECT_EQ(iffdet("verify --suite thoerem1"), 2);
  EXPECT_EQ(iffdet("train --data " + path("does_not_exist.txt") + " --out " + path("x.ckpt")), 2);
  EXPECT_EQ(iffdet("frobnicate"), 2);
}

TEST_F(Cli, VerifySuites) {
  EXPECT_EQ(iffdet("verify --suite theorem1 --trials 200 --csv " + path("t1.csv")), 0);
  EXPECT_NE(slurp(path("last.out")).find("0 violations"), std::string::npos);
  EXPECT_EQ(lines(path("t1.csv")).size(), 1u + 4 * 200);  // four slopes per trial
  EXPECT_EQ(iffdet("verify --suite parseval --trials 200"), 0);
  EXPECT_EQ(iffdet("verify --suite convtheorem --trials 50"), 0);
  EXPECT_EQ(iffdet("verify --suite theorem2 --trials 20"), 0);
}

TEST_F(Cli, TrainZeroEpochsSavesInitialisation) {
  ASSERT_EQ(iffdet("train --data " + path("small.txt") + " --mi 0 --epochs 0 --seed 8 --out " + path("e0.ckpt")), 0);
  const auto ck = iff::load_checkpoint(path("e0.ckpt"));
  EXPECT_EQ(ck.model.params, iff::DetectorModel::initialize(8, ck.model.config).params);
  EXPECT_EQ(ck.model.config.iterations, 0u);
  EXPECT_EQ(ck.meta.seed, 8u);
  EXPECT_EQ(lines(path("e0.ckpt.loss.csv")).front(), "epoch,loss,map_estimate");
}

TEST_F(Cli, OpenLoopTrainingKeepsFeedbackAtZero) {
  ASSERT_EQ(iffdet("train --data " + path("small.txt") + " --mi 0 --epochs 1 --out " + path("mi0.ckpt")), 0);
  const auto ck = iff::load_checkpoint(path("mi0.ckpt"));
  for (double v : ck.model.params.get(iff::param::kFeedbackW).data()) EXPECT_EQ(v, 0.0);
}

TEST_F(Cli, TrainIsReproducible) {
  ASSERT_EQ(iffdet("train --data " + path("small.txt") + " --mi 1 --epochs 2 --seed 3 --out " + path("again.ckpt")), 0);
  EXPECT_EQ(slurp(path("again.ckpt")), slurp(path("m1.ckpt")));
  EXPECT_EQ(slurp(path("again.ckpt.loss.csv")), slurp(path("m1.ckpt.loss.csv")));
  EXPECT_EQ(lines(path("m1.ckpt.loss.csv")).size(), 4u);
}

TEST_F(Cli, DivergentTrainingExitsOne) {
  EXPECT_EQ(iffdet("train --data " + path("small.txt") + " --epochs 2 --lr 1e300 --out " + path("boom.ckpt")), 1);
  EXPECT_NE(slurp(path("last.err")).find("lr"), std::string::npos);
}

TEST_F(Cli, SweepSingleRow) {
  ASSERT_EQ(iffdet("sweep-mi --data " + path("small.txt") + " --mi-list 0 --epochs 1 --out " + path("sweep.csv")), 0);
  const auto rows = lines(path("sweep.csv"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], "mi,map,final_loss,epochs");
  EXPECT_EQ(rows[1].substr(0, 2), "0,");
}

TEST_F(Cli, InferWritesDetections) {
  ASSERT_EQ(iffdet("infer --ckpt " + path("m1.ckpt") + " --data " + path("small.txt") + " --score 0.05 --out " +
                   path("dets.csv")),
            0);
  const auto rows = lines(path("dets.csv"));
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows[0], "scene,class,score,x,y,w,h");
  EXPECT_NE(slurp(path("last.err")).find("mAP"), std::string::npos);
}

TEST_F(Cli, CorruptCheckpointExitsOne) {
  std::string bytes = slurp(path("m1.ckpt"));
  std::ofstream(path("corrupt.ckpt"), std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_EQ(iffdet("infer --ckpt " + path("corrupt.ckpt") + " --data " + path("small.txt")), 1);
  EXPECT_NE(slurp(path("last.err")).find("checkpoint"), std::string::npos);
}

TEST_F(Cli, AnalyzeOutputs) {
  const std::string base = "analyze --ckpt " + path("m1.ckpt") + " --data " + path("small.txt") + " --scenes 20 --out-dir ";
  ASSERT_EQ(iffdet(base + path("an1") + " --timing-images 100"), 0);
  ASSERT_EQ(iffdet(base + path("an2") + " --timing-images 0"), 0);
  std::vector<std::string> files = {"histogram_with.csv", "histogram_without.csv", "stability.csv", "summary.csv"};
  for (int i = 0; i < 4; ++i) {
    files.push_back("heatmap_with_" + std::to_string(i) + ".pgm");
    files.push_back("heatmap_without_" + std::to_string(i) + ".pgm");
  }
  for (const auto& f : files) {
    ASSERT_TRUE(fs::exists(path("an1") + "/" + f)) << f;
    EXPECT_EQ(slurp(path("an1") + "/" + f), slurp(path("an2") + "/" + f)) << f;
  }
  EXPECT_EQ(slurp(path("an1") + "/heatmap_with_0.pgm").substr(0, 13), "P5\n48 48\n255\n");
  EXPECT_EQ(slurp(path("an1") + "/heatmap_with_0.pgm").size(), 13u + 48 * 48);
  EXPECT_EQ(lines(path("an1") + "/histogram_with.csv").size(), 51u);
  const auto timing = lines(path("an1") + "/timing.csv");
  ASSERT_EQ(timing.size(), 2u);
  const double ratio = std::stod(timing[1].substr(timing[1].rfind(',') + 1));
  EXPECT_GT(ratio, 0.8);
  EXPECT_LT(ratio, 1.2);
  EXPECT_FALSE(fs::exists(path("an2") + "/timing.csv"));
}

TEST_F(Cli, AnalyzeOpenLoopHeatmapsCoincide) {
  ASSERT_EQ(iffdet("train --data " + path("small.txt") + " --mi 0 --epochs 1 --out " + path("open.ckpt")), 0);
  ASSERT_EQ(iffdet("analyze --ckpt " + path("open.ckpt") + " --data " + path("small.txt") +
                   " --scenes 10 --timing-images 0 --out-dir " + path("open")),
            0);
  for (int i = 0; i < 4; ++i) {
    const std::string with = path("open") + "/heatmap_with_" + std::to_string(i) + ".pgm";
    ASSERT_TRUE(fs::exists(with));
    EXPECT_EQ(slurp(with), slurp(path("open") + "/heatmap_without_" + std::to_string(i) + ".pgm"));
  }
  EXPECT_EQ(slurp(path("open") + "/histogram_with.csv"), slurp(path("open") + "/histogram_without.csv"));
}
