#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "evd/checkpoint.hpp"
#include "evd/config.hpp"
#include "test_util.hpp"

using namespace evd;
using evd::test::scratch_dir;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(EVD_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// One small dataset shared by the tests below.
const fs::path& toy_root() {
  static const fs::path root = [] {
    const auto dir = scratch_dir("cli_toy");
    const auto r = cli("--out " + (dir / "data").string() +
                           " --seed 2 toygen --train-videos 2 --test-videos 1 --frames 5 --width 16 --height 16",
                       dir / "log.txt");
    EXPECT_EQ(r.code, 0) << r.output;
    return dir / "data";
  }();
  return root;
}

std::string train_args(const fs::path& out, const std::string& extra = "") {
  return "--out " + out.string() + " --seed 3 train --data " + toy_root().string() +
         " --spec K2 --window 3 --iters 6 --lr 0.01 --batch 2 --crop 12 " + extra;
}

}  // namespace

TEST(Cli, ToygenWritesDataset) {
  const auto& root = toy_root();
  EXPECT_TRUE(fs::exists(root / "manifest.txt"));
  EXPECT_TRUE(fs::exists(root / "toy000" / "rgb" / "0004.png"));
  EXPECT_TRUE(fs::exists(root / "toy000" / "depth" / "0004.png"));
  EXPECT_TRUE(fs::exists(root / "toy002" / "hazy" / "0000.png"));
  const auto kv = read_key_values(root / "run_manifest.txt");
  EXPECT_EQ(kv.front().second, "toygen");
}

TEST(Cli, TrainInfoEvalDehaze) {
  const auto dir = scratch_dir("cli_train");
  auto r = cli(train_args(dir / "run", "--eval-every 3"), dir / "train.txt");
  ASSERT_EQ(r.code, 0) << r.output;
  for (const char* f : {"final.evdn", "best.evdn", "train_log.csv", "run_manifest.txt"}) {
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  }
  const auto ckpt = load_checkpoint(dir / "run" / "final.evdn");
  EXPECT_EQ(ckpt.meta_at("iteration"), "6");
  EXPECT_EQ(ckpt.meta_at("spec"), "K_LEVEL(2)");
  EXPECT_NE(ckpt.find("momentum/conv1.col0.weight"), nullptr);

  r = cli("info --checkpoint " + (dir / "run" / "final.evdn").string(), dir / "info.txt");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("K_LEVEL(2)"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("4059"), std::string::npos) << r.output;

  r = cli("--out " + (dir / "eval").string() + " eval --checkpoint " + (dir / "run" / "final.evdn").string() +
              " --data " + toy_root().string(),
          dir / "eval.txt");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(dir / "eval" / "metrics.csv"));

  r = cli("--out " + (dir / "dehazed").string() + " dehaze --checkpoint " + (dir / "run" / "final.evdn").string() +
              " --in " + (toy_root() / "toy002").string(),
          dir / "dehaze.txt");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(dir / "dehazed" / "0004.png"));
}

TEST(Cli, SameSeedGivesIdenticalCheckpoints) {
  const auto dir = scratch_dir("cli_det");
  ASSERT_EQ(cli(train_args(dir / "a"), dir / "a.txt").code, 0);
  ASSERT_EQ(cli(train_args(dir / "b"), dir / "b.txt").code, 0);
  EXPECT_EQ(slurp(dir / "a" / "final.evdn"), slurp(dir / "b" / "final.evdn"));
}

TEST(Cli, ResumeAndSplitFromSingleFrame) {
  const auto dir = scratch_dir("cli_resume");
  ASSERT_EQ(cli("--out " + (dir / "single").string() + " train --data " + toy_root().string() +
                    " --spec SINGLE --iters 4 --batch 2 --crop 12 --lr 0.01",
                dir / "s.txt")
                .code,
            0);
  const auto r = cli(train_args(dir / "split", "--init " + (dir / "single" / "final.evdn").string()), dir / "p.txt");
  EXPECT_EQ(r.code, 0) << r.output;
  const auto bad = cli("--out " + (dir / "bad").string() + " train --data " + toy_root().string() +
                           " --spec J --window 3 --iters 1 --init " + (dir / "split" / "final.evdn").string(),
                       dir / "bad.txt");
  EXPECT_EQ(bad.code, 1) << bad.output;
}

TEST(Cli, ConfigFileAndFlagPrecedence) {
  const auto dir = scratch_dir("cli_config");
  write_key_values(dir / "c.txt", {{"lr", "0.02"}, {"max_iters", "3"}, {"batch", "2"}, {"crop", "12"}});
  const auto r = cli("--config " + (dir / "c.txt").string() + " --out " + (dir / "o").string() + " train --data " +
                         toy_root().string() + " --spec I --window 3 --iters 2",
                     dir / "log.txt");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(load_checkpoint(dir / "o" / "final.evdn").meta_at("iteration"), "2");
  const auto kv = read_key_values(dir / "o" / "run_manifest.txt");
  bool saw_lr = false;
  for (const auto& [k, v] : kv) saw_lr = saw_lr || (k == "lr" && v == "0.02");
  EXPECT_TRUE(saw_lr);
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch_dir("cli_codes");
  EXPECT_EQ(cli("--help", dir / "h.txt").code, 0);
  EXPECT_EQ(cli("train --bogus-flag 1", dir / "u.txt").code, 1);
  EXPECT_EQ(cli("", dir / "n.txt").code, 1);
  const auto missing = cli("info --checkpoint " + (dir / "nope.evdn").string(), dir / "m.txt");
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.output.find("nope.evdn"), std::string::npos);
  EXPECT_EQ(cli("--out " + (dir / "x").string() + " train --data " + toy_root().string() + " --window 4",
                dir / "w.txt")
                .code,
            1);
  EXPECT_EQ(cli("--out " + (dir / "y").string() + " train --data " + (dir / "nodata").string(), dir / "d.txt").code,
            2);
}
