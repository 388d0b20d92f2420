#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "vclip/data.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "vclip_cli";

int run(const std::string& args) {
  const std::string cmd = std::string(VITACLIP_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    write(kRoot / "small.json",
          R"({"seed": 3, "data": {"train_per_class": 4, "val_per_class": 2, "zeroshot_per_class": 2},
              "train": {"epochs": 1}})");
    ASSERT_EQ(run("--config " + (kRoot / "small.json").string() + " gen --out " + (kRoot / "data").string()), 0);
    ASSERT_EQ(run("--config " + (kRoot / "small.json").string() + " train --data " +
                  (kRoot / "data").string() + " --out " + (kRoot / "run").string()),
              0);
  }
};

}  // namespace

TEST_F(Cli, FullPipelineSucceeds) {
  EXPECT_TRUE(fs::exists(kRoot / "run/checkpoint/manifest.json"));
  const std::string metrics = vclip::detail::read_file(kRoot / "run/metrics.csv");
  EXPECT_EQ(metrics.substr(0, metrics.find('\n')), "epoch,step,lr,loss,top1_train");
  const std::string ck = (kRoot / "run/checkpoint").string(), data = (kRoot / "data").string();
  EXPECT_EQ(run("eval --ckpt " + ck + " --data " + data + " --split zeroshot --mode manual --out " +
                (kRoot / "zs.json").string()),
            0);
  auto rep = nlohmann::json::parse(vclip::detail::read_file(kRoot / "zs.json"));
  EXPECT_EQ(rep["n_samples"], 8);
  EXPECT_EQ(rep["mode"], "manual");
  EXPECT_EQ(run("rollout --ckpt " + ck + " --clip " + data + "/clips/val_00000.vclp --out " +
                (kRoot / "roll").string()),
            0);
  EXPECT_TRUE(fs::exists(kRoot / "roll/frame_03_heat.pgm"));
  EXPECT_TRUE(fs::exists(kRoot / "roll/rollout.json"));
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("eval --ckpt x"), 2);
  EXPECT_EQ(run("eval --ckpt x --data y --split test"), 2);
  write(kRoot / "bad.json", R"({"sed": 1})");
  EXPECT_EQ(run("--config " + (kRoot / "bad.json").string() + " gen --out " + (kRoot / "g").string()), 2);
  write(kRoot / "bad2.json", R"({"data": {"speeds": 9}})");
  EXPECT_EQ(run("--config " + (kRoot / "bad2.json").string() + " gen --out " + (kRoot / "g").string()), 2);
  write(kRoot / "bad3.json", R"({"model": {"num_classes": 5}})");
  EXPECT_EQ(run("--config " + (kRoot / "bad3.json").string() + " train --data " + (kRoot / "data").string() +
                " --out " + (kRoot / "t").string()),
            2);
}

TEST_F(Cli, MissingArtifactsExitFour) {
  EXPECT_EQ(run("eval --ckpt " + (kRoot / "nope").string() + " --data " + (kRoot / "data").string()), 4);
  EXPECT_EQ(run("train --data " + (kRoot / "nope").string() + " --out " + (kRoot / "t").string()), 4);
  EXPECT_EQ(run("rollout --ckpt " + (kRoot / "run/checkpoint").string() + " --clip " +
                (kRoot / "nope.vclp").string() + " --out " + (kRoot / "r").string()),
            4);
}

TEST_F(Cli, CorruptInputsExitFive) {
  write(kRoot / "junk.vclp", "VCLPjunk");
  EXPECT_EQ(run("rollout --ckpt " + (kRoot / "run/checkpoint").string() + " --clip " +
                (kRoot / "junk.vclp").string() + " --out " + (kRoot / "r").string()),
            5);
  vclip::write_clip({vclip::Tensor({2, 8, 8, 1}, 0.5)}, kRoot / "short.vclp");
  EXPECT_EQ(run("rollout --ckpt " + (kRoot / "run/checkpoint").string() + " --clip " +
                (kRoot / "short.vclp").string() + " --out " + (kRoot / "r").string()),
            5);
  fs::copy(kRoot / "run/checkpoint", kRoot / "broken", fs::copy_options::recursive);
  write(kRoot / "broken/weights.bin", "tiny");
  EXPECT_EQ(run("eval --ckpt " + (kRoot / "broken").string() + " --data " + (kRoot / "data").string()), 5);
}
