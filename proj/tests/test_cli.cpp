#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const char* kCli = VOXSEG_CLI_PATH;

struct RunResult {
  int exit_code;
  std::string output;
};

RunResult run(const std::string& args) {
  const auto out_file = fs::temp_directory_path() / "voxseg_cli_out.txt";
  const std::string cmd = std::string(kCli) + " " + args + " > " + out_file.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  std::ifstream in(out_file);
  std::string output((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return {WEXITSTATUS(rc), output};
}

struct Pipeline : ::testing::Test {
  static fs::path dir;
  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / ("voxseg_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  static void TearDownTestSuite() { fs::remove_all(dir); }

  static std::string tiny_args() {
    return " --set phantom_shape=16,16,16 --set num_classes=3 --set intensity_means=0,1,2"
           " --set min_voxels_per_class=8 --set noise_sigma=0.3 --set num_stages=3"
           " --set downsample_strides=1,2,2 --set base_channels=4 --set max_channels=16"
           " --set patch_size=8,8,8 --set total_epochs=2 --set iterations_per_epoch=3"
           " --set crop_pseudo_warmup_epochs=1 --set crop_pseudo_refresh_epochs=1";
  }
};
fs::path Pipeline::dir;

}  // namespace

TEST_F(Pipeline, A_GenData) {
  const auto r = run("gen-data --out " + (dir / "ds").string() + " --seed 3" + tiny_args() +
                     " --set n_labeled=2 --set n_unlabeled=4");
  ASSERT_EQ(0, r.exit_code) << r.output;
  EXPECT_TRUE(fs::exists(dir / "ds" / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "ds" / "config_resolved.txt"));
  EXPECT_TRUE(fs::exists(dir / "ds" / "images" / "case_0000.raw"));
  EXPECT_TRUE(fs::exists(dir / "ds" / "hidden" / "case_0002.json"));
}

TEST_F(Pipeline, B_TrainSsl) {
  const auto r = run("train --data " + (dir / "ds").string() + " --out " + (dir / "run").string() +
                     " --seed 3 --mode ssl --loss rs" + tiny_args());
  ASSERT_EQ(0, r.exit_code) << r.output;
  EXPECT_TRUE(fs::exists(dir / "run" / "train_log.csv"));
  EXPECT_TRUE(fs::exists(dir / "run" / "ckpt" / "epoch_2" / "net_a"));
  EXPECT_TRUE(fs::exists(dir / "run" / "ckpt" / "epoch_2" / "net_b"));
  std::ifstream csv(dir / "run" / "train_log.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ("epoch,lr,sup_a,sup_b,cons_a,cons_b,val_dsc", header);
}

TEST_F(Pipeline, C_InferAndEvaluate) {
  auto r = run("infer --model " + (dir / "run" / "ckpt" / "epoch_2" / "net_a").string() +
               " --input " + (dir / "ds").string() + " --out " + (dir / "preds").string() +
               " --fusion label_only --tta none" + tiny_args());
  ASSERT_EQ(0, r.exit_code) << r.output;
  EXPECT_TRUE(fs::exists(dir / "preds" / "case_0000.raw"));

  r = run("evaluate --pred " + (dir / "preds").string() + " --gt " + (dir / "ds" / "labels").string() +
          " --out " + (dir / "eval.csv").string() + " --classes lesion_a,lesion_b");
  ASSERT_EQ(0, r.exit_code) << r.output;
  std::ifstream csv(dir / "eval.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ("case,mean,lesion_a,lesion_b", header);
  int rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  EXPECT_EQ(3, rows);  // 2 cases + mean row
}

TEST_F(Pipeline, D_GradCheckPasses) {
  const auto r = run("grad-check --seed 5");
  EXPECT_EQ(0, r.exit_code) << r.output;
  EXPECT_NE(r.output.find("rs"), std::string::npos);
}

TEST_F(Pipeline, E_CountParams) {
  const auto r = run("count-params" + tiny_args());
  EXPECT_EQ(0, r.exit_code) << r.output;
  EXPECT_NE(r.output.find("total trainable parameters:"), std::string::npos);
}

TEST_F(Pipeline, F_ExitCodes) {
  // unknown config key: exit 2, message names the key and suggests the fix
  auto r = run("train --data x --out y --set batchsize=2");
  EXPECT_EQ(2, r.exit_code);
  EXPECT_NE(r.output.find("batchsize"), std::string::npos);
  EXPECT_NE(r.output.find("batch_size"), std::string::npos);

  // missing dataset: runtime failure, exit 3
  r = run("train --data " + (dir / "nonexistent").string() + " --out " + (dir / "y").string());
  EXPECT_EQ(3, r.exit_code);

  // missing required option: usage/configuration error
  r = run("train");
  EXPECT_EQ(2, r.exit_code);

  // bad enum value through a dedicated flag
  r = run("train --data " + (dir / "ds").string() + " --out " + (dir / "y").string() +
          " --mode frobnicate" + tiny_args());
  EXPECT_EQ(2, r.exit_code);
}

TEST_F(Pipeline, G_ResolvedConfigReproducesRun) {
  const auto r = run("train --data " + (dir / "ds").string() + " --out " + (dir / "run2").string() +
                     " --config " + (dir / "run" / "config_resolved.txt").string());
  ASSERT_EQ(0, r.exit_code) << r.output;
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  EXPECT_EQ(slurp(dir / "run" / "train_log.csv"), slurp(dir / "run2" / "train_log.csv"));
  EXPECT_EQ(slurp(dir / "run" / "ckpt" / "epoch_2" / "net_a"),
            slurp(dir / "run2" / "ckpt" / "epoch_2" / "net_a"));
}
