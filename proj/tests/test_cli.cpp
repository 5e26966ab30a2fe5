// Drives the ccenet_cli binary end to end on tiny datasets.
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "ccenet/ccenet.hpp"

using namespace ccenet;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "ccenet_test_cli";

int run(const std::string& args, const fs::path& log = kRoot / "last.log") {
  const std::string cmd = std::string(CCENET_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::vector<std::string> lines(const fs::path& p) {
  std::istringstream is(slurp(p));
  std::vector<std::string> out;
  for (std::string l; std::getline(is, l);) {
    if (!l.empty()) out.push_back(l);
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string f; std::getline(ss, f, sep);) out.push_back(f);
  return out;
}

// Shared tiny dataset and a short training run, built once.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    ASSERT_EQ(run("gen-data --out " + (kRoot / "data").string() + " --n 8 --size 32 --seed 3"), 0);
    const std::string common = " --data " + (kRoot / "data").string() + " --size 32 --batch 2 --total-iters 10";
    ASSERT_EQ(run("train" + common + " --out " + (kRoot / "full").string()), 0) << slurp(kRoot / "last.log");
    ASSERT_EQ(run("train" + common + " --no-cca --no-cgl --no-aux --out " + (kRoot / "base").string()), 0);
  }
  static fs::path dir(const std::string& name) { return kRoot / name; }
};

}  // namespace

TEST_F(CliTest, GenDataIsByteIdenticalPerSeed) {
  ASSERT_EQ(run("gen-data --out " + dir("again").string() + " --n 8 --size 32 --seed 3"), 0);
  for (const auto& e : fs::recursive_directory_iterator(dir("data"))) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), dir("data"));
    EXPECT_EQ(slurp(e.path()), slurp(dir("again") / rel)) << rel;
  }
  EXPECT_EQ(load_manifest(dir("data")).size(), 8u);
}

TEST_F(CliTest, IndivisibleSizeIsConfigExit) {
  EXPECT_EQ(run("gen-data --out " + dir("bad").string() + " --n 2 --size 60"), 2);
  EXPECT_NE(slurp(kRoot / "last.log").find("divisible by 8"), std::string::npos) << slurp(kRoot / "last.log");
  EXPECT_EQ(run("train --data " + dir("data").string() + " --out " + dir("bad2").string() + " --size 60"), 2);
  EXPECT_EQ(run("frobnicate"), 2);
}

TEST_F(CliTest, TrainLogHasOneRowPerIterationAndPolySchedule) {
  const auto rows = lines(dir("full") / "train_log.csv");
  ASSERT_EQ(rows.size(), 11u);
  EXPECT_EQ(rows[0], "iter,lr,wbce_main,dice_main,wbce_aux,dice_aux,total");
  const ModelConfig cfg = ModelConfig::from_text(slurp(dir("full") / "resolved_config.txt"));
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const auto f = split(rows[k], ',');
    ASSERT_EQ(f.size(), 7u);
    const double it = std::stod(f[0]);
    EXPECT_EQ(it, static_cast<double>(k - 1));
    EXPECT_NEAR(std::stod(f[1]), cfg.lr0 * std::pow(1.0 - it / 10.0, cfg.poly_power), 1e-12);
    EXPECT_TRUE(std::isfinite(std::stod(f[6])));
  }
  EXPECT_TRUE(fs::exists(dir("full") / "checkpoint.bin"));
}

TEST_F(CliTest, AblatedCheckpointHoldsNoDisabledModules) {
  const Checkpoint ck = load_checkpoint((dir("base") / "checkpoint.bin").string());
  EXPECT_FALSE(ck.config().use_cca);
  for (const auto& [name, t] : ck.tensors) {
    EXPECT_NE(name.rfind("cca", 0), 0u) << name;
    EXPECT_NE(name.rfind("cgl", 0), 0u) << name;
    EXPECT_NE(name.rfind("aux", 0), 0u) << name;
  }
}

TEST_F(CliTest, PredictWritesBinaryMasksAtInputSize) {
  ASSERT_EQ(run("predict --ckpt " + (dir("full") / "checkpoint.bin").string() + " --data " + dir("data").string() +
                " --out " + dir("pred").string() + " --dump-gates --dump-affinity"),
            0)
      << slurp(kRoot / "last.log");
  const std::string ext = image_extension();
  for (const auto& s : load_manifest(dir("data"))) {
    const Image8 m = read_image((dir("pred") / (s.id + "_pred." + ext)).string());
    EXPECT_EQ(m.width, 32u);
    EXPECT_EQ(m.height, 32u);
    for (auto p : m.pixels) ASSERT_TRUE(p == 0 || p == 255);
    EXPECT_TRUE(fs::exists(dir("pred") / (s.id + "_gate_img_s2." + ext)));
    EXPECT_TRUE(fs::exists(dir("pred") / (s.id + "_affinity." + ext)));
  }
}

TEST_F(CliTest, PredictRejectsMismatchedRequests) {
  const std::string base_ckpt = (dir("base") / "checkpoint.bin").string();
  EXPECT_EQ(run("predict --ckpt " + base_ckpt + " --data " + dir("data").string() + " --out " +
                dir("p2").string() + " --dump-gates"),
            2);
  const std::string log = slurp(kRoot / "last.log");
  EXPECT_NE(log.find("checkpoint config"), std::string::npos) << log;
  {
    ModelConfig c = ModelConfig::from_text(slurp(dir("full") / "resolved_config.txt"));
    std::ofstream(dir("full_cfg.txt")) << c.to_text();
  }
  EXPECT_EQ(run("predict --ckpt " + base_ckpt + " --data " + dir("data").string() + " --out " + dir("p3").string() +
                " --config " + dir("full_cfg.txt").string()),
            2);
  EXPECT_EQ(run("predict --ckpt " + (kRoot / "missing.bin").string() + " --data " + dir("data").string() +
                " --out " + dir("p4").string()),
            1);
}

TEST_F(CliTest, EvalOfGroundTruthIsPerfect) {
  // ground-truth masks copied in as predictions
  fs::create_directories(dir("gtpred"));
  const std::string ext = image_extension();
  for (const auto& s : load_manifest(dir("data"))) {
    Tensor m = s.mask;
    write_image((dir("gtpred") / (s.id + "_pred." + ext)).string(), to_image8(m));
  }
  ASSERT_EQ(run("eval --pred " + dir("gtpred").string() + " --gt " + dir("data").string() + " --out " +
                dir("eval").string() + " --histogram 4"),
            0)
      << slurp(kRoot / "last.log");
  const auto j = nlohmann::json::parse(slurp(dir("eval") / "summary.json"));
  for (const char* k : {"AC", "DI", "JA", "SE", "SP"}) EXPECT_EQ(j["groups"]["overall"][k].get<double>(), 100.0) << k;
  EXPECT_EQ(j["images"]["overall"].get<int>(), 8);
  const auto hist = lines(dir("eval") / "histogram.csv");
  ASSERT_EQ(hist.size(), 5u);
  std::size_t total = 0;
  for (std::size_t k = 1; k < hist.size(); ++k) total += std::stoul(split(hist[k], ',')[2]);
  EXPECT_EQ(total, 8u);
  EXPECT_EQ(lines(dir("eval") / "per_image.csv").size(), 9u);
}

TEST_F(CliTest, EvalReportsUnmatchedIds) {
  fs::create_directories(dir("partial"));
  const std::string ext = image_extension();
  auto data = load_manifest(dir("data"));
  for (std::size_t k = 0; k < 5; ++k) {
    write_image((dir("partial") / (data[k].id + "_pred." + ext)).string(), to_image8(data[k].mask));
  }
  write_image((dir("partial") / ("stranger_pred." + ext)).string(), to_image8(data[0].mask));
  EXPECT_EQ(run("eval --pred " + dir("partial").string() + " --gt " + dir("data").string() + " --out " +
                dir("eval2").string()),
            1);
  const std::string log = slurp(kRoot / "last.log");
  EXPECT_NE(log.find("stranger"), std::string::npos) << log;
  EXPECT_NE(log.find(data[7].id), std::string::npos) << log;
  const auto j = nlohmann::json::parse(slurp(dir("eval2") / "summary.json"));
  EXPECT_EQ(j["images"]["overall"].get<int>(), 5);
}

TEST_F(CliTest, FlagsOverrideConfigFile) {
  std::ofstream(dir("cfg.txt")) << "lambda = 0.25\nbatch_size = 2\ntotal_iters = 3\nlr0 = 0.005\ninput_size = 32\n";
  ASSERT_EQ(run("train --data " + dir("data").string() + " --out " + dir("cfgrun").string() + " --config " +
                dir("cfg.txt").string() + " --total-iters 2 --no-augment"),
            0)
      << slurp(kRoot / "last.log");
  const ModelConfig c = ModelConfig::from_text(slurp(dir("cfgrun") / "resolved_config.txt"));
  EXPECT_EQ(c.lambda, 0.25);
  EXPECT_EQ(c.lr0, 0.005);
  EXPECT_EQ(c.total_iters, 2u);
  EXPECT_FALSE(c.augment.hflip || c.augment.vflip || c.augment.crop || c.augment.rotate);
  EXPECT_EQ(lines(dir("cfgrun") / "train_log.csv").size(), 3u);
}

TEST_F(CliTest, IdenticalRunsGiveIdenticalLogs) {
  const std::string common = " --data " + dir("data").string() + " --size 32 --batch 2 --total-iters 10";
  ASSERT_EQ(run("train" + common + " --out " + dir("full_again").string()), 0);
  EXPECT_EQ(slurp(dir("full") / "train_log.csv"), slurp(dir("full_again") / "train_log.csv"));
}
