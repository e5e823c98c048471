#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "pl2map/cli.hpp"

using namespace pl2map;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pl2map_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<std::string> small_scene_args(const fs::path& dir) {
  return {"gen-synth", "--out",  dir.string(), "--train-views", "4",  "--test-views", "3", "--points", "60",
          "--lines",   "10",     "--dim",      "16",          "--tokens", "4",          "--seed",     "3"};
}

std::vector<std::string> tiny_train_args(const fs::path& scene, const fs::path& ckpt, const std::string& iters) {
  return {"train",        "--scene",     scene.string(), "--out", ckpt.string(), "--iters", iters,
          "--point-head", "32",          "--line-head",  "32",    "--log-every", "5",       "--seed",
          "7"};
}

}  // namespace

TEST(Cli, EvalOnIdenticalPoses) {
  const auto dir = temp_dir("eval");
  std::vector<PoseRecord> poses;
  for (int i = 0; i < 5; ++i)
    poses.push_back({"im" + std::to_string(i), true,
                     Pose(Eigen::Quaterniond(Eigen::AngleAxisd(0.2 * i, Eigen::Vector3d::UnitX())), Eigen::Vector3d(i, 0, 1)),
                     10, 2});
  save_poses(poses, dir / "p.txt");
  const auto r = run({"eval", "--estimates", (dir / "p.txt").string(), "--ground-truth", (dir / "p.txt").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "0.0 / 0.00 / 100.0\n");
}

TEST(Cli, FailedEstimatesCountAgainstAccuracy) {
  const auto dir = temp_dir("eval_fail");
  std::vector<PoseRecord> gt{{"a", true, Pose(), 0, 0}, {"b", true, Pose(), 0, 0}};
  auto est = gt;
  est[1].success = false;
  save_poses(gt, dir / "gt.txt");
  save_poses(est, dir / "est.txt");
  const auto r = run({"eval", "--estimates", (dir / "est.txt").string(), "--ground-truth", (dir / "gt.txt").string(),
                      "--out", (dir / "row.txt").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "inf / inf / 50.0\n");
  EXPECT_NE(slurp(dir / "row.txt").find("b inf inf"), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"train", "--scene", "x"}).code, 2);  // --out missing
  EXPECT_EQ(run({"train", "--scene", "x", "--out", "y", "--iters", "many"}).code, 2);
  EXPECT_EQ(run({"localize", "--scene", "x", "--out", "y"}).code, 2);
  EXPECT_EQ(run({"eval", "--estimates", "x"}).code, 2);
  EXPECT_EQ(run({"train", "--help"}).code, 0);
}

TEST(Cli, RuntimeFailuresExitOne) {
  const auto dir = temp_dir("runtime");
  const auto r = run({"infer", "--checkpoint", (dir / "missing.pl2m").string(), "--scene", dir.string(), "--out",
                      (dir / "p.bin").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST(Cli, TrainZeroItersSavesInitialization) {
  const auto dir = temp_dir("iters0");
  ASSERT_EQ(run(small_scene_args(dir / "scene")).code, 0);
  ASSERT_EQ(run(tiny_train_args(dir / "scene", dir / "m.pl2m", "0")).code, 0);
  const auto ck = load_checkpoint(dir / "m.pl2m");
  ModelConfig cfg;
  cfg.descriptor_dim = 16;
  cfg.line_tokens = 4;
  cfg.point_head = {32};
  cfg.line_head = {32};
  EXPECT_EQ(ck.iteration, 0u);
  EXPECT_TRUE(ck.params == init_params<float>(cfg, 7));
}

TEST(Cli, ConfigFileWithFlagOverride) {
  const auto dir = temp_dir("config");
  ASSERT_EQ(run(small_scene_args(dir / "scene")).code, 0);
  std::ofstream(dir / "run.ini") << "[train]\niters = 3\nlr = 0.002\npoint-head = \"24\"\nline-head = \"24\"\n";
  const auto r = run({"--config", (dir / "run.ini").string(), "train", "--scene", (dir / "scene").string(), "--out",
                      (dir / "m.pl2m").string(), "--iters", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ck = load_checkpoint(dir / "m.pl2m");
  EXPECT_EQ(ck.iteration, 2u);  // flag wins
  EXPECT_EQ(ck.params.config.point_head, std::vector<std::size_t>{24});
  const auto manifest = nlohmann::json::parse(slurp(dir / "m.pl2m.manifest.json"));
  EXPECT_EQ(manifest["command"], "train");
  EXPECT_NE(manifest["config"].get<std::string>().find("lr=0.002"), std::string::npos);
  for (const char* key : {"args", "seed", "git", "started_utc", "elapsed_s"}) EXPECT_TRUE(manifest.contains(key)) << key;
}

TEST(Cli, PipelineCompletesAndIsDeterministic) {
  const auto dir = temp_dir("pipeline");
  ASSERT_EQ(run(small_scene_args(dir / "scene")).code, 0);
  ASSERT_TRUE(fs::exists(dir / "scene" / "scene.json.manifest.json"));
  std::string rows[2];
  std::string estimates[2];
  for (int k = 0; k < 2; ++k) {
    const auto d = dir / ("run" + std::to_string(k));
    fs::create_directories(d);
    auto r = run(tiny_train_args(dir / "scene", d / "m.pl2m", "20"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(slurp(d / "m.pl2m.log").find("iter=20 "), std::string::npos);
    r = run({"infer", "--checkpoint", (d / "m.pl2m").string(), "--scene", (dir / "scene").string(), "--out",
             (d / "pred.bin").string(), "--map", (d / "map.txt").string(), "--map-threshold", "0"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(d / "map.txt"));
    r = run({"localize", "--predictions", (d / "pred.bin").string(), "--scene", (dir / "scene").string(), "--out",
             (d / "est.txt").string(), "--min-point-reliability", "0", "--min-line-reliability", "0"});
    ASSERT_EQ(r.code, 0) << r.err;
    r = run({"localize", "--checkpoint", (d / "m.pl2m").string(), "--scene", (dir / "scene").string(), "--out",
             (d / "est2.txt").string(), "--min-point-reliability", "0", "--min-line-reliability", "0"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(d / "est.txt"), slurp(d / "est2.txt"));
    EXPECT_EQ(load_poses(d / "est.txt").size(), 3u);
    r = run({"eval", "--estimates", (d / "est.txt").string(), "--scene", (dir / "scene").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(std::regex_match(r.out, std::regex(R"(\S+ / \S+ / \d+\.\d\n)"))) << r.out;
    rows[k] = r.out;
    estimates[k] = slurp(d / "est.txt");
  }
  EXPECT_EQ(rows[0], rows[1]);
  EXPECT_EQ(estimates[0], estimates[1]);
}
