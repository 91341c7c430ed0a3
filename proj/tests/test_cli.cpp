#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "winvit/cli.hpp"
#include "winvit/errors.hpp"

using namespace winvit;
using namespace winvit::cli;

namespace {

namespace fs = std::filesystem;

struct Result {
  int rc;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "winvit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int rc = run_cli(int(argv.size()), argv.data(), out, err);
  return {rc, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("winvit_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const std::vector<std::string> kSmall = {"--set", "image_size=16", "--set", "patch_size=4", "--set", "embed_dim=8",
                                         "--set", "depth=1",       "--set", "heads=2",      "--set", "window=2"};

std::vector<std::string> small(std::vector<std::string> args) {
  args.insert(args.end(), kSmall.begin(), kSmall.end());
  return args;
}

}  // namespace

TEST(Cli, DescribeMatchesGolden) {
  auto r = run({"describe"});
  ASSERT_EQ(r.rc, kOk) << r.err;
  EXPECT_EQ(r.out, slurp(fs::path(WINVIT_SOURCE_DIR) / "tests/golden/describe_default.txt"));
}

TEST(Cli, DescribeWritesCsvAndConfigWhenAsked) {
  auto dir = scratch("describe");
  auto r = run({"describe", "--out", dir.string(), "--set", "depth=0"});
  ASSERT_EQ(r.rc, kOk) << r.err;
  const auto csv = slurp(dir / "cost.csv");
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "layer,name,params,flops,variant");
  std::size_t rows = 0;
  while (std::getline(lines, line)) {
    ++rows;
    EXPECT_TRUE(line.rfind("stem,", 0) == 0 || line.rfind("head,", 0) == 0) << line;
  }
  EXPECT_EQ(rows, 8u);
  EXPECT_NE(slurp(dir / "config.txt").find("depth=0\n"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, ConfigErrorsExitTwo) {
  auto geometry = run({"describe", "--set", "window=3"});
  EXPECT_EQ(geometry.rc, kConfigError);
  EXPECT_NE(geometry.err.find("H=8, W=8"), std::string::npos) << geometry.err;
  EXPECT_NE(geometry.err.find("M=3"), std::string::npos);
  auto unknown = run({"describe", "--set", "widow=4"});
  EXPECT_EQ(unknown.rc, kConfigError);
  EXPECT_NE(unknown.err.find("widow"), std::string::npos) << unknown.err;
  EXPECT_EQ(run({"describe", "--set", "depth"}).rc, kConfigError);
  EXPECT_EQ(run({"frobnicate"}).rc, kConfigError);
  EXPECT_EQ(run({"describe", "--bogus"}).rc, kConfigError);
  EXPECT_EQ(run({"describe", "--config", "/nonexistent/winvit.cfg"}).rc, kConfigError);
  EXPECT_EQ(run({"heatmap", "--set", "query_token=64"}).rc, kConfigError);
}

TEST(Cli, ConfigFileAndOverridesResolveInOrder) {
  auto dir = scratch("config");
  std::ofstream(dir / "run.cfg") << "# desk run\ndepth = 2\n\nwindow=2\nepochs=3\n";
  auto c = resolve_config((dir / "run.cfg").string(), {"window=4", "seed=9"});
  EXPECT_EQ(c.model.depth, 2u);
  EXPECT_EQ(c.model.window, 4u);
  EXPECT_EQ(c.train.epochs, 3u);
  EXPECT_EQ(c.model.seed, 9u);
  EXPECT_EQ(c.train.seed, 9u);
  RunConfig back;
  std::istringstream lines(c.serialize());
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    back.set(line.substr(0, eq), line.substr(eq + 1));
  }
  EXPECT_EQ(back.serialize(), c.serialize());
  fs::remove_all(dir);
}

TEST(Cli, CheckPassesAndInjectedFaultFails) {
  auto ok = run({"check"});
  EXPECT_EQ(ok.rc, kOk) << ok.out;
  EXPECT_NE(ok.out.find("all 5 suites passed"), std::string::npos);
  auto faulty = run({"check", "--inject-fault"});
  EXPECT_EQ(faulty.rc, kRuntimeFailure);
  EXPECT_NE(faulty.out.find("gradient              FAIL"), std::string::npos) << faulty.out;
  EXPECT_NE(faulty.out.find("equivalence           FAIL"), std::string::npos) << faulty.out;
  EXPECT_EQ(run({"check"}).rc, kOk);
}

TEST(Cli, TrainEvalAndCheckpointErrors) {
  auto dir = scratch("train");
  auto args = small({"train", "--out", dir.string(), "--set", "epochs=1", "--set", "samples_per_class=5"});
  auto t = run(args);
  ASSERT_EQ(t.rc, kOk) << t.err;
  EXPECT_TRUE(fs::exists(dir / "model.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "checkpoint.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "config.txt"));
  EXPECT_EQ(slurp(dir / "metrics.csv").substr(0, 27), "step,lr,loss,acc,pre,rec,f1");

  auto e = run(small({"eval", "--checkpoint", (dir / "model.ckpt").string(), "--set", "samples_per_class=5"}));
  ASSERT_EQ(e.rc, kOk) << e.err;
  EXPECT_EQ(e.out.rfind("acc=", 0), 0u) << e.out;

  auto mismatch = run({"eval", "--checkpoint", (dir / "model.ckpt").string()});
  EXPECT_EQ(mismatch.rc, kCheckpointError);
  EXPECT_NE(mismatch.err.find("PEMB"), std::string::npos) << mismatch.err;
  EXPECT_EQ(run(small({"eval"})).rc, kCheckpointError);
  EXPECT_EQ(run(small({"eval", "--checkpoint", (dir / "absent.ckpt").string()})).rc, kCheckpointError);
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  EXPECT_EQ(run(small({"heatmap", "--checkpoint", (dir / "junk.ckpt").string()})).rc, kCheckpointError);
  fs::remove_all(dir);
}

TEST(Cli, RuntimeFailureExitsOne) {
  auto r = run(small({"train", "--out", scratch("manifest").string(), "--set", "dataset=manifest", "--set",
                      "manifest=/nonexistent/m.csv"}));
  EXPECT_EQ(r.rc, kRuntimeFailure);
  EXPECT_NE(r.err.find("/nonexistent/m.csv"), std::string::npos) << r.err;
  fs::remove_all(fs::temp_directory_path() / "winvit_test_cli_manifest");
}

TEST(Heatmap, ConstantMapRendersItsValue) {
  auto half = render_heatmap(Tensor::full({1, 4, 4}, 0.5, DType::F64), 8);
  EXPECT_EQ(half.width, 8u);
  EXPECT_EQ(half.channels, 1u);
  for (auto p : half.pixels) EXPECT_EQ(p, 128);
  auto zero = render_heatmap(Tensor::zeros({2, 2}, DType::F64), 2);
  for (auto p : zero.pixels) EXPECT_EQ(p, 0);
}

TEST(Heatmap, MinMaxScalingAndNearestUpsampling) {
  Tensor map({2, 2}, {0.0, 0.25, 0.5, 1.0}, DType::F64);
  auto img = render_heatmap(map, 4);
  const std::uint8_t want[16] = {0, 0, 64, 64, 0, 0, 64, 64, 128, 128, 255, 255, 128, 128, 255, 255};
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(img.pixels[i], want[i]) << i;
}

TEST(Heatmap, SingletonWindowLightsOnlyTheQuery) {
  model::ModelConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.window = 1;
  cfg.depth = 1;
  auto m = model::Model::init(cfg);
  model::ModelProbe probe;
  model::classify(Tensor::full({3, 16, 16}, 0.3), m, nullptr, &probe);
  for (std::size_t q : {0u, 5u, 15u}) {
    auto img = render_heatmap(attention_row_map(probe.attention[0], cfg, 1, q), 4);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(img.pixels[i], i == q ? 255 : 0);
  }
}

TEST(Heatmap, RowMapCoversOnlyTheQueryWindow) {
  model::ModelConfig cfg;
  cfg.image_size = 32;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.window = 4;
  cfg.depth = 1;
  auto m = model::Model::init(cfg);
  model::ModelProbe probe;
  Rng rng(0);
  model::classify(Tensor::uniform({3, 32, 32}, rng, 0.0, 1.0), m, nullptr, &probe);
  const std::size_t query = 8 * 5 + 6;  // row 5, col 6: window rows 4-7, cols 4-7
  auto map = attention_row_map(probe.attention[0], cfg, 0, query);
  double sum = 0;
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      const double v = map[r * 8 + c];
      sum += v;
      if (r < 4 || c < 4) EXPECT_EQ(v, 0.0);
      else EXPECT_GT(v, 0.0);
    }
  EXPECT_NEAR(sum, 1.0, 1e-6);
  EXPECT_THROW(attention_row_map(probe.attention[0], cfg, 2, 0), ConfigError);
}

TEST(Heatmap, ZeroSamCheckpointWritesMidGray) {
  auto dir = scratch("heatmap");
  auto args = small({"--set", "seed=3"});
  RunConfig rc;
  for (std::size_t i = 1; i < args.size(); i += 2) {
    const auto eq = args[i].find('=');
    rc.set(args[i].substr(0, eq), args[i].substr(eq + 1));
  }
  auto m = model::Model::init(rc.model);
  for (auto& b : m.blocks) b.sam = sam::SamParams::zeros();
  model::save_checkpoint(m, (dir / "zero_sam.ckpt").string());
  auto r = run(small({"heatmap", "--checkpoint", (dir / "zero_sam.ckpt").string(), "--out", dir.string(), "--set",
                      "seed=3", "--set", "samples_per_class=5"}));
  ASSERT_EQ(r.rc, kOk) << r.err;
  auto sam_img = data::read_ppm((dir / "block0_sam.ppm").string());
  EXPECT_EQ(sam_img.width, 16u);
  for (auto p : sam_img.pixels) EXPECT_EQ(p, 128);
  EXPECT_TRUE(fs::exists(dir / "block0_head0.ppm"));
  EXPECT_TRUE(fs::exists(dir / "block0_head1.ppm"));
  fs::remove_all(dir);
}
