#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>

#include "matchkit/png_io.hpp"
#include "matchkit/colorspace.hpp"

using namespace matchkit;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(MATCHKIT_CLI_PATH) + " " + args + " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[512];
  while (std::fgets(buf, sizeof buf, p)) r.out += buf;
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const fs::path& root() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("matchkit_cli_" + std::to_string(getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream(d / "small.cfg") << "# tiny run for tests\n"
                                      "synth.scenes = 3\nsynth.frames = 2\nsynth.width = 96\nsynth.height = 64\n"
                                      "train.height = 64\ntrain.epochs = 1\ntrain.batch_size = 4\n"
                                      "train.validation_pairs = 4\n";
    return d;
  }();
  return dir;
}

std::string cfg() { return "--config " + (root() / "small.cfg").string(); }

// Dataset plus proxy model shared by the tests that need them.
const fs::path& data() {
  static const fs::path d = [] {
    const auto out = root() / "data";
    EXPECT_EQ(run("gen-data " + cfg() + " --seed 7 --out " + out.string()).code, 0);
    return out;
  }();
  return d;
}

const fs::path& proxy_model() {
  static const fs::path m = [] {
    const auto out = root() / "proxy.mkt";
    EXPECT_EQ(run("train --stage proxy --data " + data().string() + " --out " + out.string() + " " + cfg()).code, 0);
    return out;
  }();
  return m;
}

}  // namespace

TEST(Cli, GenDataWritesManifestsAndImages) {
  const auto& d = data();
  for (const char* f : {"manifest.txt", "train.txt", "test.txt", "scene000/c0_f000.png"}) {
    EXPECT_TRUE(fs::exists(d / f)) << f;
  }
  EXPECT_TRUE(slurp(d / "manifest.txt").starts_with("matchkit-manifest v1\n"));
}

TEST(Cli, GenDataIsByteDeterministic) {
  const auto again = root() / "data_again", other = root() / "data_other";
  ASSERT_EQ(run("gen-data " + cfg() + " --seed 7 --out " + again.string()).code, 0);
  ASSERT_EQ(run("gen-data " + cfg() + " --seed 8 --out " + other.string()).code, 0);
  for (const auto& e : fs::recursive_directory_iterator(data())) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), data());
    EXPECT_EQ(slurp(e.path()), slurp(again / rel)) << rel;
  }
  EXPECT_NE(slurp(data() / "scene000/c0_f000.png"), slurp(other / "scene000/c0_f000.png"));
}

TEST(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run("gen-data --seed 7").code, 2);  // missing --out
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("train --stage sideways --data x --out y").code, 2);
  EXPECT_EQ(run("train --stage transform --data " + data().string() + " --out " + (root() / "x.mkt").string()).code, 2);
  std::ofstream(root() / "bad.cfg") << "train.nonsense = 1\n";
  EXPECT_EQ(run("gen-data --config " + (root() / "bad.cfg").string() + " --out " + (root() / "z").string()).code, 2);
}

TEST(Cli, RuntimeErrorsExitWithOne) {
  EXPECT_EQ(run("match --img1 /nonexistent/a.png --img2 /nonexistent/b.png").code, 1);
  EXPECT_EQ(run("eval --data /nonexistent --kinds gray --out " + (root() / "e").string()).code, 1);
}

TEST(Cli, HelpExitsZero) { EXPECT_EQ(run("--help").code, 0); }

TEST(Cli, GrayOnlyEvalNeedsNoModel) {
  const auto out = root() / "eval_gray";
  const auto r = run("eval --data " + data().string() + " --kinds gray --out " + out.string() + " " + cfg());
  ASSERT_EQ(r.code, 0);
  const auto summary = slurp(out / "summary.csv");
  EXPECT_TRUE(summary.starts_with("kind,mu,sigma,r,dr_max_10,dr_max_20,dr_max_30\ngray,"));
  EXPECT_TRUE(fs::exists(out / "pairs.csv"));
}

TEST(Cli, EvalSummaryHasOneRowPerKindAndGrayPngs) {
  const auto out = root() / "eval_two";
  const auto r = run("eval --data " + data().string() + " --models " + proxy_model().string() +
                     " --kinds gray,sumlog --out " + out.string() + " " + cfg());
  ASSERT_EQ(r.code, 0);
  std::ifstream in(out / "summary.csv");
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(in, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_TRUE(rows[1].starts_with("gray,"));
  EXPECT_TRUE(rows[2].starts_with("sumlog,"));
  std::size_t grays = 0;
  for (const auto& e : fs::directory_iterator(out / "samples")) {
    const auto name = e.path().filename().string();
    if (name.find("rgb") != std::string::npos) continue;
    const auto [colour, depth] = io::png_header(e.path());
    EXPECT_EQ(colour, PNG_COLOR_TYPE_GRAY) << name;
    EXPECT_EQ(depth, 8) << name;
    ++grays;
  }
  EXPECT_GT(grays, 0u);
}

TEST(Cli, TrainAndEvalAreByteDeterministic) {
  const auto a = root() / "det_a.mkt", b = root() / "det_b.mkt";
  const std::string common = "train --stage transform --kind sumlog-e --data " + data().string() + " --model " +
                             proxy_model().string() + " " + cfg() + " --out ";
  ASSERT_EQ(run(common + a.string()).code, 0);
  ASSERT_EQ(run(common + b.string()).code, 0);
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_EQ(slurp(a.string() + ".log.csv"), slurp(b.string() + ".log.csv"));

  const std::string ev = "eval --data " + data().string() + " --models " + proxy_model().string() + " " + a.string() +
                         " --kinds gray,sumlog-e " + cfg() + " --out ";
  ASSERT_EQ(run(ev + (root() / "ev_a").string()).code, 0);
  ASSERT_EQ(run(ev + (root() / "ev_b").string()).code, 0);
  EXPECT_EQ(slurp(root() / "ev_a/summary.csv"), slurp(root() / "ev_b/summary.csv"));
  EXPECT_EQ(slurp(root() / "ev_a/pairs.csv"), slurp(root() / "ev_b/pairs.csv"));
}

TEST(Cli, TransformGrayMatchesLuma) {
  const auto img = data() / "scene000/c0_f000.png", img2 = data() / "scene000/c1_f000.png";
  const auto out = root() / "tf_gray";
  ASSERT_EQ(run("transform --kind gray --img1 " + img.string() + " --img2 " + img2.string() + " --out " + out.string()).code, 0);
  const auto rgb = io::read_png_rgb(img);
  const auto g = io::read_png_gray(out / "1.png");
  ASSERT_EQ(g.width, rgb.width);
  for (std::size_t i = 0; i < g.plane_size(); ++i) {
    const double luma = 0.299 * rgb.plane(0)[i] + 0.587 * rgb.plane(1)[i] + 0.114 * rgb.plane(2)[i];
    EXPECT_NEAR(g.data[i], luma, 0.5 / 255 + 1e-6);
  }
  EXPECT_EQ(io::png_header(out / "2.png").first, PNG_COLOR_TYPE_GRAY);
}

TEST(Cli, TransformNeedsAModelForLearnedKinds) {
  const auto img = data() / "scene000/c0_f000.png";
  EXPECT_NE(run("transform --kind mlp --img1 " + img.string() + " --img2 " + img.string() + " --out " +
                (root() / "tf_mlp").string())
                .code,
            0);
  // Closed-form SumLog needs none.
  EXPECT_EQ(run("transform --kind sumlog --img1 " + img.string() + " --img2 " + img.string() + " --out " +
                (root() / "tf_sumlog").string())
                .code,
            0);
}

TEST(Cli, MatchIdenticalImages) {
  const auto img = (data() / "scene000/c0_f000.png").string();
  const auto r = run("match --img1 " + img + " --img2 " + img + " --seed 3");
  ASSERT_EQ(r.code, 0);
  std::size_t inliers = 0, matches = 0;
  unsigned long long seed = 0;
  ASSERT_EQ(std::sscanf(r.out.c_str(), "inliers=%zu matches=%zu seed=%llu", &inliers, &matches, &seed), 3);
  EXPECT_EQ(inliers, matches);
  EXPECT_GT(inliers, 8u);
  EXPECT_EQ(seed, 3u);
}
