#include <gtest/gtest.h>

#include <cstdlib>

#include "support.hpp"

#ifndef CRSEL_CLI_PATH
#error "CRSEL_CLI_PATH must name the built command-line binary"
#endif

namespace fs = std::filesystem;

namespace {

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(CRSEL_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = testing_support::fresh_dir("cli");
    ASSERT_EQ(run("gen-fixtures --out-dir " + (dir_ / "fx").string(), dir_ / "gen.log"), 0);
  }
  fs::path fx(const char* name) const { return dir_ / "fx" / name; }
  fs::path dir_;
};

}  // namespace

TEST_F(Cli, SelectorWritesOutputsAndZeroOutCopiesInput) {
  const std::string common =
      "crselector --features " + fx("features.crt").string() + " --image " + fx("image.crt").string();
  ASSERT_EQ(run(common + " --params " + fx("params.crp").string() + " --out-dir " + (dir_ / "a").string(),
                dir_ / "a.log"),
            0);
  for (const char* f : {"output.crt", "keymask.txt", "heatmap_input.pgm", "heatmap_output.pgm", "run.txt"}) {
    EXPECT_TRUE(fs::exists(dir_ / "a" / f)) << f;
  }
  EXPECT_NE(testing_support::slurp(dir_ / "a" / "run.txt").find("seed=42"), std::string::npos);
  ASSERT_EQ(run(common + " --params " + fx("params_zero_out.crp").string() + " --out-dir " + (dir_ / "z").string(),
                dir_ / "z.log"),
            0);
  EXPECT_EQ(crsel::read_file(dir_ / "z" / "output.crt"), crsel::read_file(fx("features.crt")));
}

TEST_F(Cli, SelectorFlagOverrides) {
  const std::string base = "crselector --features " + fx("features.crt").string() + " --image " +
                           fx("image.crt").string() + " --params " + fx("params.crp").string();
  ASSERT_EQ(run(base + " --soft-mask --tau 0.5 --r 1 --seed 7 --out-dir " + (dir_ / "s").string(), dir_ / "s.log"),
            0);
  const auto meta = testing_support::slurp(dir_ / "s" / "run.txt");
  EXPECT_NE(meta.find("seed=7"), std::string::npos);
  EXPECT_NE(meta.find("mask=soft"), std::string::npos);
  EXPECT_EQ(run(base + " --tau 0 --out-dir " + (dir_ / "bad").string(), dir_ / "bad.log"), 1);
  EXPECT_EQ(run(base + " --window 3 --out-dir " + (dir_ / "bad").string(), dir_ / "bad.log"), 1);
  EXPECT_EQ(run(base + " --soft-mask --hard-mask --out-dir " + (dir_ / "bad").string(), dir_ / "bad.log"), 1);
  EXPECT_FALSE(fs::exists(dir_ / "bad" / "output.crt"));
}

TEST_F(Cli, ScaWritesLevelsAndGamma) {
  const std::string levels =
      fx("level0.crt").string() + " " + fx("level1.crt").string() + " " + fx("level2.crt").string();
  ASSERT_EQ(run("sca --levels " + levels + " --params " + fx("sca_zero.sca").string() + " --out-dir " +
                    (dir_ / "sca").string(),
                dir_ / "sca.log"),
            0);
  const auto in = crsel::load_crt(fx("level1.crt"));
  const auto out = crsel::load_crt(dir_ / "sca" / "level_1.crt");
  for (std::size_t k = 0; k < in.size(); ++k) EXPECT_EQ(out[k], 1.5f * in[k]);
  EXPECT_NE(testing_support::slurp(dir_ / "sca" / "gamma.txt").find("0.5 0.5 0.5"), std::string::npos);
}

TEST_F(Cli, EvalAndGradcheck) {
  ASSERT_EQ(run("eval --dets " + fx("dets.txt").string() + " --gts " + fx("gts.txt").string() + " --out-dir " +
                    (dir_ / "ev").string(),
                dir_ / "ev.log"),
            0);
  const auto metrics = testing_support::slurp(dir_ / "ev" / "metrics.txt");
  EXPECT_NE(metrics.find("map50="), std::string::npos);
  ASSERT_EQ(run("gradcheck --module sca-head --out-dir " + (dir_ / "gc").string(), dir_ / "gc.log"), 0);
  EXPECT_NE(testing_support::slurp(dir_ / "gc" / "gradcheck.txt").find(" pass"), std::string::npos);
  // a zero threshold cannot be met, so the check must report failure
  EXPECT_EQ(run("gradcheck --module sca-head --threshold 0", dir_ / "gc0.log"), 2);
}

TEST_F(Cli, ValidationFailuresExitOne) {
  EXPECT_EQ(run("", dir_ / "none.log"), 1);
  EXPECT_EQ(run("frobnicate", dir_ / "x.log"), 1);
  EXPECT_EQ(run("eval --dets /nonexistent --gts " + fx("gts.txt").string(), dir_ / "x.log"), 1);
  EXPECT_EQ(run("eval --dets " + fx("gts.txt").string() + " --gts " + fx("gts.txt").string(), dir_ / "x.log"), 1);
  EXPECT_EQ(run("sca --levels " + fx("features.crt").string() + " --params " + fx("params.crp").string(),
                dir_ / "x.log"),
            1);
  EXPECT_EQ(run("gradcheck --module nope", dir_ / "x.log"), 1);
  EXPECT_EQ(run("--help", dir_ / "help.log"), 0);
}
