// End-to-end checks of the bandfuse executable.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include <gtest/gtest.h>

#include "bandfuse/experiment.hpp"
#include "fixtures.hpp"

using namespace bandfuse;
using testing_support::TempDir;

namespace {

struct RunResult {
    int status = -1;
    std::string output;
};

RunResult run(const std::string& args) {
    const std::string cmd = std::string(BANDFUSE_CLI) + " " + args + " 2>&1";
    RunResult r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
    const int raw = pclose(pipe);
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    return r;
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string small_synth_args(const fs::path& out) {
    return "synth --out " + out.string() + " --classes 3 --bands 10 --height 12 --width 12 --seed 5 --regions 3";
}

}  // namespace

TEST(Cli, SynthIsReproducible) {
    TempDir dir;
    ASSERT_EQ(run(small_synth_args(dir / "a")).status, 0);
    ASSERT_EQ(run(small_synth_args(dir / "b")).status, 0);
    EXPECT_EQ(scene_hash(dir / "a"), scene_hash(dir / "b"));
    EXPECT_TRUE(fs::exists(dir / "a" / "manifest.json"));
}

TEST(Cli, UsageErrorsAreNonZero) {
    EXPECT_NE(run("").status, 0);
    EXPECT_NE(run("train --bogus").status, 0);
    EXPECT_NE(run("eval --model /nonexistent/m.bin --data /nonexistent --report /tmp/r.json").status, 0);
    const auto r = run("rank --data /nonexistent/scene --method fisher --train-per-class 2 --out /tmp/x.json");
    EXPECT_NE(r.status, 0);
    EXPECT_NE(r.output.find("cannot open"), std::string::npos) << r.output;
}

TEST(Cli, RankTrainEvalPipeline) {
    TempDir dir;
    const fs::path scene = dir / "scene";
    ASSERT_EQ(run(small_synth_args(scene)).status, 0);
    auto r = run("rank --data " + scene.string() + " --method fisher --split-seed 1 --train-per-class 4 --out " +
                 (dir / "ranking.json").string());
    ASSERT_EQ(r.status, 0) << r.output;
    const BandRanking ranking = load_ranking(dir / "ranking.json", 10);

    r = run("train --data " + scene.string() + " --order db3li --ranking " + (dir / "ranking.json").string() +
            " --patch 3 --epochs 2 --lr 1e-3 --batch 8 --seed 1 --train-per-class 4 --filters 2 --hidden 4 --out " +
            (dir / "model.bin").string());
    ASSERT_EQ(r.status, 0) << r.output;
    const Model model = load_model(dir / "model.bin");
    EXPECT_EQ(model.config.orders[0].permutation, ranking.descending_order);
    EXPECT_TRUE(fs::exists(dir / "model.bin.split.json"));
    EXPECT_TRUE(fs::exists(dir / "model.bin.manifest.json"));
    EXPECT_EQ(read_text(dir / "model.bin.log.csv").substr(0, 24), "epoch,mean_loss,train_oa");

    r = run("eval --model " + (dir / "model.bin").string() + " --data " + scene.string() + " --report " +
            (dir / "report.json").string() + " --map " + (dir / "map.ppm").string());
    ASSERT_EQ(r.status, 0) << r.output;
    const auto report = nlohmann::json::parse(read_text(dir / "report.json"));
    EXPECT_EQ(report["config"], "DB3Li");
    EXPECT_EQ(report["confusion"].size(), 3u);
    EXPECT_EQ(read_text(dir / "map.ppm").substr(0, 11), "P6\n12 12\n25");
}

TEST(Cli, RankImport) {
    TempDir dir;
    ASSERT_EQ(run(small_synth_args(dir / "scene")).status, 0);
    detail::write_text_atomic(dir / "perm.txt", "9 8 7 6 5 4 3 2 1 0\n");
    const auto r = run("rank --data " + (dir / "scene").string() + " --import " + (dir / "perm.txt").string() +
                       " --out " + (dir / "ranking.json").string());
    ASSERT_EQ(r.status, 0) << r.output;
    EXPECT_EQ(load_ranking(dir / "ranking.json", 10).descending_order,
              (std::vector<std::size_t>{9, 8, 7, 6, 5, 4, 3, 2, 1, 0}));
}

TEST(Cli, EvalRejectsMismatchedScene) {
    TempDir dir;
    ASSERT_EQ(run(small_synth_args(dir / "scene")).status, 0);
    ASSERT_EQ(run("synth --out " + (dir / "other").string() +
                  " --classes 3 --bands 8 --height 12 --width 12 --seed 5 --regions 3")
                  .status,
              0);
    ASSERT_EQ(run("train --data " + (dir / "scene").string() +
                  " --order db1 --patch 3 --epochs 1 --seed 1 --train-per-class 3 --filters 2 --hidden 4 --out " +
                  (dir / "m.bin").string())
                  .status,
              0);
    const auto r = run("eval --model " + (dir / "m.bin").string() + " --data " + (dir / "other").string() +
                       " --report " + (dir / "r.json").string());
    EXPECT_NE(r.status, 0);
    EXPECT_NE(r.output.find("shape error"), std::string::npos) << r.output;
    EXPECT_FALSE(fs::exists(dir / "r.json"));
}

TEST(Cli, GridAndSweep) {
    TempDir dir;
    ASSERT_EQ(run(small_synth_args(dir / "scene")).status, 0);
    auto r = run("grid --data " + (dir / "scene").string() +
                 " --patch 3 --train-per-class 4 --seed 2 --epochs 1 --filters 2 --hidden 4 --out " +
                 (dir / "grid.csv").string());
    ASSERT_EQ(r.status, 0) << r.output;
    const std::string csv = read_text(dir / "grid.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 + 3);
    EXPECT_TRUE(fs::exists(dir / "grid.csv.manifest.json"));
    EXPECT_TRUE(fs::exists(dir / "grid_DB1Li_DB2Li.report.json"));

    r = run("sweep-patch --data " + (dir / "scene").string() +
            " --order db1li --sizes 1,3,5 --seed 2 --epochs 1 --filters 2 --hidden 4 --out " +
            (dir / "sweep.csv").string());
    ASSERT_EQ(r.status, 0) << r.output;
    const std::string sweep = read_text(dir / "sweep.csv");
    EXPECT_EQ(std::count(sweep.begin(), sweep.end(), '\n'), 4);

    r = run("sweep-patch --data " + (dir / "scene").string() + " --order db1li --sizes 1,3,3 --out " +
            (dir / "bad.csv").string());
    EXPECT_NE(r.status, 0);
    EXPECT_FALSE(fs::exists(dir / "bad.csv"));
}

TEST(Cli, GridRequiresTrainPerClass) {
    EXPECT_NE(run("grid --data /tmp --patch 3 --out /tmp/g.csv").status, 0);
}
