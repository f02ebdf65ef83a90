#include <sstream>

#include <gtest/gtest.h>

#include "bandfuse/experiment.hpp"
#include "bandfuse/synth.hpp"
#include "fixtures.hpp"

using namespace bandfuse;
using testing_support::TempDir;

namespace {

Scene small_synth() {
    SynthConfig cfg;
    cfg.classes = 4;
    cfg.bands = 12;
    cfg.height = cfg.width = 16;
    cfg.regions_per_axis = 3;
    return generate(cfg);
}

GridSettings fast_settings() {
    GridSettings g;
    g.patch = 3;
    g.train_per_class = 5;
    g.seed = 4;
    g.arch.filters = 2;
    g.arch.hidden = 4;
    g.train.epochs = 1;
    g.train.batch_size = 8;
    return g;
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    for (std::string l; std::getline(is, l);) out.push_back(l);
    return out;
}

}  // namespace

TEST(Grid, TenColumnsSharedSplit) {
    const Scene s = small_synth();
    const GridResult g = run_grid(s, fast_settings());
    ASSERT_EQ(g.reports.size(), 10u);
    for (std::size_t i = 0; i < 10; ++i) {
        EXPECT_EQ(g.reports[i].config, kGridColumns[i]);
        EXPECT_EQ(g.configs[i].id(), kGridColumns[i]);
        const bool dual = std::string(kGridColumns[i]).find('+') != std::string::npos;
        EXPECT_EQ(g.configs[i].num_streams(), dual ? 2u : 1u);
        EXPECT_EQ(g.reports[i].confusion.total(), g.split.test_pixels().size());
    }
    const auto rows = lines(grid_csv(g.reports, s.classes));
    ASSERT_EQ(rows.size(), 1u + s.classes + 3u);
    EXPECT_EQ(rows[0], "metric,DB1,DB2,DB3,DB4,DB1Li,DB2Li,DB1Li+DB2Li,DB3Li,DB4Li,DB3Li+DB4Li");
    EXPECT_EQ(rows[1].substr(0, 7), "Class1,");
    EXPECT_EQ(rows.back().substr(0, 6), "Kappa,");
    for (const auto& r : rows) EXPECT_EQ(std::count(r.begin(), r.end(), ','), 10);
}

TEST(Grid, RepeatableAndParallelEqualsSerial) {
    const Scene s = small_synth();
    GridSettings g = fast_settings();
    const std::string a = grid_csv(run_grid(s, g).reports, s.classes);
    EXPECT_EQ(grid_csv(run_grid(s, g).reports, s.classes), a);
    g.jobs = 3;
    EXPECT_EQ(grid_csv(run_grid(s, g).reports, s.classes), a);
}

TEST(Grid, ImportedRankingIsUsed) {
    const Scene s = small_synth();
    GridSettings g = fast_settings();
    std::vector<std::size_t> perm(12);
    for (std::size_t i = 0; i < 12; ++i) perm[i] = 11 - i;
    g.ranking = BandRanking::from_permutation(perm);
    const GridResult r = run_grid(s, g);
    EXPECT_EQ(r.configs[2].orders[0].permutation, perm);  // DB3
    EXPECT_EQ(r.ranking, *g.ranking);
}

TEST(Grid, FailureNamesColumn) {
    const Scene s = small_synth();
    GridSettings g = fast_settings();
    g.train.learning_rate = 1e300;
    g.train.epochs = 3;
    try {
        run_grid(s, g);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("grid column DB1"), std::string::npos) << e.what();
    }
}

TEST(Sweep, RowsPerSize) {
    const Scene s = small_synth();
    const std::vector<std::size_t> sizes{1, 3, 5, 7};
    const auto rows = run_sweep(s, "db1li+db2li", sizes, fast_settings());
    ASSERT_EQ(rows.size(), 4u);
    const auto text = lines(sweep_csv(rows));
    ASSERT_EQ(text.size(), 5u);
    EXPECT_EQ(text[0], "patch,oa,aa,kappa");
    EXPECT_EQ(text[4].substr(0, 2), "7,");
}

TEST(Sweep, SizeValidation) {
    const Scene s = small_synth();
    EXPECT_THROW(validate_sweep_sizes(std::vector<std::size_t>{1, 3, 3}, s), ConfigError);
    EXPECT_THROW(validate_sweep_sizes(std::vector<std::size_t>{3, 1}, s), ConfigError);
    EXPECT_THROW(validate_sweep_sizes(std::vector<std::size_t>{2}, s), ConfigError);
    EXPECT_THROW(validate_sweep_sizes(std::vector<std::size_t>{1, 17}, s), ConfigError);
    EXPECT_THROW(validate_sweep_sizes(std::vector<std::size_t>{}, s), ConfigError);
    EXPECT_NO_THROW(validate_sweep_sizes(std::vector<std::size_t>{1, 15}, s));
}

TEST(Manifest, RecordsDatasetHash) {
    TempDir dir;
    write_scene(small_synth(), dir / "scene");
    RunManifest m{"train", {"bandfuse", "train"}};
    m.dataset = dir / "scene";
    m.settings = {{"patch", 3}};
    m.outputs = {"model.bin"};
    m.write(dir / "manifest.json");
    std::ifstream in(dir / "manifest.json");
    const auto j = nlohmann::json::parse(in);
    EXPECT_EQ(j["command"], "train");
    EXPECT_EQ(j["dataset"]["hash"], scene_hash(dir / "scene"));
    EXPECT_EQ(j["settings"]["patch"], 3);
    EXPECT_EQ(scene_hash(dir / "scene").size(), 16u);
}

TEST(RunConfig, EvaluatesOnTestPixels) {
    const Scene s = small_synth();
    const SplitSpec split = make_split(s.labels, 5, 1);
    TrainConfig t;
    t.epochs = 2;
    t.learning_rate = 1e-3;
    Architecture arch{2, 3, 4, false};
    const RunOutcome out = run_config(s, split, parse_order_list("db1li", 12, nullptr), 3, arch, t);
    EXPECT_EQ(out.report.confusion.total(), split.test_pixels().size());
    EXPECT_EQ(out.training.log.size(), 2u);
    EXPECT_EQ(out.report.config, "DB1Li");
}
