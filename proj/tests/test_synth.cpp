#include <cmath>
#include <limits>
#include <set>

#include <gtest/gtest.h>

#include "bandfuse/synth.hpp"
#include "fixtures.hpp"

using namespace bandfuse;
using testing_support::TempDir;

TEST(Synth, DeterministicBytes) {
    TempDir dir;
    SynthConfig cfg;
    cfg.height = cfg.width = 24;
    write_scene(generate(cfg), dir / "a");
    write_scene(generate(cfg), dir / "b");
    for (const char* f : {"meta.json", "hsi.bin", "lidar.bin", "labels.bin"})
        EXPECT_EQ(detail::read_file_bytes(dir / "a" / f), detail::read_file_bytes(dir / "b" / f)) << f;
    cfg.seed = 43;
    EXPECT_NE(generate(cfg).hsi, generate(SynthConfig{.height = 24, .width = 24}).hsi);
}

TEST(Synth, DefaultSceneHasEveryClass) {
    const Scene s = generate(SynthConfig{});
    EXPECT_EQ(s.height(), 64u);
    EXPECT_EQ(s.bands(), 40u);
    EXPECT_EQ(s.classes, 8u);
    std::set<std::uint16_t> seen(s.labels.labels.begin(), s.labels.labels.end());
    EXPECT_EQ(seen.size(), 8u);
    EXPECT_EQ(*seen.begin(), 1);
    for (float v : s.hsi.values) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(Synth, ManySeedsHaveEveryClass) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        SynthConfig cfg;
        cfg.seed = seed;
        cfg.height = cfg.width = 32;
        const auto labels = synth_layout(cfg);
        EXPECT_EQ(std::set<std::uint16_t>(labels.begin(), labels.end()).size(), 8u) << seed;
    }
}

TEST(Synth, NoiselessSceneNearestCentroidIsPerfect) {
    SynthConfig cfg;
    cfg.spectral_noise = cfg.lidar_noise = 0.0;
    cfg.height = cfg.width = 32;
    const Scene s = generate(cfg);
    std::vector<std::vector<double>> centroid(cfg.classes + 1, std::vector<double>(cfg.bands, 0.0));
    std::vector<double> count(cfg.classes + 1, 0.0);
    for (std::size_t px = 0; px < s.pixels(); ++px) {
        const auto c = s.labels.labels[px];
        count[c] += 1;
        for (std::size_t b = 0; b < cfg.bands; ++b) centroid[c][b] += s.hsi.values[px * cfg.bands + b];
    }
    for (std::size_t c = 1; c <= cfg.classes; ++c)
        for (double& v : centroid[c]) v /= count[c];
    std::size_t correct = 0;
    for (std::size_t px = 0; px < s.pixels(); ++px) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t c = 1; c <= cfg.classes; ++c) {
            double d = 0.0;
            for (std::size_t b = 0; b < cfg.bands; ++b) {
                const double diff = s.hsi.values[px * cfg.bands + b] - centroid[c][b];
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        correct += best == s.labels.labels[px];
    }
    EXPECT_EQ(correct, s.pixels());
}

TEST(Synth, SignaturesAreBandSmooth) {
    const SynthConfig cfg;
    Xorshift64Star rng(1);
    for (std::size_t c = 1; c <= cfg.classes; ++c) {
        const auto sig = class_signature(cfg, c);
        double adjacent = 0.0;
        for (std::size_t b = 1; b < sig.size(); ++b) adjacent += std::abs(sig[b] - sig[b - 1]);
        adjacent /= static_cast<double>(sig.size() - 1);
        double random_pairs = 0.0;
        for (int i = 0; i < 2000; ++i) random_pairs += std::abs(sig[rng.below(sig.size())] - sig[rng.below(sig.size())]);
        random_pairs /= 2000.0;
        EXPECT_LT(adjacent, random_pairs) << "class " << c;
    }
}

TEST(Synth, MovingAverageShrinksAtEdges) {
    const auto out = detail::moving_average({3, 6, 9, 12}, 3);
    EXPECT_EQ(out, (std::vector<double>{4.5, 6, 9, 10.5}));
}

TEST(Synth, LidarMeansIncreaseWithClass) {
    SynthConfig cfg;
    cfg.lidar_noise = 0.0;
    cfg.height = cfg.width = 32;
    const Scene s = generate(cfg);
    std::vector<double> sum(cfg.classes + 1, 0.0), n(cfg.classes + 1, 0.0);
    for (std::size_t px = 0; px < s.pixels(); ++px) {
        sum[s.labels.labels[px]] += s.lidar.values[px];
        n[s.labels.labels[px]] += 1;
    }
    for (std::size_t c = 2; c <= cfg.classes; ++c) EXPECT_GT(sum[c] / n[c], sum[c - 1] / n[c - 1]);
}

TEST(Synth, InvalidConfigs) {
    SynthConfig cfg;
    cfg.classes = 17;
    EXPECT_THROW(generate(cfg), ConfigError);
    cfg = SynthConfig{};
    cfg.smoothing_window = 4;
    EXPECT_THROW(generate(cfg), ConfigError);
    cfg = SynthConfig{};
    cfg.regions_per_axis = 1;  // one site cannot hold eight classes
    EXPECT_THROW(generate(cfg), ConfigError);
}
