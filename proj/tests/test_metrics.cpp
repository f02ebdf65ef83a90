#include <algorithm>
#include <map>

#include <gtest/gtest.h>

#include "bandfuse/metrics.hpp"
#include "bandfuse/rng.hpp"
#include "fixtures.hpp"

using namespace bandfuse;
using testing_support::TempDir;

namespace {

struct ListMetrics {
    double oa, aa, kappa;
};

// Metrics straight from prediction lists, without a confusion matrix.
ListMetrics metrics_from_lists(const std::vector<std::uint16_t>& truth, const std::vector<std::uint16_t>& pred) {
    const double n = static_cast<double>(truth.size());
    std::map<int, double> truth_count, pred_count, hit;
    double agree = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        truth_count[truth[i]] += 1;
        pred_count[pred[i]] += 1;
        if (truth[i] == pred[i]) {
            hit[truth[i]] += 1;
            agree += 1;
        }
    }
    double recall = 0, pe = 0;
    for (const auto& [c, cnt] : truth_count) {
        recall += hit[c] / cnt;
        pe += cnt * pred_count[c];
    }
    pe /= n * n;
    const double oa = agree / n;
    return {oa, recall / static_cast<double>(truth_count.size()), (oa - pe) / (1 - pe)};
}

ConfusionMatrix random_matrix(std::size_t k, Xorshift64Star& rng) {
    std::vector<std::vector<std::uint64_t>> rows(k, std::vector<std::uint64_t>(k));
    for (auto& r : rows)
        for (auto& v : r) v = rng.below(20);
    for (std::size_t i = 0; i < k; ++i) rows[i][i] += 5;
    return ConfusionMatrix::from_counts(rows);
}

}  // namespace

TEST(Confusion, Accumulate) {
    ConfusionMatrix m(3);
    m.accumulate(1, 1);
    EXPECT_EQ(m.at(1, 1), 1u);
    EXPECT_EQ(m.total(), 1u);
    m.accumulate(2, 3);
    EXPECT_EQ(m.total(), 2u);
    EXPECT_EQ(m.at(2, 3), 1u);
    EXPECT_THROW(m.accumulate(0, 1), DataError);
    EXPECT_THROW(m.accumulate(1, 4), DataError);
}

TEST(Metrics, Diagonal) {
    const auto r = compute_metrics(ConfusionMatrix::from_counts({{50, 0}, {0, 50}}));
    EXPECT_EQ(r.oa, 1.0);
    EXPECT_EQ(r.aa, 1.0);
    EXPECT_EQ(r.kappa, 1.0);
}

TEST(Metrics, TwoClassHandExample) {
    const auto r = compute_metrics(ConfusionMatrix::from_counts({{40, 10}, {20, 30}}));
    EXPECT_NEAR(r.oa, 0.7, 1e-12);
    EXPECT_NEAR(r.aa, 0.7, 1e-12);
    EXPECT_NEAR(r.kappa, 0.4, 1e-12);
    EXPECT_NEAR(r.per_class[0], 0.8, 1e-12);
    EXPECT_NEAR(r.per_class[1], 0.6, 1e-12);
}

TEST(Metrics, AbsentClassExcludedFromAa) {
    const auto r = compute_metrics(ConfusionMatrix::from_counts({{8, 2, 0}, {0, 0, 0}, {1, 0, 4}}));
    EXPECT_NEAR(r.aa, (0.8 + 0.8) / 2.0, 1e-12);
    EXPECT_EQ(r.per_class[1], 0.0);
}

TEST(Metrics, DegenerateChanceAgreement) {
    const auto r = compute_metrics(ConfusionMatrix::from_counts({{5, 0}, {0, 0}}));
    EXPECT_EQ(r.kappa, 0.0);
    EXPECT_EQ(r.oa, 1.0);
    EXPECT_THROW(compute_metrics(ConfusionMatrix(2)), DataError);
}

TEST(Metrics, MatchesListOracle) {
    Xorshift64Star rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t k = 2 + rng.below(6);
        std::vector<std::uint16_t> truth, pred;
        for (int i = 0; i < 200; ++i) {
            const auto t = static_cast<std::uint16_t>(1 + rng.below(k));
            truth.push_back(t);
            pred.push_back(rng.uniform() < 0.6 ? t : static_cast<std::uint16_t>(1 + rng.below(k)));
        }
        const auto r = compute_metrics(confusion_from_lists(truth, pred, k));
        const auto o = metrics_from_lists(truth, pred);
        EXPECT_NEAR(r.oa, o.oa, 1e-12);
        EXPECT_NEAR(r.aa, o.aa, 1e-12);
        EXPECT_NEAR(r.kappa, o.kappa, 1e-12);
    }
}

TEST(Metrics, InvariantUnderClassRelabeling) {
    Xorshift64Star rng(6);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t k = 2 + rng.below(5);
        const ConfusionMatrix m = random_matrix(k, rng);
        const auto perm = testing_support::random_nonidentity_permutation(k, rng);
        std::vector<std::vector<std::uint64_t>> rows(k, std::vector<std::uint64_t>(k));
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) rows[i][j] = m.at(perm[i] + 1, perm[j] + 1);
        const auto a = compute_metrics(m), b = compute_metrics(ConfusionMatrix::from_counts(rows));
        EXPECT_NEAR(a.oa, b.oa, 1e-12);
        EXPECT_NEAR(a.aa, b.aa, 1e-12);
        EXPECT_NEAR(a.kappa, b.kappa, 1e-12);
    }
}

TEST(Metrics, KappaBoundsAndBalancedCase) {
    Xorshift64Star rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const auto r = compute_metrics(random_matrix(2 + rng.below(5), rng));
        if (r.oa < 1.0) {
            EXPECT_LE(r.kappa, r.oa);
        }
    }
    // Equal row sums and equal recalls: AA == OA.
    const auto b = compute_metrics(ConfusionMatrix::from_counts({{7, 3, 0}, {0, 7, 3}, {3, 0, 7}}));
    EXPECT_NEAR(b.aa, b.oa, 1e-12);
}

TEST(Metrics, MergeIsCellwise) {
    Xorshift64Star rng(8);
    ConfusionMatrix a = random_matrix(3, rng), b = random_matrix(3, rng), c = random_matrix(3, rng);
    ConfusionMatrix ab = a;
    ab.merge(b);
    ab.merge(c);
    ConfusionMatrix cb = c;
    cb.merge(b);
    cb.merge(a);
    EXPECT_EQ(ab, cb);
    EXPECT_EQ(ab.total(), a.total() + b.total() + c.total());
    EXPECT_THROW(ab.merge(ConfusionMatrix(2)), ShapeError);
}

TEST(Report, JsonShape) {
    TempDir dir;
    const auto r = compute_metrics(ConfusionMatrix::from_counts({{40, 10}, {20, 30}}), "DB1Li");
    write_report(r, dir / "report.json");
    std::ifstream in(dir / "report.json");
    const auto j = nlohmann::json::parse(in);
    EXPECT_EQ(j["config"], "DB1Li");
    EXPECT_EQ(j["confusion"], nlohmann::json::parse("[[40,10],[20,30]]"));
    EXPECT_EQ(j["per_class"].size(), 2u);
    EXPECT_NEAR(j["kappa"].get<double>(), 0.4, 1e-12);
}

TEST(Map, SinglePixel) {
    const std::vector<std::uint16_t> one{1};
    const auto bytes = render_map_ppm(one, 1, 1);
    const std::string header = "P6\n1 1\n255\n";
    ASSERT_EQ(bytes.size(), header.size() + 3);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())), header);
    EXPECT_EQ(bytes[header.size()], kClassPalette[1][0]);
    EXPECT_EQ(bytes[header.size() + 1], kClassPalette[1][1]);
    EXPECT_EQ(bytes[header.size() + 2], kClassPalette[1][2]);
}

TEST(Map, UnlabeledIsBlackAndReproducible) {
    TempDir dir;
    const std::vector<std::uint16_t> zeros(12, 0);
    const auto bytes = render_map_ppm(zeros, 3, 4);
    EXPECT_TRUE(std::all_of(bytes.end() - 36, bytes.end(), [](unsigned char b) { return b == 0; }));
    std::vector<std::uint16_t> classes(12);
    for (std::size_t i = 0; i < 12; ++i) classes[i] = static_cast<std::uint16_t>(i % 17);
    render_map(classes, 3, 4, dir / "a.ppm");
    render_map(classes, 3, 4, dir / "b.ppm");
    EXPECT_EQ(detail::read_file_bytes(dir / "a.ppm"), detail::read_file_bytes(dir / "b.ppm"));
    const std::vector<std::uint16_t> too_big{17};
    EXPECT_THROW(render_map_ppm(too_big, 1, 1), ConfigError);
    EXPECT_THROW(render_map_ppm(classes, 2, 2), ShapeError);
}

TEST(Map, PaletteColorsDistinct) {
    for (std::size_t i = 0; i < kClassPalette.size(); ++i)
        for (std::size_t j = i + 1; j < kClassPalette.size(); ++j) EXPECT_NE(kClassPalette[i], kClassPalette[j]);
}
