#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bandfuse/errors.hpp"
#include "bandfuse/scene.hpp"

namespace bandfuse {

/// The four spectral orderings: native, reversed, importance descending,
/// importance ascending.
enum class OrderId : std::uint32_t { DB1 = 0, DB2 = 1, DB3 = 2, DB4 = 3 };

inline std::string order_name(OrderId id) { return "DB" + std::to_string(static_cast<unsigned>(id) + 1); }

inline bool needs_ranking(OrderId id) { return id == OrderId::DB3 || id == OrderId::DB4; }

/// Band importance. `descending_order` lists band indices from most to least
/// important; equal scores keep the lower band index first.
struct BandRanking {
    std::vector<double> scores;
    std::vector<std::size_t> descending_order;

    static BandRanking from_scores(std::vector<double> scores) {
        std::vector<std::size_t> order(scores.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
        return BandRanking{std::move(scores), std::move(order)};
    }

    /// Scores are synthesized as C-1-rank so the two fields stay consistent.
    static BandRanking from_permutation(std::vector<std::size_t> order) {
        const std::size_t c = order.size();
        std::vector<bool> seen(c, false);
        for (std::size_t b : order) {
            if (b >= c) throw FormatError("band index " + std::to_string(b) + " out of range for " + std::to_string(c) + " bands");
            if (seen[b]) throw FormatError("band index " + std::to_string(b) + " repeated in permutation");
            seen[b] = true;
        }
        std::vector<double> scores(c);
        for (std::size_t rank = 0; rank < c; ++rank) scores[order[rank]] = static_cast<double>(c - 1 - rank);
        return BandRanking{std::move(scores), std::move(order)};
    }

    std::size_t bands() const noexcept { return scores.size(); }
    friend bool operator==(const BandRanking&, const BandRanking&) = default;
};

/// One stream's band ordering. `permutation[i]` is the source band placed at
/// sequence position i. With LiDAR injection the LiDAR value is added as a
/// pseudo-band at both ends of the sequence.
struct BandOrderSpec {
    OrderId id = OrderId::DB1;
    std::vector<std::size_t> permutation;
    bool lidar_injection = false;
    std::size_t source_bands = 0;  // C of the scene; exceeds permutation size under top-k

    std::size_t sequence_length() const noexcept { return permutation.size() + (lidar_injection ? 2 : 0); }
    std::string name() const { return order_name(id) + (lidar_injection ? "Li" : ""); }
    friend bool operator==(const BandOrderSpec&, const BandOrderSpec&) = default;
};

/// Builds the ordering `id` over `bands` bands. `top_k` (0 = all) keeps only the
/// k most important bands for DB3/DB4.
inline BandOrderSpec build_order(OrderId id, std::size_t bands, const BandRanking* ranking = nullptr,
                                 bool lidar_injection = false, std::size_t top_k = 0) {
    if (bands == 0) throw ConfigError("band order over zero bands");
    BandOrderSpec spec{id, {}, lidar_injection, bands};
    if (!needs_ranking(id)) {
        spec.permutation.resize(bands);
        std::iota(spec.permutation.begin(), spec.permutation.end(), std::size_t{0});
        if (id == OrderId::DB2) std::reverse(spec.permutation.begin(), spec.permutation.end());
        return spec;
    }
    if (ranking == nullptr) throw ConfigError(order_name(id) + " requires a band ranking");
    if (ranking->bands() != bands)
        throw ConfigError("ranking covers " + std::to_string(ranking->bands()) + " bands, scene has " +
                          std::to_string(bands));
    if (top_k > bands) throw ConfigError("top-k " + std::to_string(top_k) + " exceeds band count");
    const std::size_t keep = top_k == 0 ? bands : top_k;
    spec.permutation.assign(ranking->descending_order.begin(),
                            ranking->descending_order.begin() + static_cast<std::ptrdiff_t>(keep));
    if (id == OrderId::DB4) std::reverse(spec.permutation.begin(), spec.permutation.end());
    return spec;
}

/// Reorders one pixel spectrum; with injection the result is [l, permuted..., l].
template <typename T>
std::vector<double> apply_order(std::span<const T> spectrum, const BandOrderSpec& spec, double lidar = 0.0) {
    if (spectrum.size() != spec.source_bands)
        throw ShapeError("spectrum of length " + std::to_string(spectrum.size()) + " does not fit order " +
                         spec.name() + " over " + std::to_string(spec.source_bands) + " bands");
    std::vector<double> out;
    out.reserve(spec.sequence_length());
    if (spec.lidar_injection) out.push_back(lidar);
    for (std::size_t b : spec.permutation) out.push_back(static_cast<double>(spectrum[b]));
    if (spec.lidar_injection) out.push_back(lidar);
    return out;
}

inline std::vector<double> apply_order(const std::vector<double>& spectrum, const BandOrderSpec& spec,
                                       double lidar = 0.0) {
    return apply_order(std::span<const double>(spectrum), spec, lidar);
}

inline std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm) {
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv.at(perm[i]) = i;
    return inv;
}

/// Parses "db1", "db3li", case-insensitive.
inline BandOrderSpec parse_order_token(const std::string& token, std::size_t bands, const BandRanking* ranking,
                                       std::size_t top_k = 0) {
    std::string t;
    for (char ch : token) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    bool li = false;
    if (t.size() > 2 && t.ends_with("li")) {
        li = true;
        t.resize(t.size() - 2);
    }
    if (t.size() != 3 || !t.starts_with("db") || t[2] < '1' || t[2] > '4')
        throw ConfigError("unknown band order \"" + token + "\" (expected db1..db4 with optional li suffix)");
    return build_order(static_cast<OrderId>(t[2] - '1'), bands, ranking, li, top_k);
}

/// Parses "ORDER[+ORDER]" into one spec per stream.
inline std::vector<BandOrderSpec> parse_order_list(const std::string& text, std::size_t bands,
                                                   const BandRanking* ranking, std::size_t top_k = 0) {
    std::vector<BandOrderSpec> orders;
    std::size_t start = 0;
    while (true) {
        const std::size_t plus = text.find('+', start);
        orders.push_back(parse_order_token(text.substr(start, plus - start), bands, ranking, top_k));
        if (plus == std::string::npos) break;
        start = plus + 1;
    }
    if (orders.size() > 2) throw ConfigError("at most two streams are supported, got \"" + text + "\"");
    return orders;
}

inline bool order_list_needs_ranking(const std::string& text) {
    std::string lower;
    for (char ch : text) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    return lower.find("db3") != std::string::npos || lower.find("db4") != std::string::npos;
}

/// Fisher discriminant ratio per band over the training pixels:
///   sum_c n_c (mu_cb - mu_b)^2 / (sum_c n_c var_cb + 1e-12), population variances.
/// `values` is pixel-interleaved, `bands` values per pixel.
template <class T>
std::vector<double> fisher_scores(std::span<const T> values, std::size_t bands, std::span<const std::uint16_t> labels,
                                  std::span<const std::size_t> train_pixels) {
    constexpr double kEps = 1e-12;
    if (bands == 0 || values.size() != labels.size() * bands)
        throw ShapeError("fisher_scores: " + std::to_string(values.size()) + " values for " +
                         std::to_string(labels.size()) + " pixels of " + std::to_string(bands) + " bands");
    std::vector<std::size_t> pixels(train_pixels.begin(), train_pixels.end());
    std::sort(pixels.begin(), pixels.end());
    std::map<std::uint16_t, std::vector<std::size_t>> by_class;
    for (std::size_t px : pixels) {
        if (px >= labels.size()) throw RankingError("training pixel outside the scene");
        const std::uint16_t cls = labels[px];
        if (cls == 0) throw RankingError("training pixel " + std::to_string(px) + " is unlabeled");
        by_class[cls].push_back(px);
    }
    if (by_class.size() < 2) throw RankingError("Fisher ranking needs at least two classes in the training set");

    const std::size_t c = bands;
    std::vector<double> scores(c);
    for (std::size_t b = 0; b < c; ++b) {
        double total = 0.0;
        for (std::size_t px : pixels) total += static_cast<double>(values[px * c + b]);
        const double mu = total / static_cast<double>(pixels.size());
        double between = 0.0, within = 0.0;
        for (const auto& [cls, members] : by_class) {
            const auto n = static_cast<double>(members.size());
            double s = 0.0;
            for (std::size_t px : members) s += static_cast<double>(values[px * c + b]);
            const double mu_c = s / n;
            double ss = 0.0;
            for (std::size_t px : members) {
                const double d = static_cast<double>(values[px * c + b]) - mu_c;
                ss += d * d;
            }
            between += n * (mu_c - mu) * (mu_c - mu);
            within += ss;  // n * population variance
        }
        scores[b] = between / (within + kEps);
    }
    return scores;
}

inline BandRanking rank_bands_fisher(const HsiCube& hsi, const LabelMap& labels,
                                     std::span<const std::size_t> train_pixels) {
    return BandRanking::from_scores(fisher_scores(std::span<const float>(hsi.values), hsi.bands,
                                                  std::span<const std::uint16_t>(labels.labels), train_pixels));
}

inline BandRanking rank_bands_fisher(const Scene& scene, std::span<const std::size_t> train_pixels) {
    return rank_bands_fisher(scene.hsi, scene.labels, train_pixels);
}

namespace detail {

inline BandRanking ranking_from_values(const std::string& kind, const std::vector<double>& values, std::size_t bands) {
    if (values.size() != bands)
        throw FormatError("ranking lists " + std::to_string(values.size()) + " values, expected " + std::to_string(bands));
    if (kind == "scores") {
        for (double v : values)
            if (!std::isfinite(v)) throw FormatError("non-finite ranking score");
        return BandRanking::from_scores(values);
    }
    if (kind == "permutation") {
        std::vector<std::size_t> perm;
        for (double v : values) {
            if (v < 0 || v != std::floor(v)) throw FormatError("permutation entries must be non-negative integers");
            perm.push_back(static_cast<std::size_t>(v));
        }
        return BandRanking::from_permutation(std::move(perm));
    }
    throw FormatError("unknown ranking kind \"" + kind + "\"");
}

inline bool is_permutation_of_range(const std::vector<double>& values) {
    std::vector<bool> seen(values.size(), false);
    for (double v : values) {
        if (v < 0 || v != std::floor(v) || v >= static_cast<double>(values.size())) return false;
        const auto i = static_cast<std::size_t>(v);
        if (seen[i]) return false;
        seen[i] = true;
    }
    return true;
}

}  // namespace detail

/// Loads a ranking from ranking.json ({"bands", "kind", "values"}) or from a
/// plain comma/whitespace separated list. A plain list of integers that
/// repeats an index is rejected; one forming a permutation of 0..C-1 is read
/// as an order, anything else as scores.
inline BandRanking load_ranking(const fs::path& path, std::size_t bands) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        try {
            const auto j = nlohmann::json::parse(text);
            const auto declared = j.at("bands").get<std::size_t>();
            if (declared != bands)
                throw FormatError("ranking declares " + std::to_string(declared) + " bands, expected " +
                                  std::to_string(bands));
            return detail::ranking_from_values(j.at("kind").get<std::string>(),
                                               j.at("values").get<std::vector<double>>(), bands);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ": " + e.what());
        }
    }
    std::vector<double> values;
    std::string cleaned = text;
    std::replace(cleaned.begin(), cleaned.end(), ',', ' ');
    std::istringstream is(cleaned);
    std::string tok;
    while (is >> tok) {
        try {
            std::size_t used = 0;
            values.push_back(std::stod(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            throw FormatError(path.string() + ": cannot parse \"" + tok + "\"");
        }
    }
    if (values.size() != bands)
        throw FormatError(path.string() + ": " + std::to_string(values.size()) + " entries, expected " +
                          std::to_string(bands));
    const bool integral = std::all_of(values.begin(), values.end(), [](double v) { return v == std::floor(v) && v >= 0; });
    if (integral && detail::is_permutation_of_range(values)) return detail::ranking_from_values("permutation", values, bands);
    if (integral) {
        std::vector<double> sorted = values;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end() &&
            *std::max_element(values.begin(), values.end()) < static_cast<double>(bands))
            throw FormatError(path.string() + ": repeated band index in permutation");
    }
    return detail::ranking_from_values("scores", values, bands);
}

inline nlohmann::json ranking_to_json(const BandRanking& ranking) {
    return {{"bands", ranking.bands()}, {"kind", "scores"}, {"values", ranking.scores}};
}

inline void save_ranking(const BandRanking& ranking, const fs::path& path) {
    detail::write_text_atomic(path, ranking_to_json(ranking).dump() + "\n");
}

}  // namespace bandfuse
