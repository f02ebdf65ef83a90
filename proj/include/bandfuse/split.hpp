#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bandfuse/errors.hpp"
#include "bandfuse/rng.hpp"
#include "bandfuse/scene.hpp"

namespace bandfuse {

using ClassIndexMap = std::map<std::uint16_t, std::vector<std::size_t>>;

/// Train/test partition of the labeled pixels, keyed by class. Pixel indices
/// are flat (r * W + c) and sorted ascending within each class.
struct SplitSpec {
    std::uint64_t seed = 0;
    std::size_t train_per_class = 0;            // 0 when a fraction rule was used
    std::optional<double> train_fraction;
    ClassIndexMap train;
    ClassIndexMap test;

    std::vector<std::size_t> train_pixels() const { return flatten(train); }
    std::vector<std::size_t> test_pixels() const { return flatten(test); }

    friend bool operator==(const SplitSpec&, const SplitSpec&) = default;

private:
    static std::vector<std::size_t> flatten(const ClassIndexMap& m) {
        std::vector<std::size_t> out;
        for (const auto& [cls, idx] : m) out.insert(out.end(), idx.begin(), idx.end());
        return out;
    }
};

namespace detail {

inline ClassIndexMap pixels_by_class(const LabelMap& labels) {
    ClassIndexMap by_class;
    for (std::size_t i = 0; i < labels.labels.size(); ++i)
        if (labels.labels[i] != 0) by_class[labels.labels[i]].push_back(i);
    return by_class;
}

/// Draws `take` members of `pool` uniformly without replacement (partial
/// Fisher-Yates) and moves them to the front.
inline void sample_front(std::vector<std::size_t>& pool, std::size_t take, Xorshift64Star& rng) {
    for (std::size_t i = 0; i < take; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
        std::swap(pool[i], pool[j]);
    }
}

template <typename CountRule>
SplitSpec split_with(const LabelMap& labels, std::uint64_t seed, CountRule&& count_for) {
    SplitSpec split;
    split.seed = seed;
    Xorshift64Star rng(seed);
    for (auto& [cls, pool] : pixels_by_class(labels)) {
        if (pool.size() < 2)
            throw SplitError("class " + std::to_string(cls) + " has " + std::to_string(pool.size()) +
                             " labeled pixel(s); at least 2 are needed");
        const std::size_t take = count_for(pool.size());
        sample_front(pool, take, rng);
        std::vector<std::size_t> tr(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
        std::vector<std::size_t> te(pool.begin() + static_cast<std::ptrdiff_t>(take), pool.end());
        std::sort(tr.begin(), tr.end());
        std::sort(te.begin(), te.end());
        split.train[cls] = std::move(tr);
        if (!te.empty()) split.test[cls] = std::move(te);
    }
    return split;
}

}  // namespace detail

/// Samples `per_class` training pixels per class; classes with no more than
/// `per_class` labeled pixels put ceil(size/2) in train. The rest go to test.
inline SplitSpec make_split(const LabelMap& labels, std::size_t per_class, std::uint64_t seed) {
    if (per_class == 0) throw SplitError("train_per_class must be at least 1");
    SplitSpec split = detail::split_with(labels, seed, [per_class](std::size_t size) {
        return per_class < size ? per_class : (size + 1) / 2;
    });
    split.train_per_class = per_class;
    return split;
}

/// Fraction variant: ceil(f * size) training pixels per class, kept within [1, size-1].
inline SplitSpec make_split_fraction(const LabelMap& labels, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw SplitError("train fraction must lie in (0, 1)");
    SplitSpec split = detail::split_with(labels, seed, [fraction](std::size_t size) {
        const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(size)));
        return std::clamp<std::size_t>(n, 1, size - 1);
    });
    split.train_fraction = fraction;
    return split;
}

inline nlohmann::json split_to_json(const SplitSpec& split) {
    auto side = [](const ClassIndexMap& m) {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [cls, idx] : m) j[std::to_string(cls)] = idx;
        return j;
    };
    nlohmann::json j = {{"seed", split.seed},
                        {"train_per_class", split.train_per_class},
                        {"train", side(split.train)},
                        {"test", side(split.test)}};
    if (split.train_fraction) j["train_fraction"] = *split.train_fraction;
    return j;
}

inline SplitSpec split_from_json(const nlohmann::json& j) {
    auto side = [](const nlohmann::json& obj) {
        ClassIndexMap m;
        for (const auto& [key, idx] : obj.items()) {
            const unsigned long cls = std::stoul(key);
            if (cls == 0 || cls > 0xFFFF) throw FormatError("invalid class key \"" + key + "\" in split file");
            m[static_cast<std::uint16_t>(cls)] = idx.get<std::vector<std::size_t>>();
        }
        return m;
    };
    try {
        SplitSpec s;
        s.seed = j.at("seed").get<std::uint64_t>();
        s.train_per_class = j.at("train_per_class").get<std::size_t>();
        if (j.contains("train_fraction")) s.train_fraction = j["train_fraction"].get<double>();
        s.train = side(j.at("train"));
        s.test = side(j.at("test"));
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("split file: ") + e.what());
    } catch (const std::invalid_argument&) {
        throw FormatError("split file: non-numeric class key");
    }
}

inline void write_split(const SplitSpec& split, const fs::path& path) {
    detail::write_text_atomic(path, split_to_json(split).dump() + "\n");
}

inline SplitSpec read_split(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return split_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

/// Checks that a split references labeled pixels of `labels` consistently.
inline void validate_split(const SplitSpec& split, const LabelMap& labels) {
    auto check = [&](const ClassIndexMap& m, const char* side) {
        for (const auto& [cls, idx] : m)
            for (std::size_t px : idx) {
                if (px >= labels.labels.size())
                    throw SplitError(std::string(side) + " pixel " + std::to_string(px) + " outside the scene");
                if (labels.labels[px] != cls)
                    throw SplitError(std::string(side) + " pixel " + std::to_string(px) + " is not of class " +
                                     std::to_string(cls));
            }
    };
    check(split.train, "train");
    check(split.test, "test");
    if (split.train.empty()) throw SplitError("split has an empty training set");
}

}  // namespace bandfuse
