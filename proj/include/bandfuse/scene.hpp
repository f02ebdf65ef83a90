#pragma once

// Co-registered HSI / LiDAR / label scenes and the on-disk scene directory:
//
//   meta.json   {"name", "height", "width", "bands", "classes", "dtype": "f32le", "layout": "bip"}
//   hsi.bin     H*W*C float32 LE, pixel-major (all bands of a pixel consecutive)
//   lidar.bin   H*W float32 LE, row-major
//   labels.bin  H*W uint16 LE, row-major, 0 = unlabeled

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bandfuse/errors.hpp"

namespace bandfuse {

namespace fs = std::filesystem;

struct HsiCube {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t bands = 0;
    std::vector<float> values;  // BIP: ((r * width) + c) * bands + b

    float at(std::size_t r, std::size_t c, std::size_t b) const { return values[(r * width + c) * bands + b]; }
    std::span<const float> pixel(std::size_t flat) const { return {values.data() + flat * bands, bands}; }
    friend bool operator==(const HsiCube&, const HsiCube&) = default;
};

struct LidarMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> values;

    float at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
    friend bool operator==(const LidarMap&, const LidarMap&) = default;
};

struct LabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint16_t> labels;  // 0 = unlabeled, 1..K classes

    std::uint16_t at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }
    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

struct Scene {
    std::string name;
    std::size_t classes = 0;
    HsiCube hsi;
    LidarMap lidar;
    LabelMap labels;

    std::size_t height() const noexcept { return hsi.height; }
    std::size_t width() const noexcept { return hsi.width; }
    std::size_t bands() const noexcept { return hsi.bands; }
    std::size_t pixels() const noexcept { return hsi.height * hsi.width; }

    /// Throws DataError/ShapeError if the triple is not a consistent scene.
    void validate() const {
        if (hsi.height == 0 || hsi.width == 0 || hsi.bands == 0) throw ShapeError("scene has an empty dimension");
        if (lidar.height != hsi.height || lidar.width != hsi.width || labels.height != hsi.height ||
            labels.width != hsi.width)
            throw ShapeError("HSI, LiDAR and label rasters are not co-registered");
        if (hsi.values.size() != pixels() * bands() || lidar.values.size() != pixels() ||
            labels.labels.size() != pixels())
            throw ShapeError("raster buffers do not match the scene dimensions");
        if (classes == 0) throw DataError("scene declares zero classes");
        for (std::size_t i = 0; i < hsi.values.size(); ++i)
            if (!std::isfinite(hsi.values[i]))
                throw DataError("non-finite HSI value at pixel " + std::to_string(i / bands()) + ", band " +
                                std::to_string(i % bands()));
        for (std::size_t i = 0; i < lidar.values.size(); ++i)
            if (!std::isfinite(lidar.values[i])) throw DataError("non-finite LiDAR value at pixel " + std::to_string(i));
        for (std::size_t i = 0; i < labels.labels.size(); ++i)
            if (labels.labels[i] > classes)
                throw DataError("label " + std::to_string(labels.labels[i]) + " at pixel " + std::to_string(i) +
                                " exceeds class count " + std::to_string(classes));
    }

    friend bool operator==(const Scene&, const Scene&) = default;
};

namespace detail {

template <typename T>
T from_le_bytes(const unsigned char* p) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
    return std::bit_cast<T>(u);
}

template <typename T>
void to_le_bytes(T value, unsigned char* p) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>;
    const U u = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) p[i] = static_cast<unsigned char>(u >> (8 * i));
}

inline std::vector<unsigned char> read_file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

template <typename T>
std::vector<T> decode_le(const fs::path& path, std::size_t count) {
    const auto bytes = read_file_bytes(path);
    const std::size_t expected = count * sizeof(T);
    if (bytes.size() != expected)
        throw FormatError(path.filename().string() + ": expected " + std::to_string(expected) + " bytes, found " +
                          std::to_string(bytes.size()));
    std::vector<T> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = from_le_bytes<T>(bytes.data() + i * sizeof(T));
    return out;
}

template <typename T>
std::vector<unsigned char> encode_le(std::span<const T> values) {
    std::vector<unsigned char> bytes(values.size() * sizeof(T));
    for (std::size_t i = 0; i < values.size(); ++i) to_le_bytes<T>(values[i], bytes.data() + i * sizeof(T));
    return bytes;
}

/// Writes to a sibling temporary file and renames over the target.
inline void write_file_atomic(const fs::path& path, std::span<const unsigned char> bytes) {
    const fs::path tmp = path.parent_path() / ("." + path.filename().string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot replace " + path.string());
    }
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
    write_file_atomic(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

}  // namespace detail

inline Scene read_scene(const fs::path& dir) {
    const fs::path meta_path = dir / "meta.json";
    std::ifstream meta_in(meta_path);
    if (!meta_in) throw IoError("cannot open " + meta_path.string());
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(meta_path.string() + ": " + e.what());
    }

    Scene scene;
    try {
        scene.name = meta.value("name", dir.filename().string());
        const auto h = meta.at("height").get<std::size_t>();
        const auto w = meta.at("width").get<std::size_t>();
        const auto c = meta.at("bands").get<std::size_t>();
        scene.classes = meta.at("classes").get<std::size_t>();
        if (meta.value("dtype", "f32le") != "f32le") throw FormatError("unsupported dtype " + meta["dtype"].dump());
        if (meta.value("layout", "bip") != "bip") throw FormatError("unsupported layout " + meta["layout"].dump());
        if (h == 0 || w == 0 || c == 0) throw FormatError("meta.json declares an empty dimension");
        scene.hsi = HsiCube{h, w, c, detail::decode_le<float>(dir / "hsi.bin", h * w * c)};
        scene.lidar = LidarMap{h, w, detail::decode_le<float>(dir / "lidar.bin", h * w)};
        scene.labels = LabelMap{h, w, detail::decode_le<std::uint16_t>(dir / "labels.bin", h * w)};
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(meta_path.string() + ": " + e.what());
    }
    scene.validate();
    return scene;
}

inline void write_scene(const Scene& scene, const fs::path& dir) {
    scene.validate();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    const nlohmann::json meta = {{"name", scene.name},         {"height", scene.height()},
                                 {"width", scene.width()},      {"bands", scene.bands()},
                                 {"classes", scene.classes},    {"dtype", "f32le"},
                                 {"layout", "bip"}};
    detail::write_file_atomic(dir / "hsi.bin", detail::encode_le<float>(scene.hsi.values));
    detail::write_file_atomic(dir / "lidar.bin", detail::encode_le<float>(scene.lidar.values));
    detail::write_file_atomic(dir / "labels.bin", detail::encode_le<std::uint16_t>(scene.labels.labels));
    detail::write_text_atomic(dir / "meta.json", meta.dump(2) + "\n");
}

/// Per-channel min/max taken from training pixels only.
struct NormStats {
    std::vector<double> band_min;
    std::vector<double> band_max;
    double lidar_min = 0.0;
    double lidar_max = 0.0;
};

inline NormStats compute_norm_stats(const Scene& scene, std::span<const std::size_t> train_pixels) {
    if (train_pixels.empty()) throw SplitError("normalization needs at least one training pixel");
    const std::size_t c = scene.bands();
    NormStats s;
    s.band_min.assign(c, std::numeric_limits<double>::infinity());
    s.band_max.assign(c, -std::numeric_limits<double>::infinity());
    s.lidar_min = std::numeric_limits<double>::infinity();
    s.lidar_max = -std::numeric_limits<double>::infinity();
    for (std::size_t px : train_pixels) {
        if (px >= scene.pixels()) throw SplitError("training pixel " + std::to_string(px) + " outside the scene");
        const auto spec = scene.hsi.pixel(px);
        for (std::size_t b = 0; b < c; ++b) {
            s.band_min[b] = std::min<double>(s.band_min[b], spec[b]);
            s.band_max[b] = std::max<double>(s.band_max[b], spec[b]);
        }
        s.lidar_min = std::min<double>(s.lidar_min, scene.lidar.values[px]);
        s.lidar_max = std::max<double>(s.lidar_max, scene.lidar.values[px]);
    }
    return s;
}

namespace detail {
inline float min_max_scale(double x, double lo, double hi) {
    if (!(hi > lo)) return 0.0f;
    return static_cast<float>(std::clamp((x - lo) / (hi - lo), 0.0, 1.0));
}
}  // namespace detail

inline Scene apply_normalization(const Scene& scene, const NormStats& stats) {
    if (stats.band_min.size() != scene.bands()) throw ShapeError("normalization statistics band count mismatch");
    Scene out = scene;
    const std::size_t c = scene.bands();
    for (std::size_t i = 0; i < out.hsi.values.size(); ++i) {
        const std::size_t b = i % c;
        out.hsi.values[i] = detail::min_max_scale(scene.hsi.values[i], stats.band_min[b], stats.band_max[b]);
    }
    for (float& v : out.lidar.values) v = detail::min_max_scale(v, stats.lidar_min, stats.lidar_max);
    return out;
}

/// Min-max scales every HSI band and the LiDAR channel to [0,1] using
/// statistics of the training pixels; other pixels are clamped into range.
inline Scene normalize(const Scene& scene, std::span<const std::size_t> train_pixels) {
    return apply_normalization(scene, compute_norm_stats(scene, train_pixels));
}

struct PatchConfig {
    std::size_t size = 1;  // odd, symmetric-reflect padding at borders

    void validate(const Scene& scene) const {
        if (size % 2 == 0) throw ConfigError("patch size must be odd, got " + std::to_string(size));
        if (size > std::min(scene.height(), scene.width()))
            throw ConfigError("patch size " + std::to_string(size) + " exceeds the scene extent " +
                              std::to_string(scene.height()) + "x" + std::to_string(scene.width()));
    }
};

/// Symmetric reflection including the edge sample: -1 -> 0, n -> n-1.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    const auto sn = static_cast<std::ptrdiff_t>(n);
    while (i < 0 || i >= sn) {
        if (i < 0) i = -i - 1;
        if (i >= sn) i = 2 * sn - i - 1;
    }
    return static_cast<std::size_t>(i);
}

struct Patch {
    std::size_t size = 0;
    std::size_t bands = 0;
    std::vector<float> hsi;              // size*size pixels, each with `bands` values
    std::vector<float> lidar;            // size*size
    std::vector<std::size_t> source;     // flat scene index of each patch pixel
    std::uint16_t label = 0;
};

inline Patch extract_patch(const Scene& scene, std::size_t row, std::size_t col, const PatchConfig& cfg) {
    if (row >= scene.height() || col >= scene.width())
        throw ShapeError("patch center (" + std::to_string(row) + "," + std::to_string(col) + ") outside the scene");
    cfg.validate(scene);
    const std::size_t p = cfg.size;
    const auto half = static_cast<std::ptrdiff_t>(p / 2);
    const std::size_t c = scene.bands();
    Patch patch{p, c, {}, {}, {}, scene.labels.at(row, col)};
    patch.hsi.reserve(p * p * c);
    patch.lidar.reserve(p * p);
    patch.source.reserve(p * p);
    for (std::ptrdiff_t dr = -half; dr <= half; ++dr) {
        const std::size_t r = reflect_index(static_cast<std::ptrdiff_t>(row) + dr, scene.height());
        for (std::ptrdiff_t dc = -half; dc <= half; ++dc) {
            const std::size_t cc = reflect_index(static_cast<std::ptrdiff_t>(col) + dc, scene.width());
            const std::size_t flat = r * scene.width() + cc;
            const auto spec = scene.hsi.pixel(flat);
            patch.hsi.insert(patch.hsi.end(), spec.begin(), spec.end());
            patch.lidar.push_back(scene.lidar.values[flat]);
            patch.source.push_back(flat);
        }
    }
    return patch;
}

}  // namespace bandfuse
