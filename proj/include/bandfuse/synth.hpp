#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "bandfuse/errors.hpp"
#include "bandfuse/rng.hpp"
#include "bandfuse/scene.hpp"

namespace bandfuse {

struct SynthConfig {
    std::size_t classes = 8;
    std::size_t bands = 40;
    std::size_t height = 64;
    std::size_t width = 64;
    std::uint64_t seed = 42;
    double spectral_noise = 0.05;
    double lidar_noise = 0.05;
    std::size_t smoothing_window = 5;
    std::size_t regions_per_axis = 4;

    void validate() const {
        if (classes == 0 || bands == 0 || height == 0 || width == 0 || smoothing_window == 0 || regions_per_axis == 0)
            throw ConfigError("synthetic scene parameters must be positive");
        if (classes > 16) throw ConfigError("at most 16 classes are supported (palette bound)");
        if (smoothing_window % 2 == 0) throw ConfigError("smoothing window must be odd");
        if (spectral_noise < 0.0 || lidar_noise < 0.0) throw ConfigError("noise levels must be non-negative");
        if (classes > height * width) throw ConfigError("more classes than pixels");
    }
};

namespace detail {

enum : std::uint64_t { kSynthSignature = 0x516, kSynthSites = 0x5173, kSynthNoise = 0x4015E };

/// Centered moving average; the window shrinks at the ends of the spectrum.
inline std::vector<double> moving_average(const std::vector<double>& x, std::size_t window) {
    const auto half = static_cast<std::ptrdiff_t>(window / 2);
    const auto n = static_cast<std::ptrdiff_t>(x.size());
    std::vector<double> out(x.size());
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, i - half);
        const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(n - 1, i + half);
        double s = 0.0;
        for (std::ptrdiff_t j = lo; j <= hi; ++j) s += x[static_cast<std::size_t>(j)];
        out[static_cast<std::size_t>(i)] = s / static_cast<double>(hi - lo + 1);
    }
    return out;
}

}  // namespace detail

/// Smoothed white-noise signature of class `cls` (1-based).
inline std::vector<double> class_signature(const SynthConfig& cfg, std::size_t cls) {
    Xorshift64Star rng(derive_seed(cfg.seed, detail::kSynthSignature, cls));
    std::vector<double> noise(cfg.bands);
    for (double& v : noise) v = rng.uniform();
    return detail::moving_average(noise, cfg.smoothing_window);
}

/// Voronoi label layout over g^2 random sites. Retries with the next sub-seed
/// until every class owns at least one pixel.
inline std::vector<std::uint16_t> synth_layout(const SynthConfig& cfg) {
    const std::size_t sites = cfg.regions_per_axis * cfg.regions_per_axis;
    for (std::uint64_t attempt = 0; attempt < 100; ++attempt) {
        Xorshift64Star rng(derive_seed(cfg.seed, detail::kSynthSites, attempt));
        std::vector<double> sr(sites), sc(sites);
        std::vector<std::uint16_t> site_class(sites);
        for (std::size_t s = 0; s < sites; ++s) {
            sr[s] = rng.uniform(0.0, static_cast<double>(cfg.height));
            sc[s] = rng.uniform(0.0, static_cast<double>(cfg.width));
            site_class[s] = static_cast<std::uint16_t>(1 + rng.below(cfg.classes));
        }
        std::vector<std::uint16_t> labels(cfg.height * cfg.width);
        std::vector<bool> seen(cfg.classes + 1, false);
        for (std::size_t r = 0; r < cfg.height; ++r)
            for (std::size_t c = 0; c < cfg.width; ++c) {
                const double pr = static_cast<double>(r) + 0.5, pc = static_cast<double>(c) + 0.5;
                std::size_t best = 0;
                double best_d = std::numeric_limits<double>::infinity();
                for (std::size_t s = 0; s < sites; ++s) {
                    const double d = (pr - sr[s]) * (pr - sr[s]) + (pc - sc[s]) * (pc - sc[s]);
                    if (d < best_d) {
                        best_d = d;
                        best = s;
                    }
                }
                labels[r * cfg.width + c] = site_class[best];
                seen[site_class[best]] = true;
            }
        if (std::all_of(seen.begin() + 1, seen.end(), [](bool b) { return b; })) return labels;
    }
    throw ConfigError("could not place every class in the layout after 100 attempts; raise regions_per_axis");
}

/// Deterministic scene: class signature plus Gaussian noise per band, LiDAR
/// height c/K plus noise, all clamped to [0, 1]. Every pixel is labeled.
inline Scene generate(const SynthConfig& cfg) {
    cfg.validate();
    Scene scene;
    scene.name = "synth-seed" + std::to_string(cfg.seed);
    scene.classes = cfg.classes;
    const std::size_t h = cfg.height, w = cfg.width, c = cfg.bands;
    scene.labels = LabelMap{h, w, synth_layout(cfg)};

    std::vector<std::vector<double>> signatures;
    for (std::size_t k = 1; k <= cfg.classes; ++k) signatures.push_back(class_signature(cfg, k));

    scene.hsi = HsiCube{h, w, c, std::vector<float>(h * w * c)};
    scene.lidar = LidarMap{h, w, std::vector<float>(h * w)};
    Xorshift64Star noise(derive_seed(cfg.seed, detail::kSynthNoise));
    const double k = static_cast<double>(cfg.classes);
    for (std::size_t px = 0; px < h * w; ++px) {
        const std::uint16_t cls = scene.labels.labels[px];
        const auto& sig = signatures[cls - 1];
        for (std::size_t b = 0; b < c; ++b)
            scene.hsi.values[px * c + b] =
                static_cast<float>(std::clamp(sig[b] + cfg.spectral_noise * noise.normal(), 0.0, 1.0));
        scene.lidar.values[px] =
            static_cast<float>(std::clamp(static_cast<double>(cls) / k + cfg.lidar_noise * noise.normal(), 0.0, 1.0));
    }
    return scene;
}

}  // namespace bandfuse
