#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "bandfuse/band_order.hpp"
#include "bandfuse/hslinet.hpp"
#include "bandfuse/rng.hpp"
#include "bandfuse/scene.hpp"

namespace testing_support {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("bandfuse-test-" + std::to_string(rd()) + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// Random scene with labels cycling through 1..classes.
inline bandfuse::Scene random_scene(std::size_t h, std::size_t w, std::size_t c, std::size_t classes,
                                    std::uint64_t seed) {
    bandfuse::Xorshift64Star rng(seed);
    bandfuse::Scene s;
    s.name = "random";
    s.classes = classes;
    s.hsi = {h, w, c, std::vector<float>(h * w * c)};
    s.lidar = {h, w, std::vector<float>(h * w)};
    s.labels = {h, w, std::vector<std::uint16_t>(h * w)};
    for (float& v : s.hsi.values) v = static_cast<float>(rng.uniform());
    for (float& v : s.lidar.values) v = static_cast<float>(rng.uniform());
    for (std::size_t i = 0; i < h * w; ++i) s.labels.labels[i] = static_cast<std::uint16_t>(1 + i % classes);
    return s;
}

/// Single- or dual-stream config over `bands` bands without a ranking.
inline bandfuse::ModelConfig micro_config(std::size_t bands, std::size_t patch, std::size_t filters, std::size_t kernel,
                                          std::size_t hidden, std::size_t classes, const std::string& orders = "db1") {
    bandfuse::ModelConfig cfg;
    cfg.orders = bandfuse::parse_order_list(orders, bands, nullptr);
    cfg.bands = bands;
    cfg.patch = patch;
    cfg.filters = filters;
    cfg.kernel = kernel;
    cfg.hidden = hidden;
    cfg.classes = classes;
    cfg.validate();
    return cfg;
}

/// Batch of uniform random sequences with labels cycling through the classes.
inline bandfuse::SampleBatch random_batch(const bandfuse::ModelConfig& cfg, std::size_t batch, std::uint64_t seed) {
    bandfuse::Xorshift64Star rng(seed);
    bandfuse::SampleBatch b;
    b.batch = batch;
    b.pixels = cfg.pixels_per_sample();
    for (std::size_t s = 0; s < cfg.num_streams(); ++s) {
        bandfuse::Tensor t({batch * b.pixels, 1, cfg.sequence_length(s)});
        for (double& v : t.values()) v = rng.uniform();
        b.streams.push_back(std::move(t));
    }
    b.one_hot = bandfuse::Tensor({batch, cfg.classes});
    for (std::size_t i = 0; i < batch; ++i) {
        b.labels.push_back(static_cast<std::uint16_t>(1 + i % cfg.classes));
        b.one_hot.at(i, i % cfg.classes) = 1.0;
    }
    return b;
}

/// Reorders positions of every sequence in a stream tensor [M x 1 x L]:
/// out[m][i] = in[m][perm[i]].
inline bandfuse::Tensor permute_positions(const bandfuse::Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t rows = x.dim(0), len = x.dim(2);
    bandfuse::Tensor out(x.shape());
    for (std::size_t m = 0; m < rows; ++m)
        for (std::size_t i = 0; i < len; ++i) out[m * len + i] = x[m * len + perm[i]];
    return out;
}

/// Random permutation of 0..n-1 that is not the identity (n >= 2).
inline std::vector<std::size_t> random_nonidentity_permutation(std::size_t n, bandfuse::Xorshift64Star& rng) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    bool identity = true;
    while (identity) {
        for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
        for (std::size_t i = 0; i < n && identity; ++i) identity = p[i] == i;
    }
    return p;
}

}  // namespace testing_support
