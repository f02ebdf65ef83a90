#pragma once

// Experiment protocols shared by the CLI and the acceptance suite: single
// configuration runs, the ten-column band-order grid, the patch-size sweep and
// run manifests.

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <exception>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <nlohmann/json.hpp>

#include "bandfuse/band_order.hpp"
#include "bandfuse/hslinet.hpp"
#include "bandfuse/metrics.hpp"
#include "bandfuse/scene.hpp"
#include "bandfuse/split.hpp"
#include "bandfuse/trainer.hpp"

namespace bandfuse {

inline constexpr const char* kToolVersion = "1.0.0";

/// Keeps large activation buffers on the heap free lists between batches.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

/// Network hyperparameters that are not part of the band-order choice.
struct Architecture {
    std::size_t filters = 16;
    std::size_t kernel = 3;
    std::size_t hidden = 64;
    bool project_first = false;
};

inline ModelConfig make_model_config(std::vector<BandOrderSpec> orders, const Scene& scene, std::size_t patch,
                                     const Architecture& arch) {
    ModelConfig cfg;
    cfg.orders = std::move(orders);
    cfg.bands = scene.bands();
    cfg.patch = patch;
    cfg.filters = arch.filters;
    cfg.kernel = arch.kernel;
    cfg.hidden = arch.hidden;
    cfg.classes = scene.classes;
    cfg.project_first = arch.project_first;
    cfg.validate();
    return cfg;
}

/// Test-set confusion of a trained model on the pixels of `pixels`.
inline MetricsReport evaluate_pixels(const ModelParams& params, const ModelConfig& cfg, const Scene& normalized,
                                     std::span<const std::size_t> pixels, std::vector<std::uint16_t>* predictions = nullptr) {
    if (pixels.empty()) throw SplitError("no pixels to evaluate");
    const auto predicted = predict_pixels(params, cfg, normalized, pixels);
    ConfusionMatrix m(cfg.classes);
    for (std::size_t i = 0; i < pixels.size(); ++i) m.accumulate(normalized.labels.labels[pixels[i]], predicted[i]);
    if (predictions) *predictions = predicted;
    return compute_metrics(m, cfg.id());
}

struct RunOutcome {
    ModelConfig config;
    TrainResult training;
    MetricsReport report;
};

/// Trains one configuration on the split's training pixels and evaluates it
/// on the test pixels.
inline RunOutcome run_config(const Scene& scene, const SplitSpec& split, std::vector<BandOrderSpec> orders,
                             std::size_t patch, const Architecture& arch, const TrainConfig& train_cfg,
                             const EpochCallback& on_epoch = {}) {
    RunOutcome out;
    out.config = make_model_config(std::move(orders), scene, patch, arch);
    out.training = train(scene, split, out.config, train_cfg, on_epoch);
    const Scene normalized = apply_normalization(scene, out.training.norm);
    out.report = evaluate_pixels(out.training.params, out.config, normalized, split.test_pixels());
    return out;
}

/// Columns of the band-order grid, in table order.
inline constexpr std::array<const char*, 10> kGridColumns{
    "DB1", "DB2", "DB3", "DB4", "DB1Li", "DB2Li", "DB1Li+DB2Li", "DB3Li", "DB4Li", "DB3Li+DB4Li"};

struct GridSettings {
    std::size_t patch = 9;
    std::size_t train_per_class = 10;
    std::uint64_t seed = 0;
    Architecture arch;
    TrainConfig train;
    std::size_t top_k = 0;
    std::optional<BandRanking> ranking;  // Fisher ranking on the split when absent
    std::size_t jobs = 1;
};

struct GridResult {
    SplitSpec split;
    BandRanking ranking;
    std::vector<ModelConfig> configs;
    std::vector<MetricsReport> reports;  // kGridColumns order
};

/// Trains and evaluates every grid column on one shared split.
inline GridResult run_grid(const Scene& scene, const GridSettings& settings,
                           const std::function<void(const MetricsReport&)>& on_column = {}) {
    PatchConfig{settings.patch}.validate(scene);
    GridResult result;
    result.split = make_split(scene.labels, settings.train_per_class, settings.seed);
    const auto train_pixels = result.split.train_pixels();
    result.ranking = settings.ranking ? *settings.ranking : rank_bands_fisher(scene, train_pixels);

    for (const char* column : kGridColumns)
        result.configs.push_back(make_model_config(
            parse_order_list(column, scene.bands(), &result.ranking, settings.top_k), scene, settings.patch, settings.arch));
    result.reports.resize(kGridColumns.size());

    TrainConfig train_cfg = settings.train;
    train_cfg.seed = settings.seed;
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::exception_ptr failure;
    std::string failed_column;
    auto worker = [&] {
        for (std::size_t i = next++; i < kGridColumns.size(); i = next++) {
            {
                std::lock_guard lock(mu);
                if (failure) return;
            }
            try {
                TrainResult tr = train(scene, result.split, result.configs[i], train_cfg);
                const Scene normalized = apply_normalization(scene, tr.norm);
                MetricsReport report = evaluate_pixels(tr.params, result.configs[i], normalized, result.split.test_pixels());
                report.config = kGridColumns[i];
                std::lock_guard lock(mu);
                result.reports[i] = std::move(report);
                if (on_column) on_column(result.reports[i]);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) {
                    failure = std::current_exception();
                    failed_column = kGridColumns[i];
                }
                return;
            }
        }
    };
    const std::size_t jobs = std::clamp<std::size_t>(settings.jobs, 1, kGridColumns.size());
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failure) {
        try {
            std::rethrow_exception(failure);
        } catch (const std::exception& e) {
            throw Error("grid column " + failed_column + " failed: " + e.what());
        }
    }
    return result;
}

namespace detail {
inline std::string fixed6(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << v;
    return os.str();
}
}  // namespace detail

/// One column per configuration; rows Class1..ClassK, OA, AA, Kappa.
inline std::string grid_csv(std::span<const MetricsReport> reports, std::size_t classes) {
    std::ostringstream os;
    os << "metric";
    for (const auto& r : reports) os << ',' << r.config;
    os << '\n';
    for (std::size_t c = 0; c < classes; ++c) {
        os << "Class" << (c + 1);
        for (const auto& r : reports) os << ',' << detail::fixed6(c < r.per_class.size() ? r.per_class[c] : 0.0);
        os << '\n';
    }
    for (const char* row : {"OA", "AA", "Kappa"}) {
        os << row;
        for (const auto& r : reports) {
            const std::string name(row);
            os << ',' << detail::fixed6(name == "OA" ? r.oa : name == "AA" ? r.aa : r.kappa);
        }
        os << '\n';
    }
    return os.str();
}

/// Sizes must be odd, strictly ascending and fit inside the scene.
inline void validate_sweep_sizes(std::span<const std::size_t> sizes, const Scene& scene) {
    if (sizes.empty()) throw ConfigError("no patch sizes given");
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        if (i > 0 && sizes[i] == sizes[i - 1]) throw ConfigError("duplicate patch size " + std::to_string(sizes[i]));
        if (i > 0 && sizes[i] < sizes[i - 1]) throw ConfigError("patch sizes must be ascending");
        PatchConfig{sizes[i]}.validate(scene);
    }
}

struct SweepRow {
    std::size_t patch = 0;
    MetricsReport report;
};

inline std::vector<SweepRow> run_sweep(const Scene& scene, const std::string& order_text,
                                       std::span<const std::size_t> sizes, const GridSettings& settings,
                                       const std::function<void(const SweepRow&)>& on_row = {}) {
    validate_sweep_sizes(sizes, scene);
    const SplitSpec split = make_split(scene.labels, settings.train_per_class, settings.seed);
    std::optional<BandRanking> ranking = settings.ranking;
    if (!ranking && order_list_needs_ranking(order_text)) ranking = rank_bands_fisher(scene, split.train_pixels());
    const auto orders = parse_order_list(order_text, scene.bands(), ranking ? &*ranking : nullptr, settings.top_k);
    TrainConfig train_cfg = settings.train;
    train_cfg.seed = settings.seed;
    std::vector<SweepRow> rows;
    for (std::size_t p : sizes) {
        RunOutcome run = run_config(scene, split, orders, p, settings.arch, train_cfg);
        rows.push_back(SweepRow{p, std::move(run.report)});
        if (on_row) on_row(rows.back());
    }
    return rows;
}

inline std::string sweep_csv(std::span<const SweepRow> rows) {
    std::ostringstream os;
    os << "patch,oa,aa,kappa\n";
    for (const auto& r : rows)
        os << r.patch << ',' << detail::fixed6(r.report.oa) << ',' << detail::fixed6(r.report.aa) << ','
           << detail::fixed6(r.report.kappa) << '\n';
    return os.str();
}

/// FNV-1a 64 over the scene files in a fixed order, as hex.
inline std::string scene_hash(const fs::path& dir) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char* name : {"meta.json", "hsi.bin", "lidar.bin", "labels.bin"}) {
        for (unsigned char b : detail::read_file_bytes(dir / name)) {
            h ^= b;
            h *= 0x100000001b3ULL;
        }
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

inline nlohmann::json train_config_json(const TrainConfig& t) {
    return {{"epochs", t.epochs},          {"batch_size", t.batch_size}, {"learning_rate", t.learning_rate},
            {"beta1", t.beta1},            {"beta2", t.beta2},           {"epsilon", t.epsilon},
            {"seed", t.seed},              {"shuffle", t.shuffle},       {"weight_decay", t.weight_decay},
            {"lr_step_epochs", t.lr_step_epochs}, {"lr_step_gamma", t.lr_step_gamma}};
}

inline nlohmann::json architecture_json(const Architecture& a) {
    return {{"filters", a.filters}, {"kernel", a.kernel}, {"hidden", a.hidden}, {"project_first", a.project_first}};
}

/// Everything needed to re-run a command: the argument vector, the dataset
/// identity and the resolved settings.
struct RunManifest {
    RunManifest(std::string cmd, std::vector<std::string> args) : command(std::move(cmd)), argv(std::move(args)) {}

    std::string command;
    std::vector<std::string> argv;
    std::optional<fs::path> dataset;
    nlohmann::json settings = nlohmann::json::object();
    std::vector<std::string> outputs;
    std::string started = utc_timestamp();

    nlohmann::json to_json() const {
        nlohmann::json j = {{"tool", "bandfuse"},
                            {"version", kToolVersion},
                            {"command", command},
                            {"argv", argv},
                            {"settings", settings},
                            {"outputs", outputs},
                            {"started", started},
                            {"finished", utc_timestamp()}};
        if (dataset) j["dataset"] = {{"path", fs::absolute(*dataset).string()}, {"hash", scene_hash(*dataset)}};
        return j;
    }

    void write(const fs::path& path) const { detail::write_text_atomic(path, to_json().dump(2) + "\n"); }
};

}  // namespace bandfuse
