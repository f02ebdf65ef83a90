#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bandfuse/errors.hpp"
#include "bandfuse/scene.hpp"

namespace bandfuse {

/// K x K counts; rows are true classes, columns predicted classes, both 1-based
/// in the public interface.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
        if (classes == 0) throw ConfigError("confusion matrix needs at least one class");
    }

    static ConfusionMatrix from_counts(const std::vector<std::vector<std::uint64_t>>& rows) {
        ConfusionMatrix m(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != rows.size()) throw ShapeError("confusion matrix must be square");
            for (std::size_t j = 0; j < rows.size(); ++j) m.counts_[i * rows.size() + j] = rows[i][j];
        }
        return m;
    }

    void accumulate(std::size_t truth, std::size_t predicted) {
        if (truth < 1 || truth > classes_ || predicted < 1 || predicted > classes_)
            throw DataError("class pair (" + std::to_string(truth) + "," + std::to_string(predicted) +
                            ") outside 1.." + std::to_string(classes_));
        ++counts_[(truth - 1) * classes_ + (predicted - 1)];
    }

    void merge(const ConfusionMatrix& other) {
        if (other.classes_ != classes_) throw ShapeError("cannot merge confusion matrices of different sizes");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    }

    std::size_t classes() const noexcept { return classes_; }
    std::uint64_t at(std::size_t truth, std::size_t predicted) const {
        return counts_.at((truth - 1) * classes_ + (predicted - 1));
    }
    std::uint64_t total() const noexcept {
        std::uint64_t t = 0;
        for (auto c : counts_) t += c;
        return t;
    }
    std::uint64_t row_sum(std::size_t truth) const {
        std::uint64_t s = 0;
        for (std::size_t j = 1; j <= classes_; ++j) s += at(truth, j);
        return s;
    }
    std::uint64_t col_sum(std::size_t predicted) const {
        std::uint64_t s = 0;
        for (std::size_t i = 1; i <= classes_; ++i) s += at(i, predicted);
        return s;
    }

    std::vector<std::vector<std::uint64_t>> rows() const {
        std::vector<std::vector<std::uint64_t>> out(classes_, std::vector<std::uint64_t>(classes_));
        for (std::size_t i = 0; i < classes_; ++i)
            for (std::size_t j = 0; j < classes_; ++j) out[i][j] = counts_[i * classes_ + j];
        return out;
    }

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

private:
    std::size_t classes_;
    std::vector<std::uint64_t> counts_;
};

struct MetricsReport {
    std::string config;
    double oa = 0.0;
    double aa = 0.0;
    double kappa = 0.0;
    std::vector<double> per_class;  // recall; 0 for classes absent from the truth
    ConfusionMatrix confusion{1};
};

/// OA = trace/total; AA = mean recall over classes present in the truth;
/// Kappa = (p_o - p_e) / (1 - p_e), defined as 0 when p_e == 1.
inline MetricsReport compute_metrics(const ConfusionMatrix& m, std::string config = {}) {
    const std::uint64_t total = m.total();
    if (total == 0) throw DataError("cannot compute metrics of an empty confusion matrix");
    const std::size_t k = m.classes();
    const double n = static_cast<double>(total);
    MetricsReport r;
    r.config = std::move(config);
    r.confusion = m;
    r.per_class.assign(k, 0.0);
    std::uint64_t trace = 0;
    double recall_sum = 0.0;
    std::size_t present = 0;
    double pe = 0.0;
    for (std::size_t c = 1; c <= k; ++c) {
        trace += m.at(c, c);
        const std::uint64_t row = m.row_sum(c);
        if (row > 0) {
            r.per_class[c - 1] = static_cast<double>(m.at(c, c)) / static_cast<double>(row);
            recall_sum += r.per_class[c - 1];
            ++present;
        }
        pe += static_cast<double>(row) * static_cast<double>(m.col_sum(c));
    }
    pe /= n * n;
    r.oa = static_cast<double>(trace) / n;
    r.aa = recall_sum / static_cast<double>(present);
    r.kappa = pe == 1.0 ? 0.0 : (r.oa - pe) / (1.0 - pe);
    return r;
}

inline ConfusionMatrix confusion_from_lists(std::span<const std::uint16_t> truth, std::span<const std::uint16_t> predicted,
                                            std::size_t classes) {
    if (truth.size() != predicted.size()) throw ShapeError("truth and prediction lists differ in length");
    ConfusionMatrix m(classes);
    for (std::size_t i = 0; i < truth.size(); ++i) m.accumulate(truth[i], predicted[i]);
    return m;
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
    return {{"config", r.config},       {"oa", r.oa},
            {"aa", r.aa},               {"kappa", r.kappa},
            {"per_class", r.per_class}, {"confusion", r.confusion.rows()}};
}

inline void write_report(const MetricsReport& r, const fs::path& path) {
    detail::write_text_atomic(path, report_to_json(r).dump(2) + "\n");
}

using Rgb = std::array<std::uint8_t, 3>;

/// Index 0 (unlabeled) is black; classes 1..16 take the following colors.
inline constexpr std::array<Rgb, 17> kClassPalette{{
    {0, 0, 0},
    {230, 25, 75},   {60, 180, 75},   {255, 225, 25},  {0, 130, 200},
    {245, 130, 48},  {145, 30, 180},  {70, 240, 240},  {240, 50, 230},
    {210, 245, 60},  {250, 190, 212}, {0, 128, 128},   {220, 190, 255},
    {170, 110, 40},  {255, 250, 200}, {128, 0, 0},     {170, 255, 195},
}};

inline std::vector<unsigned char> render_map_ppm(std::span<const std::uint16_t> predictions, std::size_t height,
                                                 std::size_t width, std::span<const Rgb> palette = kClassPalette) {
    if (predictions.size() != height * width) throw ShapeError("prediction map does not match the image size");
    const std::string header = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    std::vector<unsigned char> out(header.begin(), header.end());
    out.reserve(header.size() + 3 * predictions.size());
    for (std::uint16_t c : predictions) {
        if (c >= palette.size())
            throw ConfigError("class " + std::to_string(c) + " exceeds the " + std::to_string(palette.size() - 1) +
                              "-color palette");
        out.insert(out.end(), palette[c].begin(), palette[c].end());
    }
    return out;
}

inline void render_map(std::span<const std::uint16_t> predictions, std::size_t height, std::size_t width,
                       const fs::path& path, std::span<const Rgb> palette = kClassPalette) {
    detail::write_file_atomic(path, render_map_ppm(predictions, height, width, palette));
}

}  // namespace bandfuse
