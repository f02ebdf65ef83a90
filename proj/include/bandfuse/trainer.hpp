#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "bandfuse/errors.hpp"
#include "bandfuse/hslinet.hpp"
#include "bandfuse/rng.hpp"
#include "bandfuse/scene.hpp"
#include "bandfuse/split.hpp"

namespace bandfuse {

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 32;
    double learning_rate = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
    bool shuffle = true;
    // Off by default.
    double weight_decay = 0.0;
    std::size_t lr_step_epochs = 0;  // multiply the rate by lr_step_gamma every this many epochs
    double lr_step_gamma = 1.0;
    std::optional<fs::path> divergence_dump;  // checkpoint written before aborting on NaN loss

    void validate() const {
        if (batch_size == 0) throw ConfigError("batch size must be at least 1");
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be >= 0");
        if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in (0,1)");
        if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
        if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
        if (!(lr_step_gamma > 0.0)) throw ConfigError("lr step gamma must be positive");
    }
};

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::uint64_t t = 0;

    static AdamState for_params(std::span<const Tensor* const> params) {
        AdamState s;
        for (const Tensor* p : params) {
            s.m.push_back(Tensor::zeros_like(*p));
            s.v.push_back(Tensor::zeros_like(*p));
        }
        return s;
    }
};

/// One bias-corrected Adam update. `names` labels tensors in error messages.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
                      const TrainConfig& cfg, std::span<const std::string> names = {}) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw ShapeError("adam_step: parameter, gradient and state counts differ");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape() != grads[i].shape() || params[i]->shape() != state.m[i].shape())
            throw ShapeError("adam_step: shape mismatch for tensor " + std::to_string(i));
        if (!grads[i].all_finite())
            throw NumericError("non-finite gradient in " + (i < names.size() ? names[i] : "tensor " + std::to_string(i)));
    }
    ++state.t;
    const double t = static_cast<double>(state.t);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        const Tensor& g = grads[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = g[j] + cfg.weight_decay * p[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            p[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
        }
    }
}

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    double mean_loss = 0.0;
    double train_oa = 0.0;
    friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

struct TrainResult {
    ModelParams params;
    std::vector<EpochLog> log;
    NormStats norm;
};

/// Sample visiting order for an epoch; a pure function of (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch, bool shuffle) {
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (!shuffle) return order;
    Xorshift64Star rng(derive_seed(seed, 0x5A0F, epoch));
    for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

/// Encodes the patches centred on `pixels` of a normalized scene.
inline std::vector<EncodedSample> encode_pixels(const Scene& normalized, std::span<const std::size_t> pixels,
                                                const ModelConfig& cfg) {
    const PatchConfig pc{cfg.patch};
    std::vector<EncodedSample> out;
    out.reserve(pixels.size());
    for (std::size_t px : pixels)
        out.push_back(encode_patch(extract_patch(normalized, px / normalized.width(), px % normalized.width(), pc), cfg));
    return out;
}

inline std::string format_log_csv(std::span<const EpochLog> log) {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,mean_loss,train_oa\n";
    for (const auto& e : log) os << e.epoch << ',' << e.mean_loss << ',' << e.train_oa << '\n';
    return os.str();
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Mini-batch Adam on the mean cross-entropy. The scene is min-max normalized
/// with training-pixel statistics before patches are extracted.
inline TrainResult train(const Scene& scene, const SplitSpec& split, const ModelConfig& model_cfg,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    model_cfg.validate();
    check_compatible(model_cfg, scene);
    validate_split(split, scene.labels);
    const std::vector<std::size_t> train_pixels = split.train_pixels();
    if (train_pixels.empty()) throw SplitError("empty training set");

    TrainResult result;
    result.norm = compute_norm_stats(scene, train_pixels);
    const Scene normalized = apply_normalization(scene, result.norm);
    const std::vector<EncodedSample> samples = encode_pixels(normalized, train_pixels, model_cfg);

    result.params = init_params(model_cfg, cfg.seed);
    auto named = result.params.named_tensors();
    std::vector<Tensor*> tensors;
    std::vector<std::string> names;
    for (auto& [name, t] : named) {
        names.push_back(name);
        tensors.push_back(t);
    }
    AdamState state = AdamState::for_params(std::vector<const Tensor*>(tensors.begin(), tensors.end()));

    TrainConfig step_cfg = cfg;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.lr_step_epochs > 0)
            step_cfg.learning_rate =
                cfg.learning_rate * std::pow(cfg.lr_step_gamma, static_cast<double>(epoch / cfg.lr_step_epochs));
        const auto order = epoch_order(samples.size(), cfg.seed, epoch, cfg.shuffle);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<const EncodedSample*> members;
            for (std::size_t i = start; i < end; ++i) members.push_back(&samples[order[i]]);
            const SampleBatch batch = assemble_batch(members, model_cfg);
            LossAndGrads lg = loss_and_gradients(result.params, batch, model_cfg);
            const std::string where = "epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(batch_index);
            if (!std::isfinite(lg.loss)) {
                if (cfg.divergence_dump) save_model(model_cfg, result.params, *cfg.divergence_dump);
                throw NumericError("training diverged (loss " + std::to_string(lg.loss) + ") at " + where +
                                   (cfg.divergence_dump ? "; state written to " + cfg.divergence_dump->string() : ""));
            }
            loss_sum += lg.loss * static_cast<double>(members.size());
            const auto predicted = argmax_rows(lg.logits);
            for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == batch.labels[i];
            try {
                adam_step(tensors, lg.grads, state, step_cfg, names);
            } catch (const NumericError& e) {
                if (cfg.divergence_dump) save_model(model_cfg, result.params, *cfg.divergence_dump);
                throw NumericError(std::string(e.what()) + " at " + where);
            }
        }
        const EpochLog entry{epoch + 1, loss_sum / static_cast<double>(samples.size()),
                             static_cast<double>(correct) / static_cast<double>(samples.size())};
        result.log.push_back(entry);
        if (on_epoch) on_epoch(entry);
    }
    return result;
}

inline void save_checkpoint(const Model& model, const fs::path& path) { save_model(model.config, model.params, path); }

inline Model load_checkpoint(const fs::path& path) { return load_model(path); }

}  // namespace bandfuse
