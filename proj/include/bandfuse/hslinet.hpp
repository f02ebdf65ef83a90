#pragma once

// Dual-stream band-order fusion network.
//
// Each stream sees every pixel of a p x p patch as its own spectral sequence
// (optionally with LiDAR pseudo-bands at both ends) and runs
//
//   conv1d(1 -> f) . SiLU . conv1d(f -> f) . SiLU . flatten . FC(L*f -> d_h)
//   . mean over the p*p pixels . FC(d_h -> d_h) . SiLU
//
// Stream descriptors are added element-wise and a shared FC maps the sum to
// class logits. The per-pixel projection is affine, so it commutes with the
// pixel mean; the graph pools first and projects once per sample.
//
// Model file layout (all little-endian):
//   "HSLN" u32 version
//   u32 streams, bands, patch, filters, kernel, hidden, classes; u8 project_first
//   per stream: u32 order id, u8 lidar_injection, u32 n, u32[n] permutation
//   float32 tensors in ModelParams::named_tensors() order

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bandfuse/autodiff.hpp"
#include "bandfuse/band_order.hpp"
#include "bandfuse/errors.hpp"
#include "bandfuse/rng.hpp"
#include "bandfuse/scene.hpp"
#include "bandfuse/tensor.hpp"

namespace bandfuse {

struct ModelConfig {
    std::vector<BandOrderSpec> orders;  // one per stream
    std::size_t bands = 0;              // C of the source scene
    std::size_t patch = 1;
    std::size_t filters = 16;
    std::size_t kernel = 3;
    std::size_t hidden = 64;
    std::size_t classes = 2;
    bool project_first = false;  // experimental: FC over the spectrum before the convolutions

    std::size_t num_streams() const noexcept { return orders.size(); }
    std::size_t pixels_per_sample() const noexcept { return patch * patch; }
    std::size_t sequence_length(std::size_t stream) const { return orders.at(stream).sequence_length(); }

    std::string id() const {
        std::string s;
        for (std::size_t i = 0; i < orders.size(); ++i) s += (i ? "+" : "") + orders[i].name();
        return s;
    }

    void validate() const {
        if (orders.empty() || orders.size() > 2)
            throw ConfigError("model needs one or two streams, got " + std::to_string(orders.size()));
        if (kernel % 2 == 0) throw ConfigError("conv kernel must be odd, got " + std::to_string(kernel));
        if (filters == 0 || hidden == 0 || kernel == 0) throw ConfigError("filters, kernel and hidden must be positive");
        if (classes < 2) throw ConfigError("at least two classes are required");
        if (patch % 2 == 0) throw ConfigError("patch size must be odd, got " + std::to_string(patch));
        for (const auto& o : orders) {
            if (o.source_bands != bands)
                throw ConfigError("order " + o.name() + " built for " + std::to_string(o.source_bands) +
                                  " bands, model expects " + std::to_string(bands));
            if (o.permutation.empty()) throw ConfigError("order " + o.name() + " selects no bands");
            for (std::size_t b : o.permutation)
                if (b >= bands) throw ConfigError("order " + o.name() + " references band " + std::to_string(b));
        }
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct StreamParams {
    Tensor conv1_w, conv1_b;  // [f x 1 x k], [f]
    Tensor conv2_w, conv2_b;  // [f x f x k], [f]
    Tensor proj_w, proj_b;    // [(L*f) x d_h] (project-first: [L x d_h]), [d_h]
    Tensor head_w, head_b;    // [d_h x d_h]   (project-first: [(d_h*f) x d_h]), [d_h]
    friend bool operator==(const StreamParams&, const StreamParams&) = default;
};

struct ModelParams {
    std::vector<StreamParams> streams;
    Tensor fusion_w, fusion_b;  // [d_h x K], [K]

    /// Every tensor in serialization order, with a stable name for diagnostics.
    std::vector<std::pair<std::string, Tensor*>> named_tensors() {
        std::vector<std::pair<std::string, Tensor*>> out;
        for (std::size_t s = 0; s < streams.size(); ++s) {
            const std::string p = "stream" + std::to_string(s) + ".";
            StreamParams& sp = streams[s];
            out.insert(out.end(), {{p + "conv1.weight", &sp.conv1_w},
                                   {p + "conv1.bias", &sp.conv1_b},
                                   {p + "conv2.weight", &sp.conv2_w},
                                   {p + "conv2.bias", &sp.conv2_b},
                                   {p + "proj.weight", &sp.proj_w},
                                   {p + "proj.bias", &sp.proj_b},
                                   {p + "head.weight", &sp.head_w},
                                   {p + "head.bias", &sp.head_b}});
        }
        out.emplace_back("fusion.weight", &fusion_w);
        out.emplace_back("fusion.bias", &fusion_b);
        return out;
    }

    std::vector<const Tensor*> tensors() const {
        auto named = const_cast<ModelParams*>(this)->named_tensors();
        std::vector<const Tensor*> out;
        for (auto& [name, t] : named) out.push_back(t);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Tensor* t : tensors()) n += t->size();
        return n;
    }

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

namespace detail {

struct LayerShapes {
    Shape conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b, head_w, head_b;
};

inline LayerShapes stream_shapes(const ModelConfig& cfg, std::size_t stream) {
    const std::size_t f = cfg.filters, k = cfg.kernel, d = cfg.hidden, len = cfg.sequence_length(stream);
    if (cfg.project_first)
        return {{f, 1, k}, {f}, {f, f, k}, {f}, {len, d}, {d}, {d * f, d}, {d}};
    return {{f, 1, k}, {f}, {f, f, k}, {f}, {len * f, d}, {d}, {d, d}, {d}};
}

/// Glorot-uniform tensor of the given shape.
inline Tensor glorot(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Xorshift64Star& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t(shape);
    for (double& v : t.values()) v = rng.uniform(-a, a);
    return t;
}

}  // namespace detail

/// Weights ~ U(-a, a), a = sqrt(6 / (fan_in + fan_out)); biases 0.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Xorshift64Star rng(derive_seed(seed, 0x1a17));
    const std::size_t f = cfg.filters, k = cfg.kernel, d = cfg.hidden;
    ModelParams params;
    for (std::size_t s = 0; s < cfg.num_streams(); ++s) {
        const auto sh = detail::stream_shapes(cfg, s);
        StreamParams sp;
        sp.conv1_w = detail::glorot(sh.conv1_w, k, f * k, rng);
        sp.conv1_b = Tensor(sh.conv1_b);
        sp.conv2_w = detail::glorot(sh.conv2_w, f * k, f * k, rng);
        sp.conv2_b = Tensor(sh.conv2_b);
        sp.proj_w = detail::glorot(sh.proj_w, sh.proj_w[0], sh.proj_w[1], rng);
        sp.proj_b = Tensor(sh.proj_b);
        sp.head_w = detail::glorot(sh.head_w, sh.head_w[0], sh.head_w[1], rng);
        sp.head_b = Tensor(sh.head_b);
        params.streams.push_back(std::move(sp));
    }
    params.fusion_w = detail::glorot({d, cfg.classes}, d, cfg.classes, rng);
    params.fusion_b = Tensor({cfg.classes});
    return params;
}

/// Throws ShapeError unless `params` has exactly the shapes `cfg` implies.
inline void check_params(const ModelConfig& cfg, const ModelParams& params) {
    if (params.streams.size() != cfg.num_streams())
        throw ShapeError("parameters hold " + std::to_string(params.streams.size()) + " streams, config " +
                         std::to_string(cfg.num_streams()));
    auto expect = [](const Tensor& t, const Shape& s, const std::string& what) {
        if (t.shape() != s) throw ShapeError(what + " is " + shape_string(t.shape()) + ", expected " + shape_string(s));
    };
    for (std::size_t s = 0; s < cfg.num_streams(); ++s) {
        const auto sh = detail::stream_shapes(cfg, s);
        const StreamParams& sp = params.streams[s];
        const std::string p = "stream" + std::to_string(s) + ".";
        expect(sp.conv1_w, sh.conv1_w, p + "conv1.weight");
        expect(sp.conv1_b, sh.conv1_b, p + "conv1.bias");
        expect(sp.conv2_w, sh.conv2_w, p + "conv2.weight");
        expect(sp.conv2_b, sh.conv2_b, p + "conv2.bias");
        expect(sp.proj_w, sh.proj_w, p + "proj.weight");
        expect(sp.proj_b, sh.proj_b, p + "proj.bias");
        expect(sp.head_w, sh.head_w, p + "head.weight");
        expect(sp.head_b, sh.head_b, p + "head.bias");
    }
    expect(params.fusion_w, {cfg.hidden, cfg.classes}, "fusion.weight");
    expect(params.fusion_b, {cfg.classes}, "fusion.bias");
}

/// Network inputs for a batch: per stream, batch*N sequences laid out
/// [batch*N x 1 x L_s] with the N pixels of a sample contiguous.
struct SampleBatch {
    std::size_t batch = 0;
    std::size_t pixels = 0;  // N = p^2
    std::vector<Tensor> streams;
    Tensor one_hot;                     // [batch x K]
    std::vector<std::uint16_t> labels;  // 1..K, or 0 when unknown
};

/// Ordered sequences of one patch, one flat buffer (N * L_s) per stream.
struct EncodedSample {
    std::vector<std::vector<double>> streams;
    std::uint16_t label = 0;
};

inline EncodedSample encode_patch(const Patch& patch, const ModelConfig& cfg) {
    if (patch.bands != cfg.bands)
        throw ShapeError("patch has " + std::to_string(patch.bands) + " bands, model expects " + std::to_string(cfg.bands));
    if (patch.size != cfg.patch)
        throw ShapeError("patch is " + std::to_string(patch.size) + " wide, model expects " + std::to_string(cfg.patch));
    EncodedSample enc;
    enc.label = patch.label;
    const std::size_t n = patch.size * patch.size;
    for (const auto& order : cfg.orders) {
        std::vector<double> seq;
        seq.reserve(n * order.sequence_length());
        for (std::size_t px = 0; px < n; ++px) {
            const std::span<const float> spectrum(patch.hsi.data() + px * patch.bands, patch.bands);
            const auto ordered = apply_order(spectrum, order, static_cast<double>(patch.lidar[px]));
            seq.insert(seq.end(), ordered.begin(), ordered.end());
        }
        enc.streams.push_back(std::move(seq));
    }
    return enc;
}

inline SampleBatch assemble_batch(std::span<const EncodedSample* const> samples, const ModelConfig& cfg) {
    if (samples.empty()) throw ShapeError("empty batch");
    SampleBatch batch;
    batch.batch = samples.size();
    batch.pixels = cfg.pixels_per_sample();
    for (std::size_t s = 0; s < cfg.num_streams(); ++s) {
        const std::size_t len = cfg.sequence_length(s);
        std::vector<double> data;
        data.reserve(batch.batch * batch.pixels * len);
        for (const EncodedSample* e : samples) {
            if (e->streams.size() != cfg.num_streams() || e->streams[s].size() != batch.pixels * len)
                throw ShapeError("encoded sample does not match the model configuration");
            data.insert(data.end(), e->streams[s].begin(), e->streams[s].end());
        }
        batch.streams.emplace_back(Shape{batch.batch * batch.pixels, 1, len}, std::move(data));
    }
    batch.one_hot = Tensor({batch.batch, cfg.classes});
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::uint16_t y = samples[i]->label;
        batch.labels.push_back(y);
        if (y >= 1 && y <= cfg.classes) batch.one_hot.at(i, y - 1) = 1.0;
    }
    return batch;
}

/// Tape handles for one stream's parameters.
struct StreamVars {
    Var conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b, head_w, head_b;
};

struct ParamVars {
    std::vector<StreamVars> streams;
    Var fusion_w, fusion_b;

    std::vector<Var> all() const {
        std::vector<Var> out;
        for (const auto& s : streams)
            out.insert(out.end(), {s.conv1_w, s.conv1_b, s.conv2_w, s.conv2_b, s.proj_w, s.proj_b, s.head_w, s.head_b});
        out.push_back(fusion_w);
        out.push_back(fusion_b);
        return out;
    }
};

inline ParamVars bind_params(Tape& tape, const ModelParams& params, bool trainable) {
    auto leaf = [&](const Tensor& t) { return trainable ? tape.variable(t) : tape.constant(t); };
    ParamVars vars;
    for (const auto& sp : params.streams)
        vars.streams.push_back(StreamVars{leaf(sp.conv1_w), leaf(sp.conv1_b), leaf(sp.conv2_w), leaf(sp.conv2_b),
                                          leaf(sp.proj_w), leaf(sp.proj_b), leaf(sp.head_w), leaf(sp.head_b)});
    vars.fusion_w = leaf(params.fusion_w);
    vars.fusion_b = leaf(params.fusion_b);
    return vars;
}

/// Builds one stream on the tape. `input` is [M x 1 x L] with M = samples * N;
/// returns the stream descriptors [samples x d_h].
inline Var stream_forward(Tape& tape, const StreamVars& p, Var input, const ModelConfig& cfg, std::size_t pixels) {
    const Tensor& x = tape.value(input);
    if (x.rank() != 3 || x.dim(1) != 1 || x.dim(0) % pixels != 0)
        throw ShapeError("stream input " + shape_string(x.shape()) + " is not [samples*N x 1 x L]");
    const std::size_t rows = x.dim(0), len = x.dim(2), f = cfg.filters, d = cfg.hidden;
    Var h;
    if (!cfg.project_first) {
        if (len * f != tape.value(p.proj_w).dim(0))
            throw ShapeError("sequence length " + std::to_string(len) + " does not match the projection layer");
        h = silu(tape, conv1d_same(tape, input, p.conv1_w, p.conv1_b));
        h = silu(tape, conv1d_same(tape, h, p.conv2_w, p.conv2_b));
        h = reshape(tape, h, {rows, f * len});
        h = mean_pool_groups(tape, h, pixels);
        h = linear(tape, h, p.proj_w, p.proj_b);
    } else {
        h = linear(tape, reshape(tape, input, {rows, len}), p.proj_w, p.proj_b);
        h = reshape(tape, h, {rows, 1, d});
        h = silu(tape, conv1d_same(tape, h, p.conv1_w, p.conv1_b));
        h = silu(tape, conv1d_same(tape, h, p.conv2_w, p.conv2_b));
        h = reshape(tape, h, {rows, f * d});
        h = mean_pool_groups(tape, h, pixels);
    }
    return silu(tape, linear(tape, h, p.head_w, p.head_b));
}

/// Logits [batch x K] = fusion(sum of stream descriptors).
inline Var forward(Tape& tape, const ParamVars& vars, const SampleBatch& batch, const ModelConfig& cfg) {
    if (batch.batch == 0) throw ShapeError("empty batch");
    if (batch.streams.size() != vars.streams.size())
        throw ShapeError("batch carries " + std::to_string(batch.streams.size()) + " streams, model has " +
                         std::to_string(vars.streams.size()));
    Var fused{};
    for (std::size_t s = 0; s < vars.streams.size(); ++s) {
        const Var in = tape.constant(batch.streams[s]);
        const Var h = stream_forward(tape, vars.streams[s], in, cfg, batch.pixels);
        fused = s == 0 ? h : add(tape, fused, h);
    }
    return linear(tape, fused, vars.fusion_w, vars.fusion_b);
}

/// Pure evaluation of the network on a batch.
inline Tensor forward(const ModelParams& params, const SampleBatch& batch, const ModelConfig& cfg) {
    Tape tape;
    const ParamVars vars = bind_params(tape, params, false);
    return tape.value(forward(tape, vars, batch, cfg));
}

/// Single-sample stream descriptor for sequences [N x 1 x L]; returns [d_h].
inline Tensor stream_forward(const StreamParams& params, const Tensor& sequences, const ModelConfig& cfg) {
    Tape tape;
    const StreamVars v{tape.constant(params.conv1_w), tape.constant(params.conv1_b), tape.constant(params.conv2_w),
                       tape.constant(params.conv2_b), tape.constant(params.proj_w),  tape.constant(params.proj_b),
                       tape.constant(params.head_w),  tape.constant(params.head_b)};
    const Var in = tape.constant(sequences);
    const Tensor h = tape.value(stream_forward(tape, v, in, cfg, sequences.dim(0)));
    return h.reshaped({cfg.hidden});
}

struct LossAndGrads {
    double loss = 0.0;
    Tensor logits;
    std::vector<Tensor> grads;  // ModelParams::named_tensors() order
};

/// Mean cross-entropy of the batch and its gradient for every parameter.
inline LossAndGrads loss_and_gradients(const ModelParams& params, const SampleBatch& batch, const ModelConfig& cfg) {
    Tape tape;
    const ParamVars vars = bind_params(tape, params, true);
    const Var logits = forward(tape, vars, batch, cfg);
    const Var loss = softmax_cross_entropy(tape, logits, batch.one_hot);
    tape.backward(loss);
    LossAndGrads out{tape.value(loss)[0], tape.value(logits), {}};
    for (Var v : vars.all()) out.grads.push_back(tape.grad(v));
    return out;
}

/// Compares the loss gradient of every parameter with central finite
/// differences. Leaves are bound in named_tensors() order.
inline GradCheckReport check_model_gradients(const ModelParams& params, const SampleBatch& batch,
                                             const ModelConfig& cfg, double step = 1e-4) {
    check_params(cfg, params);
    std::vector<Tensor> leaves;
    for (const Tensor* t : params.tensors()) leaves.push_back(*t);
    const std::size_t streams = params.streams.size();
    auto fn = [&](Tape& tape, std::span<const Var> p) {
        ParamVars vars;
        for (std::size_t s = 0; s < streams; ++s) {
            const Var* b = p.data() + 8 * s;
            vars.streams.push_back(StreamVars{b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]});
        }
        vars.fusion_w = p[8 * streams];
        vars.fusion_b = p[8 * streams + 1];
        return softmax_cross_entropy(tape, forward(tape, vars, batch, cfg), batch.one_hot);
    };
    return check_gradients(fn, std::move(leaves), step);
}

/// Class in 1..K with the largest logit; ties go to the lowest class.
inline std::uint16_t argmax_class(std::span<const double> logits) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.size(); ++c)
        if (logits[c] > logits[best]) best = c;
    return static_cast<std::uint16_t>(best + 1);
}

inline std::vector<std::uint16_t> argmax_rows(const Tensor& logits) {
    std::vector<std::uint16_t> out;
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < logits.dim(0); ++i)
        out.push_back(argmax_class(logits.data().subspan(i * k, k)));
    return out;
}

inline std::uint16_t predict(const ModelParams& params, const Patch& patch, const ModelConfig& cfg) {
    const EncodedSample enc = encode_patch(patch, cfg);
    const EncodedSample* ptr = &enc;
    return argmax_rows(forward(params, assemble_batch(std::span(&ptr, 1), cfg), cfg))[0];
}

/// Predicted classes for the given flat pixel indices of an (already
/// normalized) scene, evaluated in chunks of `chunk` samples.
inline std::vector<std::uint16_t> predict_pixels(const ModelParams& params, const ModelConfig& cfg, const Scene& scene,
                                                 std::span<const std::size_t> pixels, std::size_t chunk = 64) {
    const PatchConfig pc{cfg.patch};
    pc.validate(scene);
    std::vector<std::uint16_t> out;
    out.reserve(pixels.size());
    for (std::size_t start = 0; start < pixels.size(); start += chunk) {
        const std::size_t end = std::min(pixels.size(), start + chunk);
        std::vector<EncodedSample> encoded;
        encoded.reserve(end - start);
        for (std::size_t i = start; i < end; ++i)
            encoded.push_back(encode_patch(
                extract_patch(scene, pixels[i] / scene.width(), pixels[i] % scene.width(), pc), cfg));
        std::vector<const EncodedSample*> ptrs;
        for (const auto& e : encoded) ptrs.push_back(&e);
        const auto classes = argmax_rows(forward(params, assemble_batch(ptrs, cfg), cfg));
        out.insert(out.end(), classes.begin(), classes.end());
    }
    return out;
}

/// Throws ShapeError if a model cannot consume the scene.
inline void check_compatible(const ModelConfig& cfg, const Scene& scene) {
    if (cfg.bands != scene.bands())
        throw ShapeError("model expects " + std::to_string(cfg.bands) + " bands, scene has " +
                         std::to_string(scene.bands()));
    if (cfg.classes < scene.classes)
        throw ShapeError("model predicts " + std::to_string(cfg.classes) + " classes, scene declares " +
                         std::to_string(scene.classes));
    PatchConfig{cfg.patch}.validate(scene);
}

struct Model {
    ModelConfig config;
    ModelParams params;
};

namespace detail {

constexpr std::uint32_t kModelVersion = 1;

class ByteWriter {
public:
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
    const std::vector<unsigned char>& bytes() const { return bytes_; }

private:
    std::vector<unsigned char> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<unsigned char> bytes) : bytes_(std::move(bytes)) {}
    std::uint8_t u8() {
        need(1);
        return bytes_[pos_++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string raw(std::size_t n) {
        need(n);
        std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                      bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    bool at_end() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw FormatError("model file truncated at byte " + std::to_string(pos_));
    }
    std::vector<unsigned char> bytes_;
    std::size_t pos_ = 0;
};

inline std::uint32_t checked_u32(std::size_t v) {
    if (v > 0xFFFFFFFFu) throw FormatError("value too large for the model file");
    return static_cast<std::uint32_t>(v);
}

}  // namespace detail

inline std::vector<unsigned char> serialize_model(const ModelConfig& cfg, const ModelParams& params) {
    cfg.validate();
    check_params(cfg, params);
    detail::ByteWriter w;
    w.raw("HSLN");
    w.u32(detail::kModelVersion);
    for (std::size_t v : {cfg.num_streams(), cfg.bands, cfg.patch, cfg.filters, cfg.kernel, cfg.hidden, cfg.classes})
        w.u32(detail::checked_u32(v));
    w.u8(cfg.project_first ? 1 : 0);
    for (const auto& o : cfg.orders) {
        w.u32(static_cast<std::uint32_t>(o.id));
        w.u8(o.lidar_injection ? 1 : 0);
        w.u32(detail::checked_u32(o.permutation.size()));
        for (std::size_t b : o.permutation) w.u32(detail::checked_u32(b));
    }
    for (const Tensor* t : params.tensors())
        for (double v : t->values()) w.f32(static_cast<float>(v));
    return w.bytes();
}

inline Model deserialize_model(std::vector<unsigned char> bytes) {
    detail::ByteReader r(std::move(bytes));
    if (r.raw(4) != "HSLN") throw FormatError("bad magic: not a model file");
    const std::uint32_t version = r.u32();
    if (version != detail::kModelVersion) throw FormatError("unsupported model file version " + std::to_string(version));
    Model m;
    const std::size_t streams = r.u32();
    m.config.bands = r.u32();
    m.config.patch = r.u32();
    m.config.filters = r.u32();
    m.config.kernel = r.u32();
    m.config.hidden = r.u32();
    m.config.classes = r.u32();
    m.config.project_first = r.u8() != 0;
    if (streams == 0 || streams > 2) throw FormatError("invalid stream count " + std::to_string(streams));
    for (std::size_t s = 0; s < streams; ++s) {
        BandOrderSpec o;
        const std::uint32_t id = r.u32();
        if (id > 3) throw FormatError("invalid band order id " + std::to_string(id));
        o.id = static_cast<OrderId>(id);
        o.lidar_injection = r.u8() != 0;
        o.source_bands = m.config.bands;
        const std::size_t n = r.u32();
        if (n == 0 || n > m.config.bands) throw FormatError("invalid permutation length " + std::to_string(n));
        for (std::size_t i = 0; i < n; ++i) o.permutation.push_back(r.u32());
        m.config.orders.push_back(std::move(o));
    }
    try {
        m.config.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("model configuration invalid: ") + e.what());
    }
    for (std::size_t s = 0; s < streams; ++s) {
        const auto sh = detail::stream_shapes(m.config, s);
        m.params.streams.push_back(StreamParams{Tensor(sh.conv1_w), Tensor(sh.conv1_b), Tensor(sh.conv2_w),
                                                Tensor(sh.conv2_b), Tensor(sh.proj_w), Tensor(sh.proj_b),
                                                Tensor(sh.head_w), Tensor(sh.head_b)});
    }
    m.params.fusion_w = Tensor({m.config.hidden, m.config.classes});
    m.params.fusion_b = Tensor({m.config.classes});
    for (auto& [name, t] : m.params.named_tensors())
        for (double& v : t->values()) {
            v = static_cast<double>(r.f32());
            if (!std::isfinite(v)) throw FormatError("non-finite value in " + name);
        }
    if (!r.at_end()) throw FormatError("trailing bytes after the last parameter tensor");
    return m;
}

inline void save_model(const ModelConfig& cfg, const ModelParams& params, const fs::path& path) {
    detail::write_file_atomic(path, serialize_model(cfg, params));
}

inline Model load_model(const fs::path& path) { return deserialize_model(detail::read_file_bytes(path)); }

}  // namespace bandfuse
