#pragma once

// Tape-based reverse-mode differentiation over the fixed set of operations the
// network needs. Nodes are appended in execution order, so walking the tape
// backwards is a reverse topological traversal.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bandfuse/errors.hpp"
#include "bandfuse/tensor.hpp"

namespace bandfuse {

/// Handle to a node on a Tape. Only meaningful for the tape that issued it.
struct Var {
    std::size_t id = 0;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t)>;

    /// Input that never receives a gradient.
    Var constant(Tensor value) { return record(std::move(value), false, nullptr); }

    /// Leaf whose gradient is accumulated by backward().
    Var variable(Tensor value) { return record(std::move(value), true, nullptr); }

    Var record(Tensor value, bool requires_grad, Backward backward) {
        nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(backward)});
        return Var{nodes_.size() - 1};
    }

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Accumulated gradient; zeros if nothing flowed into the node.
    Tensor grad(Var v) const {
        const Node& n = nodes_.at(v.id);
        return n.grad.empty() ? Tensor::zeros_like(n.value) : n.grad;
    }

    /// Gradient accumulator for a node, allocated on first use.
    Tensor& grad_buffer(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad = Tensor::zeros_like(n.value);
        return n.grad;
    }
    Tensor& grad_buffer(Var v) { return grad_buffer(v.id); }

    const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }

    /// Seeds d(root)/d(root) = 1 and propagates to every node that requires a gradient.
    void backward(Var root) {
        if (value(root).size() != 1)
            throw ShapeError("backward root must be a scalar, got " + shape_string(value(root).shape()));
        for (Node& n : nodes_) n.grad = Tensor{};
        grad_buffer(root)[0] = 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
            n.backward(*this, i);
        }
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad;
        Backward backward;
    };
    std::deque<Node> nodes_;  // deque keeps value() references valid across record()
};

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

inline double sigmoid(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace detail

/// Element-wise sum of two equally shaped tensors.
inline Var add(Tape& tape, Var a, Var b) {
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    detail::require_same_shape(av, bv, "add");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
    return tape.record(std::move(out), rg, [a, b](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        for (Var in : {a, b}) {
            if (!t.requires_grad(in)) continue;
            Tensor& gi = t.grad_buffer(in);
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
    });
}

/// Element-wise (Hadamard) product.
inline Var mul(Tape& tape, Var a, Var b) {
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    detail::require_same_shape(av, bv, "mul");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
    return tape.record(std::move(out), rg, [a, b](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_buffer(a);
            const Tensor& bv = t.value(b);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_buffer(b);
            const Tensor& av = t.value(a);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

/// Multiply every element by a constant.
inline Var scale(Tape& tape, Var x, double factor) {
    Tensor out = tape.value(x);
    for (double& v : out.values()) v *= factor;
    return tape.record(std::move(out), tape.requires_grad(x), [x, factor](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
    });
}

/// Sum of all elements, as a 1-element tensor.
inline Var sum(Tape& tape, Var x) {
    const Tensor& xv = tape.value(x);
    double s = 0.0;
    for (double v : xv.values()) s += v;
    return tape.record(Tensor({1}, std::vector<double>{s}), tape.requires_grad(x), [x](Tape& t, std::size_t self) {
        const double g = t.grad_of(self)[0];
        for (double& v : t.grad_buffer(x).values()) v += g;
    });
}

inline Var reshape(Tape& tape, Var x, Shape shape) {
    Tensor out = tape.value(x).reshaped(std::move(shape));
    return tape.record(std::move(out), tape.requires_grad(x), [x](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

/// x * sigmoid(x), element-wise. The logistic is evaluated in the branch that
/// never exponentiates a large positive number.
inline Var silu(Tape& tape, Var x) {
    Tensor out = tape.value(x);
    for (double& v : out.values()) v *= detail::sigmoid(v);
    return tape.record(std::move(out), tape.requires_grad(x), [x](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const Tensor& xv = t.value(x);
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = detail::sigmoid(xv[i]);
            gx[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
        }
    });
}

/// Affine map of each row: out[i] = input[i] . weight + bias.
/// input [n x d_in], weight [d_in x d_out], bias [d_out].
inline Var linear(Tape& tape, Var input, Var weight, Var bias) {
    const Tensor& x = tape.value(input);
    const Tensor& w = tape.value(weight);
    const Tensor& b = tape.value(bias);
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(0) || b.dim(0) != w.dim(1))
        throw ShapeError("linear: input " + shape_string(x.shape()) + ", weight " + shape_string(w.shape()) +
                         ", bias " + shape_string(b.shape()));
    const std::size_t n = x.dim(0), din = w.dim(0), dout = w.dim(1);
    Tensor out({n, dout});
    for (std::size_t i = 0; i < n; ++i) {
        double* orow = out.data().data() + i * dout;
        std::copy(b.data().begin(), b.data().end(), orow);
        const double* xrow = x.data().data() + i * din;
        for (std::size_t k = 0; k < din; ++k) {
            const double xv = xrow[k];
            const double* wrow = w.data().data() + k * dout;
            for (std::size_t j = 0; j < dout; ++j) orow[j] += xv * wrow[j];
        }
    }
    const bool rg = tape.requires_grad(input) || tape.requires_grad(weight) || tape.requires_grad(bias);
    return tape.record(std::move(out), rg, [input, weight, bias, n, din, dout](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const Tensor& x = t.value(input);
        const Tensor& w = t.value(weight);
        if (t.requires_grad(input)) {
            Tensor& gx = t.grad_buffer(input);
            for (std::size_t i = 0; i < n; ++i) {
                const double* grow = g.data().data() + i * dout;
                for (std::size_t k = 0; k < din; ++k) {
                    const double* wrow = w.data().data() + k * dout;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < dout; ++j) acc += grow[j] * wrow[j];
                    gx[i * din + k] += acc;
                }
            }
        }
        if (t.requires_grad(weight)) {
            Tensor& gw = t.grad_buffer(weight);
            for (std::size_t i = 0; i < n; ++i) {
                const double* grow = g.data().data() + i * dout;
                const double* xrow = x.data().data() + i * din;
                for (std::size_t k = 0; k < din; ++k) {
                    const double xv = xrow[k];
                    double* gwrow = gw.data().data() + k * dout;
                    for (std::size_t j = 0; j < dout; ++j) gwrow[j] += xv * grow[j];
                }
            }
        }
        if (t.requires_grad(bias)) {
            Tensor& gb = t.grad_buffer(bias);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < dout; ++j) gb[j] += g[i * dout + j];
        }
    });
}

namespace detail {

/// Unfolds one [C_in x L] sequence into [C_in*k x L] rows, row (ci*k + tap)
/// holding x[ci][pos + tap - k/2] with zeros outside the sequence.
inline void im2col_1d(const double* x, std::size_t cin, std::size_t len, std::size_t k, double* col) {
    const auto half = static_cast<std::ptrdiff_t>(k / 2);
    const auto slen = static_cast<std::ptrdiff_t>(len);
    for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t tap = 0; tap < k; ++tap) {
            double* dst = col + (ci * k + tap) * len;
            const double* src = x + ci * len;
            const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(tap) - half;
            for (std::ptrdiff_t pos = 0; pos < slen; ++pos) {
                const std::ptrdiff_t at = pos + shift;
                dst[pos] = (at >= 0 && at < slen) ? src[at] : 0.0;
            }
        }
}

/// Adds the [C_in*k x L] column gradient back onto the [C_in x L] input gradient.
inline void col2im_1d_add(const double* col, std::size_t cin, std::size_t len, std::size_t k, double* dx) {
    const auto half = static_cast<std::ptrdiff_t>(k / 2);
    const auto slen = static_cast<std::ptrdiff_t>(len);
    for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t tap = 0; tap < k; ++tap) {
            const double* src = col + (ci * k + tap) * len;
            double* dst = dx + ci * len;
            const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(tap) - half;
            const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
            const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(slen, slen - shift);
            for (std::ptrdiff_t pos = lo; pos < hi; ++pos) dst[pos + shift] += src[pos];
        }
}

}  // namespace detail

/// Same-length 1-D cross-correlation with zero padding of k/2 on both ends.
/// input [C_in x L] or batched [B x C_in x L]; kernels [C_out x C_in x k]; bias [C_out].
inline Var conv1d_same(Tape& tape, Var input, Var kernels, Var bias) {
    const Tensor& x = tape.value(input);
    const Tensor& w = tape.value(kernels);
    const Tensor& b = tape.value(bias);
    if (w.rank() != 3 || b.rank() != 1)
        throw ShapeError("conv1d_same: kernels " + shape_string(w.shape()) + ", bias " + shape_string(b.shape()));
    const std::size_t cout = w.dim(0), cin = w.dim(1), k = w.dim(2);
    if (k % 2 == 0) throw ConfigError("conv1d_same requires an odd kernel size, got " + std::to_string(k));
    if ((x.rank() != 2 && x.rank() != 3) || x.dim(x.rank() - 2) != cin || b.dim(0) != cout)
        throw ShapeError("conv1d_same: input " + shape_string(x.shape()) + " incompatible with kernels " +
                         shape_string(w.shape()) + " and bias " + shape_string(b.shape()));
    const std::size_t batch = x.rank() == 3 ? x.dim(0) : 1;
    const std::size_t len = x.dim(x.rank() - 1);
    const std::size_t taps = cin * k;

    Shape out_shape = x.rank() == 3 ? Shape{batch, cout, len} : Shape{cout, len};
    Tensor out(out_shape);
    std::vector<double> col(taps * len);
    const double* wd = w.data().data();
    for (std::size_t s = 0; s < batch; ++s) {
        detail::im2col_1d(x.data().data() + s * cin * len, cin, len, k, col.data());
        for (std::size_t co = 0; co < cout; ++co) {
            double* orow = out.data().data() + (s * cout + co) * len;
            std::fill(orow, orow + len, b[co]);
            const double* wrow = wd + co * taps;
            for (std::size_t j = 0; j < taps; ++j) {
                const double wv = wrow[j];
                const double* crow = col.data() + j * len;
                for (std::size_t pos = 0; pos < len; ++pos) orow[pos] += wv * crow[pos];
            }
        }
    }

    const bool rg = tape.requires_grad(input) || tape.requires_grad(kernels) || tape.requires_grad(bias);
    return tape.record(std::move(out), rg, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const double* gd = g.data().data();
        const double* xd = t.value(input).data().data();
        const double* wd = t.value(kernels).data().data();
        const bool want_x = t.requires_grad(input);
        const bool want_w = t.requires_grad(kernels);
        double* gx = want_x ? t.grad_buffer(input).data().data() : nullptr;
        double* gw = want_w ? t.grad_buffer(kernels).data().data() : nullptr;
        if (t.requires_grad(bias)) {
            Tensor& gb = t.grad_buffer(bias);
            for (std::size_t s = 0; s < batch; ++s)
                for (std::size_t co = 0; co < cout; ++co) {
                    const double* grow = gd + (s * cout + co) * len;
                    double acc = 0.0;
                    for (std::size_t pos = 0; pos < len; ++pos) acc += grow[pos];
                    gb[co] += acc;
                }
        }
        if (!want_x && !want_w) return;
        std::vector<double> col(taps * len), dcol(taps * len);
        for (std::size_t s = 0; s < batch; ++s) {
            const double* gs = gd + s * cout * len;
            if (want_w) {
                detail::im2col_1d(xd + s * cin * len, cin, len, k, col.data());
                for (std::size_t co = 0; co < cout; ++co) {
                    const double* grow = gs + co * len;
                    double* gwrow = gw + co * taps;
                    for (std::size_t j = 0; j < taps; ++j) {
                        const double* crow = col.data() + j * len;
                        double acc = 0.0;
                        for (std::size_t pos = 0; pos < len; ++pos) acc += grow[pos] * crow[pos];
                        gwrow[j] += acc;
                    }
                }
            }
            if (want_x) {
                std::fill(dcol.begin(), dcol.end(), 0.0);
                for (std::size_t co = 0; co < cout; ++co) {
                    const double* grow = gs + co * len;
                    const double* wrow = wd + co * taps;
                    for (std::size_t j = 0; j < taps; ++j) {
                        const double wv = wrow[j];
                        double* drow = dcol.data() + j * len;
                        for (std::size_t pos = 0; pos < len; ++pos) drow[pos] += wv * grow[pos];
                    }
                }
                detail::col2im_1d_add(dcol.data(), cin, len, k, gx + s * cin * len);
            }
        }
    });
}

/// Means over consecutive groups of `group` rows: [G*group x d] -> [G x d].
inline Var mean_pool_groups(Tape& tape, Var input, std::size_t group) {
    const Tensor& x = tape.value(input);
    if (x.empty() || group == 0) throw DataError("mean pooling over an empty input");
    if (x.rank() != 2 || x.dim(0) % group != 0)
        throw ShapeError("mean_pool_groups: " + shape_string(x.shape()) + " not divisible into groups of " +
                         std::to_string(group));
    const std::size_t groups = x.dim(0) / group, d = x.dim(1);
    Tensor out({groups, d});
    const double inv = 1.0 / static_cast<double>(group);
    for (std::size_t gi = 0; gi < groups; ++gi) {
        double* orow = out.data().data() + gi * d;
        for (std::size_t r = 0; r < group; ++r) {
            const double* xrow = x.data().data() + (gi * group + r) * d;
            for (std::size_t j = 0; j < d; ++j) orow[j] += xrow[j];
        }
        for (std::size_t j = 0; j < d; ++j) orow[j] *= inv;
    }
    return tape.record(std::move(out), tape.requires_grad(input),
                       [input, group, groups, d, inv](Tape& t, std::size_t self) {
                           const Tensor& g = t.grad_of(self);
                           Tensor& gx = t.grad_buffer(input);
                           for (std::size_t gi = 0; gi < groups; ++gi)
                               for (std::size_t r = 0; r < group; ++r)
                                   for (std::size_t j = 0; j < d; ++j)
                                       gx[(gi * group + r) * d + j] += g[gi * d + j] * inv;
                       });
}

/// Column means of an [n x d] matrix, returned as [d].
inline Var mean_pool_rows(Tape& tape, Var input) {
    const Tensor& x = tape.value(input);
    if (x.empty()) throw DataError("mean pooling over an empty input");
    if (x.rank() != 2) throw ShapeError("mean_pool_rows expects a matrix, got " + shape_string(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    return reshape(tape, mean_pool_groups(tape, input, rows), {cols});
}

/// Row-wise softmax with the row max subtracted first.
inline Tensor softmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) throw ShapeError("softmax_rows expects a matrix, got " + shape_string(logits.shape()));
    const std::size_t n = logits.dim(0), classes = logits.dim(1);
    Tensor probs(logits.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.data().data() + i * classes;
        const double mx = *std::max_element(row, row + classes);
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
        for (std::size_t c = 0; c < classes; ++c) probs[i * classes + c] = std::exp(row[c] - mx) / z;
    }
    return probs;
}

/// Mean cross-entropy of softmax(logits) against one-hot labels, both [n x K].
/// Gradient with respect to the logits is (softmax - labels) / n.
inline Var softmax_cross_entropy(Tape& tape, Var logits, const Tensor& one_hot) {
    const Tensor& z = tape.value(logits);
    detail::require_same_shape(z, one_hot, "softmax_cross_entropy");
    if (z.rank() != 2 || z.dim(1) < 2)
        throw ShapeError("softmax_cross_entropy needs [n x K] logits with K >= 2, got " + shape_string(z.shape()));
    const std::size_t n = z.dim(0), classes = z.dim(1);
    std::vector<std::size_t> target(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t ones = 0;
        for (std::size_t c = 0; c < classes; ++c) {
            const double y = one_hot[i * classes + c];
            if (y == 1.0) {
                ++ones;
                target[i] = c;
            } else if (y != 0.0) {
                ones = 2;
                break;
            }
        }
        if (ones != 1) throw DataError("label row " + std::to_string(i) + " is not one-hot");
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = z.data().data() + i * classes;
        const double mx = *std::max_element(row, row + classes);
        double acc = 0.0;
        for (std::size_t c = 0; c < classes; ++c) acc += std::exp(row[c] - mx);
        loss += (mx + std::log(acc)) - row[target[i]];
    }
    loss /= static_cast<double>(n);
    return tape.record(Tensor({1}, std::vector<double>{loss}), tape.requires_grad(logits),
                       [logits, one_hot, n](Tape& t, std::size_t self) {
                           const double g = t.grad_of(self)[0];
                           const Tensor probs = softmax_rows(t.value(logits));
                           Tensor& gz = t.grad_buffer(logits);
                           const double f = g / static_cast<double>(n);
                           for (std::size_t i = 0; i < probs.size(); ++i) gz[i] += f * (probs[i] - one_hot[i]);
                       });
}

/// Result of comparing tape gradients with central finite differences.
struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coordinates = 0;
};

/// Builds a scalar on the tape from the leaves standing for `params`.
using ScalarGraph = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares the backward pass of `fn` against (f(x+h) - f(x-h)) / 2h for every
/// coordinate of every parameter. Relative error uses max(|a|, |n|, 1e-8).
inline GradCheckReport check_gradients(const ScalarGraph& fn, std::vector<Tensor> params, double step = 1e-4) {
    auto evaluate = [&](bool with_grad, std::vector<Tensor>* grads) {
        Tape tape;
        std::vector<Var> leaves;
        leaves.reserve(params.size());
        for (const Tensor& p : params) leaves.push_back(with_grad ? tape.variable(p) : tape.constant(p));
        const Var out = fn(tape, leaves);
        const Tensor& v = tape.value(out);
        if (v.size() != 1) throw ShapeError("check_gradients needs a scalar function");
        if (!std::isfinite(v[0])) throw NumericError("function evaluated to a non-finite value");
        if (with_grad) {
            tape.backward(out);
            for (Var leaf : leaves) grads->push_back(tape.grad(leaf));
        }
        return v[0];
    };

    std::vector<Tensor> analytic;
    evaluate(true, &analytic);
    GradCheckReport report;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const double saved = params[p][i];
            params[p][i] = saved + step;
            const double up = evaluate(false, nullptr);
            params[p][i] = saved - step;
            const double down = evaluate(false, nullptr);
            params[p][i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic[p][i];
            if (!std::isfinite(a)) throw NumericError("non-finite analytic gradient");
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double rel = std::abs(a - numeric) / denom;
            ++report.coordinates;
            if (rel > report.max_rel_error || report.coordinates == 1) {
                report.max_rel_error = rel;
                report.worst_param = p;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace bandfuse
