#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bandfuse/errors.hpp"

namespace bandfuse {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

/// Dense row-major tensor of doubles. Plain value type: copies are deep.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        validate_extents();
        data_.assign(shape_size(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_extents();
        if (shape_size(shape_) != data_.size())
            throw ShapeError("tensor of shape " + shape_string(shape_) + " given " +
                             std::to_string(data_.size()) + " values");
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

    static Tensor from(Shape shape, std::initializer_list<double> values) {
        return Tensor(std::move(shape), std::vector<double>(values));
    }

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_, 0.0); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& values() & noexcept { return data_; }
    const std::vector<double>& values() const& noexcept { return data_; }
    std::vector<double> values() && noexcept { return std::move(data_); }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * shape_.at(1) + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_.at(1) + c]; }

    /// Same data viewed under a new shape of equal element count.
    Tensor reshaped(Shape shape) const& {
        if (shape_size(shape) != data_.size())
            throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    void validate_extents() const {
        for (std::size_t extent : shape_)
            if (extent == 0) throw ShapeError("zero extent in shape " + shape_string(shape_));
    }

    Shape shape_;
    std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("max_abs_diff of " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace bandfuse
