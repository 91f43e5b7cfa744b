#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vssm/errors.hpp"

namespace vssm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

/// Dense row-major array. A plain value: no gradient bookkeeping lives here.
template <class S>
class Tensor {
   public:
    using value_type = S;

    Tensor() = default;
    explicit Tensor(Shape shape, S fill = S(0)) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw UsageError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                             shape_str(shape_));
    }

    static Tensor scalar(S v) { return Tensor(Shape{1}, std::vector<S>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<S> data() { return data_; }
    std::span<const S> data() const { return data_; }
    std::vector<S>& storage() { return data_; }
    const std::vector<S>& storage() const { return data_; }

    S& operator[](std::size_t i) { return data_[i]; }
    const S& operator[](std::size_t i) const { return data_[i]; }

    S item() const {
        if (data_.size() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel())
            throw UsageError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return Tensor(std::move(shape), data_);
    }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

   private:
    Shape shape_;
    std::vector<S> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace vssm
