#pragma once

// Dense row-major multidimensional array used throughout the engine.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace regda {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A NaN or infinity showed up in a forward value, loss or gradient.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Cache-line aligned storage. Vectorized kernels peel differently depending on
// the start address, so a fixed alignment keeps results bit-reproducible.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

template <typename T>
class Tensor {
public:
    using value_type = T;
    using Storage = AlignedVector<T>;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{0})
        : shape_(std::move(shape)), data_(numel(shape_), fill) {}
    Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), Storage(data.begin(), data.end())) {}
    Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != numel(shape_))
            throw ShapeError("Tensor: " + std::to_string(data_.size()) + " values for shape " +
                             to_string(shape_));
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, Storage{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> span() { return data_; }
    std::span<const T> span() const { return data_; }
    Storage& vec() { return data_; }
    const Storage& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    T& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const T& at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    const T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    // Resizes in place, keeping capacity; contents are zeroed.
    void reset(const Shape& shape) {
        shape_ = shape;
        data_.assign(numel(shape_), T{0});
    }
    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape shape) const {
        if (numel(shape) != size())
            throw ShapeError("reshape: " + to_string(shape_) + " -> " + to_string(shape));
        return Tensor(std::move(shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, typename Tensor<U>::Storage(data_.begin(), data_.end()));
    }

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_;
    Storage data_;
};

// Row-major strides of a shape.
inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// Concatenates along axis 0; all trailing dims must agree.
template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat0: no parts");
    Shape out = parts.front().shape();
    out[0] = 0;
    typename Tensor<T>::Storage data;
    for (const auto& p : parts) {
        if (p.rank() != out.size() || !std::equal(out.begin() + 1, out.end(), p.shape().begin() + 1))
            throw ShapeError("concat0: " + to_string(parts.front().shape()) + " vs " +
                             to_string(p.shape()));
        out[0] += p.dim(0);
        data.insert(data.end(), p.vec().begin(), p.vec().end());
    }
    return Tensor<T>(out, std::move(data));
}

}  // namespace regda
