#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace c2fdft {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

using Shape = std::vector<int64_t>;

// 64-byte-aligned storage. Eigen's vectorized traversals peel differently
// depending on the buffer address; pinning the alignment keeps every
// reduction order, and therefore every result, reproducible across runs.
template <typename T, std::size_t Align = 64>
struct AlignedAllocator {
    using value_type = T;
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) {}
    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(Align)); }
    template <typename U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };
    bool operator==(const AlignedAllocator&) const { return true; }
    bool operator!=(const AlignedAllocator&) const { return false; }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAllocator<T>>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// Dense n-d array, row-major (NCHW for images). Double for schedule math
// and gradient checks, float everywhere the network runs.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(count(shape_)), T(0));
    }

    Tensor(Shape shape, AlignedVec<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        require(static_cast<int64_t>(data_.size()) == count(shape_),
                "tensor data size does not match shape " + shape_str(shape_));
    }

    Tensor(Shape shape, std::initializer_list<T> data) : shape_(std::move(shape)) {
        data_.assign(data.begin(), data.end());
        require(static_cast<int64_t>(data_.size()) == count(shape_),
                "tensor data size does not match shape " + shape_str(shape_));
    }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor scalar(T value) { return full({1}, value); }

    static int64_t count(const Shape& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            require(d >= 0, "negative dimension in shape");
            n *= d;
        }
        return n;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    AlignedVec<T>& vec() { return data_; }
    const AlignedVec<T>& vec() const { return data_; }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // rank-4 accessor (b, c, h, w)
    T& at(int64_t b, int64_t c, int64_t h, int64_t w) {
        return data_[static_cast<size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    const T& at(int64_t b, int64_t c, int64_t h, int64_t w) const {
        return data_[static_cast<size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor& operator+=(const Tensor& o) {
        require(same_shape(o), "shape mismatch in +=");
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Tensor& operator*=(T s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (size_t i = 0; i < data_.size(); ++i) out[static_cast<int64_t>(i)] = static_cast<U>(data_[i]);
        return out;
    }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    T min() const { return *std::min_element(data_.begin(), data_.end()); }
    T max() const { return *std::max_element(data_.begin(), data_.end()); }

    double sum() const {
        double acc = 0;
        for (T v : data_) acc += static_cast<double>(v);
        return acc;
    }

    double mean() const { return empty() ? 0.0 : sum() / static_cast<double>(numel()); }

    double max_abs_diff(const Tensor& o) const {
        require(same_shape(o), "shape mismatch in max_abs_diff");
        double m = 0;
        for (size_t i = 0; i < data_.size(); ++i)
            m = std::max(m, std::abs(static_cast<double>(data_[i]) - static_cast<double>(o.data_[i])));
        return m;
    }

private:
    Shape shape_;
    AlignedVec<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace c2fdft
