#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace ehdr {

// Dense row-major tensor. Shapes are small (images, conv weights), so a
// plain std::vector backing store is enough.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)), data_(numel_of(shape_), T(0)) {}

    Tensor(std::vector<int> shape, T fill)
        : shape_(std::move(shape)), data_(numel_of(shape_), fill) {}

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // (C,H,W) accessor
    T& at(int c, int y, int x) {
        return data_[(static_cast<int64_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    const T& at(int c, int y, int x) const {
        return data_[(static_cast<int64_t>(c) * shape_[1] + y) * shape_[2] + x];
    }

    // (N,C,H,W) accessor, used for conv weights as (Cout,Cin,kh,kw)
    T& at4(int a, int b, int y, int x) {
        return data_[((static_cast<int64_t>(a) * shape_[1] + b) * shape_[2] + y) * shape_[3] + x];
    }
    const T& at4(int a, int b, int y, int x) const {
        return data_[((static_cast<int64_t>(a) * shape_[1] + b) * shape_[2] + y) * shape_[3] + x];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    T sum() const {
        T s = T(0);
        for (const T& v : data_) s += v;
        return s;
    }

    T min() const { return data_.empty() ? T(0) : *std::min_element(data_.begin(), data_.end()); }
    T max() const { return data_.empty() ? T(0) : *std::max_element(data_.begin(), data_.end()); }

    T mean() const { return data_.empty() ? T(0) : sum() / static_cast<T>(data_.size()); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
        return out;
    }

private:
    std::vector<int> shape_;
    std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

} // namespace ehdr
