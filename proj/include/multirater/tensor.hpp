#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace multirater {

/// Dense row-major float tensor. Rank is dynamic (images are (h,w),
/// feature maps (n,c,h,w), conv weights kept flat as (out, in*k*k)).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        for (int d : shape_) {
            if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension");
        }
        data_.assign(count(shape_), 0.0f);
    }

    Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, float value) {
        Tensor t(std::move(shape));
        t.fill(value);
        return t;
    }

    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    const std::vector<int>& shape() const { return shape_; }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }

    float& operator[](size_t i) { return data_[i]; }
    float operator[](size_t i) const { return data_[i]; }

    // 4-d accessor for (n,c,h,w) layouts.
    float& at(int n, int c, int y, int x) {
        return data_[offset4(n, c, y, x)];
    }
    float at(int n, int c, int y, int x) const {
        return data_[offset4(n, c, y, x)];
    }

    // 2-d accessor for (h,w) grids.
    float& at(int y, int x) { return data_[static_cast<size_t>(y) * shape_[1] + x]; }
    float at(int y, int x) const { return data_[static_cast<size_t>(y) * shape_[1] + x]; }

    void fill(float v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(0.0f); }

    void reshape(std::vector<int> shape) {
        if (count(shape) != data_.size()) throw std::invalid_argument("Tensor::reshape: size mismatch");
        shape_ = std::move(shape);
    }

    // Reallocates only when the element count changes; contents are zeroed.
    void resize(std::vector<int> shape) {
        size_t n = count(shape);
        shape_ = std::move(shape);
        data_.assign(n, 0.0f);
    }

    // Shape change only; skips the zero-fill when the shape already
    // matches (forward caches are fully overwritten anyway).
    void ensure(const std::vector<int>& shape) {
        if (shape_ != shape) resize(shape);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

    static size_t count(const std::vector<int>& shape) {
        size_t n = 1;
        for (int d : shape) n *= static_cast<size_t>(d);
        return n;
    }

    static std::string shape_string(const std::vector<int>& shape) {
        std::string s = "(";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }

private:
    size_t offset4(int n, int c, int y, int x) const {
        assert(rank() == 4);
        return ((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
    }

    std::vector<int> shape_;
    std::vector<float> data_;
};

/// Binary 2-d mask, values restricted to {0,1}.
struct Mask {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> v;

    Mask() = default;
    Mask(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0) {}

    uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
    size_t size() const { return v.size(); }

    size_t area() const {
        size_t a = 0;
        for (uint8_t b : v) a += b;
        return a;
    }

    bool operator==(const Mask& o) const { return h == o.h && w == o.w && v == o.v; }
};

inline void require_same_shape(const Mask& a, const Mask& b, const char* what) {
    if (a.h != b.h || a.w != b.w)
        throw std::invalid_argument(std::string(what) + ": mask shape mismatch");
}

/// Binarizes a 2-d probability grid at the given threshold.
inline Mask threshold_mask(const Tensor& probs, float threshold = 0.5f) {
    if (probs.rank() != 2) throw std::invalid_argument("threshold_mask: expected a 2-d map");
    Mask m(probs.dim(0), probs.dim(1));
    for (size_t i = 0; i < probs.size(); ++i) m.v[i] = probs[i] >= threshold ? 1 : 0;
    return m;
}

/// Converts a binary mask to a float grid.
inline Tensor mask_to_tensor(const Mask& m) {
    Tensor t({m.h, m.w});
    for (size_t i = 0; i < m.size(); ++i) t[i] = static_cast<float>(m.v[i]);
    return t;
}

} // namespace multirater
