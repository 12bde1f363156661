#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "gnet/error.hpp"

namespace gnet {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
}

// Dense row-major tensor of doubles. Training and float-simulated inference
// run at double precision so gradient checks against finite differences are
// meaningful.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(numel(shape)), 0.0) {}
    Tensor(Shape s, double fill)
        : shape(std::move(s)), data(static_cast<size_t>(numel(shape)), fill) {}
    Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != numel(shape))
            throw InvalidArgument("tensor data size does not match shape " + shape_str(shape));
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }

    double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // 4-d accessor (n, c, h, w); callers keep conv-related tensors in this layout.
    double& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
        return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    double at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    double& at2(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
    double at2(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * shape[1] + c)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor& operator+=(const Tensor& o) {
        if (!same_shape(o)) throw InvalidArgument("tensor += shape mismatch");
        for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
        return *this;
    }
    Tensor& operator*=(double s) {
        for (double& v : data) v *= s;
        return *this;
    }
};

// Integer accumulator tensor produced by the bit-packed kernels.
struct IntTensor {
    Shape shape;
    std::vector<int32_t> data;

    IntTensor() = default;
    explicit IntTensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(numel(shape)), 0) {}

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int32_t& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    int32_t operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }
    bool same_shape(const IntTensor& o) const { return shape == o.shape; }
};

// All randomness flows through explicitly seeded engines; determinism is a
// contract (same seed + build => same trajectory).
using Rng = std::mt19937_64;

inline Tensor randn(const Shape& s, Rng& rng, double stddev = 1.0) {
    Tensor t(s);
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.data) v = dist(rng);
    return t;
}

inline Tensor rand_uniform(const Shape& s, Rng& rng, double lo, double hi) {
    Tensor t(s);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.data) v = dist(rng);
    return t;
}

}  // namespace gnet
