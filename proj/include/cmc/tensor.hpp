#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <vector>

#include "cmc/rng.hpp"

namespace cmc {

// Rounds through float32 storage precision. The volatile keeps the compiler
// from eliding the double->float->double narrowing (gcc 11 drops it at -O3
// when the surrounding loop vectorizes).
inline double round_f32(double v) {
    volatile float f = static_cast<float>(v);
    return static_cast<double>(f);
}

// Dense row-major tensor of doubles. Training math runs in 64-bit floats;
// checkpoints downcast to 32-bit on save.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(count(shape)), 0.0);
    }
    Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != count(shape))
            throw std::invalid_argument("tensor: value count does not match shape");
    }

    static int64_t count(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t e : s) {
            if (e < 0) throw std::invalid_argument("tensor: negative extent");
            n *= e;
        }
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int64_t> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor randn(std::vector<int64_t> s, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (double& v : t.data) v = stddev * rng.normal();
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }

    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // 4-d accessor, shape [N,C,H,W]
    double& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
        return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    double at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    void add_scaled(const Tensor& o, double s) {
        assert(same_shape(o));
        for (size_t i = 0; i < data.size(); ++i) data[i] += s * o.data[i];
    }
};

} // namespace cmc
