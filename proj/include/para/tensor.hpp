#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace para {

// Dense row-major tensor of 64-bit floats.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> dims) {
        Tensor t;
        t.shape = std::move(dims);
        t.data.assign(static_cast<size_t>(numel_of(t.shape)), 0.0);
        return t;
    }

    static Tensor full(std::vector<int64_t> dims, double v) {
        Tensor t = zeros(std::move(dims));
        for (auto& x : t.data) x = v;
        return t;
    }

    static Tensor scalar(double v) { return full({1}, v); }

    static Tensor from(std::vector<int64_t> dims, std::vector<double> values) {
        Tensor t;
        t.shape = std::move(dims);
        t.data = std::move(values);
        if (static_cast<int64_t>(t.data.size()) != numel_of(t.shape))
            throw std::invalid_argument("Tensor::from: data length does not match shape");
        return t;
    }

    int64_t numel() const { return numel_of(shape); }
    int64_t ndim() const { return static_cast<int64_t>(shape.size()); }

    double& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return data[static_cast<size_t>(i)]; }

    double& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    double at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

    double& at(int64_t i, int64_t j, int64_t k) {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    double at(int64_t i, int64_t j, int64_t k) const {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static int64_t numel_of(const std::vector<int64_t>& dims) {
        int64_t n = 1;
        for (int64_t d : dims) n *= d;
        return n;
    }
};

inline std::string shape_str(const std::vector<int64_t>& dims) {
    std::string s = "[";
    for (size_t i = 0; i < dims.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(dims[i]);
    }
    return s + "]";
}

}  // namespace para
