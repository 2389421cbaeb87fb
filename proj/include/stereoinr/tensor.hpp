#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace stereoinr {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ArgumentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major tensor of doubles. Feature grids use [h, w, C] layout
// (site-major), images [h, w, 3], matrices [rows, cols].
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel(shape), 0.0) {}
    Tensor(std::vector<int> s, double fill) : shape(std::move(s)), data(numel(shape), fill) {}

    static std::size_t numel(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d < 0) throw ShapeError("negative dimension");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double v) { return Tensor(std::move(s), v); }

    std::size_t size() const { return data.size(); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // 2D access [r, c]
    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * shape[1] + c]; }

    // 3D access [y, x, c]
    double& at(int y, int x, int c) {
        return data[(static_cast<std::size_t>(y) * shape[1] + x) * shape[2] + c];
    }
    double at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * shape[1] + x) * shape[2] + c];
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ", ";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(where) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
}

}  // namespace stereoinr
