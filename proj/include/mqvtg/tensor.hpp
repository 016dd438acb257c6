#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "mqvtg/rng.hpp"

namespace mqvtg {

// Dense row-major matrix of doubles. Every quantity in the compute graph is
// rank-2: scalars are 1x1, rows are 1xN, columns are Nx1. Patch stacks are
// stored flattened to (T*P)xd with P carried separately.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), v_(rows * cols, fill) {}
    Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
        : rows_(rows), cols_(cols), v_(std::move(values)) {
        if (v_.size() != rows_ * cols_)
            throw std::invalid_argument("Tensor: value count does not match shape");
    }

    static Tensor zeros(std::size_t r, std::size_t c) { return Tensor(r, c, 0.0); }
    static Tensor ones(std::size_t r, std::size_t c) { return Tensor(r, c, 1.0); }
    static Tensor full(std::size_t r, std::size_t c, double x) { return Tensor(r, c, x); }
    static Tensor scalar(double x) { return Tensor(1, 1, x); }
    static Tensor identity(std::size_t n) {
        Tensor t(n, n);
        for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
        return t;
    }
    static Tensor randn(std::size_t r, std::size_t c, Rng& rng, double stddev = 1.0) {
        Tensor t(r, c);
        for (auto& x : t.v_) x = rng.normal(0.0, stddev);
        return t;
    }
    static Tensor row(const std::vector<double>& values) {
        return Tensor(1, values.size(), values);
    }
    static Tensor column(const std::vector<double>& values) {
        return Tensor(values.size(), 1, values);
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t numel() const { return v_.size(); }
    bool empty() const { return v_.empty(); }
    bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    double& at(std::size_t r, std::size_t c) { return v_[r * cols_ + c]; }
    double at(std::size_t r, std::size_t c) const { return v_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return v_[i]; }
    double operator[](std::size_t i) const { return v_[i]; }
    double item() const {
        if (numel() != 1) throw std::logic_error("Tensor::item: not a scalar (" + shape_str() + ")");
        return v_[0];
    }

    std::vector<double>& data() { return v_; }
    const std::vector<double>& data() const { return v_; }

    void fill(double x) { v_.assign(v_.size(), x); }

    bool all_finite() const {
        for (double x : v_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    Tensor row_slice(std::size_t r) const {
        Tensor out(1, cols_);
        for (std::size_t c = 0; c < cols_; ++c) out.at(0, c) = at(r, c);
        return out;
    }

    Tensor transposed() const {
        Tensor out(cols_, rows_);
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t c = 0; c < cols_; ++c) out.at(c, r) = at(r, c);
        return out;
    }

    void add_in_place(const Tensor& o) {
        if (!same_shape(o)) throw std::logic_error("Tensor::add_in_place: shape mismatch");
        for (std::size_t i = 0; i < v_.size(); ++i) v_[i] += o.v_[i];
    }

    bool operator==(const Tensor& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && v_ == o.v_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> v_;
};

inline double squared_distance(const Tensor& a, std::size_t ra, const Tensor& b, std::size_t rb) {
    double s = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) {
        const double d = a.at(ra, c) - b.at(rb, c);
        s += d * d;
    }
    return s;
}

}  // namespace mqvtg
