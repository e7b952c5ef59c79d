#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cpqlab/errors.hpp"

namespace cpqlab::numerics {

/// Dense row-major tensor of doubles. Almost everything in the library is a
/// matrix (batch x features), so the helpers below assume rank 2 where noted.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    Tensor(std::vector<std::size_t> shp, double fill = 0.0) : shape(std::move(shp)) {
        data.assign(element_count(shape), fill);
    }

    Tensor(std::vector<std::size_t> shp, std::vector<double> values)
        : shape(std::move(shp)), data(std::move(values)) {
        if (element_count(shape) != data.size())
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape product " +
                                 std::to_string(element_count(shape)));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
        return Tensor({rows, cols}, fill);
    }

    static Tensor row(std::span<const double> values) {
        return Tensor({1, values.size()}, std::vector<double>(values.begin(), values.end()));
    }

    static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

    static std::size_t element_count(const std::vector<std::size_t>& shp) {
        return std::accumulate(shp.begin(), shp.end(), std::size_t{1}, std::multiplies<>());
    }

    std::size_t size() const noexcept { return data.size(); }
    std::size_t rank() const noexcept { return shape.size(); }

    std::size_t rows() const {
        require_matrix();
        return shape[0];
    }
    std::size_t cols() const {
        require_matrix();
        return shape[1];
    }

    double& operator()(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    std::span<double> row_span(std::size_t r) { return {data.data() + r * cols(), cols()}; }
    std::span<const double> row_span(std::size_t r) const {
        return {data.data() + r * cols(), cols()};
    }

    double item() const {
        if (data.size() != 1) throw DimensionError("item() on a tensor with " +
                                                   std::to_string(data.size()) + " elements");
        return data[0];
    }

    bool all_finite() const {
        return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    friend bool operator==(const Tensor&, const Tensor&) = default;

    void require_matrix() const {
        if (shape.size() != 2)
            throw DimensionError("expected a rank-2 tensor, got rank " +
                                 std::to_string(shape.size()));
    }
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(op) + ": shape " + shape_string(a.shape) + " vs " +
                             shape_string(b.shape));
}

/// Stack row vectors into a matrix; every row must have the same width.
inline Tensor stack_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return Tensor::matrix(0, 0);
    const std::size_t w = rows.front().size();
    Tensor out = Tensor::matrix(rows.size(), w);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != w) throw DimensionError("stack_rows: ragged rows");
        std::copy(rows[r].begin(), rows[r].end(), out.data.begin() + r * w);
    }
    return out;
}

/// Horizontal concatenation of two matrices with equal row counts.
inline Tensor hcat(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows()) throw DimensionError("hcat: row counts differ");
    Tensor out = Tensor::matrix(a.rows(), a.cols() + b.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        std::copy(a.row_span(r).begin(), a.row_span(r).end(), out.row_span(r).begin());
        std::copy(b.row_span(r).begin(), b.row_span(r).end(),
                  out.row_span(r).begin() + static_cast<std::ptrdiff_t>(a.cols()));
    }
    return out;
}

/// Vertical concatenation of two matrices with equal column counts.
inline Tensor vcat(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) throw DimensionError("vcat: column counts differ");
    Tensor out = Tensor::matrix(a.rows() + b.rows(), a.cols());
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
    return out;
}

/// Each row of `m` repeated `times` times consecutively.
inline Tensor repeat_rows(const Tensor& m, std::size_t times) {
    Tensor out = Tensor::matrix(m.rows() * times, m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t k = 0; k < times; ++k)
            std::copy(m.row_span(r).begin(), m.row_span(r).end(),
                      out.row_span(r * times + k).begin());
    return out;
}

inline Tensor select_rows(const Tensor& m, std::span<const std::size_t> idx) {
    Tensor out = Tensor::matrix(idx.size(), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(m.row_span(idx[i]).begin(), m.row_span(idx[i]).end(), out.row_span(i).begin());
    return out;
}

}  // namespace cpqlab::numerics
