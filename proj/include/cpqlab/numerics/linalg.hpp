#pragma once

#include <Eigen/Dense>

#include "cpqlab/numerics/tensor.hpp"

namespace cpqlab::numerics {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline ConstMatrixMap as_matrix(const Tensor& t) {
    t.require_matrix();
    return {t.data.data(), static_cast<Eigen::Index>(t.shape[0]),
            static_cast<Eigen::Index>(t.shape[1])};
}

inline MatrixMap as_matrix(Tensor& t) {
    t.require_matrix();
    return {t.data.data(), static_cast<Eigen::Index>(t.shape[0]),
            static_cast<Eigen::Index>(t.shape[1])};
}

/// a (n x k) * b (k x m), or with either side transposed.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
                     bool transpose_b = false) {
    const std::size_t n = transpose_a ? a.cols() : a.rows();
    const std::size_t ka = transpose_a ? a.rows() : a.cols();
    const std::size_t kb = transpose_b ? b.cols() : b.rows();
    const std::size_t m = transpose_b ? b.rows() : b.cols();
    if (ka != kb)
        throw DimensionError("matmul: inner dimensions " + std::to_string(ka) + " vs " +
                             std::to_string(kb));
    Tensor out = Tensor::matrix(n, m);
    if (n == 0 || m == 0) return out;
    auto o = as_matrix(out);
    auto am = as_matrix(a);
    auto bm = as_matrix(b);
    if (!transpose_a && !transpose_b)
        o.noalias() = am * bm;
    else if (transpose_a && !transpose_b)
        o.noalias() = am.transpose() * bm;
    else if (!transpose_a && transpose_b)
        o.noalias() = am * bm.transpose();
    else
        o.noalias() = am.transpose() * bm.transpose();
    return out;
}

}  // namespace cpqlab::numerics
