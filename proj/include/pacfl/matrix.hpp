#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace pacfl {

/// Dense row-major matrix of doubles. Small and unclever on purpose: every
/// dataset and weight tensor in this project fits comfortably in memory.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
        if (rows.empty()) return Matrix{};
        Matrix m(rows.size(), rows.front().size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != m.cols_) throw std::invalid_argument("ragged rows");
            for (std::size_t j = 0; j < m.cols_; ++j) m(i, j) = rows[i][j];
        }
        return m;
    }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const {
        return {data_.data() + i * cols_, cols_};
    }

    std::vector<double> column(std::size_t j) const {
        std::vector<double> c(rows_);
        for (std::size_t i = 0; i < rows_; ++i) c[i] = (*this)(i, j);
        return c;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    /// New matrix keeping only the given columns, in the given order.
    Matrix select_columns(const std::vector<std::size_t>& cols) const {
        Matrix out(rows_, cols.size());
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t k = 0; k < cols.size(); ++k) out(i, k) = (*this)(i, cols[k]);
        return out;
    }

    /// New matrix keeping only the given rows, in the given order.
    Matrix select_rows(const std::vector<std::size_t>& rows) const {
        Matrix out(rows.size(), cols_);
        for (std::size_t k = 0; k < rows.size(); ++k)
            for (std::size_t j = 0; j < cols_; ++j) out(k, j) = (*this)(rows[k], j);
        return out;
    }

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix matmul(const Matrix& A, const Matrix& B) {
    if (A.cols() != B.rows()) throw std::invalid_argument("matmul: shape mismatch");
    Matrix C(A.rows(), B.cols());
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t k = 0; k < A.cols(); ++k) {
            const double a = A(i, k);
            if (a == 0.0) continue;
            for (std::size_t j = 0; j < B.cols(); ++j) C(i, j) += a * B(k, j);
        }
    return C;
}

/// A^T * B
inline Matrix matmul_transA(const Matrix& A, const Matrix& B) {
    if (A.rows() != B.rows()) throw std::invalid_argument("matmul_transA: shape mismatch");
    Matrix C(A.cols(), B.cols());
    for (std::size_t k = 0; k < A.rows(); ++k)
        for (std::size_t i = 0; i < A.cols(); ++i) {
            const double a = A(k, i);
            if (a == 0.0) continue;
            for (std::size_t j = 0; j < B.cols(); ++j) C(i, j) += a * B(k, j);
        }
    return C;
}

/// A * B^T
inline Matrix matmul_transB(const Matrix& A, const Matrix& B) {
    if (A.cols() != B.cols()) throw std::invalid_argument("matmul_transB: shape mismatch");
    Matrix C(A.rows(), B.rows());
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < B.rows(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < A.cols(); ++k) s += A(i, k) * B(j, k);
            C(i, j) = s;
        }
    return C;
}

}  // namespace pacfl
