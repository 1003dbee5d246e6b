#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <vector>

namespace depass {

/// Dense row-major matrix. The only container the engine needs besides
/// Tensor3; kept deliberately small.
template <typename T>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, T(0)) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    T* row(std::size_t i) { return data_.data() + i * cols_; }
    const T* row(std::size_t i) const { return data_.data() + i * cols_; }

    T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    void fill(T v) { data_.assign(data_.size(), v); }

    bool operator==(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
    }

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<T> data_;
};

/// Rank-3 tensor, row-major over (n0, n1, n2). Used for the N x M x D
/// decomposed state and the N x M x d_mlp apportioning weights.
template <typename T>
class Tensor3 {
public:
    Tensor3() = default;
    Tensor3(std::size_t n0, std::size_t n1, std::size_t n2)
        : n0_(n0), n1_(n1), n2_(n2), data_(n0 * n1 * n2, T(0)) {}

    std::size_t dim0() const { return n0_; }
    std::size_t dim1() const { return n1_; }
    std::size_t dim2() const { return n2_; }
    std::size_t size() const { return data_.size(); }

    T* at(std::size_t i, std::size_t j) { return data_.data() + (i * n1_ + j) * n2_; }
    const T* at(std::size_t i, std::size_t j) const { return data_.data() + (i * n1_ + j) * n2_; }

    T& operator()(std::size_t i, std::size_t j, std::size_t k) { return data_[(i * n1_ + j) * n2_ + k]; }
    const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * n1_ + j) * n2_ + k];
    }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

private:
    std::size_t n0_ = 0, n1_ = 0, n2_ = 0;
    std::vector<T> data_;
};

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
T l2_norm(const T* x, std::size_t n) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * x[i];
    return std::sqrt(acc);
}

/// C = A * B
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    assert(a.cols() == b.rows());
    Matrix<T> c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const T* arow = a.row(i);
        T* crow = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            axpy(arow[k], b.row(k), crow, b.cols());
        }
    }
    return c;
}

/// C = A * B^T. B rows are contiguous, so every entry is one dot product.
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
    assert(a.cols() == b.cols());
    Matrix<T> c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            c(i, j) = dot(a.row(i), b.row(j), a.cols());
        }
    }
    return c;
}

template <typename T>
void add_inplace(Matrix<T>& a, const Matrix<T>& b) {
    assert(a.rows() == b.rows() && a.cols() == b.cols());
    for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

}  // namespace depass
