#ifndef VCL_MATRIX_HPP
#define VCL_MATRIX_HPP

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace vcl {

// Dense row-major matrix of doubles. The batch dimension is always rows.
// Values are immutable by convention once handed to another module; all
// mutating helpers live on the owning side.
class Matrix {
public:
    Matrix() : rows_(0), cols_(0) {}
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                        " != rows*cols " + std::to_string(rows_ * cols_));
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& storage() { return data_; }
    const std::vector<double>& storage() const { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

private:
    std::size_t rows_, cols_;
    std::vector<double> data_;
};

using EigenMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstEigenMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline ConstEigenMap as_eigen(const Matrix& m) {
    return ConstEigenMap(m.data(), static_cast<Eigen::Index>(m.rows()),
                         static_cast<Eigen::Index>(m.cols()));
}
inline EigenMap as_eigen(Matrix& m) {
    return EigenMap(m.data(), static_cast<Eigen::Index>(m.rows()),
                    static_cast<Eigen::Index>(m.cols()));
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: inner dims " + std::to_string(a.cols()) + " vs " +
                                    std::to_string(b.rows()));
    Matrix out(a.rows(), b.cols());
    as_eigen(out).noalias() = as_eigen(a) * as_eigen(b);
    return out;
}

// out += a^T * b, used by gradient accumulation.
inline void add_at_b(Matrix& out, const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols())
        throw std::invalid_argument("add_at_b: shape mismatch");
    as_eigen(out).noalias() += as_eigen(a).transpose() * as_eigen(b);
}

// out += a * b^T.
inline void add_a_bt(Matrix& out, const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols() || out.rows() != a.rows() || out.cols() != b.rows())
        throw std::invalid_argument("add_a_bt: shape mismatch");
    as_eigen(out).noalias() += as_eigen(a) * as_eigen(b).transpose();
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("hadamard: shape mismatch");
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

// Row-wise log-softmax via max-shifted log-sum-exp, stable for large logits.
inline Matrix log_softmax_rows(const Matrix& logits) {
    if (logits.rows() == 0 || logits.cols() == 0)
        throw std::invalid_argument("log_softmax_rows: empty input");
    if (!logits.all_finite()) throw std::invalid_argument("log_softmax_rows: non-finite input");
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        double mx = logits(r, 0);
        for (std::size_t c = 1; c < logits.cols(); ++c) mx = std::max(mx, logits(r, c));
        double sum = 0.0;
        for (std::size_t c = 0; c < logits.cols(); ++c) sum += std::exp(logits(r, c) - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t c = 0; c < logits.cols(); ++c) out(r, c) = logits(r, c) - lse;
    }
    return out;
}

}  // namespace vcl

#endif  // VCL_MATRIX_HPP
