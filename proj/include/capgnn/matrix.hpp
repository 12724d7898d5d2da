#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

namespace capgnn {

using Real = double;

/// Row-major dense 2-D matrix with value semantics.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, Real fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<Real> values);

    static Matrix from_rows(std::initializer_list<std::initializer_list<Real>> rows);
    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    Real& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
    const Real& operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
    Real& operator[](std::size_t i) { return values_[i]; }
    Real operator[](std::size_t i) const { return values_[i]; }

    std::span<Real> values() noexcept { return values_; }
    std::span<const Real> values() const noexcept { return values_; }
    std::span<Real> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
    std::span<const Real> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

    bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    bool all_finite() const noexcept;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<Real> values_;
};

/// Sparsity structure of a CSR matrix. Shared between matrices with the same pattern.
struct CsrPattern {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::size_t> row_offsets{0};
    std::vector<std::size_t> col_indices;

    std::size_t nnz() const noexcept { return col_indices.size(); }
    /// Offsets monotone, indices in range, strictly increasing within each row.
    bool is_canonical() const noexcept;
    /// Row index of every stored entry, in storage order.
    std::vector<std::size_t> entry_rows() const;
    /// Storage index of (r, c), or nnz() if absent.
    std::size_t find(std::size_t r, std::size_t c) const noexcept;
};

/// Canonical CSR matrix: a shared pattern plus one value per stored entry.
class CsrMatrix {
public:
    CsrMatrix() : pattern_(std::make_shared<CsrPattern>()) {}
    CsrMatrix(std::shared_ptr<const CsrPattern> pattern, std::vector<Real> values);

    /// Builds a canonical matrix from (row, col, value) triplets; duplicates keep the max value.
    static CsrMatrix from_triplets(std::size_t rows, std::size_t cols,
                                   std::vector<std::size_t> row_idx,
                                   std::vector<std::size_t> col_idx,
                                   std::vector<Real> values);
    static CsrMatrix identity(std::size_t n);
    /// Keeps exactly the nonzero entries of a dense matrix.
    static CsrMatrix from_dense(const Matrix& dense);

    std::size_t rows() const noexcept { return pattern_->rows; }
    std::size_t cols() const noexcept { return pattern_->cols; }
    std::size_t nnz() const noexcept { return values_.size(); }
    const CsrPattern& pattern() const noexcept { return *pattern_; }
    const std::shared_ptr<const CsrPattern>& shared_pattern() const noexcept { return pattern_; }
    std::span<const std::size_t> row_offsets() const noexcept { return pattern_->row_offsets; }
    std::span<const std::size_t> col_indices() const noexcept { return pattern_->col_indices; }
    std::span<const Real> values() const noexcept { return values_; }
    std::span<Real> values() noexcept { return values_; }

    /// Value at (r, c); zero when not stored.
    Real at(std::size_t r, std::size_t c) const noexcept;
    Matrix to_dense() const;
    CsrMatrix transpose() const;

    friend bool operator==(const CsrMatrix& a, const CsrMatrix& b);

private:
    std::shared_ptr<const CsrPattern> pattern_;
    std::vector<Real> values_;
};

}  // namespace capgnn
