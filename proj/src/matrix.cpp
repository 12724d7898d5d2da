#include "capgnn/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "capgnn/errors.hpp"

namespace capgnn {

Matrix::Matrix(std::size_t rows, std::size_t cols, Real fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<Real> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows * cols) {
        throw ShapeError("Matrix: " + std::to_string(values_.size()) + " values for a " +
                         std::to_string(rows) + "x" + std::to_string(cols) + " matrix");
    }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<Real>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<Real> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("Matrix::from_rows: ragged rows");
        values.insert(values.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(values));
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](Real v) { return std::isfinite(v); });
}

bool CsrPattern::is_canonical() const noexcept {
    if (row_offsets.size() != rows + 1 || row_offsets.front() != 0 ||
        row_offsets.back() != col_indices.size()) {
        return false;
    }
    for (std::size_t r = 0; r < rows; ++r) {
        if (row_offsets[r] > row_offsets[r + 1]) return false;
        for (std::size_t e = row_offsets[r]; e < row_offsets[r + 1]; ++e) {
            if (col_indices[e] >= cols) return false;
            if (e > row_offsets[r] && col_indices[e] <= col_indices[e - 1]) return false;
        }
    }
    return true;
}

std::vector<std::size_t> CsrPattern::entry_rows() const {
    std::vector<std::size_t> out(nnz());
    for (std::size_t r = 0; r < rows; ++r) {
        std::fill(out.begin() + static_cast<std::ptrdiff_t>(row_offsets[r]),
                  out.begin() + static_cast<std::ptrdiff_t>(row_offsets[r + 1]), r);
    }
    return out;
}

std::size_t CsrPattern::find(std::size_t r, std::size_t c) const noexcept {
    const auto first = col_indices.begin() + static_cast<std::ptrdiff_t>(row_offsets[r]);
    const auto last = col_indices.begin() + static_cast<std::ptrdiff_t>(row_offsets[r + 1]);
    const auto it = std::lower_bound(first, last, c);
    if (it == last || *it != c) return nnz();
    return static_cast<std::size_t>(it - col_indices.begin());
}

CsrMatrix::CsrMatrix(std::shared_ptr<const CsrPattern> pattern, std::vector<Real> values)
    : pattern_(std::move(pattern)), values_(std::move(values)) {
    if (values_.size() != pattern_->nnz()) {
        throw ShapeError("CsrMatrix: value count does not match pattern nnz");
    }
}

CsrMatrix CsrMatrix::from_triplets(std::size_t rows, std::size_t cols,
                                   std::vector<std::size_t> row_idx,
                                   std::vector<std::size_t> col_idx,
                                   std::vector<Real> values) {
    if (row_idx.size() != col_idx.size() || row_idx.size() != values.size()) {
        throw ShapeError("CsrMatrix::from_triplets: triplet arrays differ in length");
    }
    std::vector<std::size_t> order(row_idx.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return row_idx[a] != row_idx[b] ? row_idx[a] < row_idx[b] : col_idx[a] < col_idx[b];
    });

    auto pattern = std::make_shared<CsrPattern>();
    pattern->rows = rows;
    pattern->cols = cols;
    pattern->row_offsets.assign(rows + 1, 0);
    std::vector<Real> out_values;
    out_values.reserve(values.size());
    std::size_t prev_r = rows, prev_c = cols;
    for (std::size_t idx : order) {
        const std::size_t r = row_idx[idx], c = col_idx[idx];
        if (r >= rows || c >= cols) throw ShapeError("CsrMatrix::from_triplets: index out of range");
        if (r == prev_r && c == prev_c) {
            out_values.back() = std::max(out_values.back(), values[idx]);
            continue;
        }
        pattern->col_indices.push_back(c);
        out_values.push_back(values[idx]);
        ++pattern->row_offsets[r + 1];
        prev_r = r;
        prev_c = c;
    }
    std::partial_sum(pattern->row_offsets.begin(), pattern->row_offsets.end(),
                     pattern->row_offsets.begin());
    return CsrMatrix(std::move(pattern), std::move(out_values));
}

CsrMatrix CsrMatrix::identity(std::size_t n) {
    auto pattern = std::make_shared<CsrPattern>();
    pattern->rows = pattern->cols = n;
    pattern->row_offsets.resize(n + 1);
    pattern->col_indices.resize(n);
    std::iota(pattern->row_offsets.begin(), pattern->row_offsets.end(), std::size_t{0});
    std::iota(pattern->col_indices.begin(), pattern->col_indices.end(), std::size_t{0});
    return CsrMatrix(std::move(pattern), std::vector<Real>(n, 1.0));
}

CsrMatrix CsrMatrix::from_dense(const Matrix& dense) {
    auto pattern = std::make_shared<CsrPattern>();
    pattern->rows = dense.rows();
    pattern->cols = dense.cols();
    pattern->row_offsets.assign(dense.rows() + 1, 0);
    std::vector<Real> values;
    for (std::size_t r = 0; r < dense.rows(); ++r) {
        for (std::size_t c = 0; c < dense.cols(); ++c) {
            if (dense(r, c) != 0.0) {
                pattern->col_indices.push_back(c);
                values.push_back(dense(r, c));
            }
        }
        pattern->row_offsets[r + 1] = values.size();
    }
    return CsrMatrix(std::move(pattern), std::move(values));
}

Real CsrMatrix::at(std::size_t r, std::size_t c) const noexcept {
    const std::size_t e = pattern_->find(r, c);
    return e == nnz() ? 0.0 : values_[e];
}

Matrix CsrMatrix::to_dense() const {
    Matrix out(rows(), cols());
    const auto& p = *pattern_;
    for (std::size_t r = 0; r < p.rows; ++r) {
        for (std::size_t e = p.row_offsets[r]; e < p.row_offsets[r + 1]; ++e) {
            out(r, p.col_indices[e]) = values_[e];
        }
    }
    return out;
}

CsrMatrix CsrMatrix::transpose() const {
    const auto& p = *pattern_;
    auto t = std::make_shared<CsrPattern>();
    t->rows = p.cols;
    t->cols = p.rows;
    t->row_offsets.assign(p.cols + 1, 0);
    t->col_indices.resize(p.nnz());
    std::vector<Real> values(p.nnz());
    for (std::size_t c : p.col_indices) ++t->row_offsets[c + 1];
    std::partial_sum(t->row_offsets.begin(), t->row_offsets.end(), t->row_offsets.begin());
    std::vector<std::size_t> cursor(t->row_offsets.begin(), t->row_offsets.end() - 1);
    for (std::size_t r = 0; r < p.rows; ++r) {
        for (std::size_t e = p.row_offsets[r]; e < p.row_offsets[r + 1]; ++e) {
            const std::size_t dst = cursor[p.col_indices[e]]++;
            t->col_indices[dst] = r;
            values[dst] = values_[e];
        }
    }
    return CsrMatrix(std::move(t), std::move(values));
}

bool operator==(const CsrMatrix& a, const CsrMatrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           a.pattern().row_offsets == b.pattern().row_offsets &&
           a.pattern().col_indices == b.pattern().col_indices && a.values_ == b.values_;
}

}  // namespace capgnn
