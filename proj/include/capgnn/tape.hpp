#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "capgnn/matrix.hpp"
#include "capgnn/rng.hpp"

namespace capgnn {

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

    Tape* tape() const noexcept { return tape_; }
    std::size_t index() const noexcept { return index_; }
    bool valid() const noexcept { return tape_ != nullptr; }

    const Matrix& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    bool requires_grad() const;

private:
    Tape* tape_ = nullptr;
    std::size_t index_ = 0;
};

/// Reverse-mode autodiff tape.
///
/// Single-use: record one forward pass, call backward() once on a scalar root,
/// read gradients of the leaves. Nodes are appended in evaluation order, so the
/// recording order is already topological.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Value that never receives a gradient.
    Var constant(Matrix value);
    /// Differentiable input (a parameter bound for this forward).
    Var leaf(Matrix value);
    /// Records an op output. `backward` is dropped when no input requires a gradient.
    Var record(Matrix value, std::span<const Var> inputs, BackwardFn backward);

    const Matrix& value(Var v) const { return nodes_.at(v.index()).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.index()).requires_grad; }
    /// Gradient after backward(); an all-zero matrix when nothing reached the node.
    const Matrix& grad(Var v);
    bool has_grad(Var v) const { return !nodes_.at(v.index()).grad.empty(); }

    /// Accumulates `g` into the gradient of `v` (no-op for constants).
    void accumulate(Var v, const Matrix& g);
    void accumulate(Var v, Matrix&& g);

    /// Reverse sweep from a 1x1 root, seeding d(root)/d(root) = 1.
    void backward(Var root);

    std::size_t node_count() const noexcept { return nodes_.size(); }
    const Matrix& node_value(std::size_t i) const { return nodes_.at(i).value; }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

/// A CSR matrix whose values live on a tape as an nnz x 1 column.
struct SparseVar {
    std::shared_ptr<const CsrPattern> pattern;
    Var values;

    std::size_t rows() const { return pattern->rows; }
    std::size_t cols() const { return pattern->cols; }
    std::size_t nnz() const { return pattern->nnz(); }
};

SparseVar sparse_constant(Tape& tape, const CsrMatrix& m);
SparseVar sparse_leaf(Tape& tape, const CsrMatrix& m);
CsrMatrix sparse_value(const SparseVar& s);

namespace ops {

Var matmul(Var a, Var b);
/// Sparse x dense product; differentiable w.r.t. both the dense operand and the sparse values.
Var spmm(const SparseVar& s, Var d);

Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise (Hadamard) product.
Var mul(Var a, Var b);
Var scale(Var a, Real c);
/// Adds a 1 x cols row vector to every row.
Var add_row_bias(Var a, Var bias);
/// Multiplies a matrix by a 1x1 node.
Var scale_by(Var a, Var scalar);
/// Entry (r, c) as a 1x1 node.
Var element(Var a, std::size_t r, std::size_t c);

Var relu(Var a);
Var leaky_relu(Var a, Real slope);
Var exp(Var a);
/// Throws DomainError if any entry is <= 0.
Var log(Var a);

Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
/// Rows divided by max(||row||_2, 1e-12).
Var l2_normalize_rows(Var a);

/// Inverted dropout: each entry is zeroed with probability `rate`, survivors scaled by
/// 1/(1-rate). Identity when `training` is false or `rate` is 0.
Var dropout(Var a, Real rate, SeededRng& rng, bool training);
/// Dropout over the stored values only; the pattern is unchanged.
SparseVar dropout(const SparseVar& s, Real rate, SeededRng& rng, bool training);

/// Forward identity; no gradient flows back through it.
Var stop_gradient(Var a);

/// Sum of all entries (1x1).
Var sum(Var a);
/// Mean over the listed (row, cols[row]) entries (1x1).
Var gather_mean(Var a, std::span<const std::size_t> rows, std::span<const int> cols);

/// Per-entry edge score src[row] + dst[col] for every stored entry of `pattern`.
Var edge_scores(const std::shared_ptr<const CsrPattern>& pattern, Var src, Var dst);
/// Softmax over the stored entries of each CSR row; `values` is nnz x 1.
Var segment_softmax(const std::shared_ptr<const CsrPattern>& pattern, Var values);

struct BatchNormOutput {
    Var out;
    Matrix batch_mean;  // 1 x cols
    Matrix batch_var;   // 1 x cols, biased
};
/// Training-mode batch normalization over rows (per-column statistics).
BatchNormOutput batch_norm_train(Var x, Var gamma, Var beta, Real eps = 1e-5);
/// Eval-mode batch normalization against fixed running statistics.
Var batch_norm_eval(Var x, Var gamma, Var beta, const Matrix& running_mean,
                    const Matrix& running_var, Real eps = 1e-5);

}  // namespace ops

/// Pure kernels shared by op forwards and by off-tape computations.
namespace kernels {
Matrix matmul(const Matrix& a, const Matrix& b);
/// a^T b without forming a^T.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a b^T without forming b^T.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix spmm(const CsrPattern& p, std::span<const Real> values, const Matrix& d);
Matrix spmm_transposed(const CsrPattern& p, std::span<const Real> values, const Matrix& d);
Matrix softmax_rows(const Matrix& a);
Matrix l2_normalize_rows(const Matrix& a);
/// Inverted-dropout keep mask scaled by 1/(1-rate); consumes one uniform draw per entry.
std::vector<Real> dropout_mask(std::size_t n, Real rate, SeededRng& rng);
}  // namespace kernels

/// Plain-value dropout on CSR values (structure unchanged, dropped entries stored as zeros).
CsrMatrix dropout_sparse(const CsrMatrix& s, Real rate, SeededRng& rng, bool training);
Matrix dropout_dense(const Matrix& x, Real rate, SeededRng& rng, bool training);

namespace testing {
/// Perturbs the matmul backward rule so gradient checks can be shown to fail.
void set_matmul_backward_fault(bool enabled);
bool matmul_backward_fault();
/// While enabled, relu and leaky_relu fold the sign pattern of their inputs into a
/// per-thread signature, so finite-difference probes can tell when they straddle a kink.
void set_kink_tracking(bool enabled);
/// Returns the signature accumulated since the last call and resets it.
std::uint64_t take_kink_signature();
}  // namespace testing

}  // namespace capgnn
