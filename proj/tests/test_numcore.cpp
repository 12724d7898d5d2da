#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "capgnn/errors.hpp"
#include "capgnn/matrix.hpp"
#include "capgnn/rng.hpp"
#include "capgnn/tape.hpp"
#include "test_util.hpp"

using namespace capgnn;
using capgnn::test::fd_max_rel_error;
using capgnn::test::max_abs_diff;
using capgnn::test::random_matrix;

namespace {

Matrix run_op(const std::function<Var(Tape&)>& f) {
    Tape t;
    return f(t).value();
}

CsrMatrix random_sparse(std::size_t rows, std::size_t cols, double density, SeededRng& rng) {
    std::vector<std::size_t> r, c;
    std::vector<Real> v;
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            if (rng.bernoulli(density)) {
                r.push_back(i);
                c.push_back(j);
                v.push_back(rng.uniform(-1, 1));
            }
        }
    }
    return CsrMatrix::from_triplets(rows, cols, r, c, v);
}

}  // namespace

TEST(Matrix, FromRowsAndIdentity) {
    const Matrix m = Matrix::from_rows({{1, 2}, {3, 4}});
    EXPECT_EQ(m.rows(), 2u);
    EXPECT_EQ(m(1, 0), 3.0);
    EXPECT_EQ(Matrix::identity(2), Matrix::from_rows({{1, 0}, {0, 1}}));
    EXPECT_THROW(Matrix::from_rows({{1, 2}, {3}}), ShapeError);
}

TEST(Csr, TripletsAreCanonicalAndDuplicatesKeepMax) {
    const CsrMatrix s = CsrMatrix::from_triplets(3, 3, {2, 0, 0, 2}, {1, 2, 2, 1}, {1.0, 0.5, 0.7, 3.0});
    EXPECT_TRUE(s.pattern().is_canonical());
    EXPECT_EQ(s.nnz(), 2u);
    EXPECT_EQ(s.at(0, 2), 0.7);
    EXPECT_EQ(s.at(2, 1), 3.0);
    EXPECT_EQ(s.at(1, 1), 0.0);
    EXPECT_EQ(s.pattern().find(1, 1), s.nnz());
    EXPECT_THROW(CsrMatrix::from_triplets(2, 2, {2}, {0}, {1.0}), ShapeError);
}

TEST(Csr, TransposeAndDense) {
    SeededRng rng(1, 0);
    const CsrMatrix s = random_sparse(4, 6, 0.4, rng);
    const Matrix d = s.to_dense();
    const Matrix dt = s.transpose().to_dense();
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(d(i, j), dt(j, i));
    }
    EXPECT_EQ(CsrMatrix::from_dense(d), s);
}

TEST(Matmul, Examples) {
    const Matrix m = Matrix::from_rows({{1, 2}, {3, 4}});
    EXPECT_EQ(kernels::matmul(Matrix::identity(2), m), m);
    EXPECT_EQ(kernels::matmul(m, Matrix::from_rows({{0}, {1}})), Matrix::from_rows({{2}, {4}}));
    Tape t;
    EXPECT_THROW(ops::matmul(t.constant(Matrix(2, 3)), t.constant(Matrix(2, 3))), ShapeError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    SeededRng rng(2, 0);
    const Real err = fd_max_rel_error(
        [](Tape&, std::span<const Var> v) { return ops::sum(ops::matmul(v[0], v[1])); },
        {random_matrix(5, 4, rng), random_matrix(4, 3, rng)});
    EXPECT_LT(err, 1e-4);
}

TEST(Spmm, Examples) {
    const Matrix m = Matrix::from_rows({{1, 2}, {3, 4}});
    Tape t;
    EXPECT_EQ(ops::spmm(sparse_constant(t, CsrMatrix::identity(2)), t.constant(m)).value(), m);
    const CsrMatrix half = CsrMatrix::from_dense(Matrix::from_rows({{.5, .5}, {.5, .5}}));
    EXPECT_EQ(ops::spmm(sparse_constant(t, half), t.constant(Matrix::identity(2))).value(),
              Matrix::from_rows({{.5, .5}, {.5, .5}}));
    EXPECT_THROW(ops::spmm(sparse_constant(t, half), t.constant(Matrix(3, 1))), ShapeError);
}

TEST(Spmm, EqualsDenseProductOnRandomShapes) {
    SeededRng rng(3, 0);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t r = 1 + rng.below(12), c = 1 + rng.below(12), k = 1 + rng.below(6);
        const CsrMatrix s = random_sparse(r, c, trial == 0 ? 0.3 : rng.uniform(), rng);
        const Matrix d = random_matrix(c, k, rng);
        const Matrix sp = kernels::spmm(s.pattern(), s.values(), d);
        EXPECT_LT(max_abs_diff(sp, kernels::matmul(s.to_dense(), d)), 1e-10);
        const Matrix g = random_matrix(r, k, rng);
        EXPECT_LT(max_abs_diff(kernels::spmm_transposed(s.pattern(), s.values(), g),
                               kernels::matmul(s.transpose().to_dense(), g)),
                  1e-10);
    }
}

TEST(Spmm, GradientsForDenseAndValues) {
    SeededRng rng(4, 0);
    const CsrMatrix s = random_sparse(6, 5, 0.4, rng);
    const auto pattern = s.shared_pattern();
    const Matrix w = random_matrix(6, 3, rng);
    Matrix values(s.nnz(), 1, std::vector<Real>(s.values().begin(), s.values().end()));
    const Real err = fd_max_rel_error(
        [&](Tape& t, std::span<const Var> v) {
            return ops::sum(ops::mul(ops::spmm(SparseVar{pattern, v[0]}, v[1]), t.constant(w)));
        },
        {values, random_matrix(5, 3, rng)});
    EXPECT_LT(err, 1e-4);
}

TEST(Elementwise, Examples) {
    const Matrix relu = run_op([](Tape& t) { return ops::relu(t.constant(Matrix::from_rows({{-1, 0, 2}}))); });
    EXPECT_EQ(relu, Matrix::from_rows({{0, 0, 2}}));
    const Matrix leaky = run_op([](Tape& t) { return ops::leaky_relu(t.constant(Matrix::from_rows({{-1, 2}})), 0.2); });
    EXPECT_DOUBLE_EQ(leaky[0], -0.2);
    EXPECT_DOUBLE_EQ(leaky[1], 2.0);
    const Matrix zero = run_op([](Tape& t) { return ops::scale(t.constant(Matrix(2, 3, 5.0)), 0.0); });
    EXPECT_EQ(zero, Matrix(2, 3));
    Tape t;
    EXPECT_THROW(ops::add(t.constant(Matrix(2, 2)), t.constant(Matrix(2, 3))), ShapeError);
    EXPECT_THROW(ops::sub(t.constant(Matrix(2, 2)), t.constant(Matrix(3, 2))), ShapeError);
    EXPECT_THROW(ops::log(t.constant(Matrix::from_rows({{1.0, 0.0}}))), DomainError);
    EXPECT_THROW(ops::log(t.constant(Matrix::from_rows({{-2.0}}))), DomainError);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
    SeededRng rng(5, 0);
    const std::vector<std::pair<const char*, std::function<Var(Var)>>> unary = {
        {"relu", [](Var a) { return ops::relu(a); }},
        {"leaky_relu", [](Var a) { return ops::leaky_relu(a, 0.2); }},
        {"exp", [](Var a) { return ops::exp(a); }},
        {"scale", [](Var a) { return ops::scale(a, -2.5); }},
        {"softmax_rows", [](Var a) { return ops::softmax_rows(a); }},
        {"log_softmax_rows", [](Var a) { return ops::log_softmax_rows(a); }},
        {"l2_normalize_rows", [](Var a) { return ops::l2_normalize_rows(a); }},
    };
    for (const auto& [name, op] : unary) {
        const Matrix w = random_matrix(6, 8, rng);
        const Real err = fd_max_rel_error(
            [&, op = op](Tape& t, std::span<const Var> v) { return ops::sum(ops::mul(op(v[0]), t.constant(w))); },
            {random_matrix(6, 8, rng)});
        EXPECT_LT(err, 1e-4) << name;
    }
    const Real log_err = fd_max_rel_error([](Tape&, std::span<const Var> v) { return ops::sum(ops::log(v[0])); },
                                          {random_matrix(3, 3, rng, 0.5, 2.0)});
    EXPECT_LT(log_err, 1e-4);
    const Real bin_err = fd_max_rel_error(
        [](Tape&, std::span<const Var> v) {
            return ops::sum(ops::mul(ops::add(v[0], v[1]), ops::sub(v[0], ops::add_row_bias(v[1], v[2]))));
        },
        {random_matrix(3, 4, rng), random_matrix(3, 4, rng), random_matrix(1, 4, rng)});
    EXPECT_LT(bin_err, 1e-4);
}

TEST(Softmax, Examples) {
    const Matrix u = kernels::softmax_rows(Matrix(1, 10));
    for (Real v : u.values()) EXPECT_DOUBLE_EQ(v, 0.1);
    const Matrix a = kernels::softmax_rows(Matrix::from_rows({{std::log(2.0), 0.0}}));
    EXPECT_NEAR(a[0], 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(a[1], 1.0 / 3.0, 1e-12);
    const Matrix b = kernels::softmax_rows(Matrix::from_rows({{-0.2, 0.0}}));
    EXPECT_NEAR(b[0], 0.450166, 1e-5);
    EXPECT_NEAR(b[1], 0.549834, 1e-5);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
    SeededRng rng(6, 0);
    for (int trial = 0; trial < 50; ++trial) {
        Matrix x = random_matrix(4, 1 + rng.below(9), rng, -30, 30);
        const Matrix s = kernels::softmax_rows(x);
        for (std::size_t r = 0; r < x.rows(); ++r) {
            const auto row = s.row(r);
            EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-9);
            for (Real v : row) EXPECT_GE(v, 0.0);
        }
        const Real shift = rng.uniform(-100, 100);
        for (Real& v : x.values()) v += shift;
        EXPECT_LT(max_abs_diff(kernels::softmax_rows(x), s), 1e-9);
    }
    const Matrix huge = kernels::softmax_rows(Matrix::from_rows({{1000.0, 0.0}}));
    EXPECT_TRUE(huge.all_finite());
}

TEST(L2Normalize, Examples) {
    const Matrix a = kernels::l2_normalize_rows(Matrix::from_rows({{3, 4}}));
    EXPECT_DOUBLE_EQ(a[0], 0.6);
    EXPECT_DOUBLE_EQ(a[1], 0.8);
    const Matrix unit = Matrix::from_rows({{0, 1, 0}});
    EXPECT_EQ(kernels::l2_normalize_rows(unit), unit);
    const Matrix zero = kernels::l2_normalize_rows(Matrix(1, 3));
    EXPECT_TRUE(zero.all_finite());
    SeededRng rng(7, 0);
    const Matrix n = kernels::l2_normalize_rows(random_matrix(6, 8, rng));
    for (std::size_t r = 0; r < 6; ++r) {
        Real s = 0;
        for (Real v : n.row(r)) s += v * v;
        EXPECT_NEAR(std::sqrt(s), 1.0, 1e-9);
    }
}

TEST(Dropout, RateZeroAndEvalAreIdentity) {
    SeededRng rng(8, 0);
    const Matrix x = random_matrix(20, 20, rng);
    EXPECT_EQ(dropout_dense(x, 0.0, rng, true), x);
    EXPECT_EQ(dropout_dense(x, 0.7, rng, false), x);
    const CsrMatrix s = random_sparse(20, 20, 0.3, rng);
    EXPECT_EQ(dropout_sparse(s, 0.0, rng, true), s);
    EXPECT_EQ(dropout_sparse(s, 0.4, rng, false), s);
    Tape t;
    const Var v = t.constant(x);
    EXPECT_EQ(ops::dropout(v, 0.5, rng, false).value(), x);
}

TEST(Dropout, InvalidRateIsConfigError) {
    SeededRng rng(9, 0);
    EXPECT_THROW(dropout_dense(Matrix(2, 2), 1.0, rng, true), ConfigError);
    EXPECT_THROW(dropout_dense(Matrix(2, 2), -0.1, rng, true), ConfigError);
    EXPECT_THROW(dropout_sparse(CsrMatrix::identity(2), 1.5, rng, true), ConfigError);
}

TEST(Dropout, DenseStatistics) {
    SeededRng rng(10, 0);
    const Matrix out = dropout_dense(Matrix(100, 100, 2.0), 0.5, rng, true);
    std::size_t zeros = 0;
    Real sum = 0;
    for (Real v : out.values()) {
        zeros += v == 0.0;
        sum += v;
        EXPECT_TRUE(v == 0.0 || v == 4.0);
    }
    const Real mean = sum / 10000.0;
    EXPECT_GE(mean, 1.9);
    EXPECT_LE(mean, 2.1);
    EXPECT_GE(zeros / 10000.0, 0.47);
    EXPECT_LE(zeros / 10000.0, 0.53);
}

TEST(Dropout, SparseStatisticsKeepStructure) {
    SeededRng rng(11, 0);
    std::vector<std::size_t> r, c;
    for (std::size_t i = 0; i < 1000; ++i) {
        r.push_back(i / 40);
        c.push_back(i % 40);
    }
    const CsrMatrix s = CsrMatrix::from_triplets(25, 40, r, c, std::vector<Real>(1000, 1.0));
    const CsrMatrix d = dropout_sparse(s, 0.3, rng, true);
    EXPECT_EQ(d.shared_pattern(), s.shared_pattern());
    std::size_t kept = 0;
    for (Real v : d.values()) {
        if (v != 0.0) {
            ++kept;
            EXPECT_NEAR(v, 1.0 / 0.7, 1e-9);
        }
    }
    EXPECT_NEAR(kept / 1000.0, 0.7, 0.05);
}

TEST(StopGradient, BlocksGradient) {
    SeededRng rng(12, 0);
    const Matrix x = random_matrix(3, 4, rng);
    {
        Tape t;
        const Var v = t.leaf(x);
        const Var s = ops::stop_gradient(v);
        EXPECT_EQ(s.value(), x);
        t.backward(ops::sum(s));
        EXPECT_EQ(t.grad(v), Matrix(3, 4));
    }
    {
        Tape t;
        const Var v = t.leaf(x);
        t.backward(ops::sum(ops::mul(v, ops::stop_gradient(v))));
        EXPECT_EQ(t.grad(v), x);
    }
}

TEST(BatchNorm, Examples) {
    Tape t;
    const Var gamma = t.constant(Matrix(1, 2, 1.0));
    const Var beta = t.constant(Matrix(1, 2, 0.0));
    const auto constant_col = ops::batch_norm_train(t.constant(Matrix::from_rows({{3, -1}, {3, 1}})), gamma, beta);
    EXPECT_EQ(constant_col.out.value()(0, 0), 0.0);
    EXPECT_EQ(constant_col.out.value()(1, 0), 0.0);
    EXPECT_NEAR(constant_col.out.value()(0, 1), -1.0 / std::sqrt(1.0 + 1e-5), 1e-12);
    EXPECT_NEAR(constant_col.out.value()(1, 1), 1.0 / std::sqrt(1.0 + 1e-5), 1e-12);
}

TEST(BatchNorm, StandardizesColumns) {
    SeededRng rng(13, 0);
    Tape t;
    const auto bn = ops::batch_norm_train(t.constant(random_matrix(50, 4, rng, -3, 5)), t.constant(Matrix(1, 4, 1.0)),
                                          t.constant(Matrix(1, 4, 0.0)));
    const Matrix& y = bn.out.value();
    for (std::size_t c = 0; c < 4; ++c) {
        Real m = 0, v = 0;
        for (std::size_t r = 0; r < 50; ++r) m += y(r, c);
        m /= 50;
        for (std::size_t r = 0; r < 50; ++r) v += (y(r, c) - m) * (y(r, c) - m);
        v /= 50;
        EXPECT_NEAR(m, 0.0, 1e-6);
        EXPECT_NEAR(v, 1.0, 1e-3);
    }
    const Real err = fd_max_rel_error(
        [w = random_matrix(7, 3, rng)](Tape& tape, std::span<const Var> v) {
            return ops::sum(ops::mul(ops::batch_norm_train(v[0], v[1], v[2]).out, tape.constant(w)));
        },
        {random_matrix(7, 3, rng), random_matrix(1, 3, rng, 0.5, 1.5), random_matrix(1, 3, rng)});
    EXPECT_LT(err, 1e-4);
}

TEST(Backward, SumOfWeightsGivesOnes) {
    Tape t;
    const Var w = t.leaf(Matrix(3, 3, 0.3));
    t.backward(ops::sum(w));
    EXPECT_EQ(t.grad(w), Matrix(3, 3, 1.0));
}

TEST(Backward, RootMustBeScalarAndTapeSingleUse) {
    Tape t;
    const Var w = t.leaf(Matrix(2, 2, 1.0));
    EXPECT_THROW(t.backward(w), ShapeError);
    const Var root = ops::sum(w);
    t.backward(root);
    EXPECT_ANY_THROW(t.backward(root));
}

TEST(Backward, SharedSubexpressionsAccumulate) {
    Tape t;
    const Var x = t.leaf(Matrix::from_rows({{2.0}}));
    const Var y = ops::mul(x, x);
    t.backward(ops::sum(ops::add(y, ops::scale(x, 3.0))));
    EXPECT_DOUBLE_EQ(t.grad(x)[0], 7.0);
}

TEST(Rng, DeterministicStreams) {
    SeededRng a(42, 7), b(42, 7), c(42, 8);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const Real x = a.uniform();
        EXPECT_EQ(x, b.uniform());
        differs |= x != c.uniform();
        EXPECT_GE(x, 0.0);
        EXPECT_LT(x, 1.0);
    }
    EXPECT_TRUE(differs);
    SeededRng d1 = SeededRng::derive(1, 2, 3), d2 = SeededRng::derive(1, 2, 3), d3 = SeededRng::derive(1, 3, 2);
    EXPECT_EQ(d1.next_u64(), d2.next_u64());
    EXPECT_NE(SeededRng::derive(1, 2, 3).next_u64(), d3.next_u64());
}

TEST(Rng, IdenticalForwardValues) {
    auto forward = [] {
        SeededRng rng(99, 1);
        Tape t;
        const Var x = t.constant(Matrix(30, 30, 1.0));
        return ops::dropout(ops::exp(x), 0.4, rng, true).value();
    };
    EXPECT_EQ(forward(), forward());
}
