#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "capgnn/errors.hpp"
#include "capgnn/graph.hpp"
#include "capgnn/propagation.hpp"
#include "capgnn/synthetic.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace capgnn;
using capgnn::test::max_abs_diff;
using capgnn::test::random_matrix;
using capgnn::oracle::dense_polynomial;
using capgnn::oracle::random_simplex;

namespace {

Matrix run_propagate(const CsrMatrix& A, const Matrix& h0, const std::vector<Real>& s, PropagationParams p,
                     bool training = false, std::uint64_t seed = 0) {
    Tape t;
    SeededRng rng(seed, 0);
    return propagate(sparse_constant(t, A), t.constant(h0), p, t.constant(Matrix(1, s.size(), s)), rng, training)
        .value();
}

}  // namespace

TEST(CoefficientAttention, Examples) {
    const auto u = coefficient_attention(std::vector<Real>(10, 0.0));
    for (Real v : u) EXPECT_EQ(v, 0.1);
    const auto a = coefficient_attention(std::vector<Real>{std::log(2.0), 0.0});
    EXPECT_NEAR(a[0], 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(a[1], 1.0 / 3.0, 1e-12);
    const auto b = coefficient_attention(std::vector<Real>{-1.0, 0.0});
    EXPECT_NEAR(b[0], 0.450166, 1e-6);
    EXPECT_NEAR(b[1], 0.549834, 1e-6);
    Tape t;
    const Matrix tape_b = coefficient_attention(t.constant(Matrix::from_rows({{-1.0, 0.0}}))).value();
    EXPECT_EQ(tape_b[0], b[0]);
    EXPECT_EQ(tape_b[1], b[1]);
}

TEST(Propagate, FullTeleportIsIdentity) {
    SeededRng rng(1, 0);
    const GraphDataset g = random_graph(10, 2, 2, 0.3, 1);
    const Matrix h0 = random_matrix(10, 3, rng);
    PropagationParams p;
    p.alpha = 1.0;
    p.K = 5;
    EXPECT_LT(max_abs_diff(run_propagate(gcn_affinity(g.adjacency), h0, random_simplex(5, rng), p), h0), 1e-15);
}

TEST(Propagate, SingleStep) {
    SeededRng rng(2, 0);
    const GraphDataset g = random_graph(8, 2, 2, 0.4, 2);
    const CsrMatrix A = gcn_affinity(g.adjacency);
    const Matrix h0 = random_matrix(8, 2, rng);
    PropagationParams p;
    p.alpha = 0.3;
    p.K = 1;
    Matrix expected = kernels::matmul(A.to_dense(), h0);
    for (std::size_t i = 0; i < expected.size(); ++i) expected[i] = 0.7 * expected[i] + 0.3 * h0[i];
    EXPECT_LT(max_abs_diff(run_propagate(A, h0, {1.0}, p), expected), 1e-14);
}

TEST(Propagate, EqualsDensePolynomialOnRandomGraphs) {
    SeededRng rng(3, 0);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 3 + rng.below(18);
        const GraphDataset g = random_graph(n, 2, 2, rng.uniform(0.1, 0.7), rng.next_u64());
        const CsrMatrix A = gcn_affinity(g.adjacency);
        PropagationParams p;
        p.K = trial == 0 ? 4 : 1 + rng.below(8);
        p.alpha = rng.uniform(0.01, 1.0);
        const std::vector<Real> s = random_simplex(p.K, rng);
        const Matrix h0 = random_matrix(n, 1 + rng.below(4), rng);
        EXPECT_LT(max_abs_diff(run_propagate(A, h0, s, p), dense_polynomial(A.to_dense(), h0, s, p.alpha)), 1e-8);
    }
}

TEST(Propagate, UniformAttentionAtInitEqualsFixedCoefficients) {
    SeededRng rng(4, 0);
    const GraphDataset g = random_graph(15, 2, 2, 0.3, 4);
    const CsrMatrix A = gcn_affinity(g.adjacency);
    const Matrix h0 = random_matrix(15, 3, rng);
    PropagationParams p;
    p.K = 10;
    Tape t;
    SeededRng r(0, 0);
    const Var s = coefficient_attention(t.constant(Matrix(1, 10)));
    const Matrix learned = propagate(sparse_constant(t, A), t.constant(h0), p, s, r, false).value();
    EXPECT_LT(max_abs_diff(learned, run_propagate(A, h0, std::vector<Real>(10, 0.1), p)), 1e-10);
}

TEST(Propagate, DropoutIsDeterministicPerStreamAndEvalIgnoresIt) {
    SeededRng rng(5, 0);
    const GraphDataset g = random_graph(12, 2, 2, 0.3, 5);
    const CsrMatrix A = gcn_affinity(g.adjacency);
    const Matrix h0 = random_matrix(12, 3, rng);
    PropagationParams p;
    p.K = 4;
    p.edge_dropout = 0.5;
    p.coef_dropout = 0.3;
    const std::vector<Real> s(4, 0.25);
    EXPECT_EQ(run_propagate(A, h0, s, p, true, 7), run_propagate(A, h0, s, p, true, 7));
    EXPECT_NE(run_propagate(A, h0, s, p, true, 7), run_propagate(A, h0, s, p, true, 8));
    PropagationParams off = p;
    off.edge_dropout = 0.0;
    off.coef_dropout = 0.0;
    EXPECT_EQ(run_propagate(A, h0, s, p, false), run_propagate(A, h0, s, off, false));
}

TEST(Propagate, GradientsMatchFiniteDifferences) {
    SeededRng rng(6, 0);
    const GraphDataset g = random_graph(9, 2, 2, 0.4, 6);
    const CsrMatrix A = gcn_affinity(g.adjacency);
    PropagationParams p;
    p.K = 5;
    p.alpha = 0.2;
    const Matrix w = random_matrix(9, 3, rng);
    const Real err = test::fd_max_rel_error(
        [&](Tape& t, std::span<const Var> v) {
            SeededRng r(0, 0);
            const Var s = coefficient_attention(v[1]);
            return ops::sum(ops::mul(propagate(sparse_constant(t, A), v[0], p, s, r, false), t.constant(w)));
        },
        {random_matrix(9, 3, rng), random_matrix(1, 5, rng)});
    EXPECT_LT(err, 1e-4);
}

TEST(Propagate, NoDenseVertexSquaredBuffer) {
    SeededRng rng(7, 0);
    const std::size_t n = 300;
    const GraphDataset g = csbm({.num_vertices = n, .num_classes = 3, .num_features = 9, .train_per_class = 1,
                                 .num_val = 10, .num_test = 10},
                                7);
    const CsrMatrix A = gcn_affinity(g.adjacency);
    PropagationParams p;
    p.K = 10;
    p.edge_dropout = 0.2;
    p.coef_dropout = 0.2;
    Tape t;
    SeededRng r(1, 1);
    const Var h0 = t.leaf(random_matrix(n, 4, rng));
    const Var s = coefficient_attention(t.leaf(Matrix(1, 10)));
    const std::size_t before = t.node_count();
    const Var out = propagate(sparse_constant(t, A), h0, p, s, r, true);
    t.backward(ops::sum(out));
    const std::size_t limit = std::max(A.nnz(), n * 4);
    for (std::size_t i = before; i < t.node_count(); ++i) EXPECT_LE(t.node_value(i).size(), limit);
    EXPECT_LT(limit, n * n);
}

TEST(Propagate, ShapeErrors) {
    Tape t;
    SeededRng r(0, 0);
    PropagationParams p;
    p.K = 2;
    const SparseVar A = sparse_constant(t, CsrMatrix::identity(3));
    EXPECT_THROW(propagate(A, t.constant(Matrix(4, 2)), p, t.constant(Matrix(1, 2, 0.5)), r, false), ShapeError);
    EXPECT_THROW(propagate(A, t.constant(Matrix(3, 2)), p, t.constant(Matrix(1, 3, 0.5)), r, false), ShapeError);
    p.alpha = 0.0;
    EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Sharpen, Examples) {
    SeededRng rng(8, 0);
    const Matrix x = random_matrix(5, 4, rng, -3, 3);
    EXPECT_EQ(sharpen(x, 1.0), kernels::softmax_rows(x));
    const Matrix u = sharpen(Matrix(2, 4, 1.5), 0.3);
    for (Real v : u.values()) EXPECT_DOUBLE_EQ(v, 0.25);
    const Matrix s = sharpen(Matrix::from_rows({{2.0, 0.0}}), 0.5);
    EXPECT_NEAR(s[0], 0.98201, 1e-5);
    EXPECT_NEAR(s[1], 0.01799, 1e-5);
    EXPECT_THROW(sharpen(x, 0.0), ConfigError);
    EXPECT_THROW(sharpen(x, 1.5), ConfigError);
    Tape t;
    EXPECT_EQ(sharpen(t.constant(x), 0.5).value(), sharpen(x, 0.5));
}

TEST(Coefficients, Examples) {
    const auto c = expand_coefficients(std::vector<Real>{0.5, 0.5}, 0.1);
    ASSERT_EQ(c.size(), 3u);
    EXPECT_NEAR(c[0], 0.1, 1e-15);
    EXPECT_NEAR(c[1], 0.495, 1e-15);
    EXPECT_NEAR(c[2], 0.405, 1e-15);
    const auto one = expand_coefficients(std::vector<Real>{0.2, 0.3, 0.5}, 1.0);
    EXPECT_EQ(one, (std::vector<Real>{1.0, 0.0, 0.0, 0.0}));
    const auto a1 = appnp_coefficients(0.1, 1);
    EXPECT_NEAR(a1[0], 0.1, 1e-15);
    EXPECT_NEAR(a1[1], 0.9, 1e-15);
    const auto a10 = appnp_coefficients(0.1, 10);
    EXPECT_NEAR(a10[10], 0.34868, 1e-5);
    EXPECT_EQ(*std::max_element(a10.begin(), a10.end()), a10[10]);
}

TEST(Coefficients, MatchBruteForceExpansionOnMatrix) {
    // Coefficients reproduce sum_k s_k U(k) applied to a sample matrix.
    SeededRng rng(9, 0);
    const GraphDataset g = random_graph(7, 2, 2, 0.4, 9);
    const Matrix A = gcn_affinity(g.adjacency).to_dense();
    const std::vector<Real> s = random_simplex(4, rng);
    const Real alpha = 0.25;
    const auto c = expand_coefficients(s, alpha);
    const Matrix I = Matrix::identity(7);
    Matrix poly(7, 7), power = I;
    for (std::size_t k = 0; k < c.size(); ++k) {
        for (std::size_t i = 0; i < 49; ++i) poly[i] += c[k] * power[i];
        power = kernels::matmul(power, A);
    }
    EXPECT_LT(max_abs_diff(kernels::matmul(poly, I), dense_polynomial(A, I, s, alpha)), 1e-12);
}

TEST(Coefficients, SumToOneAndPositive) {
    SeededRng rng(10, 0);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t K = 1 + rng.below(20);
        const Real alpha = trial % 10 == 0 ? 1.0 : rng.uniform(1e-3, 1.0);
        const auto s = random_simplex(K, rng);
        const auto c = expand_coefficients(s, alpha);
        EXPECT_NEAR(std::accumulate(c.begin(), c.end(), 0.0), 1.0, 1e-12);
        if (alpha < 1.0) {
            for (Real v : c) EXPECT_GT(v, 0.0);
        }
        std::vector<Real> last(K, 0.0);
        last[K - 1] = 1.0;
        EXPECT_EQ(expand_coefficients(last, alpha), appnp_coefficients(alpha, K));
    }
}

TEST(Eigenvalues, Examples) {
    SeededRng rng(11, 0);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t K = 1 + rng.below(10);
        EXPECT_NEAR(capgnn_eigenvalue(1.0, random_simplex(K, rng), rng.uniform(0.05, 1.0)), 1.0, 1e-12);
        EXPECT_NEAR(appnp_eigenvalue(1.0, rng.uniform(0.05, 1.0), K), 1.0, 1e-12);
    }
    EXPECT_NEAR(appnp_eigenvalue_limit(0.5, 0.1), 0.181818, 1e-6);
    EXPECT_NEAR(appnp_eigenvalue(0.5, 0.1, 200), 0.1 / 0.55, 1e-9);
    const std::vector<Real> uniform(200, 1.0 / 200);
    EXPECT_LT(std::abs(capgnn_eigenvalue(0.5, uniform, 0.1) - appnp_eigenvalue_limit(0.5, 0.1)), 1e-2);
}

TEST(Eigenvalues, MatchCoefficientPolynomial) {
    SeededRng rng(12, 0);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t K = 1 + rng.below(12);
        const Real alpha = rng.uniform(0.01, 1.0), lambda = rng.uniform(-1.0, 1.0);
        const auto s = random_simplex(K, rng);
        const auto c = expand_coefficients(s, alpha);
        Real poly = 0.0;
        for (std::size_t k = 0; k < c.size(); ++k) poly += c[k] * std::pow(lambda, static_cast<Real>(k));
        EXPECT_NEAR(capgnn_eigenvalue(lambda, s, alpha), poly, 1e-12);
        const auto a = appnp_coefficients(alpha, K);
        Real ap = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) ap += a[k] * std::pow(lambda, static_cast<Real>(k));
        EXPECT_NEAR(appnp_eigenvalue(lambda, alpha, K), ap, 1e-12);
    }
}

TEST(Eigenvalues, UniformLimitErrorShrinksWithK) {
    for (Real alpha : {0.1, 0.2}) {
        for (Real lambda : {0.0, 0.3, 0.5, 0.9}) {
            Real prev = std::numeric_limits<Real>::infinity();
            for (std::size_t K : {10, 20, 50, 100, 200, 500}) {
                const Real err =
                    std::abs(capgnn_eigenvalue(lambda, std::vector<Real>(K, 1.0 / K), alpha) -
                             appnp_eigenvalue_limit(lambda, alpha));
                EXPECT_LE(err, prev + 1e-14) << alpha << " " << lambda << " " << K;
                prev = err;
            }
        }
    }
}
