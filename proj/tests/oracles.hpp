#pragma once

#include <cmath>
#include <numeric>
#include <vector>

#include "capgnn/rng.hpp"
#include "capgnn/tape.hpp"

namespace capgnn::oracle {

/// sum_k s_k ((1-a)^k A^k + sum_{l=1..k} a (1-a)^{l-1} A^{l-1}) h0 with dense powers.
inline Matrix dense_polynomial(const Matrix& A, const Matrix& h0, const std::vector<Real>& s, Real alpha) {
    const std::size_t n = A.rows();
    std::vector<Matrix> powers{Matrix::identity(n)};
    for (std::size_t k = 1; k <= s.size(); ++k) powers.push_back(kernels::matmul(powers.back(), A));
    Matrix poly(n, n);
    for (std::size_t k = 1; k <= s.size(); ++k) {
        for (std::size_t i = 0; i < n * n; ++i) {
            Real term = std::pow(1 - alpha, static_cast<Real>(k)) * powers[k][i];
            for (std::size_t l = 1; l <= k; ++l) term += alpha * std::pow(1 - alpha, static_cast<Real>(l - 1)) * powers[l - 1][i];
            poly[i] += s[k - 1] * term;
        }
    }
    return kernels::matmul(poly, h0);
}

/// Uniform draw from the probability simplex.
inline std::vector<Real> random_simplex(std::size_t k, SeededRng& rng) {
    std::vector<Real> s(k);
    for (Real& v : s) v = -std::log(1.0 - rng.uniform());
    const Real total = std::accumulate(s.begin(), s.end(), 0.0);
    for (Real& v : s) v /= total;
    return s;
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, SeededRng& rng, Real lo = -1.0, Real hi = 1.0) {
    Matrix m(rows, cols);
    for (Real& v : m.values()) v = rng.uniform(lo, hi);
    return m;
}

}  // namespace capgnn::oracle
