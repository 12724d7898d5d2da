#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "capgnn/rng.hpp"
#include "capgnn/tape.hpp"

namespace capgnn {

/// Hyperparameters of the adaptive Personalized-PageRank propagation.
/// The learnable coefficient logits are model parameters and live in ModelParams.
struct PropagationParams {
    Real alpha = 0.1;        // teleport probability, (0, 1]
    std::size_t K = 10;      // power iterations, >= 1
    Real leaky_slope = 0.2;  // applied to the coefficient logits before softmax
    Real edge_dropout = 0.0;
    Real coef_dropout = 0.0;

    /// Throws ConfigError on out-of-range values.
    void validate() const;
};

/// s = softmax(leaky_relu(logits)) for a 1 x K logits row.
Var coefficient_attention(Var logits, Real leaky_slope = 0.2);
std::vector<Real> coefficient_attention(std::span<const Real> logits, Real leaky_slope = 0.2);

/// Power-iteration form of the combined propagation polynomial:
///   H(k) = (1 - alpha) * dropout(A) * H(k-1) + alpha * H(0),   k = 1..K
///   out  = sum_k dropout(s_k) * H(k)
/// A fresh edge-dropout mask is drawn every iteration, then one coefficient-dropout
/// mask per term over the |V| x d_z broadcast. Returns pre-activation logits.
/// Memory stays O(K |V| d_z + |E|); no |V| x |V| dense buffer is formed.
Var propagate(const SparseVar& affinity, Var h0, const PropagationParams& p, Var s, SeededRng& rng,
              bool training);

/// softmax(logits / tau), 0 < tau <= 1.
Var sharpen(Var logits, Real tau);
Matrix sharpen(const Matrix& logits, Real tau);

/// Polynomial coefficients c_0..c_K of sum_k s_k U(k) in powers of A.
std::vector<Real> expand_coefficients(std::span<const Real> s, Real alpha);
/// Coefficients of U(K): c_k = alpha (1-alpha)^k for k < K, c_K = (1-alpha)^K.
std::vector<Real> appnp_coefficients(Real alpha, std::size_t K);

/// Eigenvalue of the combined polynomial for an eigenvalue `lambda` of A.
Real capgnn_eigenvalue(Real lambda, std::span<const Real> s, Real alpha);
/// Eigenvalue of U(K).
Real appnp_eigenvalue(Real lambda, Real alpha, std::size_t K);
/// K -> infinity limit shared by APPNP and uniform-coefficient propagation: alpha / (1 - (1-alpha) lambda).
Real appnp_eigenvalue_limit(Real lambda, Real alpha);

}  // namespace capgnn
