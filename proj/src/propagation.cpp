#include "capgnn/propagation.hpp"

#include <cmath>
#include <string>

#include "capgnn/errors.hpp"

namespace capgnn {

void PropagationParams::validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1], got " + std::to_string(alpha));
    if (K < 1) throw ConfigError("K must be >= 1");
    for (Real rate : {edge_dropout, coef_dropout}) {
        if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rates must lie in [0, 1)");
    }
}

Var coefficient_attention(Var logits, Real leaky_slope) {
    if (logits.rows() != 1) throw ShapeError("coefficient_attention: logits must be a 1 x K row");
    return ops::softmax_rows(ops::leaky_relu(logits, leaky_slope));
}

std::vector<Real> coefficient_attention(std::span<const Real> logits, Real leaky_slope) {
    Matrix row(1, logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) row[k] = logits[k] > 0.0 ? logits[k] : leaky_slope * logits[k];
    const Matrix s = kernels::softmax_rows(row);
    return {s.values().begin(), s.values().end()};
}

Var propagate(const SparseVar& affinity, Var h0, const PropagationParams& p, Var s, SeededRng& rng,
              bool training) {
    p.validate();
    if (affinity.rows() != affinity.cols()) throw ShapeError("propagate: affinity must be square");
    if (affinity.cols() != h0.rows()) throw ShapeError("propagate: affinity size != number of rows of H(0)");
    if (s.rows() != 1 || s.cols() != p.K) {
        throw ShapeError("propagate: coefficient row must be 1 x " + std::to_string(p.K));
    }

    const Var teleport = ops::scale(h0, p.alpha);
    std::vector<Var> hidden;
    hidden.reserve(p.K);
    Var h = h0;
    for (std::size_t k = 0; k < p.K; ++k) {
        const SparseVar dropped = ops::dropout(affinity, p.edge_dropout, rng, training);
        h = ops::add(ops::scale(ops::spmm(dropped, h), 1.0 - p.alpha), teleport);
        hidden.push_back(h);
    }

    Var out;
    for (std::size_t k = 0; k < p.K; ++k) {
        const Var term = ops::dropout(ops::scale_by(hidden[k], ops::element(s, 0, k)), p.coef_dropout, rng, training);
        out = k == 0 ? term : ops::add(out, term);
    }
    return out;
}

namespace {
void check_tau(Real tau) {
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("sharpen: tau must lie in (0, 1], got " + std::to_string(tau));
}
}  // namespace

Var sharpen(Var logits, Real tau) {
    check_tau(tau);
    if (tau == 1.0) return ops::softmax_rows(logits);
    return ops::softmax_rows(ops::scale(logits, 1.0 / tau));
}

Matrix sharpen(const Matrix& logits, Real tau) {
    check_tau(tau);
    if (tau == 1.0) return kernels::softmax_rows(logits);
    Matrix scaled = logits;
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = logits[i] * (1.0 / tau);
    return kernels::softmax_rows(scaled);
}

std::vector<Real> expand_coefficients(std::span<const Real> s, Real alpha) {
    const std::size_t K = s.size();
    std::vector<Real> c(K + 1, 0.0);
    // suffix[k] = sum_{l > k} s_l (s is 1-based in the polynomial, 0-based here)
    std::vector<Real> suffix(K + 1, 0.0);
    for (std::size_t k = K; k-- > 0;) suffix[k] = suffix[k + 1] + s[k];
    Real decay = 1.0;  // (1 - alpha)^k
    for (std::size_t k = 0; k <= K; ++k) {
        const Real own = k == 0 ? 0.0 : s[k - 1] * decay;
        c[k] = own + suffix[k] * alpha * decay;
        decay *= 1.0 - alpha;
    }
    return c;
}

std::vector<Real> appnp_coefficients(Real alpha, std::size_t K) {
    std::vector<Real> c(K + 1, 0.0);
    Real decay = 1.0;
    for (std::size_t k = 0; k < K; ++k) {
        c[k] = alpha * decay;
        decay *= 1.0 - alpha;
    }
    c[K] = decay;
    return c;
}

Real capgnn_eigenvalue(Real lambda, std::span<const Real> s, Real alpha) {
    const Real q = (1.0 - alpha) * lambda;
    Real qk = 1.0;       // q^k
    Real partial = 0.0;  // sum_{l=1..k} alpha q^{l-1}
    Real total = 0.0;
    for (std::size_t k = 1; k <= s.size(); ++k) {
        partial += alpha * qk;
        qk *= q;
        total += s[k - 1] * (qk + partial);
    }
    return total;
}

Real appnp_eigenvalue(Real lambda, Real alpha, std::size_t K) {
    const Real q = (1.0 - alpha) * lambda;
    Real qk = 1.0;
    Real partial = 0.0;
    for (std::size_t l = 1; l <= K; ++l) {
        partial += alpha * qk;
        qk *= q;
    }
    return qk + partial;
}

Real appnp_eigenvalue_limit(Real lambda, Real alpha) { return alpha / (1.0 - (1.0 - alpha) * lambda); }

}  // namespace capgnn
