#include "capgnn/objective.hpp"

#include <algorithm>
#include <cmath>

#include "capgnn/errors.hpp"
#include "capgnn/propagation.hpp"

namespace capgnn {

Var masked_cross_entropy(Var logits, std::span<const std::size_t> idx, std::span<const int> labels) {
    if (idx.empty()) throw ConfigError("masked_cross_entropy: empty mask");
    return ops::scale(ops::gather_mean(ops::log_softmax_rows(logits), idx, labels), -1.0);
}

Real masked_cross_entropy(const Matrix& logits, std::span<const std::size_t> idx, std::span<const int> labels) {
    if (idx.empty()) throw ConfigError("masked_cross_entropy: empty mask");
    Real total = 0.0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto row = logits.row(idx[i]);
        const Real mx = *std::max_element(row.begin(), row.end());
        Real z = 0.0;
        for (Real v : row) z += std::exp(v - mx);
        total += mx + std::log(z) - row[static_cast<std::size_t>(labels[i])];
    }
    return total / static_cast<Real>(idx.size());
}

Real cosine_distance(std::span<const Real> a, std::span<const Real> b) {
    if (a.size() != b.size()) throw ShapeError("cosine_distance: length mismatch");
    Real dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return -dot / (std::max(std::sqrt(na), 1e-12) * std::max(std::sqrt(nb), 1e-12));
}

Matrix contrastive_targets(std::span<const Matrix> view_logits, Real tau) {
    if (view_logits.empty()) throw ConfigError("contrastive_targets: no views");
    Matrix total;
    for (const Matrix& logits : view_logits) {
        Matrix t = kernels::l2_normalize_rows(sharpen(logits, tau));
        if (total.empty()) {
            total = std::move(t);
            continue;
        }
        if (!total.same_shape(t)) throw ShapeError("contrastive_targets: views differ in shape");
        for (std::size_t i = 0; i < t.size(); ++i) total[i] += t[i];
    }
    return total;
}

Var contrastive_view_term(Var logits, const Matrix& targets, std::size_t num_views) {
    if (!logits.value().same_shape(targets)) throw ShapeError("contrastive_view_term: target shape mismatch");
    const Real n = static_cast<Real>(logits.rows());
    const Real m = static_cast<Real>(num_views);
    const Var z = ops::l2_normalize_rows(ops::softmax_rows(logits));
    const Var t = logits.tape()->constant(targets);
    return ops::scale(ops::sum(ops::mul(z, t)), -2.0 / (n * m * m));
}

Var contrastive_loss(std::span<const Var> views, Real tau) {
    if (views.size() < 2) throw ConfigError("contrastive_loss: requires at least 2 views");
    // Sharpened branch: built on the tape, then detached.
    Var target_sum;
    for (std::size_t b = 0; b < views.size(); ++b) {
        if (!views[b].value().same_shape(views[0].value())) throw ShapeError("contrastive_loss: views differ in shape");
        const Var t = ops::stop_gradient(ops::l2_normalize_rows(sharpen(views[b], tau)));
        target_sum = b == 0 ? t : ops::add(target_sum, t);
    }
    const Matrix targets = target_sum.value();
    Var total;
    for (std::size_t a = 0; a < views.size(); ++a) {
        const Var term = contrastive_view_term(views[a], targets, views.size());
        total = a == 0 ? term : ops::add(total, term);
    }
    return total;
}

Var l2_loss(const BoundParams& p) {
    Tape& tape = *p.w1.tape();
    Var total = tape.constant(Matrix(1, 1));
    auto add = [&](const std::optional<Var>& w) {
        if (w) total = ops::add(total, ops::sum(ops::mul(*w, *w)));
    };
    add(p.w1);
    add(p.w2);
    add(p.gat_w);
    add(p.gat_a_src);
    add(p.gat_a_dst);
    return ops::scale(total, 0.5);
}

Real l2_loss(const ModelParams& p) {
    Real total = 0.0;
    for (const auto& e : p.entries()) {
        if (e.kind != ParamKind::Weight) continue;
        for (Real v : e.value->values()) total += v * v;
    }
    return 0.5 * total;
}

CombinedLoss combined_loss(std::span<const Var> views, std::span<const std::size_t> train_idx,
                           std::span<const int> train_labels, const BoundParams& params, const LossWeights& w) {
    if (views.empty()) throw ConfigError("combined_loss: no views");
    const Real inv_m = 1.0 / static_cast<Real>(views.size());
    Var supervised;
    for (std::size_t v = 0; v < views.size(); ++v) {
        const Var ce = masked_cross_entropy(views[v], train_idx, train_labels);
        supervised = v == 0 ? ce : ops::add(supervised, ce);
    }
    supervised = ops::scale(supervised, inv_m);

    CombinedLoss out;
    out.breakdown.weights = w;
    out.breakdown.supervised = supervised.value()[0];
    Var total = supervised;
    if (views.size() >= 2) {
        const Var ecl = contrastive_loss(views, w.tau);
        out.breakdown.contrastive = ecl.value()[0];
        if (w.psi_ecl != 0.0) total = ops::add(total, ops::scale(ecl, w.psi_ecl));
    }
    const Var l2 = l2_loss(params);
    out.breakdown.l2 = l2.value()[0];
    if (w.psi_l2 != 0.0) total = ops::add(total, ops::scale(l2, w.psi_l2));
    out.total = total;
    out.breakdown.total = total.value()[0];
    return out;
}

}  // namespace capgnn
