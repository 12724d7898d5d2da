#pragma once

#include <span>
#include <vector>

#include "capgnn/model.hpp"
#include "capgnn/tape.hpp"

namespace capgnn {

/// Mean of -log softmax(logits)[label] over the listed vertices.
Var masked_cross_entropy(Var logits, std::span<const std::size_t> idx, std::span<const int> labels);
Real masked_cross_entropy(const Matrix& logits, std::span<const std::size_t> idx, std::span<const int> labels);

/// -(a/|a|) . (b/|b|), norms floored at 1e-12.
Real cosine_distance(std::span<const Real> a, std::span<const Real> b);

/// Sum over views of the row-normalized sharpened predictions, computed off-tape.
/// This is the stop-gradient factor shared by every left view of the contrastive sum.
Matrix contrastive_targets(std::span<const Matrix> view_logits, Real tau);

/// One left-view slice of the contrastive loss:
///   -(2 / (|V| M^2)) * sum_i normalize(softmax(logits))_i . targets_i
/// Gradient flows only through `logits`.
Var contrastive_view_term(Var logits, const Matrix& targets, std::size_t num_views);

/// Full negative-free contrastive loss over M >= 2 views on one tape, diagonal pairs
/// included, with the sharpened branch behind stop_gradient.
Var contrastive_loss(std::span<const Var> view_logits, Real tau);

/// 1/2 sum of squared entries over weight matrices; biases, norms and coefficient logits excluded.
Var l2_loss(const BoundParams& params);
Real l2_loss(const ModelParams& params);

struct LossWeights {
    Real psi_ecl = 1.0;
    Real psi_l2 = 0.0;
    Real tau = 1.0;
};

struct LossBreakdown {
    Real supervised = 0.0;
    Real contrastive = 0.0;
    Real l2 = 0.0;
    Real total = 0.0;
    LossWeights weights;
};

struct CombinedLoss {
    Var total;
    LossBreakdown breakdown;
};

/// supervised (mean over views) + psi_ecl * contrastive + psi_l2 * l2, all views on one tape.
/// With a single view the contrastive term is skipped.
CombinedLoss combined_loss(std::span<const Var> view_logits, std::span<const std::size_t> train_idx,
                           std::span<const int> train_labels, const BoundParams& params, const LossWeights& w);

}  // namespace capgnn
