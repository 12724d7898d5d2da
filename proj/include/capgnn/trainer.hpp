#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "capgnn/config.hpp"
#include "capgnn/model.hpp"
#include "capgnn/objective.hpp"

namespace capgnn {

struct AdamState {
    ModelParams m;
    ModelParams v;
    std::uint64_t step = 0;
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real eps = 1e-8;

    static AdamState for_params(const ModelParams& p);
};

/// Bias-corrected Adam update of every present parameter. Entries listed in
/// `frozen` (by kind) are left untouched, moments included.
void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, Real lr,
               std::span<const ParamKind> frozen = {});

struct TrainRecord {
    std::size_t epoch = 0;
    LossBreakdown loss;
    Real acc_train = 0.0;
    Real acc_val = 0.0;
    Real acc_test = 0.0;
    Real val_loss = 0.0;
    Real seconds = 0.0;
};

struct StepResult {
    LossBreakdown loss;
    ModelParams grads;
};

/// Per-view RNG stream for (seed, epoch, view).
SeededRng view_stream(std::uint64_t seed, std::size_t epoch, std::size_t view);

/// Loss and summed gradients of M training-mode views, one tape per view.
///
/// The contrastive targets couple views only through stop-gradient values, so each
/// view's tape carries CE_v / M + psi_ecl * term_v (and view 0 also psi_l2 * L2).
/// Views may run on up to `threads` workers; gradients are reduced in view order, so
/// results are bit-identical for any thread count. Batch-norm running statistics are
/// updated afterwards in view order.
StepResult compute_step(const GraphInputs& in, Model& model, const TrainConfig& config, std::size_t epoch);

/// compute_step followed by one Adam update.
LossBreakdown train_step(const GraphInputs& in, Model& model, AdamState& adam, const TrainConfig& config,
                         std::size_t epoch);

/// Fraction of `idx` whose argmax prediction matches the label.
Real accuracy(const Matrix& logits, const GraphInputs& in, std::span<const std::size_t> idx);
/// Eval-mode accuracy on `idx`; throws ConfigError on an empty mask.
Real evaluate(const GraphInputs& in, const Model& model, const ModelConfig& config, std::span<const std::size_t> idx);

struct FitResult {
    Model best;
    std::vector<TrainRecord> history;
    std::size_t best_epoch = 0;
    Real best_val_acc = 0.0;
    Real best_val_loss = 0.0;
    Real test_acc = 0.0;
};

using EpochCallback = std::function<void(const TrainRecord&)>;

/// Trains for up to max_epochs, keeping the checkpoint with the best validation accuracy
/// (ties: lower validation loss). Stops after `patience` consecutive epochs without improvement.
FitResult fit(const GraphInputs& in, const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Initial model for config.seed.
Model initial_model(const GraphInputs& in, const TrainConfig& config);

}  // namespace capgnn
