#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "capgnn/graph.hpp"
#include "capgnn/propagation.hpp"
#include "capgnn/rng.hpp"
#include "capgnn/tape.hpp"

namespace capgnn {

enum class Variant { Capgcn, Capgat };

std::string to_string(Variant v);
/// Parses "capgcn" / "capgat" (case-insensitive).
Variant parse_variant(const std::string& s);

inline constexpr std::size_t kHiddenWidth = 64;

struct ModelConfig {
    Variant variant = Variant::Capgcn;
    Real alpha = 0.1;
    std::size_t K = 10;
    Real beta = 0.3;
    Real leaky_slope = 0.2;
    Real dr_input = 0.0;
    Real dr_mlp = 0.0;
    Real dr_edge = 0.0;
    Real dr_coef_att = 0.0;
    bool use_batch_norm = false;
    /// false freezes the coefficient logits at zero (uniform s_k = 1/K).
    bool learn_coefficients = true;

    PropagationParams propagation() const;
    void validate() const;
};

enum class ParamKind { Weight, Bias, CoefficientLogits, Norm };

struct ParamRef {
    const char* name;
    Matrix* value;
    ParamKind kind;
};
struct ConstParamRef {
    const char* name;
    const Matrix* value;
    ParamKind kind;
};

/// Trainable parameters. Optional groups are empty (0x0) when unused by the variant.
struct ModelParams {
    Matrix w1, b1, w2, b2;
    Matrix coef_logits;  // 1 x K
    Matrix gat_w, gat_a_src, gat_a_dst;
    Matrix bn_in_gamma, bn_in_beta, bn_hidden_gamma, bn_hidden_beta;

    /// Present parameters in a fixed order.
    std::vector<ParamRef> entries();
    std::vector<ConstParamRef> entries() const;
    /// Same layout, every entry zero.
    ModelParams zeros_like() const;
    std::size_t scalar_count() const;
};

struct BatchNormRunning {
    Matrix mean;  // 1 x d
    Matrix var;   // 1 x d
};

/// Non-trainable state: batch-norm running statistics (empty when batch norm is off).
struct ModelState {
    BatchNormRunning input;
    BatchNormRunning hidden;
};

struct Model {
    ModelParams params;
    ModelState state;
};

/// Glorot-uniform weights, zero biases, zero coefficient logits.
Model init_model(std::size_t num_features, std::size_t num_classes, const ModelConfig& config, SeededRng& rng);

/// Static, per-dataset inputs to forward(): features, Â_gcn and renormalization factors.
struct GraphInputs {
    bool sparse_features = true;
    CsrMatrix features_sparse;
    Matrix features_dense;
    CsrMatrix gcn;
    std::vector<Real> degree;
    std::vector<Real> renorm;
    std::vector<int> labels;
    std::vector<std::size_t> train, val, test;
    std::size_t num_classes = 0;

    std::size_t num_vertices() const noexcept { return gcn.rows(); }
    std::size_t num_features() const noexcept {
        return sparse_features ? features_sparse.cols() : features_dense.cols();
    }
    /// Labels of the listed vertices, in order.
    std::vector<int> labels_of(std::span<const std::size_t> idx) const;
};

/// Dense features are kept whenever batch norm runs on the inputs; otherwise CSR.
GraphInputs prepare_inputs(const GraphDataset& g, bool dense_features);

/// Model parameters registered on a tape for one forward pass.
struct BoundParams {
    Var w1, b1, w2, b2, coef_logits;
    std::optional<Var> gat_w, gat_a_src, gat_a_dst;
    std::optional<Var> bn_in_gamma, bn_in_beta, bn_hidden_gamma, bn_hidden_beta;
};

/// Leaves for every present parameter. Coefficient logits become a constant when frozen.
BoundParams bind(Tape& tape, const ModelParams& params, bool learn_coefficients = true);
/// Gradients of the bound leaves in ModelParams layout (zero where nothing flowed).
ModelParams collect_gradients(Tape& tape, const BoundParams& bound, const ModelParams& layout);

struct BatchStats {
    Matrix mean, var;
};

struct ForwardOutput {
    Var logits;  // |V| x C, pre-activation
    std::optional<BatchStats> input_stats;
    std::optional<BatchStats> hidden_stats;
};

/// dropout(X) -> [BN] -> linear -> relu -> [BN] -> dropout -> linear = H(0)
/// -> affinity (Â_gcn or the attention mix) -> propagate.
ForwardOutput forward(Tape& tape, const GraphInputs& in, const BoundParams& params, const ModelState& state,
                      const ModelConfig& config, SeededRng& rng, bool training);

/// Eval-mode logits (no dropout, running batch-norm statistics).
Matrix infer_logits(const GraphInputs& in, const Model& model, const ModelConfig& config);

/// Per-row argmax; ties go to the lowest class index.
std::vector<int> predict(const Matrix& logits);
int argmax_row(std::span<const Real> row);

/// Running-statistics update with momentum 0.9: running = 0.9 running + 0.1 batch.
void update_running_stats(ModelState& state, const ForwardOutput& out);

inline constexpr Real kBatchNormMomentum = 0.9;
inline constexpr Real kBatchNormEps = 1e-5;

// Checkpoint file: "CAPG", u32 version, then per parameter
// (u32 name length, name bytes, u64 rows, u64 cols, rows*cols little-endian f64).
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Model& model);
/// Reads a checkpoint and validates every name and shape against `expected`'s layout.
Model load_checkpoint(const std::filesystem::path& path, const Model& expected);
/// Reads a checkpoint without layout validation.
std::vector<std::pair<std::string, Matrix>> read_checkpoint_entries(const std::filesystem::path& path);

}  // namespace capgnn
