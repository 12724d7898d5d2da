#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "capgnn/matrix.hpp"
#include "capgnn/tape.hpp"

namespace capgnn {

/// A node-classification graph with a fixed train/val/test split.
///
/// The adjacency is symmetric and never stores self-loops; those are added by
/// the affinity normalizations. Labels are -1 for unlabeled vertices.
struct GraphDataset {
    std::string name;
    Matrix features;       // |V| x d_x
    CsrMatrix adjacency;   // |V| x |V|
    std::vector<int> labels;
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
    std::size_t num_classes = 0;

    std::size_t num_vertices() const noexcept { return features.rows(); }
    std::size_t num_features() const noexcept { return features.cols(); }
    /// Each undirected edge is stored twice.
    std::size_t num_undirected_edges() const noexcept { return adjacency.nnz() / 2; }
};

/// Counters and problems collected while reading a dataset directory.
struct LoadReport {
    std::size_t edge_lines = 0;
    std::size_t directed_entries = 0;
    std::size_t undirected_edges = 0;
    std::size_t duplicate_edges = 0;
    std::size_t self_loops_dropped = 0;
    std::vector<std::string> issues;  // "file:line: message"

    bool ok() const noexcept { return issues.empty(); }
};

/// Reads a dataset directory (meta.json, features.f32, edges.txt, labels.txt, masks.json).
///
/// Throws IoError for missing/unreadable files and ValidationError listing every
/// violated record otherwise.
GraphDataset load_dataset(const std::filesystem::path& dir, LoadReport* report = nullptr);

/// Like load_dataset but never throws for content problems; they land in the report.
/// Returns false when the directory could not be read or validated.
bool inspect_dataset(const std::filesystem::path& dir, GraphDataset& out, LoadReport& report);

/// Writes `g` in the directory format read by load_dataset. Features are narrowed to float32.
void write_dataset(const GraphDataset& g, const std::filesystem::path& dir);

/// Structural invariants (mask disjointness, label range, symmetry, no self-loops).
std::vector<std::string> check_invariants(const GraphDataset& g);

/// D~ = rowsum(A) + 1.
std::vector<Real> degree_vector(const CsrMatrix& adjacency);

/// D~^{-1/2} (A + I) D~^{-1/2}. The pattern is that of A + I.
CsrMatrix gcn_affinity(const CsrMatrix& adjacency);

/// Per-entry factor sqrt(D~_i / D~_j) over the pattern of A + I.
std::vector<Real> renormalization_factors(const CsrPattern& pattern, const std::vector<Real>& degree);

/// Single-head additive attention used for the dynamic affinity.
struct GatAttentionParams {
    Var projection;  // d_x x d_att
    Var attn_src;    // d_att x 1
    Var attn_dst;    // d_att x 1
};

inline constexpr std::size_t kGatAttentionDim = 8;
inline constexpr Real kGatLeakySlope = 0.2;

/// Row-stochastic attention over the pattern of A + I:
/// score(i, j) = leaky_relu(a_src . (hW)_i + a_dst . (hW)_j), softmaxed over row i.
/// `h` is either dense (Var) or sparse features; both overloads share the scorer.
SparseVar gat_attention(Var h, const std::shared_ptr<const CsrPattern>& pattern, const GatAttentionParams& p);
SparseVar gat_attention(const SparseVar& h, const std::shared_ptr<const CsrPattern>& pattern,
                        const GatAttentionParams& p);

/// beta * A_gcn + (1 - beta) * D~^{1/2} Upsilon D~^{-1/2}, all on the pattern of A + I.
SparseVar gat_affinity(const SparseVar& upsilon, const SparseVar& gcn, std::span<const Real> renorm, Real beta);
/// Plain-value counterpart of the tape version.
CsrMatrix gat_affinity(const CsrMatrix& upsilon, const CsrMatrix& gcn, const std::vector<Real>& degree, Real beta);

}  // namespace capgnn
