#pragma once

#include <cstddef>
#include <cstdint>

#include "capgnn/graph.hpp"

namespace capgnn {

/// Two 6-cliques joined by one bridge edge; class = clique. Features are a noisy
/// one-hot of the class padded to `num_features` columns. Train {0, 6}, val {1, 7},
/// test the remaining eight vertices.
GraphDataset two_cliques(std::uint64_t seed, std::size_t num_features = 4);

/// Erdos-Renyi graph with Gaussian features and uniform labels; every vertex is
/// assigned round-robin to train/val/test.
GraphDataset random_graph(std::size_t num_vertices, std::size_t num_features, std::size_t num_classes,
                          double edge_probability, std::uint64_t seed);

/// Contextual stochastic block model with sparse bag-of-words features, sized like a
/// citation benchmark by default.
struct CsbmOptions {
    std::size_t num_vertices = 2708;
    std::size_t num_classes = 7;
    std::size_t num_features = 1433;
    double avg_degree = 3.9;
    double homophily = 0.8;          // fraction of edges inside a class
    std::size_t words_per_vertex = 18;
    double topic_fraction = 0.35;    // share of words drawn from the class vocabulary
    std::size_t train_per_class = 20;
    std::size_t num_val = 500;
    std::size_t num_test = 1000;
};

GraphDataset csbm(const CsbmOptions& options, std::uint64_t seed);

}  // namespace capgnn
