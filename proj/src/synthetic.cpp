#include "capgnn/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "capgnn/errors.hpp"
#include "capgnn/rng.hpp"

namespace capgnn {

namespace {

constexpr std::uint64_t kSynthStream = 0x73796e7468;  // "synth"

CsrMatrix symmetric_adjacency(std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
    std::vector<std::size_t> r, c;
    std::vector<Real> v;
    for (const auto& [a, b] : edges) {
        if (a == b) continue;
        r.push_back(a);
        c.push_back(b);
        r.push_back(b);
        c.push_back(a);
        v.push_back(1.0);
        v.push_back(1.0);
    }
    return CsrMatrix::from_triplets(n, n, std::move(r), std::move(c), std::move(v));
}

Real gaussian(SeededRng& rng) {
    const Real u1 = 1.0 - rng.uniform();
    const Real u2 = rng.uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace

GraphDataset two_cliques(std::uint64_t seed, std::size_t num_features) {
    if (num_features < 2) throw ConfigError("two_cliques: need at least 2 features");
    SeededRng rng(seed, kSynthStream);
    GraphDataset g;
    g.name = "two_cliques";
    g.num_classes = 2;
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (std::size_t block = 0; block < 2; ++block) {
        for (std::size_t i = 0; i < 6; ++i) {
            for (std::size_t j = i + 1; j < 6; ++j) edges.emplace_back(block * 6 + i, block * 6 + j);
        }
    }
    edges.emplace_back(5, 6);
    g.adjacency = symmetric_adjacency(12, edges);
    g.features = Matrix(12, num_features);
    g.labels.resize(12);
    for (std::size_t v = 0; v < 12; ++v) {
        const int label = v < 6 ? 0 : 1;
        g.labels[v] = label;
        for (std::size_t f = 0; f < num_features; ++f) g.features(v, f) = 0.1 * gaussian(rng);
        g.features(v, static_cast<std::size_t>(label)) += 1.0;
    }
    g.train = {0, 6};
    g.val = {1, 7};
    g.test = {2, 3, 4, 5, 8, 9, 10, 11};
    return g;
}

GraphDataset random_graph(std::size_t num_vertices, std::size_t num_features, std::size_t num_classes,
                          double edge_probability, std::uint64_t seed) {
    if (num_vertices < 3 || num_classes < 1 || num_features < 1) throw ConfigError("random_graph: graph too small");
    SeededRng rng(seed, kSynthStream + 1);
    GraphDataset g;
    g.name = "random";
    g.num_classes = num_classes;
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (std::size_t i = 0; i < num_vertices; ++i) {
        for (std::size_t j = i + 1; j < num_vertices; ++j) {
            if (rng.bernoulli(edge_probability)) edges.emplace_back(i, j);
        }
    }
    g.adjacency = symmetric_adjacency(num_vertices, edges);
    g.features = Matrix(num_vertices, num_features);
    for (Real& x : g.features.values()) x = gaussian(rng);
    g.labels.resize(num_vertices);
    for (std::size_t v = 0; v < num_vertices; ++v) {
        g.labels[v] = static_cast<int>(rng.below(num_classes));
        (v % 3 == 0 ? g.train : v % 3 == 1 ? g.val : g.test).push_back(v);
    }
    return g;
}

GraphDataset csbm(const CsbmOptions& o, std::uint64_t seed) {
    if (o.num_classes < 2 || o.num_vertices < o.num_classes * (o.train_per_class + 1) ||
        o.num_features < o.num_classes) {
        throw ConfigError("csbm: inconsistent sizes");
    }
    if (o.num_classes * o.train_per_class + o.num_val + o.num_test > o.num_vertices) {
        throw ConfigError("csbm: splits exceed the vertex count");
    }
    SeededRng rng(seed, kSynthStream + 2);
    const std::size_t n = o.num_vertices;
    const std::size_t c = o.num_classes;
    GraphDataset g;
    g.name = "csbm";
    g.num_classes = c;
    g.labels.resize(n);
    std::vector<std::vector<std::size_t>> members(c);
    for (std::size_t v = 0; v < n; ++v) {
        const std::size_t label = v < c ? v : rng.below(c);
        g.labels[v] = static_cast<int>(label);
        members[label].push_back(v);
    }

    const auto target = static_cast<std::size_t>(std::llround(o.avg_degree * static_cast<double>(n) / 2.0));
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    edges.reserve(target);
    while (edges.size() < target) {
        const std::size_t u = rng.below(n);
        const auto lu = static_cast<std::size_t>(g.labels[u]);
        std::size_t lv = lu;
        if (!rng.bernoulli(o.homophily)) lv = (lu + 1 + rng.below(c - 1)) % c;
        const std::size_t v = members[lv][rng.below(members[lv].size())];
        if (u != v) edges.emplace_back(std::min(u, v), std::max(u, v));
    }
    g.adjacency = symmetric_adjacency(n, edges);

    const std::size_t block = o.num_features / c;
    g.features = Matrix(n, o.num_features);
    for (std::size_t v = 0; v < n; ++v) {
        const auto label = static_cast<std::size_t>(g.labels[v]);
        for (std::size_t w = 0; w < o.words_per_vertex; ++w) {
            const std::size_t f = rng.bernoulli(o.topic_fraction) ? label * block + rng.below(block)
                                                                  : rng.below(o.num_features);
            g.features(v, f) = 1.0;
        }
    }

    std::vector<std::size_t> per_class(c, 0);
    std::vector<std::size_t> rest;
    for (std::size_t v = 0; v < n; ++v) {
        auto& k = per_class[static_cast<std::size_t>(g.labels[v])];
        if (k < o.train_per_class) {
            g.train.push_back(v);
            ++k;
        } else {
            rest.push_back(v);
        }
    }
    for (std::size_t i = rest.size(); i > 1; --i) std::swap(rest[i - 1], rest[rng.below(i)]);
    g.val.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(o.num_val));
    g.test.assign(rest.begin() + static_cast<std::ptrdiff_t>(o.num_val),
                  rest.begin() + static_cast<std::ptrdiff_t>(o.num_val + o.num_test));
    std::sort(g.val.begin(), g.val.end());
    std::sort(g.test.begin(), g.test.end());
    return g;
}

}  // namespace capgnn
