#include "capgnn/graph.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "capgnn/errors.hpp"

namespace capgnn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

json read_json(const fs::path& path, LoadReport& report) {
    try {
        return json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        report.issues.push_back(path.filename().string() + ": invalid JSON (" + e.what() + ")");
        return json();
    }
}

float decode_f32_le(const char* bytes) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, bytes, 4);
    if constexpr (std::endian::native == std::endian::big) {
        bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits >> 8) & 0xff00u) | (bits >> 24);
    }
    return std::bit_cast<float>(bits);
}

void encode_f32_le(float v, char* bytes) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
    if constexpr (std::endian::native == std::endian::big) {
        bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits >> 8) & 0xff00u) | (bits >> 24);
    }
    std::memcpy(bytes, &bits, 4);
}

bool get_count(const json& meta, const char* key, std::size_t& out, LoadReport& report) {
    if (!meta.is_object() || !meta.contains(key) || !meta[key].is_number_integer() || meta[key].get<long long>() < 0) {
        report.issues.push_back(std::string("meta.json: missing or invalid \"") + key + "\"");
        return false;
    }
    out = meta[key].get<std::size_t>();
    return true;
}

std::vector<std::size_t> read_mask(const json& masks, const char* key, std::size_t n, LoadReport& report) {
    std::vector<std::size_t> out;
    if (!masks.is_object() || !masks.contains(key) || !masks[key].is_array()) {
        report.issues.push_back(std::string("masks.json: missing array \"") + key + "\"");
        return out;
    }
    std::set<std::size_t> seen;
    for (std::size_t pos = 0; pos < masks[key].size(); ++pos) {
        const json& v = masks[key][pos];
        if (!v.is_number_integer() || v.get<long long>() < 0 || v.get<std::size_t>() >= n) {
            report.issues.push_back(std::string("masks.json: ") + key + "[" + std::to_string(pos) +
                                    "] = " + v.dump() + " is not a vertex id in [0, " + std::to_string(n) + ")");
            continue;
        }
        const auto idx = v.get<std::size_t>();
        if (!seen.insert(idx).second) {
            report.issues.push_back(std::string("masks.json: index ") + std::to_string(idx) + " repeated in " + key);
            continue;
        }
        out.push_back(idx);
    }
    return out;
}

}  // namespace

bool inspect_dataset(const fs::path& dir, GraphDataset& g, LoadReport& report) {
    for (const char* name : {"meta.json", "features.f32", "edges.txt", "labels.txt", "masks.json"}) {
        if (!fs::is_regular_file(dir / name)) {
            report.issues.push_back(std::string(name) + ": missing from " + dir.string());
        }
    }
    if (!report.issues.empty()) return false;

    const json meta = read_json(dir / "meta.json", report);
    std::size_t n = 0, d = 0, c = 0;
    const bool dims_ok = get_count(meta, "num_vertices", n, report) & get_count(meta, "num_features", d, report) &
                         get_count(meta, "num_classes", c, report);
    if (!dims_ok) return false;
    g.name = meta.is_object() && meta.contains("name") && meta["name"].is_string() ? meta["name"].get<std::string>()
                                                                                    : dir.filename().string();
    g.num_classes = c;

    // features
    const std::string raw = read_file(dir / "features.f32");
    if (raw.size() != n * d * 4) {
        report.issues.push_back("features.f32: " + std::to_string(raw.size()) + " bytes, expected " +
                                std::to_string(n * d * 4) + " (" + std::to_string(n) + " x " + std::to_string(d) +
                                " float32)");
        g.features = Matrix(n, d);
    } else {
        std::vector<Real> values(n * d);
        for (std::size_t i = 0; i < values.size(); ++i) {
            values[i] = decode_f32_le(raw.data() + 4 * i);
            if (!std::isfinite(values[i])) {
                report.issues.push_back("features.f32: non-finite value at vertex " + std::to_string(i / std::max<std::size_t>(d, 1)) +
                                        ", feature " + std::to_string(i % std::max<std::size_t>(d, 1)));
                values[i] = 0.0;
            }
        }
        g.features = Matrix(n, d, std::move(values));
    }

    // edges
    {
        std::ifstream in(dir / "edges.txt");
        if (!in) throw IoError("cannot open " + (dir / "edges.txt").string());
        std::vector<std::size_t> rows, cols;
        std::vector<Real> weights;
        std::set<std::pair<std::size_t, std::size_t>> pairs;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            ++report.edge_lines;
            std::istringstream ls(line);
            long long src = -1, dst = -1;
            Real w = 1.0;
            std::string extra;
            if (!(ls >> src >> dst)) {
                report.issues.push_back("edges.txt:" + std::to_string(line_no) + ": expected \"src dst [weight]\"");
                continue;
            }
            if (!(ls >> w)) {
                w = 1.0;
            } else if (ls >> extra) {
                report.issues.push_back("edges.txt:" + std::to_string(line_no) + ": trailing content");
                continue;
            }
            const std::string where = "edges.txt:" + std::to_string(line_no) + ": ";
            if (src < 0 || dst < 0 || static_cast<std::size_t>(src) >= n || static_cast<std::size_t>(dst) >= n) {
                report.issues.push_back(where + "vertex id out of range [0, " + std::to_string(n) + ")");
                continue;
            }
            if (!std::isfinite(w) || w < 0.0) {
                report.issues.push_back(where + "weight must be a finite nonnegative number");
                continue;
            }
            const auto s = static_cast<std::size_t>(src), t = static_cast<std::size_t>(dst);
            if (s == t) {
                ++report.self_loops_dropped;
                continue;
            }
            if (!pairs.insert({std::min(s, t), std::max(s, t)}).second) ++report.duplicate_edges;
            rows.insert(rows.end(), {s, t});
            cols.insert(cols.end(), {t, s});
            weights.insert(weights.end(), {w, w});
        }
        g.adjacency = CsrMatrix::from_triplets(n, n, std::move(rows), std::move(cols), std::move(weights));
        report.directed_entries = g.adjacency.nnz();
        report.undirected_edges = pairs.size();
    }

    // labels
    {
        std::ifstream in(dir / "labels.txt");
        if (!in) throw IoError("cannot open " + (dir / "labels.txt").string());
        std::string line;
        std::size_t line_no = 0;
        g.labels.clear();
        while (std::getline(in, line)) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            std::istringstream ls(line);
            long long label = 0;
            std::string extra;
            if (!(ls >> label) || (ls >> extra)) {
                report.issues.push_back("labels.txt:" + std::to_string(line_no) + ": expected one integer");
                g.labels.push_back(-1);
                continue;
            }
            if (label < -1 || label >= static_cast<long long>(c)) {
                report.issues.push_back("labels.txt:" + std::to_string(line_no) + ": label " + std::to_string(label) +
                                        " out of range [-1, " + std::to_string(c) + ")");
                label = -1;
            }
            g.labels.push_back(static_cast<int>(label));
        }
        if (g.labels.size() != n) {
            report.issues.push_back("labels.txt: " + std::to_string(g.labels.size()) + " labels for " +
                                    std::to_string(n) + " vertices");
            g.labels.resize(n, -1);
        }
    }

    // masks
    {
        const json masks = read_json(dir / "masks.json", report);
        g.train = read_mask(masks, "train", n, report);
        g.val = read_mask(masks, "val", n, report);
        g.test = read_mask(masks, "test", n, report);
    }

    for (auto& issue : check_invariants(g)) report.issues.push_back("masks.json: " + issue);
    return report.ok();
}

GraphDataset load_dataset(const fs::path& dir, LoadReport* report) {
    LoadReport local;
    LoadReport& r = report ? *report : local;
    if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
    for (const char* name : {"meta.json", "features.f32", "edges.txt", "labels.txt", "masks.json"}) {
        if (!fs::exists(dir / name)) throw IoError("missing " + (dir / name).string());
    }
    GraphDataset g;
    if (!inspect_dataset(dir, g, r)) {
        std::string msg = "invalid dataset " + dir.string() + ":";
        const std::size_t shown = std::min<std::size_t>(r.issues.size(), 20);
        for (std::size_t i = 0; i < shown; ++i) msg += "\n  " + r.issues[i];
        if (shown < r.issues.size()) msg += "\n  ... " + std::to_string(r.issues.size() - shown) + " more";
        throw ValidationError(msg);
    }
    return g;
}

std::vector<std::string> check_invariants(const GraphDataset& g) {
    std::vector<std::string> issues;
    const std::size_t n = g.num_vertices();
    std::vector<int> owner(n, -1);
    const char* names[] = {"train", "val", "test"};
    const std::vector<std::size_t>* splits[] = {&g.train, &g.val, &g.test};
    for (int s = 0; s < 3; ++s) {
        for (std::size_t idx : *splits[s]) {
            if (idx >= n) {
                issues.push_back(std::string(names[s]) + " index " + std::to_string(idx) + " out of range");
                continue;
            }
            if (owner[idx] >= 0 && owner[idx] != s) {
                issues.push_back("index " + std::to_string(idx) + " appears in both " + names[owner[idx]] + " and " +
                                 names[s]);
            }
            owner[idx] = s;
            if (idx < g.labels.size() && (g.labels[idx] < 0 || static_cast<std::size_t>(g.labels[idx]) >= g.num_classes)) {
                issues.push_back(std::string(names[s]) + " index " + std::to_string(idx) + " has no valid label");
            }
        }
    }
    if (g.adjacency.rows() != n || g.adjacency.cols() != n) {
        issues.push_back("adjacency shape does not match vertex count");
        return issues;
    }
    const CsrMatrix t = g.adjacency.transpose();
    if (!(t == g.adjacency)) issues.push_back("adjacency is not symmetric");
    const auto& p = g.adjacency.pattern();
    for (std::size_t r = 0; r < n; ++r) {
        if (p.find(r, r) != p.nnz()) {
            issues.push_back("self-loop stored at vertex " + std::to_string(r));
            break;
        }
    }
    if (!p.is_canonical()) issues.push_back("adjacency is not canonical CSR");
    return issues;
}

void write_dataset(const GraphDataset& g, const fs::path& dir) {
    fs::create_directories(dir);
    const std::size_t n = g.num_vertices();
    {
        json meta = {{"num_vertices", n},
                     {"num_features", g.num_features()},
                     {"num_classes", g.num_classes},
                     {"name", g.name}};
        std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";
    }
    {
        std::string bytes(g.features.size() * 4, '\0');
        for (std::size_t i = 0; i < g.features.size(); ++i) {
            encode_f32_le(static_cast<float>(g.features[i]), bytes.data() + 4 * i);
        }
        std::ofstream out(dir / "features.f32", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    {
        std::ofstream out(dir / "edges.txt");
        out.precision(17);
        const auto& p = g.adjacency.pattern();
        const auto vals = g.adjacency.values();
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t e = p.row_offsets[r]; e < p.row_offsets[r + 1]; ++e) {
                if (p.col_indices[e] <= r) continue;
                out << r << ' ' << p.col_indices[e];
                if (vals[e] != 1.0) out << ' ' << vals[e];
                out << '\n';
            }
        }
    }
    {
        std::ofstream out(dir / "labels.txt");
        for (int label : g.labels) out << label << '\n';
    }
    {
        json masks = {{"train", g.train}, {"val", g.val}, {"test", g.test}};
        std::ofstream(dir / "masks.json") << masks.dump() << "\n";
    }
}

std::vector<Real> degree_vector(const CsrMatrix& adjacency) {
    std::vector<Real> deg(adjacency.rows(), 1.0);
    const auto& p = adjacency.pattern();
    const auto vals = adjacency.values();
    for (std::size_t r = 0; r < p.rows; ++r) {
        for (std::size_t e = p.row_offsets[r]; e < p.row_offsets[r + 1]; ++e) deg[r] += vals[e];
    }
    return deg;
}

CsrMatrix gcn_affinity(const CsrMatrix& adjacency) {
    if (adjacency.rows() != adjacency.cols()) throw ShapeError("gcn_affinity: adjacency must be square");
    const std::size_t n = adjacency.rows();
    const auto deg = degree_vector(adjacency);
    const auto& a = adjacency.pattern();
    const auto av = adjacency.values();

    auto pattern = std::make_shared<CsrPattern>();
    pattern->rows = pattern->cols = n;
    pattern->row_offsets.assign(n + 1, 0);
    pattern->col_indices.reserve(a.nnz() + n);
    std::vector<Real> values;
    values.reserve(a.nnz() + n);
    std::vector<Real> inv_sqrt(n);
    for (std::size_t i = 0; i < n; ++i) inv_sqrt[i] = 1.0 / std::sqrt(deg[i]);

    for (std::size_t r = 0; r < n; ++r) {
        bool diag_done = false;
        auto emit = [&](std::size_t c, Real w) {
            pattern->col_indices.push_back(c);
            values.push_back(inv_sqrt[r] * w * inv_sqrt[c]);
        };
        for (std::size_t e = a.row_offsets[r]; e < a.row_offsets[r + 1]; ++e) {
            const std::size_t c = a.col_indices[e];
            if (!diag_done && c > r) {
                emit(r, 1.0);
                diag_done = true;
            }
            emit(c, c == r ? av[e] + 1.0 : av[e]);
            if (c == r) diag_done = true;
        }
        if (!diag_done) emit(r, 1.0);
        pattern->row_offsets[r + 1] = values.size();
    }
    return CsrMatrix(std::move(pattern), std::move(values));
}

std::vector<Real> renormalization_factors(const CsrPattern& pattern, const std::vector<Real>& degree) {
    std::vector<Real> out(pattern.nnz());
    for (std::size_t r = 0; r < pattern.rows; ++r) {
        for (std::size_t e = pattern.row_offsets[r]; e < pattern.row_offsets[r + 1]; ++e) {
            out[e] = std::sqrt(degree[r] / degree[pattern.col_indices[e]]);
        }
    }
    return out;
}

namespace {

SparseVar attention_from_projection(Var projected, const std::shared_ptr<const CsrPattern>& pattern,
                                    const GatAttentionParams& p) {
    const Var src = ops::matmul(projected, p.attn_src);
    const Var dst = ops::matmul(projected, p.attn_dst);
    const Var scores = ops::leaky_relu(ops::edge_scores(pattern, src, dst), kGatLeakySlope);
    return {pattern, ops::segment_softmax(pattern, scores)};
}

void check_beta(Real beta) {
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("gat_affinity: beta must lie in [0, 1]");
}

}  // namespace

SparseVar gat_attention(Var h, const std::shared_ptr<const CsrPattern>& pattern, const GatAttentionParams& p) {
    if (h.rows() != pattern->rows) throw ShapeError("gat_attention: feature rows != |V|");
    return attention_from_projection(ops::matmul(h, p.projection), pattern, p);
}

SparseVar gat_attention(const SparseVar& h, const std::shared_ptr<const CsrPattern>& pattern,
                        const GatAttentionParams& p) {
    if (h.rows() != pattern->rows) throw ShapeError("gat_attention: feature rows != |V|");
    return attention_from_projection(ops::spmm(h, p.projection), pattern, p);
}

SparseVar gat_affinity(const SparseVar& upsilon, const SparseVar& gcn, std::span<const Real> renorm, Real beta) {
    check_beta(beta);
    if (upsilon.pattern != gcn.pattern && (upsilon.pattern->row_offsets != gcn.pattern->row_offsets ||
                                           upsilon.pattern->col_indices != gcn.pattern->col_indices)) {
        throw ShapeError("gat_affinity: attention and gcn affinity patterns differ");
    }
    if (renorm.size() != gcn.nnz()) throw ShapeError("gat_affinity: renormalization factor count != nnz");
    Tape& tape = *gcn.values.tape();
    if (beta == 1.0) return gcn;
    const Var factors = tape.constant(Matrix(renorm.size(), 1, std::vector<Real>(renorm.begin(), renorm.end())));
    const Var dynamic = ops::scale(ops::mul(upsilon.values, factors), 1.0 - beta);
    if (beta == 0.0) return {gcn.pattern, dynamic};
    return {gcn.pattern, ops::add(ops::scale(gcn.values, beta), dynamic)};
}

CsrMatrix gat_affinity(const CsrMatrix& upsilon, const CsrMatrix& gcn, const std::vector<Real>& degree, Real beta) {
    check_beta(beta);
    if (upsilon.nnz() != gcn.nnz() || upsilon.pattern().col_indices != gcn.pattern().col_indices) {
        throw ShapeError("gat_affinity: attention and gcn affinity patterns differ");
    }
    if (beta == 1.0) return gcn;
    const auto factors = renormalization_factors(gcn.pattern(), degree);
    std::vector<Real> values(gcn.nnz());
    for (std::size_t e = 0; e < values.size(); ++e) {
        const Real dynamic = (1.0 - beta) * (factors[e] * upsilon.values()[e]);
        values[e] = beta == 0.0 ? dynamic : beta * gcn.values()[e] + dynamic;
    }
    return CsrMatrix(gcn.shared_pattern(), std::move(values));
}

}  // namespace capgnn
