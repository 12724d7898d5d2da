#include "capgnn/model.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>

#include "capgnn/errors.hpp"

namespace capgnn {

std::string to_string(Variant v) { return v == Variant::Capgcn ? "capgcn" : "capgat"; }

Variant parse_variant(const std::string& s) {
    std::string lower(s);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "capgcn") return Variant::Capgcn;
    if (lower == "capgat") return Variant::Capgat;
    throw ConfigError("unknown variant \"" + s + "\" (expected capgcn or capgat)");
}

PropagationParams ModelConfig::propagation() const {
    return PropagationParams{alpha, K, leaky_slope, dr_edge, dr_coef_att};
}

void ModelConfig::validate() const {
    propagation().validate();
    for (Real rate : {dr_input, dr_mlp, dr_edge, dr_coef_att}) {
        if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rates must lie in [0, 1)");
    }
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
}

std::vector<ParamRef> ModelParams::entries() {
    std::vector<ParamRef> out;
    auto add = [&](const char* name, Matrix& m, ParamKind kind) {
        if (!m.empty()) out.push_back({name, &m, kind});
    };
    add("mlp.w1", w1, ParamKind::Weight);
    add("mlp.b1", b1, ParamKind::Bias);
    add("mlp.w2", w2, ParamKind::Weight);
    add("mlp.b2", b2, ParamKind::Bias);
    add("prop.coef_logits", coef_logits, ParamKind::CoefficientLogits);
    add("gat.w", gat_w, ParamKind::Weight);
    add("gat.a_src", gat_a_src, ParamKind::Weight);
    add("gat.a_dst", gat_a_dst, ParamKind::Weight);
    add("bn_input.gamma", bn_in_gamma, ParamKind::Norm);
    add("bn_input.beta", bn_in_beta, ParamKind::Norm);
    add("bn_hidden.gamma", bn_hidden_gamma, ParamKind::Norm);
    add("bn_hidden.beta", bn_hidden_beta, ParamKind::Norm);
    return out;
}

std::vector<ConstParamRef> ModelParams::entries() const {
    std::vector<ConstParamRef> out;
    for (const auto& e : const_cast<ModelParams*>(this)->entries()) out.push_back({e.name, e.value, e.kind});
    return out;
}

ModelParams ModelParams::zeros_like() const {
    ModelParams z = *this;
    for (auto& e : z.entries()) *e.value = Matrix(e.value->rows(), e.value->cols());
    return z;
}

std::size_t ModelParams::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries()) n += e.value->size();
    return n;
}

namespace {

Matrix glorot(std::size_t fan_in, std::size_t fan_out, SeededRng& rng) {
    const Real bound = std::sqrt(6.0 / static_cast<Real>(fan_in + fan_out));
    Matrix m(fan_in, fan_out);
    for (Real& v : m.values()) v = rng.uniform(-bound, bound);
    return m;
}

}  // namespace

Model init_model(std::size_t num_features, std::size_t num_classes, const ModelConfig& config, SeededRng& rng) {
    config.validate();
    if (num_features == 0 || num_classes == 0) throw ConfigError("init_model: empty feature or class dimension");
    Model m;
    ModelParams& p = m.params;
    p.w1 = glorot(num_features, kHiddenWidth, rng);
    p.b1 = Matrix(1, kHiddenWidth);
    p.w2 = glorot(kHiddenWidth, num_classes, rng);
    p.b2 = Matrix(1, num_classes);
    p.coef_logits = Matrix(1, config.K);
    if (config.variant == Variant::Capgat) {
        p.gat_w = glorot(num_features, kGatAttentionDim, rng);
        p.gat_a_src = glorot(kGatAttentionDim, 1, rng);
        p.gat_a_dst = glorot(kGatAttentionDim, 1, rng);
    }
    if (config.use_batch_norm) {
        p.bn_in_gamma = Matrix(1, num_features, 1.0);
        p.bn_in_beta = Matrix(1, num_features);
        p.bn_hidden_gamma = Matrix(1, kHiddenWidth, 1.0);
        p.bn_hidden_beta = Matrix(1, kHiddenWidth);
        m.state.input = {Matrix(1, num_features), Matrix(1, num_features, 1.0)};
        m.state.hidden = {Matrix(1, kHiddenWidth), Matrix(1, kHiddenWidth, 1.0)};
    }
    return m;
}

std::vector<int> GraphInputs::labels_of(std::span<const std::size_t> idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels.at(idx[i]);
    return out;
}

GraphInputs prepare_inputs(const GraphDataset& g, bool dense_features) {
    GraphInputs in;
    in.sparse_features = !dense_features;
    if (dense_features) {
        in.features_dense = g.features;
    } else {
        in.features_sparse = CsrMatrix::from_dense(g.features);
    }
    in.gcn = gcn_affinity(g.adjacency);
    in.degree = degree_vector(g.adjacency);
    in.renorm = renormalization_factors(in.gcn.pattern(), in.degree);
    in.labels = g.labels;
    in.train = g.train;
    in.val = g.val;
    in.test = g.test;
    in.num_classes = g.num_classes;
    return in;
}

BoundParams bind(Tape& tape, const ModelParams& p, bool learn_coefficients) {
    BoundParams b;
    b.w1 = tape.leaf(p.w1);
    b.b1 = tape.leaf(p.b1);
    b.w2 = tape.leaf(p.w2);
    b.b2 = tape.leaf(p.b2);
    b.coef_logits = learn_coefficients ? tape.leaf(p.coef_logits) : tape.constant(p.coef_logits);
    auto opt = [&](const Matrix& m) -> std::optional<Var> {
        if (m.empty()) return std::nullopt;
        return tape.leaf(m);
    };
    b.gat_w = opt(p.gat_w);
    b.gat_a_src = opt(p.gat_a_src);
    b.gat_a_dst = opt(p.gat_a_dst);
    b.bn_in_gamma = opt(p.bn_in_gamma);
    b.bn_in_beta = opt(p.bn_in_beta);
    b.bn_hidden_gamma = opt(p.bn_hidden_gamma);
    b.bn_hidden_beta = opt(p.bn_hidden_beta);
    return b;
}

ModelParams collect_gradients(Tape& tape, const BoundParams& b, const ModelParams& layout) {
    ModelParams g = layout.zeros_like();
    auto take = [&](Matrix& dst, const std::optional<Var>& v) {
        if (v && tape.has_grad(*v)) dst = tape.grad(*v);
    };
    take(g.w1, b.w1);
    take(g.b1, b.b1);
    take(g.w2, b.w2);
    take(g.b2, b.b2);
    take(g.coef_logits, b.coef_logits);
    take(g.gat_w, b.gat_w);
    take(g.gat_a_src, b.gat_a_src);
    take(g.gat_a_dst, b.gat_a_dst);
    take(g.bn_in_gamma, b.bn_in_gamma);
    take(g.bn_in_beta, b.bn_in_beta);
    take(g.bn_hidden_gamma, b.bn_hidden_gamma);
    take(g.bn_hidden_beta, b.bn_hidden_beta);
    return g;
}

namespace {

struct NormResult {
    Var out;
    std::optional<BatchStats> stats;
};

NormResult normalize(Var x, const std::optional<Var>& gamma, const std::optional<Var>& beta,
                     const BatchNormRunning& running, bool training) {
    if (!gamma || !beta) throw ConfigError("batch norm enabled but its parameters are missing");
    if (training) {
        auto r = ops::batch_norm_train(x, *gamma, *beta, kBatchNormEps);
        return {r.out, BatchStats{std::move(r.batch_mean), std::move(r.batch_var)}};
    }
    return {ops::batch_norm_eval(x, *gamma, *beta, running.mean, running.var, kBatchNormEps), std::nullopt};
}

}  // namespace

ForwardOutput forward(Tape& tape, const GraphInputs& in, const BoundParams& p, const ModelState& state,
                      const ModelConfig& config, SeededRng& rng, bool training) {
    ForwardOutput out;
    const bool gat = config.variant == Variant::Capgat;
    if (gat && (!p.gat_w || !p.gat_a_src || !p.gat_a_dst)) throw ConfigError("CAPGAT forward without GAT parameters");
    if (p.w1.rows() != in.num_features()) throw ShapeError("forward: w1 rows != feature dimension");
    if (p.w2.cols() != in.num_classes) throw ShapeError("forward: w2 cols != class count");

    const SparseVar gcn = sparse_constant(tape, in.gcn);
    SparseVar affinity = gcn;
    Var h1;
    if (in.sparse_features) {
        if (config.use_batch_norm) throw ConfigError("input batch norm requires dense features");
        const SparseVar x = ops::dropout(sparse_constant(tape, in.features_sparse), config.dr_input, rng, training);
        if (gat) {
            const SparseVar upsilon = gat_attention(x, in.gcn.shared_pattern(), {*p.gat_w, *p.gat_a_src, *p.gat_a_dst});
            affinity = gat_affinity(upsilon, gcn, in.renorm, config.beta);
        }
        h1 = ops::spmm(x, p.w1);
    } else {
        const Var x = ops::dropout(tape.constant(in.features_dense), config.dr_input, rng, training);
        if (gat) {
            const SparseVar upsilon = gat_attention(x, in.gcn.shared_pattern(), {*p.gat_w, *p.gat_a_src, *p.gat_a_dst});
            affinity = gat_affinity(upsilon, gcn, in.renorm, config.beta);
        }
        Var xn = x;
        if (config.use_batch_norm) {
            auto r = normalize(x, p.bn_in_gamma, p.bn_in_beta, state.input, training);
            xn = r.out;
            out.input_stats = std::move(r.stats);
        }
        h1 = ops::matmul(xn, p.w1);
    }
    Var hidden = ops::relu(ops::add_row_bias(h1, p.b1));
    if (config.use_batch_norm) {
        auto r = normalize(hidden, p.bn_hidden_gamma, p.bn_hidden_beta, state.hidden, training);
        hidden = r.out;
        out.hidden_stats = std::move(r.stats);
    }
    hidden = ops::dropout(hidden, config.dr_mlp, rng, training);
    const Var h0 = ops::add_row_bias(ops::matmul(hidden, p.w2), p.b2);

    const Var s = coefficient_attention(p.coef_logits, config.leaky_slope);
    out.logits = propagate(affinity, h0, config.propagation(), s, rng, training);
    return out;
}

Matrix infer_logits(const GraphInputs& in, const Model& model, const ModelConfig& config) {
    Tape tape;
    const BoundParams b = bind(tape, model.params, config.learn_coefficients);
    SeededRng unused(0, 0);
    return forward(tape, in, b, model.state, config, unused, false).logits.value();
}

int argmax_row(std::span<const Real> row) {
    int best = 0;
    for (std::size_t j = 1; j < row.size(); ++j) {
        if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
    }
    return best;
}

std::vector<int> predict(const Matrix& logits) {
    std::vector<int> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) out[r] = argmax_row(logits.row(r));
    return out;
}

void update_running_stats(ModelState& state, const ForwardOutput& out) {
    auto blend = [](BatchNormRunning& running, const std::optional<BatchStats>& batch) {
        if (!batch) return;
        for (std::size_t j = 0; j < running.mean.size(); ++j) {
            running.mean[j] = kBatchNormMomentum * running.mean[j] + (1.0 - kBatchNormMomentum) * batch->mean[j];
            running.var[j] = kBatchNormMomentum * running.var[j] + (1.0 - kBatchNormMomentum) * batch->var[j];
        }
    };
    blend(state.input, out.input_stats);
    blend(state.hidden, out.hidden_stats);
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr char kMagic[4] = {'C', 'A', 'P', 'G'};

template <class T>
void put_le(std::string& buf, T v) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    U bits = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

template <class T>
T get_le(const std::string& buf, std::size_t& pos) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    if (pos + sizeof(T) > buf.size()) throw ValidationError("checkpoint: truncated file");
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        bits |= static_cast<U>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    }
    pos += sizeof(T);
    return std::bit_cast<T>(bits);
}

std::vector<std::pair<std::string, const Matrix*>> checkpoint_layout(const Model& m) {
    std::vector<std::pair<std::string, const Matrix*>> out;
    for (const auto& e : m.params.entries()) out.emplace_back(e.name, e.value);
    auto add = [&](const char* name, const Matrix& mat) {
        if (!mat.empty()) out.emplace_back(name, &mat);
    };
    add("bn_input.running_mean", m.state.input.mean);
    add("bn_input.running_var", m.state.input.var);
    add("bn_hidden.running_mean", m.state.hidden.mean);
    add("bn_hidden.running_var", m.state.hidden.var);
    return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
    std::string buf(kMagic, 4);
    put_le<std::uint32_t>(buf, kCheckpointVersion);
    for (const auto& [name, mat] : checkpoint_layout(model)) {
        put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
        buf += name;
        put_le<std::uint64_t>(buf, mat->rows());
        put_le<std::uint64_t>(buf, mat->cols());
        for (Real v : mat->values()) put_le<double>(buf, v);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("failed writing checkpoint " + path.string());
}

std::vector<std::pair<std::string, Matrix>> read_checkpoint_entries(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw ValidationError("checkpoint: bad magic in " + path.string());
    }
    std::size_t pos = 4;
    const auto version = get_le<std::uint32_t>(buf, pos);
    if (version != kCheckpointVersion) {
        throw ValidationError("checkpoint: unsupported format version " + std::to_string(version));
    }
    std::vector<std::pair<std::string, Matrix>> entries;
    while (pos < buf.size()) {
        const auto len = get_le<std::uint32_t>(buf, pos);
        if (pos + len > buf.size()) throw ValidationError("checkpoint: truncated name");
        std::string name = buf.substr(pos, len);
        pos += len;
        const auto rows = get_le<std::uint64_t>(buf, pos);
        const auto cols = get_le<std::uint64_t>(buf, pos);
        if (cols != 0 && rows > (buf.size() - pos) / 8 / cols) throw ValidationError("checkpoint: truncated tensor " + name);
        std::vector<Real> values(rows * cols);
        for (Real& v : values) v = get_le<double>(buf, pos);
        entries.emplace_back(std::move(name), Matrix(rows, cols, std::move(values)));
    }
    return entries;
}

Model load_checkpoint(const std::filesystem::path& path, const Model& expected) {
    const auto entries = read_checkpoint_entries(path);
    Model out = expected;
    auto layout = checkpoint_layout(out);
    if (entries.size() != layout.size()) {
        throw ValidationError("checkpoint: " + std::to_string(entries.size()) + " tensors, expected " +
                              std::to_string(layout.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const auto& [name, mat] = entries[i];
        if (name != layout[i].first) {
            throw ValidationError("checkpoint: tensor " + std::to_string(i) + " is \"" + name + "\", expected \"" +
                                  layout[i].first + "\"");
        }
        if (!mat.same_shape(*layout[i].second)) {
            throw ValidationError("checkpoint: \"" + name + "\" has shape " + std::to_string(mat.rows()) + "x" +
                                  std::to_string(mat.cols()) + ", expected " +
                                  std::to_string(layout[i].second->rows()) + "x" +
                                  std::to_string(layout[i].second->cols()));
        }
        *const_cast<Matrix*>(layout[i].second) = mat;
    }
    return out;
}

}  // namespace capgnn
