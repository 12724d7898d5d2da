#include "capgnn/tape.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <string>

#include "capgnn/errors.hpp"

namespace capgnn {

namespace {

std::atomic<bool> g_matmul_fault{false};
thread_local bool t_kink_tracking = false;
thread_local std::uint64_t t_kink_signature = 0;

void track_kinks(const Matrix& x) {
    if (!t_kink_tracking) return;
    std::uint64_t h = t_kink_signature;
    for (Real v : x.values()) h = mix64(h ^ (v > 0.0 ? 0x9bULL : 0x3dULL));
    t_kink_signature = h;
}

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_tape(Var a, Var b, const char* op) {
    if (a.tape() != b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

Matrix map(const Matrix& a, auto&& f) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

constexpr Real kNormFloor = 1e-12;

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

const Matrix& Var::value() const { return tape_->value(*this); }
bool Var::requires_grad() const { return tape_->requires_grad(*this); }

Var Tape::constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, false, {}});
    return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, true, {}});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (Var in : inputs) {
        if (in.tape() != this) throw std::invalid_argument("Tape::record: input from another tape");
        needs = needs || nodes_[in.index()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}});
    return Var(this, nodes_.size() - 1);
}

const Matrix& Tape::grad(Var v) {
    Node& n = nodes_.at(v.index());
    if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    return n.grad;
}

void Tape::accumulate(Var v, const Matrix& g) {
    Node& n = nodes_.at(v.index());
    if (!n.requires_grad) return;
    require_same_shape(n.value, g, "Tape::accumulate");
    if (n.grad.empty()) {
        n.grad = g;
        return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void Tape::accumulate(Var v, Matrix&& g) {
    Node& n = nodes_.at(v.index());
    if (!n.requires_grad) return;
    require_same_shape(n.value, g, "Tape::accumulate");
    if (n.grad.empty()) {
        n.grad = std::move(g);
        return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void Tape::backward(Var root) {
    if (root.tape() != this) throw std::invalid_argument("Tape::backward: root from another tape");
    const Matrix& rv = value(root);
    if (rv.rows() != 1 || rv.cols() != 1) {
        throw ShapeError("Tape::backward: root must be 1x1, got " + shape_str(rv));
    }
    if (backward_done_) throw std::logic_error("Tape::backward: tape already differentiated");
    backward_done_ = true;
    nodes_[root.index()].grad = Matrix(1, 1, 1.0);
    for (std::size_t i = root.index() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.backward && !n.grad.empty()) n.backward(*this, n.grad);
    }
}

SparseVar sparse_constant(Tape& tape, const CsrMatrix& m) {
    const auto v = m.values();
    return {m.shared_pattern(), tape.constant(Matrix(m.nnz(), 1, std::vector<Real>(v.begin(), v.end())))};
}

SparseVar sparse_leaf(Tape& tape, const CsrMatrix& m) {
    const auto v = m.values();
    return {m.shared_pattern(), tape.leaf(Matrix(m.nnz(), 1, std::vector<Real>(v.begin(), v.end())))};
}

CsrMatrix sparse_value(const SparseVar& s) {
    const auto v = s.values.value().values();
    return CsrMatrix(s.pattern, std::vector<Real>(v.begin(), v.end()));
}

// ---------------------------------------------------------------------------
// kernels

namespace kernels {

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ " + shape_str(a) + " x " + shape_str(b));
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        Real* dst = &out(i, 0);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const Real aik = a(i, k);
            if (aik == 0.0) continue;
            const Real* src = &b(k, 0);
            for (std::size_t j = 0; j < n; ++j) dst[j] += aik * src[j];
        }
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw ShapeError("matmul_tn: row counts differ");
    Matrix out(a.cols(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const Real* brow = &b(r, 0);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const Real ari = a(r, i);
            if (ari == 0.0) continue;
            Real* dst = &out(i, 0);
            for (std::size_t j = 0; j < n; ++j) dst[j] += ari * brow[j];
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw ShapeError("matmul_nt: column counts differ");
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const Real* arow = &a(i, 0);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const Real* brow = &b(j, 0);
            Real acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * brow[k];
            out(i, j) = acc;
        }
    }
    return out;
}

Matrix spmm(const CsrPattern& p, std::span<const Real> values, const Matrix& d) {
    if (p.cols != d.rows()) {
        throw ShapeError("spmm: sparse cols " + std::to_string(p.cols) + " != dense rows " +
                         std::to_string(d.rows()));
    }
    Matrix out(p.rows, d.cols());
    const std::size_t n = d.cols();
    for (std::size_t r = 0; r < p.rows; ++r) {
        Real* dst = &out(r, 0);
        for (std::size_t e = p.row_offsets[r]; e < p.row_offsets[r + 1]; ++e) {
            const Real v = values[e];
            if (v == 0.0) continue;
            const Real* src = &d(p.col_indices[e], 0);
            for (std::size_t j = 0; j < n; ++j) dst[j] += v * src[j];
        }
    }
    return out;
}

Matrix spmm_transposed(const CsrPattern& p, std::span<const Real> values, const Matrix& d) {
    if (p.rows != d.rows()) throw ShapeError("spmm_transposed: shape mismatch");
    Matrix out(p.cols, d.cols());
    const std::size_t n = d.cols();
    for (std::size_t r = 0; r < p.rows; ++r) {
        const Real* src = &d(r, 0);
        for (std::size_t e = p.row_offsets[r]; e < p.row_offsets[r + 1]; ++e) {
            const Real v = values[e];
            if (v == 0.0) continue;
            Real* dst = &out(p.col_indices[e], 0);
            for (std::size_t j = 0; j < n; ++j) dst[j] += v * src[j];
        }
    }
    return out;
}

Matrix softmax_rows(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const auto in = a.row(r);
        auto dst = out.row(r);
        const Real mx = *std::max_element(in.begin(), in.end());
        Real total = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) total += dst[j] = std::exp(in[j] - mx);
        for (Real& v : dst) v /= total;
    }
    return out;
}

Matrix l2_normalize_rows(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const auto in = a.row(r);
        Real sq = 0.0;
        for (Real v : in) sq += v * v;
        const Real norm = std::max(std::sqrt(sq), kNormFloor);
        auto dst = out.row(r);
        for (std::size_t j = 0; j < in.size(); ++j) dst[j] = in[j] / norm;
    }
    return out;
}

std::vector<Real> dropout_mask(std::size_t n, Real rate, SeededRng& rng) {
    const Real keep_scale = 1.0 / (1.0 - rate);
    std::vector<Real> mask(n);
    for (Real& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
    return mask;
}

}  // namespace kernels

namespace {

void check_rate(Real rate) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ConfigError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    }
}

}  // namespace

CsrMatrix dropout_sparse(const CsrMatrix& s, Real rate, SeededRng& rng, bool training) {
    check_rate(rate);
    if (!training || rate == 0.0) return s;
    const auto mask = kernels::dropout_mask(s.nnz(), rate, rng);
    std::vector<Real> values(s.values().begin(), s.values().end());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] *= mask[i];
    return CsrMatrix(s.shared_pattern(), std::move(values));
}

Matrix dropout_dense(const Matrix& x, Real rate, SeededRng& rng, bool training) {
    check_rate(rate);
    if (!training || rate == 0.0) return x;
    const auto mask = kernels::dropout_mask(x.size(), rate, rng);
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * mask[i];
    return out;
}

namespace testing {
void set_matmul_backward_fault(bool enabled) { g_matmul_fault = enabled; }
bool matmul_backward_fault() { return g_matmul_fault; }
void set_kink_tracking(bool enabled) {
    t_kink_tracking = enabled;
    t_kink_signature = 0;
}
std::uint64_t take_kink_signature() {
    const std::uint64_t s = t_kink_signature;
    t_kink_signature = 0;
    return s;
}
}  // namespace testing

// ---------------------------------------------------------------------------
// ops

namespace ops {

Var matmul(Var a, Var b) {
    require_same_tape(a, b, "matmul");
    Tape& t = *a.tape();
    Matrix out = kernels::matmul(a.value(), b.value());
    const Var in[] = {a, b};
    return t.record(std::move(out), in, [a, b](Tape& tape, const Matrix& g) {
        if (a.requires_grad()) tape.accumulate(a, kernels::matmul_nt(g, b.value()));
        if (b.requires_grad()) {
            Matrix gb = kernels::matmul_tn(a.value(), g);
            if (g_matmul_fault) {
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= 1.05;
            }
            tape.accumulate(b, std::move(gb));
        }
    });
}

Var spmm(const SparseVar& s, Var d) {
    require_same_tape(s.values, d, "spmm");
    Tape& t = *d.tape();
    if (s.values.rows() != s.nnz() || s.values.cols() != 1) throw ShapeError("spmm: values must be nnz x 1");
    Matrix out = kernels::spmm(*s.pattern, s.values.value().values(), d.value());
    const Var in[] = {s.values, d};
    return t.record(std::move(out), in, [s, d](Tape& tape, const Matrix& g) {
        const CsrPattern& p = *s.pattern;
        if (d.requires_grad()) tape.accumulate(d, kernels::spmm_transposed(p, s.values.value().values(), g));
        if (s.values.requires_grad()) {
            const Matrix& dv = d.value();
            Matrix gv(p.nnz(), 1);
            for (std::size_t r = 0; r < p.rows; ++r) {
                const auto grow = g.row(r);
                for (std::size_t e = p.row_offsets[r]; e < p.row_offsets[r + 1]; ++e) {
                    const auto drow = dv.row(p.col_indices[e]);
                    Real acc = 0.0;
                    for (std::size_t j = 0; j < grow.size(); ++j) acc += grow[j] * drow[j];
                    gv[e] = acc;
                }
            }
            tape.accumulate(s.values, std::move(gv));
        }
    });
}

Var add(Var a, Var b) {
    require_same_tape(a, b, "add");
    require_same_shape(a.value(), b.value(), "add");
    Matrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    const Var in[] = {a, b};
    return a.tape()->record(std::move(out), in, [a, b](Tape& tape, const Matrix& g) {
        tape.accumulate(a, g);
        tape.accumulate(b, g);
    });
}

Var sub(Var a, Var b) {
    require_same_tape(a, b, "sub");
    require_same_shape(a.value(), b.value(), "sub");
    Matrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    const Var in[] = {a, b};
    return a.tape()->record(std::move(out), in, [a, b](Tape& tape, const Matrix& g) {
        tape.accumulate(a, g);
        if (b.requires_grad()) tape.accumulate(b, map(g, [](Real v) { return -v; }));
    });
}

Var mul(Var a, Var b) {
    require_same_tape(a, b, "mul");
    require_same_shape(a.value(), b.value(), "mul");
    const Var in[] = {a, b};
    return a.tape()->record(hadamard(a.value(), b.value()), in, [a, b](Tape& tape, const Matrix& g) {
        if (a.requires_grad()) tape.accumulate(a, hadamard(g, b.value()));
        if (b.requires_grad()) tape.accumulate(b, hadamard(g, a.value()));
    });
}

Var scale(Var a, Real c) {
    const Var in[] = {a};
    return a.tape()->record(map(a.value(), [c](Real v) { return c * v; }), in,
                            [a, c](Tape& tape, const Matrix& g) {
                                tape.accumulate(a, map(g, [c](Real v) { return c * v; }));
                            });
}

Var add_row_bias(Var a, Var bias) {
    require_same_tape(a, bias, "add_row_bias");
    const Matrix& av = a.value();
    const Matrix& bv = bias.value();
    if (bv.rows() != 1 || bv.cols() != av.cols()) {
        throw ShapeError("add_row_bias: bias " + shape_str(bv) + " for input " + shape_str(av));
    }
    Matrix out = av;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += bv[j];
    }
    const Var in[] = {a, bias};
    return a.tape()->record(std::move(out), in, [a, bias](Tape& tape, const Matrix& g) {
        tape.accumulate(a, g);
        if (bias.requires_grad()) {
            Matrix gb(1, g.cols());
            for (std::size_t r = 0; r < g.rows(); ++r) {
                const auto row = g.row(r);
                for (std::size_t j = 0; j < row.size(); ++j) gb[j] += row[j];
            }
            tape.accumulate(bias, std::move(gb));
        }
    });
}

Var scale_by(Var a, Var scalar) {
    require_same_tape(a, scalar, "scale_by");
    if (scalar.rows() != 1 || scalar.cols() != 1) throw ShapeError("scale_by: scalar must be 1x1");
    const Real c = scalar.value()[0];
    const Var in[] = {a, scalar};
    return a.tape()->record(map(a.value(), [c](Real v) { return c * v; }), in,
                            [a, scalar](Tape& tape, const Matrix& g) {
                                const Real c = scalar.value()[0];
                                if (a.requires_grad()) tape.accumulate(a, map(g, [c](Real v) { return c * v; }));
                                if (scalar.requires_grad()) {
                                    Real acc = 0.0;
                                    const Matrix& av = a.value();
                                    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
                                    tape.accumulate(scalar, Matrix(1, 1, acc));
                                }
                            });
}

Var element(Var a, std::size_t r, std::size_t c) {
    const Matrix& av = a.value();
    if (r >= av.rows() || c >= av.cols()) throw ShapeError("element: index out of range");
    const Var in[] = {a};
    return a.tape()->record(Matrix(1, 1, av(r, c)), in, [a, r, c](Tape& tape, const Matrix& g) {
        Matrix ga(a.rows(), a.cols());
        ga(r, c) = g[0];
        tape.accumulate(a, std::move(ga));
    });
}

Var relu(Var a) {
    track_kinks(a.value());
    const Var in[] = {a};
    return a.tape()->record(map(a.value(), [](Real v) { return v > 0.0 ? v : 0.0; }), in,
                            [a](Tape& tape, const Matrix& g) {
                                const Matrix& av = a.value();
                                Matrix ga(g.rows(), g.cols());
                                for (std::size_t i = 0; i < g.size(); ++i) ga[i] = av[i] > 0.0 ? g[i] : 0.0;
                                tape.accumulate(a, std::move(ga));
                            });
}

Var leaky_relu(Var a, Real slope) {
    track_kinks(a.value());
    const Var in[] = {a};
    return a.tape()->record(map(a.value(), [slope](Real v) { return v > 0.0 ? v : slope * v; }), in,
                            [a, slope](Tape& tape, const Matrix& g) {
                                const Matrix& av = a.value();
                                Matrix ga(g.rows(), g.cols());
                                for (std::size_t i = 0; i < g.size(); ++i) {
                                    ga[i] = av[i] > 0.0 ? g[i] : slope * g[i];
                                }
                                tape.accumulate(a, std::move(ga));
                            });
}

Var exp(Var a) {
    auto y = std::make_shared<const Matrix>(map(a.value(), [](Real v) { return std::exp(v); }));
    const Var in[] = {a};
    return a.tape()->record(*y, in, [a, y](Tape& tape, const Matrix& g) {
        tape.accumulate(a, hadamard(g, *y));
    });
}

Var log(Var a) {
    const Matrix& av = a.value();
    for (std::size_t i = 0; i < av.size(); ++i) {
        if (!(av[i] > 0.0)) throw DomainError("log: nonpositive entry " + std::to_string(av[i]));
    }
    const Var in[] = {a};
    return a.tape()->record(map(av, [](Real v) { return std::log(v); }), in,
                            [a](Tape& tape, const Matrix& g) {
                                const Matrix& av = a.value();
                                Matrix ga(g.rows(), g.cols());
                                for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] / av[i];
                                tape.accumulate(a, std::move(ga));
                            });
}

Var softmax_rows(Var a) {
    Tape& t = *a.tape();
    Matrix y = kernels::softmax_rows(a.value());
    const Var in[] = {a};
    // Backward needs y; keep a copy in the closure.
    auto shared_y = std::make_shared<const Matrix>(y);
    return t.record(std::move(y), in, [a, shared_y](Tape& tape, const Matrix& g) {
        const Matrix& yv = *shared_y;
        Matrix ga(g.rows(), g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
            const auto gr = g.row(r);
            const auto yr = yv.row(r);
            Real dot = 0.0;
            for (std::size_t j = 0; j < gr.size(); ++j) dot += gr[j] * yr[j];
            auto dst = ga.row(r);
            for (std::size_t j = 0; j < gr.size(); ++j) dst[j] = yr[j] * (gr[j] - dot);
        }
        tape.accumulate(a, std::move(ga));
    });
}

Var log_softmax_rows(Var a) {
    const Matrix& av = a.value();
    Matrix out(av.rows(), av.cols());
    for (std::size_t r = 0; r < av.rows(); ++r) {
        const auto in = av.row(r);
        const Real mx = *std::max_element(in.begin(), in.end());
        Real total = 0.0;
        for (Real v : in) total += std::exp(v - mx);
        const Real lse = mx + std::log(total);
        auto dst = out.row(r);
        for (std::size_t j = 0; j < in.size(); ++j) dst[j] = in[j] - lse;
    }
    auto probs = std::make_shared<const Matrix>(map(out, [](Real v) { return std::exp(v); }));
    const Var in[] = {a};
    return a.tape()->record(std::move(out), in, [a, probs](Tape& tape, const Matrix& g) {
        Matrix ga(g.rows(), g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
            const auto gr = g.row(r);
            const auto pr = probs->row(r);
            Real total = 0.0;
            for (Real v : gr) total += v;
            auto dst = ga.row(r);
            for (std::size_t j = 0; j < gr.size(); ++j) dst[j] = gr[j] - pr[j] * total;
        }
        tape.accumulate(a, std::move(ga));
    });
}

Var l2_normalize_rows(Var a) {
    const Matrix& av = a.value();
    Matrix y = kernels::l2_normalize_rows(av);
    std::vector<Real> norms(av.rows());
    for (std::size_t r = 0; r < av.rows(); ++r) {
        Real sq = 0.0;
        for (Real v : av.row(r)) sq += v * v;
        norms[r] = std::sqrt(sq);
    }
    auto shared_y = std::make_shared<const Matrix>(y);
    const Var in[] = {a};
    return a.tape()->record(std::move(y), in, [a, shared_y, norms = std::move(norms)](Tape& tape, const Matrix& g) {
        Matrix ga(g.rows(), g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
            const auto gr = g.row(r);
            auto dst = ga.row(r);
            if (norms[r] <= kNormFloor) {
                for (std::size_t j = 0; j < gr.size(); ++j) dst[j] = gr[j] / kNormFloor;
                continue;
            }
            const auto yr = shared_y->row(r);
            Real dot = 0.0;
            for (std::size_t j = 0; j < gr.size(); ++j) dot += gr[j] * yr[j];
            for (std::size_t j = 0; j < gr.size(); ++j) dst[j] = (gr[j] - yr[j] * dot) / norms[r];
        }
        tape.accumulate(a, std::move(ga));
    });
}

Var dropout(Var a, Real rate, SeededRng& rng, bool training) {
    check_rate(rate);
    if (!training || rate == 0.0) return a;
    const Matrix& av = a.value();
    auto mask = std::make_shared<const std::vector<Real>>(kernels::dropout_mask(av.size(), rate, rng));
    Matrix out(av.rows(), av.cols());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * (*mask)[i];
    const Var in[] = {a};
    return a.tape()->record(std::move(out), in, [a, mask](Tape& tape, const Matrix& g) {
        Matrix ga(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * (*mask)[i];
        tape.accumulate(a, std::move(ga));
    });
}

SparseVar dropout(const SparseVar& s, Real rate, SeededRng& rng, bool training) {
    return {s.pattern, dropout(s.values, rate, rng, training)};
}

Var stop_gradient(Var a) { return a.tape()->constant(a.value()); }

Var sum(Var a) {
    Real total = 0.0;
    for (Real v : a.value().values()) total += v;
    const Var in[] = {a};
    return a.tape()->record(Matrix(1, 1, total), in, [a](Tape& tape, const Matrix& g) {
        tape.accumulate(a, Matrix(a.rows(), a.cols(), g[0]));
    });
}

Var gather_mean(Var a, std::span<const std::size_t> rows, std::span<const int> cols) {
    if (rows.size() != cols.size()) throw ShapeError("gather_mean: index arrays differ in length");
    if (rows.empty()) throw ConfigError("gather_mean: empty selection");
    const Matrix& av = a.value();
    std::vector<std::size_t> flat(rows.size());
    Real total = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= av.rows() || cols[i] < 0 || static_cast<std::size_t>(cols[i]) >= av.cols()) {
            throw ShapeError("gather_mean: index out of range");
        }
        flat[i] = rows[i] * av.cols() + static_cast<std::size_t>(cols[i]);
        total += av[flat[i]];
    }
    const Real inv = 1.0 / static_cast<Real>(rows.size());
    const Var in[] = {a};
    return a.tape()->record(Matrix(1, 1, total * inv), in,
                            [a, flat = std::move(flat), inv](Tape& tape, const Matrix& g) {
                                Matrix ga(a.rows(), a.cols());
                                for (std::size_t idx : flat) ga[idx] += g[0] * inv;
                                tape.accumulate(a, std::move(ga));
                            });
}

Var edge_scores(const std::shared_ptr<const CsrPattern>& pattern, Var src, Var dst) {
    require_same_tape(src, dst, "edge_scores");
    const CsrPattern& p = *pattern;
    if (src.rows() != p.rows || src.cols() != 1 || dst.rows() != p.cols || dst.cols() != 1) {
        throw ShapeError("edge_scores: score vectors must be |V| x 1");
    }
    Matrix out(p.nnz(), 1);
    const Matrix& sv = src.value();
    const Matrix& dv = dst.value();
    for (std::size_t r = 0; r < p.rows; ++r) {
        for (std::size_t e = p.row_offsets[r]; e < p.row_offsets[r + 1]; ++e) {
            out[e] = sv[r] + dv[p.col_indices[e]];
        }
    }
    const Var in[] = {src, dst};
    return src.tape()->record(std::move(out), in, [pattern, src, dst](Tape& tape, const Matrix& g) {
        const CsrPattern& p = *pattern;
        Matrix gs(p.rows, 1), gd(p.cols, 1);
        for (std::size_t r = 0; r < p.rows; ++r) {
            for (std::size_t e = p.row_offsets[r]; e < p.row_offsets[r + 1]; ++e) {
                gs[r] += g[e];
                gd[p.col_indices[e]] += g[e];
            }
        }
        tape.accumulate(src, std::move(gs));
        tape.accumulate(dst, std::move(gd));
    });
}

Var segment_softmax(const std::shared_ptr<const CsrPattern>& pattern, Var values) {
    const CsrPattern& p = *pattern;
    if (values.rows() != p.nnz() || values.cols() != 1) throw ShapeError("segment_softmax: values must be nnz x 1");
    const Matrix& v = values.value();
    Matrix y(p.nnz(), 1);
    for (std::size_t r = 0; r < p.rows; ++r) {
        const std::size_t b = p.row_offsets[r], e_end = p.row_offsets[r + 1];
        if (b == e_end) continue;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t e = b; e < e_end; ++e) mx = std::max(mx, v[e]);
        Real total = 0.0;
        for (std::size_t e = b; e < e_end; ++e) total += y[e] = std::exp(v[e] - mx);
        for (std::size_t e = b; e < e_end; ++e) y[e] /= total;
    }
    auto shared_y = std::make_shared<const Matrix>(y);
    const Var in[] = {values};
    return values.tape()->record(std::move(y), in, [pattern, values, shared_y](Tape& tape, const Matrix& g) {
        const CsrPattern& p = *pattern;
        const Matrix& yv = *shared_y;
        Matrix gv(p.nnz(), 1);
        for (std::size_t r = 0; r < p.rows; ++r) {
            Real dot = 0.0;
            for (std::size_t e = p.row_offsets[r]; e < p.row_offsets[r + 1]; ++e) dot += g[e] * yv[e];
            for (std::size_t e = p.row_offsets[r]; e < p.row_offsets[r + 1]; ++e) gv[e] = yv[e] * (g[e] - dot);
        }
        tape.accumulate(values, std::move(gv));
    });
}

namespace {

void check_affine(const Matrix& x, const Matrix& gamma, const Matrix& beta) {
    if (gamma.rows() != 1 || gamma.cols() != x.cols() || !gamma.same_shape(beta)) {
        throw ShapeError("batch_norm: gamma/beta must be 1 x " + std::to_string(x.cols()));
    }
}

}  // namespace

BatchNormOutput batch_norm_train(Var x, Var gamma, Var beta, Real eps) {
    require_same_tape(x, gamma, "batch_norm_train");
    require_same_tape(x, beta, "batch_norm_train");
    const Matrix& xv = x.value();
    check_affine(xv, gamma.value(), beta.value());
    const std::size_t n = xv.rows(), d = xv.cols();
    Matrix mean(1, d), var(1, d);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < d; ++j) mean[j] += xv(r, j);
    }
    for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<Real>(n);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            const Real c = xv(r, j) - mean[j];
            var[j] += c * c;
        }
    }
    for (std::size_t j = 0; j < d; ++j) var[j] /= static_cast<Real>(n);

    auto inv_std = std::make_shared<std::vector<Real>>(d);
    for (std::size_t j = 0; j < d; ++j) (*inv_std)[j] = 1.0 / std::sqrt(var[j] + eps);
    auto xhat = std::make_shared<Matrix>(n, d);
    Matrix out(n, d);
    const Matrix& gv = gamma.value();
    const Matrix& bv = beta.value();
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            const Real h = (xv(r, j) - mean[j]) * (*inv_std)[j];
            (*xhat)(r, j) = h;
            out(r, j) = gv[j] * h + bv[j];
        }
    }
    const Var in[] = {x, gamma, beta};
    Var y = x.tape()->record(std::move(out), in, [x, gamma, beta, xhat, inv_std](Tape& tape, const Matrix& g) {
        const std::size_t n = g.rows(), d = g.cols();
        Matrix ggamma(1, d), gbeta(1, d);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
                ggamma[j] += g(r, j) * (*xhat)(r, j);
                gbeta[j] += g(r, j);
            }
        }
        if (x.requires_grad()) {
            const Matrix& gm = gamma.value();
            const Real inv_n = 1.0 / static_cast<Real>(n);
            Matrix gx(n, d);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t j = 0; j < d; ++j) {
                    gx(r, j) = gm[j] * (*inv_std)[j] * inv_n *
                               (static_cast<Real>(n) * g(r, j) - gbeta[j] - (*xhat)(r, j) * ggamma[j]);
                }
            }
            tape.accumulate(x, std::move(gx));
        }
        tape.accumulate(gamma, std::move(ggamma));
        tape.accumulate(beta, std::move(gbeta));
    });
    return {y, std::move(mean), std::move(var)};
}

Var batch_norm_eval(Var x, Var gamma, Var beta, const Matrix& running_mean,
                    const Matrix& running_var, Real eps) {
    require_same_tape(x, gamma, "batch_norm_eval");
    require_same_tape(x, beta, "batch_norm_eval");
    const Matrix& xv = x.value();
    check_affine(xv, gamma.value(), beta.value());
    check_affine(xv, running_mean, running_var);
    const std::size_t n = xv.rows(), d = xv.cols();
    auto inv_std = std::make_shared<std::vector<Real>>(d);
    for (std::size_t j = 0; j < d; ++j) (*inv_std)[j] = 1.0 / std::sqrt(running_var[j] + eps);
    auto xhat = std::make_shared<Matrix>(n, d);
    Matrix out(n, d);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            const Real h = (xv(r, j) - running_mean[j]) * (*inv_std)[j];
            (*xhat)(r, j) = h;
            out(r, j) = gamma.value()[j] * h + beta.value()[j];
        }
    }
    const Var in[] = {x, gamma, beta};
    return x.tape()->record(std::move(out), in, [x, gamma, beta, xhat, inv_std](Tape& tape, const Matrix& g) {
        const std::size_t n = g.rows(), d = g.cols();
        Matrix ggamma(1, d), gbeta(1, d), gx(n, d);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
                ggamma[j] += g(r, j) * (*xhat)(r, j);
                gbeta[j] += g(r, j);
                gx(r, j) = g(r, j) * gamma.value()[j] * (*inv_std)[j];
            }
        }
        tape.accumulate(x, std::move(gx));
        tape.accumulate(gamma, std::move(ggamma));
        tape.accumulate(beta, std::move(gbeta));
    });
}

}  // namespace ops
}  // namespace capgnn
