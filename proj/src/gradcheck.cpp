#include "capgnn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "capgnn/config.hpp"
#include "capgnn/errors.hpp"
#include "capgnn/graph.hpp"
#include "capgnn/model.hpp"
#include "capgnn/objective.hpp"
#include "capgnn/propagation.hpp"
#include "capgnn/synthetic.hpp"
#include "capgnn/trainer.hpp"

namespace capgnn {

bool GradcheckReport::ok() const {
    return !results.empty() &&
           std::all_of(results.begin(), results.end(), [](const GradcheckResult& r) { return r.pass(); });
}

std::vector<std::string> GradcheckReport::failures() const {
    std::vector<std::string> out;
    for (const auto& r : results) {
        if (!r.pass()) out.push_back(r.suite + "/" + r.group);
    }
    return out;
}

std::string GradcheckReport::format() const {
    std::ostringstream out;
    char line[256];
    for (const auto& r : results) {
        std::snprintf(line, sizeof line, "%-14s %-26s max_rel=%.3e checked=%-4zu skipped=%-3zu %s\n", r.suite.c_str(),
                      r.group.c_str(), r.max_rel_error, r.checked, r.skipped, r.pass() ? "ok" : "FAIL");
        out << line;
    }
    return out.str();
}

Real relative_error(Real a, Real b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

std::vector<GradcheckResult> compare_with_finite_differences(const std::string& suite,
                                                             const std::vector<std::string>& names,
                                                             const ValueFn& f, const std::vector<Matrix>& inputs,
                                                             const std::vector<Matrix>& analytic,
                                                             const GradcheckOptions& options, SeededRng& rng) {
    if (names.size() != inputs.size() || analytic.size() != inputs.size()) {
        throw ShapeError("gradcheck: names, inputs and gradients differ in count");
    }
    std::vector<GradcheckResult> results;
    std::vector<Matrix> probe = inputs;
    testing::set_kink_tracking(true);
    for (std::size_t g = 0; g < inputs.size(); ++g) {
        if (!analytic[g].same_shape(inputs[g])) throw ShapeError("gradcheck: gradient shape mismatch for " + names[g]);
        GradcheckResult r{suite, names[g], 0.0, 0, 0, options.threshold};
        const std::size_t n = inputs[g].size();
        std::vector<std::size_t> coords(n);
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (n > options.max_coords) {
            for (std::size_t i = 0; i < options.max_coords; ++i) std::swap(coords[i], coords[i + rng.below(n - i)]);
            coords.resize(options.max_coords);
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t j : coords) {
            const Real x = inputs[g][j];
            probe[g][j] = x + options.step;
            testing::take_kink_signature();
            const Real up = f(probe);
            const std::uint64_t sig_up = testing::take_kink_signature();
            probe[g][j] = x - options.step;
            const Real down = f(probe);
            const std::uint64_t sig_down = testing::take_kink_signature();
            probe[g][j] = x;
            if (sig_up != sig_down) {
                ++r.skipped;
                continue;
            }
            const Real fd = (up - down) / (2.0 * options.step);
            r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[g][j], fd));
            ++r.checked;
        }
        results.push_back(r);
    }
    testing::set_kink_tracking(false);
    return results;
}

std::vector<GradcheckResult> check_tape_gradients(const std::string& suite, const std::vector<std::string>& names,
                                                  const TapeFn& f, const std::vector<Matrix>& inputs,
                                                  const GradcheckOptions& options, SeededRng& rng) {
    std::vector<Matrix> analytic;
    {
        Tape tape;
        std::vector<Var> leaves;
        for (const auto& m : inputs) leaves.push_back(tape.leaf(m));
        const Var root = f(tape, leaves);
        tape.backward(root);
        for (const Var& v : leaves) analytic.push_back(tape.grad(v));
    }
    const ValueFn value = [&f](const std::vector<Matrix>& xs) {
        Tape tape;
        std::vector<Var> leaves;
        for (const auto& m : xs) leaves.push_back(tape.constant(m));
        return f(tape, leaves).value()[0];
    };
    return compare_with_finite_differences(suite, names, value, inputs, analytic, options, rng);
}

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, SeededRng& rng, Real lo = -1.0, Real hi = 1.0) {
    Matrix m(rows, cols);
    for (Real& v : m.values()) v = rng.uniform(lo, hi);
    return m;
}

/// sum(out * weights) with fixed random weights, so every output entry contributes.
Var weighted_sum(Var out, const Matrix& weights) {
    return ops::sum(ops::mul(out, out.tape()->constant(weights)));
}

SparseVar with_values(const std::shared_ptr<const CsrPattern>& pattern, Var values) { return {pattern, values}; }

void append(GradcheckReport& report, std::vector<GradcheckResult> r) {
    report.results.insert(report.results.end(), r.begin(), r.end());
}

void op_suites(GradcheckReport& report, const GradcheckOptions& opt, SeededRng& rng) {
    auto unary = [&](const std::string& name, std::function<Var(Var)> op, Matrix x) {
        Tape probe;
        const Matrix out_shape = op(probe.constant(x)).value();
        const Matrix weights = random_matrix(out_shape.rows(), out_shape.cols(), rng);
        append(report, check_tape_gradients(
                           "ops", {name}, [op, weights](Tape&, std::span<const Var> in) {
                               return weighted_sum(op(in[0]), weights);
                           },
                           {std::move(x)}, opt, rng));
    };
    auto multi = [&](const std::string& name, const std::vector<std::string>& args,
                     std::function<Var(std::span<const Var>)> op, std::vector<Matrix> xs) {
        Tape probe;
        std::vector<Var> leaves;
        for (const auto& m : xs) leaves.push_back(probe.constant(m));
        const Matrix out_shape = op(leaves).value();
        const Matrix weights = random_matrix(out_shape.rows(), out_shape.cols(), rng);
        std::vector<std::string> names;
        for (const auto& a : args) names.push_back(name + "[" + a + "]");
        append(report, check_tape_gradients(
                           "ops", names,
                           [op, weights](Tape&, std::span<const Var> in) { return weighted_sum(op(in), weights); },
                           std::move(xs), opt, rng));
    };

    multi("matmul", {"a", "b"}, [](std::span<const Var> v) { return ops::matmul(v[0], v[1]); },
          {random_matrix(3, 4, rng), random_matrix(4, 2, rng)});
    multi("add", {"a", "b"}, [](std::span<const Var> v) { return ops::add(v[0], v[1]); },
          {random_matrix(3, 4, rng), random_matrix(3, 4, rng)});
    multi("sub", {"a", "b"}, [](std::span<const Var> v) { return ops::sub(v[0], v[1]); },
          {random_matrix(3, 4, rng), random_matrix(3, 4, rng)});
    multi("mul", {"a", "b"}, [](std::span<const Var> v) { return ops::mul(v[0], v[1]); },
          {random_matrix(3, 4, rng), random_matrix(3, 4, rng)});
    multi("add_row_bias", {"a", "bias"}, [](std::span<const Var> v) { return ops::add_row_bias(v[0], v[1]); },
          {random_matrix(3, 4, rng), random_matrix(1, 4, rng)});
    multi("scale_by", {"a", "scalar"}, [](std::span<const Var> v) { return ops::scale_by(v[0], v[1]); },
          {random_matrix(3, 4, rng), random_matrix(1, 1, rng)});
    unary("scale", [](Var a) { return ops::scale(a, 1.7); }, random_matrix(3, 4, rng));
    unary("element", [](Var a) { return ops::element(a, 1, 2); }, random_matrix(3, 4, rng));
    unary("relu", [](Var a) { return ops::relu(a); }, random_matrix(4, 5, rng));
    unary("leaky_relu", [](Var a) { return ops::leaky_relu(a, 0.2); }, random_matrix(4, 5, rng));
    unary("exp", [](Var a) { return ops::exp(a); }, random_matrix(3, 4, rng));
    unary("log", [](Var a) { return ops::log(a); }, random_matrix(3, 4, rng, 0.5, 2.0));
    unary("softmax_rows", [](Var a) { return ops::softmax_rows(a); }, random_matrix(4, 5, rng, -2.0, 2.0));
    unary("log_softmax_rows", [](Var a) { return ops::log_softmax_rows(a); }, random_matrix(4, 5, rng, -2.0, 2.0));
    unary("l2_normalize_rows", [](Var a) { return ops::l2_normalize_rows(a); }, random_matrix(4, 5, rng));
    unary("sum", [](Var a) { return ops::sum(a); }, random_matrix(3, 4, rng));
    {
        const std::vector<std::size_t> rows{0, 2, 3};
        const std::vector<int> cols{1, 0, 2};
        unary("gather_mean", [rows, cols](Var a) { return ops::gather_mean(a, rows, cols); },
              random_matrix(4, 3, rng));
    }
    unary("sharpen", [](Var a) { return sharpen(a, 0.5); }, random_matrix(4, 5, rng, -2.0, 2.0));
    unary("coefficient_attention", [](Var a) { return coefficient_attention(a, 0.2); }, random_matrix(1, 6, rng));
    {
        const std::uint64_t s = rng.next_u64();
        unary("dropout", [s](Var a) {
            SeededRng r(s, 1);
            return ops::dropout(a, 0.3, r, true);
        }, random_matrix(4, 5, rng));
    }
    multi("batch_norm_train", {"x", "gamma", "beta"},
          [](std::span<const Var> v) { return ops::batch_norm_train(v[0], v[1], v[2]).out; },
          {random_matrix(6, 3, rng), random_matrix(1, 3, rng, 0.5, 1.5), random_matrix(1, 3, rng)});
    {
        const Matrix mean = random_matrix(1, 3, rng);
        const Matrix var = random_matrix(1, 3, rng, 0.5, 2.0);
        multi("batch_norm_eval", {"x", "gamma", "beta"},
              [mean, var](std::span<const Var> v) { return ops::batch_norm_eval(v[0], v[1], v[2], mean, var); },
              {random_matrix(6, 3, rng), random_matrix(1, 3, rng, 0.5, 1.5), random_matrix(1, 3, rng)});
    }

    // Graph ops on a small random graph.
    const GraphDataset g = random_graph(9, 5, 3, 0.35, rng.next_u64());
    const CsrMatrix gcn = gcn_affinity(g.adjacency);
    const auto pattern = gcn.shared_pattern();
    const std::size_t nnz = gcn.nnz();
    const std::size_t n = g.num_vertices();
    const std::vector<Real> renorm = renormalization_factors(*pattern, degree_vector(g.adjacency));

    multi("spmm", {"values", "dense"},
          [pattern](std::span<const Var> v) { return ops::spmm(with_values(pattern, v[0]), v[1]); },
          {random_matrix(nnz, 1, rng), random_matrix(n, 3, rng)});
    {
        const std::uint64_t s = rng.next_u64();
        multi("dropout_sparse", {"values"},
              [pattern, s](std::span<const Var> v) {
                  SeededRng r(s, 2);
                  return ops::dropout(with_values(pattern, v[0]), 0.3, r, true).values;
              },
              {random_matrix(nnz, 1, rng)});
    }
    multi("edge_scores", {"src", "dst"},
          [pattern](std::span<const Var> v) { return ops::edge_scores(pattern, v[0], v[1]); },
          {random_matrix(n, 1, rng), random_matrix(n, 1, rng)});
    multi("segment_softmax", {"values"},
          [pattern](std::span<const Var> v) { return ops::segment_softmax(pattern, v[0]); },
          {random_matrix(nnz, 1, rng, -2.0, 2.0)});
    multi("gat_attention", {"x", "w", "a_src", "a_dst"},
          [pattern](std::span<const Var> v) { return gat_attention(v[0], pattern, {v[1], v[2], v[3]}).values; },
          {random_matrix(n, 5, rng), random_matrix(5, kGatAttentionDim, rng), random_matrix(kGatAttentionDim, 1, rng),
           random_matrix(kGatAttentionDim, 1, rng)});
    {
        const CsrMatrix xs = CsrMatrix::from_dense(random_matrix(n, 5, rng));
        const auto xp = xs.shared_pattern();
        multi("gat_attention_sparse", {"x_values", "w", "a_src", "a_dst"},
              [pattern, xp](std::span<const Var> v) {
                  return gat_attention(with_values(xp, v[0]), pattern, {v[1], v[2], v[3]}).values;
              },
              {random_matrix(xs.nnz(), 1, rng), random_matrix(5, kGatAttentionDim, rng),
               random_matrix(kGatAttentionDim, 1, rng), random_matrix(kGatAttentionDim, 1, rng)});
    }
    multi("gat_affinity", {"upsilon", "gcn"},
          [pattern, renorm](std::span<const Var> v) {
              return gat_affinity(with_values(pattern, v[0]), with_values(pattern, v[1]), renorm, 0.3).values;
          },
          {random_matrix(nnz, 1, rng, 0.0, 1.0), random_matrix(nnz, 1, rng, 0.0, 1.0)});
    {
        PropagationParams p;
        p.alpha = 0.15;
        p.K = 4;
        p.edge_dropout = 0.3;
        p.coef_dropout = 0.2;
        const std::uint64_t s = rng.next_u64();
        multi("propagate", {"affinity", "h0", "s"},
              [pattern, p, s](std::span<const Var> v) {
                  SeededRng r(s, 3);
                  return propagate(with_values(pattern, v[0]), v[1], p, v[2], r, true);
              },
              {Matrix(nnz, 1, std::vector<Real>(gcn.values().begin(), gcn.values().end())), random_matrix(n, 3, rng),
               random_matrix(1, 4, rng, 0.0, 0.5)});
    }
    {
        const std::vector<std::size_t> idx{0, 3, 5, 7};
        const std::vector<int> labels{2, 0, 1, 1};
        unary("masked_cross_entropy", [idx, labels](Var a) { return masked_cross_entropy(a, idx, labels); },
              random_matrix(n, 3, rng, -2.0, 2.0));
    }
    {
        const Matrix targets = random_matrix(n, 3, rng, 0.0, 2.0);
        unary("contrastive_view_term", [targets](Var a) { return contrastive_view_term(a, targets, 3); },
              random_matrix(n, 3, rng, -2.0, 2.0));
    }
}

/// Parameters of `model` scrambled away from their structured initial values (zero
/// biases, zero coefficient logits sitting on the leaky-relu kink).
void perturb(ModelParams& p, SeededRng& rng) {
    for (auto& e : p.entries()) {
        Matrix& m = *e.value;
        switch (e.kind) {
            case ParamKind::Weight:
                break;
            case ParamKind::Bias:
                for (Real& v : m.values()) v = rng.uniform(-0.2, 0.2);
                break;
            case ParamKind::CoefficientLogits:
                for (Real& v : m.values()) v = rng.uniform(-1.0, 1.0);
                break;
            case ParamKind::Norm:
                for (Real& v : m.values()) v += rng.uniform(-0.3, 0.3);
                break;
        }
    }
}

std::vector<Matrix> flatten(const ModelParams& p) {
    std::vector<Matrix> out;
    for (const auto& e : p.entries()) out.push_back(*e.value);
    return out;
}

void assign(ModelParams& p, const std::vector<Matrix>& xs) {
    auto entries = p.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) *entries[i].value = xs[i];
}

void objective_suite(GradcheckReport& report, const std::string& suite, Variant variant, bool batch_norm,
                     const GradcheckOptions& opt, SeededRng& rng) {
    const GraphDataset g = random_graph(opt.size, 6, 3, std::min(1.0, 4.0 / static_cast<double>(opt.size)),
                                        rng.next_u64());
    const GraphInputs in = prepare_inputs(g, batch_norm);

    TrainConfig config;
    config.model.variant = variant;
    config.model.K = 5;
    config.model.alpha = 0.15;
    config.model.beta = 0.4;
    config.model.use_batch_norm = batch_norm;
    config.views = 2;
    config.psi_ecl = 0.7;
    config.psi_l2 = 0.05;
    config.tau = 0.5;
    config.seed = rng.next_u64();

    SeededRng init(config.seed, 11);
    Model base = init_model(in.num_features(), in.num_classes, config.model, init);
    perturb(base.params, rng);

    Model scratch = base;
    const StepResult step = compute_step(in, scratch, config, 1);

    std::vector<Matrix> view_logits;
    for (std::size_t v = 0; v < config.views; ++v) {
        Tape tape;
        const BoundParams b = bind(tape, base.params);
        SeededRng r = view_stream(config.seed, 1, v);
        view_logits.push_back(forward(tape, in, b, base.state, config.model, r, true).logits.value());
    }
    const Matrix targets = contrastive_targets(view_logits, config.tau);
    const auto labels = in.labels_of(in.train);

    const ValueFn objective = [&](const std::vector<Matrix>& xs) {
        Model m = base;
        assign(m.params, xs);
        Real total = 0.0;
        for (std::size_t v = 0; v < config.views; ++v) {
            Tape tape;
            const BoundParams b = bind(tape, m.params);
            SeededRng r = view_stream(config.seed, 1, v);
            const Var logits = forward(tape, in, b, m.state, config.model, r, true).logits;
            total += masked_cross_entropy(logits, in.train, labels).value()[0] / static_cast<Real>(config.views);
            total += config.psi_ecl * contrastive_view_term(logits, targets, config.views).value()[0];
            if (v == 0) total += config.psi_l2 * l2_loss(b).value()[0];
        }
        return total;
    };

    std::vector<std::string> names;
    for (const auto& e : base.params.entries()) names.emplace_back(e.name);
    append(report,
           compare_with_finite_differences(suite, names, objective, flatten(base.params), flatten(step.grads), opt, rng));

    // The single-tape objective (stop_gradient inside the graph) must agree with the per-view reduction.
    Tape tape;
    const BoundParams b = bind(tape, base.params);
    std::vector<Var> views;
    for (std::size_t v = 0; v < config.views; ++v) {
        SeededRng r = view_stream(config.seed, 1, v);
        views.push_back(forward(tape, in, b, base.state, config.model, r, true).logits);
    }
    const CombinedLoss loss = combined_loss(views, in.train, labels, b, config.loss_weights());
    tape.backward(loss.total);
    const std::vector<Matrix> single = flatten(collect_gradients(tape, b, base.params));
    const std::vector<Matrix> reduced = flatten(step.grads);
    for (std::size_t i = 0; i < names.size(); ++i) {
        GradcheckResult r{suite + "/tape", names[i], 0.0, 0, 0, opt.threshold};
        for (std::size_t j = 0; j < single[i].size(); ++j) {
            r.max_rel_error = std::max(r.max_rel_error, relative_error(single[i][j], reduced[i][j]));
            ++r.checked;
        }
        report.results.push_back(r);
    }
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
    if (options.size < 6 || options.size > 64) throw ConfigError("gradcheck: --size must lie in [6, 64]");
    if (!(options.step > 0.0) || !(options.threshold > 0.0)) throw ConfigError("gradcheck: step and threshold must be positive");
    SeededRng rng(options.seed, 0x6772616463ULL);
    GradcheckReport report;
    op_suites(report, options, rng);
    objective_suite(report, "capgcn", Variant::Capgcn, false, options, rng);
    objective_suite(report, "capgat", Variant::Capgat, false, options, rng);
    objective_suite(report, "capgcn_bn", Variant::Capgcn, true, options, rng);
    objective_suite(report, "capgat_bn", Variant::Capgat, true, options, rng);
    return report;
}

}  // namespace capgnn
