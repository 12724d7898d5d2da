#include "capgnn/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <thread>

#include "capgnn/errors.hpp"

namespace capgnn {

namespace {

constexpr std::uint64_t kInitStream = 0x696e6974;  // "init"

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    pool.clear();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

void add_into(ModelParams& acc, const ModelParams& g) {
    auto dst = acc.entries();
    const auto src = g.entries();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        Matrix& d = *dst[i].value;
        const Matrix& s = *src[i].value;
        for (std::size_t j = 0; j < d.size(); ++j) d[j] += s[j];
    }
}

}  // namespace

AdamState AdamState::for_params(const ModelParams& p) {
    AdamState s;
    s.m = p.zeros_like();
    s.v = p.zeros_like();
    return s;
}

void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, Real lr,
               std::span<const ParamKind> frozen) {
    auto p = params.entries();
    const auto g = grads.entries();
    auto m = state.m.entries();
    auto v = state.v.entries();
    if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
        throw ShapeError("adam_step: parameter/gradient/moment layouts differ");
    }
    ++state.step;
    const Real t = static_cast<Real>(state.step);
    const Real c1 = 1.0 - std::pow(state.beta1, t);
    const Real c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < p.size(); ++i) {
        Matrix& w = *p[i].value;
        const Matrix& gi = *g[i].value;
        Matrix& mi = *m[i].value;
        Matrix& vi = *v[i].value;
        if (!w.same_shape(gi) || !w.same_shape(mi) || !w.same_shape(vi)) {
            throw ShapeError(std::string("adam_step: shape mismatch for ") + p[i].name);
        }
        if (std::find(frozen.begin(), frozen.end(), p[i].kind) != frozen.end()) continue;
        for (std::size_t j = 0; j < w.size(); ++j) {
            mi[j] = state.beta1 * mi[j] + (1.0 - state.beta1) * gi[j];
            vi[j] = state.beta2 * vi[j] + (1.0 - state.beta2) * gi[j] * gi[j];
            const Real m_hat = mi[j] / c1;
            const Real v_hat = vi[j] / c2;
            w[j] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

SeededRng view_stream(std::uint64_t seed, std::size_t epoch, std::size_t view) {
    return SeededRng::derive(seed, epoch, view);
}

StepResult compute_step(const GraphInputs& in, Model& model, const TrainConfig& config, std::size_t epoch) {
    const std::size_t views = config.views;
    const bool contrastive = views >= 2 && config.psi_ecl != 0.0;
    const Real inv_m = 1.0 / static_cast<Real>(views);
    const auto train_labels = in.labels_of(in.train);

    struct ViewWork {
        std::unique_ptr<Tape> tape;
        BoundParams bound;
        ForwardOutput out;
        Real ce = 0.0;
        Real ecl = 0.0;
        Real l2 = 0.0;
        ModelParams grads;
    };
    std::vector<ViewWork> work(views);

    parallel_for(views, config.threads, [&](std::size_t v) {
        ViewWork& w = work[v];
        w.tape = std::make_unique<Tape>();
        w.bound = bind(*w.tape, model.params, config.model.learn_coefficients);
        SeededRng rng = view_stream(config.seed, epoch, v);
        w.out = forward(*w.tape, in, w.bound, model.state, config.model, rng, true);
    });

    Matrix targets;
    if (views >= 2) {
        std::vector<Matrix> logits;
        logits.reserve(views);
        for (const auto& w : work) logits.push_back(w.out.logits.value());
        targets = contrastive_targets(logits, config.tau);
    }

    parallel_for(views, config.threads, [&](std::size_t v) {
        ViewWork& w = work[v];
        const Var ce = masked_cross_entropy(w.out.logits, in.train, train_labels);
        w.ce = ce.value()[0];
        Var total = ops::scale(ce, inv_m);
        if (views >= 2) {
            const Var term = contrastive_view_term(w.out.logits, targets, views);
            w.ecl = term.value()[0];
            if (contrastive) total = ops::add(total, ops::scale(term, config.psi_ecl));
        }
        if (v == 0) {
            const Var l2 = l2_loss(w.bound);
            w.l2 = l2.value()[0];
            if (config.psi_l2 != 0.0) total = ops::add(total, ops::scale(l2, config.psi_l2));
        }
        w.tape->backward(total);
        w.grads = collect_gradients(*w.tape, w.bound, model.params);
        w.tape.reset();
    });

    StepResult result;
    result.grads = model.params.zeros_like();
    LossBreakdown& b = result.loss;
    b.weights = config.loss_weights();
    for (std::size_t v = 0; v < views; ++v) {
        add_into(result.grads, work[v].grads);
        b.supervised += work[v].ce;
        b.contrastive += work[v].ecl;
        update_running_stats(model.state, work[v].out);
    }
    b.supervised *= inv_m;
    b.l2 = work[0].l2;
    b.total = b.supervised + (contrastive ? config.psi_ecl * b.contrastive : 0.0) + config.psi_l2 * b.l2;
    if (!contrastive) b.weights.psi_ecl = 0.0;
    return result;
}

LossBreakdown train_step(const GraphInputs& in, Model& model, AdamState& adam, const TrainConfig& config,
                         std::size_t epoch) {
    StepResult step = compute_step(in, model, config, epoch);
    const ParamKind frozen[] = {ParamKind::CoefficientLogits};
    adam_step(model.params, step.grads, adam, config.lr,
              config.model.learn_coefficients ? std::span<const ParamKind>{} : std::span<const ParamKind>(frozen));
    return step.loss;
}

Real accuracy(const Matrix& logits, const GraphInputs& in, std::span<const std::size_t> idx) {
    if (idx.empty()) throw ConfigError("accuracy: empty mask");
    std::size_t correct = 0;
    for (std::size_t i : idx) correct += argmax_row(logits.row(i)) == in.labels.at(i);
    return static_cast<Real>(correct) / static_cast<Real>(idx.size());
}

Real evaluate(const GraphInputs& in, const Model& model, const ModelConfig& config, std::span<const std::size_t> idx) {
    if (idx.empty()) throw ConfigError("evaluate: empty mask");
    return accuracy(infer_logits(in, model, config), in, idx);
}

Model initial_model(const GraphInputs& in, const TrainConfig& config) {
    SeededRng rng(config.seed, kInitStream);
    return init_model(in.num_features(), in.num_classes, config.model, rng);
}

FitResult fit(const GraphInputs& in, const TrainConfig& config, const EpochCallback& on_epoch) {
    config.validate();
    if (in.train.empty()) throw ConfigError("fit: empty training mask");
    if (in.val.empty()) throw ConfigError("fit: empty validation mask");
    TrainConfig effective = config;
    if (effective.views < 2) effective.psi_ecl = 0.0;

    Model model = initial_model(in, effective);
    AdamState adam = AdamState::for_params(model.params);
    FitResult result;
    result.best = model;
    Real best_acc = -1.0;
    Real best_loss = std::numeric_limits<Real>::infinity();
    std::size_t stale = 0;
    const auto val_labels = in.labels_of(in.val);

    for (std::size_t epoch = 1; epoch <= effective.max_epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        TrainRecord rec;
        rec.epoch = epoch;
        rec.loss = train_step(in, model, adam, effective, epoch);
        const Matrix logits = infer_logits(in, model, effective.model);
        rec.acc_train = accuracy(logits, in, in.train);
        rec.acc_val = accuracy(logits, in, in.val);
        rec.acc_test = in.test.empty() ? 0.0 : accuracy(logits, in, in.test);
        rec.val_loss = masked_cross_entropy(logits, in.val, val_labels);
        if (effective.record_time) {
            rec.seconds = std::chrono::duration<Real>(std::chrono::steady_clock::now() - start).count();
        }
        result.history.push_back(rec);
        if (on_epoch) on_epoch(rec);

        const bool improved = rec.acc_val > best_acc || (rec.acc_val == best_acc && rec.val_loss < best_loss);
        if (improved) {
            best_acc = rec.acc_val;
            best_loss = rec.val_loss;
            result.best = model;
            result.best_epoch = epoch;
            result.test_acc = rec.acc_test;
            stale = 0;
        } else if (++stale > effective.patience) {
            break;
        }
    }
    result.best_val_acc = best_acc;
    result.best_val_loss = best_loss;
    return result;
}

}  // namespace capgnn
