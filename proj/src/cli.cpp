#include "capgnn/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "capgnn/config.hpp"
#include "capgnn/errors.hpp"
#include "capgnn/gradcheck.hpp"
#include "capgnn/graph.hpp"
#include "capgnn/model.hpp"
#include "capgnn/propagation.hpp"
#include "capgnn/synthetic.hpp"
#include "capgnn/trainer.hpp"

namespace capgnn {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

/// Raised inside a command to leave with a specific exit code.
struct CommandExit {
    int code;
    std::string message;
};

TrainConfig read_config(const std::string& path, const std::vector<std::string>& overrides) {
    try {
        return load_train_config(path, overrides);
    } catch (const ConfigError& e) {
        throw CommandExit{kExitConfig, std::string("config error: ") + e.what()};
    } catch (const DomainError& e) {
        throw CommandExit{kExitConfig, std::string("config error: ") + e.what()};
    }
}

GraphDataset read_dataset(const fs::path& dir) {
    try {
        if (dir.empty()) throw IoError("dataset.path is not set");
        if (!fs::is_directory(dir)) throw IoError("dataset directory " + dir.string() + " does not exist");
        return load_dataset(dir);
    } catch (const IoError& e) {
        throw CommandExit{kExitData, std::string("data error: ") + e.what()};
    } catch (const ValidationError& e) {
        throw CommandExit{kExitData, std::string("data error: ") + e.what()};
    }
}

void require_masks(const GraphDataset& g) {
    if (g.train.empty() || g.val.empty()) throw CommandExit{kExitData, "data error: train and val masks must be non-empty"};
}

Model read_checkpoint(const fs::path& path, const Model& layout) {
    try {
        return load_checkpoint(path, layout);
    } catch (const IoError& e) {
        throw CommandExit{kExitData, std::string("data error: ") + e.what()};
    } catch (const ValidationError& e) {
        throw CommandExit{kExitConfig, std::string("checkpoint does not match config: ") + e.what()};
    }
}

ojson record_json(const TrainRecord& r) {
    ojson j;
    j["epoch"] = r.epoch;
    j["loss_total"] = r.loss.total;
    j["loss_sup"] = r.loss.supervised;
    j["loss_ecl"] = r.loss.contrastive;
    j["loss_l2"] = r.loss.l2;
    j["acc_train"] = r.acc_train;
    j["acc_val"] = r.acc_val;
    j["acc_test"] = r.acc_test;
    j["seconds"] = r.seconds;
    return j;
}

std::vector<Real> coefficients_of(const Model& m, const ModelConfig& c) {
    return coefficient_attention(m.params.coef_logits.values(), c.leaky_slope);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

struct RunOutcome {
    std::uint64_t seed;
    FitResult fit;
};

RunOutcome train_one(const GraphInputs& in, TrainConfig config, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!metrics) throw IoError("cannot write " + (dir / "metrics.jsonl").string());
    FitResult fit_result = fit(in, config, [&](const TrainRecord& r) { metrics << record_json(r).dump() << '\n'; });
    ojson final_line;
    final_line["best_epoch"] = fit_result.best_epoch;
    final_line["test_accuracy"] = fit_result.test_acc;
    final_line["seed"] = config.seed;
    metrics << final_line.dump() << '\n';
    metrics.close();
    save_checkpoint(dir / "checkpoint.capg", fit_result.best);

    ojson summary;
    summary["variant"] = to_string(config.model.variant);
    summary["seed"] = config.seed;
    summary["best_epoch"] = fit_result.best_epoch;
    summary["epochs_run"] = fit_result.history.size();
    summary["best_val_accuracy"] = fit_result.best_val_acc;
    summary["best_val_loss"] = fit_result.best_val_loss;
    summary["test_accuracy"] = fit_result.test_acc;
    summary["coefficients_s"] = coefficients_of(fit_result.best, config.model);
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    return {config.seed, std::move(fit_result)};
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides, const fs::path& out_dir,
              std::ostream& out) {
    const TrainConfig config = read_config(config_path, overrides);
    const GraphDataset g = read_dataset(config.dataset);
    require_masks(g);
    const GraphInputs in = prepare_inputs(g, config.model.use_batch_norm);

    fs::create_directories(out_dir);
    write_text(out_dir / "config.toml", to_config_text(config));
    std::vector<RunOutcome> runs;
    for (std::size_t r = 0; r < config.runs; ++r) {
        TrainConfig rc = config;
        rc.seed = config.seed + r;
        const fs::path dir = config.runs == 1 ? out_dir : out_dir / ("run_" + std::to_string(r));
        runs.push_back(train_one(in, rc, dir));
        const auto& f = runs.back().fit;
        out << "seed " << rc.seed << ": best epoch " << f.best_epoch << ", val " << f.best_val_acc << ", test "
            << f.test_acc << "\n";
    }
    if (config.runs > 1) {
        std::vector<Real> acc;
        for (const auto& r : runs) acc.push_back(r.fit.test_acc);
        const Real mean = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<Real>(acc.size());
        Real var = 0.0;
        for (Real a : acc) var += (a - mean) * (a - mean);
        const Real sd = std::sqrt(var / static_cast<Real>(acc.size()));
        ojson summary;
        summary["variant"] = to_string(config.model.variant);
        summary["runs"] = config.runs;
        ojson seeds = ojson::array();
        for (const auto& r : runs) seeds.push_back(r.seed);
        summary["seeds"] = seeds;
        summary["test_accuracies"] = acc;
        summary["mean_test_accuracy"] = mean;
        summary["std_test_accuracy"] = sd;
        write_text(out_dir / "summary.json", summary.dump(2) + "\n");
        out << "mean test accuracy over " << config.runs << " runs: " << mean << " (std " << sd << ")\n";
    }
    return kExitOk;
}

int cmd_eval(const std::string& config_path, const std::vector<std::string>& overrides, const fs::path& checkpoint,
             std::ostream& out) {
    const TrainConfig config = read_config(config_path, overrides);
    const GraphDataset g = read_dataset(config.dataset);
    const GraphInputs in = prepare_inputs(g, config.model.use_batch_norm);
    const Model model = read_checkpoint(checkpoint, initial_model(in, config));
    const Matrix logits = infer_logits(in, model, config.model);
    ojson j;
    j["acc_train"] = in.train.empty() ? 0.0 : accuracy(logits, in, in.train);
    j["acc_val"] = in.val.empty() ? 0.0 : accuracy(logits, in, in.val);
    j["acc_test"] = in.test.empty() ? 0.0 : accuracy(logits, in, in.test);
    out << j.dump() << "\n";
    return kExitOk;
}

/// Least-squares slope of c_k over k = first..K.
Real trend_slope(const std::vector<Real>& c, std::size_t first) {
    const std::size_t n = c.size() - first;
    if (n < 2) return 0.0;
    Real mk = 0.0, mc = 0.0;
    for (std::size_t k = first; k < c.size(); ++k) {
        mk += static_cast<Real>(k);
        mc += c[k];
    }
    mk /= static_cast<Real>(n);
    mc /= static_cast<Real>(n);
    Real num = 0.0, den = 0.0;
    for (std::size_t k = first; k < c.size(); ++k) {
        num += (static_cast<Real>(k) - mk) * (c[k] - mc);
        den += (static_cast<Real>(k) - mk) * (static_cast<Real>(k) - mk);
    }
    return num / den;
}

int cmd_analyze(const std::string& config_path, const std::vector<std::string>& overrides,
                const std::optional<fs::path>& checkpoint, const fs::path& out_csv, std::ostream& out) {
    const TrainConfig config = read_config(config_path, overrides);
    const std::size_t K = config.model.K;
    std::vector<Real> logits(K, 0.0);
    if (checkpoint) {
        std::vector<std::pair<std::string, Matrix>> entries;
        try {
            entries = read_checkpoint_entries(*checkpoint);
        } catch (const IoError& e) {
            throw CommandExit{kExitData, std::string("data error: ") + e.what()};
        } catch (const ValidationError& e) {
            throw CommandExit{kExitData, std::string("data error: ") + e.what()};
        }
        const auto it = std::find_if(entries.begin(), entries.end(),
                                     [](const auto& e) { return e.first == "prop.coef_logits"; });
        if (it == entries.end()) throw CommandExit{kExitConfig, "checkpoint has no prop.coef_logits tensor"};
        if (it->second.size() != K) {
            throw CommandExit{kExitConfig, "checkpoint K = " + std::to_string(it->second.size()) +
                                               " does not match config K = " + std::to_string(K)};
        }
        logits.assign(it->second.values().begin(), it->second.values().end());
    }
    const std::vector<Real> s = coefficient_attention(logits, config.model.leaky_slope);
    const std::vector<Real> capgnn = expand_coefficients(s, config.model.alpha);
    const std::vector<Real> appnp = appnp_coefficients(config.model.alpha, K);

    if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
    std::ofstream csv(out_csv, std::ios::trunc);
    if (!csv) throw CommandExit{kExitData, "cannot write " + out_csv.string()};
    csv << "k,c_k_capgnn,c_k_appnp\n";
    char line[128];
    for (std::size_t k = 0; k <= K; ++k) {
        std::snprintf(line, sizeof line, "%zu,%.17g,%.17g\n", k, capgnn[k], appnp[k]);
        csv << line;
    }
    csv.close();

    const Real sum_capgnn = std::accumulate(capgnn.begin(), capgnn.end(), 0.0);
    const Real sum_appnp = std::accumulate(appnp.begin(), appnp.end(), 0.0);
    bool monotone = true;
    for (std::size_t k = 3; k <= K; ++k) monotone = monotone && capgnn[k] <= capgnn[k - 1];
    const Real slope = K >= 3 ? trend_slope(capgnn, 2) : 0.0;
    char buf[256];
    std::snprintf(buf, sizeof buf, "sum c_k: capgnn %.12f, appnp %.12f\n", sum_capgnn, sum_appnp);
    out << buf;
    std::snprintf(buf, sizeof buf, "c_%zu: capgnn %.6f, appnp %.6f\n", K, capgnn[K], appnp[K]);
    out << buf;
    std::snprintf(buf, sizeof buf, "k=2..%zu trend slope %.3e, declining trend: %s, strictly non-increasing: %s\n", K,
                  slope, slope <= 0.0 ? "yes" : "no", monotone ? "yes" : "no");
    out << buf;
    return kExitOk;
}

int cmd_gradcheck(std::size_t size, std::uint64_t seed, bool inject_fault, std::ostream& out) {
    GradcheckOptions opt;
    opt.size = size;
    opt.seed = seed;
    testing::set_matmul_backward_fault(inject_fault);
    GradcheckReport report;
    try {
        report = run_gradcheck(opt);
    } catch (...) {
        testing::set_matmul_backward_fault(false);
        throw;
    }
    testing::set_matmul_backward_fault(false);
    out << report.format();
    Real worst = 0.0;
    for (const auto& r : report.results) worst = std::max(worst, r.max_rel_error);
    if (!report.ok()) {
        out << "gradcheck FAILED (threshold " << opt.threshold << "):";
        for (const auto& f : report.failures()) out << " " << f;
        out << "\n";
        return kExitCheckFailed;
    }
    char buf[160];
    std::snprintf(buf, sizeof buf, "gradcheck passed: %zu groups, worst relative error %.3e < %.0e\n",
                  report.results.size(), worst, opt.threshold);
    out << buf;
    return kExitOk;
}

int cmd_validate(const fs::path& dir, std::ostream& out) {
    if (!fs::is_directory(dir)) throw CommandExit{kExitData, "data error: " + dir.string() + " is not a directory"};
    GraphDataset g;
    LoadReport report;
    const bool ok = inspect_dataset(dir, g, report);
    out << g.num_vertices() << " vertices, " << g.num_undirected_edges() << " undirected edges, " << g.num_features()
        << " features, " << g.num_classes << " classes\n";
    out << "masks: train " << g.train.size() << ", val " << g.val.size() << ", test " << g.test.size() << "\n";
    out << "edges.txt: " << report.edge_lines << " lines, " << report.duplicate_edges << " duplicates, "
        << report.self_loops_dropped << " self-loops dropped\n";
    for (const auto& issue : report.issues) out << "violation: " << issue << "\n";
    if (!ok || !report.ok()) {
        out << report.issues.size() << " violation(s)\n";
        return kExitCheckFailed;
    }
    out << "ok\n";
    return kExitOk;
}

int cmd_synth(const std::string& kind, std::uint64_t seed, std::size_t vertices, const fs::path& out_dir,
              std::ostream& out) {
    GraphDataset g;
    if (kind == "csbm") {
        CsbmOptions o;
        if (vertices) {
            // Split sizes shrink with the graph so small surrogates stay valid.
            o.num_vertices = vertices;
            o.train_per_class = std::min<std::size_t>(o.train_per_class, vertices / (5 * o.num_classes));
            o.num_val = std::min<std::size_t>(o.num_val, vertices / 5);
            o.num_test = std::min<std::size_t>(o.num_test, 2 * vertices / 5);
        }
        try {
            g = csbm(o, seed);
        } catch (const ConfigError& e) {
            throw CommandExit{kExitConfig, std::string("config error: ") + e.what()};
        }
    } else if (kind == "two-cliques") {
        g = two_cliques(seed);
    } else if (kind == "random") {
        g = random_graph(vertices ? vertices : 30, 8, 3, 0.15, seed);
    } else {
        throw CommandExit{kExitConfig, "unknown synthetic kind \"" + kind + "\""};
    }
    write_dataset(g, out_dir);
    out << "wrote " << g.num_vertices() << " vertices, " << g.num_undirected_edges() << " undirected edges to "
        << out_dir.string() << "\n";
    return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"CAPGNN semi-supervised node classification", "capgnn"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_path;
    std::string checkpoint;
    std::size_t size = 16;
    std::uint64_t seed = 0;
    bool inject_fault = false;
    std::string dataset_dir;
    std::string kind = "csbm";
    std::size_t vertices = 0;

    auto* train = app.add_subcommand("train", "Train and write metrics, checkpoint and summary");
    train->add_option("config", config_path, "Config file")->required();
    train->add_option("--override", overrides, "section.key=value")->take_all();
    train->add_option("--out", out_path, "Output directory")->required();

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on every mask");
    eval->add_option("config", config_path, "Config file")->required();
    eval->add_option("--override", overrides, "section.key=value")->take_all();
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();

    auto* analyze = app.add_subcommand("analyze", "Propagation coefficients against APPNP as CSV");
    analyze->add_option("config", config_path, "Config file")->required();
    analyze->add_option("--override", overrides, "section.key=value")->take_all();
    analyze->add_option("--checkpoint", checkpoint, "Checkpoint file (default: uniform coefficients)");
    analyze->add_option("--out", out_path, "CSV path")->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suites");
    gradcheck->add_option("--size", size, "Synthetic graph vertices (<= 64)")->check(CLI::Range(6, 64));
    gradcheck->add_option("--seed", seed, "Seed");
    gradcheck->add_flag("--inject-fault", inject_fault, "Corrupt the matmul backward rule (negative control)");

    auto* validate = app.add_subcommand("validate", "Check a dataset directory");
    validate->add_option("dir", dataset_dir, "Dataset directory")->required();

    auto* synth = app.add_subcommand("synth", "Write a synthetic dataset directory");
    synth->add_option("--kind", kind, "csbm | two-cliques | random");
    synth->add_option("--seed", seed, "Seed");
    synth->add_option("--vertices", vertices, "Vertex count");
    synth->add_option("--out", out_path, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*train) return cmd_train(config_path, overrides, out_path, out);
        if (*eval) return cmd_eval(config_path, overrides, checkpoint, out);
        if (*analyze) {
            return cmd_analyze(config_path, overrides,
                               checkpoint.empty() ? std::nullopt : std::optional<fs::path>(checkpoint), out_path, out);
        }
        if (*gradcheck) return cmd_gradcheck(size, seed, inject_fault, out);
        if (*validate) return cmd_validate(dataset_dir, out);
        if (*synth) return cmd_synth(kind, seed, vertices, out_path, out);
    } catch (const CommandExit& e) {
        err << e.message << "\n";
        return e.code;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const ValidationError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitCheckFailed;
    }
    return kExitConfig;
}

}  // namespace capgnn
