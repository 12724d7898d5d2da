#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "capgnn/cli.hpp"
#include "capgnn/config.hpp"
#include "capgnn/errors.hpp"
#include "capgnn/propagation.hpp"
#include "capgnn/synthetic.hpp"
#include "test_util.hpp"

using namespace capgnn;
using capgnn::test::TempDir;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code;
    std::string out, err;
};

CliResult run(std::vector<std::string> args) {
    args.insert(args.begin(), "capgnn");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream f(p);
    f << text;
}

std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

std::set<std::string> tree(const fs::path& root) {
    std::set<std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) out.insert(fs::relative(e.path(), root).string());
    return out;
}

/// Dataset plus a small config next to it; `extra` is appended verbatim.
struct Workspace {
    TempDir dir{"cli"};
    fs::path config;

    explicit Workspace(const std::string& extra = "", std::uint64_t seed = 3) {
        write_dataset(random_graph(30, 5, 3, 0.2, seed), dir / "data");
        config = dir / "run.toml";
        write_file(config, "[dataset]\npath = \"data\"\n[model]\nK = 4\nalpha = 0.2\n[dropout]\ninput = 0.2\n"
                           "[loss]\nviews = 2\ntau = 0.5\n[trainer]\nmax_epochs = 3\nrecord_time = false\n" +
                               extra);
    }
};

}  // namespace

TEST(Config, ParsesSectionsAndOverrides) {
    const ConfigTable t = parse_config_text("# c\n[model]\nK = 5  # trailing\nvariant=\"capgat\"\n[loss]\ntau = 0.5\n");
    EXPECT_EQ(t.at("model.K"), "5");
    EXPECT_EQ(t.at("model.variant"), "\"capgat\"");
    TrainConfig c;
    apply_config(c, t);
    EXPECT_EQ(c.model.K, 5u);
    EXPECT_EQ(c.model.variant, Variant::Capgat);
    EXPECT_EQ(c.tau, 0.5);
    apply_override(c, "trainer.lr=0.2");
    EXPECT_EQ(c.lr, 0.2);
}

TEST(Config, RejectsBadInput) {
    EXPECT_THROW(parse_config_text("K = 5\n"), ConfigError);
    EXPECT_THROW(parse_config_text("[model\n"), ConfigError);
    EXPECT_THROW(parse_config_text("[model]\nK = 1\nK = 2\n"), ConfigError);
    TrainConfig c;
    EXPECT_THROW(apply_config(c, parse_config_text("[model]\nwidth = 3\n")), ConfigError);
    EXPECT_THROW(apply_config(c, parse_config_text("[model]\nK = ten\n")), ConfigError);
    EXPECT_THROW(apply_override(c, "model.K"), ConfigError);
    c.tau = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c.tau = 1.0;
    c.model.dr_edge = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, TextRoundTrip) {
    TrainConfig c = preset("pubmed", Variant::Capgat);
    c.dataset = "/data/pubmed";
    c.seed = 17;
    TrainConfig back;
    apply_config(back, parse_config_text(to_config_text(c)));
    EXPECT_EQ(to_config_text(back), to_config_text(c));
    EXPECT_EQ(back.lr, c.lr);
    EXPECT_EQ(back.model.use_batch_norm, true);
    EXPECT_EQ(back.dataset, c.dataset);
}

TEST(Config, PresetValues) {
    const TrainConfig cora = preset("cora", Variant::Capgcn);
    EXPECT_EQ(cora.lr, 0.01);
    EXPECT_EQ(cora.psi_l2, 0.001);
    EXPECT_EQ(cora.model.alpha, 0.1);
    EXPECT_EQ(cora.model.dr_input, 0.8);
    EXPECT_EQ(cora.model.dr_mlp, 0.9);
    EXPECT_EQ(cora.model.dr_edge, 0.7);
    EXPECT_EQ(cora.model.dr_coef_att, 0.3);
    EXPECT_EQ(cora.tau, 0.4);
    EXPECT_EQ(cora.model.K, 10u);
    EXPECT_EQ(cora.model.beta, 0.3);
    EXPECT_EQ(cora.views, 8u);
    EXPECT_EQ(cora.psi_ecl, 1.0);
    EXPECT_EQ(cora.max_epochs, 2000u);
    EXPECT_EQ(cora.patience, 200u);
    EXPECT_FALSE(cora.model.use_batch_norm);
    const TrainConfig cite = preset("citeseer", Variant::Capgcn);
    EXPECT_EQ(cite.model.dr_input, 0.5);
    EXPECT_EQ(cite.model.dr_mlp, 0.1);
    EXPECT_EQ(cite.model.dr_edge, 0.0);
    const TrainConfig pub = preset("pubmed", Variant::Capgat);
    EXPECT_EQ(pub.lr, 0.2);
    EXPECT_EQ(pub.psi_l2, 0.002);
    EXPECT_EQ(pub.model.alpha, 0.2);
    EXPECT_EQ(pub.tau, 1.0);
    EXPECT_TRUE(pub.model.use_batch_norm);
    EXPECT_EQ(pub.model.variant, Variant::Capgat);
    EXPECT_THROW(preset("amazon", Variant::Capgcn), ConfigError);
}

TEST(Config, PresetFilesMatchBuiltInPresets) {
    const fs::path dir = fs::path(CAPGNN_SOURCE_DIR) / "presets";
    for (const std::string ds : {"cora", "citeseer", "pubmed"}) {
        for (Variant v : {Variant::Capgcn, Variant::Capgat}) {
            const fs::path file = dir / (ds + "_" + to_string(v) + ".toml");
            TrainConfig expected = preset(ds, v);
            expected.dataset = fs::weakly_canonical(dir / ".." / "data" / ds);
            TrainConfig loaded = load_train_config(file);
            loaded.dataset = fs::weakly_canonical(loaded.dataset);
            EXPECT_EQ(to_config_text(loaded), to_config_text(expected)) << file;
        }
    }
}

TEST(Cli, UsageErrors) {
    EXPECT_EQ(run({}).code, kExitConfig);
    EXPECT_EQ(run({"frobnicate"}).code, kExitConfig);
    EXPECT_EQ(run({"gradcheck", "--bogus"}).code, kExitConfig);
    EXPECT_EQ(run({"gradcheck", "--size", "100"}).code, kExitConfig);
    EXPECT_EQ(run({"train", "--help"}).code, kExitOk);
}

TEST(Cli, TrainWritesMetricsCheckpointAndSummary) {
    Workspace ws("[dropout]\nmlp = 0.1\n");
    const fs::path out = ws.dir / "out";
    const auto before = tree(ws.dir.path());
    const CliResult r = run({"train", ws.config.string(), "--out", out.string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const auto lines = lines_of(read_file(out / "metrics.jsonl"));
    ASSERT_EQ(lines.size(), 4u);
    for (std::size_t i = 0; i < 3; ++i) {
        const auto j = nlohmann::json::parse(lines[i]);
        EXPECT_EQ(j.at("epoch").get<int>(), static_cast<int>(i) + 1);
        for (const char* k : {"loss_total", "loss_sup", "loss_ecl", "loss_l2", "acc_train", "acc_val", "acc_test"})
            EXPECT_TRUE(j.contains(k)) << k;
        EXPECT_EQ(j.at("seconds").get<double>(), 0.0);
        const double total = j.at("loss_total"), sup = j.at("loss_sup"), ecl = j.at("loss_ecl"), l2 = j.at("loss_l2");
        EXPECT_NEAR(total, sup + ecl + 0.001 * l2, 1e-9);
    }
    const auto last = nlohmann::json::parse(lines[3]);
    EXPECT_TRUE(last.contains("best_epoch"));
    EXPECT_TRUE(last.contains("test_accuracy"));
    EXPECT_EQ(last.at("seed").get<int>(), 0);
    const auto summary = nlohmann::json::parse(read_file(out / "summary.json"));
    EXPECT_EQ(summary.at("variant"), "capgcn");
    EXPECT_EQ(summary.at("coefficients_s").size(), 4u);
    EXPECT_TRUE(fs::exists(out / "checkpoint.capg"));
    EXPECT_TRUE(fs::exists(out / "config.toml"));

    // Nothing was written outside --out.
    auto after = tree(ws.dir.path());
    std::erase_if(after, [](const std::string& p) { return p.rfind("out", 0) == 0; });
    EXPECT_EQ(after, before);

    const CliResult e = run({"eval", ws.config.string(), "--checkpoint", (out / "checkpoint.capg").string()});
    ASSERT_EQ(e.code, kExitOk) << e.err;
    const auto acc = nlohmann::json::parse(e.out);
    EXPECT_EQ(acc.at("acc_test").get<double>(), last.at("test_accuracy").get<double>());
}

TEST(Cli, SingleEpochRunHasOneRecordAndSummaryLine) {
    Workspace ws;
    const fs::path out = ws.dir / "one";
    ASSERT_EQ(run({"train", ws.config.string(), "--override", "trainer.max_epochs=1", "--out", out.string()}).code,
              kExitOk);
    const auto lines = lines_of(read_file(out / "metrics.jsonl"));
    ASSERT_EQ(lines.size(), 2u);
    EXPECT_EQ(nlohmann::json::parse(lines[1]).at("best_epoch").get<int>(), 1);
}

TEST(Cli, RepeatedRunsAreByteIdentical) {
    Workspace ws;
    ASSERT_EQ(run({"train", ws.config.string(), "--out", (ws.dir / "a").string()}).code, kExitOk);
    ASSERT_EQ(run({"train", ws.config.string(), "--override", "trainer.threads=4", "--out", (ws.dir / "b").string()})
                  .code,
              kExitOk);
    EXPECT_EQ(read_file(ws.dir / "a" / "metrics.jsonl"), read_file(ws.dir / "b" / "metrics.jsonl"));
    EXPECT_EQ(read_file(ws.dir / "a" / "checkpoint.capg"), read_file(ws.dir / "b" / "checkpoint.capg"));
}

TEST(Cli, MultipleRunsWriteAggregateSummary) {
    Workspace ws("[trainer]\nruns = 2\nseed = 5\n");
    ASSERT_EQ(run({"train", ws.config.string(), "--out", (ws.dir / "m").string()}).code, kExitOk);
    const auto s = nlohmann::json::parse(read_file(ws.dir / "m" / "summary.json"));
    EXPECT_EQ(s.at("seeds"), nlohmann::json::array({5, 6}));
    const auto acc = s.at("test_accuracies");
    EXPECT_NEAR(s.at("mean_test_accuracy").get<double>(), (acc[0].get<double>() + acc[1].get<double>()) / 2, 1e-15);
    EXPECT_TRUE(fs::exists(ws.dir / "m" / "run_1" / "checkpoint.capg"));
}

TEST(Cli, TrainExitCodes) {
    Workspace ws;
    const fs::path out = ws.dir / "never";
    write_file(ws.dir / "bad.toml", "[model]\nK = -3\n");
    EXPECT_EQ(run({"train", (ws.dir / "bad.toml").string(), "--out", out.string()}).code, kExitConfig);
    EXPECT_EQ(run({"train", (ws.dir / "absent.toml").string(), "--out", out.string()}).code, kExitConfig);
    EXPECT_EQ(run({"train", ws.config.string(), "--override", "model.nope=1", "--out", out.string()}).code,
              kExitConfig);
    const CliResult missing =
        run({"train", ws.config.string(), "--override", "dataset.path=nowhere", "--out", out.string()});
    EXPECT_EQ(missing.code, kExitData);
    EXPECT_FALSE(missing.err.empty());
    EXPECT_FALSE(fs::exists(out));
}

TEST(Cli, EvalRejectsMismatchedCheckpoint) {
    Workspace ws;
    ASSERT_EQ(run({"train", ws.config.string(), "--out", (ws.dir / "o").string()}).code, kExitOk);
    const std::string ckpt = (ws.dir / "o" / "checkpoint.capg").string();
    EXPECT_EQ(run({"eval", ws.config.string(), "--override", "model.K=6", "--checkpoint", ckpt}).code, kExitConfig);
    EXPECT_EQ(run({"eval", ws.config.string(), "--checkpoint", (ws.dir / "none.capg").string()}).code, kExitData);
}

TEST(Cli, AnalyzeWritesCoefficientTable) {
    Workspace ws;
    const fs::path csv = ws.dir / "an" / "coef.csv";
    const CliResult r = run({"analyze", ws.config.string(), "--override", "model.K=10", "--override",
                             "model.alpha=0.1", "--out", csv.string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const auto lines = lines_of(read_file(csv));
    ASSERT_EQ(lines.size(), 12u);
    EXPECT_EQ(lines[0], "k,c_k_capgnn,c_k_appnp");
    double sum_capgnn = 0.0, sum_appnp = 0.0, c10 = 0.0;
    for (std::size_t k = 0; k <= 10; ++k) {
        std::istringstream row(lines[k + 1]);
        std::string idx, a, b;
        std::getline(row, idx, ',');
        std::getline(row, a, ',');
        std::getline(row, b, ',');
        EXPECT_EQ(std::stoul(idx), k);
        sum_capgnn += std::stod(a);
        sum_appnp += std::stod(b);
        if (k == 10) c10 = std::stod(b);
    }
    EXPECT_NEAR(sum_capgnn, 1.0, 1e-12);
    EXPECT_NEAR(sum_appnp, 1.0, 1e-12);
    EXPECT_NEAR(c10, 0.34868, 1e-5);
    EXPECT_NE(r.out.find("declining trend"), std::string::npos);
}

TEST(Cli, AnalyzeUsesTrainedCoefficients) {
    Workspace ws;
    ASSERT_EQ(run({"train", ws.config.string(), "--out", (ws.dir / "o").string()}).code, kExitOk);
    const std::string ckpt = (ws.dir / "o" / "checkpoint.capg").string();
    const fs::path csv = ws.dir / "c.csv";
    ASSERT_EQ(run({"analyze", ws.config.string(), "--checkpoint", ckpt, "--out", csv.string()}).code, kExitOk);
    const auto summary = nlohmann::json::parse(read_file(ws.dir / "o" / "summary.json"));
    const std::vector<Real> s = summary.at("coefficients_s").get<std::vector<Real>>();
    const auto c = expand_coefficients(s, 0.2);
    const auto lines = lines_of(read_file(csv));
    for (std::size_t k = 0; k < c.size(); ++k) {
        const std::string& line = lines.at(k + 1);
        const auto first = line.find(','), second = line.find(',', first + 1);
        EXPECT_NEAR(std::stod(line.substr(first + 1, second - first - 1)), c[k], 1e-15);
    }
    EXPECT_EQ(run({"analyze", ws.config.string(), "--override", "model.K=7", "--checkpoint", ckpt, "--out",
                   csv.string()})
                  .code,
              kExitConfig);
}

TEST(Cli, GradcheckPassesAndInjectedFaultFails) {
    const CliResult ok = run({"gradcheck", "--size", "12", "--seed", "4"});
    EXPECT_EQ(ok.code, kExitOk) << ok.out;
    EXPECT_EQ(run({"gradcheck", "--size", "12", "--seed", "4"}).out, ok.out);
    const CliResult bad = run({"gradcheck", "--size", "12", "--seed", "4", "--inject-fault"});
    EXPECT_EQ(bad.code, kExitCheckFailed);
    EXPECT_NE(bad.out.find("ops/matmul"), std::string::npos);
    EXPECT_FALSE(capgnn::testing::matmul_backward_fault());
}

TEST(Cli, Validate) {
    Workspace ws;
    const CliResult ok = run({"validate", (ws.dir / "data").string()});
    EXPECT_EQ(ok.code, kExitOk) << ok.out;
    EXPECT_NE(ok.out.find("30 vertices"), std::string::npos);
    EXPECT_EQ(run({"validate", (ws.dir / "missing").string()}).code, kExitData);

    GraphDataset g = random_graph(12, 3, 2, 0.3, 1);
    g.test.push_back(g.train.front());
    std::sort(g.test.begin(), g.test.end());
    write_dataset(g, ws.dir / "overlap");
    const CliResult bad = run({"validate", (ws.dir / "overlap").string()});
    EXPECT_EQ(bad.code, kExitCheckFailed);
    EXPECT_NE(bad.out.find("index " + std::to_string(g.train.front()) + " appears in both train and test"),
              std::string::npos)
        << bad.out;
}

TEST(Cli, SynthRoundTripsThroughValidate) {
    TempDir dir("synth");
    ASSERT_EQ(run({"synth", "--kind", "csbm", "--vertices", "200", "--seed", "2", "--out", (dir / "c").string()}).code,
              kExitOk);
    EXPECT_EQ(run({"validate", (dir / "c").string()}).code, kExitOk);
    ASSERT_EQ(run({"synth", "--kind", "two-cliques", "--out", (dir / "t").string()}).code, kExitOk);
    EXPECT_NE(run({"validate", (dir / "t").string()}).out.find("12 vertices"), std::string::npos);
    EXPECT_EQ(run({"synth", "--kind", "lattice", "--out", (dir / "x").string()}).code, kExitConfig);
}
