#include "capgnn/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "capgnn/errors.hpp"

namespace capgnn {

namespace fs = std::filesystem;

LossWeights TrainConfig::loss_weights() const { return LossWeights{psi_ecl, psi_l2, tau}; }

void TrainConfig::validate() const {
    model.validate();
    if (!(lr > 0.0)) throw ConfigError("trainer.lr must be positive");
    if (!(psi_l2 >= 0.0)) throw ConfigError("loss.psi_l2 must be nonnegative");
    if (!(psi_ecl >= 0.0)) throw ConfigError("loss.psi_ecl must be nonnegative");
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("loss.tau must lie in (0, 1]");
    if (views < 1) throw ConfigError("loss.views must be >= 1");
    if (threads < 1) throw ConfigError("trainer.threads must be >= 1");
    if (runs < 1) throw ConfigError("trainer.runs must be >= 1");
    if (max_epochs < 1) throw ConfigError("trainer.max_epochs must be >= 1");
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') quoted = !quoted;
        if (line[i] == '#' && !quoted) return line.substr(0, i);
    }
    return line;
}

Real parse_real(const std::string& key, const std::string& v) {
    Real out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) throw ConfigError(key + ": expected a number, got \"" + v + "\"");
    return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
        throw ConfigError(key + ": expected a nonnegative integer, got \"" + v + "\"");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(key + ": expected true or false, got \"" + v + "\"");
}

std::string unquote(const std::string& v) {
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
    return v;
}

using Setter = std::function<void(TrainConfig&, const std::string& key, const std::string& value, const fs::path& base)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        auto real = [&](const char* key, auto member) {
            t[key] = [member](TrainConfig& c, const std::string& k, const std::string& v, const fs::path&) {
                member(c) = parse_real(k, v);
            };
        };
        auto count = [&](const char* key, auto member) {
            t[key] = [member](TrainConfig& c, const std::string& k, const std::string& v, const fs::path&) {
                member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(parse_uint(k, v));
            };
        };
        auto flag = [&](const char* key, auto member) {
            t[key] = [member](TrainConfig& c, const std::string& k, const std::string& v, const fs::path&) {
                member(c) = parse_bool(k, v);
            };
        };
        t["dataset.path"] = [](TrainConfig& c, const std::string&, const std::string& v, const fs::path& base) {
            const fs::path p(unquote(v));
            c.dataset = p.is_relative() && !base.empty() ? base / p : p;
        };
        t["model.variant"] = [](TrainConfig& c, const std::string&, const std::string& v, const fs::path&) {
            c.model.variant = parse_variant(unquote(v));
        };
        real("model.alpha", [](TrainConfig& c) -> Real& { return c.model.alpha; });
        count("model.K", [](TrainConfig& c) -> std::size_t& { return c.model.K; });
        real("model.beta", [](TrainConfig& c) -> Real& { return c.model.beta; });
        real("model.leaky_slope", [](TrainConfig& c) -> Real& { return c.model.leaky_slope; });
        flag("model.batch_norm", [](TrainConfig& c) -> bool& { return c.model.use_batch_norm; });
        flag("model.learn_coefficients", [](TrainConfig& c) -> bool& { return c.model.learn_coefficients; });
        real("dropout.input", [](TrainConfig& c) -> Real& { return c.model.dr_input; });
        real("dropout.mlp", [](TrainConfig& c) -> Real& { return c.model.dr_mlp; });
        real("dropout.edge", [](TrainConfig& c) -> Real& { return c.model.dr_edge; });
        real("dropout.coef_att", [](TrainConfig& c) -> Real& { return c.model.dr_coef_att; });
        real("loss.psi_ecl", [](TrainConfig& c) -> Real& { return c.psi_ecl; });
        real("loss.psi_l2", [](TrainConfig& c) -> Real& { return c.psi_l2; });
        real("loss.tau", [](TrainConfig& c) -> Real& { return c.tau; });
        count("loss.views", [](TrainConfig& c) -> std::size_t& { return c.views; });
        real("trainer.lr", [](TrainConfig& c) -> Real& { return c.lr; });
        count("trainer.max_epochs", [](TrainConfig& c) -> std::size_t& { return c.max_epochs; });
        count("trainer.patience", [](TrainConfig& c) -> std::size_t& { return c.patience; });
        count("trainer.seed", [](TrainConfig& c) -> std::uint64_t& { return c.seed; });
        count("trainer.threads", [](TrainConfig& c) -> std::size_t& { return c.threads; });
        count("trainer.runs", [](TrainConfig& c) -> std::size_t& { return c.runs; });
        flag("trainer.record_time", [](TrainConfig& c) -> bool& { return c.record_time; });
        return t;
    }();
    return table;
}

}  // namespace

std::vector<std::string> known_config_keys() {
    std::vector<std::string> keys;
    for (const auto& [k, _] : setters()) keys.push_back(k);
    return keys;
}

ConfigTable parse_config_text(const std::string& text, const std::string& origin) {
    ConfigTable table;
    std::istringstream in(text);
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = origin + ":" + std::to_string(line_no) + ": ";
        line = trim(strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) throw ConfigError(where + "empty section name");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty()) throw ConfigError(where + "expected key = value");
        if (section.empty()) throw ConfigError(where + "key \"" + key + "\" outside of a section");
        const std::string full = section + "." + key;
        if (table.count(full)) throw ConfigError(where + "duplicate key " + full);
        table[full] = value;
    }
    return table;
}

ConfigTable read_config_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path.string());
}

void apply_config(TrainConfig& config, const ConfigTable& table, const fs::path& base_dir) {
    for (const auto& [key, value] : table) {
        const auto it = setters().find(key);
        if (it == setters().end()) throw ConfigError("unknown config key \"" + key + "\"");
        it->second(config, key, value, base_dir);
    }
}

void apply_override(TrainConfig& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override \"" + assignment + "\" is not key=value");
    ConfigTable t{{trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1))}};
    apply_config(config, t, fs::current_path());
}

TrainConfig load_train_config(const fs::path& path, const std::vector<std::string>& overrides) {
    TrainConfig config;
    apply_config(config, read_config_file(path), path.parent_path());
    for (const auto& o : overrides) apply_override(config, o);
    config.validate();
    return config;
}

std::string to_config_text(const TrainConfig& c) {
    std::ostringstream out;
    out.precision(17);
    out << "[dataset]\npath = \"" << c.dataset.string() << "\"\n\n";
    out << "[model]\nvariant = " << to_string(c.model.variant) << "\nalpha = " << c.model.alpha
        << "\nK = " << c.model.K << "\nbeta = " << c.model.beta << "\nleaky_slope = " << c.model.leaky_slope
        << "\nbatch_norm = " << (c.model.use_batch_norm ? "true" : "false")
        << "\nlearn_coefficients = " << (c.model.learn_coefficients ? "true" : "false") << "\n\n";
    out << "[dropout]\ninput = " << c.model.dr_input << "\nmlp = " << c.model.dr_mlp << "\nedge = " << c.model.dr_edge
        << "\ncoef_att = " << c.model.dr_coef_att << "\n\n";
    out << "[loss]\npsi_ecl = " << c.psi_ecl << "\npsi_l2 = " << c.psi_l2 << "\ntau = " << c.tau
        << "\nviews = " << c.views << "\n\n";
    out << "[trainer]\nlr = " << c.lr << "\nmax_epochs = " << c.max_epochs << "\npatience = " << c.patience
        << "\nseed = " << c.seed << "\nthreads = " << c.threads << "\nruns = " << c.runs
        << "\nrecord_time = " << (c.record_time ? "true" : "false") << "\n";
    return out.str();
}

TrainConfig preset(const std::string& dataset, Variant variant) {
    TrainConfig c;
    c.model.variant = variant;
    c.model.K = 10;
    c.model.beta = 0.3;
    c.model.leaky_slope = 0.2;
    c.views = 8;
    c.psi_ecl = 1.0;
    c.max_epochs = 2000;
    c.patience = 200;
    c.model.dr_coef_att = 0.3;
    if (dataset == "cora") {
        c.lr = 1e-2;
        c.psi_l2 = 1e-3;
        c.model.alpha = 0.1;
        c.model.dr_input = 0.8;
        c.model.dr_mlp = 0.9;
        c.model.dr_edge = 0.7;
        c.tau = 0.4;
    } else if (dataset == "citeseer") {
        c.lr = 1e-2;
        c.psi_l2 = 1e-3;
        c.model.alpha = 0.1;
        c.model.dr_input = 0.5;
        c.model.dr_mlp = 0.1;
        c.model.dr_edge = 0.0;
        c.tau = 0.4;
    } else if (dataset == "pubmed") {
        c.lr = 2e-1;
        c.psi_l2 = 2e-3;
        c.model.alpha = 0.2;
        c.model.dr_input = 0.1;
        c.model.dr_mlp = 0.15;
        c.model.dr_edge = 0.1;
        c.tau = 1.0;
        c.model.use_batch_norm = true;
    } else {
        throw ConfigError("no preset for dataset \"" + dataset + "\"");
    }
    return c;
}

}  // namespace capgnn
