#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "capgnn/model.hpp"
#include "capgnn/objective.hpp"

namespace capgnn {

/// Every knob of a training run.
struct TrainConfig {
    std::filesystem::path dataset;
    ModelConfig model;
    Real lr = 1e-2;
    Real psi_l2 = 1e-3;
    Real psi_ecl = 1.0;
    Real tau = 1.0;
    std::size_t views = 8;  // M
    std::size_t max_epochs = 2000;
    std::size_t patience = 200;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::size_t runs = 1;
    /// When false every metrics record carries seconds = 0, making streams byte-comparable.
    bool record_time = true;

    LossWeights loss_weights() const;
    /// Throws ConfigError on any out-of-range value.
    void validate() const;
};

/// Flat "section.key" -> raw value map parsed from the config text format:
///
///   # comment
///   [section]
///   key = value        # numbers, true/false, bare or "quoted" strings
///
/// Keys outside any section are rejected.
using ConfigTable = std::map<std::string, std::string>;

ConfigTable parse_config_text(const std::string& text, const std::string& origin = "<config>");
ConfigTable read_config_file(const std::filesystem::path& path);

/// Applies a table onto `config`. Unknown keys and ill-typed values throw ConfigError.
/// Relative dataset paths resolve against `base_dir`.
void apply_config(TrainConfig& config, const ConfigTable& table, const std::filesystem::path& base_dir = {});
/// Parses "section.key=value".
void apply_override(TrainConfig& config, const std::string& assignment);

TrainConfig load_train_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Re-serializes a config in the text format; round-trips through apply_config.
std::string to_config_text(const TrainConfig& config);

/// Hyperparameter presets for the citation benchmarks: "cora", "citeseer", "pubmed".
TrainConfig preset(const std::string& dataset, Variant variant);

std::vector<std::string> known_config_keys();

}  // namespace capgnn
