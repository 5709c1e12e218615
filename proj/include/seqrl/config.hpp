#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "seqrl/experiment.hpp"

namespace seqrl {

/// Flat view of a TOML-style file: "section.key" -> raw values (arrays
/// keep one entry per element).
using ConfigMap = std::map<std::string, std::vector<std::string>>;

ConfigMap parse_config_text(std::string_view text);
ConfigMap read_config_file(const std::filesystem::path& path);

/// "section.key=value"; a value in brackets is split on commas.
void apply_override(ConfigMap& map, std::string_view assignment);
void set_value(ConfigMap& map, const std::string& key, std::vector<std::string> values);

/// Starts from the built-in defaults and applies every key; unknown keys and
/// malformed values are Config errors.
ExperimentConfig build_experiment_config(const ConfigMap& map);

/// Resolved configuration in the same file syntax; reading it back gives an
/// identical ExperimentConfig.
std::string to_config_text(const ExperimentConfig& config);

/// Every key accepted by build_experiment_config.
const std::vector<std::string>& known_config_keys();

}  // namespace seqrl
