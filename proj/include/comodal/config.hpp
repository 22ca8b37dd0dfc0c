// SPDX-License-Identifier: Apache-2.0
//
// JSON experiment configuration. Every key is optional except `modalities`;
// unknown keys are rejected and errors name the offending key path.
#pragma once

#include <filesystem>
#include <string>

#include "comodal/trainer.hpp"

namespace comodal {

/// Throws IoError for unreadable files and ConfigError for schema violations.
ExperimentConfig parse_config(const std::filesystem::path& path);
ExperimentConfig parse_config_text(const std::string& text);

/// Canonical JSON for a configuration; parse_config_text round-trips it.
std::string config_to_json(const ExperimentConfig& config);

/// Reference table of every key with its type and default.
std::string defaults_reference();

/// Hex digest of the raw config bytes and the run seed.
std::string make_run_id(const std::string& config_bytes, std::uint64_t seed);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace comodal
