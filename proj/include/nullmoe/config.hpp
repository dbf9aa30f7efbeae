#pragma once

#include "nullmoe/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

namespace nullmoe {

// Run configuration as nested key-value structured text, one `dotted.key =
// value` per line, `#` comments. Unknown keys are errors (with the line
// number); all keys have defaults except `version`.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

// Every effective key, sorted, in a normalized format. parse -> canonicalize
// -> re-parse is a fixed point.
std::string canonical_config(const RunConfig& cfg);

uint64_t fnv1a64(const std::string& text);
std::string config_hash_hex(const RunConfig& cfg);

}  // namespace nullmoe
