#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "m3/trainer/trainer.hpp"

namespace m3::cli {

// Bad user input: unknown keys, wrong value types, unreadable files.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Everything a run needs, addressed by flat dotted keys ("sac.critic_lr").
struct CliConfig {
  trainer::RunConfig run;
  std::string adapter;  // empty selects the surrogate simulators
  std::uint64_t surrogate_seed = 20240917;
};

std::vector<std::string> config_keys();

// Sets one key; throws ConfigError naming every valid key when `key` is
// unknown, or when the value has the wrong type.
void set_key(CliConfig& config, const std::string& key, const nlohmann::json& value);
// "key=value"; the value is read as JSON and falls back to a plain string.
void apply_override(CliConfig& config, const std::string& assignment);

// Flat object with every key. Objects keep keys sorted, so the dump is
// canonical.
nlohmann::json to_json(const CliConfig& config);
// Applies each key of a flat object on top of the defaults.
CliConfig from_json(const nlohmann::json& flat);
CliConfig load_config(const std::filesystem::path& path);

// Git blob hash: SHA-1 of "blob <size>\0<content>".
std::string git_blob_sha1(const std::string& content);
// Blob hash of the canonical dump without the output directory.
std::string config_hash(const CliConfig& config);

// Written to the output directory before the first training step.
nlohmann::json make_manifest(const CliConfig& config, const std::filesystem::path& out_dir);

}  // namespace m3::cli
