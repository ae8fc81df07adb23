#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "rollsim/scenario.hpp"

namespace rollsim {

// Schema violation. what() starts with the offending field path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// Parses and validates a scenario. Unknown keys are rejected. Missing keys
// keep their defaults. `base_dir` resolves relative table paths.
ScenarioConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
ScenarioConfig load_config(const std::filesystem::path& path);

// Canonical JSON; parse_config(serialize_config(c)) == c field for field.
std::string serialize_config(const ScenarioConfig& config, int indent = 2);

bool same_config(const ScenarioConfig& a, const ScenarioConfig& b);

}  // namespace rollsim
