#pragma once

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace declutter {

/// Sets `key.subkey=value` in a JSON document. The value is parsed as JSON
/// when possible and kept as a string otherwise.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Command-line entry point. Returns 0 on success, 1 on invalid input,
/// 2 on a runtime failure.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace declutter
