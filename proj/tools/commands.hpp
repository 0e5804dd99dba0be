#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dumo/config.hpp"
#include "dumo/manifest.hpp"

namespace dumo::cli {

/// One command: resolved config + command arguments -> files in `out` + manifest.
/// Arguments hold input paths and per-command flags so a manifest can be replayed.
using CommandFn = std::function<RunManifest(const PipelineConfig&, const Json& args, const std::filesystem::path& out)>;

struct CommandInfo {
  std::string name;
  std::string summary;
  CommandFn run;
};

const std::vector<CommandInfo>& commands();
const CommandInfo& find_command(const std::string& name);

/// Runs `name`, writes `out/run_manifest.json` and returns the manifest.
RunManifest execute(const std::string& name, const Json& config_json, const Json& args,
                    const std::filesystem::path& out);

/// Re-runs a recorded manifest into `out`; returns the output hash differences.
std::vector<std::string> replay(const std::filesystem::path& manifest, const std::filesystem::path& out);

/// $DUMO_HOME/runs/<command> or ./runs/<command>.
std::filesystem::path default_output_dir(const std::string& command);

}  // namespace dumo::cli
