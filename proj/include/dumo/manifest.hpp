#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dumo/archive.hpp"

namespace dumo {

inline constexpr const char* kToolVersion = "0.3.0";

struct FileRecord {
  std::string path;  // relative to the manifest's directory when inside it
  std::string sha256;
};

/// Record of one command invocation: enough to re-run it and to check its outputs.
struct RunManifest {
  std::string command;
  Json config = Json::object();
  Json arguments = Json::object();  // command-specific flags (inputs, concept names, ...)
  Json seeds = Json::object();
  std::vector<FileRecord> inputs;
  std::vector<FileRecord> outputs;
  std::string tool_version = kToolVersion;

  void add_input(const std::filesystem::path& file);
  /// Records a file below `root` by relative path.
  void add_output(const std::filesystem::path& root, const std::filesystem::path& file);

  Json to_json() const;
  static RunManifest from_json(const Json& j);
  void write(const std::filesystem::path& path) const;
  static RunManifest read(const std::filesystem::path& path);
};

inline constexpr const char* kManifestName = "run_manifest.json";

/// Checks `file` against the run manifest in its directory. Throws PreconditionError
/// naming the file and the expected hash when missing or mismatched.
void verify_against_manifest(const std::filesystem::path& file);

/// Output hashes that differ between two manifests, as "path: expected != actual".
std::vector<std::string> compare_outputs(const RunManifest& expected, const RunManifest& actual);

}  // namespace dumo
