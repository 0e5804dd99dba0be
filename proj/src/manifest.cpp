#include "dumo/manifest.hpp"

#include <fstream>
#include <map>

#include "dumo/errors.hpp"

namespace dumo {

void RunManifest::add_input(const std::filesystem::path& file) {
  inputs.push_back({std::filesystem::absolute(file).lexically_normal().string(), sha256_file(file)});
}

void RunManifest::add_output(const std::filesystem::path& root, const std::filesystem::path& file) {
  outputs.push_back({std::filesystem::relative(file, root).string(), sha256_file(file)});
}

namespace {

Json records(const std::vector<FileRecord>& rs) {
  Json out = Json::array();
  for (const auto& r : rs) out.push_back({{"path", r.path}, {"sha256", r.sha256}});
  return out;
}

std::vector<FileRecord> records_from(const Json& j) {
  std::vector<FileRecord> out;
  for (const auto& r : j) out.push_back({r.at("path").get<std::string>(), r.at("sha256").get<std::string>()});
  return out;
}

}  // namespace

Json RunManifest::to_json() const {
  return Json{{"kind", "run_manifest"},
              {"version", 1},
              {"command", command},
              {"tool_version", tool_version},
              {"config", config},
              {"arguments", arguments},
              {"seeds", seeds},
              {"inputs", records(inputs)},
              {"outputs", records(outputs)}};
}

RunManifest RunManifest::from_json(const Json& j) {
  if (j.value("kind", "") != "run_manifest") throw PreconditionError("document is not a run manifest");
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.tool_version = j.at("tool_version").get<std::string>();
  m.config = j.at("config");
  m.arguments = j.at("arguments");
  m.seeds = j.at("seeds");
  m.inputs = records_from(j.at("inputs"));
  m.outputs = records_from(j.at("outputs"));
  return m;
}

void RunManifest::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw PreconditionError("cannot write " + path.string());
  os << to_json().dump(2) << '\n';
}

RunManifest RunManifest::read(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw PreconditionError("missing run manifest " + path.string());
  try {
    return from_json(Json::parse(is));
  } catch (const Json::exception& e) {
    throw PreconditionError(path.string() + ": malformed run manifest: " + e.what());
  }
}

void verify_against_manifest(const std::filesystem::path& file) {
  if (!std::filesystem::exists(file)) throw PreconditionError("missing input file " + file.string());
  const auto dir = file.has_parent_path() ? file.parent_path() : std::filesystem::path(".");
  const auto manifest_path = dir / kManifestName;
  if (!std::filesystem::exists(manifest_path))
    throw PreconditionError(file.string() + " has no run manifest (expected " + manifest_path.string() + ")");
  const auto m = RunManifest::read(manifest_path);
  const auto rel = std::filesystem::relative(file, dir).string();
  for (const auto& r : m.outputs) {
    if (r.path != rel) continue;
    const auto actual = sha256_file(file);
    if (actual != r.sha256)
      throw PreconditionError(file.string() + " has sha256 " + actual + " but " + manifest_path.string() +
                              " expects " + r.sha256);
    return;
  }
  throw PreconditionError(file.string() + " is not listed in " + manifest_path.string());
}

std::vector<std::string> compare_outputs(const RunManifest& expected, const RunManifest& actual) {
  std::map<std::string, std::string> got;
  for (const auto& r : actual.outputs) got[r.path] = r.sha256;
  std::vector<std::string> diffs;
  for (const auto& r : expected.outputs) {
    const auto it = got.find(r.path);
    if (it == got.end())
      diffs.push_back(r.path + ": missing from re-run");
    else if (it->second != r.sha256)
      diffs.push_back(r.path + ": " + r.sha256 + " != " + it->second);
  }
  return diffs;
}

}  // namespace dumo
