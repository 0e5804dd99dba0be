#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <map>

#include "commands.hpp"
#include "dumo/errors.hpp"

namespace {

using dumo::Json;

struct Flags {
  std::vector<std::string> single;
  std::vector<std::string> multi;
  bool count = false;
};

const std::map<std::string, Flags>& flag_table() {
  static const std::map<std::string, Flags> t{
      {"gen-data", {}},
      {"train-base", {{"data"}, {}}},
      {"train-classifier", {{"data"}, {}}},
      {"finetune-epr", {{"base", "concept", "strategy"}, {}}},
      {"finetune-direct", {{"base", "concept"}, {}}},
      {"run-tlmo", {{"base", "epr"}, {}}},
      {"generate", {{"base", "concept"}, {"epr", "modulation"}, true}},
      {"ablate", {{"base", "metric", "scheme"}, {"epr", "modulation", "mask"}}},
      {"eval", {{"base", "classifier", "metric", "direct", "concept"}, {"epr", "modulation"}}},
      {"eval-direct", {{"base", "classifier", "metric", "direct", "concept"}, {}}},
      {"plot", {{"grid", "report", "effects"}, {"loss"}}},
      {"smoke", {}},
  };
  return t;
}

struct Invocation {
  std::map<std::string, std::string> single;
  std::map<std::string, std::vector<std::string>> multi;
  int n = 8;
};

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"dumo: concept erasure lab for small diffusion models"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_file, preset, out;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_file, "TOML configuration file")->check(CLI::ExistingFile);
  app.add_option("--preset", preset, "built-in configuration: reference or smoke");
  app.add_option("--set", overrides, "override a config value, e.g. --set erase.steps=400");
  app.add_option("--seed", seed, "top-level seed");
  app.add_option("--out", out, "output directory (default $DUMO_HOME/runs/<command>)");

  std::map<std::string, Invocation> inv;
  for (const auto& c : dumo::cli::commands()) {
    auto* sub = app.add_subcommand(c.name, c.summary);
    const auto& f = flag_table().at(c.name);
    auto& i = inv[c.name];
    for (const auto& k : f.single) sub->add_option("--" + k, i.single[k]);
    for (const auto& k : f.multi) sub->add_option("--" + k, i.multi[k]);
    if (f.count) sub->add_option("--n", i.n, "number of images")->check(CLI::PositiveNumber);
  }
  std::string replay_manifest;
  auto* rep = app.add_subcommand("replay", "re-run a recorded manifest and compare output hashes");
  rep->add_option("manifest", replay_manifest)->required()->check(CLI::ExistingFile);
  auto* show = app.add_subcommand("show-config", "print the resolved configuration as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(dumo::ExitCode::config);
  }

  try {
    if (rep->parsed()) {
      const auto dir = out.empty() ? dumo::cli::default_output_dir("replay") : std::filesystem::path(out);
      const auto diffs = dumo::cli::replay(replay_manifest, dir);
      for (const auto& d : diffs) std::cerr << "mismatch " << d << '\n';
      std::cout << (diffs.empty() ? "replay matched" : "replay differs") << " (" << dir.string() << ")\n";
      return diffs.empty() ? 0 : static_cast<int>(dumo::ExitCode::precondition);
    }

    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (preset.empty()) preset = name == "smoke" ? "smoke" : "reference";
    Json cfg;
    if (preset == "reference") cfg = dumo::reference_preset();
    else if (preset == "smoke") cfg = dumo::smoke_preset();
    else throw dumo::ConfigError("unknown preset '" + preset + "' (reference, smoke)");
    if (!config_file.empty()) cfg = dumo::merge_json(cfg, dumo::load_toml(config_file));
    for (const auto& o : overrides) dumo::apply_override(cfg, o);
    if (seed) cfg["seed"] = *seed;

    if (show->parsed()) {
      std::cout << dumo::to_json(dumo::pipeline_from_json(cfg)).dump(2) << '\n';
      return 0;
    }

    // Paths are recorded absolute so a manifest can be replayed from anywhere.
    const auto resolve = [](const std::string& key, const std::string& v) -> std::string {
      if (key == "concept" || key == "strategy" || key == "mask" || v == "none") return v;
      return std::filesystem::absolute(v).lexically_normal().string();
    };
    Json args = Json::object();
    const auto& f = flag_table().at(name);
    const auto& i = inv.at(name);
    for (const auto& k : f.single)
      if (!i.single.at(k).empty()) args[k] = resolve(k, i.single.at(k));
    for (const auto& k : f.multi) {
      if (i.multi.at(k).empty()) continue;
      args[k] = Json::array();
      for (const auto& v : i.multi.at(k)) args[k].push_back(resolve(k, v));
    }
    if (f.count) args["n"] = i.n;

    const auto dir = out.empty() ? dumo::cli::default_output_dir(name) : std::filesystem::path(out);
    const auto m = dumo::cli::execute(name, cfg, args, dir);
    std::cout << name << ": " << m.outputs.size() << " outputs in " << dir.string() << '\n';
    return 0;
  } catch (const dumo::NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (!e.dump_path().empty()) std::cerr << "state dumped to " << e.dump_path() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const dumo::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const Json::exception& e) {
    std::cerr << "error: malformed JSON input: " << e.what() << '\n';
    return static_cast<int>(dumo::ExitCode::config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
