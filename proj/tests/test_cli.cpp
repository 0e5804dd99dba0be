#include "testing.hpp"

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include "commands.hpp"
#include "dumo/errors.hpp"
#include "helpers.hpp"

using namespace dumo;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DUMO_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("reference preset resolves to the documented world") {
  const auto c = reference_config();
  CHECK(c.world.resolution == 16);
  CHECK(c.arch.resolution == 16);
  CHECK(c.world.per_concept == 1000);
  CHECK(c.arch.skip_count() == 7);
  CHECK(c.target == "stripes");
  CHECK(c.strategy_for("stripes") == FinetuneStrategy::cross_attention_only);
  CHECK(c.strategy_for("disk") == FinetuneStrategy::full);
  CHECK(c.condition("").id == 0);
  CHECK(c.condition("none").id == 0);
  CHECK(c.condition("checker").id == 2);
  CHECK_THROWS_AS(c.condition("van gogh"), ConfigError);
  const auto p = c.protocol();
  CHECK(p.erased == std::vector<int>{1});
  CHECK(p.retained == std::vector<int>{2, 3, 4});
}

TEST_CASE("config JSON round-trips and section seeds derive from the top seed") {
  const auto c = reference_config();
  const auto j = to_json(c);
  CHECK(to_json(pipeline_from_json(j)) == j);
  auto other = reference_preset();
  other["seed"] = 8;
  const auto d = pipeline_from_json(other);
  CHECK(d.base.seed != c.base.seed);
  CHECK(d.world.seed != c.world.seed);
  CHECK(d.base.seed == mix_seed(8, 2));
}

TEST_CASE("unknown keys and malformed TOML are configuration errors") {
  CHECK_THROWS_AS(pipeline_from_json(Json{{"erase", {{"stepz", 3}}}}), ConfigError);
  CHECK_THROWS_AS(pipeline_from_json(Json{{"colour", 1}}), ConfigError);
  CHECK_THROWS_AS(pipeline_from_json(Json{{"erase", {{"steps", "many"}}}}), ConfigError);
  CHECK_THROWS_AS(pipeline_from_json(Json{{"tlmo", {{"mode", "diagonal"}}}}), ConfigError);
  try {
    parse_toml("[erase]\nsteps = = 3\n", "bad.toml");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).rfind("bad.toml:2:", 0) == 0);
  }
}

TEST_CASE("TOML, merges and overrides combine") {
  auto j = parse_toml("seed = 3\n[erase]\nsteps = 10\nt_range = [5, 50]\n");
  j = merge_json(j, Json{{"erase", {{"learning_rate", 0.5}}}});
  apply_override(j, "erase.steps=20");
  apply_override(j, "erase.target=disk");
  apply_override(j, "tlmo.mode=\"layer_only\"");
  apply_override(j, "eval.sampler_steps=7");
  const auto c = pipeline_from_json(j);
  CHECK(c.seed == 3);
  CHECK(c.erase.steps == 20);
  CHECK(c.erase.learning_rate == 0.5);
  CHECK(c.erase.t_range == std::pair<int, int>{5, 50});
  CHECK(c.target == "disk");
  CHECK(c.tlmo.mode == ModulationMode::layer_only);
  CHECK(c.eval.sampler.steps == 7);
  CHECK_THROWS_AS(apply_override(j, "novalue"), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "erase..steps=1"), ConfigError);
}

TEST_CASE("shipped TOML presets load and validate") {
  const std::filesystem::path root = DUMO_SOURCE_DIR;
  for (const auto* name : {"reference.toml", "smoke.toml", "erase-disk-full.toml"}) {
    const auto c = pipeline_from_json(merge_json(reference_preset(), load_toml(root / "configs" / name)));
    CHECK(c.world.resolution >= 8);
  }
  CHECK(to_json(pipeline_from_json(load_toml(root / "configs" / "reference.toml"))) == to_json(reference_config()));
  CHECK(to_json(pipeline_from_json(load_toml(root / "configs" / "smoke.toml"))) == to_json(smoke_config()));
}

TEST_CASE("run manifests record hashes and catch tampering") {
  const auto dir = dumo::test::scratch("manifest");
  std::ofstream(dir / "a.txt") << "hello";
  RunManifest m;
  m.command = "demo";
  m.add_output(dir, dir / "a.txt");
  m.write(dir / kManifestName);
  const auto back = RunManifest::read(dir / kManifestName);
  CHECK(back.outputs.at(0).path == "a.txt");
  CHECK(back.outputs.at(0).sha256 == sha256_file(dir / "a.txt"));
  verify_against_manifest(dir / "a.txt");
  std::ofstream(dir / "a.txt") << "hellO";
  try {
    verify_against_manifest(dir / "a.txt");
    FAIL("expected PreconditionError");
  } catch (const PreconditionError& e) {
    const std::string what = e.what();
    CHECK(what.find("a.txt") != std::string::npos);
    CHECK(what.find(back.outputs.at(0).sha256) != std::string::npos);
  }
  CHECK_THROWS_AS(verify_against_manifest(dir / "missing.txt"), PreconditionError);
  auto changed = back;
  changed.outputs[0].sha256 = "0";
  CHECK(compare_outputs(back, changed).size() == 1);
  CHECK(compare_outputs(back, back).empty());
}

TEST_CASE("commands are deterministic and verify their inputs") {
  const auto cfg = to_json(smoke_config());
  const auto a = dumo::test::scratch("cmd_a"), b = dumo::test::scratch("cmd_b");
  const auto ma = cli::execute("gen-data", cfg, Json::object(), a);
  const auto mb = cli::execute("gen-data", cfg, Json::object(), b);
  CHECK(compare_outputs(ma, mb).empty());
  CHECK(std::filesystem::exists(a / kManifestName));
  CHECK(cli::replay(a / kManifestName, dumo::test::scratch("cmd_replay")).empty());

  {
    std::fstream f(b / "dataset.tensors", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put('\x01');
  }
  CHECK_THROWS_AS(cli::execute("train-classifier", cfg, Json{{"data", b.string()}}, dumo::test::scratch("cmd_c")),
                  PreconditionError);
  CHECK_THROWS_AS(cli::execute("train-base", cfg, Json::object(), dumo::test::scratch("cmd_d")), ConfigError);
  CHECK_THROWS_AS(cli::execute("plot", cfg, Json::object(), dumo::test::scratch("cmd_e")), ConfigError);
  CHECK_THROWS_AS(cli::find_command("frobnicate"), ConfigError);
}

TEST_CASE("the executable maps failures onto exit codes") {
  const auto dir = dumo::test::scratch("exit");
  CHECK(run_cli("--preset smoke --out " + q(dir / "data") + " gen-data") == 0);
  CHECK(run_cli("--preset smoke --set world.colour=1 --out " + q(dir / "x") + " gen-data") == 2);
  CHECK(run_cli("--preset smoke --out " + q(dir / "y") + " train-base --data " + q(dir / "nowhere")) == 3);
  CHECK(run_cli("--preset smoke --out " + q(dir / "base") + " train-base --data " + q(dir / "data")) == 0);
  CHECK(run_cli("--preset smoke --set erase.eta=inf --out " + q(dir / "nan") + " finetune-epr --base " +
                q(dir / "base" / "base.ckpt")) == 4);
  CHECK(run_cli("--preset smoke --seed 9 show-config") == 0);
  CHECK(run_cli("replay " + q(dir / "data" / kManifestName) + " --out " + q(dir / "again")) == 0);
}

}
