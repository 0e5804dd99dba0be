#include "commands.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dumo/errors.hpp"
#include "dumo/image_io.hpp"
#include "dumo/plot.hpp"

namespace dumo::cli {

namespace fs = std::filesystem;

namespace {

std::string arg_string(const Json& args, const char* key, const std::string& fallback = {}) {
  if (!args.contains(key) || args.at(key).is_null()) return fallback;
  if (!args.at(key).is_string()) throw ConfigError(std::string("--") + key + " must be a string");
  return args.at(key).get<std::string>();
}

std::vector<std::string> arg_list(const Json& args, const char* key) {
  if (!args.contains(key) || args.at(key).is_null()) return {};
  if (args.at(key).is_string()) return {args.at(key).get<std::string>()};
  return args.at(key).get<std::vector<std::string>>();
}

/// Required input file; must match the run manifest next to it.
fs::path input(RunManifest& m, const Json& args, const char* key) {
  const auto s = arg_string(args, key);
  if (s.empty()) throw ConfigError(std::string("missing required --") + key);
  const fs::path p(s);
  verify_against_manifest(p);
  m.add_input(p);
  return p;
}

fs::path dataset_archive(RunManifest& m, const Json& args) {
  const auto dir = arg_string(args, "data");
  if (dir.empty()) throw ConfigError("missing required --data");
  const auto archive = fs::path(dir) / "dataset.tensors";
  verify_against_manifest(archive);
  m.add_input(archive);
  return dir;
}

void record(RunManifest& m, const fs::path& out, std::initializer_list<fs::path> files) {
  for (const auto& f : files) m.add_output(out, f);
}

void write_json(const fs::path& path, const Json& j) {
  std::ofstream os(path);
  if (!os) throw PreconditionError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

Json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw PreconditionError("cannot read " + path.string());
  return Json::parse(is);
}

std::string concept_arg(const PipelineConfig& cfg, const Json& args) {
  return arg_string(args, "concept", cfg.target);
}

/// Base model plus the EPR / modulation stack described by --epr and --modulation.
struct Loaded {
  BaseUNet base{nullptr};
  std::vector<EPRModule> eprs;
  std::vector<std::optional<ModulationFactors>> grids;
  AdapterStack stack;
};

Loaded load_stack(RunManifest& m, const Json& args) {
  Loaded l;
  l.base = load_base_unet(input(m, args, "base"));
  const auto eprs = arg_list(args, "epr");
  const auto grids = arg_list(args, "modulation");
  if (!grids.empty() && grids.size() != eprs.size())
    throw ConfigError("--modulation must be given once per --epr (use 'none' to skip one)");
  for (std::size_t i = 0; i < eprs.size(); ++i) {
    verify_against_manifest(eprs[i]);
    m.add_input(eprs[i]);
    l.eprs.push_back(load_epr(eprs[i], l.base));
    std::optional<ModulationFactors> grid;
    if (!grids.empty() && grids[i] != "none") {
      verify_against_manifest(grids[i]);
      m.add_input(grids[i]);
      grid = load_modulation(grids[i]);
    }
    l.grids.push_back(grid);
    l.stack.push(AdapterEntry{l.eprs.back(), grid, ApplyMask{}});
  }
  return l;
}

std::vector<double> column(const std::vector<StepRecord>& t) {
  std::vector<double> v;
  for (const auto& r : t) v.push_back(r.total);
  return v;
}

std::vector<double> column(const std::vector<LossPoint>& t) {
  std::vector<double> v;
  for (const auto& r : t) v.push_back(r.loss);
  return v;
}

// --- commands ----------------------------------------------------------------

RunManifest gen_data(const PipelineConfig& cfg, const Json&, const fs::path& out) {
  RunManifest m;
  m.seeds = {{"world", cfg.world.seed}};
  const auto d = generate_dataset(cfg.concepts(), cfg.world.resolution, cfg.world.heldout_fraction);
  save_dataset(d, out);
  save_dataset_preview(d, out / "preview.png");
  record(m, out, {out / "dataset.tensors", out / "manifest.json", out / "preview.png"});
  return m;
}

RunManifest train_base_cmd(const PipelineConfig& cfg, const Json& args, const fs::path& out) {
  RunManifest m;
  m.seeds = {{"base", cfg.base.seed}};
  const auto d = load_dataset(dataset_archive(m, args));
  auto r = train_base(d, cfg.arch, cfg.schedule(), cfg.base);
  save_base_unet(r.model, out / "base.ckpt", {{"train", to_json(cfg.base)}});
  write_loss_points_csv(out / "loss.csv", r.trace);
  plot_lines(out / "loss.png", "base training loss", {{"loss", column(r.trace)}});
  std::vector<torch::Tensor> rows;
  for (const auto& s : cfg.concepts())
    rows.push_back(sample(r.model, {s.concept_id, s.name}, cfg.eval.sampler, seed_range(cfg.seed, 8)).images);
  write_png(out / "samples.png", contact_sheet(torch::cat(rows, 0), 8));
  record(m, out, {out / "base.ckpt", out / "base.ckpt.json", out / "loss.csv", out / "loss.png", out / "samples.png"});
  return m;
}

RunManifest train_classifier_cmd(const PipelineConfig& cfg, const Json& args, const fs::path& out) {
  RunManifest m;
  m.seeds = {{"classifier", cfg.classifier.seed}, {"calibration", cfg.calibration_seed}};
  const auto d = load_dataset(dataset_archive(m, args));
  auto r = train_classifier(d, cfg.classifier);
  const auto conf = r.confusion.contiguous();
  std::vector<std::vector<std::int64_t>> rows;
  for (std::int64_t i = 0; i < conf.size(0); ++i) {
    rows.emplace_back();
    for (std::int64_t j = 0; j < conf.size(1); ++j) rows.back().push_back(conf[i][j].item<std::int64_t>());
  }
  save_classifier(r.classifier, out / "classifier.ckpt",
                  {{"heldout_accuracy", r.heldout_accuracy},
                   {"false_positive_floor", r.false_positive_floor},
                   {"confusion", rows},
                   {"train", to_json(cfg.classifier)}});
  write_loss_points_csv(out / "loss.csv", r.trace);
  PerceptualMetric metric(cfg.perceptual);
  metric.calibrate(d.split(true).images, cfg.calibration_seed);
  write_json(out / "perceptual.json", metric.to_json());
  record(m, out, {out / "classifier.ckpt", out / "classifier.ckpt.json", out / "loss.csv", out / "perceptual.json"});
  return m;
}

RunManifest finetune_epr_cmd(const PipelineConfig& cfg, const Json& args, const fs::path& out) {
  RunManifest m;
  const auto base = load_base_unet(input(m, args, "base"));
  const auto name = concept_arg(cfg, args);
  const auto strategy = args.contains("strategy") ? parse_strategy(arg_string(args, "strategy")) : cfg.strategy_for(name);
  m.seeds = {{"erase", cfg.erase.seed}};
  auto epr = init_epr(base, strategy, cfg.condition(name));
  auto r = finetune_epr(base, epr, cfg.erase, out);
  if (r.base_checksum_before != r.base_checksum_after) throw InternalError("base parameters changed during fine-tuning");
  save_epr(epr, out / "epr.ckpt", {{"erase", to_json(cfg.erase)}});
  write_loss_csv(out / "loss.csv", r.trace);
  plot_lines(out / "loss.png", "erase loss " + name, {{"loss", column(r.trace)}});
  record(m, out, {out / "epr.ckpt", out / "epr.ckpt.json", out / "loss.csv", out / "loss.png"});
  return m;
}

RunManifest finetune_direct_cmd(const PipelineConfig& cfg, const Json& args, const fs::path& out) {
  RunManifest m;
  const auto base = load_base_unet(input(m, args, "base"));
  const auto name = concept_arg(cfg, args);
  m.seeds = {{"erase", cfg.erase.seed}};
  auto r = finetune_direct(base, cfg.condition(name), cfg.erase);
  save_base_unet(r.model, out / "direct.ckpt", {{"variant", "direct cross-attention fine-tune"}, {"target", name}});
  write_loss_csv(out / "loss.csv", r.trace);
  record(m, out, {out / "direct.ckpt", out / "direct.ckpt.json", out / "loss.csv"});
  return m;
}

RunManifest run_tlmo_cmd(const PipelineConfig& cfg, const Json& args, const fs::path& out) {
  RunManifest m;
  const auto base = load_base_unet(input(m, args, "base"));
  const auto epr_path = input(m, args, "epr");
  const auto epr = load_epr(epr_path, base);
  m.seeds = {{"tlmo", cfg.tlmo.seed}};
  const auto init = init_modulation(base->schedule().steps, base->skip_count(), cfg.tlmo_groups);
  auto r = run_tlmo(base, epr, init, cfg.tlmo, out);
  if (r.base_checksum_before != r.base_checksum_after || r.epr_checksum_before != r.epr_checksum_after)
    throw InternalError("frozen parameters changed during modulation training");
  save_modulation(r.factors, out / "modulation.json", {{"tlmo", to_json(cfg.tlmo)}, {"epr_sha256", sha256_file(epr_path)}});
  write_tlmo_csv(out / "trace.csv", r.trace);
  render_modulation_heatmap(r.factors, cfg.scheme(), out / "heatmap.png");
  record(m, out, {out / "modulation.json", out / "trace.csv", out / "heatmap.png", out / "heatmap.png.json"});
  return m;
}

RunManifest generate_cmd(const PipelineConfig& cfg, const Json& args, const fs::path& out) {
  RunManifest m;
  auto l = load_stack(m, args);
  const auto name = concept_arg(cfg, args);
  const int n = args.value("n", 8);
  const auto seed = args.value("seed", cfg.seed);
  m.seeds = {{"sample", seed}};
  const auto seeds = seed_range(seed, static_cast<std::size_t>(n));
  const auto images = sample(l.base, cfg.condition(name), cfg.eval.sampler, seeds, l.eprs.empty() ? nullptr : &l.stack).images;
  write_raw_images(out / "images.tensors", images);
  write_png(out / "images.png", contact_sheet(images, 8));
  record(m, out, {out / "images.tensors", out / "images.png"});
  return m;
}

/// "layers=1,2;t=0:500,750:1000"; either part may be omitted (omitted = everything).
AblationMask parse_mask(const std::string& spec, int layers, int steps) {
  AblationMask mask = AblationMask::all(layers, steps);
  if (spec == "none") return AblationMask::none();
  std::stringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ';')) {
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw ConfigError("mask part '" + part + "' is not key=value");
    const auto key = part.substr(0, eq);
    std::stringstream vs(part.substr(eq + 1));
    std::string item;
    if (key == "layers") {
      mask.active_layers.clear();
      while (std::getline(vs, item, ',')) mask.active_layers.push_back(std::stoi(item));
    } else if (key == "t") {
      mask.active_timesteps.clear();
      while (std::getline(vs, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError("timestep range '" + item + "' must be begin:end");
        mask.active_timesteps.emplace_back(std::stoi(item.substr(0, colon)), std::stoi(item.substr(colon + 1)));
      }
    } else {
      throw ConfigError("unknown mask key '" + key + "'");
    }
  }
  mask.validate(layers, steps);
  return mask;
}

RunManifest ablate_cmd(const PipelineConfig& cfg, const Json& args, const fs::path& out) {
  RunManifest m;
  auto l = load_stack(m, args);
  if (l.eprs.size() != 1) throw ConfigError("ablate needs exactly one --epr");
  const auto metric = PerceptualMetric::from_json(read_json(input(m, args, "metric")));
  GroupScheme scheme = cfg.scheme();
  if (const auto s = arg_string(args, "scheme"); !s.empty()) {
    scheme = group_scheme_from_json(read_json(s));
    m.add_input(s);
  }
  GroupEffectConfig gc;
  gc.prompts = {l.eprs[0]->target};
  gc.seeds_per_prompt = cfg.ablation_seeds;
  gc.seed = cfg.eval.base_seed;
  gc.sampler = cfg.eval.sampler;
  gc.cutoff = cfg.cutoff;
  m.seeds = {{"ablation", gc.seed}};
  const auto report = group_effect_report(l.base, l.eprs[0], l.grids[0], scheme, metric, gc);
  report.write_csv(out / "group_effects.csv");
  write_json(out / "group_effects.json", merge_json(report.to_json(), Json{{"scheme", to_json(scheme)}}));
  report.plot(out / "group_effects.png");
  record(m, out, {out / "group_effects.csv", out / "group_effects.json", out / "group_effects.png"});
  const auto masks = arg_list(args, "mask");
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const auto mask = parse_mask(masks[i], l.base->skip_count(), l.base->schedule().steps);
    const auto seeds = seed_range(cfg.eval.base_seed, static_cast<std::size_t>(cfg.ablation_seeds));
    const auto images = ablate_generate(l.base, l.eprs[0], l.grids[0], mask, l.eprs[0]->target, seeds, cfg.eval.sampler);
    const auto png = out / ("mask_" + std::to_string(i) + ".png");
    write_png(png, contact_sheet(images, 8));
    m.add_output(out, png);
  }
  return m;
}

RunManifest eval_cmd(const PipelineConfig& cfg, const Json& args, const fs::path& out) {
  RunManifest m;
  auto l = load_stack(m, args);
  const auto clf = load_classifier(input(m, args, "classifier"));
  const auto metric = PerceptualMetric::from_json(read_json(input(m, args, "metric")));
  auto protocol = cfg.protocol();
  if (args.contains("concept")) {
    const auto target = cfg.condition(arg_string(args, "concept")).id;
    protocol.erased = {target};
    protocol.retained.clear();
    for (const auto& [id, n] : protocol.names)
      if (id != target) protocol.retained.push_back(id);
  }
  m.seeds = {{"eval", protocol.base_seed}};
  EvalReport report;
  if (const auto direct = arg_string(args, "direct"); !direct.empty()) {
    if (!l.eprs.empty()) throw ConfigError("--direct and --epr are exclusive");
    verify_against_manifest(direct);
    m.add_input(direct);
    const auto tuned = load_base_unet(direct);
    report = evaluate_sets(protocol, clf, metric, generate_protocol_images(l.base, nullptr, protocol),
                           generate_protocol_images(tuned, nullptr, protocol));
  } else {
    report = run_eval(l.base, l.eprs.empty() ? nullptr : &l.stack, protocol, clf, metric);
  }
  report.manifest["inputs"] = Json::array();
  for (const auto& r : m.inputs) report.manifest["inputs"].push_back({{"file", fs::path(r.path).filename().string()}, {"sha256", r.sha256}});
  report.write(out / "report.json", out / "report.csv");
  record(m, out, {out / "report.json", out / "report.csv"});
  return m;
}

RunManifest plot_cmd(const PipelineConfig& cfg, const Json& args, const fs::path& out) {
  RunManifest m;
  fs::create_directories(out);
  if (const auto p = arg_string(args, "grid"); !p.empty()) {
    m.add_input(p);
    render_modulation_heatmap(load_modulation(p), cfg.scheme(), out / "heatmap.png");
    record(m, out, {out / "heatmap.png", out / "heatmap.png.json"});
  }
  if (const auto p = arg_string(args, "report"); !p.empty()) {
    m.add_input(p);
    const auto j = read_json(p);
    std::vector<std::string> cats;
    Series lp{"lpips-proxy", {}}, det{"detection", {}};
    for (const auto& c : j.at("concepts")) {
      cats.push_back(c.at("name").get<std::string>());
      lp.values.push_back(c.at("lpips_mean").get<double>());
      det.values.push_back(c.at("adapted_detection").get<double>());
    }
    plot_bars(out / "report.png", "per-concept evaluation", cats, {lp, det});
    record(m, out, {out / "report.png"});
  }
  if (const auto p = arg_string(args, "effects"); !p.empty()) {
    m.add_input(p);
    const auto j = read_json(p);
    std::vector<std::string> cats;
    Series low{"low band", {}}, high{"high band", {}};
    for (const auto& r : j.at("rows")) {
      const auto id = r.at("group_id").get<std::string>();
      if (id.rfind("residual", 0) == 0) continue;
      cats.push_back(id);
      low.values.push_back(r.at("low_delta").get<double>());
      high.values.push_back(r.at("high_delta").get<double>());
    }
    plot_bars(out / "effects.png", "group ablation deltas", cats, {low, high});
    record(m, out, {out / "effects.png"});
  }
  const auto losses = arg_list(args, "loss");
  if (!losses.empty()) {
    std::vector<Series> series;
    for (const auto& p : losses) {
      m.add_input(p);
      std::ifstream is(p);
      std::string line;
      std::getline(is, line);
      const bool tlmo = line.rfind("step,era2", 0) == 0;
      Series s{fs::path(p).parent_path().filename().string(), {}};
      while (std::getline(is, line)) {
        std::stringstream ls(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (cells.size() >= 2) s.values.push_back(std::stod(cells[tlmo ? 3 : 1]));
      }
      series.push_back(std::move(s));
    }
    plot_lines(out / "losses.png", "loss curves", series);
    record(m, out, {out / "losses.png"});
  }
  if (m.outputs.empty()) throw ConfigError("plot needs at least one of --grid, --report, --effects, --loss");
  return m;
}

RunManifest smoke_cmd(const PipelineConfig& cfg, const Json&, const fs::path& out) {
  RunManifest m;
  const Json c = to_json(cfg);
  const auto stage = [&](const std::string& name, const Json& args) {
    const auto dir = out / name;
    const auto sm = execute(name, c, args, dir);
    for (const auto& r : sm.outputs) m.outputs.push_back({(fs::path(name) / r.path).string(), r.sha256});
    return dir;
  };
  const auto data = stage("gen-data", Json::object());
  const auto base = stage("train-base", {{"data", data.string()}}) / "base.ckpt";
  const auto clf_dir = stage("train-classifier", {{"data", data.string()}});
  const auto epr = stage("finetune-epr", {{"base", base.string()}}) / "epr.ckpt";
  const auto grid = stage("run-tlmo", {{"base", base.string()}, {"epr", epr.string()}}) / "modulation.json";
  const auto direct = stage("finetune-direct", {{"base", base.string()}}) / "direct.ckpt";
  stage("generate", {{"base", base.string()}, {"epr", epr.string()}, {"modulation", grid.string()}, {"n", 4}});
  stage("ablate", {{"base", base.string()}, {"epr", epr.string()}, {"metric", (clf_dir / "perceptual.json").string()}});
  const Json eval_common{{"base", base.string()},
                         {"classifier", (clf_dir / "classifier.ckpt").string()},
                         {"metric", (clf_dir / "perceptual.json").string()}};
  const auto eval = stage("eval", merge_json(eval_common, {{"epr", epr.string()}, {"modulation", grid.string()}}));
  stage("eval-direct", merge_json(eval_common, {{"direct", direct.string()}}));
  stage("plot", {{"grid", grid.string()}, {"report", (eval / "report.json").string()}});
  m.seeds = {{"seed", cfg.seed}};
  return m;
}

RunManifest eval_direct_cmd(const PipelineConfig& cfg, const Json& args, const fs::path& out) {
  return eval_cmd(cfg, args, out);
}

}  // namespace

const std::vector<CommandInfo>& commands() {
  static const std::vector<CommandInfo> table{
      {"gen-data", "generate the synthetic concept dataset", gen_data},
      {"train-base", "train the frozen base denoiser (--data)", train_base_cmd},
      {"train-classifier", "train the evaluation classifier and calibrate the perceptual proxy (--data)",
       train_classifier_cmd},
      {"finetune-epr", "stage 1: train an eraser adapter (--base [--concept --strategy])", finetune_epr_cmd},
      {"finetune-direct", "baseline: fine-tune the base cross-attention directly (--base [--concept])",
       finetune_direct_cmd},
      {"run-tlmo", "stage 2: learn timestep-layer modulation (--base --epr)", run_tlmo_cmd},
      {"generate", "sample images (--base [--epr --modulation] --concept --n)", generate_cmd},
      {"ablate", "group ablation report (--base --epr --metric [--modulation --scheme --mask])", ablate_cmd},
      {"eval", "evaluation report (--base --classifier --metric [--epr --modulation | --direct])", eval_cmd},
      {"eval-direct", "evaluation report for a directly fine-tuned model (--direct)", eval_direct_cmd},
      {"plot", "figures from reports, grids and loss traces", plot_cmd},
      {"smoke", "tiny end-to-end pipeline", smoke_cmd},
  };
  return table;
}

const CommandInfo& find_command(const std::string& name) {
  for (const auto& c : commands())
    if (c.name == name) return c;
  throw ConfigError("unknown command '" + name + "'");
}

RunManifest execute(const std::string& name, const Json& config_json, const Json& args, const fs::path& out) {
  const auto& cmd = find_command(name);
  const auto cfg = pipeline_from_json(config_json);
  fs::create_directories(out);
  auto m = cmd.run(cfg, args, out);
  m.command = name;
  m.config = to_json(cfg);
  m.arguments = args;
  m.write(out / kManifestName);
  return m;
}

std::vector<std::string> replay(const fs::path& manifest, const fs::path& out) {
  const auto recorded = RunManifest::read(manifest);
  if (recorded.tool_version != kToolVersion)
    throw PreconditionError(manifest.string() + " was written by version " + recorded.tool_version + ", this is " +
                            kToolVersion);
  const auto rerun = execute(recorded.command, recorded.config, recorded.arguments, out);
  return compare_outputs(recorded, rerun);
}

fs::path default_output_dir(const std::string& command) {
  const char* home = std::getenv("DUMO_HOME");
  return (home && *home ? fs::path(home) : fs::path(".")) / "runs" / command;
}

}  // namespace dumo::cli
