#include "dumo/config.hpp"

#include <toml.hpp>

#include <fstream>
#include <set>
#include <sstream>

#include "dumo/errors.hpp"

namespace dumo {

namespace {

Json node_to_json(const toml::node& n) {
  if (const auto* t = n.as_table()) {
    Json out = Json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = node_to_json(v);
    return out;
  }
  if (const auto* a = n.as_array()) {
    Json out = Json::array();
    for (const auto& v : *a) out.push_back(node_to_json(v));
    return out;
  }
  if (const auto* v = n.as_string()) return Json(v->get());
  if (const auto* v = n.as_integer()) return Json(v->get());
  if (const auto* v = n.as_floating_point()) return Json(v->get());
  if (const auto* v = n.as_boolean()) return Json(v->get());
  std::ostringstream os;
  n.visit([&os](const auto& v) { os << v; });
  return Json(os.str());
}

/// Reads keys from one JSON object and rejects any it did not consume.
class Section {
 public:
  Section(const Json& j, std::string name) : name_(std::move(name)) {
    if (j.is_null()) return;
    if (!j.is_object()) throw ConfigError("[" + name_ + "] must be a table");
    j_ = j;
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const Json::exception& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const Json& at(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown key '" + name_ + "." + k + "'");
  }

 private:
  std::string name_;
  Json j_ = Json::object();
  std::set<std::string> seen_;
};

Json section(const Json& j, const char* key) { return j.contains(key) ? j.at(key) : Json(); }

std::optional<std::pair<int, int>> read_range(Section& s, const char* key) {
  if (!s.has(key)) return std::nullopt;
  const auto& v = s.at(key);
  if (v.is_string() && v.get<std::string>() == "full") return std::nullopt;
  if (!v.is_array() || v.size() != 2) throw ConfigError(std::string(key) + " must be [first, last] or \"full\"");
  return std::pair{v[0].get<int>(), v[1].get<int>()};
}

Json range_json(const std::optional<std::pair<int, int>>& r) {
  return r ? Json::array({r->first, r->second}) : Json("full");
}

}  // namespace

Json parse_toml(const std::string& text, const std::string& source) {
  try {
    return node_to_json(toml::parse(text, source));
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << source << ":" << e.source().begin.line << ":" << e.source().begin.column << ": " << e.description();
    throw ConfigError(os.str());
  }
}

Json load_toml(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_toml(ss.str(), path.string());
}

Json merge_json(Json base, const Json& overlay) {
  if (!base.is_object() || !overlay.is_object()) return overlay;
  for (const auto& [k, v] : overlay.items()) base[k] = base.contains(k) ? merge_json(base[k], v) : v;
  return base;
}

void apply_override(Json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const auto key = assignment.substr(0, eq);
  const auto value = assignment.substr(eq + 1);
  Json parsed;
  try {
    parsed = node_to_json(*toml::parse("v = " + value)["v"].node());
  } catch (const toml::parse_error&) {
    parsed = value;
  }
  Json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (dot == std::string::npos) {
      (*node)[part] = parsed;
      return;
    }
    node = &(*node)[part];
    if (!node->is_object()) *node = Json::object();
    start = dot + 1;
  }
}

// --- pipeline config ----------------------------------------------------------

NoiseSchedule PipelineConfig::schedule() const {
  return make_noise_schedule(schedule_steps, schedule_kind, beta_start, beta_end);
}

GroupScheme PipelineConfig::scheme() const {
  const int layers = arch.skip_count();
  const auto s = layer_group_sizes.empty() ? default_group_scheme(layers, schedule_steps)
                                           : make_group_scheme(layer_group_sizes, schedule_steps, timestep_groups);
  s.validate(layers, schedule_steps);
  return s;
}

std::vector<SyntheticConceptSpec> PipelineConfig::concepts() const { return default_world(world); }

SyntheticConceptSpec PipelineConfig::concept_named(const std::string& name) const {
  for (const auto& s : concepts())
    if (s.name == name) return s;
  throw ConfigError("unknown concept '" + name + "'");
}

Condition PipelineConfig::condition(const std::string& name) const {
  if (name.empty() || name == "none") return Condition::empty();
  const auto s = concept_named(name);
  return Condition{s.concept_id, s.name};
}

FinetuneStrategy PipelineConfig::strategy_for(const std::string& name) const {
  return strategy ? *strategy : concept_named(name).default_strategy;
}

EvalProtocol PipelineConfig::protocol() const {
  EvalProtocol p = eval;
  p.erased.clear();
  p.retained.clear();
  p.names.clear();
  const auto target_id = condition(target).id;
  for (const auto& s : concepts()) {
    p.names[s.concept_id] = s.name;
    (s.concept_id == target_id ? p.erased : p.retained).push_back(s.concept_id);
  }
  p.validate();
  return p;
}

PipelineConfig pipeline_from_json(const Json& j) {
  PipelineConfig c;
  Section top(j, "config");
  top.read("seed", c.seed);
  c.world.seed = mix_seed(c.seed, 1);
  c.base.seed = mix_seed(c.seed, 2);
  c.classifier.seed = mix_seed(c.seed, 3);
  c.erase.seed = mix_seed(c.seed, 4);
  c.tlmo.seed = mix_seed(c.seed, 5);

  Section w(section(j, "world"), "world");
  (void)top.has("world");
  w.read("resolution", c.world.resolution);
  w.read("per_concept", c.world.per_concept);
  w.read("heldout_fraction", c.world.heldout_fraction);
  w.read("seed", c.world.seed);
  w.finish();

  Section a(section(j, "arch"), "arch");
  (void)top.has("arch");
  c.arch.resolution = c.world.resolution;
  a.read("image_channels", c.arch.image_channels);
  a.read("channels", c.arch.channels);
  a.read("res_blocks", c.arch.res_blocks);
  a.read("attention", c.arch.attention);
  a.read("context_tokens", c.arch.context_tokens);
  a.read("context_dim", c.arch.context_dim);
  a.read("time_dim", c.arch.time_dim);
  a.read("norm_groups", c.arch.norm_groups);
  a.finish();
  c.arch.num_concepts = static_cast<int>(default_world(c.world).size());

  Section s(section(j, "schedule"), "schedule");
  (void)top.has("schedule");
  s.read("steps", c.schedule_steps);
  std::string kind = to_string(c.schedule_kind);
  s.read("kind", kind);
  c.schedule_kind = parse_schedule_kind(kind);
  s.read("beta_start", c.beta_start);
  s.read("beta_end", c.beta_end);
  s.finish();

  Section b(section(j, "base"), "base");
  (void)top.has("base");
  b.read("steps", c.base.steps);
  b.read("batch_size", c.base.batch_size);
  b.read("learning_rate", c.base.learning_rate);
  b.read("class_dropout", c.base.class_dropout);
  b.read("ema_decay", c.base.ema_decay);
  b.read("warmup_steps", c.base.warmup_steps);
  b.read("seed", c.base.seed);
  b.finish();

  Section k(section(j, "classifier"), "classifier");
  (void)top.has("classifier");
  k.read("steps", c.classifier.steps);
  k.read("batch_size", c.classifier.batch_size);
  k.read("learning_rate", c.classifier.learning_rate);
  k.read("seed", c.classifier.seed);
  k.read("noise_augment", c.classifier.noise_augment);
  k.read("colour_jitter", c.classifier.colour_jitter);
  k.read("contrast_jitter", c.classifier.contrast_jitter);
  k.finish();

  Section e(section(j, "erase"), "erase");
  (void)top.has("erase");
  e.read("target", c.target);
  std::string strategy = c.strategy ? to_string(*c.strategy) : "auto";
  e.read("strategy", strategy);
  c.strategy = strategy == "auto" ? std::nullopt : std::optional(parse_strategy(strategy));
  e.read("eta", c.erase.eta);
  e.read("steps", c.erase.steps);
  e.read("learning_rate", c.erase.learning_rate);
  e.read("batch_size", c.erase.batch_size);
  c.erase.t_range = read_range(e, "t_range");
  e.read("sampler_steps", c.erase.sampler.steps);
  e.read("seed", c.erase.seed);
  e.finish();

  Section t(section(j, "tlmo"), "tlmo");
  (void)top.has("tlmo");
  t.read("lambda", c.tlmo.lambda);
  t.read("eta", c.tlmo.eta);
  t.read("steps", c.tlmo.steps);
  t.read("learning_rate", c.tlmo.learning_rate);
  t.read("batch_size", c.tlmo.batch_size);
  t.read("groups", c.tlmo_groups);
  std::string mode = to_string(c.tlmo.mode);
  t.read("mode", mode);
  c.tlmo.mode = parse_modulation_mode(mode);
  c.tlmo.t_range = read_range(t, "t_range");
  t.read("sampler_steps", c.tlmo.sampler.steps);
  t.read("seed", c.tlmo.seed);
  t.finish();

  Section v(section(j, "eval"), "eval");
  (void)top.has("eval");
  v.read("templates_erased", c.eval.templates_erased);
  v.read("templates_retained", c.eval.templates_retained);
  v.read("seeds_per_template", c.eval.seeds_per_template);
  v.read("base_seed", c.eval.base_seed);
  v.read("sampler_steps", c.eval.sampler.steps);
  v.read("admissibility", c.eval.admissibility);
  v.read("batch", c.eval.batch);
  v.finish();

  Section p(section(j, "perceptual"), "perceptual");
  (void)top.has("perceptual");
  p.read("seed", c.perceptual.seed);
  p.read("channels", c.perceptual.channels);
  p.read("calibration_seed", c.calibration_seed);
  p.finish();

  Section an(section(j, "analysis"), "analysis");
  (void)top.has("analysis");
  an.read("layer_groups", c.layer_group_sizes);
  an.read("timestep_groups", c.timestep_groups);
  an.read("seeds_per_prompt", c.ablation_seeds);
  an.read("cutoff", c.cutoff);
  an.finish();
  top.finish();

  c.arch.validate();
  c.base.validate();
  c.classifier.validate();
  c.erase.validate();
  c.tlmo.validate();
  validate(c.schedule());
  if (c.tlmo_groups < 1 || c.tlmo_groups > c.schedule_steps) throw ConfigError("tlmo.groups out of range");
  (void)c.condition(c.target);
  (void)c.scheme();
  return c;
}

Json to_json(const PipelineConfig& c) {
  return Json{
      {"seed", c.seed},
      {"world",
       {{"resolution", c.world.resolution},
        {"per_concept", c.world.per_concept},
        {"heldout_fraction", c.world.heldout_fraction},
        {"seed", c.world.seed}}},
      {"arch",
       {{"image_channels", c.arch.image_channels},
        {"channels", c.arch.channels},
        {"res_blocks", c.arch.res_blocks},
        {"attention", c.arch.attention},
        {"context_tokens", c.arch.context_tokens},
        {"context_dim", c.arch.context_dim},
        {"time_dim", c.arch.time_dim},
        {"norm_groups", c.arch.norm_groups}}},
      {"schedule",
       {{"steps", c.schedule_steps}, {"kind", to_string(c.schedule_kind)}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}}},
      {"base",
       {{"steps", c.base.steps},
        {"batch_size", c.base.batch_size},
        {"learning_rate", c.base.learning_rate},
        {"class_dropout", c.base.class_dropout},
        {"ema_decay", c.base.ema_decay},
        {"warmup_steps", c.base.warmup_steps},
        {"seed", c.base.seed}}},
      {"classifier",
       {{"steps", c.classifier.steps},
        {"batch_size", c.classifier.batch_size},
        {"learning_rate", c.classifier.learning_rate},
        {"seed", c.classifier.seed},
        {"noise_augment", c.classifier.noise_augment},
        {"colour_jitter", c.classifier.colour_jitter},
        {"contrast_jitter", c.classifier.contrast_jitter}}},
      {"erase",
       {{"target", c.target},
        {"strategy", c.strategy ? to_string(*c.strategy) : "auto"},
        {"eta", c.erase.eta},
        {"steps", c.erase.steps},
        {"learning_rate", c.erase.learning_rate},
        {"batch_size", c.erase.batch_size},
        {"t_range", range_json(c.erase.t_range)},
        {"sampler_steps", c.erase.sampler.steps},
        {"seed", c.erase.seed}}},
      {"tlmo",
       {{"lambda", c.tlmo.lambda},
        {"eta", c.tlmo.eta},
        {"steps", c.tlmo.steps},
        {"learning_rate", c.tlmo.learning_rate},
        {"batch_size", c.tlmo.batch_size},
        {"groups", c.tlmo_groups},
        {"mode", to_string(c.tlmo.mode)},
        {"t_range", range_json(c.tlmo.t_range)},
        {"sampler_steps", c.tlmo.sampler.steps},
        {"seed", c.tlmo.seed}}},
      {"eval",
       {{"templates_erased", c.eval.templates_erased},
        {"templates_retained", c.eval.templates_retained},
        {"seeds_per_template", c.eval.seeds_per_template},
        {"base_seed", c.eval.base_seed},
        {"sampler_steps", c.eval.sampler.steps},
        {"admissibility", c.eval.admissibility},
        {"batch", c.eval.batch}}},
      {"perceptual", {{"seed", c.perceptual.seed}, {"channels", c.perceptual.channels}, {"calibration_seed", c.calibration_seed}}},
      {"analysis",
       {{"layer_groups", c.layer_group_sizes},
        {"timestep_groups", c.timestep_groups},
        {"seeds_per_prompt", c.ablation_seeds},
        {"cutoff", c.cutoff}}}};
}

Json reference_preset() {
  return Json{{"seed", 7},
         {"world", {{"resolution", 16}, {"per_concept", 1000}}},
         {"arch", {{"channels", {16, 32, 32}}}},
         {"base", {{"steps", 6000}, {"batch_size", 64}}},
         {"erase", {{"target", "stripes"}, {"steps", 400}, {"learning_rate", 1e-3}}},
         {"tlmo", {{"steps", 200}}}};
}

Json smoke_preset() {
  return Json{{"seed", 3},
         {"world", {{"resolution", 8}, {"per_concept", 40}, {"heldout_fraction", 0.25}}},
         {"arch", {{"channels", {8, 16, 16}}}},
         {"schedule", {{"steps", 100}}},
         {"base", {{"steps", 20}, {"batch_size", 16}, {"warmup_steps", 5}}},
         {"classifier", {{"steps", 20}, {"batch_size", 16}}},
         {"erase", {{"steps", 3}, {"batch_size", 2}, {"sampler_steps", 4}}},
         {"tlmo", {{"steps", 3}, {"batch_size", 2}, {"sampler_steps", 4}}},
         {"eval",
          {{"templates_erased", 2}, {"templates_retained", 1}, {"seeds_per_template", 2}, {"sampler_steps", 4}, {"admissibility", 0.0}}},
         {"analysis", {{"seeds_per_prompt", 2}}}};
}

PipelineConfig reference_config() { return pipeline_from_json(reference_preset()); }

PipelineConfig smoke_config() { return pipeline_from_json(smoke_preset()); }

}  // namespace dumo
