#include "dumo/evaluation.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "dumo/errors.hpp"

namespace dumo {

namespace {

constexpr double kUnitEps = 1e-10;

torch::Tensor as_batch(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

}  // namespace

// --- perceptual proxy -------------------------------------------------------

PerceptualMetric::PerceptualMetric(PerceptualConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.channels.empty()) throw ConfigError("perceptual metric needs at least one scale");
  if (!(cfg_.calibration > 0.0)) throw ConfigError("perceptual calibration must be positive");
  auto gen = at::make_generator<at::CPUGeneratorImpl>(cfg_.seed);
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  int in = 3;
  for (int out : cfg_.channels) {
    const double std = std::sqrt(2.0 / (9.0 * in));
    weights_.push_back(torch::randn({out, in, 3, 3}, gen, opts) * std);
    biases_.push_back(torch::randn({out}, gen, opts) * 0.1);
    in = out;
  }
}

std::vector<torch::Tensor> PerceptualMetric::features(const torch::Tensor& x) const {
  std::vector<torch::Tensor> out;
  auto h = as_batch(x).to(torch::kFloat64);
  for (std::size_t s = 0; s < weights_.size(); ++s) {
    if (s > 0) h = torch::avg_pool2d(h, 2);
    h = torch::relu(torch::conv2d(h, weights_[s], biases_[s], 1, 1));
    out.push_back(h / (h.pow(2).sum(1, true).sqrt() + kUnitEps));
  }
  return out;
}

torch::Tensor PerceptualMetric::raw_distances(const torch::Tensor& a, const torch::Tensor& b) const {
  if (!a.sizes().equals(b.sizes())) throw InputError("perceptual distance: image shapes differ");
  torch::NoGradGuard no_grad;
  const auto fa = features(a);
  const auto fb = features(b);
  auto total = torch::zeros({as_batch(a).size(0)}, torch::TensorOptions().dtype(torch::kFloat64));
  for (std::size_t s = 0; s < fa.size(); ++s) total = total + (fa[s] - fb[s]).pow(2).sum(1).mean({1, 2});
  return total / static_cast<double>(fa.size());
}

torch::Tensor PerceptualMetric::distances(const torch::Tensor& a, const torch::Tensor& b) const {
  return (raw_distances(a, b) / cfg_.calibration).clamp(0.0, 1.0);
}

double PerceptualMetric::distance(const torch::Tensor& a, const torch::Tensor& b) const {
  return distances(a, b)[0].item<double>();
}

void PerceptualMetric::calibrate(const torch::Tensor& images, std::uint64_t noise_seed) {
  if (images.size(0) == 0) throw InputError("perceptual calibration needs images");
  auto gen = at::make_generator<at::CPUGeneratorImpl>(noise_seed);
  const auto noise = torch::rand(images.sizes(), gen, torch::TensorOptions().dtype(torch::kFloat64)) * 2.0 - 1.0;
  const double scale = raw_distances(images, noise).mean().item<double>();
  if (!(scale > 0.0)) throw NumericalError("perceptual calibration produced a non-positive scale", "");
  cfg_.calibration = scale;
}

Json PerceptualMetric::to_json() const {
  return Json{{"label", "LPIPS-proxy"},
              {"seed", cfg_.seed},
              {"channels", cfg_.channels},
              {"calibration", cfg_.calibration},
              {"normalisation", "unit channel norm, squared difference, spatial mean, channel sum, scale mean"}};
}

PerceptualMetric PerceptualMetric::from_json(const Json& j) {
  PerceptualConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.channels = j.at("channels").get<std::vector<int>>();
  c.calibration = j.at("calibration").get<double>();
  return PerceptualMetric(c);
}

// --- classifier -------------------------------------------------------------

ConceptClassifierImpl::ConceptClassifierImpl(int k, int res) : num_concepts(k), resolution(res) {
  if (k < 1) throw ConfigError("classifier needs at least one concept");
  c1 = register_module("c1", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, 32, 3).padding(1)));
  c2 = register_module("c2", torch::nn::Conv2d(torch::nn::Conv2dOptions(32, 64, 3).padding(1).stride(2)));
  c3 = register_module("c3", torch::nn::Conv2d(torch::nn::Conv2dOptions(64, 64, 3).padding(1).stride(2)));
  head = register_module("head", torch::nn::Linear(64, k));
}

torch::Tensor ConceptClassifierImpl::features(const torch::Tensor& x) {
  auto h = torch::relu(c1(as_batch(x)));
  h = torch::relu(c2(h));
  h = torch::relu(c3(h));
  return h.mean({2, 3});
}

torch::Tensor ConceptClassifierImpl::forward(const torch::Tensor& x) { return head(features(x)); }

torch::Tensor ConceptClassifierImpl::predict(const torch::Tensor& x) {
  torch::NoGradGuard no_grad;
  return forward(x).argmax(1) + 1;
}

torch::Tensor ConceptClassifierImpl::prototype(int concept_id) const {
  if (concept_id < 1 || concept_id > num_concepts) throw InputError("unknown concept id " + std::to_string(concept_id));
  return head->weight[concept_id - 1].detach();
}

ConceptClassifier make_classifier(int num_concepts, int resolution, std::uint64_t seed) {
  torch::manual_seed(seed);
  return ConceptClassifier(num_concepts, resolution);
}

void save_classifier(const ConceptClassifier& clf, const std::filesystem::path& path, const Json& extra) {
  Json meta{{"kind", "concept_classifier"},
            {"version", 1},
            {"num_concepts", clf->num_concepts},
            {"resolution", clf->resolution},
            {"parameter_checksum", parameter_checksum(*clf)}};
  for (const auto& [k, v] : extra.items()) meta[k] = v;
  save_checkpoint(path, named_state(*clf), meta);
}

ConceptClassifier load_classifier(const std::filesystem::path& path) {
  const Json meta = load_sidecar(path);
  if (meta.value("kind", "") != "concept_classifier") throw PreconditionError(path.string() + " is not a classifier");
  ConceptClassifier clf(meta.at("num_concepts").get<int>(), meta.at("resolution").get<int>());
  load_named_state(*clf, load_tensors(path), path.string());
  if (parameter_checksum(*clf) != meta.at("parameter_checksum").get<std::string>())
    throw PreconditionError(path.string() + ": classifier checksum mismatch");
  clf->eval();
  return clf;
}

// --- metrics ----------------------------------------------------------------

std::vector<double> lpips_sets(const PerceptualMetric& metric, const torch::Tensor& before, const torch::Tensor& after) {
  if (before.size(0) != after.size(0))
    throw InputError("lpips_sets: " + std::to_string(before.size(0)) + " images before vs " +
                     std::to_string(after.size(0)) + " after");
  if (before.size(0) == 0) return {};
  const auto d = metric.distances(before, after).contiguous();
  return std::vector<double>(d.data_ptr<double>(), d.data_ptr<double>() + d.numel());
}

double mean(const std::vector<double>& v) {
  if (v.empty()) throw InputError("mean of an empty set");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double lpips_da(const std::vector<std::vector<double>>& erased, const std::vector<std::vector<double>>& retained) {
  if (erased.empty() || retained.empty()) throw InputError("lpips_da needs erased and retained scores");
  std::vector<double> e, u;
  for (const auto& v : erased) e.push_back(mean(v));
  for (const auto& v : retained) u.push_back(mean(v));
  return mean(e) - mean(u);
}

double erasure_rate(const ConceptClassifier& clf, const torch::Tensor& images, int target_id) {
  if (!images.defined() || images.size(0) == 0) throw InputError("erasure_rate: empty image set");
  const auto pred = clf.ptr()->predict(images.to(torch::kFloat32));
  return pred.eq(target_id).to(torch::kFloat64).mean().item<double>();
}

double cosine_similarity(const torch::Tensor& a, const torch::Tensor& b) {
  const auto x = a.to(torch::kFloat64).flatten();
  const auto y = b.to(torch::kFloat64).flatten();
  if (x.numel() != y.numel()) throw InputError("cosine_similarity: length mismatch");
  const double denom = x.norm().item<double>() * y.norm().item<double>();
  if (denom == 0.0) return 0.0;
  return x.dot(y).item<double>() / denom;
}

double alignment_score(const torch::Tensor& embeddings, const torch::Tensor& prototype) {
  const auto e = as_batch(embeddings.dim() == 1 ? embeddings.unsqueeze(0) : embeddings);
  if (e.size(0) == 0) throw InputError("alignment_score: no embeddings");
  double sum = 0.0;
  for (std::int64_t i = 0; i < e.size(0); ++i) sum += dumo::cosine_similarity(e[i], prototype);
  return sum / static_cast<double>(e.size(0));
}

double alignment_score(const ConceptClassifier& clf, const torch::Tensor& images, int concept_id) {
  torch::NoGradGuard no_grad;
  return alignment_score(clf.ptr()->features(images.to(torch::kFloat32)), clf->prototype(concept_id));
}

// --- protocol ---------------------------------------------------------------

int EvalProtocol::templates_for(int concept_id) const {
  return std::find(erased.begin(), erased.end(), concept_id) != erased.end() ? templates_erased : templates_retained;
}

std::vector<std::uint64_t> EvalProtocol::seeds_for(int concept_id) const {
  const auto root = mix_seed(base_seed, static_cast<std::uint64_t>(concept_id));
  const int n = templates_for(concept_id) * seeds_per_template;
  std::vector<std::uint64_t> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(mix_seed(root, static_cast<std::uint64_t>(i)));
  return out;
}

std::vector<int> EvalProtocol::concepts() const {
  std::vector<int> out = erased;
  out.insert(out.end(), retained.begin(), retained.end());
  return out;
}

void EvalProtocol::validate() const {
  if (erased.empty() || retained.empty()) throw ConfigError("protocol needs erased and retained concepts");
  std::set<int> seen;
  for (int c : concepts()) {
    if (c < 1) throw ConfigError("protocol concept ids start at 1");
    if (!seen.insert(c).second) throw ConfigError("concept " + std::to_string(c) + " listed twice in protocol");
  }
  if (templates_erased < 1 || templates_retained < 1 || seeds_per_template < 1 || batch < 1)
    throw ConfigError("protocol counts must be positive");
  if (admissibility < 0.0 || admissibility > 1.0) throw ConfigError("admissibility gate must be in [0, 1]");
}

Json to_json(const EvalProtocol& p) {
  Json names = Json::object();
  for (const auto& [id, n] : p.names) names[std::to_string(id)] = n;
  return Json{{"erased", p.erased},
              {"retained", p.retained},
              {"names", names},
              {"templates_erased", p.templates_erased},
              {"templates_retained", p.templates_retained},
              {"seeds_per_template", p.seeds_per_template},
              {"base_seed", p.base_seed},
              {"sampler_steps", p.sampler.steps},
              {"clip_x0", p.sampler.clip_x0},
              {"admissibility", p.admissibility},
              {"batch", p.batch},
              {"pairing", "identical (concept, template, seed)"}};
}

EvalProtocol protocol_from_json(const Json& j) {
  EvalProtocol p;
  p.erased = j.at("erased").get<std::vector<int>>();
  p.retained = j.at("retained").get<std::vector<int>>();
  if (j.contains("names"))
    for (const auto& [k, v] : j.at("names").items()) p.names[std::stoi(k)] = v.get<std::string>();
  p.templates_erased = j.value("templates_erased", p.templates_erased);
  p.templates_retained = j.value("templates_retained", p.templates_retained);
  p.seeds_per_template = j.value("seeds_per_template", p.seeds_per_template);
  p.base_seed = j.value("base_seed", p.base_seed);
  p.sampler.steps = j.value("sampler_steps", p.sampler.steps);
  p.sampler.clip_x0 = j.value("clip_x0", p.sampler.clip_x0);
  p.admissibility = j.value("admissibility", p.admissibility);
  p.batch = j.value("batch", p.batch);
  p.validate();
  return p;
}

GenerationSet generate_protocol_images(const BaseUNet& model, const SkipAdapter* adapters, const EvalProtocol& p) {
  p.validate();
  GenerationSet out;
  for (int c : p.concepts()) {
    const auto seeds = p.seeds_for(c);
    const auto it = p.names.find(c);
    const Condition cond{c, it == p.names.end() ? std::string() : it->second};
    std::vector<torch::Tensor> parts;
    for (std::size_t start = 0; start < seeds.size(); start += static_cast<std::size_t>(p.batch)) {
      const auto n = std::min(seeds.size() - start, static_cast<std::size_t>(p.batch));
      parts.push_back(sample(model, cond, p.sampler, std::span(seeds).subspan(start, n), adapters).images);
    }
    out[c] = torch::cat(parts, 0);
  }
  return out;
}

// --- report -----------------------------------------------------------------

Json EvalReport::to_json() const {
  Json cs = Json::array();
  for (const auto& c : concepts)
    cs.push_back({{"id", c.id},
                  {"name", c.name},
                  {"role", c.role},
                  {"n", c.n},
                  {"base_detection", c.base_detection},
                  {"adapted_detection", c.adapted_detection},
                  {"lpips_mean", c.lpips_mean},
                  {"alignment", c.alignment}});
  return Json{{"kind", "eval_report"},
              {"version", 1},
              {"metric", metric_label},
              {"concepts", cs},
              {"lpips_e", lpips_e},
              {"lpips_u", lpips_u},
              {"lpips_da", lpips_da},
              {"erasure_rate", erasure_rate},
              {"fid", "not computed"},
              {"manifest", manifest}};
}

void EvalReport::write(const std::filesystem::path& json_path, const std::filesystem::path& csv_path) const {
  for (const auto& p : {json_path, csv_path})
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream js(json_path);
  if (!js) throw PreconditionError("cannot write " + json_path.string());
  js << to_json().dump(2) << '\n';
  std::ofstream cs(csv_path);
  if (!cs) throw PreconditionError("cannot write " + csv_path.string());
  cs.precision(17);
  cs << "concept_id,role,index,lpips_proxy\n";
  for (const auto& c : concepts)
    for (std::size_t i = 0; i < c.lpips.size(); ++i) cs << c.id << ',' << c.role << ',' << i << ',' << c.lpips[i] << '\n';
}

void check_admissible(const EvalProtocol& p, const ConceptClassifier& clf, const GenerationSet& base) {
  for (int c : p.concepts()) {
    const double rate = erasure_rate(clf, base.at(c), c);
    if (rate < p.admissibility)
      throw PreconditionError("admissibility gate failed: base detection for concept " + std::to_string(c) + " is " +
                              std::to_string(rate) + " < " + std::to_string(p.admissibility));
  }
}

EvalReport evaluate_sets(const EvalProtocol& p, const ConceptClassifier& clf, const PerceptualMetric& metric,
                         const GenerationSet& base, const GenerationSet& adapted) {
  p.validate();
  check_admissible(p, clf, base);
  EvalReport r;
  std::vector<std::vector<double>> e, u;
  for (int c : p.concepts()) {
    ConceptReport cr;
    cr.id = c;
    const auto it = p.names.find(c);
    cr.name = it == p.names.end() ? std::string() : it->second;
    const bool is_erased = std::find(p.erased.begin(), p.erased.end(), c) != p.erased.end();
    cr.role = is_erased ? "erased" : "retained";
    const auto& b = base.at(c);
    const auto& a = adapted.at(c);
    cr.n = static_cast<int>(b.size(0));
    cr.lpips = lpips_sets(metric, b, a);
    cr.lpips_mean = mean(cr.lpips);
    cr.base_detection = erasure_rate(clf, b, c);
    cr.adapted_detection = erasure_rate(clf, a, c);
    cr.alignment = alignment_score(clf, a, c);
    (is_erased ? e : u).push_back(cr.lpips);
    (is_erased ? r.lpips_e : r.lpips_u).push_back(cr.lpips_mean);
    if (is_erased) r.erasure_rate += cr.adapted_detection / static_cast<double>(p.erased.size());
    r.concepts.push_back(std::move(cr));
  }
  r.lpips_da = lpips_da(e, u);
  r.manifest = Json{{"protocol", to_json(p)}, {"metric", metric.to_json()}};
  return r;
}

EvalReport run_eval(const BaseUNet& model, const SkipAdapter* adapters, const EvalProtocol& p,
                    const ConceptClassifier& clf, const PerceptualMetric& metric) {
  const auto base = generate_protocol_images(model, nullptr, p);
  const auto adapted = adapters ? generate_protocol_images(model, adapters, p) : base;
  return evaluate_sets(p, clf, metric, base, adapted);
}

}  // namespace dumo
