#include "dumo/data.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "dumo/erase.hpp"
#include "dumo/errors.hpp"
#include "dumo/image_io.hpp"

namespace dumo {

ConceptFamily parse_family(std::string_view name) {
  if (name == "stripes") return ConceptFamily::stripes;
  if (name == "checker") return ConceptFamily::checker;
  if (name == "disk") return ConceptFamily::disk;
  if (name == "square") return ConceptFamily::square;
  throw ConfigError("unknown concept family '" + std::string(name) + "'");
}

std::string to_string(ConceptFamily f) {
  switch (f) {
    case ConceptFamily::stripes: return "stripes";
    case ConceptFamily::checker: return "checker";
    case ConceptFamily::disk: return "disk";
    case ConceptFamily::square: return "square";
  }
  return "?";
}

Json to_json(const SyntheticConceptSpec& s) {
  return Json{{"concept_id", s.concept_id},
              {"name", s.name},
              {"family", to_string(s.family)},
              {"texture_period", s.texture_period},
              {"palette", {{"fg", {s.palette.fg_lo, s.palette.fg_hi}}, {"bg", {s.palette.bg_lo, s.palette.bg_hi}}}},
              {"count", s.count},
              {"seed", s.seed},
              {"default_strategy", to_string(s.default_strategy)}};
}

SyntheticConceptSpec concept_spec_from_json(const Json& j) {
  SyntheticConceptSpec s;
  s.concept_id = j.at("concept_id").get<int>();
  s.name = j.at("name").get<std::string>();
  s.family = parse_family(j.at("family").get<std::string>());
  s.texture_period = j.at("texture_period").get<int>();
  const auto& p = j.at("palette");
  s.palette = {p.at("fg")[0].get<double>(), p.at("fg")[1].get<double>(), p.at("bg")[0].get<double>(),
               p.at("bg")[1].get<double>()};
  s.count = j.at("count").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.default_strategy = parse_strategy(j.at("default_strategy").get<std::string>());
  return s;
}

std::vector<SyntheticConceptSpec> default_world(const WorldConfig& cfg) {
  const auto make = [&](int id, const char* name, ConceptFamily f, int period, FinetuneStrategy strategy) {
    SyntheticConceptSpec s;
    s.concept_id = id;
    s.name = name;
    s.family = f;
    s.texture_period = period;
    s.count = cfg.per_concept;
    s.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(id));
    s.default_strategy = strategy;
    return s;
  };
  return {make(1, "stripes", ConceptFamily::stripes, 4, FinetuneStrategy::cross_attention_only),
          make(2, "checker", ConceptFamily::checker, 4, FinetuneStrategy::cross_attention_only),
          make(3, "disk", ConceptFamily::disk, 0, FinetuneStrategy::full),
          make(4, "square", ConceptFamily::square, 0, FinetuneStrategy::full)};
}

torch::Tensor render_concept_sample(const SyntheticConceptSpec& spec, int index, int resolution) {
  if (resolution < 4) throw ConfigError("resolution must be at least 4");
  const bool texture = spec.family == ConceptFamily::stripes || spec.family == ConceptFamily::checker;
  if (texture && spec.texture_period < 2) throw ConfigError(spec.name + ": texture period must be >= 2");
  std::mt19937_64 rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const auto in = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  double fg[3], bg[3];
  for (double& c : fg) c = in(spec.palette.fg_lo, spec.palette.fg_hi);
  for (double& c : bg) c = in(spec.palette.bg_lo, spec.palette.bg_hi);

  const int r = resolution;
  std::vector<double> alpha(static_cast<std::size_t>(r) * r, 0.0);
  switch (spec.family) {
    case ConceptFamily::stripes: {
      const bool vertical = u01(rng) < 0.5;
      const int phase = static_cast<int>(u01(rng) * spec.texture_period);
      for (int y = 0; y < r; ++y)
        for (int x = 0; x < r; ++x) {
          const int coord = (vertical ? x : y) + phase;
          alpha[static_cast<std::size_t>(y) * r + x] = (coord % spec.texture_period) < spec.texture_period / 2;
        }
      break;
    }
    case ConceptFamily::checker: {
      const int half = spec.texture_period / 2;
      const int px = static_cast<int>(u01(rng) * spec.texture_period);
      const int py = static_cast<int>(u01(rng) * spec.texture_period);
      for (int y = 0; y < r; ++y)
        for (int x = 0; x < r; ++x) alpha[static_cast<std::size_t>(y) * r + x] = (((x + px) / half + (y + py) / half) % 2) == 0;
      break;
    }
    case ConceptFamily::disk:
    case ConceptFamily::square: {
      const double cx = r * in(0.38, 0.62), cy = r * in(0.38, 0.62);
      const double size = r * in(0.2, 0.3);
      for (int y = 0; y < r; ++y)
        for (int x = 0; x < r; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const double d = spec.family == ConceptFamily::disk ? std::hypot(dx, dy)
                                                              : std::max(std::abs(dx), std::abs(dy));
          alpha[static_cast<std::size_t>(y) * r + x] = std::clamp(size - d + 0.5, 0.0, 1.0);
        }
      break;
    }
  }
  auto img = torch::empty({3, r, r}, torch::TensorOptions().dtype(torch::kFloat32));
  auto acc = img.accessor<float, 3>();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < r; ++y)
      for (int x = 0; x < r; ++x) {
        const double a = alpha[static_cast<std::size_t>(y) * r + x];
        acc[c][y][x] = static_cast<float>(a * fg[c] + (1.0 - a) * bg[c]);
      }
  return img;
}

Dataset generate_dataset(const std::vector<SyntheticConceptSpec>& specs, int resolution, double heldout_fraction) {
  if (heldout_fraction < 0.0 || heldout_fraction >= 1.0) throw ConfigError("held-out fraction must be in [0, 1)");
  Dataset d;
  d.resolution = resolution;
  d.specs = specs;
  d.heldout_fraction = heldout_fraction;
  std::vector<torch::Tensor> images;
  std::vector<std::int64_t> labels;
  std::vector<char> heldout;
  for (const auto& s : specs) {
    if (s.count < 0) throw ConfigError(s.name + ": negative sample count");
    const int held = static_cast<int>(std::ceil(heldout_fraction * s.count));
    for (int i = 0; i < s.count; ++i) {
      images.push_back(render_concept_sample(s, i, resolution));
      labels.push_back(s.concept_id);
      heldout.push_back(i >= s.count - held);
    }
  }
  const auto n = static_cast<std::int64_t>(labels.size());
  d.images = n ? torch::stack(images) : torch::empty({0, 3, resolution, resolution});
  d.labels = torch::tensor(labels, torch::TensorOptions().dtype(torch::kInt64)).view({n});
  d.heldout = torch::zeros({n}, torch::TensorOptions().dtype(torch::kBool));
  for (std::int64_t i = 0; i < n; ++i) d.heldout[i] = static_cast<bool>(heldout[static_cast<std::size_t>(i)]);
  return d;
}

Dataset Dataset::split(bool heldout_part) const {
  Dataset out = *this;
  const auto mask = heldout_part ? heldout : heldout.logical_not();
  const auto idx = mask.nonzero().flatten();
  out.images = images.index_select(0, idx);
  out.labels = labels.index_select(0, idx);
  out.heldout = heldout.index_select(0, idx);
  return out;
}

Json Dataset::manifest() const {
  Json specs_json = Json::array();
  for (const auto& s : specs) specs_json.push_back(to_json(s));
  return Json{{"kind", "synthetic_dataset"},
              {"version", 1},
              {"resolution", resolution},
              {"heldout_fraction", heldout_fraction},
              {"heldout_rule", "last ceil(fraction * count) samples of each concept"},
              {"size", size()},
              {"specs", specs_json}};
}

void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto archive = dir / "dataset.tensors";
  save_tensors(archive, {{"images", d.images}, {"labels", d.labels}, {"heldout", d.heldout.to(torch::kInt64)}});
  Json m = d.manifest();
  m["archive"] = "dataset.tensors";
  m["archive_sha256"] = sha256_file(archive);
  std::ofstream os(dir / "manifest.json");
  if (!os) throw PreconditionError("cannot write " + (dir / "manifest.json").string());
  os << m.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw PreconditionError("missing dataset manifest " + (dir / "manifest.json").string());
  const Json m = Json::parse(is);
  const auto archive = dir / m.at("archive").get<std::string>();
  const auto expected = m.at("archive_sha256").get<std::string>();
  const auto actual = sha256_file(archive);
  if (actual != expected)
    throw PreconditionError(archive.string() + " has sha256 " + actual + ", manifest expects " + expected);
  auto t = load_tensors(archive);
  Dataset d;
  d.images = t.at("images");
  d.labels = t.at("labels");
  d.heldout = t.at("heldout").to(torch::kBool);
  d.resolution = m.at("resolution").get<int>();
  d.heldout_fraction = m.at("heldout_fraction").get<double>();
  for (const auto& s : m.at("specs")) d.specs.push_back(concept_spec_from_json(s));
  return d;
}

void save_dataset_preview(const Dataset& d, const std::filesystem::path& png, int per_concept) {
  std::vector<torch::Tensor> rows;
  for (const auto& s : d.specs) {
    const auto idx = d.labels.eq(s.concept_id).nonzero().flatten();
    if (idx.numel() == 0) continue;
    rows.push_back(d.images.index_select(0, idx.slice(0, 0, per_concept)));
  }
  if (rows.empty()) return;
  write_png(png, contact_sheet(torch::cat(rows, 0), per_concept, 4));
}

// --- base model -------------------------------------------------------------

void BaseTrainConfig::validate() const {
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (class_dropout < 0.0 || class_dropout > 1.0) throw ConfigError("class dropout must be in [0, 1]");
  if (ema_decay < 0.0 || ema_decay >= 1.0) throw ConfigError("EMA decay must be in [0, 1)");
}

Json to_json(const BaseTrainConfig& c) {
  return Json{{"steps", c.steps},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"class_dropout", c.class_dropout},
              {"ema_decay", c.ema_decay},
              {"warmup_steps", c.warmup_steps},
              {"lr_schedule", "linear warmup, cosine decay to 10%"},
              {"optimizer", "adam"},
              {"seed", c.seed}};
}

namespace {

double scheduled_lr(double base, int step, int steps, int warmup) {
  if (warmup > 0 && step < warmup) return base * (step + 1) / warmup;
  const double progress = steps > warmup ? static_cast<double>(step - warmup) / (steps - warmup) : 1.0;
  return base * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress)));
}

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

}  // namespace

BaseTrainResult train_base(const Dataset& data, const ArchConfig& arch, const NoiseSchedule& schedule,
                           const BaseTrainConfig& cfg) {
  cfg.validate();
  arch.validate();
  const auto train = data.split(false);
  if (train.size() == 0) throw InputError("train_base: empty training split");
  if (train.resolution != arch.resolution) throw ConfigError("dataset resolution differs from the architecture");

  BaseTrainResult result;
  auto model = make_base_unet(arch, schedule, cfg.seed);
  BaseUNet ema = cfg.ema_decay > 0.0 ? clone_base(model) : model;
  for (auto& p : ema->parameters()) p.set_requires_grad(false);
  for (auto& p : model->parameters()) p.set_requires_grad(true);
  model->train();

  auto gen = at::make_generator<at::CPUGeneratorImpl>(mix_seed(cfg.seed, 1));
  const auto ab = torch::tensor(schedule.alpha_bars, torch::TensorOptions().dtype(torch::kFloat64)).to(torch::kFloat32);
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  const auto ema_params = ema->parameters();
  const auto live_params = model->parameters();

  for (int step = 0; step < cfg.steps; ++step) {
    set_lr(opt, scheduled_lr(cfg.learning_rate, step, cfg.steps, cfg.warmup_steps));
    const auto idx = torch::randint(0, train.size(), {cfg.batch_size}, gen, torch::kInt64);
    const auto x0 = train.images.index_select(0, idx);
    auto labels = train.labels.index_select(0, idx);
    const auto drop = torch::rand({cfg.batch_size}, gen, torch::kFloat64).lt(cfg.class_dropout);
    labels = torch::where(drop, torch::zeros_like(labels), labels);
    const auto t = torch::randint(0, schedule.steps, {cfg.batch_size}, gen, torch::kInt64);
    const auto noise = torch::randn(x0.sizes(), gen, torch::kFloat64).to(torch::kFloat32);
    const auto a = ab.index_select(0, t).view({-1, 1, 1, 1});
    const auto z = a.sqrt() * x0 + (1.0 - a).sqrt() * noise;

    opt.zero_grad();
    auto loss = torch::mse_loss(model->forward(z, t, model->context(labels)), noise);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) throw NumericalError("base training loss became non-finite at step " + std::to_string(step), "");
    loss.backward();
    opt.step();
    if (cfg.ema_decay > 0.0) {
      torch::NoGradGuard no_grad;
      for (std::size_t i = 0; i < live_params.size(); ++i)
        ema_params[i].mul_(cfg.ema_decay).add_(live_params[i].detach(), 1.0 - cfg.ema_decay);
    }
    result.trace.push_back({step, value});
  }
  for (auto& p : model->parameters()) p.set_requires_grad(false);
  ema->eval();
  result.model = ema;
  return result;
}

// --- classifier -------------------------------------------------------------

void ClassifierTrainConfig::validate() const {
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (noise_augment < 0.0 || colour_jitter < 0.0) throw ConfigError("augmentation strengths must be >= 0");
  if (contrast_jitter < 0.0 || contrast_jitter >= 1.0) throw ConfigError("contrast_jitter must be in [0, 1)");
}

Json to_json(const ClassifierTrainConfig& c) {
  return Json{{"steps", c.steps},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"optimizer", "adam"},
              {"seed", c.seed},
              {"permute_labels", c.permute_labels},
              {"noise_augment", c.noise_augment},
              {"colour_jitter", c.colour_jitter},
              {"contrast_jitter", c.contrast_jitter}};
}

ClassifierTrainResult train_classifier(const Dataset& data, const ClassifierTrainConfig& cfg) {
  cfg.validate();
  const auto train = data.split(false);
  const auto held = data.split(true);
  if (train.size() == 0 || held.size() == 0) throw InputError("train_classifier needs both splits");
  int k = 0;
  for (const auto& s : data.specs) k = std::max(k, s.concept_id);

  ClassifierTrainResult result;
  result.classifier = make_classifier(k, data.resolution, cfg.seed);
  auto& clf = *result.classifier;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(mix_seed(cfg.seed, 2));
  auto labels = train.labels;
  if (cfg.permute_labels) labels = labels.index_select(0, torch::randperm(labels.size(0), gen, torch::kInt64));
  torch::optim::Adam opt(clf.parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  clf.train();
  for (int step = 0; step < cfg.steps; ++step) {
    const auto idx = torch::randint(0, train.size(), {cfg.batch_size}, gen, torch::kInt64);
    auto x = train.images.index_select(0, idx);
    const auto f = torch::TensorOptions().dtype(torch::kFloat64);
    const auto sigma = torch::rand({cfg.batch_size, 1, 1, 1}, gen, f) * cfg.noise_augment;
    const auto shift = (torch::rand({cfg.batch_size, x.size(1), 1, 1}, gen, f) * 2.0 - 1.0) * cfg.colour_jitter;
    const auto gain = 1.0 - torch::rand({cfg.batch_size, 1, 1, 1}, gen, f) * cfg.contrast_jitter;
    const auto centre = x.mean({1, 2, 3}, true);
    x = centre + (x - centre) * gain.to(x.scalar_type());
    x = x + (sigma * torch::randn(x.sizes(), gen, f) + shift).to(x.scalar_type());
    opt.zero_grad();
    auto loss = torch::cross_entropy_loss(clf.forward(x), labels.index_select(0, idx) - 1);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) throw NumericalError("classifier loss became non-finite", "");
    loss.backward();
    opt.step();
    result.trace.push_back({step, value});
  }
  clf.eval();
  for (auto& p : clf.parameters()) p.set_requires_grad(false);

  const auto pred = clf.predict(held.images);
  result.heldout_accuracy = pred.eq(held.labels).to(torch::kFloat64).mean().item<double>();
  result.confusion = torch::zeros({k, k}, torch::TensorOptions().dtype(torch::kInt64));
  for (std::int64_t i = 0; i < pred.size(0); ++i)
    result.confusion[held.labels[i].item<std::int64_t>() - 1][pred[i].item<std::int64_t>() - 1] += 1;
  for (int c = 1; c <= k; ++c) {
    const auto others = held.labels.ne(c);
    const auto n = others.sum().item<std::int64_t>();
    result.false_positive_floor.push_back(
        n ? pred.eq(c).logical_and(others).sum().item<double>() / static_cast<double>(n) : 0.0);
  }
  return result;
}

bool windowed_median_decreasing(const std::vector<double>& values, std::size_t window) {
  if (window == 0 || values.size() < 2 * window) return false;
  const auto median = [](std::vector<double> v) {
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    return v[v.size() / 2];
  };
  const std::vector<double> first(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(window));
  const std::vector<double> last(values.end() - static_cast<std::ptrdiff_t>(window), values.end());
  return median(last) < median(first);
}

void write_loss_points_csv(const std::filesystem::path& path, const std::vector<LossPoint>& trace) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw PreconditionError("cannot write " + path.string());
  os.precision(17);
  os << "step,loss\n";
  for (const auto& p : trace) os << p.step << ',' << p.loss << '\n';
}

}  // namespace dumo
