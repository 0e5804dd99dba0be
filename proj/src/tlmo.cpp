#include "dumo/tlmo.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <fstream>

#include "dumo/errors.hpp"

namespace dumo {

// --- modulation grid --------------------------------------------------------

std::vector<int> equal_partition(int steps, int groups) {
  if (groups < 1 || groups > steps)
    throw ConfigError("cannot split " + std::to_string(steps) + " timesteps into " + std::to_string(groups) + " groups");
  std::vector<int> b(static_cast<std::size_t>(groups) + 1);
  for (int g = 0; g <= groups; ++g)
    b[static_cast<std::size_t>(g)] =
        static_cast<int>((static_cast<std::int64_t>(g) * steps) / groups);
  return b;
}

int ModulationFactors::group_of(int t) const {
  if (t < 0 || t >= steps) throw InputError("timestep " + std::to_string(t) + " out of range");
  auto it = std::upper_bound(boundaries.begin(), boundaries.end(), t);
  return static_cast<int>(it - boundaries.begin()) - 1;
}

ModulationFactors init_modulation(int steps, int layers, int groups) {
  if (layers < 1) throw ConfigError("modulation needs at least one layer");
  ModulationFactors m;
  m.steps = steps;
  m.boundaries = equal_partition(steps, groups);
  m.grid = torch::ones({groups, layers}, torch::TensorOptions().dtype(torch::kFloat64));
  return m;
}

double lookup_factor(const ModulationFactors& m, int t, int l) {
  if (l < 1 || l > m.layers()) throw InputError("layer " + std::to_string(l) + " out of range");
  return m.grid[m.group_of(t)][l - 1].item<double>();
}

torch::Tensor lookup_row(const ModulationFactors& m, int t) { return m.grid.select(0, m.group_of(t)); }

Json to_json(const ModulationFactors& m) {
  const auto g = m.grid.detach().to(torch::kFloat64).contiguous();
  std::vector<double> values(g.data_ptr<double>(), g.data_ptr<double>() + g.numel());
  return Json{{"kind", "modulation_factors"},
              {"version", 1},
              {"steps", m.steps},
              {"groups", m.groups()},
              {"layers", m.layers()},
              {"boundaries", m.boundaries},
              {"interval", "half-open [start, end)"},
              {"layer_order", "l=1 deepest .. l=L shallowest"},
              {"values_row_major", values}};
}

ModulationFactors modulation_from_json(const Json& j) {
  if (j.value("kind", "") != "modulation_factors") throw PreconditionError("not a modulation grid document");
  ModulationFactors m;
  m.steps = j.at("steps").get<int>();
  m.boundaries = j.at("boundaries").get<std::vector<int>>();
  const int groups = j.at("groups").get<int>();
  const int layers = j.at("layers").get<int>();
  auto values = j.at("values_row_major").get<std::vector<double>>();
  if (static_cast<int>(m.boundaries.size()) != groups + 1 || static_cast<int>(values.size()) != groups * layers)
    throw PreconditionError("modulation grid document is inconsistent");
  if (m.boundaries.front() != 0 || m.boundaries.back() != m.steps ||
      !std::is_sorted(m.boundaries.begin(), m.boundaries.end(), std::less_equal<>()))
    throw PreconditionError("modulation grid boundaries do not partition [0, steps)");
  for (double v : values)
    if (!(v >= 0.0) || !std::isfinite(v)) throw PreconditionError("modulation factors must be finite and >= 0");
  m.grid = torch::tensor(values, torch::TensorOptions().dtype(torch::kFloat64)).view({groups, layers}).clone();
  return m;
}

// --- losses -----------------------------------------------------------------

ModulationMode parse_modulation_mode(std::string_view name) {
  if (name == "combined" || name == "timestep_layer") return ModulationMode::combined;
  if (name == "timestep_only" || name == "timestep") return ModulationMode::timestep_only;
  if (name == "layer_only" || name == "layer") return ModulationMode::layer_only;
  throw ConfigError("unknown modulation mode '" + std::string(name) + "'");
}

std::string to_string(ModulationMode mode) {
  switch (mode) {
    case ModulationMode::combined: return "combined";
    case ModulationMode::timestep_only: return "timestep_only";
    case ModulationMode::layer_only: return "layer_only";
  }
  return "?";
}

void TLMOConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!(eta >= 0.0)) throw ConfigError("eta must be >= 0");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
}

Json to_json(const TLMOConfig& c) {
  Json j{{"lambda", c.lambda},  {"eta", c.eta},         {"steps", c.steps},
         {"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"seed", c.seed},
         {"sampler_steps", c.sampler.steps}, {"mode", to_string(c.mode)},
         {"optimizer", "adam"}, {"projection", "clamp >= 0 after each step"}};
  j["t_range"] = c.t_range ? Json::array({c.t_range->first, c.t_range->second}) : Json("full");
  return j;
}

torch::Tensor preservation_loss_tensor(const torch::Tensor& adapted, const torch::Tensor& frozen) {
  if (!adapted.sizes().equals(frozen.sizes())) throw InputError("preservation_loss: shape mismatch");
  return (adapted - frozen).pow(2).mean();
}

double preservation_loss(const torch::Tensor& adapted, const torch::Tensor& frozen) {
  torch::NoGradGuard no_grad;
  return preservation_loss_tensor(adapted.to(torch::kFloat64), frozen.to(torch::kFloat64)).item<double>();
}

torch::Tensor preservation_loss_grad(const torch::Tensor& adapted, const torch::Tensor& frozen) {
  if (!adapted.sizes().equals(frozen.sizes())) throw InputError("preservation_loss: shape mismatch");
  return 2.0 * (adapted - frozen) / static_cast<double>(adapted.numel());
}

torch::Tensor era2_loss_tensor(const torch::Tensor& eps_adapted, const torch::Tensor& eps_era,
                               const torch::Tensor& eps_null, double eta) {
  return erase_loss_tensor(eps_adapted, eps_era, eps_null, eta);
}

double era2_loss(const torch::Tensor& eps_adapted, const torch::Tensor& eps_era, const torch::Tensor& eps_null,
                 double eta) {
  return erase_loss(eps_adapted, eps_era, eps_null, eta).total;
}

double tlmo_total_loss(double era2, double pre, double lambda) { return era2 + lambda * pre; }

torch::Tensor tlmo_total_loss(const torch::Tensor& era2, const torch::Tensor& pre, double lambda) {
  return era2 + lambda * pre;
}

// --- stage 2 ----------------------------------------------------------------

TLMOLossTerms tlmo_objective(const BaseUNet& model, const EPRModule& epr, const ModulationFactors& m,
                             const LatentState& target_latent, const LatentState& null_latent, double eta,
                             double lambda) {
  AdapterStack stack;
  stack.push(AdapterEntry{epr, m, ApplyMask{}});
  const Condition null = Condition::empty();
  torch::Tensor eps_era, eps_null_t, eps_null_n;
  {
    torch::NoGradGuard no_grad;
    eps_era = predict_noise(model, target_latent, epr->target);
    eps_null_t = predict_noise(model, target_latent, null);
    eps_null_n = predict_noise(model, null_latent, null);
  }
  TLMOLossTerms terms;
  terms.era2 = era2_loss_tensor(predict_noise(model, target_latent, epr->target, &stack), eps_era, eps_null_t, eta);
  terms.pre = preservation_loss_tensor(predict_noise(model, null_latent, null, &stack), eps_null_n);
  terms.total = tlmo_total_loss(terms.era2, terms.pre, lambda);
  return terms;
}

namespace {

torch::Tensor free_parameters(const ModulationFactors& init, ModulationMode mode) {
  auto g = init.grid.detach().to(torch::kFloat64);
  switch (mode) {
    case ModulationMode::combined: return g.clone();
    case ModulationMode::timestep_only: return g.mean(1, true).clone();
    case ModulationMode::layer_only: return g.mean(0, true).clone();
  }
  return g.clone();
}

}  // namespace

TLMOResult run_tlmo(const BaseUNet& model, const EPRModule& epr, const ModulationFactors& init,
                    const TLMOConfig& cfg, const std::filesystem::path& dump_dir) {
  cfg.validate();
  if (init.layers() != epr->skip_count()) throw ConfigError("modulation grid and EPR disagree on layer count");
  if (init.steps != model->schedule().steps) throw ConfigError("modulation grid built for a different schedule");
  TLMOResult result;
  result.base_checksum_before = parameter_checksum(*model);
  result.epr_checksum_before = parameter_checksum(*epr);
  for (auto& p : model->parameters()) p.set_requires_grad(false);
  for (auto& p : epr->parameters()) p.set_requires_grad(false);
  epr.ptr()->eval();

  auto free = free_parameters(init, cfg.mode).set_requires_grad(true);
  torch::optim::Adam opt({free}, torch::optim::AdamOptions(cfg.learning_rate));
  const auto range = resolve_range(cfg.t_range, model->schedule().steps);
  const auto shape = std::vector<std::int64_t>{init.groups(), init.layers()};

  for (int step = 0; step < cfg.steps; ++step) {
    const auto step_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(step));
    const int t = draw_training_timestep(mix_seed(step_seed, 0), range);
    std::vector<std::uint64_t> seeds_era, seeds_null;
    for (int i = 0; i < cfg.batch_size; ++i) {
      seeds_era.push_back(mix_seed(step_seed, 2 * static_cast<std::uint64_t>(i) + 1));
      seeds_null.push_back(mix_seed(step_seed, 2 * static_cast<std::uint64_t>(i) + 2));
    }
    const auto z_era = denoise_to(model, epr->target, cfg.sampler, seeds_era, t);
    const auto z_null = denoise_to(model, Condition::empty(), cfg.sampler, seeds_null, t);

    ModulationFactors current{init.steps, init.boundaries, free.expand(shape)};
    opt.zero_grad();
    auto terms = tlmo_objective(model, epr, current, z_era, z_null, cfg.eta, cfg.lambda);
    const double total = terms.total.item<double>();
    if (!std::isfinite(total)) {
      std::string dump;
      if (!dump_dir.empty()) {
        const auto path = dump_dir / ("tlmo_nonfinite_step" + std::to_string(step) + ".tensors");
        save_tensors(path, {{"free_factors", free.detach()}});
        dump = path.string();
      }
      throw NumericalError("TLMO loss became non-finite at step " + std::to_string(step), dump);
    }
    terms.total.backward();
    opt.step();
    {
      torch::NoGradGuard no_grad;
      free.clamp_min_(0.0);
    }
    result.trace.push_back({step, terms.era2.item<double>(), terms.pre.item<double>(), total, t});
  }

  result.factors = ModulationFactors{init.steps, init.boundaries, free.detach().expand(shape).clone()};
  result.epr_checksum_after = parameter_checksum(*epr);
  result.base_checksum_after = parameter_checksum(*model);
  epr.ptr()->apply_trainable_mask();
  return result;
}

SkipFeatureSet modulated_combine(const SkipFeatureSet& original, std::span<const SkipFeatureSet> contributions,
                                 std::span<const ModulationFactors> factors, int t) {
  if (contributions.size() != factors.size())
    throw InputError("modulated_combine: one grid per contribution is required");
  std::vector<SkipContribution> scaled;
  scaled.reserve(contributions.size());
  for (std::size_t k = 0; k < contributions.size(); ++k)
    scaled.push_back(SkipContribution{contributions[k], lookup_row(factors[k], t), {}});
  return combine_skip(original, scaled);
}

void write_tlmo_csv(const std::filesystem::path& path, const std::vector<TLMORecord>& trace) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw PreconditionError("cannot write " + path.string());
  os << "step,era2,pre,total,t\n";
  os.precision(17);
  for (const auto& r : trace) os << r.step << ',' << r.era2 << ',' << r.pre << ',' << r.total << ',' << r.t << '\n';
}

void save_modulation(const ModulationFactors& m, const std::filesystem::path& path, const Json& extra) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  Json j = to_json(m);
  for (const auto& [k, v] : extra.items()) j[k] = v;
  std::ofstream os(path);
  if (!os) throw PreconditionError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

ModulationFactors load_modulation(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw PreconditionError("missing modulation grid file " + path.string());
  return modulation_from_json(Json::parse(is));
}

}  // namespace dumo
