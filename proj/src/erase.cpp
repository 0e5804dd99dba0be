#include "dumo/erase.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "dumo/errors.hpp"

namespace dumo {

void EraseConfig::validate() const {
  if (!(eta >= 0.0)) throw ConfigError("eta must be >= 0");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
}

Json to_json(const EraseConfig& c) {
  Json j{{"eta", c.eta},
         {"steps", c.steps},
         {"learning_rate", c.learning_rate},
         {"batch_size", c.batch_size},
         {"seed", c.seed},
         {"sampler_steps", c.sampler.steps},
         {"optimizer", {{"name", "adam"}, {"beta1", c.adam_beta1}, {"beta2", c.adam_beta2}, {"eps", c.adam_eps}}},
         {"loss_reduction", "mean"}};
  j["t_range"] = c.t_range ? Json::array({c.t_range->first, c.t_range->second}) : Json("full");
  return j;
}

namespace {

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) throw InputError(std::string(what) + ": shape mismatch");
}

}  // namespace

torch::Tensor erase_target(const torch::Tensor& eps_era, const torch::Tensor& eps_null, double eta) {
  check_same_shape(eps_era, eps_null, "erase_target");
  return eps_null - eta * (eps_era - eps_null);
}

torch::Tensor erase_loss_tensor(const torch::Tensor& eps_adapted, const torch::Tensor& eps_era,
                                const torch::Tensor& eps_null, double eta) {
  check_same_shape(eps_adapted, eps_era, "erase_loss");
  return (eps_adapted - erase_target(eps_era, eps_null, eta)).pow(2).mean();
}

LossBreakdown erase_loss(const torch::Tensor& eps_adapted, const torch::Tensor& eps_era,
                         const torch::Tensor& eps_null, double eta) {
  check_same_shape(eps_adapted, eps_era, "erase_loss");
  torch::NoGradGuard no_grad;
  const auto residual = (eps_adapted - erase_target(eps_era, eps_null, eta)).to(torch::kFloat64);
  LossBreakdown out;
  out.total = residual.pow(2).mean().item<double>();
  out.residual_norm = residual.norm().item<double>();
  out.guidance_norm = (eps_era - eps_null).to(torch::kFloat64).norm().item<double>();
  return out;
}

torch::Tensor erase_loss_grad(const torch::Tensor& eps_adapted, const torch::Tensor& eps_era,
                              const torch::Tensor& eps_null, double eta) {
  check_same_shape(eps_adapted, eps_era, "erase_loss_grad");
  return 2.0 * (eps_adapted - erase_target(eps_era, eps_null, eta)) / static_cast<double>(eps_adapted.numel());
}

int draw_training_timestep(std::uint64_t seed, std::pair<int, int> range) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dist(range.first, range.second);
  return dist(rng);
}

std::pair<int, int> resolve_range(const std::optional<std::pair<int, int>>& range, int steps) {
  auto r = range.value_or(std::pair{0, steps - 1});
  if (r.first < 0 || r.second >= steps || r.first > r.second)
    throw ConfigError("timestep range [" + std::to_string(r.first) + ", " + std::to_string(r.second) +
                      "] invalid for " + std::to_string(steps) + " steps");
  return r;
}

LatentState sample_training_latent(const BaseUNet& model, const Condition& cond, std::uint64_t seed,
                                   const EraseConfig& cfg) {
  const auto range = resolve_range(cfg.t_range, model->schedule().steps);
  const int t = draw_training_timestep(mix_seed(seed, 0), range);
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < cfg.batch_size; ++i) seeds.push_back(mix_seed(seed, static_cast<std::uint64_t>(i) + 1));
  auto state = denoise_to(model, cond, cfg.sampler, seeds, t);
  state.seed = seed;
  return state;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepRecord>& trace) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw PreconditionError("cannot write " + path.string());
  os << "step,total,t,lr\n";
  os.precision(17);
  for (const auto& r : trace) os << r.step << ',' << r.total << ',' << r.t << ',' << r.lr << '\n';
}

namespace {

/// Single-EPR stack used while training; `epr` is shared, not copied.
AdapterStack single(const EPRModule& epr) {
  AdapterStack stack;
  stack.push(AdapterEntry{epr, std::nullopt, ApplyMask{}});
  return stack;
}

[[noreturn]] void abort_non_finite(const torch::nn::Module& module, const std::filesystem::path& dump_dir,
                                   const std::string& what, int step) {
  std::string dump;
  if (!dump_dir.empty()) {
    const auto path = dump_dir / ("nonfinite_step" + std::to_string(step) + ".tensors");
    save_tensors(path, named_state(module));
    dump = path.string();
  }
  throw NumericalError(what + " became non-finite at step " + std::to_string(step) +
                           (dump.empty() ? std::string() : "; state dumped to " + dump),
                       dump);
}

}  // namespace

FinetuneResult finetune_epr(const BaseUNet& model, EPRModule& epr, const EraseConfig& cfg,
                            const std::filesystem::path& dump_dir) {
  cfg.validate();
  FinetuneResult result;
  result.base_checksum_before = parameter_checksum(*model);
  for (auto& p : model->parameters()) p.set_requires_grad(false);
  epr->apply_trainable_mask();
  epr->train();

  torch::optim::Adam opt(epr->trainable_parameters(),
                         torch::optim::AdamOptions(cfg.learning_rate)
                             .betas({cfg.adam_beta1, cfg.adam_beta2})
                             .eps(cfg.adam_eps));
  const auto stack = single(epr);
  const Condition null = Condition::empty();
  for (int step = 0; step < cfg.steps; ++step) {
    const auto state = sample_training_latent(model, epr->target, mix_seed(cfg.seed, static_cast<std::uint64_t>(step)), cfg);
    torch::Tensor eps_era, eps_null;
    {
      torch::NoGradGuard no_grad;
      eps_era = predict_noise(model, state, epr->target);
      eps_null = predict_noise(model, state, null);
    }
    opt.zero_grad();
    const auto eps_adapted = predict_noise(model, state, epr->target, &stack);
    auto loss = erase_loss_tensor(eps_adapted, eps_era, eps_null, cfg.eta);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) abort_non_finite(*epr, dump_dir, "erase loss", step);
    loss.backward();
    opt.step();
    result.trace.push_back({step, value, state.t, cfg.learning_rate});
  }
  epr->eval();
  result.base_checksum_after = parameter_checksum(*model);
  return result;
}

double mean_erase_loss(const BaseUNet& model, const SkipAdapter* adapters, const Condition& target,
                       double eta, const std::vector<LatentState>& latents) {
  torch::NoGradGuard no_grad;
  if (latents.empty()) throw InputError("mean_erase_loss: no latents");
  double sum = 0.0;
  for (const auto& s : latents) {
    const auto eps_era = predict_noise(model, s, target);
    const auto eps_null = predict_noise(model, s, Condition::empty());
    const auto eps_adapted = adapters ? predict_noise(model, s, target, adapters) : eps_era;
    sum += erase_loss(eps_adapted, eps_era, eps_null, eta).total;
  }
  return sum / static_cast<double>(latents.size());
}

BaseUNet clone_base(const BaseUNet& model) {
  BaseUNet copy(model->arch(), model->schedule());
  copy->to(model->parameters().front().scalar_type());
  load_named_state(*copy, named_state(*model), "clone");
  return copy;
}

DirectFinetuneResult finetune_direct(const BaseUNet& model, const Condition& target, const EraseConfig& cfg) {
  cfg.validate();
  DirectFinetuneResult result;
  const BaseUNet frozen = model;
  for (auto& p : frozen->parameters()) p.set_requires_grad(false);
  result.model = clone_base(model);
  std::vector<torch::Tensor> trainable;
  for (auto& item : result.model->named_parameters(true)) {
    const bool xattn = is_cross_attention_parameter(item.key());
    item.value().set_requires_grad(xattn);
    if (xattn) trainable.push_back(item.value());
  }
  torch::optim::Adam opt(trainable, torch::optim::AdamOptions(cfg.learning_rate)
                                        .betas({cfg.adam_beta1, cfg.adam_beta2})
                                        .eps(cfg.adam_eps));
  for (int step = 0; step < cfg.steps; ++step) {
    const auto state = sample_training_latent(frozen, target, mix_seed(cfg.seed, static_cast<std::uint64_t>(step)), cfg);
    torch::Tensor eps_era, eps_null;
    {
      torch::NoGradGuard no_grad;
      eps_era = predict_noise(frozen, state, target);
      eps_null = predict_noise(frozen, state, Condition::empty());
    }
    opt.zero_grad();
    auto loss = erase_loss_tensor(predict_noise(result.model, state, target), eps_era, eps_null, cfg.eta);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) abort_non_finite(*result.model, {}, "direct fine-tune loss", step);
    loss.backward();
    opt.step();
    result.trace.push_back({step, value, state.t, cfg.learning_rate});
  }
  for (auto& p : result.model->parameters()) p.set_requires_grad(false);
  return result;
}

}  // namespace dumo
