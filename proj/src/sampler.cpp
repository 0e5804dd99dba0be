#include "dumo/sampler.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

#include "dumo/errors.hpp"

namespace dumo {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<std::uint64_t> seed_range(std::uint64_t base, std::size_t count) {
  std::vector<std::uint64_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = base + i;
  return out;
}

NoiseStreams::NoiseStreams(std::span<const std::uint64_t> seeds) {
  generators_.reserve(seeds.size());
  for (auto s : seeds) generators_.push_back(at::make_generator<at::CPUGeneratorImpl>(s));
}

torch::Tensor NoiseStreams::next(torch::IntArrayRef image_shape, torch::Dtype dtype) {
  std::vector<torch::Tensor> parts;
  parts.reserve(generators_.size());
  std::vector<std::int64_t> shape{1};
  shape.insert(shape.end(), image_shape.begin(), image_shape.end());
  for (auto& g : generators_)
    parts.push_back(torch::randn(shape, g, torch::TensorOptions().dtype(torch::kFloat64)).to(dtype));
  return torch::cat(parts, 0);
}

torch::Tensor ancestral_step(const NoiseSchedule& schedule, const torch::Tensor& z,
                             const torch::Tensor& eps, int from, int to,
                             const torch::Tensor& noise, bool clip_x0) {
  const double ab_from = schedule.alpha_bar(from);
  const double ab_to = to >= 0 ? schedule.alpha_bar(to) : 1.0;
  auto x0 = (z - std::sqrt(1.0 - ab_from) * eps) / std::sqrt(ab_from);
  if (clip_x0) x0 = x0.clamp(-1.0, 1.0);
  if (to < 0) return x0;
  const double beta = 1.0 - ab_from / ab_to;
  const double coef_x0 = std::sqrt(ab_to) * beta / (1.0 - ab_from);
  const double coef_z = std::sqrt(1.0 - beta) * (1.0 - ab_to) / (1.0 - ab_from);
  const double var = beta * (1.0 - ab_to) / (1.0 - ab_from);
  return coef_x0 * x0 + coef_z * z + std::sqrt(var) * noise;
}

namespace {

std::vector<std::int64_t> image_shape(const ArchConfig& a) {
  return {a.image_channels, a.resolution, a.resolution};
}

torch::Dtype model_dtype(const BaseUNet& model) {
  return model->parameters().front().scalar_type();
}

}  // namespace

LatentState denoise_to(const BaseUNet& model, const Condition& cond, const SamplerConfig& cfg,
                       std::span<const std::uint64_t> seeds, int stop,
                       const SkipAdapter* adapters) {
  const auto& sched = model->schedule();
  if (stop < 0 || stop >= sched.steps) throw InputError("denoise_to: stop timestep out of range");
  torch::NoGradGuard no_grad;
  NoiseStreams noise(seeds);
  const auto dtype = model_dtype(model);
  const auto shape = image_shape(model->arch());
  LatentState state{noise.next(shape, dtype), sched.steps - 1, seeds.empty() ? 0 : seeds.front()};
  const auto grid = sampling_timesteps(sched.steps, cfg.steps);
  for (std::size_t i = 0; state.t > stop; ++i) {
    int to = i + 1 < grid.size() ? grid[i + 1] : -1;
    if (to < stop) to = stop;
    const auto eps = predict_noise(model, state, cond, adapters);
    state.z = ancestral_step(sched, state.z, eps, state.t, to, noise.next(shape, dtype), cfg.clip_x0);
    state.t = to;
  }
  return state;
}

SampleResult sample(const BaseUNet& model, const Condition& cond, const SamplerConfig& cfg,
                    std::span<const std::uint64_t> seeds, const SkipAdapter* adapters) {
  const auto& sched = model->schedule();
  if (seeds.empty()) throw InputError("sample: no seeds given");
  torch::NoGradGuard no_grad;
  NoiseStreams noise(seeds);
  const auto dtype = model_dtype(model);
  const auto shape = image_shape(model->arch());
  SampleResult result;
  LatentState state{noise.next(shape, dtype), sched.steps - 1, seeds.front()};
  const auto grid = sampling_timesteps(sched.steps, cfg.steps);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    state.t = grid[i];
    const int to = i + 1 < grid.size() ? grid[i + 1] : -1;
    const auto eps = predict_noise(model, state, cond, adapters, adapters ? &result.trace : nullptr);
    auto step_noise = to >= 0 ? noise.next(shape, dtype) : torch::Tensor();
    state.z = ancestral_step(sched, state.z, eps, state.t, to, step_noise, cfg.clip_x0);
  }
  result.images = state.z;
  return result;
}

}  // namespace dumo
