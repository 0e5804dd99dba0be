#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dumo/unet.hpp"

namespace dumo {

struct SamplerConfig {
  int steps = 50;        // respaced ancestral steps, <= schedule length
  bool clip_x0 = true;   // clamp the predicted clean image to [-1, 1]
};

struct SampleResult {
  torch::Tensor images;  // [B, C, H, W]
  AdapterTrace trace;
};

/// Independent per-image noise stream; image i of a batch only depends on seeds[i].
class NoiseStreams {
 public:
  explicit NoiseStreams(std::span<const std::uint64_t> seeds);
  torch::Tensor next(torch::IntArrayRef image_shape, torch::Dtype dtype);

 private:
  std::vector<torch::Generator> generators_;
};

/// Ancestral step from timestep `from` to `to` (to < from, or to = -1 for the clean
/// image) with the DDPM posterior of the respaced chain.
torch::Tensor ancestral_step(const NoiseSchedule& schedule, const torch::Tensor& z,
                             const torch::Tensor& eps, int from, int to,
                             const torch::Tensor& noise, bool clip_x0);

/// Respaced ancestral DDPM sampling from pure noise; deterministic given seeds.
SampleResult sample(const BaseUNet& model, const Condition& cond, const SamplerConfig& cfg,
                    std::span<const std::uint64_t> seeds, const SkipAdapter* adapters = nullptr);

/// Runs the frozen sampler from pure noise at T-1 down to timestep `stop`, landing
/// exactly on `stop`. With stop = T-1 no denoising happens.
LatentState denoise_to(const BaseUNet& model, const Condition& cond, const SamplerConfig& cfg,
                       std::span<const std::uint64_t> seeds, int stop,
                       const SkipAdapter* adapters = nullptr);

/// Seeds base, base+1, ... as a vector.
std::vector<std::uint64_t> seed_range(std::uint64_t base, std::size_t count);

/// SplitMix64 finalizer; used to derive independent sub-seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace dumo
