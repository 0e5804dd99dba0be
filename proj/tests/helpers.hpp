#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include "dumo/epr.hpp"
#include "dumo/unet.hpp"

namespace dumo::test {

inline ArchConfig tiny_arch() {
  ArchConfig a;
  a.resolution = 8;
  a.channels = {8, 16, 16};
  a.context_dim = 16;
  a.time_dim = 16;
  a.norm_groups = 4;
  return a;
}

inline BaseUNet tiny_model(std::uint64_t seed = 1, torch::Dtype dtype = torch::kFloat32, int steps = 100) {
  return make_base_unet(tiny_arch(), make_noise_schedule(steps, ScheduleKind::linear), seed, dtype);
}

/// Gives every zero projection a small random value so the adapter is not an identity.
inline void perturb_projections(EPRModule& epr, std::uint64_t seed, double scale = 0.05) {
  torch::NoGradGuard no_grad;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  for (auto& p : epr->zero_convs->parameters())
    p.copy_(torch::randn(p.sizes(), gen, torch::TensorOptions().dtype(torch::kFloat64)).to(p.scalar_type()) * scale);
}

inline LatentState random_latent(const BaseUNet& model, int t, std::int64_t batch, std::uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const auto& a = model->arch();
  const auto dtype = model->parameters().front().scalar_type();
  return {torch::randn({batch, a.image_channels, a.resolution, a.resolution}, gen,
                       torch::TensorOptions().dtype(torch::kFloat64)).to(dtype),
          t, seed};
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("dumo_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline bool bit_equal(const torch::Tensor& a, const torch::Tensor& b) {
  return a.sizes() == b.sizes() && a.scalar_type() == b.scalar_type() && torch::equal(a, b);
}

}  // namespace dumo::test
