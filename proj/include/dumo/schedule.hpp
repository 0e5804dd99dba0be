#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace dumo {

enum class ScheduleKind { linear, cosine };

ScheduleKind parse_schedule_kind(std::string_view name);
std::string to_string(ScheduleKind kind);

/// Discrete DDPM variance schedule over timesteps 0..steps-1.
///
/// `alpha_bars[t]` is the cumulative product of `alphas` up to and including t,
/// so it is strictly decreasing and `alpha_bars[0] = 1 - betas[0]`.
struct NoiseSchedule {
  int steps = 0;
  ScheduleKind kind = ScheduleKind::linear;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(t)); }
};

/// Linear endpoints default to the classic DDPM values and are ignored by the
/// cosine schedule.
NoiseSchedule make_noise_schedule(int steps, ScheduleKind kind, double beta_start = 1e-4,
                                  double beta_end = 0.02);

/// Builds a schedule from explicit betas. Throws ConfigError on any invariant violation.
NoiseSchedule schedule_from_betas(std::vector<double> betas, ScheduleKind kind);

/// Throws ConfigError unless length, range and monotonicity invariants hold.
void validate(const NoiseSchedule& schedule);

/// sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * noise, for any alpha_bar in [0, 1].
torch::Tensor diffuse_closed_form(const torch::Tensor& x0, const torch::Tensor& noise,
                                  double alpha_bar);

struct LatentState {
  torch::Tensor z;  // [B, C, H, W]
  int t = 0;
  std::uint64_t seed = 0;
};

/// q(z_t | x0) in closed form. Throws InputError on shape mismatch or t out of range.
LatentState forward_diffuse(const torch::Tensor& x0, int t, const torch::Tensor& noise,
                            const NoiseSchedule& schedule);

/// Evenly spaced descending timesteps from steps-1 down to 0 (inclusive).
std::vector<int> sampling_timesteps(int schedule_steps, int sampler_steps);

}  // namespace dumo
