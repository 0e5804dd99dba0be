#include "dumo/schedule.hpp"

#include <cmath>
#include <numbers>

#include "dumo/errors.hpp"

namespace dumo {

ScheduleKind parse_schedule_kind(std::string_view name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "cosine") return ScheduleKind::cosine;
  throw ConfigError("unknown noise schedule '" + std::string(name) + "' (expected linear|cosine)");
}

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::linear ? "linear" : "cosine";
}

void validate(const NoiseSchedule& s) {
  if (s.steps < 2) throw ConfigError("noise schedule needs at least 2 steps");
  const auto n = static_cast<std::size_t>(s.steps);
  if (s.betas.size() != n || s.alphas.size() != n || s.alpha_bars.size() != n)
    throw ConfigError("noise schedule arrays do not match step count");
  for (std::size_t t = 0; t < n; ++t) {
    if (!(s.betas[t] > 0.0 && s.betas[t] < 1.0))
      throw ConfigError("beta[" + std::to_string(t) + "] outside (0, 1)");
    if (t > 0 && !(s.alpha_bars[t] < s.alpha_bars[t - 1]))
      throw ConfigError("cumulative alpha product not strictly decreasing at t=" +
                        std::to_string(t));
  }
}

NoiseSchedule schedule_from_betas(std::vector<double> betas, ScheduleKind kind) {
  NoiseSchedule s;
  s.steps = static_cast<int>(betas.size());
  s.kind = kind;
  s.betas = std::move(betas);
  s.alphas.reserve(s.betas.size());
  s.alpha_bars.reserve(s.betas.size());
  double running = 1.0;
  for (double b : s.betas) {
    s.alphas.push_back(1.0 - b);
    running *= 1.0 - b;
    s.alpha_bars.push_back(running);
  }
  if (!s.betas.empty()) {
    s.beta_start = s.betas.front();
    s.beta_end = s.betas.back();
  }
  validate(s);
  return s;
}

NoiseSchedule make_noise_schedule(int steps, ScheduleKind kind, double beta_start,
                                  double beta_end) {
  if (steps < 2) throw ConfigError("noise schedule needs at least 2 steps, got " +
                                   std::to_string(steps));
  std::vector<double> betas(static_cast<std::size_t>(steps));
  if (kind == ScheduleKind::linear) {
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
      throw ConfigError("linear schedule endpoints must satisfy 0 < start <= end < 1");
    for (int t = 0; t < steps; ++t)
      betas[static_cast<std::size_t>(t)] =
          beta_start + (beta_end - beta_start) * static_cast<double>(t) / (steps - 1);
  } else {
    // Improved-DDPM cosine law with offset s = 0.008, betas capped at 0.999.
    constexpr double offset = 0.008;
    auto f = [&](double u) {
      const double c = std::cos((u + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int t = 0; t < steps; ++t) {
      const double a0 = f(static_cast<double>(t) / steps);
      const double a1 = f(static_cast<double>(t + 1) / steps);
      betas[static_cast<std::size_t>(t)] = std::min(1.0 - a1 / a0, 0.999);
    }
  }
  NoiseSchedule s = schedule_from_betas(std::move(betas), kind);
  if (kind == ScheduleKind::linear) {
    s.beta_start = beta_start;
    s.beta_end = beta_end;
  }
  return s;
}

torch::Tensor diffuse_closed_form(const torch::Tensor& x0, const torch::Tensor& noise,
                                  double alpha_bar) {
  if (!x0.sizes().equals(noise.sizes()))
    throw InputError("forward_diffuse: x0 and noise shapes differ");
  if (alpha_bar == 1.0) return x0.clone();
  return std::sqrt(alpha_bar) * x0 + std::sqrt(1.0 - alpha_bar) * noise;
}

LatentState forward_diffuse(const torch::Tensor& x0, int t, const torch::Tensor& noise,
                            const NoiseSchedule& schedule) {
  if (t < 0 || t >= schedule.steps)
    throw InputError("forward_diffuse: t=" + std::to_string(t) + " outside [0, " +
                     std::to_string(schedule.steps) + ")");
  return LatentState{diffuse_closed_form(x0, noise, schedule.alpha_bar(t)), t, 0};
}

std::vector<int> sampling_timesteps(int schedule_steps, int sampler_steps) {
  if (sampler_steps < 1 || sampler_steps > schedule_steps)
    throw ConfigError("sampler steps must lie in [1, " + std::to_string(schedule_steps) + "]");
  std::vector<int> ts;
  ts.reserve(static_cast<std::size_t>(sampler_steps));
  if (sampler_steps == 1) return {schedule_steps - 1};
  for (int i = 0; i < sampler_steps; ++i) {
    const double frac = static_cast<double>(i) / (sampler_steps - 1);
    ts.push_back(static_cast<int>(std::lround((schedule_steps - 1) * (1.0 - frac))));
  }
  return ts;
}

}  // namespace dumo
