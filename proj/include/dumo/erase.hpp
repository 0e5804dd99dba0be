#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "dumo/epr.hpp"
#include "dumo/sampler.hpp"

namespace dumo {

/// Stage-1 erasure settings.
struct EraseConfig {
  double eta = 1.0;             // erasure strength
  int steps = 200;
  double learning_rate = 1e-4;
  int batch_size = 4;
  /// Inclusive range t is drawn from; nullopt = [0, T-1].
  std::optional<std::pair<int, int>> t_range;
  std::uint64_t seed = 0;
  SamplerConfig sampler{20, true};
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

Json to_json(const EraseConfig& cfg);

struct LossBreakdown {
  double total = 0.0;           // mean squared residual
  double residual_norm = 0.0;   // ||eps_adapted - target||_2
  double guidance_norm = 0.0;   // ||eps_era - eps_null||_2
  int t = -1;
  int target_concept = -1;
  int anchor_concept = 0;
};

/// eps_null - eta * (eps_era - eps_null): the negatively guided regression target.
torch::Tensor erase_target(const torch::Tensor& eps_era_frozen, const torch::Tensor& eps_null_frozen,
                           double eta);

/// Differentiable mean-squared erasing loss (mean over every element).
torch::Tensor erase_loss_tensor(const torch::Tensor& eps_adapted, const torch::Tensor& eps_era_frozen,
                                const torch::Tensor& eps_null_frozen, double eta);

LossBreakdown erase_loss(const torch::Tensor& eps_adapted, const torch::Tensor& eps_era_frozen,
                         const torch::Tensor& eps_null_frozen, double eta);

/// Closed-form gradient of erase_loss w.r.t. eps_adapted: 2 (eps_adapted - target) / N.
torch::Tensor erase_loss_grad(const torch::Tensor& eps_adapted, const torch::Tensor& eps_era_frozen,
                              const torch::Tensor& eps_null_frozen, double eta);

/// Uniform draw from the inclusive range, deterministic in `seed`.
int draw_training_timestep(std::uint64_t seed, std::pair<int, int> range);

std::pair<int, int> resolve_range(const std::optional<std::pair<int, int>>& range, int steps);

/// Partially denoised latent under `cond`: draws t uniformly, then runs the
/// frozen sampler from pure noise down to t.
LatentState sample_training_latent(const BaseUNet& model, const Condition& cond, std::uint64_t seed,
                                   const EraseConfig& cfg);

struct StepRecord {
  int step = 0;
  double total = 0.0;
  int t = 0;
  double lr = 0.0;
};

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepRecord>& trace);

struct FinetuneResult {
  std::vector<StepRecord> trace;
  std::string base_checksum_before;
  std::string base_checksum_after;
};

/// Trains the strategy-selected EPR parameters on the erasing loss. Throws
/// NumericalError (after dumping the EPR state into `dump_dir`) on a non-finite loss.
FinetuneResult finetune_epr(const BaseUNet& model, EPRModule& epr, const EraseConfig& cfg,
                            const std::filesystem::path& dump_dir = {});

/// Mean erasing loss of an adapter stack over a fixed set of held-out latents.
double mean_erase_loss(const BaseUNet& model, const SkipAdapter* adapters, const Condition& target,
                       double eta, const std::vector<LatentState>& latents);

/// Baseline: copies the base model and fine-tunes its own cross-attention
/// parameters (encoder and decoder) on the same loss, with no adapter.
struct DirectFinetuneResult {
  BaseUNet model{nullptr};
  std::vector<StepRecord> trace;
};
DirectFinetuneResult finetune_direct(const BaseUNet& model, const Condition& target,
                                     const EraseConfig& cfg);

/// Deep copy of a base model (same architecture, schedule and parameter values).
BaseUNet clone_base(const BaseUNet& model);

}  // namespace dumo
