#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "dumo/erase.hpp"
#include "dumo/modulation.hpp"

namespace dumo {

/// Which factors are free during stage 2. `timestep_only` ties every layer of a
/// timestep group together; `layer_only` ties every timestep group of a layer.
enum class ModulationMode { combined, timestep_only, layer_only };

ModulationMode parse_modulation_mode(std::string_view name);
std::string to_string(ModulationMode mode);

struct TLMOConfig {
  double lambda = 1.0;  // preservation weight
  double eta = 1.0;
  int steps = 200;
  double learning_rate = 1e-2;
  int batch_size = 4;
  std::optional<std::pair<int, int>> t_range;
  std::uint64_t seed = 0;
  SamplerConfig sampler{20, true};
  ModulationMode mode = ModulationMode::combined;

  void validate() const;
};

Json to_json(const TLMOConfig& cfg);

/// Mean squared gap between the modulated and the frozen model on the empty concept.
torch::Tensor preservation_loss_tensor(const torch::Tensor& eps_adapted_null, const torch::Tensor& eps_null_frozen);
double preservation_loss(const torch::Tensor& eps_adapted_null, const torch::Tensor& eps_null_frozen);
torch::Tensor preservation_loss_grad(const torch::Tensor& eps_adapted_null, const torch::Tensor& eps_null_frozen);

/// Stage-2 erasing loss; same form as the stage-1 loss with a modulated adapter.
torch::Tensor era2_loss_tensor(const torch::Tensor& eps_adapted, const torch::Tensor& eps_era_frozen,
                               const torch::Tensor& eps_null_frozen, double eta);
double era2_loss(const torch::Tensor& eps_adapted, const torch::Tensor& eps_era_frozen,
                 const torch::Tensor& eps_null_frozen, double eta);

double tlmo_total_loss(double era2, double pre, double lambda);
torch::Tensor tlmo_total_loss(const torch::Tensor& era2, const torch::Tensor& pre, double lambda);

struct TLMORecord {
  int step = 0;
  double era2 = 0.0;
  double pre = 0.0;
  double total = 0.0;
  int t = 0;
};

struct TLMOResult {
  ModulationFactors factors;
  std::vector<TLMORecord> trace;
  std::string epr_checksum_before;
  std::string epr_checksum_after;
  std::string base_checksum_before;
  std::string base_checksum_after;
};

/// Differentiable stage-2 objective at one latent pair, for a given grid tensor.
/// Exposed so gradient checks can drive it directly.
struct TLMOLossTerms {
  torch::Tensor era2;
  torch::Tensor pre;
  torch::Tensor total;
};
TLMOLossTerms tlmo_objective(const BaseUNet& model, const EPRModule& epr, const ModulationFactors& m,
                             const LatentState& target_latent, const LatentState& null_latent,
                             double eta, double lambda);

/// Learns the grid with EPR and base frozen; factors are clamped at 0 after each step.
TLMOResult run_tlmo(const BaseUNet& model, const EPRModule& epr, const ModulationFactors& init,
                    const TLMOConfig& cfg, const std::filesystem::path& dump_dir = {});

/// Every contribution scaled by its own grid row at t, summed in list order.
SkipFeatureSet modulated_combine(const SkipFeatureSet& original, std::span<const SkipFeatureSet> contributions,
                                 std::span<const ModulationFactors> factors, int t);

void write_tlmo_csv(const std::filesystem::path& path, const std::vector<TLMORecord>& trace);
void save_modulation(const ModulationFactors& m, const std::filesystem::path& path, const Json& extra = Json::object());
ModulationFactors load_modulation(const std::filesystem::path& path);

}  // namespace dumo
