#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dumo/epr.hpp"
#include "dumo/evaluation.hpp"
#include "dumo/modulation.hpp"
#include "dumo/sampler.hpp"

namespace dumo {

/// Partition of skip layers (deepest group first) and timesteps (highest t first,
/// i.e. earliest in denoising). Timestep groups are half-open [begin, end).
struct GroupScheme {
  std::vector<std::vector<int>> layer_groups;
  std::vector<std::pair<int, int>> timestep_groups;

  void validate(int layers, int steps) const;
  int layer_group_of(int l) const;
  int timestep_group_of(int t) const;
};

/// Consecutive layer groups of the given sizes, deep to shallow, plus `timestep_groups`
/// equal groups ordered from high t to low t.
GroupScheme make_group_scheme(const std::vector<int>& layer_sizes, int steps, int timestep_groups = 4);

/// (1,3,1,8) for 13 layers, (1,2,1,3) for 7, otherwise a floor split into min(4, L) groups.
GroupScheme default_group_scheme(int layers, int steps);

Json to_json(const GroupScheme& s);
GroupScheme group_scheme_from_json(const Json& j);

/// Where an EPR contribution is allowed: a set of layers and a set of half-open
/// timestep ranges. Empty sets mean "nowhere".
struct AblationMask {
  std::vector<int> active_layers;
  std::vector<std::pair<int, int>> active_timesteps;

  static AblationMask none();
  static AblationMask all(int layers, int steps);
  static AblationMask layer_group(const GroupScheme& s, int g, int steps);
  static AblationMask timestep_group(const GroupScheme& s, int g, int layers);

  void validate(int layers, int steps) const;
  ApplyMask to_apply_mask() const;
};

struct FrequencyProfile {
  double low_energy = 0.0;
  double high_energy = 0.0;
  double cutoff = 0.0;
  double total() const { return low_energy + high_energy; }
};

struct FrequencySplit {
  torch::Tensor low;
  torch::Tensor high;
  FrequencyProfile profile;
};

/// Radial Fourier split over the last two dimensions. Frequencies are in cycles
/// per pixel; |f| <= cutoff is low. Energies are sums of squares in image space.
FrequencySplit frequency_split(const torch::Tensor& image, double cutoff = 0.15);

/// Samples with one EPR (optionally modulated) restricted to `mask`.
torch::Tensor ablate_generate(const BaseUNet& model, const EPRModule& epr, const std::optional<ModulationFactors>& m,
                              const AblationMask& mask, const Condition& cond, std::span<const std::uint64_t> seeds,
                              const SamplerConfig& sampler);

struct GroupEffectRow {
  std::string group_id;
  double low_delta = 0.0;         // mean per-pixel low-band energy of (ablated - base)
  double high_delta = 0.0;        // same, high band
  double perceptual_delta = 0.0;  // mean LPIPS-proxy vs base
  int n = 0;
};

struct GroupEffectReport {
  std::vector<GroupEffectRow> layer_rows;     // one per layer group, deep to shallow
  std::vector<GroupEffectRow> timestep_rows;  // one per timestep group, high t first
  GroupEffectRow full;
  GroupEffectRow layer_residual;     // sum of layer rows minus full
  GroupEffectRow timestep_residual;  // sum of timestep rows minus full
  double cutoff = 0.15;

  std::vector<GroupEffectRow> rows() const;
  void write_csv(const std::filesystem::path& path) const;
  void plot(const std::filesystem::path& png) const;
  Json to_json() const;
};

struct GroupEffectConfig {
  std::vector<Condition> prompts;
  int seeds_per_prompt = 8;
  std::uint64_t seed = 2024;
  SamplerConfig sampler{20, true};
  double cutoff = 0.15;
  bool timestep_groups = true;
};

GroupEffectReport group_effect_report(const BaseUNet& model, const EPRModule& epr,
                                      const std::optional<ModulationFactors>& m, const GroupScheme& scheme,
                                      const PerceptualMetric& metric, const GroupEffectConfig& cfg);

/// Display aggregation of a modulation grid onto a group scheme.
struct HeatmapSummary {
  std::vector<std::vector<double>> averages;  // [timestep group][layer group]
  std::vector<std::vector<std::string>> marks;  // "**" largest, "*" second largest
  std::vector<std::pair<int, int>> zero_groups;  // (timestep group, layer group) with average 0
  Json to_json() const;
};

/// Means of lookup_factor over each (timestep group, layer group) block, accumulated
/// with t ascending in the outer loop and l ascending in the inner loop.
HeatmapSummary summarise_modulation(const ModulationFactors& m, const GroupScheme& scheme);

/// Writes the heatmap PNG and a JSON sidecar (`png` with .json appended).
HeatmapSummary render_modulation_heatmap(const ModulationFactors& m, const GroupScheme& scheme,
                                         const std::filesystem::path& png);

}  // namespace dumo
