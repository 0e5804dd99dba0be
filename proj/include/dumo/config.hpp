#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dumo/analysis.hpp"
#include "dumo/data.hpp"
#include "dumo/erase.hpp"
#include "dumo/evaluation.hpp"
#include "dumo/tlmo.hpp"

namespace dumo {

/// Parses TOML text into JSON. Throws ConfigError with the source position on failure.
Json parse_toml(const std::string& text, const std::string& source = "<string>");
Json load_toml(const std::filesystem::path& path);

/// Recursive object merge; `overlay` wins on conflicts.
Json merge_json(Json base, const Json& overlay);

/// Applies "section.key=value"; the value is read as a TOML value, falling back to a string.
void apply_override(Json& cfg, const std::string& assignment);

/// Every knob of the pipeline. Section seeds default to values derived from `seed`.
struct PipelineConfig {
  std::uint64_t seed = 7;
  WorldConfig world;
  ArchConfig arch;
  int schedule_steps = 1000;
  ScheduleKind schedule_kind = ScheduleKind::linear;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  BaseTrainConfig base;
  ClassifierTrainConfig classifier;

  std::string target = "stripes";
  std::optional<FinetuneStrategy> strategy;  // nullopt: the concept's default
  EraseConfig erase;
  TLMOConfig tlmo;
  int tlmo_groups = 20;

  EvalProtocol eval;
  PerceptualConfig perceptual;
  std::uint64_t calibration_seed = 99;

  std::vector<int> layer_group_sizes;  // empty: default scheme for L
  int timestep_groups = 4;
  int ablation_seeds = 8;
  double cutoff = 0.15;

  NoiseSchedule schedule() const;
  GroupScheme scheme() const;
  std::vector<SyntheticConceptSpec> concepts() const;
  SyntheticConceptSpec concept_named(const std::string& name) const;
  Condition condition(const std::string& name) const;
  FinetuneStrategy strategy_for(const std::string& name) const;
  /// Protocol with `target` erased and every other concept retained.
  EvalProtocol protocol() const;
};

/// Strict: unknown sections or keys raise ConfigError.
PipelineConfig pipeline_from_json(const Json& j);
Json to_json(const PipelineConfig& c);

/// Preset overlays; section seeds stay derived from the top-level seed.
Json reference_preset();
Json smoke_preset();

/// Desk-scale reference world: 16x16 images, channels (16, 32, 32).
PipelineConfig reference_config();
/// Smallest configuration that still exercises every stage.
PipelineConfig smoke_config();

}  // namespace dumo
