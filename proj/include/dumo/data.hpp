#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dumo/epr.hpp"
#include "dumo/evaluation.hpp"
#include "dumo/unet.hpp"

namespace dumo {

enum class ConceptFamily { stripes, checker, disk, square };

ConceptFamily parse_family(std::string_view name);
std::string to_string(ConceptFamily f);

/// Colour ranges per channel, in [-1, 1].
struct Palette {
  double fg_lo = 0.1, fg_hi = 0.9;
  double bg_lo = -0.9, bg_hi = -0.1;
};

/// One synthetic concept. Texture families are high-frequency and fill the whole
/// frame; shape families are a single smooth object on a flat background.
struct SyntheticConceptSpec {
  int concept_id = 1;
  std::string name;
  ConceptFamily family = ConceptFamily::stripes;
  int texture_period = 4;  // pixels; 0 for smooth families
  Palette palette;
  int count = 2000;
  std::uint64_t seed = 0;
  FinetuneStrategy default_strategy = FinetuneStrategy::cross_attention_only;
};

Json to_json(const SyntheticConceptSpec& s);
SyntheticConceptSpec concept_spec_from_json(const Json& j);

struct WorldConfig {
  int resolution = 32;
  int per_concept = 2000;
  double heldout_fraction = 0.1;
  std::uint64_t seed = 0;
};

/// stripes, checker (style-like) and disk, square (object-like), ids 1..4.
std::vector<SyntheticConceptSpec> default_world(const WorldConfig& cfg);

/// Renders sample `index` of a concept; depends only on (spec, index, resolution).
torch::Tensor render_concept_sample(const SyntheticConceptSpec& spec, int index, int resolution);

struct Dataset {
  torch::Tensor images;   // [N, 3, R, R] float32 in [-1, 1]
  torch::Tensor labels;   // [N] int64 concept ids
  torch::Tensor heldout;  // [N] bool
  int resolution = 0;
  std::vector<SyntheticConceptSpec> specs;
  double heldout_fraction = 0.0;

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
  Dataset split(bool heldout_part) const;
  Json manifest() const;
};

/// Deterministic from the specs. The last ceil(fraction * count) samples of each
/// concept are held out.
Dataset generate_dataset(const std::vector<SyntheticConceptSpec>& specs, int resolution,
                         double heldout_fraction);

void save_dataset(const Dataset& d, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Writes a contact sheet of the first `per_concept` images of each concept.
void save_dataset_preview(const Dataset& d, const std::filesystem::path& png, int per_concept = 8);

struct BaseTrainConfig {
  int steps = 4000;
  int batch_size = 64;
  double learning_rate = 2e-3;
  double class_dropout = 0.1;  // probability of training on the empty concept
  double ema_decay = 0.999;    // 0 disables the moving average
  int warmup_steps = 200;
  std::uint64_t seed = 0;

  void validate() const;
};

Json to_json(const BaseTrainConfig& c);

struct LossPoint {
  int step = 0;
  double loss = 0.0;
};

struct BaseTrainResult {
  BaseUNet model{nullptr};
  std::vector<LossPoint> trace;
};

/// Trains a fresh base model with the standard noise-prediction objective on the
/// training split. The returned model is the EMA copy when ema_decay > 0.
BaseTrainResult train_base(const Dataset& data, const ArchConfig& arch, const NoiseSchedule& schedule,
                           const BaseTrainConfig& cfg);

struct ClassifierTrainConfig {
  int steps = 600;
  int batch_size = 64;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;
  bool permute_labels = false;  // sanity control: trains on shuffled labels
  double noise_augment = 0.2;   // per-image gaussian noise std drawn from U(0, noise_augment)
  double colour_jitter = 0.2;   // per-channel offset drawn from U(-colour_jitter, colour_jitter)
  double contrast_jitter = 0.6; // per-image contrast gain drawn from U(1 - contrast_jitter, 1)

  void validate() const;
};

Json to_json(const ClassifierTrainConfig& c);

struct ClassifierTrainResult {
  ConceptClassifier classifier{nullptr};
  std::vector<LossPoint> trace;
  double heldout_accuracy = 0.0;
  torch::Tensor confusion;  // [K, K] int64, rows true class, columns prediction
  std::vector<double> false_positive_floor;  // per concept, rate on other concepts' held-out images
};

ClassifierTrainResult train_classifier(const Dataset& data, const ClassifierTrainConfig& cfg);

/// Median of consecutive windows, first vs last; used as a loss-trend check.
bool windowed_median_decreasing(const std::vector<double>& values, std::size_t window);

void write_loss_points_csv(const std::filesystem::path& path, const std::vector<LossPoint>& trace);

}  // namespace dumo
