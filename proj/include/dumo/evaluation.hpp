#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dumo/sampler.hpp"

namespace dumo {

/// LPIPS-proxy: seed-pinned random multi-scale conv features, unit-normalised
/// along channels, squared differences averaged spatially, summed over channels
/// and averaged over scales. Divided by a calibration scale and clipped to [0, 1].
struct PerceptualConfig {
  std::uint64_t seed = 20240;
  std::vector<int> channels{16, 24, 32};  // one conv layer per scale
  double calibration = 1.0;               // raw distance mapped to 1.0
};

class PerceptualMetric {
 public:
  explicit PerceptualMetric(PerceptualConfig cfg = {});

  /// Uncalibrated distance of image pairs [N,3,H,W] x [N,3,H,W] -> [N] float64.
  torch::Tensor raw_distances(const torch::Tensor& a, const torch::Tensor& b) const;
  torch::Tensor distances(const torch::Tensor& a, const torch::Tensor& b) const;
  double distance(const torch::Tensor& a, const torch::Tensor& b) const;

  /// Sets the calibration scale to the mean raw distance between `images` and
  /// uniform noise drawn from `noise_seed`.
  void calibrate(const torch::Tensor& images, std::uint64_t noise_seed);

  const PerceptualConfig& config() const { return cfg_; }
  Json to_json() const;
  static PerceptualMetric from_json(const Json& j);

 private:
  std::vector<torch::Tensor> features(const torch::Tensor& x) const;

  PerceptualConfig cfg_;
  std::vector<torch::Tensor> weights_;
  std::vector<torch::Tensor> biases_;
};

/// Small CNN over concept labels 1..K. Its penultimate activations are the image
/// embedding and the rows of the final layer act as concept prototypes.
struct ConceptClassifierImpl : torch::nn::Module {
  ConceptClassifierImpl(int num_concepts, int resolution);

  torch::Tensor features(const torch::Tensor& x);
  torch::Tensor forward(const torch::Tensor& x);
  /// Predicted concept ids (1..K), [N] int64.
  torch::Tensor predict(const torch::Tensor& x);
  torch::Tensor prototype(int concept_id) const;

  int num_concepts;
  int resolution;
  torch::nn::Conv2d c1{nullptr}, c2{nullptr}, c3{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(ConceptClassifier);

ConceptClassifier make_classifier(int num_concepts, int resolution, std::uint64_t seed);
void save_classifier(const ConceptClassifier& clf, const std::filesystem::path& path, const Json& extra = Json::object());
ConceptClassifier load_classifier(const std::filesystem::path& path);

/// Per-pair distances of index-aligned sets. Throws InputError on length mismatch.
std::vector<double> lpips_sets(const PerceptualMetric& metric, const torch::Tensor& before, const torch::Tensor& after);

double mean(const std::vector<double>& v);

/// Mean of concept-level means of `erased` minus the same over `retained`.
double lpips_da(const std::vector<std::vector<double>>& erased, const std::vector<std::vector<double>>& retained);

/// Fraction of images the classifier assigns to `target_id`. Throws on an empty set.
double erasure_rate(const ConceptClassifier& clf, const torch::Tensor& images, int target_id);

double cosine_similarity(const torch::Tensor& a, const torch::Tensor& b);

/// Mean cosine between each image embedding and the concept prototype.
double alignment_score(const torch::Tensor& embeddings, const torch::Tensor& prototype);
double alignment_score(const ConceptClassifier& clf, const torch::Tensor& images, int concept_id);

/// Generation protocol: concept c, template k, seed j uses sampling seed
/// mix_seed(mix_seed(base_seed, c), k * seeds_per_template + j).
struct EvalProtocol {
  std::vector<int> erased;
  std::vector<int> retained;
  std::map<int, std::string> names;
  int templates_erased = 40;
  int templates_retained = 10;
  int seeds_per_template = 5;
  std::uint64_t base_seed = 2024;
  SamplerConfig sampler{20, true};
  double admissibility = 0.9;
  int batch = 50;

  int templates_for(int concept_id) const;
  std::vector<std::uint64_t> seeds_for(int concept_id) const;
  std::vector<int> concepts() const;
  void validate() const;
};

Json to_json(const EvalProtocol& p);
EvalProtocol protocol_from_json(const Json& j);

/// Images per concept id, generated in protocol seed order.
using GenerationSet = std::map<int, torch::Tensor>;

GenerationSet generate_protocol_images(const BaseUNet& model, const SkipAdapter* adapters, const EvalProtocol& p);

struct ConceptReport {
  int id = 0;
  std::string name;
  std::string role;  // "erased" or "retained"
  int n = 0;
  double base_detection = 0.0;     // classifier rate for this concept on base images
  double adapted_detection = 0.0;  // same on the evaluated images
  double lpips_mean = 0.0;
  double alignment = 0.0;
  std::vector<double> lpips;       // per pair, protocol order
};

struct EvalReport {
  std::string metric_label = "LPIPS-proxy";
  std::vector<ConceptReport> concepts;
  std::vector<double> lpips_e;  // concept means, erased concepts
  std::vector<double> lpips_u;  // concept means, retained concepts
  double lpips_da = 0.0;
  double erasure_rate = 0.0;  // mean adapted detection over erased concepts
  Json manifest;

  Json to_json() const;
  void write(const std::filesystem::path& json_path, const std::filesystem::path& csv_path) const;
};

/// Refuses (PreconditionError) when any concept's base detection is below the gate.
void check_admissible(const EvalProtocol& p, const ConceptClassifier& clf, const GenerationSet& base);

EvalReport evaluate_sets(const EvalProtocol& p, const ConceptClassifier& clf, const PerceptualMetric& metric,
                         const GenerationSet& base, const GenerationSet& adapted);

EvalReport run_eval(const BaseUNet& model, const SkipAdapter* adapters, const EvalProtocol& p,
                    const ConceptClassifier& clf, const PerceptualMetric& metric);

}  // namespace dumo
