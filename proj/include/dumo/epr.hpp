#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dumo/modulation.hpp"
#include "dumo/unet.hpp"

namespace dumo {

enum class FinetuneStrategy { cross_attention_only, full };

FinetuneStrategy parse_strategy(std::string_view name);
std::string to_string(FinetuneStrategy s);

/// Eraser with prior knowledge: a trainable copy of the base encoder whose taps
/// pass through zero-initialized, channel-preserving 1x1 projections.
struct EPRModuleImpl : torch::nn::Module {
  EPRModuleImpl(const ArchConfig& arch, FinetuneStrategy strategy, Condition target);

  /// Projected encoder-copy taps, deep -> shallow.
  SkipFeatureSet forward(const torch::Tensor& z, const torch::Tensor& timesteps,
                         const torch::Tensor& context);

  /// Parameter names the strategy allows to change (all zero-convs plus either
  /// the encoder's cross-attention or the whole encoder).
  std::vector<std::string> trainable_names() const;
  std::vector<torch::Tensor> trainable_parameters();
  /// Marks exactly the strategy's parameters as requiring gradients.
  void apply_trainable_mask();

  int skip_count() const { return static_cast<int>(zero_convs->size()); }

  ArchConfig arch;
  FinetuneStrategy strategy;
  Condition target;
  std::string base_checksum;
  UNetEncoder encoder{nullptr};
  torch::nn::ModuleList zero_convs;  // index l - 1
};
TORCH_MODULE(EPRModule);

/// Copies the base encoder bit-exactly and zeroes every projection.
EPRModule init_epr(const BaseUNet& model, FinetuneStrategy strategy, const Condition& target);

/// S^{t,l} for every layer. Throws InternalError if the copy's taps drift from
/// the base model's declared shapes.
SkipFeatureSet epr_forward(const EPRModule& epr, const BaseUNet& model, const LatentState& state,
                           const Condition& cond);

/// One adapter's per-layer features with optional per-layer scales [L] and an
/// optional layer activity mask (empty = every layer active).
struct SkipContribution {
  SkipFeatureSet features;
  torch::Tensor scales;
  std::vector<bool> active;
};

/// Per layer: x + s_1 * S_1 + s_2 * S_2 + ..., accumulated left to right in list
/// order. Missing scales count as 1 and skip the multiply.
SkipFeatureSet combine_skip(const SkipFeatureSet& original,
                            std::span<const SkipContribution> contributions);

/// Where an adapter may act. `std::nullopt` means unrestricted.
struct ApplyMask {
  std::optional<std::vector<int>> layers;                     // 1-based
  std::optional<std::vector<std::pair<int, int>>> timesteps;  // half-open ranges

  bool active_at(int t) const;
  bool layer_active(int l) const;
  static ApplyMask nothing() { return {std::vector<int>{}, std::vector<std::pair<int, int>>{}}; }
};

struct AdapterEntry {
  EPRModule epr{nullptr};
  std::optional<ModulationFactors> modulation;
  ApplyMask mask;
};

/// Ordered EPR modules (each optionally modulated) attached to one base model.
/// Contributions are summed in stack order.
class AdapterStack : public SkipAdapter {
 public:
  AdapterStack() = default;
  explicit AdapterStack(std::vector<AdapterEntry> entries);

  void push(AdapterEntry entry);
  const std::vector<AdapterEntry>& entries() const { return entries_; }
  std::vector<AdapterEntry>& entries() { return entries_; }
  bool empty() const { return entries_.empty(); }

  int layer_count() const override;
  SkipFeatureSet apply(const SkipFeatureSet& original, const torch::Tensor& z, int t,
                       const torch::Tensor& context, AdapterTrace* trace) const override;

 private:
  std::vector<AdapterEntry> entries_;
};

void save_epr(const EPRModule& epr, const std::filesystem::path& path,
              const Json& extra_metadata = Json::object());
/// Refuses (PreconditionError) when the recorded base checksum differs from `model`.
EPRModule load_epr(const std::filesystem::path& path, const BaseUNet& model);

}  // namespace dumo
