#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "dumo/archive.hpp"
#include "dumo/schedule.hpp"

namespace dumo {

/// Architecture of the toy conditional U-Net.
///
/// The encoder emits one skip tap per block: conv_in, every residual block, and
/// every downsample. With S stages that is L = S + sum(res_blocks) taps, and the
/// decoder consumes exactly that many (res_blocks[s] + 1 per stage). Taps are
/// indexed l = 1 (deepest) .. L (shallowest).
struct ArchConfig {
  int image_channels = 3;
  int resolution = 32;
  std::vector<int> channels{32, 64, 64};
  std::vector<int> res_blocks{1, 1, 2};
  std::vector<bool> attention{false, true, true};
  int context_tokens = 4;
  int context_dim = 32;
  int time_dim = 64;
  int norm_groups = 8;
  int num_concepts = 4;  // excluding the empty concept, which takes id 0

  int stages() const { return static_cast<int>(channels.size()); }
  int skip_count() const;
  void validate() const;
};

Json to_json(const ArchConfig& arch);
ArchConfig arch_from_json(const Json& j);

struct TapShape {
  int channels = 0;
  int size = 0;
  std::string source;  // producing encoder block, e.g. "enc.3.res"
  bool operator==(const TapShape&) const = default;
};

/// Per-tap shapes ordered deep -> shallow, derived from the config alone.
std::vector<TapShape> tap_shapes(const ArchConfig& arch);

/// A prompt. Id 0 is the reserved empty concept; ids 1..num_concepts are concepts.
struct Condition {
  int id = 0;
  std::string name;

  static Condition empty() { return {0, ""}; }
};

/// L skip tensors, index 0 holding layer l = 1 (deepest).
struct SkipFeatureSet {
  std::vector<torch::Tensor> features;

  std::size_t size() const { return features.size(); }
  const torch::Tensor& layer(int l) const { return features.at(static_cast<std::size_t>(l - 1)); }
  torch::Tensor& layer(int l) { return features.at(static_cast<std::size_t>(l - 1)); }
};

/// One (t, l) application of an adapter contribution during a forward pass.
struct AdapterApplication {
  int t = 0;
  int layer = 0;
  int adapter = 0;
  double scale = 1.0;
};

using AdapterTrace = std::vector<AdapterApplication>;

/// Hook that rewrites skip features between encoder and decoder. Implementations
/// only see the skip taps; the backbone path is not exposed.
class SkipAdapter {
 public:
  virtual ~SkipAdapter() = default;
  virtual int layer_count() const = 0;
  /// `context` is the conditioning sequence [B, tokens, dim] of the prompt.
  virtual SkipFeatureSet apply(const SkipFeatureSet& original, const torch::Tensor& z, int t,
                               const torch::Tensor& context, AdapterTrace* trace) const = 0;
};

struct ResBlockImpl : torch::nn::Module {
  ResBlockImpl(int in, int out, int time_dim, int groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::Linear time_proj{nullptr};
  torch::nn::Conv2d shortcut{nullptr};
};
TORCH_MODULE(ResBlock);

/// Single-head cross-attention from image tokens to the prompt context.
struct CrossAttentionImpl : torch::nn::Module {
  CrossAttentionImpl(int channels, int context_dim, int groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_out{nullptr};
};
TORCH_MODULE(CrossAttention);

/// Encoder block producing one skip tap: conv_in, res (+ optional xattn) or down.
struct EncoderBlockImpl : torch::nn::Module {
  enum class Kind { conv_in, res, down };
  EncoderBlockImpl(Kind kind, int in, int out, bool attention, const ArchConfig& arch);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb,
                        const torch::Tensor& context);

  Kind kind;
  torch::nn::Conv2d conv{nullptr};
  ResBlock res{nullptr};
  CrossAttention xattn{nullptr};
};
TORCH_MODULE(EncoderBlock);

/// Time embedding MLP plus the tap-producing encoder blocks. Copied verbatim by EPR.
struct UNetEncoderImpl : torch::nn::Module {
  explicit UNetEncoderImpl(const ArchConfig& arch);

  struct Output {
    std::vector<torch::Tensor> taps;  // encoder order (shallow -> deep)
    torch::Tensor temb;
  };
  Output forward(const torch::Tensor& z, const torch::Tensor& timesteps,
                 const torch::Tensor& context);

  ArchConfig arch;
  torch::nn::Linear time_fc1{nullptr}, time_fc2{nullptr};
  torch::nn::ModuleList blocks;
};
TORCH_MODULE(UNetEncoder);

struct DecoderBlockImpl : torch::nn::Module {
  DecoderBlockImpl(int in, int skip, int out, bool attention, const ArchConfig& arch);
  torch::Tensor forward(const torch::Tensor& h, const torch::Tensor& skip,
                        const torch::Tensor& temb, const torch::Tensor& context);

  ResBlock res{nullptr};
  CrossAttention xattn{nullptr};
};
TORCH_MODULE(DecoderBlock);

/// Sinusoidal embedding of integer timesteps, [B] -> [B, dim].
torch::Tensor timestep_embedding(const torch::Tensor& timesteps, int dim);

/// Class-conditional epsilon-prediction U-Net with tapped skip connections.
struct BaseUNetImpl : torch::nn::Module {
  BaseUNetImpl(ArchConfig arch, NoiseSchedule schedule);

  /// Prompt context [B, tokens, dim] for integer concept ids [B].
  torch::Tensor context(const torch::Tensor& concept_ids);
  torch::Tensor context(const Condition& cond, std::int64_t batch);

  UNetEncoderImpl::Output encode(const torch::Tensor& z, const torch::Tensor& timesteps,
                                 const torch::Tensor& context);
  /// Skip taps of an encoder pass, reordered deep -> shallow.
  static SkipFeatureSet skips_of(const UNetEncoderImpl::Output& pass);
  /// Runs middle + decoder. The backbone input is the unmodified deepest encoder
  /// output; `skips` only feed the concatenation points.
  torch::Tensor decode(const UNetEncoderImpl::Output& pass, const SkipFeatureSet& skips,
                       const torch::Tensor& context);

  /// Full pass with per-sample timesteps and no adapters (used by base training).
  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& timesteps,
                        const torch::Tensor& context);

  const ArchConfig& arch() const { return arch_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  int skip_count() const { return arch_.skip_count(); }

  ArchConfig arch_;
  NoiseSchedule schedule_;
  torch::nn::Embedding embedding{nullptr};
  UNetEncoder encoder{nullptr};
  ResBlock mid1{nullptr}, mid2{nullptr};
  CrossAttention mid_attn{nullptr};
  torch::nn::ModuleList decoder_blocks;
  torch::nn::ModuleList upsamplers;
  torch::nn::GroupNorm out_norm{nullptr};
  torch::nn::Conv2d out_conv{nullptr};
};
TORCH_MODULE(BaseUNet);

/// Builds a freshly initialized model; parameters depend only on `seed`.
BaseUNet make_base_unet(const ArchConfig& arch, const NoiseSchedule& schedule,
                        std::uint64_t seed, torch::Dtype dtype = torch::kFloat32);

/// Epsilon prediction at a single timestep. Throws ConfigError when the adapter's
/// layer count differs from the model's.
torch::Tensor predict_noise(const BaseUNet& model, const LatentState& state,
                            const Condition& cond, const SkipAdapter* adapters = nullptr,
                            AdapterTrace* trace = nullptr);

/// The L encoder taps x_t^l consumed by the decoder in the same pass.
SkipFeatureSet collect_skip_features(const BaseUNet& model, const LatentState& state,
                                     const Condition& cond);

/// True for parameter names that live inside a cross-attention block.
bool is_cross_attention_parameter(const std::string& name);

void save_base_unet(const BaseUNet& model, const std::filesystem::path& path,
                    const Json& extra_metadata = Json::object());
BaseUNet load_base_unet(const std::filesystem::path& path);

}  // namespace dumo
