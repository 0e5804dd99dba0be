#include "dumo/unet.hpp"

#include <cmath>

#include "dumo/errors.hpp"

namespace dumo {

namespace F = torch::nn::functional;

int ArchConfig::skip_count() const {
  int n = stages();
  for (int r : res_blocks) n += r;
  return n;
}

void ArchConfig::validate() const {
  const auto s = channels.size();
  if (s == 0) throw ConfigError("architecture needs at least one stage");
  if (res_blocks.size() != s || attention.size() != s)
    throw ConfigError("channels, res_blocks and attention must have one entry per stage");
  if (image_channels < 1 || context_tokens < 1 || context_dim < 1 || time_dim < 1)
    throw ConfigError("architecture dimensions must be positive");
  if (num_concepts < 1) throw ConfigError("at least one concept is required");
  if (resolution % (1 << (s - 1)) != 0)
    throw ConfigError("resolution must be divisible by 2^(stages-1)");
  for (std::size_t i = 0; i < s; ++i) {
    if (res_blocks[i] < 1) throw ConfigError("every stage needs at least one residual block");
    if (channels[i] % norm_groups != 0)
      throw ConfigError("stage channels must be divisible by norm_groups");
  }
}

Json to_json(const ArchConfig& a) {
  return Json{{"image_channels", a.image_channels},
              {"resolution", a.resolution},
              {"channels", a.channels},
              {"res_blocks", a.res_blocks},
              {"attention", a.attention},
              {"context_tokens", a.context_tokens},
              {"context_dim", a.context_dim},
              {"time_dim", a.time_dim},
              {"norm_groups", a.norm_groups},
              {"num_concepts", a.num_concepts},
              {"skip_count", a.skip_count()},
              {"layer_order", "l=1 deepest .. l=L shallowest"}};
}

ArchConfig arch_from_json(const Json& j) {
  ArchConfig a;
  a.image_channels = j.at("image_channels").get<int>();
  a.resolution = j.at("resolution").get<int>();
  a.channels = j.at("channels").get<std::vector<int>>();
  a.res_blocks = j.at("res_blocks").get<std::vector<int>>();
  a.attention = j.at("attention").get<std::vector<bool>>();
  a.context_tokens = j.at("context_tokens").get<int>();
  a.context_dim = j.at("context_dim").get<int>();
  a.time_dim = j.at("time_dim").get<int>();
  a.norm_groups = j.at("norm_groups").get<int>();
  a.num_concepts = j.at("num_concepts").get<int>();
  a.validate();
  return a;
}

std::vector<TapShape> tap_shapes(const ArchConfig& arch) {
  std::vector<TapShape> encoder_order;
  int size = arch.resolution;
  int block = 0;
  encoder_order.push_back({arch.channels[0], size, "enc." + std::to_string(block++) + ".conv_in"});
  for (int s = 0; s < arch.stages(); ++s) {
    for (int r = 0; r < arch.res_blocks[static_cast<std::size_t>(s)]; ++r)
      encoder_order.push_back(
          {arch.channels[static_cast<std::size_t>(s)], size, "enc." + std::to_string(block++) + ".res"});
    if (s + 1 < arch.stages()) {
      size /= 2;
      encoder_order.push_back(
          {arch.channels[static_cast<std::size_t>(s)], size, "enc." + std::to_string(block++) + ".down"});
    }
  }
  return {encoder_order.rbegin(), encoder_order.rend()};
}

// ---------------------------------------------------------------------------

ResBlockImpl::ResBlockImpl(int in, int out, int time_dim, int groups) {
  norm1 = register_module("norm1", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, in)));
  conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
  time_proj = register_module("time_proj", torch::nn::Linear(time_dim, out));
  norm2 = register_module("norm2", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, out)));
  conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1)));
  if (in != out)
    shortcut = register_module("shortcut", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1(F::silu(norm1(x)));
  h = h + time_proj(F::silu(temb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2(F::silu(norm2(h)));
  return (shortcut ? shortcut(x) : x) + h;
}

CrossAttentionImpl::CrossAttentionImpl(int channels, int context_dim, int groups) {
  norm = register_module("norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, channels)));
  to_q = register_module("to_q", torch::nn::Linear(torch::nn::LinearOptions(channels, channels).bias(false)));
  to_k = register_module("to_k", torch::nn::Linear(torch::nn::LinearOptions(context_dim, channels).bias(false)));
  to_v = register_module("to_v", torch::nn::Linear(torch::nn::LinearOptions(context_dim, channels).bias(false)));
  to_out = register_module("to_out", torch::nn::Linear(channels, channels));
}

torch::Tensor CrossAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto tokens = norm(x).flatten(2).transpose(1, 2);  // [B, HW, C]
  auto q = to_q(tokens);
  auto k = to_k(context);
  auto v = to_v(context);
  auto attn = torch::softmax(torch::bmm(q, k.transpose(1, 2)) / std::sqrt(static_cast<double>(c)), -1);
  auto out = to_out(torch::bmm(attn, v));
  return x + out.transpose(1, 2).reshape({b, c, h, w});
}

EncoderBlockImpl::EncoderBlockImpl(Kind k, int in, int out, bool attention, const ArchConfig& arch)
    : kind(k) {
  switch (kind) {
    case Kind::conv_in:
      conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
      break;
    case Kind::down:
      conv = register_module(
          "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(2).padding(1)));
      break;
    case Kind::res:
      res = register_module("res", ResBlock(in, out, arch.time_dim, arch.norm_groups));
      if (attention)
        xattn = register_module("xattn", CrossAttention(out, arch.context_dim, arch.norm_groups));
      break;
  }
}

torch::Tensor EncoderBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb,
                                        const torch::Tensor& context) {
  if (kind != Kind::res) return conv(x);
  auto h = res(x, temb);
  return xattn ? xattn(h, context) : h;
}

torch::Tensor timestep_embedding(const torch::Tensor& timesteps, int dim) {
  const int half = dim / 2;
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, opts) / half);
  auto args = timesteps.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
  if (dim % 2 == 1) emb = torch::cat({emb, torch::zeros({emb.size(0), 1}, opts)}, 1);
  return emb;
}

UNetEncoderImpl::UNetEncoderImpl(const ArchConfig& a) : arch(a) {
  arch.validate();
  time_fc1 = register_module("time_fc1", torch::nn::Linear(arch.channels[0], arch.time_dim));
  time_fc2 = register_module("time_fc2", torch::nn::Linear(arch.time_dim, arch.time_dim));
  blocks = register_module("blocks", torch::nn::ModuleList());
  using Kind = EncoderBlockImpl::Kind;
  int ch = arch.channels[0];
  blocks->push_back(EncoderBlock(Kind::conv_in, arch.image_channels, ch, false, arch));
  for (std::size_t s = 0; s < arch.channels.size(); ++s) {
    for (int r = 0; r < arch.res_blocks[s]; ++r) {
      blocks->push_back(EncoderBlock(Kind::res, ch, arch.channels[s], arch.attention[s], arch));
      ch = arch.channels[s];
    }
    if (s + 1 < arch.channels.size()) blocks->push_back(EncoderBlock(Kind::down, ch, ch, false, arch));
  }
}

UNetEncoderImpl::Output UNetEncoderImpl::forward(const torch::Tensor& z,
                                                 const torch::Tensor& timesteps,
                                                 const torch::Tensor& context) {
  Output out;
  auto emb = timestep_embedding(timesteps, arch.channels[0]).to(z.scalar_type());
  out.temb = time_fc2(F::silu(time_fc1(emb)));
  auto h = z;
  out.taps.reserve(blocks->size());
  for (const auto& m : *blocks) {
    h = m->as<EncoderBlockImpl>()->forward(h, out.temb, context);
    out.taps.push_back(h);
  }
  return out;
}

DecoderBlockImpl::DecoderBlockImpl(int in, int skip, int out, bool attention,
                                   const ArchConfig& arch) {
  res = register_module("res", ResBlock(in + skip, out, arch.time_dim, arch.norm_groups));
  if (attention) xattn = register_module("xattn", CrossAttention(out, arch.context_dim, arch.norm_groups));
}

torch::Tensor DecoderBlockImpl::forward(const torch::Tensor& h, const torch::Tensor& skip,
                                        const torch::Tensor& temb, const torch::Tensor& context) {
  auto y = res(torch::cat({h, skip}, 1), temb);
  return xattn ? xattn(y, context) : y;
}

// ---------------------------------------------------------------------------

BaseUNetImpl::BaseUNetImpl(ArchConfig a, NoiseSchedule sched)
    : arch_(std::move(a)), schedule_(std::move(sched)) {
  arch_.validate();
  validate(schedule_);
  embedding = register_module(
      "embedding", torch::nn::Embedding(arch_.num_concepts + 1, arch_.context_tokens * arch_.context_dim));
  encoder = register_module("encoder", UNetEncoder(arch_));

  const int deep = arch_.channels.back();
  mid1 = register_module("mid1", ResBlock(deep, deep, arch_.time_dim, arch_.norm_groups));
  mid_attn = register_module("mid_attn", CrossAttention(deep, arch_.context_dim, arch_.norm_groups));
  mid2 = register_module("mid2", ResBlock(deep, deep, arch_.time_dim, arch_.norm_groups));

  decoder_blocks = register_module("decoder", torch::nn::ModuleList());
  upsamplers = register_module("up", torch::nn::ModuleList());
  const auto taps = tap_shapes(arch_);
  std::size_t next_tap = 0;
  int ch = deep;
  for (int s = arch_.stages() - 1; s >= 0; --s) {
    const auto su = static_cast<std::size_t>(s);
    for (int r = 0; r <= arch_.res_blocks[su]; ++r) {
      const int skip_ch = taps.at(next_tap++).channels;
      decoder_blocks->push_back(DecoderBlock(ch, skip_ch, arch_.channels[su], arch_.attention[su], arch_));
      ch = arch_.channels[su];
    }
    if (s > 0)
      upsamplers->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch, 3).padding(1)));
  }
  out_norm = register_module("out_norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(arch_.norm_groups, ch)));
  out_conv = register_module("out_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, arch_.image_channels, 3).padding(1)));
}

torch::Tensor BaseUNetImpl::context(const torch::Tensor& concept_ids) {
  return embedding(concept_ids).view({concept_ids.size(0), arch_.context_tokens, arch_.context_dim});
}

torch::Tensor BaseUNetImpl::context(const Condition& cond, std::int64_t batch) {
  if (cond.id < 0 || cond.id > arch_.num_concepts)
    throw InputError("condition id " + std::to_string(cond.id) + " outside the model vocabulary");
  auto ids = torch::full({batch}, cond.id, torch::TensorOptions().dtype(torch::kInt64));
  return context(ids);
}

UNetEncoderImpl::Output BaseUNetImpl::encode(const torch::Tensor& z, const torch::Tensor& timesteps,
                                             const torch::Tensor& ctx) {
  return encoder->forward(z, timesteps, ctx);
}

SkipFeatureSet BaseUNetImpl::skips_of(const UNetEncoderImpl::Output& pass) {
  return SkipFeatureSet{{pass.taps.rbegin(), pass.taps.rend()}};
}

torch::Tensor BaseUNetImpl::decode(const UNetEncoderImpl::Output& pass, const SkipFeatureSet& skips,
                                   const torch::Tensor& ctx) {
  if (static_cast<int>(skips.size()) != skip_count())
    throw InternalError("decoder received " + std::to_string(skips.size()) + " skips, expected " +
                        std::to_string(skip_count()));
  auto h = mid2(mid_attn(mid1(pass.taps.back(), pass.temb), ctx), pass.temb);
  std::size_t next = 0;
  std::size_t up = 0;
  for (int s = arch_.stages() - 1; s >= 0; --s) {
    for (int r = 0; r <= arch_.res_blocks[static_cast<std::size_t>(s)]; ++r) {
      h = decoder_blocks[next]->as<DecoderBlockImpl>()->forward(h, skips.features[next], pass.temb, ctx);
      ++next;
    }
    if (s > 0) {
      h = F::interpolate(h, F::InterpolateFuncOptions()
                                .scale_factor(std::vector<double>{2.0, 2.0})
                                .mode(torch::kNearest));
      h = upsamplers[up++]->as<torch::nn::Conv2dImpl>()->forward(h);
    }
  }
  return out_conv(F::silu(out_norm(h)));
}

torch::Tensor BaseUNetImpl::forward(const torch::Tensor& z, const torch::Tensor& timesteps,
                                    const torch::Tensor& ctx) {
  auto pass = encode(z, timesteps, ctx);
  return decode(pass, skips_of(pass), ctx);
}

BaseUNet make_base_unet(const ArchConfig& arch, const NoiseSchedule& schedule, std::uint64_t seed,
                        torch::Dtype dtype) {
  torch::manual_seed(seed);
  BaseUNet model(arch, schedule);
  model->to(dtype);
  return model;
}

namespace {

void check_state(const BaseUNet& model, const LatentState& state) {
  const auto& a = model->arch();
  if (state.z.dim() != 4 || state.z.size(1) != a.image_channels || state.z.size(2) != a.resolution ||
      state.z.size(3) != a.resolution)
    throw InputError("latent shape does not match the configured image resolution");
  if (state.t < 0 || state.t >= model->schedule().steps)
    throw InputError("timestep " + std::to_string(state.t) + " out of range");
}

}  // namespace

torch::Tensor predict_noise(const BaseUNet& model, const LatentState& state, const Condition& cond,
                            const SkipAdapter* adapters, AdapterTrace* trace) {
  check_state(model, state);
  auto& net = *model.ptr();
  if (adapters && adapters->layer_count() != net.skip_count())
    throw ConfigError("adapter stack has " + std::to_string(adapters->layer_count()) +
                      " layers but the model exposes " + std::to_string(net.skip_count()));
  const auto batch = state.z.size(0);
  auto ctx = net.context(cond, batch);
  auto ts = torch::full({batch}, state.t, torch::TensorOptions().dtype(torch::kInt64));
  auto pass = net.encode(state.z, ts, ctx);
  auto skips = BaseUNetImpl::skips_of(pass);
  if (adapters) skips = adapters->apply(skips, state.z, state.t, ctx, trace);
  return net.decode(pass, skips, ctx);
}

SkipFeatureSet collect_skip_features(const BaseUNet& model, const LatentState& state,
                                     const Condition& cond) {
  check_state(model, state);
  auto& net = *model.ptr();
  const auto batch = state.z.size(0);
  auto ctx = net.context(cond, batch);
  auto ts = torch::full({batch}, state.t, torch::TensorOptions().dtype(torch::kInt64));
  return BaseUNetImpl::skips_of(net.encode(state.z, ts, ctx));
}

bool is_cross_attention_parameter(const std::string& name) {
  return name.find("xattn.") != std::string::npos || name.find("mid_attn.") != std::string::npos;
}

void save_base_unet(const BaseUNet& model, const std::filesystem::path& path, const Json& extra) {
  const auto& s = model->schedule();
  Json meta{{"kind", "base_unet"},
            {"version", 1},
            {"arch", to_json(model->arch())},
            {"schedule", {{"steps", s.steps}, {"kind", to_string(s.kind)},
                          {"beta_start", s.beta_start}, {"beta_end", s.beta_end}}},
            {"dtype", std::string(c10::toString(model->parameters().front().scalar_type()))},
            {"parameter_checksum", parameter_checksum(*model)}};
  for (const auto& [k, v] : extra.items()) meta[k] = v;
  save_checkpoint(path, named_state(*model), meta);
}

BaseUNet load_base_unet(const std::filesystem::path& path) {
  const Json meta = load_sidecar(path);
  if (meta.value("kind", "") != "base_unet")
    throw PreconditionError(path.string() + " is not a base U-Net checkpoint");
  const auto arch = arch_from_json(meta.at("arch"));
  const auto& sj = meta.at("schedule");
  const auto sched = make_noise_schedule(sj.at("steps").get<int>(),
                                         parse_schedule_kind(sj.at("kind").get<std::string>()),
                                         sj.at("beta_start").get<double>(), sj.at("beta_end").get<double>());
  const auto tensors = load_tensors(path);
  BaseUNet model(arch, sched);
  if (!tensors.empty()) model->to(tensors.begin()->second.scalar_type());
  load_named_state(*model, tensors, path.string());
  const auto expected = meta.at("parameter_checksum").get<std::string>();
  const auto actual = parameter_checksum(*model);
  if (expected != actual)
    throw PreconditionError(path.string() + ": parameter checksum " + actual + " does not match recorded " + expected);
  return model;
}

}  // namespace dumo
