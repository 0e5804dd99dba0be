#include "dumo/epr.hpp"

#include <algorithm>

#include "dumo/errors.hpp"

namespace dumo {

FinetuneStrategy parse_strategy(std::string_view name) {
  if (name == "cross_attention_only" || name == "xattn") return FinetuneStrategy::cross_attention_only;
  if (name == "full") return FinetuneStrategy::full;
  throw ConfigError("unknown fine-tuning strategy '" + std::string(name) +
                    "' (expected cross_attention_only|full)");
}

std::string to_string(FinetuneStrategy s) {
  return s == FinetuneStrategy::full ? "full" : "cross_attention_only";
}

EPRModuleImpl::EPRModuleImpl(const ArchConfig& a, FinetuneStrategy s, Condition c)
    : arch(a), strategy(s), target(std::move(c)) {
  encoder = register_module("encoder", UNetEncoder(arch));
  zero_convs = register_module("zero_convs", torch::nn::ModuleList());
  for (const auto& tap : tap_shapes(arch)) {
    torch::nn::Conv2d conv(torch::nn::Conv2dOptions(tap.channels, tap.channels, 1));
    torch::NoGradGuard no_grad;
    conv->weight.zero_();
    conv->bias.zero_();
    zero_convs->push_back(conv);
  }
}

SkipFeatureSet EPRModuleImpl::forward(const torch::Tensor& z, const torch::Tensor& timesteps,
                                      const torch::Tensor& context) {
  const auto pass = encoder->forward(z, timesteps, context);
  SkipFeatureSet out;
  out.features.reserve(pass.taps.size());
  for (std::size_t l = 0; l < pass.taps.size(); ++l) {
    const auto& tap = pass.taps[pass.taps.size() - 1 - l];
    out.features.push_back(zero_convs[l]->as<torch::nn::Conv2dImpl>()->forward(tap));
  }
  return out;
}

std::vector<std::string> EPRModuleImpl::trainable_names() const {
  std::vector<std::string> names;
  for (const auto& item : named_parameters(true)) {
    const auto& name = item.key();
    const bool zero_conv = name.rfind("zero_convs.", 0) == 0;
    if (zero_conv || strategy == FinetuneStrategy::full || is_cross_attention_parameter(name))
      names.push_back(name);
  }
  return names;
}

std::vector<torch::Tensor> EPRModuleImpl::trainable_parameters() {
  const auto names = trainable_names();
  std::vector<torch::Tensor> out;
  for (auto& item : named_parameters(true))
    if (std::find(names.begin(), names.end(), item.key()) != names.end()) out.push_back(item.value());
  return out;
}

void EPRModuleImpl::apply_trainable_mask() {
  const auto names = trainable_names();
  for (auto& item : named_parameters(true))
    item.value().set_requires_grad(std::find(names.begin(), names.end(), item.key()) != names.end());
}

EPRModule init_epr(const BaseUNet& model, FinetuneStrategy strategy, const Condition& target) {
  EPRModule epr(model->arch(), strategy, target);
  epr->to(model->parameters().front().scalar_type());
  {
    torch::NoGradGuard no_grad;
    const auto base = named_state(*model->encoder);
    load_named_state(*epr->encoder, base, "base encoder");
  }
  epr->base_checksum = parameter_checksum(*model);
  epr->apply_trainable_mask();
  return epr;
}

SkipFeatureSet epr_forward(const EPRModule& epr, const BaseUNet& model, const LatentState& state,
                           const Condition& cond) {
  auto& net = *model.ptr();
  const auto batch = state.z.size(0);
  auto ctx = net.context(cond, batch);
  auto ts = torch::full({batch}, state.t, torch::TensorOptions().dtype(torch::kInt64));
  auto out = epr.ptr()->forward(state.z, ts, ctx);
  const auto shapes = tap_shapes(net.arch());
  if (out.size() != shapes.size()) throw InternalError("EPR emits a different number of taps than the base");
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto& f = out.features[l];
    if (f.size(1) != shapes[l].channels || f.size(2) != shapes[l].size || f.size(3) != shapes[l].size)
      throw InternalError("EPR tap " + std::to_string(l + 1) + " shape drifted from " + shapes[l].source);
  }
  return out;
}

SkipFeatureSet combine_skip(const SkipFeatureSet& original,
                            std::span<const SkipContribution> contributions) {
  for (const auto& c : contributions) {
    if (c.features.size() != original.size())
      throw InputError("combine_skip: contribution has " + std::to_string(c.features.size()) +
                       " layers, expected " + std::to_string(original.size()));
    if (c.scales.defined() && c.scales.numel() != static_cast<std::int64_t>(original.size()))
      throw InputError("combine_skip: scale vector length mismatch");
    if (!c.active.empty() && c.active.size() != original.size())
      throw InputError("combine_skip: activity mask length mismatch");
  }
  SkipFeatureSet out{original.features};
  for (std::size_t l = 0; l < original.size(); ++l) {
    for (const auto& c : contributions) {
      if (!c.active.empty() && !c.active[l]) continue;
      const auto& s = c.features.features[l];
      if (!s.sizes().equals(original.features[l].sizes()))
        throw InputError("combine_skip: layer " + std::to_string(l + 1) + " shape mismatch");
      if (c.scales.defined())
        out.features[l] = out.features[l] + c.scales[static_cast<std::int64_t>(l)].to(s.scalar_type()) * s;
      else
        out.features[l] = out.features[l] + s;
    }
  }
  return out;
}

bool ApplyMask::active_at(int t) const {
  if (!timesteps) return true;
  return std::any_of(timesteps->begin(), timesteps->end(),
                     [t](const auto& r) { return t >= r.first && t < r.second; });
}

bool ApplyMask::layer_active(int l) const {
  if (!layers) return true;
  return std::find(layers->begin(), layers->end(), l) != layers->end();
}

AdapterStack::AdapterStack(std::vector<AdapterEntry> entries) : entries_(std::move(entries)) {
  if (!entries_.empty()) (void)layer_count();
}

void AdapterStack::push(AdapterEntry entry) {
  entries_.push_back(std::move(entry));
  (void)layer_count();
}

int AdapterStack::layer_count() const {
  if (entries_.empty()) return 0;
  const int l = entries_.front().epr->skip_count();
  for (const auto& e : entries_) {
    if (e.epr->skip_count() != l) throw ConfigError("adapter stack members disagree on layer count");
    if (e.modulation && e.modulation->layers() != l)
      throw ConfigError("modulation grid layer count differs from its EPR module");
  }
  return l;
}

SkipFeatureSet AdapterStack::apply(const SkipFeatureSet& original, const torch::Tensor& z, int t,
                                   const torch::Tensor& context, AdapterTrace* trace) const {
  std::vector<SkipContribution> contributions;
  contributions.reserve(entries_.size());
  const int layers = static_cast<int>(original.size());
  for (std::size_t k = 0; k < entries_.size(); ++k) {
    const auto& e = entries_[k];
    if (!e.mask.active_at(t)) continue;
    std::vector<bool> active(static_cast<std::size_t>(layers));
    bool any = false;
    for (int l = 1; l <= layers; ++l) any |= (active[static_cast<std::size_t>(l - 1)] = e.mask.layer_active(l));
    if (!any) continue;

    SkipContribution c;
    auto ts = torch::full({z.size(0)}, t, torch::TensorOptions().dtype(torch::kInt64));
    c.features = e.epr.ptr()->forward(z, ts, context);
    if (e.modulation) c.scales = lookup_row(*e.modulation, t);
    c.active = std::move(active);
    if (trace) {
      for (int l = 1; l <= layers; ++l) {
        if (!c.active[static_cast<std::size_t>(l - 1)]) continue;
        const double scale = e.modulation ? lookup_factor(*e.modulation, t, l) : 1.0;
        trace->push_back({t, l, static_cast<int>(k), scale});
      }
    }
    contributions.push_back(std::move(c));
  }
  if (contributions.empty()) return original;
  return combine_skip(original, contributions);
}

void save_epr(const EPRModule& epr, const std::filesystem::path& path, const Json& extra) {
  Json meta{{"kind", "epr_module"},
            {"version", 1},
            {"arch", to_json(epr->arch)},
            {"strategy", to_string(epr->strategy)},
            {"target_concept", {{"id", epr->target.id}, {"name", epr->target.name}}},
            {"base_checksum", epr->base_checksum},
            {"parameter_checksum", parameter_checksum(*epr)}};
  for (const auto& [k, v] : extra.items()) meta[k] = v;
  save_checkpoint(path, named_state(*epr), meta);
}

EPRModule load_epr(const std::filesystem::path& path, const BaseUNet& model) {
  const Json meta = load_sidecar(path);
  if (meta.value("kind", "") != "epr_module")
    throw PreconditionError(path.string() + " is not an EPR checkpoint");
  const auto recorded = meta.at("base_checksum").get<std::string>();
  const auto actual = parameter_checksum(*model);
  if (recorded != actual)
    throw PreconditionError(path.string() + " was trained against base checksum " + recorded +
                            " but the supplied base has " + actual);
  const auto& tc = meta.at("target_concept");
  EPRModule epr(arch_from_json(meta.at("arch")), parse_strategy(meta.at("strategy").get<std::string>()),
                Condition{tc.at("id").get<int>(), tc.at("name").get<std::string>()});
  const auto tensors = load_tensors(path);
  if (!tensors.empty()) epr->to(tensors.begin()->second.scalar_type());
  load_named_state(*epr, tensors, path.string());
  epr->base_checksum = recorded;
  if (parameter_checksum(*epr) != meta.at("parameter_checksum").get<std::string>())
    throw PreconditionError(path.string() + ": EPR parameter checksum mismatch");
  epr->apply_trainable_mask();
  return epr;
}

}  // namespace dumo
