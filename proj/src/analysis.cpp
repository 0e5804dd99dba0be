#include "dumo/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "dumo/errors.hpp"
#include "dumo/plot.hpp"

namespace dumo {

// --- group scheme -----------------------------------------------------------

void GroupScheme::validate(int layers, int steps) const {
  if (layer_groups.empty() || timestep_groups.empty()) throw ConfigError("group scheme has an empty partition");
  int expected = 1;
  for (const auto& g : layer_groups) {
    if (g.empty()) throw ConfigError("group scheme has an empty layer group");
    for (int l : g)
      if (l != expected++) throw ConfigError("layer groups must cover 1..L in order, deepest first");
  }
  if (expected != layers + 1)
    throw ConfigError("layer groups cover " + std::to_string(expected - 1) + " layers, model has " + std::to_string(layers));
  int upper = steps;
  for (const auto& [b, e] : timestep_groups) {
    if (e != upper || b >= e) throw ConfigError("timestep groups must tile [0, T) from high t to low t");
    upper = b;
  }
  if (upper != 0) throw ConfigError("timestep groups do not reach t = 0");
}

int GroupScheme::layer_group_of(int l) const {
  for (std::size_t g = 0; g < layer_groups.size(); ++g)
    if (std::find(layer_groups[g].begin(), layer_groups[g].end(), l) != layer_groups[g].end()) return static_cast<int>(g);
  throw InputError("layer " + std::to_string(l) + " is in no group");
}

int GroupScheme::timestep_group_of(int t) const {
  for (std::size_t g = 0; g < timestep_groups.size(); ++g)
    if (t >= timestep_groups[g].first && t < timestep_groups[g].second) return static_cast<int>(g);
  throw InputError("timestep " + std::to_string(t) + " is in no group");
}

GroupScheme make_group_scheme(const std::vector<int>& layer_sizes, int steps, int timestep_groups) {
  GroupScheme s;
  int l = 1;
  for (int size : layer_sizes) {
    if (size < 1) throw ConfigError("layer group sizes must be positive");
    std::vector<int> g;
    for (int i = 0; i < size; ++i) g.push_back(l++);
    s.layer_groups.push_back(std::move(g));
  }
  const auto b = equal_partition(steps, timestep_groups);
  for (int g = timestep_groups - 1; g >= 0; --g)
    s.timestep_groups.emplace_back(b[static_cast<std::size_t>(g)], b[static_cast<std::size_t>(g) + 1]);
  return s;
}

GroupScheme default_group_scheme(int layers, int steps) {
  if (layers == 13) return make_group_scheme({1, 3, 1, 8}, steps);
  if (layers == 7) return make_group_scheme({1, 2, 1, 3}, steps);
  const int groups = std::min(4, layers);
  std::vector<int> sizes;
  const auto b = equal_partition(layers, groups);
  for (int g = 0; g < groups; ++g) sizes.push_back(b[static_cast<std::size_t>(g) + 1] - b[static_cast<std::size_t>(g)]);
  return make_group_scheme(sizes, steps);
}

Json to_json(const GroupScheme& s) {
  Json tg = Json::array();
  for (const auto& [b, e] : s.timestep_groups) tg.push_back({b, e});
  return Json{{"layer_groups", s.layer_groups},
              {"timestep_groups", tg},
              {"layer_order", "l=1 deepest"},
              {"timestep_order", "high t first, half-open [begin, end)"}};
}

GroupScheme group_scheme_from_json(const Json& j) {
  GroupScheme s;
  s.layer_groups = j.at("layer_groups").get<std::vector<std::vector<int>>>();
  for (const auto& r : j.at("timestep_groups")) s.timestep_groups.emplace_back(r.at(0).get<int>(), r.at(1).get<int>());
  return s;
}

// --- masks ------------------------------------------------------------------

AblationMask AblationMask::none() { return {}; }

AblationMask AblationMask::all(int layers, int steps) {
  AblationMask m;
  for (int l = 1; l <= layers; ++l) m.active_layers.push_back(l);
  m.active_timesteps.emplace_back(0, steps);
  return m;
}

AblationMask AblationMask::layer_group(const GroupScheme& s, int g, int steps) {
  AblationMask m;
  m.active_layers = s.layer_groups.at(static_cast<std::size_t>(g));
  m.active_timesteps.emplace_back(0, steps);
  return m;
}

AblationMask AblationMask::timestep_group(const GroupScheme& s, int g, int layers) {
  AblationMask m;
  for (int l = 1; l <= layers; ++l) m.active_layers.push_back(l);
  m.active_timesteps.push_back(s.timestep_groups.at(static_cast<std::size_t>(g)));
  return m;
}

void AblationMask::validate(int layers, int steps) const {
  for (int l : active_layers)
    if (l < 1 || l > layers) throw ConfigError("ablation mask layer " + std::to_string(l) + " out of range");
  for (const auto& [b, e] : active_timesteps)
    if (b < 0 || e > steps || b > e) throw ConfigError("ablation mask timestep range out of bounds");
}

ApplyMask AblationMask::to_apply_mask() const { return ApplyMask{active_layers, active_timesteps}; }

// --- ablation sampling ------------------------------------------------------

torch::Tensor ablate_generate(const BaseUNet& model, const EPRModule& epr, const std::optional<ModulationFactors>& m,
                              const AblationMask& mask, const Condition& cond, std::span<const std::uint64_t> seeds,
                              const SamplerConfig& sampler) {
  mask.validate(model->skip_count(), model->schedule().steps);
  AdapterStack stack;
  stack.push(AdapterEntry{epr, m, mask.to_apply_mask()});
  return sample(model, cond, sampler, seeds, &stack).images;
}

// --- group effect report ----------------------------------------------------

namespace {

GroupEffectRow measure(const std::string& id, const torch::Tensor& base, const torch::Tensor& ablated,
                       const PerceptualMetric& metric, double cutoff) {
  GroupEffectRow r;
  r.group_id = id;
  r.n = static_cast<int>(base.size(0));
  const auto delta = ablated.to(torch::kFloat64) - base.to(torch::kFloat64);
  const double pixels = static_cast<double>(delta[0].numel());
  for (std::int64_t i = 0; i < delta.size(0); ++i) {
    const auto p = frequency_split(delta[i], cutoff).profile;
    r.low_delta += p.low_energy / pixels / r.n;
    r.high_delta += p.high_energy / pixels / r.n;
  }
  r.perceptual_delta = mean(lpips_sets(metric, base, ablated));
  return r;
}

GroupEffectRow residual(const std::string& id, const std::vector<GroupEffectRow>& parts, const GroupEffectRow& full) {
  GroupEffectRow r;
  r.group_id = id;
  r.n = full.n;
  for (const auto& p : parts) {
    r.low_delta += p.low_delta;
    r.high_delta += p.high_delta;
    r.perceptual_delta += p.perceptual_delta;
  }
  r.low_delta -= full.low_delta;
  r.high_delta -= full.high_delta;
  r.perceptual_delta -= full.perceptual_delta;
  return r;
}

Json row_json(const GroupEffectRow& r) {
  return Json{{"group_id", r.group_id},
              {"low_delta", r.low_delta},
              {"high_delta", r.high_delta},
              {"perceptual_delta", r.perceptual_delta},
              {"n", r.n}};
}

}  // namespace

std::vector<GroupEffectRow> GroupEffectReport::rows() const {
  std::vector<GroupEffectRow> out = layer_rows;
  out.insert(out.end(), timestep_rows.begin(), timestep_rows.end());
  out.push_back(full);
  out.push_back(layer_residual);
  if (!timestep_rows.empty()) out.push_back(timestep_residual);
  return out;
}

void GroupEffectReport::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw PreconditionError("cannot write " + path.string());
  os.precision(17);
  os << "group_id,low_delta,high_delta,perceptual_delta,n\n";
  for (const auto& r : rows())
    os << r.group_id << ',' << r.low_delta << ',' << r.high_delta << ',' << r.perceptual_delta << ',' << r.n << '\n';
}

void GroupEffectReport::plot(const std::filesystem::path& png) const {
  std::vector<std::string> cats;
  Series low{"low band", {}}, high{"high band", {}}, perc{"lpips-proxy", {}};
  for (const auto& r : rows()) {
    if (r.group_id.rfind("residual", 0) == 0) continue;
    cats.push_back(r.group_id);
    low.values.push_back(r.low_delta);
    high.values.push_back(r.high_delta);
    perc.values.push_back(r.perceptual_delta);
  }
  plot_bars(png, "group ablation deltas vs base", cats, {low, high, perc});
}

Json GroupEffectReport::to_json() const {
  Json rs = Json::array();
  for (const auto& r : rows()) rs.push_back(row_json(r));
  return Json{{"kind", "group_effect_report"},
              {"version", 1},
              {"cutoff", cutoff},
              {"frequency_note", "radial Fourier split of (ablated - base) images; an operational measure"},
              {"rows", rs}};
}

GroupEffectReport group_effect_report(const BaseUNet& model, const EPRModule& epr,
                                      const std::optional<ModulationFactors>& m, const GroupScheme& scheme,
                                      const PerceptualMetric& metric, const GroupEffectConfig& cfg) {
  const int layers = model->skip_count(), steps = model->schedule().steps;
  scheme.validate(layers, steps);
  if (cfg.prompts.empty() || cfg.seeds_per_prompt < 1) throw ConfigError("group effect report needs prompts and seeds");

  std::vector<std::vector<std::uint64_t>> seeds;
  std::vector<torch::Tensor> base_parts;
  for (const auto& p : cfg.prompts) {
    std::vector<std::uint64_t> s;
    const auto root = mix_seed(cfg.seed, static_cast<std::uint64_t>(p.id));
    for (int i = 0; i < cfg.seeds_per_prompt; ++i) s.push_back(mix_seed(root, static_cast<std::uint64_t>(i)));
    base_parts.push_back(sample(model, p, cfg.sampler, s).images);
    seeds.push_back(std::move(s));
  }
  const auto base = torch::cat(base_parts, 0);
  const auto run = [&](const AblationMask& mask) {
    std::vector<torch::Tensor> parts;
    for (std::size_t k = 0; k < cfg.prompts.size(); ++k)
      parts.push_back(ablate_generate(model, epr, m, mask, cfg.prompts[k], seeds[k], cfg.sampler));
    return torch::cat(parts, 0);
  };

  GroupEffectReport r;
  r.cutoff = cfg.cutoff;
  for (std::size_t g = 0; g < scheme.layer_groups.size(); ++g)
    r.layer_rows.push_back(measure("layer_group_" + std::to_string(g + 1),
                                   base, run(AblationMask::layer_group(scheme, static_cast<int>(g), steps)), metric,
                                   cfg.cutoff));
  if (cfg.timestep_groups)
    for (std::size_t g = 0; g < scheme.timestep_groups.size(); ++g)
      r.timestep_rows.push_back(measure("timestep_group_" + std::to_string(g + 1), base,
                                        run(AblationMask::timestep_group(scheme, static_cast<int>(g), layers)), metric,
                                        cfg.cutoff));
  r.full = measure("all", base, run(AblationMask::all(layers, steps)), metric, cfg.cutoff);
  r.layer_residual = residual("residual_layers", r.layer_rows, r.full);
  if (cfg.timestep_groups) r.timestep_residual = residual("residual_timesteps", r.timestep_rows, r.full);
  return r;
}

// --- modulation heatmap -----------------------------------------------------

Json HeatmapSummary::to_json() const {
  Json z = Json::array();
  for (const auto& [t, l] : zero_groups) z.push_back({{"timestep_group", t + 1}, {"layer_group", l + 1}});
  return Json{{"kind", "modulation_heatmap"},
              {"averages", averages},
              {"marks", marks},
              {"zero_groups", z},
              {"rows", "timestep groups, high t first"},
              {"columns", "layer groups, deep to shallow"}};
}

HeatmapSummary summarise_modulation(const ModulationFactors& m, const GroupScheme& scheme) {
  scheme.validate(m.layers(), m.steps);
  const std::size_t tg = scheme.timestep_groups.size(), lg = scheme.layer_groups.size();
  std::vector<std::vector<double>> sum(tg, std::vector<double>(lg, 0.0));
  std::vector<std::vector<long>> count(tg, std::vector<long>(lg, 0));
  const auto grid = m.grid.detach().to(torch::kFloat64).contiguous();
  for (int t = 0; t < m.steps; ++t) {
    const auto gt = static_cast<std::size_t>(scheme.timestep_group_of(t));
    for (int l = 1; l <= m.layers(); ++l) {
      const auto gl = static_cast<std::size_t>(scheme.layer_group_of(l));
      sum[gt][gl] += grid[m.group_of(t)][l - 1].item<double>();
      ++count[gt][gl];
    }
  }
  HeatmapSummary s;
  s.averages.assign(tg, std::vector<double>(lg, 0.0));
  s.marks.assign(tg, std::vector<std::string>(lg));
  std::vector<std::pair<double, std::pair<std::size_t, std::size_t>>> order;
  for (std::size_t i = 0; i < tg; ++i)
    for (std::size_t j = 0; j < lg; ++j) {
      s.averages[i][j] = sum[i][j] / static_cast<double>(count[i][j]);
      order.push_back({s.averages[i][j], {i, j}});
      if (s.averages[i][j] == 0.0) s.zero_groups.emplace_back(static_cast<int>(i), static_cast<int>(j));
    }
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  if (!order.empty() && (order.size() < 2 || order[0].first > order[1].first)) {
    s.marks[order[0].second.first][order[0].second.second] = "**";
    const auto second = std::find_if(order.begin() + 1, order.end(), [&](const auto& o) { return o.first < order[0].first; });
    if (second != order.end() && (second + 1 == order.end() || second->first > (second + 1)->first))
      s.marks[second->second.first][second->second.second] = "*";
  }
  return s;
}

HeatmapSummary render_modulation_heatmap(const ModulationFactors& m, const GroupScheme& scheme,
                                         const std::filesystem::path& png) {
  const auto s = summarise_modulation(m, scheme);
  const auto grid = m.grid.detach().to(torch::kFloat64);
  const double hi = std::max(1e-12, grid.max().item<double>());
  const int cell_w = 48, cell_h = 14, left = 90, top = 40;
  const int groups = m.groups(), layers = m.layers();
  Canvas cv(left + layers * cell_w + 220, top + groups * cell_h + 60);
  cv.text(left, 12, "modulation factors (max " + std::to_string(hi).substr(0, 5) + ")", {0, 0, 0}, 2);
  // Rows run from the highest timestep group (top) to group 0 (bottom).
  for (int g = 0; g < groups; ++g) {
    const int y = top + (groups - 1 - g) * cell_h;
    for (int l = 1; l <= layers; ++l) {
      const int x = left + (l - 1) * cell_w;
      cv.fill_rect(x, y, x + cell_w, y + cell_h, colormap(grid[g][l - 1].item<double>() / hi));
    }
    const auto label = "T" + std::to_string(m.boundaries[static_cast<std::size_t>(g)]);
    cv.text(left - Canvas::text_width(label) - 6, y + 2, label, {0, 0, 0}, 2);
  }
  for (int l = 1; l <= layers; ++l) cv.text(left + (l - 1) * cell_w + 16, top + groups * cell_h + 6, "L" + std::to_string(l), {0, 0, 0}, 2);
  // Group boundaries and annotations.
  int x = left;
  for (std::size_t j = 0; j < scheme.layer_groups.size(); ++j) {
    const int w = static_cast<int>(scheme.layer_groups[j].size()) * cell_w;
    for (std::size_t i = 0; i < scheme.timestep_groups.size(); ++i) {
      const auto [b, e] = scheme.timestep_groups[i];
      const int y0 = top + static_cast<int>(std::lround(static_cast<double>(m.steps - e) / m.steps * groups * cell_h));
      const int y1 = top + static_cast<int>(std::lround(static_cast<double>(m.steps - b) / m.steps * groups * cell_h));
      const bool zero = s.averages[i][j] == 0.0;
      cv.outline_rect(x, y0, x + w - 1, y1 - 1, zero ? Colour{255, 0, 0} : Colour{255, 255, 255});
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.2f%s", s.averages[i][j], s.marks[i][j].c_str());
      cv.fill_rect(x + 3, (y0 + y1) / 2 - 6, x + 3 + Canvas::text_width(buf) + 2, (y0 + y1) / 2 + 6, {255, 255, 255});
      cv.text(x + 4, (y0 + y1) / 2 - 5, buf, zero ? Colour{255, 0, 0} : Colour{0, 0, 0}, 2);
    }
    x += w;
  }
  cv.text(left + layers * cell_w + 12, top, "** LARGEST", {0, 0, 0}, 2);
  cv.text(left + layers * cell_w + 12, top + 16, "* SECOND", {0, 0, 0}, 2);
  cv.text(left + layers * cell_w + 12, top + 32, "RED: ZERO GROUP", {255, 0, 0}, 2);
  cv.save(png);
  std::ofstream os(png.string() + ".json");
  if (!os) throw PreconditionError("cannot write " + png.string() + ".json");
  os << s.to_json().dump(2) << '\n';
  return s;
}

}  // namespace dumo
