#include "testing.hpp"

#include <fstream>

#include "dumo/analysis.hpp"
#include "dumo/errors.hpp"
#include "dumo/image_io.hpp"
#include "dumo/tlmo.hpp"
#include "helpers.hpp"

using namespace dumo;
using dumo::test::bit_equal;

namespace {

/// Block means computed straight from the definition, without the library's lookups.
std::vector<std::vector<double>> block_means(const ModulationFactors& m, const GroupScheme& s) {
  std::vector<std::vector<double>> out;
  const auto grid = m.grid.contiguous();
  const double* g = grid.data_ptr<double>();
  for (const auto& [b, e] : s.timestep_groups) {
    out.emplace_back();
    for (const auto& layers : s.layer_groups) {
      double sum = 0.0;
      long n = 0;
      for (int t = b; t < e; ++t) {
        int row = 0;
        while (!(m.boundaries[row] <= t && t < m.boundaries[row + 1])) ++row;
        for (int l : layers) {
          sum += g[row * m.layers() + (l - 1)];
          ++n;
        }
      }
      out.back().push_back(sum / static_cast<double>(n));
    }
  }
  return out;
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("default group schemes") {
  const auto s13 = default_group_scheme(13, 1000);
  REQUIRE(s13.layer_groups.size() == 4);
  CHECK(s13.layer_groups[0] == std::vector<int>{1});
  CHECK(s13.layer_groups[1] == std::vector<int>{2, 3, 4});
  CHECK(s13.layer_groups[2] == std::vector<int>{5});
  CHECK(s13.layer_groups[3].size() == 8);
  CHECK(s13.timestep_groups.front() == std::pair<int, int>{750, 1000});
  CHECK(s13.timestep_groups.back() == std::pair<int, int>{0, 250});
  const auto s7 = default_group_scheme(7, 100);
  CHECK(s7.layer_groups[3] == std::vector<int>{5, 6, 7});
  const auto s5 = default_group_scheme(5, 100);
  CHECK(s5.layer_groups.size() == 4);
  s5.validate(5, 100);
  for (int l = 1; l <= 7; ++l) CHECK(s7.layer_group_of(l) == (l == 1 ? 0 : l <= 3 ? 1 : l == 4 ? 2 : 3));
  CHECK(s7.timestep_group_of(99) == 0);
  CHECK(s7.timestep_group_of(0) == 3);
}

TEST_CASE("group scheme validation and JSON") {
  auto s = make_group_scheme({1, 2}, 100, 2);
  CHECK_THROWS_AS(s.validate(4, 100), ConfigError);
  s.validate(3, 100);
  CHECK_THROWS_AS(s.validate(3, 90), ConfigError);
  const auto back = group_scheme_from_json(to_json(s));
  CHECK(back.layer_groups == s.layer_groups);
  CHECK(back.timestep_groups == s.timestep_groups);
  GroupScheme dup{{{1, 2}, {2, 3}}, {{0, 100}}};
  CHECK_THROWS_AS(dup.validate(3, 100), ConfigError);
}

TEST_CASE("frequency split is an exact decomposition with Parseval energies") {
  const auto img = torch::rand({3, 16, 16}, torch::kFloat64) * 2 - 1;
  for (double cutoff : {0.05, 0.15, 0.3, 0.49}) {
    const auto s = frequency_split(img, cutoff);
    CHECK(torch::allclose(s.low + s.high, img, 1e-10, 1e-12));
    CHECK(s.profile.total() == doctest::Approx(img.pow(2).sum().item<double>()).epsilon(1e-9));
    CHECK(s.profile.low_energy == doctest::Approx(s.low.pow(2).sum().item<double>()).epsilon(1e-9));
    CHECK(s.profile.high_energy == doctest::Approx(s.high.pow(2).sum().item<double>()).epsilon(1e-9));
  }
  CHECK_THROWS_AS(frequency_split(img, 0.0), ConfigError);
  CHECK_THROWS_AS(frequency_split(img, 0.5), ConfigError);
}

TEST_CASE("frequency split separates a flat field from a fine stripe pattern") {
  const auto flat = torch::full({1, 16, 16}, 0.5, torch::kFloat64);
  auto stripes = torch::zeros({1, 16, 16}, torch::kFloat64);
  for (int x = 0; x < 16; ++x) stripes.select(2, x).fill_(x % 2 ? 1.0 : -1.0);
  CHECK(frequency_split(flat).profile.high_energy == doctest::Approx(0.0).scale(1.0));
  CHECK(frequency_split(stripes).profile.low_energy == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("empty ablation mask reproduces the base sampler exactly") {
  auto model = dumo::test::tiny_model(3);
  auto epr = init_epr(model, FinetuneStrategy::full, {1, "a"});
  dumo::test::perturb_projections(epr, 2, 0.2);
  const SamplerConfig cfg{5, true};
  const auto seeds = seed_range(40, 3);
  const auto base = sample(model, {1, "a"}, cfg, seeds).images;
  CHECK(bit_equal(ablate_generate(model, epr, std::nullopt, AblationMask::none(), {1, "a"}, seeds, cfg), base));
  CHECK_FALSE(torch::equal(ablate_generate(model, epr, std::nullopt, AblationMask::all(7, 100), {1, "a"}, seeds, cfg), base));
  AblationMask bad;
  bad.active_layers = {8};
  CHECK_THROWS_AS(ablate_generate(model, epr, std::nullopt, bad, {1, "a"}, seeds, cfg), ConfigError);
}

TEST_CASE("group effect report has consistent residuals") {
  auto model = dumo::test::tiny_model(3);
  auto epr = init_epr(model, FinetuneStrategy::full, {1, "a"});
  dumo::test::perturb_projections(epr, 2, 0.2);
  GroupEffectConfig cfg;
  cfg.prompts = {{1, "a"}};
  cfg.seeds_per_prompt = 2;
  cfg.sampler = {4, true};
  const auto scheme = default_group_scheme(7, 100);
  PerceptualMetric metric;
  const auto r = group_effect_report(model, epr, std::nullopt, scheme, metric, cfg);
  REQUIRE(r.layer_rows.size() == 4);
  REQUIRE(r.timestep_rows.size() == 4);
  double low = 0.0;
  for (const auto& row : r.layer_rows) {
    CHECK(row.n == 2);
    CHECK(row.low_delta >= 0.0);
    low += row.low_delta;
  }
  CHECK(r.layer_residual.low_delta == doctest::Approx(low - r.full.low_delta));
  CHECK(r.full.low_delta + r.full.high_delta > 0.0);
  CHECK(r.rows().size() == 11);
  const auto dir = dumo::test::scratch("effects");
  r.write_csv(dir / "e.csv");
  r.plot(dir / "e.png");
  std::ifstream is(dir / "e.csv");
  std::string header;
  std::getline(is, header);
  CHECK(header == "group_id,low_delta,high_delta,perceptual_delta,n");
  CHECK(read_png(dir / "e.png").width > 0);
}

TEST_CASE("heatmap annotations match an independent recomputation exactly") {
  auto m = init_modulation(100, 7, 20);
  m.grid = torch::rand({20, 7}, torch::kFloat64) * 2;
  m.grid.select(1, 6).zero_();
  m.grid.select(1, 5).zero_();
  m.grid.select(1, 4).zero_();
  const auto scheme = default_group_scheme(7, 100);
  const auto dir = dumo::test::scratch("heatmap");
  const auto s = render_modulation_heatmap(m, scheme, dir / "h.png");
  const auto oracle = block_means(m, scheme);
  CHECK(s.averages == oracle);
  std::ifstream is(dir / "h.png.json");
  const auto j = Json::parse(is);
  CHECK(j.at("averages").get<std::vector<std::vector<double>>>() == oracle);
  CHECK(s.zero_groups.size() == 4);
  for (const auto& [t, l] : s.zero_groups) CHECK(l == 3);
  int stars = 0, star = 0;
  double best = -1;
  for (std::size_t i = 0; i < oracle.size(); ++i)
    for (std::size_t k = 0; k < oracle[i].size(); ++k) {
      best = std::max(best, oracle[i][k]);
      stars += s.marks[i][k] == "**";
      star += s.marks[i][k] == "*";
    }
  CHECK(stars == 1);
  CHECK(star == 1);
  for (std::size_t i = 0; i < oracle.size(); ++i)
    for (std::size_t k = 0; k < oracle[i].size(); ++k)
      if (s.marks[i][k] == "**") CHECK(oracle[i][k] == best);
  CHECK(read_png(dir / "h.png").height > 0);
}

TEST_CASE("uniform grids produce no ranking marks") {
  const auto s = summarise_modulation(init_modulation(100, 7, 5), default_group_scheme(7, 100));
  for (const auto& row : s.marks)
    for (const auto& m : row) CHECK(m.empty());
  for (const auto& row : s.averages)
    for (double v : row) CHECK(v == 1.0);
}

}
