#include "testing.hpp"

#include <fstream>

#include "dumo/errors.hpp"
#include "dumo/tlmo.hpp"
#include "helpers.hpp"

using namespace dumo;
using dumo::test::bit_equal;

TEST_SUITE("tlmo") {

TEST_CASE("equal partition covers every timestep with near-equal groups") {
  for (int steps : {7, 100, 1000, 999}) {
    for (int groups : {1, 3, 7, 20}) {
      if (groups > steps) continue;
      const auto b = equal_partition(steps, groups);
      REQUIRE(static_cast<int>(b.size()) == groups + 1);
      CHECK(b.front() == 0);
      CHECK(b.back() == steps);
      int lo = steps, hi = 0;
      for (int g = 0; g < groups; ++g) {
        const int w = b[g + 1] - b[g];
        lo = std::min(lo, w);
        hi = std::max(hi, w);
      }
      CHECK(hi - lo <= 1);
    }
  }
  CHECK(equal_partition(1000, 20)[1] == 50);
  CHECK_THROWS_AS(equal_partition(10, 0), ConfigError);
  CHECK_THROWS_AS(equal_partition(3, 4), ConfigError);
}

TEST_CASE("group lookup agrees with the partition for every timestep") {
  const auto m = init_modulation(997, 7, 20);
  for (int t = 0; t < 997; ++t) {
    const int g = m.group_of(t);
    CHECK(m.boundaries[g] <= t);
    CHECK(t < m.boundaries[g + 1]);
  }
  CHECK_THROWS_AS(m.group_of(997), InputError);
  CHECK_THROWS_AS(m.group_of(-1), InputError);
}

TEST_CASE("initial grid is all ones in double precision") {
  const auto m = init_modulation(1000, 13, 20);
  CHECK(m.groups() == 20);
  CHECK(m.layers() == 13);
  CHECK((m.grid.scalar_type() == torch::kFloat64));
  CHECK(torch::equal(m.grid, torch::ones({20, 13}, torch::kFloat64)));
  CHECK(lookup_factor(m, 999, 13) == 1.0);
  CHECK_THROWS_AS(lookup_factor(m, 0, 14), InputError);
  CHECK_THROWS_AS(lookup_factor(m, 0, 0), InputError);
}

TEST_CASE("factor lookup addresses (group, layer) cells") {
  auto m = init_modulation(100, 3, 4);
  m.grid = torch::arange(12, torch::kFloat64).view({4, 3});
  CHECK(lookup_factor(m, 0, 1) == 0.0);
  CHECK(lookup_factor(m, 24, 3) == 2.0);
  CHECK(lookup_factor(m, 25, 1) == 3.0);
  CHECK(lookup_factor(m, 99, 2) == 10.0);
  CHECK(torch::equal(lookup_row(m, 60), torch::tensor({6.0, 7.0, 8.0}, torch::kFloat64)));
}

TEST_CASE("modulation files round-trip exactly and reject corrupt input") {
  auto m = init_modulation(100, 7, 5);
  m.grid = torch::rand({5, 7}, torch::kFloat64);
  const auto dir = dumo::test::scratch("modulation");
  save_modulation(m, dir / "m.json", {{"note", "x"}});
  const auto back = load_modulation(dir / "m.json");
  CHECK(back.steps == 100);
  CHECK(back.boundaries == m.boundaries);
  CHECK(torch::equal(back.grid, m.grid));
  auto j = to_json(m);
  j["values_row_major"].erase(0);
  CHECK_THROWS_AS(modulation_from_json(j), PreconditionError);
  j = to_json(m);
  j["values_row_major"][0] = -1.0;
  CHECK_THROWS_AS(modulation_from_json(j), PreconditionError);
  CHECK(parse_modulation_mode("timestep") == ModulationMode::timestep_only);
  CHECK(parse_modulation_mode("layer_only") == ModulationMode::layer_only);
  CHECK(parse_modulation_mode("combined") == ModulationMode::combined);
  CHECK_THROWS_AS(parse_modulation_mode("both"), ConfigError);
}

TEST_CASE("all-ones modulation reproduces the unmodulated adapter exactly") {
  auto model = dumo::test::tiny_model(2);
  auto epr = init_epr(model, FinetuneStrategy::full, {1, "a"});
  dumo::test::perturb_projections(epr, 4);
  AdapterStack plain({{epr, std::nullopt, ApplyMask{}}});
  AdapterStack ones({{epr, init_modulation(100, model->skip_count(), 20), ApplyMask{}}});
  for (int i = 0; i < 10; ++i) {
    const auto st = dumo::test::random_latent(model, 9 * i + 3, 2, static_cast<std::uint64_t>(i));
    const Condition c{i % 5, "c"};
    CHECK(bit_equal(predict_noise(model, st, c, &plain), predict_noise(model, st, c, &ones)));
  }
  const auto orig = collect_skip_features(model, dumo::test::random_latent(model, 5, 1, 1), {1, "a"});
  const auto feat = epr_forward(epr, model, dumo::test::random_latent(model, 5, 1, 1), {1, "a"});
  const std::vector<SkipFeatureSet> contribs{feat};
  const std::vector<ModulationFactors> grids{init_modulation(100, model->skip_count(), 20)};
  const std::vector<SkipContribution> plain_contribs{{feat, torch::Tensor(), {}}};
  const auto a = modulated_combine(orig, contribs, grids, 5);
  const auto b = combine_skip(orig, plain_contribs);
  for (int l = 1; l <= model->skip_count(); ++l) CHECK(bit_equal(a.layer(l), b.layer(l)));
}

TEST_CASE("stage-2 erase term at M = 1 equals the stage-1 loss") {
  auto model = dumo::test::tiny_model(2);
  auto epr = init_epr(model, FinetuneStrategy::full, {1, "a"});
  dumo::test::perturb_projections(epr, 6);
  const auto z = dumo::test::random_latent(model, 50, 2, 1), zn = dumo::test::random_latent(model, 50, 2, 2);
  const auto terms = tlmo_objective(model, epr, init_modulation(100, model->skip_count(), 10), z, zn, 1.0, 1.0);
  AdapterStack plain({{epr, std::nullopt, ApplyMask{}}});
  torch::NoGradGuard no_grad;
  const auto eps_era = predict_noise(model, z, {1, "a"});
  const auto eps_null = predict_noise(model, z, Condition::empty());
  const double stage1 = erase_loss(predict_noise(model, z, {1, "a"}, &plain), eps_era, eps_null, 1.0).total;
  CHECK(terms.era2.item<double>() == doctest::Approx(stage1).epsilon(1e-6));
  CHECK(terms.total.item<double>() == doctest::Approx(terms.era2.item<double>() + terms.pre.item<double>()).epsilon(1e-6));
}

TEST_CASE("grid gradient of the stage-2 objective matches finite differences") {
  auto model = dumo::test::tiny_model(2, torch::kFloat64);
  auto epr = init_epr(model, FinetuneStrategy::full, {1, "a"});
  dumo::test::perturb_projections(epr, 7, 0.2);
  for (auto& p : epr->parameters()) p.set_requires_grad(false);
  const auto z = dumo::test::random_latent(model, 63, 2, 1), zn = dumo::test::random_latent(model, 63, 2, 2);
  auto m = init_modulation(100, model->skip_count(), 4);
  m.grid = (torch::rand({4, model->skip_count()}, torch::kFloat64) + 0.5).requires_grad_(true);
  const double eta = 1.5, lambda = 0.7;
  tlmo_objective(model, epr, m, z, zn, eta, lambda).total.backward();
  const auto analytic = m.grid.grad().clone();
  const int g = m.group_of(63);
  const double h = 1e-5;
  for (int l = 0; l < model->skip_count(); ++l) {
    auto up = m, down = m;
    up.grid = m.grid.detach().clone();
    down.grid = m.grid.detach().clone();
    up.grid[g][l] += h;
    down.grid[g][l] -= h;
    const double fd = (tlmo_objective(model, epr, up, z, zn, eta, lambda).total.item<double>() -
                       tlmo_objective(model, epr, down, z, zn, eta, lambda).total.item<double>()) /
                      (2 * h);
    CHECK(analytic[g][l].item<double>() == doctest::Approx(fd).epsilon(1e-4).scale(1e-8));
  }
  for (int other = 0; other < 4; ++other)
    if (other != g) CHECK(analytic[other].abs().max().item<double>() == 0.0);
}

TEST_CASE("stage 2 keeps base and EPR frozen and factors non-negative") {
  auto model = dumo::test::tiny_model(2);
  auto epr = init_epr(model, FinetuneStrategy::cross_attention_only, {1, "a"});
  dumo::test::perturb_projections(epr, 8, 0.3);
  TLMOConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 2;
  cfg.learning_rate = 0.5;
  cfg.sampler.steps = 4;
  const auto base_before = parameter_checksum(*model), epr_before = parameter_checksum(*epr);
  const auto r = run_tlmo(model, epr, init_modulation(100, model->skip_count(), 5), cfg);
  CHECK(r.base_checksum_before == base_before);
  CHECK(r.base_checksum_after == base_before);
  CHECK(r.epr_checksum_after == epr_before);
  CHECK(parameter_checksum(*epr) == epr_before);
  CHECK(r.factors.grid.min().item<double>() >= 0.0);
  CHECK_FALSE(torch::equal(r.factors.grid, torch::ones_like(r.factors.grid)));
  CHECK(r.trace.size() == 5);
  for (const auto& rec : r.trace) CHECK(rec.total == doctest::Approx(rec.era2 + rec.pre));
  for (const auto& item : epr->named_parameters())
    CHECK(item.value().requires_grad() == (item.key().rfind("zero_convs", 0) == 0 ||
                                           is_cross_attention_parameter(item.key())));
}

TEST_CASE("restricted modes tie factors across the frozen axis") {
  auto model = dumo::test::tiny_model(2);
  auto epr = init_epr(model, FinetuneStrategy::full, {2, "b"});
  dumo::test::perturb_projections(epr, 9, 0.3);
  TLMOConfig cfg;
  cfg.steps = 3;
  cfg.batch_size = 1;
  cfg.learning_rate = 0.3;
  cfg.sampler.steps = 3;
  cfg.mode = ModulationMode::timestep_only;
  const auto ts = run_tlmo(model, epr, init_modulation(100, model->skip_count(), 5), cfg).factors.grid;
  for (int g = 0; g < 5; ++g) CHECK((ts[g] == ts[g][0]).all().item<bool>());
  cfg.mode = ModulationMode::layer_only;
  const auto ly = run_tlmo(model, epr, init_modulation(100, model->skip_count(), 5), cfg).factors.grid;
  for (int l = 0; l < model->skip_count(); ++l) CHECK((ly.select(1, l) == ly[0][l]).all().item<bool>());
}

TEST_CASE("zero steps leave the grid untouched and mismatched grids are refused") {
  auto model = dumo::test::tiny_model(2);
  auto epr = init_epr(model, FinetuneStrategy::full, {2, "b"});
  TLMOConfig cfg;
  cfg.steps = 0;
  const auto init = init_modulation(100, model->skip_count(), 5);
  CHECK(torch::equal(run_tlmo(model, epr, init, cfg).factors.grid, init.grid));
  CHECK_THROWS_AS(run_tlmo(model, epr, init_modulation(100, 3, 5), cfg), ConfigError);
  CHECK_THROWS_AS(run_tlmo(model, epr, init_modulation(50, model->skip_count(), 5), cfg), ConfigError);
}

TEST_CASE("stage-2 trace CSV has one row per step") {
  const auto dir = dumo::test::scratch("tlmocsv");
  write_tlmo_csv(dir / "t.csv", {{0, 1.0, 0.5, 1.5, 3}, {1, 0.9, 0.4, 1.3, 7}});
  std::ifstream is(dir / "t.csv");
  std::string line;
  int rows = 0;
  std::getline(is, line);
  CHECK(line == "step,era2,pre,total,t");
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 2);
}

}
