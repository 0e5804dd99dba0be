#include "testing.hpp"

#include <cmath>

#include "dumo/errors.hpp"
#include "dumo/sampler.hpp"
#include "helpers.hpp"

using namespace dumo;
using dumo::test::bit_equal;

TEST_SUITE("diffusion_core") {

TEST_CASE("linear schedule matches reference cumulative products") {
  const auto s = make_noise_schedule(1000, ScheduleKind::linear);
  CHECK(s.alpha_bar(0) == doctest::Approx(0.9999).epsilon(1e-14));
  CHECK(s.alpha_bar(499) == doctest::Approx(0.07858724288177824).epsilon(1e-10));
  CHECK(s.alpha_bar(999) == doctest::Approx(4.035829765375676e-05).epsilon(1e-9));
}

TEST_CASE("cosine schedule matches reference cumulative products") {
  const auto s = make_noise_schedule(1000, ScheduleKind::cosine);
  CHECK(s.alpha_bar(0) == doctest::Approx(0.999958715775178).epsilon(1e-10));
  CHECK(s.alpha_bar(499) == doctest::Approx(0.4938435904406382).epsilon(1e-10));
  CHECK(s.alpha_bar(999) == doctest::Approx(2.4287669070348567e-09).epsilon(1e-6));
}

TEST_CASE("schedule invariants hold for every kind and length") {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    for (int steps : {2, 10, 100, 1000}) {
      const auto s = make_noise_schedule(steps, kind);
      REQUIRE(static_cast<int>(s.alpha_bars.size()) == steps);
      double running = 1.0;
      for (int t = 0; t < steps; ++t) {
        CHECK(s.betas[t] > 0.0);
        CHECK(s.betas[t] < 1.0);
        CHECK(s.alphas[t] == 1.0 - s.betas[t]);
        running *= 1.0 - s.betas[t];
        CHECK(s.alpha_bar(t) == running);
        if (t > 0) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
      }
    }
  }
}

TEST_CASE("schedule construction rejects invalid input") {
  CHECK_THROWS_AS(make_noise_schedule(1, ScheduleKind::linear), ConfigError);
  CHECK_THROWS_AS(make_noise_schedule(10, ScheduleKind::linear, 0.02, 1e-4), ConfigError);
  CHECK_THROWS_AS(schedule_from_betas({0.1, 0.0, 0.2}, ScheduleKind::linear), ConfigError);
  CHECK_THROWS_AS(schedule_from_betas({0.1, 1.0}, ScheduleKind::linear), ConfigError);
  CHECK_THROWS_AS(parse_schedule_kind("quadratic"), ConfigError);
}

TEST_CASE("forward diffusion is the closed form") {
  const auto s = make_noise_schedule(100, ScheduleKind::linear);
  const auto x0 = torch::rand({2, 3, 4, 4}, torch::kFloat64) * 2 - 1;
  const auto noise = torch::randn({2, 3, 4, 4}, torch::kFloat64);
  for (int t : {0, 37, 99}) {
    const auto z = forward_diffuse(x0, t, noise, s).z;
    const auto a = x0.contiguous(), n = noise.contiguous(), zz = z.contiguous();
    const double ab = s.alpha_bar(t);
    for (std::int64_t i = 0; i < zz.numel(); ++i)
      CHECK(zz.data_ptr<double>()[i] ==
            doctest::Approx(std::sqrt(ab) * a.data_ptr<double>()[i] + std::sqrt(1 - ab) * n.data_ptr<double>()[i])
                .epsilon(1e-14));
  }
  CHECK(bit_equal(diffuse_closed_form(x0, noise, 1.0), x0));
  CHECK(torch::allclose(diffuse_closed_form(x0, noise, 0.0), noise));
  CHECK_THROWS_AS(forward_diffuse(x0, 100, noise, s), InputError);
  CHECK_THROWS_AS(forward_diffuse(x0, 0, noise.slice(0, 0, 1), s), InputError);
}

TEST_CASE("respaced timesteps run from T-1 to 0 strictly decreasing") {
  for (int n : {1, 2, 7, 20, 100}) {
    const auto ts = sampling_timesteps(100, n);
    REQUIRE(static_cast<int>(ts.size()) == n);
    CHECK(ts.front() == 99);
    if (n > 1) CHECK(ts.back() == 0);
    for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
  }
  CHECK_THROWS_AS(sampling_timesteps(100, 0), ConfigError);
  CHECK_THROWS_AS(sampling_timesteps(100, 101), ConfigError);
}

TEST_CASE("ancestral step with full step count is the DDPM posterior") {
  const auto s = make_noise_schedule(50, ScheduleKind::linear);
  const auto z = torch::randn({1, 3, 2, 2}, torch::kFloat64);
  const auto eps = torch::randn({1, 3, 2, 2}, torch::kFloat64);
  const auto noise = torch::randn({1, 3, 2, 2}, torch::kFloat64);
  const int t = 30;
  const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1), beta = s.betas[t];
  const auto x0 = (z - std::sqrt(1 - ab) * eps) / std::sqrt(ab);
  const auto mean = std::sqrt(ab_prev) * beta / (1 - ab) * x0 + std::sqrt(1 - beta) * (1 - ab_prev) / (1 - ab) * z;
  const auto expected = mean + std::sqrt(beta * (1 - ab_prev) / (1 - ab)) * noise;
  CHECK(torch::allclose(ancestral_step(s, z, eps, t, t - 1, noise, false), expected, 1e-12, 1e-12));
  CHECK(torch::allclose(ancestral_step(s, z, eps, t, -1, noise, false), x0, 1e-12, 1e-12));
  CHECK(ancestral_step(s, z * 100, eps, t, -1, noise, true).abs().max().item<double>() <= 1.0);
}

TEST_CASE("seed mixing is deterministic and spreads nearby inputs") {
  CHECK(mix_seed(1, 2) == mix_seed(1, 2));
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
  CHECK(mix_seed(0, 0) != mix_seed(0, 1));
  const auto r = seed_range(10, 3);
  CHECK(r == std::vector<std::uint64_t>{10, 11, 12});
}

TEST_CASE("U-Net tap shapes follow the architecture") {
  const auto arch = dumo::test::tiny_arch();
  const auto shapes = tap_shapes(arch);
  REQUIRE(static_cast<int>(shapes.size()) == arch.skip_count());
  CHECK(arch.skip_count() == 7);
  CHECK(shapes.front().size == 2);
  CHECK(shapes.back().size == 8);
  CHECK(shapes.back().channels == 8);
  auto model = dumo::test::tiny_model();
  const auto state = dumo::test::random_latent(model, 50, 2, 3);
  const auto skips = collect_skip_features(model, state, {1, "a"});
  REQUIRE(static_cast<int>(skips.size()) == arch.skip_count());
  for (int l = 1; l <= arch.skip_count(); ++l) {
    CHECK(skips.layer(l).size(1) == shapes[l - 1].channels);
    CHECK(skips.layer(l).size(2) == shapes[l - 1].size);
  }
  CHECK(predict_noise(model, state, {1, "a"}).sizes() == state.z.sizes());
}

TEST_CASE("architecture validation rejects inconsistent configs") {
  auto a = dumo::test::tiny_arch();
  a.res_blocks = {1, 1};
  CHECK_THROWS_AS(a.validate(), ConfigError);
  a = dumo::test::tiny_arch();
  a.resolution = 6;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  CHECK(arch_from_json(to_json(dumo::test::tiny_arch())).skip_count() == 7);
}

TEST_CASE("model initialisation depends only on the seed") {
  auto a = dumo::test::tiny_model(5), b = dumo::test::tiny_model(5), c = dumo::test::tiny_model(6);
  CHECK(parameter_checksum(*a) == parameter_checksum(*b));
  CHECK(parameter_checksum(*a) != parameter_checksum(*c));
}

TEST_CASE("each image depends only on its own seed") {
  auto model = dumo::test::tiny_model();
  const SamplerConfig cfg{5, true};
  const std::vector<std::uint64_t> seeds{11, 12, 13};
  const auto batch = sample(model, {2, "b"}, cfg, seeds).images;
  const std::vector<std::uint64_t> one{12};
  const auto single = sample(model, {2, "b"}, cfg, one).images;
  CHECK(torch::allclose(batch[1], single[0], 1e-5, 1e-6));
  const auto again = sample(model, {2, "b"}, cfg, seeds).images;
  CHECK(bit_equal(batch, again));
  CHECK_FALSE(torch::equal(batch[0], batch[2]));
}

TEST_CASE("denoise_to lands exactly on the requested timestep") {
  auto model = dumo::test::tiny_model();
  const std::vector<std::uint64_t> seeds{4};
  const SamplerConfig cfg{10, true};
  for (int stop : {99, 60, 13, 0}) {
    const auto st = denoise_to(model, {1, "a"}, cfg, seeds, stop);
    CHECK(st.t == stop);
    CHECK(torch::isfinite(st.z).all().item<bool>());
  }
  const auto start = denoise_to(model, {1, "a"}, cfg, seeds, 99);
  NoiseStreams streams(seeds);
  CHECK(bit_equal(start.z, streams.next({3, 8, 8}, torch::kFloat32)));
  CHECK_THROWS_AS(denoise_to(model, {1, "a"}, cfg, seeds, 100), InputError);
}

TEST_CASE("base checkpoints round-trip bit-exactly") {
  auto model = dumo::test::tiny_model(9);
  const auto dir = dumo::test::scratch("unet_ckpt");
  save_base_unet(model, dir / "m.ckpt");
  auto back = load_base_unet(dir / "m.ckpt");
  CHECK(parameter_checksum(*back) == parameter_checksum(*model));
  CHECK(back->schedule().alpha_bars == model->schedule().alpha_bars);
  const auto st = dumo::test::random_latent(model, 10, 1, 2);
  CHECK(bit_equal(predict_noise(model, st, {3, "c"}), predict_noise(back, st, {3, "c"})));
}

}
