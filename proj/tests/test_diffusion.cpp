#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mssm/diffusion.hpp"
#include "mssm/synthetic.hpp"
#include "mssm/train.hpp"

using namespace mssm;
using Catch::Approx;

TEST_CASE("schedule construction") {
  SECTION("one step uses beta_min") {
    const DiffusionSchedule s = make_schedule(1, 1e-4, 0.02);
    REQUIRE(s.beta[1] == Approx(1e-4));
    REQUIRE(s.alpha_bar[0] == 1.0);
    REQUIRE(s.alpha_bar[1] == Approx(1.0 - 1e-4));
  }
  SECTION("the classic 1000-step ramp ends near 4.0e-5") {
    const DiffusionSchedule s = make_schedule(1000, 1e-4, 0.02);
    // independent log-space product
    double log_ab = 0.0;
    for (int t = 1; t <= 1000; ++t) {
      const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0;
      log_ab += std::log1p(-beta);
    }
    const double oracle = std::exp(log_ab);
    REQUIRE(oracle == Approx(4.0e-5).margin(0.1e-5));
    REQUIRE(s.alpha_bar[1000] == Approx(oracle).epsilon(1e-12));
  }
  SECTION("alpha_bar decreases strictly") {
    const DiffusionSchedule s = make_schedule(64, 5e-3, 0.5);
    for (int t = 1; t <= 64; ++t) REQUIRE(s.alpha_bar[t] < s.alpha_bar[t - 1]);
  }
  SECTION("bound violations are rejected") {
    REQUIRE_THROWS_AS(make_schedule(0, 1e-4, 0.02), std::invalid_argument);
    REQUIRE_THROWS_AS(make_schedule(10, 0.0, 0.02), std::invalid_argument);
    REQUIRE_THROWS_AS(make_schedule(10, 0.03, 0.02), std::invalid_argument);
    REQUIRE_THROWS_AS(make_schedule(10, 0.01, 1.0), std::invalid_argument);
  }
}

TEST_CASE("add_noise follows the closed form") {
  Rng rng(139);
  SECTION("alpha_bar = 0.36 scales noise by 0.8") {
    DiffusionSchedule s;
    s.steps = 1;
    s.beta = {0.0, 0.64};
    s.alpha_bar = {1.0, 0.36};
    const Tensor x0({2, 2});  // zeros
    const Tensor eps = rng.normal_tensor({2, 2});
    const Tensor xt = add_noise(x0, 1, eps, s);
    for (std::int64_t i = 0; i < 4; ++i) REQUIRE(xt[i] == Approx(0.8 * eps[i]).margin(1e-12));
  }
  SECTION("general case matches an independent evaluation") {
    const DiffusionSchedule s = make_schedule(50, 1e-3, 0.1);
    const Tensor x0 = rng.normal_tensor({3, 3});
    const Tensor eps = rng.normal_tensor({3, 3});
    const std::int64_t t = 17;
    const Tensor xt = add_noise(x0, t, eps, s);
    const double ab = s.alpha_bar[t];
    for (std::int64_t i = 0; i < 9; ++i) {
      REQUIRE(xt[i] == Approx(std::sqrt(ab) * x0[i] + std::sqrt(1 - ab) * eps[i]).margin(1e-12));
    }
  }
  SECTION("step bounds are enforced") {
    const DiffusionSchedule s = make_schedule(10, 1e-4, 0.02);
    const Tensor x = Tensor({2});
    REQUIRE_THROWS_AS(add_noise(x, 0, x, s), std::invalid_argument);
    REQUIRE_THROWS_AS(add_noise(x, 11, x, s), std::invalid_argument);
  }
}

TEST_CASE("classifier-free guidance combination") {
  Rng rng(149);
  const Tensor ec = rng.normal_tensor({2, 3});
  const Tensor eu = rng.normal_tensor({2, 3});
  SECTION("s = 1 returns the conditional prediction bit-exactly") {
    REQUIRE(cfg_combine(ec, eu, 1.0).bit_equal(ec));
  }
  SECTION("s = 0 returns the unconditional prediction") {
    REQUIRE(cfg_combine(ec, eu, 0.0).bit_equal(eu));
  }
  SECTION("arithmetic case: 1 + 3 (2 - 1) = 4") {
    const Tensor two = Tensor::full({2}, 2.0);
    const Tensor one = Tensor::full({2}, 1.0);
    const Tensor out = cfg_combine(two, one, 3.0);
    REQUIRE(out[0] == Approx(4.0));
  }
  SECTION("shape mismatch is rejected") {
    REQUIRE_THROWS_AS(cfg_combine(ec, rng.normal_tensor({3, 2}), 2.0), std::invalid_argument);
  }
}

TEST_CASE("ddim sampling") {
  Rng rng(151);
  const DiffusionSchedule sched = make_schedule(40, 1e-4, 0.05);
  const Tensor x0 = rng.normal_tensor({2, 3, 3, 2});
  const Tensor eps = rng.normal_tensor({2, 3, 3, 2});

  SECTION("an oracle supplying the true noise inverts add_noise") {
    const Tensor x_t = add_noise(x0, sched.steps, eps, sched);
    std::vector<std::int64_t> steps;
    for (std::int64_t t = sched.steps; t >= 1; --t) steps.push_back(t);
    const Tensor rec =
        ddim_sample([&](const Tensor&, std::int64_t, bool) { return eps; }, sched, steps, 1.0,
                    x_t);
    REQUIRE(max_abs_diff(rec, x0) < 1e-6);
  }
  SECTION("a single step from T applies the closed-form estimate") {
    const Tensor x_t = add_noise(x0, sched.steps, eps, sched);
    const Tensor rec =
        ddim_sample([&](const Tensor&, std::int64_t, bool) { return eps; }, sched,
                    {sched.steps}, 1.0, x_t);
    REQUIRE(max_abs_diff(rec, x0) < 1e-9);
  }
  SECTION("sampling is deterministic") {
    const EpsModel model = [&](const Tensor& x, std::int64_t, bool) {
      Tensor e = x;
      for (std::int64_t i = 0; i < e.size(); ++i) e[i] = std::tanh(e[i]);
      return e;
    };
    const auto steps = ddim_step_sequence(sched.steps, 8);
    const Tensor a = ddim_sample(model, sched, steps, 2.0, eps);
    const Tensor b = ddim_sample(model, sched, steps, 2.0, eps);
    REQUIRE(a.bit_equal(b));
  }
  SECTION("invalid step sequences are rejected") {
    const EpsModel model = [&](const Tensor&, std::int64_t, bool) { return eps; };
    REQUIRE_THROWS_AS(ddim_sample(model, sched, {}, 1.0, eps), std::invalid_argument);
    REQUIRE_THROWS_AS(ddim_sample(model, sched, {5, 10}, 1.0, eps), std::invalid_argument);
    REQUIRE_THROWS_AS(ddim_sample(model, sched, {99}, 1.0, eps), std::invalid_argument);
  }
}

namespace {

struct DiffusionFixture {
  TokenLayout layout{4, 4, 4, 4};
  MaskSet masks;
  ModelConfig cfg;
  DiffusionSchedule sched = make_schedule(20, 1e-4, 0.05);

  DiffusionFixture() {
    const auto [mouth, face] = default_face_rects(layout);
    masks = make_masks(mouth, face, layout);
    cfg.layout = layout;
    cfg.c_model = 8;
    cfg.d_state = 2;
    cfg.blocks = 1;
  }
};

}  // namespace

TEST_CASE("training loss semantics") {
  DiffusionFixture fx;
  Rng rng(157);
  auto batch = gen_synthetic(4, fx.layout, fx.masks, rng);

  SECTION("a perfect predictor has zero loss") {
    // the predictor recovers eps from x_t and the known clean latent
    std::size_t idx = 0;
    std::vector<const SyntheticItem*> order;
    const EpsPredictor oracle = [&](const Tensor& x_t, std::int64_t t, const SyntheticItem& item,
                                    bool) {
      (void)idx;
      (void)order;
      const double ab = fx.sched.alpha_bar[t];
      Tensor eps = x_t;
      for (std::int64_t i = 0; i < eps.size(); ++i) {
        eps[i] = (x_t[i] - std::sqrt(ab) * item.sample.x0[i]) / std::sqrt(1.0 - ab);
      }
      return eps;
    };
    Rng noise(1);
    const double loss =
        training_loss_value(oracle, fx.cfg, fx.sched, batch, {true, true}, 0.1, noise);
    REQUIRE(loss == Approx(0.0).margin(1e-20));
  }
  SECTION("an all-zero predictor scores about one per element") {
    const EpsPredictor zero = [&](const Tensor& x_t, std::int64_t, const SyntheticItem&, bool) {
      return Tensor(x_t.dims());
    };
    Rng noise(2);
    const double loss =
        training_loss_value(zero, fx.cfg, fx.sched, batch, {true, true}, 0.1, noise);
    REQUIRE(loss == Approx(1.0).margin(0.15));
  }
  SECTION("the loss graph is reproducible bit-exactly for a fixed seed") {
    Rng prng(3);
    DenoiserParams params = init_denoiser(fx.cfg, prng);
    const auto value = [&] {
      Tape tape;
      Binder bind(tape, false);
      DenoiserVars vars = leaf_denoiser(bind, params);
      Rng noise(11);
      return scalar_value(
          training_loss_graph(tape, vars, fx.cfg, fx.sched, batch, {true, true}, 0.1, noise)
              .value());
    };
    const double a = value();
    const double b = value();
    REQUIRE(std::memcmp(&a, &b, sizeof(double)) == 0);
  }
}

TEST_CASE("synthetic data generator") {
  DiffusionFixture fx;
  Rng rng(163);
  const SyntheticItem item = gen_synthetic_one(fx.layout, fx.masks, rng);

  SECTION("masked voxels carry the driving scalars exactly") {
    for (std::int64_t t = 0; t < fx.layout.frames; ++t) {
      for (std::int64_t y = 0; y < fx.layout.height; ++y) {
        for (std::int64_t x = 0; x < fx.layout.width; ++x) {
          const double v = item.sample.x0.at({t, y, x, 0});
          if (fx.masks.audio.at(y, x)) {
            REQUIRE(v == item.sample.audio_signal[static_cast<std::size_t>(t)]);
          } else if (fx.masks.motion.at(y, x)) {
            REQUIRE(v == item.sample.motion_signal[static_cast<std::size_t>(t)]);
          }
        }
      }
    }
    const auto means = region_means(item.sample.x0, fx.masks.audio);
    for (std::int64_t t = 0; t < fx.layout.frames; ++t) {
      REQUIRE(means[static_cast<std::size_t>(t)] ==
              Approx(item.sample.audio_signal[static_cast<std::size_t>(t)]).margin(1e-12));
    }
  }
  SECTION("audio voxels never depend on the motion signal") {
    std::vector<double> other_motion = item.sample.motion_signal;
    for (double& v : other_motion) v = -v;
    const Tensor vol2 = compose_volume(item.cond.reference, item.sample.audio_signal,
                                       other_motion, fx.masks, fx.layout);
    for (std::int64_t t = 0; t < fx.layout.frames; ++t) {
      for (std::int64_t y = 0; y < fx.layout.height; ++y) {
        for (std::int64_t x = 0; x < fx.layout.width; ++x) {
          if (!fx.masks.audio.at(y, x)) continue;
          for (std::int64_t ch = 0; ch < fx.layout.channels; ++ch) {
            REQUIRE(vol2.at({t, y, x, ch}) == item.sample.x0.at({t, y, x, ch}));
          }
        }
      }
    }
  }
  SECTION("generation is reproducible from the seed") {
    Rng r1(42), r2(42);
    const SyntheticItem a = gen_synthetic_one(fx.layout, fx.masks, r1);
    const SyntheticItem b = gen_synthetic_one(fx.layout, fx.masks, r2);
    REQUIRE(a.sample.x0.bit_equal(b.sample.x0));
    REQUIRE(a.cond.e_audio.bit_equal(b.cond.e_audio));
    REQUIRE(a.cond.reference.bit_equal(b.cond.reference));
  }
  SECTION("signals stay in bounds") {
    for (double v : item.sample.audio_signal) {
      REQUIRE(v >= -1.0);
      REQUIRE(v <= 1.0);
    }
  }
}

TEST_CASE("region control metrics") {
  DiffusionFixture fx;
  Rng rng(167);
  const SyntheticItem item = gen_synthetic_one(fx.layout, fx.masks, rng);

  SECTION("the clean latent correlates perfectly with its own signals") {
    const RegionMetrics m = region_control_metrics(item.sample.x0, item.sample.audio_signal,
                                                   item.sample.motion_signal, fx.masks);
    REQUIRE(m.corr_mouth_audio == Approx(1.0).margin(1e-9));
    REQUIRE(m.corr_face_motion == Approx(1.0).margin(1e-9));
  }
  SECTION("pure noise stays mostly uncorrelated at 32 frames") {
    // null distribution, simulated: ~90.6% of independent draws land inside
    // |r| < 0.3 at 32 frames (4000-trial run), matching the t(30) value 0.904
    TokenLayout long_layout{32, 4, 4, 2};
    const auto [mouth, face] = default_face_rects(long_layout);
    const MaskSet masks = make_masks(mouth, face, long_layout);
    int within = 0;
    const int trials = 200;
    for (int i = 0; i < trials; ++i) {
      const Tensor noise = rng.normal_tensor(long_layout.volume_dims());
      std::vector<double> a = smooth_random_walk(32, rng);
      const auto means = region_means(noise, masks.audio);
      if (std::abs(pearson(means, a)) < 0.3) ++within;
    }
    INFO("fraction " << within / static_cast<double>(trials));
    REQUIRE(within >= static_cast<int>(trials * 0.85));
  }
  SECTION("constant regions are rejected") {
    const Tensor flat(fx.layout.volume_dims());
    REQUIRE_THROWS_AS(region_control_metrics(flat, item.sample.audio_signal,
                                             item.sample.motion_signal, fx.masks),
                      std::invalid_argument);
  }
}

TEST_CASE("gate-respecting sampler ignores the closed branch's inputs") {
  DiffusionFixture fx;
  Rng rng(173);
  Rng init(5);
  DenoiserParams params = init_denoiser(fx.cfg, init);
  // give the network nontrivial outputs
  for_each_param(params, [&](const std::string&, Tensor& t) {
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] += 0.05 * rng.normal();
  });
  const SyntheticItem item = gen_synthetic_one(fx.layout, fx.masks, rng);
  SampleOptions opt;
  opt.gates = {true, false};
  opt.guidance = 2.0;
  opt.ddim_steps = 4;
  opt.seed = 77;
  const Tensor a = sample_volume(params, fx.cfg, fx.sched, item.cond, opt);

  ConditionBundle other = item.cond;
  other.e_motion = rng.normal_tensor(other.e_motion.dims());
  const Tensor b = sample_volume(params, fx.cfg, fx.sched, other, opt);
  REQUIRE(a.bit_equal(b));

  SECTION("same seed and gates give bit-identical output") {
    const Tensor c = sample_volume(params, fx.cfg, fx.sched, item.cond, opt);
    REQUIRE(a.bit_equal(c));
  }
}

TEST_CASE("single-signal modes hand the face mask to the open branch") {
  DiffusionFixture fx;
  const auto [ma_dual, mm_dual] = effective_masks(fx.masks, {true, true});
  REQUIRE(ma_dual == &fx.masks.audio);
  REQUIRE(mm_dual == &fx.masks.motion);
  const auto [ma_audio, mm_audio] = effective_masks(fx.masks, {true, false});
  REQUIRE(ma_audio == &fx.masks.face);
  (void)mm_audio;
  const auto [ma_motion, mm_motion] = effective_masks(fx.masks, {false, true});
  REQUIRE(mm_motion == &fx.masks.face);
  (void)ma_motion;
}
